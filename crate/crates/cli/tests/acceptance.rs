//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 2 3`.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rdn_core::checkpoint::Checkpoint;
use rdn_core::data::{generate_splits, DatasetRecord, GeneratorConfig};
use rdn_core::decode::{beam_search, greedy_search, trace_tokens, RdnStepper, StepModel};
use rdn_core::metrics::{bleu, cider, cider_per_image, corpus_eval, rouge_l};
use rdn_core::model::{ModelDims, RdnParams, Variant};
use rdn_core::train::{encode_records, poly_decay_lr, teacher_forced, train, TrainConfig};
use rdn_core::vocab::{BOS, EOS};
use rdn_core::{rng, Tensor};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

type Criterion = (&'static str, fn() -> Verdict);

const CRITERIA: [Criterion; 9] = [
    ("gradient correctness", gradient_correctness),
    ("attention invariants", attention_invariants),
    ("beam correctness", beam_correctness),
    ("memorization", memorization),
    ("ablation direction", ablation_direction),
    ("position head", position_head),
    ("metric oracles", metric_oracles),
    ("determinism and serialization", determinism),
    ("learning-rate schedule", lr_schedule),
];

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (i, (name, run)) in CRITERIA.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let v = run();
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {n} {status}: {name} ({}; {:.1}s)",
            v.detail,
            start.elapsed().as_secs_f64()
        );
        failed += usize::from(!v.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_rdn"))
        .args([
            "gradcheck",
            "--dims",
            "tiny",
            "--seed",
            "1",
            "--eps",
            "1e-5",
        ])
        .output()
        .expect("spawn rdn");
    let elapsed = start.elapsed();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let err = stdout
        .lines()
        .find_map(|l| l.strip_prefix("max relative error "))
        .and_then(|v| v.parse::<f64>().ok());
    let Some(err) = err else {
        return verdict(false, format!("unreadable gradcheck output: {stdout}"));
    };
    verdict(
        out.status.success() && err <= 1e-4 && elapsed < Duration::from_secs(30),
        format!(
            "max rel error {err:.2e} <= 1e-4 in {:.1}s < 30s",
            elapsed.as_secs_f64()
        ),
    )
}

fn random_regions(r: &mut rng::Rng, k: usize, d: usize) -> Vec<Tensor> {
    (0..k)
        .map(|_| Tensor::vector((0..d).map(|_| rng::standard_normal(r)).collect()))
        .collect()
}

fn attention_invariants() -> Verdict {
    let mut r = rng::seeded(2024);
    let mut steps = 0usize;
    let mut worst_sum = 0.0f64;
    let mut worst_min = f64::INFINITY;
    let mut worst_first = 0.0f64;
    let mut model = 0u64;
    while steps < 1000 {
        let dims = ModelDims {
            region: 2 + rng::index(&mut r, 6),
            embed: 2 + rng::index(&mut r, 6),
            hidden: 2 + rng::index(&mut r, 8),
            attention: 2 + rng::index(&mut r, 6),
            vocab: 5 + rng::index(&mut r, 10),
        };
        let variant = if model.is_multiple_of(4) {
            Variant::RefOnly
        } else {
            Variant::Full
        };
        let mut p = RdnParams::init(dims, variant, model).unwrap();
        let scale = [1.0, 5.0, 30.0][rng::index(&mut r, 3)];
        p.weights
            .visit_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|x| *x *= scale));
        let k = 1 + rng::index(&mut r, 6);
        let regions = random_regions(&mut r, k, dims.region);
        let len = 1 + rng::index(&mut r, 20);
        let tokens: Vec<usize> = (0..len).map(|_| rng::index(&mut r, dims.vocab)).collect();
        let trace = trace_tokens(&p, &regions, &tokens).unwrap();
        for s in &trace.steps {
            for alpha in [&s.alpha_vis, &s.alpha_ref] {
                worst_sum = worst_sum.max((alpha.iter().sum::<f64>() - 1.0).abs());
                worst_min = alpha.iter().fold(worst_min, |m, &a| m.min(a));
            }
            if s.t == 1 {
                worst_first = worst_first.max((s.alpha_ref[0] - 1.0).abs());
                if s.alpha_ref.len() != 1 {
                    return verdict(false, "alpha_ref at t=1 has more than one entry");
                }
            }
            steps += 1;
        }
        model += 1;
    }
    verdict(
        worst_min >= 0.0 && worst_sum <= 1e-10 && worst_first <= 1e-12,
        format!(
            "{steps} steps over {model} models: min alpha {worst_min:.1e} >= 0, max |sum-1| {worst_sum:.1e} <= 1e-10, \
             max |alpha_ref(1)-1| {worst_first:.1e} <= 1e-12"
        ),
    )
}

/// Best sequence by total log-probability over every path that ends in
/// `<eos>` or reaches `max_len`, enumerated depth-first.
fn exhaustive<M: StepModel>(m: &M, max_len: usize) -> Vec<usize> {
    fn go<M: StepModel>(
        m: &M,
        state: &M::State,
        prev: usize,
        lp: f64,
        seq: &mut Vec<usize>,
        max_len: usize,
        best: &mut (f64, Vec<usize>),
    ) {
        let (dist, next) = m.advance(state, prev).unwrap();
        for (tok, &l) in dist.iter().enumerate() {
            seq.push(tok);
            if tok == EOS || seq.len() == max_len {
                if lp + l > best.0 || (lp + l == best.0 && *seq < best.1) {
                    *best = (lp + l, seq.clone());
                }
            } else {
                go(m, &next, tok, lp + l, seq, max_len, best);
            }
            seq.pop();
        }
    }
    let mut best = (f64::NEG_INFINITY, Vec::new());
    go(
        m,
        &m.initial_state().unwrap(),
        BOS,
        0.0,
        &mut Vec::new(),
        max_len,
        &mut best,
    );
    if best.1.last() == Some(&EOS) {
        best.1.pop();
    }
    best.1
}

fn tiny_model(r: &mut rng::Rng, seed: u64, vocab: usize) -> (RdnParams, Vec<Tensor>) {
    let dims = ModelDims {
        region: 4,
        embed: 3,
        hidden: 5,
        attention: 3,
        vocab,
    };
    let variant = Variant::ALL[(seed % 4) as usize];
    let mut p = RdnParams::init(dims, variant, seed).unwrap();
    // sharpen the distributions so the best path is not always greedy
    p.weights
        .visit_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|x| *x *= 25.0));
    let k = 2 + rng::index(r, 3);
    let regions = random_regions(r, k, dims.region);
    (p, regions)
}

/// Greedy caption without its closing `<eos>`, as beam hypotheses are reported.
fn greedy<M: StepModel>(m: &M, max_len: usize) -> Vec<usize> {
    let mut out = greedy_search(m, max_len).unwrap();
    if out.last() == Some(&EOS) {
        out.pop();
    }
    out
}

fn beam_correctness() -> Verdict {
    let mut r = rng::seeded(7);
    let mut exact = 0;
    let mut not_greedy = 0;
    for seed in 0..50u64 {
        let vocab = 3 + rng::index(&mut r, 2);
        let max_len = 1 + rng::index(&mut r, 4);
        let (p, regions) = tiny_model(&mut r, seed, vocab);
        let m = RdnStepper::new(&p, &regions).unwrap();
        let best = exhaustive(&m, max_len);
        let beam = beam_search(&m, vocab.pow(max_len as u32), max_len, false).unwrap();
        exact += usize::from(beam[0].tokens == best);
        not_greedy += usize::from(greedy(&m, max_len) != best);
    }
    let mut agree = 0;
    for seed in 0..100u64 {
        let vocab = 4 + rng::index(&mut r, 8);
        let max_len = 1 + rng::index(&mut r, 10);
        let (p, regions) = tiny_model(&mut r, 1000 + seed, vocab);
        let m = RdnStepper::new(&p, &regions).unwrap();
        let beam = beam_search(&m, 1, max_len, false).unwrap();
        agree += usize::from(beam[0].tokens == greedy(&m, max_len));
    }
    verdict(
        exact == 50 && agree == 100,
        format!(
            "full-width beam optimal on {exact}/50 ({not_greedy} where greedy is not), beam 1 equals greedy on {agree}/100"
        ),
    )
}

fn records(
    train_count: usize,
    test_count: usize,
    seed: u64,
) -> (Vec<DatasetRecord>, Vec<DatasetRecord>) {
    let s = generate_splits(&GeneratorConfig {
        train_count,
        val_count: 0,
        test_count,
        seed,
        ..Default::default()
    })
    .unwrap();
    (s.train, s.test)
}

fn memorization() -> Verdict {
    let start = Instant::now();
    let (data, _) = records(20, 0, 11);
    let cfg = TrainConfig {
        total_iters: 2000,
        batch_size: 20,
        lr0: 1.0,
        embed: 32,
        hidden: 64,
        min_count: 1,
        variant: Variant::Full,
        ..Default::default()
    };
    let ck = train(&data, &cfg).unwrap().checkpoint;
    let ex = encode_records(&data, &ck.vocab).unwrap();
    let acc = teacher_forced(&ck.params, &ex).unwrap().token_accuracy(&ex);
    let elapsed = start.elapsed();
    verdict(
        acc >= 0.99 && elapsed < Duration::from_secs(600),
        format!(
            "teacher-forced accuracy {:.2}% >= 99% after {} iterations in {:.0}s < 600s",
            100.0 * acc,
            cfg.total_iters,
            elapsed.as_secs_f64()
        ),
    )
}

/// Caption index of the final-clause color word, which repeats the first
/// object's color from eight tokens earlier.
const FINAL_COLOR: usize = 12;

fn ablation_config(variant: Variant, seed: u64) -> TrainConfig {
    TrainConfig {
        total_iters: 4000,
        batch_size: 10,
        lr0: 0.5,
        grad_clip: Some(1.0),
        seed,
        variant,
        ..Default::default()
    }
}

struct AblationRun {
    color_acc: f64,
    cider: f64,
    checkpoint: Checkpoint,
    train: Vec<DatasetRecord>,
}

fn ablation_run(variant: Variant, seed: u64) -> AblationRun {
    let (train_set, test_set) = records(200, 50, seed);
    let ck = train(&train_set, &ablation_config(variant, seed))
        .unwrap()
        .checkpoint;
    let ex = encode_records(&test_set, &ck.vocab).unwrap();
    assert!(ex.iter().all(|e| e.tokens[FINAL_COLOR] == e.tokens[2]));
    let color_acc = teacher_forced(&ck.params, &ex)
        .unwrap()
        .accuracy_at(&ex, FINAL_COLOR);
    let cider = corpus_eval(&ck, &test_set, 5, 20, None).unwrap().cider;
    AblationRun {
        color_acc,
        cider,
        checkpoint: ck,
        train: train_set,
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

thread_local! {
    static FULL_RUNS: std::cell::RefCell<Vec<AblationRun>> = const { std::cell::RefCell::new(Vec::new()) };
}

fn full_runs() -> Vec<(f64, f64)> {
    FULL_RUNS.with(|runs| {
        let mut runs = runs.borrow_mut();
        if runs.is_empty() {
            runs.extend((1..=3).map(|seed| ablation_run(Variant::Full, seed)));
        }
        runs.iter().map(|r| (r.color_acc, r.cider)).collect()
    })
}

fn ablation_direction() -> Verdict {
    let full = full_runs();
    let base: Vec<AblationRun> = (1..=3)
        .map(|seed| ablation_run(Variant::Baseline, seed))
        .collect();
    let full_color = median(full.iter().map(|r| r.0).collect());
    let base_color = median(base.iter().map(|r| r.color_acc).collect());
    let full_cider = median(full.iter().map(|r| r.1).collect());
    let base_cider = median(base.iter().map(|r| r.cider).collect());
    let gap = 100.0 * (full_color - base_color);
    let fmt = |xs: Vec<f64>| {
        xs.iter()
            .map(|x| format!("{x:.2}"))
            .collect::<Vec<_>>()
            .join("/")
    };
    verdict(
        gap >= 5.0 && full_cider >= base_cider,
        format!(
            "final color accuracy full {} vs baseline {}, median gap {gap:.1} points >= 5; median CIDEr full {full_cider:.3} >= baseline {base_cider:.3}",
            fmt(full.iter().map(|r| r.0).collect()),
            fmt(base.iter().map(|r| r.color_acc).collect()),
        ),
    )
}

fn position_head() -> Verdict {
    full_runs();
    FULL_RUNS.with(|runs| {
        let runs = runs.borrow();
        let run = &runs[0];
        let ex = encode_records(&run.train, &run.checkpoint.vocab).unwrap();
        let err = teacher_forced(&run.checkpoint.params, &ex)
            .unwrap()
            .mean_position_error();
        verdict(
            err <= 0.1,
            format!("mean |p - t/n| over the training set {err:.4} <= 0.1"),
        )
    })
}

fn toks(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn metric_oracles() -> Verdict {
    let mut failures = Vec::new();
    let mut exact = |name: &str, got: f64, want: f64| {
        if got != want {
            failures.push(format!("{name}: {got} != {want}"));
        }
    };
    // identity and disjoint cases are exact
    let same = vec![toks("a red box left-of a blue cup")];
    let same_ref = vec![vec![same[0].clone()]];
    let other = vec![toks("x y z w v u t")];
    exact("bleu4 identity", bleu(&same, &same_ref, 4).unwrap()[3], 1.0);
    exact("rouge identity", rouge_l(&same, &same_ref).unwrap(), 1.0);
    exact(
        "bleu1 disjoint",
        bleu(&other, &same_ref, 4).unwrap()[0],
        0.0,
    );
    exact("rouge disjoint", rouge_l(&other, &same_ref).unwrap(), 0.0);
    // four words each, so every n-gram order up to 4 is present
    let two = vec![toks("a b c d"), toks("e f g h")];
    let two_ref = vec![vec![toks("a b c d")], vec![toks("e f g h")]];
    exact("cider identity", cider(&two, &two_ref).unwrap(), 10.0);
    exact(
        "cider disjoint",
        cider(&[toks("x y"), toks("z w")], &two_ref).unwrap(),
        0.0,
    );

    let mut worst = 0.0f64;
    let mut close = |name: &str, got: f64, want: f64| {
        let d = (got - want).abs();
        worst = worst.max(d);
        if d > 1e-9 {
            failures.push(format!("{name}: {got} vs {want}"));
        }
    };
    // 3/4 unigrams, 1/3 bigrams, no trigram or 4-gram matches (smoothed to
    // 1/3 and 1/2), brevity penalty for length 4 against 5
    let s = bleu(
        &[toks("the dog sat on")],
        &[vec![toks("the cat sat on mat")]],
        4,
    )
    .unwrap();
    let bp = (1.0f64 - 5.0 / 4.0).exp();
    close("bleu1", s[0], bp * 0.75);
    close("bleu2", s[1], bp * (0.75f64 / 3.0).sqrt());
    close("bleu4", s[3], bp * (0.75f64 / 3.0 / 3.0 * 0.5).powf(0.25));
    close(
        "bleu clipping",
        bleu(&[toks("the the the")], &[vec![toks("the cat")]], 1).unwrap()[0],
        1.0 / 3.0,
    );
    // LCS 3 of 4 candidate words and 3 of 3 reference words
    let (p, rc, b2) = (0.75, 1.0, 1.2);
    close(
        "rouge lcs",
        rouge_l(&[toks("a b c d")], &[vec![toks("a c d")]]).unwrap(),
        (1.0 + b2) * p * rc / (rc + b2 * p),
    );
    // only "a b" matches "a b"; "a" has zero idf, so image one scores 10 (1 + 1) / 4
    let per = cider_per_image(
        &[toks("a b"), toks("a d")],
        &[vec![toks("a b")], vec![toks("a c")]],
    )
    .unwrap();
    close("cider image 1", per[0], 5.0);
    close("cider image 2", per[1], 0.0);
    // a length gap of two costs exp(-4 / 72)
    let per = cider_per_image(
        &[toks("a b a b"), toks("c d")],
        &[vec![toks("a b")], vec![toks("c d")]],
    )
    .unwrap();
    close(
        "cider length penalty",
        per[0],
        10.0 * (-4.0f64 / 72.0).exp() * (0.5 + 1.0 / 5f64.sqrt()) / 4.0,
    );

    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            format!("6 exact cases, 8 hand-computed cases within {worst:.1e} <= 1e-9")
        } else {
            failures.join("; ")
        },
    )
}

fn determinism() -> Verdict {
    let (data, _) = records(12, 0, 5);
    let cfg = TrainConfig {
        total_iters: 50,
        batch_size: 4,
        embed: 8,
        hidden: 16,
        attention: 8,
        min_count: 1,
        ..Default::default()
    };
    let a = train(&data, &cfg).unwrap().checkpoint;
    let b = train(&data, &cfg).unwrap().checkpoint;
    let same_run = a.payload() == b.payload() && a.manifest().unwrap() == b.manifest().unwrap();

    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    a.save(&first).unwrap();
    Checkpoint::load(&first).unwrap().save(&second).unwrap();
    let round_trip = ["manifest", "bin"].iter().all(|ext| {
        std::fs::read(first.with_extension(ext)).unwrap()
            == std::fs::read(second.with_extension(ext)).unwrap()
    });
    verdict(
        same_run && round_trip,
        format!("same-seed checkpoints identical: {same_run}; save, load, save byte-identical: {round_trip}"),
    )
}

fn lr_schedule() -> Verdict {
    let start = poly_decay_lr(0.01, 0, 70_000, 1.0).unwrap();
    let end = poly_decay_lr(0.01, 70_000, 70_000, 1.0).unwrap();
    verdict(
        start == 0.01 && end == 0.0,
        format!("lr(0) = {start}, lr(70000) = {end}"),
    )
}
