//! Losses, learning-rate schedule, SGD and the teacher-forced training loop.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::DatasetRecord;
use crate::error::{Error, Result};
use crate::model::{ModelDims, Rdn, RdnParams, Variant};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vocab::{Vocabulary, EOS};

/// Mixed into the training seed for the batch order stream, so that it is
/// independent of the initialization stream.
const BATCH_SALT: u64 = 0xD1B5_4A32_D192_ED03;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub total_iters: usize,
    pub batch_size: usize,
    /// Weight of the position loss. Ignored by variants without it.
    pub lambda: f64,
    pub decay_power: f64,
    pub seed: u64,
    pub embed: usize,
    pub hidden: usize,
    pub attention: usize,
    pub variant: Variant,
    /// Maximum global gradient norm; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Vocabulary threshold applied to the training captions.
    pub min_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.5,
            total_iters: 3000,
            batch_size: 10,
            lambda: 0.02,
            decay_power: 1.0,
            seed: 1,
            embed: 32,
            hidden: 64,
            attention: 32,
            variant: Variant::Full,
            grad_clip: Some(5.0),
            min_count: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if self.total_iters == 0 {
            return bad("total_iters must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.decay_power > 0.0 && self.decay_power.is_finite()) {
            return bad(format!(
                "decay_power must be positive, got {}",
                self.decay_power
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        if self.min_count == 0 {
            return bad("min_count must be at least 1".into());
        }
        for (name, v) in [
            ("embed", self.embed),
            ("hidden", self.hidden),
            ("attention", self.attention),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    pub fn dims(&self, region: usize, vocab: usize) -> ModelDims {
        ModelDims {
            region,
            embed: self.embed,
            hidden: self.hidden,
            attention: self.attention,
            vocab,
        }
    }

    /// λ as seen by the objective of the configured variant.
    pub fn effective_lambda(&self) -> f64 {
        if self.variant.uses_position_loss() {
            self.lambda
        } else {
            0.0
        }
    }
}

/// `−Σₜ log softmax(logitsₜ)[goldₜ]`
pub fn loss_xe(tape: &mut Tape, logits: &[Var], gold: &[usize]) -> Result<Var> {
    if logits.len() != gold.len() {
        return Err(Error::Contract(format!(
            "{} logit vectors for {} gold tokens",
            logits.len(),
            gold.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::Domain("cross-entropy over an empty caption".into()));
    }
    let picked = logits
        .iter()
        .zip(gold)
        .map(|(&l, &g)| {
            let lp = tape.log_softmax(l)?;
            tape.select(lp, g)
        })
        .collect::<Result<Vec<_>>>()?;
    let total = tape.add_n(&picked)?;
    Ok(tape.scale(total, -1.0))
}

/// `Σₜ (t/n − pₜ)²` over `t = 1..n`.
pub fn loss_pos(tape: &mut Tape, pos_preds: &[Var], n: usize) -> Result<Var> {
    if n == 0 {
        return Err(Error::Domain("position loss needs n >= 1".into()));
    }
    if pos_preds.len() != n {
        return Err(Error::Contract(format!(
            "{} position predictions for a caption of length {n}",
            pos_preds.len()
        )));
    }
    let terms = pos_preds
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let target = (i + 1) as f64 / n as f64;
            let diff = tape.add_scalar(p, -target);
            tape.mul(diff, diff)
        })
        .collect::<Result<Vec<_>>>()?;
    let total = tape.add_n(&terms)?;
    Ok(tape.sum(total))
}

/// `xe + λ·pos`
pub fn loss_total(tape: &mut Tape, xe: Var, pos: Var, lambda: f64) -> Result<Var> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::Domain(format!("lambda must be >= 0, got {lambda}")));
    }
    let weighted = tape.scale(pos, lambda);
    tape.add(xe, weighted)
}

/// `lr0 · (1 − iter/total)^power`
pub fn poly_decay_lr(lr0: f64, iter: usize, total_iters: usize, power: f64) -> Result<f64> {
    if total_iters == 0 || iter > total_iters {
        return Err(Error::Contract(format!(
            "iteration {iter} outside schedule of {total_iters}"
        )));
    }
    let frac = 1.0 - iter as f64 / total_iters as f64;
    Ok(lr0 * frac.powf(power))
}

/// Clips `grads` to global norm `grad_clip` and applies `θ ← θ − lr·g`.
/// Returns the unclipped global gradient norm.
pub fn sgd_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    names: &[&str],
    lr: f64,
    grad_clip: Option<f64>,
) -> Result<f64> {
    if params.len() != grads.len() || params.len() != names.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} names",
            params.len(),
            grads.len(),
            names.len()
        )));
    }
    for ((p, g), name) in params.iter().zip(grads).zip(names) {
        if p.shape() != g.shape() {
            return Err(Error::dim("sgd_step", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                what: format!("gradient of {name}"),
            });
        }
    }
    let norm = grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt();
    if lr == 0.0 {
        return Ok(norm);
    }
    let scale = match grad_clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    let step = lr * scale;
    for (p, g) in params.iter_mut().zip(grads) {
        for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
            *x -= step * d;
        }
    }
    Ok(norm)
}

/// A record with its caption encoded against a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub regions: Vec<Tensor>,
    /// Gold tokens, ending with `<eos>`.
    pub tokens: Vec<usize>,
}

/// Encodes records, checking that they share one region width and that every
/// caption ends with `<eos>`.
pub fn encode_records(records: &[DatasetRecord], vocab: &Vocabulary) -> Result<Vec<Example>> {
    let mut width = None;
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let regions = r.region_tensors()?;
            for reg in &regions {
                match width {
                    None => width = Some(reg.len()),
                    Some(w) if w != reg.len() => {
                        return Err(Error::Config(format!(
                            "record {i} has region width {}, expected {w}",
                            reg.len()
                        )))
                    }
                    _ => {}
                }
            }
            let tokens = vocab.encode(&r.caption);
            if tokens.last() != Some(&EOS) {
                return Err(Error::Config(format!(
                    "caption of record {i} does not end with <eos>"
                )));
            }
            Ok(Example { regions, tokens })
        })
        .collect()
}

/// Per-caption losses of one teacher-forced pass.
pub struct CaptionLoss {
    pub xe: Var,
    pub pos: Var,
}

pub fn caption_loss(tape: &mut Tape, rdn: &Rdn, ex: &Example) -> Result<CaptionLoss> {
    let image = rdn.prepare_image(tape, &ex.regions)?;
    let outs = rdn.forward_teacher(tape, &image, &ex.tokens)?;
    let logits: Vec<Var> = outs.iter().map(|o| o.logits).collect();
    let pos: Vec<Var> = outs.iter().map(|o| o.pos_pred).collect();
    Ok(CaptionLoss {
        xe: loss_xe(tape, &logits, &ex.tokens)?,
        pos: loss_pos(tape, &pos, ex.tokens.len())?,
    })
}

/// Mean over the batch of per-caption `(xe, pos, total)`. With `λ = 0` the
/// position term is left out of the objective entirely.
pub fn batch_objective(
    tape: &mut Tape,
    rdn: &Rdn,
    batch: &[&Example],
    lambda: f64,
) -> Result<(Var, Var, Var)> {
    if batch.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    let mut xes = Vec::with_capacity(batch.len());
    let mut poss = Vec::with_capacity(batch.len());
    for ex in batch {
        let l = caption_loss(tape, rdn, ex)?;
        xes.push(l.xe);
        poss.push(l.pos);
    }
    let inv = 1.0 / batch.len() as f64;
    let xe_sum = tape.add_n(&xes)?;
    let xe = tape.scale(xe_sum, inv);
    let pos_sum = tape.add_n(&poss)?;
    let pos = tape.scale(pos_sum, inv);
    let total = if lambda > 0.0 {
        loss_total(tape, xe, pos, lambda)?
    } else {
        xe
    };
    Ok((xe, pos, total))
}

/// Endless stream of example indices: seeded permutations, one per epoch.
#[derive(Debug, Clone)]
pub struct BatchStream {
    rng: rng::Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchStream {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut s = BatchStream {
            rng: rng::seeded(seed ^ BATCH_SALT),
            order: (0..len).collect(),
            cursor: 0,
        };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        for i in (1..self.order.len()).rev() {
            let j = rng::index(&mut self.rng, i + 1);
            self.order.swap(i, j);
        }
        self.cursor = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.shuffle();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub iter: usize,
    pub lr: f64,
    pub xe: f64,
    pub pos: f64,
    pub total: f64,
}

impl LogEntry {
    /// `iter<TAB>lr<TAB>xe<TAB>pos<TAB>total`
    pub fn line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.iter, self.lr, self.xe, self.pos, self.total
        )
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogEntry>,
}

/// Builds the vocabulary from `records`, initializes a model and trains it
/// for `config.total_iters` iterations.
pub fn train(records: &[DatasetRecord], config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(records, config, |_| {})
}

pub fn train_with(
    records: &[DatasetRecord],
    config: &TrainConfig,
    on_iter: impl FnMut(&LogEntry),
) -> Result<TrainOutcome> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::Domain("cannot train on an empty dataset".into()));
    }
    let captions: Vec<&[String]> = records.iter().map(|r| r.caption.as_slice()).collect();
    let vocab = Vocabulary::build(&captions, config.min_count)?;
    let examples = encode_records(records, &vocab)?;
    let region = examples[0].regions[0].len();
    let params = RdnParams::init(
        config.dims(region, vocab.len()),
        config.variant,
        config.seed,
    )?;
    let start = Checkpoint {
        params,
        vocab,
        iteration: 0,
        seed: config.seed,
    };
    resume_with(start, &examples, config, on_iter)
}

/// Continues training `checkpoint` on already encoded `examples` until
/// `config.total_iters`. The learning-rate schedule and the batch order pick
/// up at the checkpoint's iteration, so a resumed run matches an
/// uninterrupted one.
pub fn resume_with(
    checkpoint: Checkpoint,
    examples: &[Example],
    config: &TrainConfig,
    on_iter: impl FnMut(&LogEntry),
) -> Result<TrainOutcome> {
    resume_until(checkpoint, examples, config, config.total_iters, on_iter)
}

/// [`resume_with`] that stops after iteration `stop - 1` of the configured
/// schedule.
pub fn resume_until(
    checkpoint: Checkpoint,
    examples: &[Example],
    config: &TrainConfig,
    stop: usize,
    mut on_iter: impl FnMut(&LogEntry),
) -> Result<TrainOutcome> {
    config.validate()?;
    if stop > config.total_iters {
        return Err(Error::Config(format!(
            "stop iteration {stop} past total_iters {}",
            config.total_iters
        )));
    }
    if examples.is_empty() {
        return Err(Error::Domain("cannot train on an empty dataset".into()));
    }
    let Checkpoint {
        mut params,
        vocab,
        iteration,
        seed,
    } = checkpoint;
    if iteration > stop {
        return Err(Error::Config(format!(
            "checkpoint is at iteration {iteration}, past {stop}"
        )));
    }
    if params.variant != config.variant {
        return Err(Error::Config(format!(
            "checkpoint variant {} differs from configured variant {}",
            params.variant, config.variant
        )));
    }
    let region = params.dims.region;
    for (i, ex) in examples.iter().enumerate() {
        if ex.regions.iter().any(|r| r.len() != region) {
            return Err(Error::Config(format!(
                "record {i} region width does not match model width {region}"
            )));
        }
        if let Some(&t) = ex.tokens.iter().find(|&&t| t >= vocab.len()) {
            return Err(Error::Config(format!(
                "record {i} has token id {t} outside the vocabulary of {}",
                vocab.len()
            )));
        }
    }

    let lambda = config.effective_lambda();
    let mut stream = BatchStream::new(examples.len(), seed);
    for _ in 0..iteration {
        stream.next_batch(config.batch_size);
    }
    let named: Vec<String> = params.weights.named().into_iter().map(|(n, _)| n).collect();
    let names: Vec<&str> = named.iter().map(String::as_str).collect();

    let mut log = Vec::with_capacity(stop - iteration);
    for iter in iteration..stop {
        let lr = poly_decay_lr(config.lr0, iter, config.total_iters, config.decay_power)?;
        let batch: Vec<&Example> = stream
            .next_batch(config.batch_size)
            .into_iter()
            .map(|i| &examples[i])
            .collect();

        let mut tape = Tape::new();
        let rdn = params.bind(&mut tape);
        let (xe, pos, total) = batch_objective(&mut tape, &rdn, &batch, lambda)?;
        let entry = LogEntry {
            iter,
            lr,
            xe: tape.scalar(xe)?,
            pos: tape.scalar(pos)?,
            total: tape.scalar(total)?,
        };
        if !entry.total.is_finite() {
            return Err(Error::NonFinite {
                what: format!("training loss at iteration {iter}"),
            });
        }
        let grads = tape.backward(total)?;
        let grad_list: Vec<Tensor> = rdn
            .weights
            .named()
            .into_iter()
            .map(|(_, &v)| grads.wrt(v).clone())
            .collect();
        drop(tape);

        let mut flat: Vec<Tensor> = params
            .weights
            .named()
            .into_iter()
            .map(|(_, t)| t.clone())
            .collect();
        sgd_step(&mut flat, &grad_list, &names, lr, config.grad_clip)?;
        params.weights = params.weights.from_ordered(flat)?;

        on_iter(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            params,
            vocab,
            iteration: stop,
            seed,
        },
        log,
    })
}

/// Teacher-forced diagnostics over a set of examples.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherForced {
    /// Argmax prediction at every step of every example.
    pub predictions: Vec<Vec<usize>>,
    /// Predicted relative position at every step of every example.
    pub positions: Vec<Vec<f64>>,
}

impl TeacherForced {
    /// Fraction of steps whose argmax equals the gold token.
    pub fn token_accuracy(&self, examples: &[Example]) -> f64 {
        let mut hit = 0usize;
        let mut total = 0usize;
        for (pred, ex) in self.predictions.iter().zip(examples) {
            hit += pred.iter().zip(&ex.tokens).filter(|(a, b)| a == b).count();
            total += ex.tokens.len();
        }
        hit as f64 / total.max(1) as f64
    }

    /// Accuracy at step `index` of each example (examples shorter than that
    /// are skipped).
    pub fn accuracy_at(&self, examples: &[Example], index: usize) -> f64 {
        let mut hit = 0usize;
        let mut total = 0usize;
        for (pred, ex) in self.predictions.iter().zip(examples) {
            if let (Some(p), Some(g)) = (pred.get(index), ex.tokens.get(index)) {
                hit += usize::from(p == g);
                total += 1;
            }
        }
        hit as f64 / total.max(1) as f64
    }

    /// Mean of `|pₜ − t/n|` over every step of every example.
    pub fn mean_position_error(&self) -> f64 {
        let mut acc = 0.0;
        let mut count = 0usize;
        for ps in &self.positions {
            let n = ps.len() as f64;
            for (i, p) in ps.iter().enumerate() {
                acc += (p - (i + 1) as f64 / n).abs();
                count += 1;
            }
        }
        acc / count.max(1) as f64
    }
}

pub fn teacher_forced(params: &RdnParams, examples: &[Example]) -> Result<TeacherForced> {
    let mut predictions = Vec::with_capacity(examples.len());
    let mut positions = Vec::with_capacity(examples.len());
    for ex in examples {
        let mut tape = Tape::new();
        let rdn = params.bind(&mut tape);
        let image = rdn.prepare_image(&mut tape, &ex.regions)?;
        let outs = rdn.forward_teacher(&mut tape, &image, &ex.tokens)?;
        predictions.push(outs.iter().map(|o| tape.value(o.logits).argmax()).collect());
        positions.push(
            outs.iter()
                .map(|o| tape.scalar(o.pos_pred))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(TeacherForced {
        predictions,
        positions,
    })
}
