//! `rdn`: generate toy data, train, caption, evaluate and gradient-check the
//! reflective decoding network.
//!
//! Exit codes: 0 success, 1 check failure, 2 configuration, usage or IO
//! error, 3 numerical failure.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rdn_core::checkpoint::{self, Checkpoint};
use rdn_core::data::{generate_splits, read_dataset, write_dataset, DatasetRecord};
use rdn_core::decode::{beam_decode, export_trace, greedy_decode, trace_tokens, TraceFormat};
use rdn_core::metrics::{corpus_eval, score_corpus};
use rdn_core::model::{ModelDims, Variant};
use rdn_core::reference::{gradcheck_fixture, precise_grad_check};
use rdn_core::train::{encode_records, resume_with, train_with, TrainConfig};
use rdn_core::vocab::EOS;
use rdn_core::{Error, Tensor};
use serde::Deserialize;

use crate::config::CliConfig;

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "rdn", version, about = "Reflective decoding network captioner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/val/test JSON-lines files of synthetic scenes.
    GenData(GenDataArgs),
    /// Train a decoder and write a checkpoint plus a per-iteration log.
    Train(TrainArgs),
    /// Caption one record with beam search.
    Caption(CaptionArgs),
    /// Score a checkpoint's beam-search captions against a dataset.
    Eval(EvalArgs),
    /// Check tape gradients of a tiny model against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of training scenes.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    val_count: Option<usize>,
    #[arg(long)]
    test_count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training JSON-lines file, or a directory holding `train.jsonl`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Output prefix: writes `<out>.manifest`, `<out>.bin` and `<out>.log`.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint prefix.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    min_count: Option<usize>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Required vocabulary fingerprint of the checkpoint.
    #[arg(long)]
    fingerprint: Option<String>,
}

#[derive(Args)]
struct CaptionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A JSON record (`{"regions": [[...], ...]}`) or a file of them.
    #[arg(long)]
    record: String,
    /// Which line of a multi-record file to caption.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Take the argmax at every step instead of running beam search.
    #[arg(long)]
    greedy: bool,
    /// Write the attention trace as JSON.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write the reflective attention graph in DOT.
    #[arg(long)]
    dot: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Evaluation JSON-lines file, or a directory holding `test.jsonl`.
    #[arg(long)]
    data: PathBuf,
    /// Score the references against themselves instead of a model.
    #[arg(long)]
    oracle: bool,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum DimsPreset {
    Tiny,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "tiny")]
    dims: DimsPreset,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Perturb this parameter's analytic gradient before comparing.
    #[arg(long, hide = true)]
    corrupt_gradient: Option<String>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// A failed run: either a check that did not pass or an error.
enum Failure {
    Check(String),
    Error(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Caption(a) => caption(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn load_config(
    path: Option<&Path>,
    apply: impl FnOnce(&mut CliConfig),
) -> Result<CliConfig, Error> {
    let mut config = CliConfig::load(path)?;
    apply(&mut config);
    config.validate()?;
    eprintln!("effective config: {}", config.summary());
    Ok(config)
}

fn gen_data(a: GenDataArgs) -> Outcome {
    let config = load_config(a.config.as_deref(), |c| {
        set(&mut c.data.train_count, a.count);
        set(&mut c.data.val_count, a.val_count);
        set(&mut c.data.test_count, a.test_count);
        set(&mut c.data.seed, a.seed);
    })?;
    let splits = generate_splits(&config.data)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for (name, records) in [
        ("train", &splits.train),
        ("val", &splits.val),
        ("test", &splits.test),
    ] {
        write_dataset(records, a.out.join(format!("{name}.jsonl")))?;
        println!("{name} {}", records.len());
    }
    Ok(())
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn data_file(path: &Path, default_name: &str) -> PathBuf {
    if path.is_dir() {
        path.join(default_name)
    } else {
        path.to_path_buf()
    }
}

fn train(a: TrainArgs) -> Outcome {
    let config = load_config(a.config.as_deref(), |c| {
        set(&mut c.train.variant, a.variant);
        set(&mut c.train.total_iters, a.iters);
        set(&mut c.train.lr0, a.lr);
        set(&mut c.train.batch_size, a.batch_size);
        set(&mut c.train.lambda, a.lambda);
        set(&mut c.train.seed, a.seed);
        set(&mut c.train.min_count, a.min_count);
    })?;
    let cfg: &TrainConfig = &config.train;
    let records = read_dataset(data_file(&a.data, "train.jsonl"))?;
    if records.is_empty() {
        return Err(Error::Config("training set is empty".into()).into());
    }

    let log_path = with_suffix(&a.out, "log");
    let log_file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = std::io::BufWriter::new(log_file);
    let mut write_err = None;
    let every = (cfg.total_iters / 20).max(1);
    let on_iter = |e: &rdn_core::train::LogEntry| {
        if let Err(err) = writeln!(log, "{}", e.line()) {
            write_err.get_or_insert(err);
        }
        if (e.iter + 1).is_multiple_of(every) {
            eprintln!(
                "iter {} xe {:.4} pos {:.4} lr {:.5}",
                e.iter + 1,
                e.xe,
                e.pos,
                e.lr
            );
        }
    };

    let outcome = match &a.resume {
        Some(prefix) => {
            let ck = Checkpoint::load(prefix)?;
            let examples = encode_records(&records, &ck.vocab)?;
            ck.check_dims(cfg.dims(ck.params.dims.region, ck.vocab.len()))?;
            resume_with(ck, &examples, cfg, on_iter)?
        }
        None => train_with(&records, cfg, on_iter)?,
    };
    if let Some(err) = write_err {
        return Err(Error::io(&log_path, err).into());
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    outcome.checkpoint.save(&a.out)?;

    let last = outcome.log.last();
    println!(
        "trained {} to iteration {} (vocab {}, {} parameters){}",
        outcome.checkpoint.params.variant,
        outcome.checkpoint.iteration,
        outcome.checkpoint.vocab.len(),
        outcome.checkpoint.params.num_parameters(),
        last.map(|e| format!(", final xe {:.4}", e.xe))
            .unwrap_or_default()
    );
    println!("checkpoint {}", checkpoint::manifest_path(&a.out).display());
    Ok(())
}

fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn decode_config(d: &DecodeArgs) -> Result<CliConfig, Error> {
    load_config(d.config.as_deref(), |c| {
        set(&mut c.decode.beam_size, d.beam);
        set(&mut c.decode.max_len, d.max_len);
    })
}

fn load_checkpoint(path: &Path, fingerprint: Option<&str>) -> Result<Checkpoint, Error> {
    let ck = Checkpoint::load(path)?;
    if let Some(fp) = fingerprint {
        ck.check_fingerprint(fp)?;
    }
    Ok(ck)
}

#[derive(Deserialize)]
struct RegionInput {
    regions: Vec<Vec<f64>>,
}

fn read_regions(arg: &str, index: usize) -> Result<Vec<Tensor>, Error> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        std::fs::read_to_string(arg).map_err(|e| Error::io(arg, e))?
    };
    let (line_no, line) = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .nth(index)
        .ok_or_else(|| Error::Config(format!("no record at index {index}")))?;
    let input: RegionInput = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no + 1,
        message: e.to_string(),
    })?;
    if input.regions.is_empty() {
        return Err(Error::Config("record has no regions".into()));
    }
    Ok(input.regions.into_iter().map(Tensor::vector).collect())
}

fn caption(a: CaptionArgs) -> Outcome {
    let config = decode_config(&a.decode)?;
    let ck = load_checkpoint(&a.checkpoint, a.decode.fingerprint.as_deref())?;
    let regions = read_regions(&a.record, a.index)?;
    if let Some(r) = regions.iter().find(|r| r.len() != ck.params.dims.region) {
        return Err(Error::Config(format!(
            "region width {} does not match the model's {}",
            r.len(),
            ck.params.dims.region
        ))
        .into());
    }
    let tokens = if a.greedy {
        greedy_decode(&ck.params, &regions, config.decode.max_len)?.0
    } else {
        let hyps = beam_decode(
            &ck.params,
            &regions,
            config.decode.beam_size,
            config.decode.max_len,
            config.decode.length_norm,
        )?;
        hyps.into_iter()
            .next()
            .map(|h| h.tokens)
            .unwrap_or_default()
    };
    let words = tokens
        .iter()
        .map(|&t| ck.vocab.token(t))
        .collect::<Result<Vec<_>, _>>()?;
    println!("{}", words.join(" "));

    if a.trace.is_some() || a.dot.is_some() {
        let mut emitted = tokens.clone();
        if emitted.len() < config.decode.max_len {
            emitted.push(EOS);
        }
        let trace = trace_tokens(&ck.params, &regions, &emitted)?;
        for (path, format) in [(&a.trace, TraceFormat::Json), (&a.dot, TraceFormat::Dot)] {
            if let Some(p) = path {
                let text = export_trace(&trace, &ck.vocab, format)?;
                std::fs::write(p, text + "\n").map_err(|e| Error::io(p, e))?;
            }
        }
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Outcome {
    let config = decode_config(&a.decode)?;
    let records: Vec<DatasetRecord> = read_dataset(data_file(&a.data, "test.jsonl"))?;
    let report = if a.oracle {
        let refs: Vec<Vec<Vec<String>>> =
            records.iter().map(|r| vec![r.words().to_vec()]).collect();
        let cands: Vec<Vec<String>> = refs.iter().map(|r| r[0].clone()).collect();
        score_corpus(&cands, &refs)?
    } else {
        let path = a
            .checkpoint
            .as_deref()
            .expect("clap requires a checkpoint without --oracle");
        let ck = load_checkpoint(path, None)?;
        corpus_eval(
            &ck,
            &records,
            config.decode.beam_size,
            config.decode.max_len,
            a.decode.fingerprint.as_deref(),
        )?
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(Error::from)?
    );
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Outcome {
    let dims = match a.dims {
        DimsPreset::Tiny => ModelDims {
            region: 6,
            embed: 8,
            hidden: 10,
            attention: 6,
            vocab: 12,
        },
    };
    let lambda = TrainConfig::default().lambda;
    let (params, example) = gradcheck_fixture(dims, a.seed)?;
    let report = precise_grad_check(
        &params,
        &[example],
        lambda,
        a.eps,
        a.corrupt_gradient.as_deref(),
    )?;
    println!("max relative error {:.3e}", report.max_rel_error);
    println!("worst parameter {}", report.worst_parameter);
    println!("coordinates {}", report.coordinates);
    if report.max_rel_error > GRADCHECK_TOLERANCE {
        return Err(Failure::Check(format!(
            "max relative error {:.3e} exceeds {GRADCHECK_TOLERANCE:e} at parameter {}",
            report.max_rel_error, report.worst_parameter
        )));
    }
    Ok(())
}
