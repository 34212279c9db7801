use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mbq_core::pack::codec_selftest;
use mbq_core::pipeline::{
    capture_inputs, quantize_methods, run_matrix, streams, train_seed, CalibContext, Method, PipelineConfig,
    QuantizedModel, Scheme, SeedData,
};
use mbq_core::toyvlm::{
    eval_task, gen_data, sensitivity_profile_with, token_grad_weights_all, KeySplit, LossMask, SyntheticSample,
    ToyModel,
};
use mbq_core::Rng;
use serde::Serialize;

use mbq::bench::{bench_gemv, BenchConfig, TABLE6_SHAPES};
use mbq::format::{load_dataset, load_model, save_dataset, save_model};
use mbq::qckpt::{load_quantized, read_manifest, save_quantized, verify, QuantMeta};
use mbq::report::{bench_table, matrix_table, profile_table, CalibReport};
use mbq::{load_config, Result};

/// Modality-balanced post-training quantization of a toy vision-language model.
#[derive(Parser)]
#[command(name = "mbq", version)]
struct Cli {
    /// JSON pipeline config; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    All,
    Calibration,
    Evaluation,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    WeightOnly,
    WeightActivation,
}

#[derive(Clone, Copy, ValueEnum)]
enum Shapes {
    Table6,
    Small,
}

#[derive(clap::Args)]
struct QuantArgs {
    #[arg(long)]
    model: PathBuf,
    /// Calibration samples (JSONL).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "mbq-mae")]
    method: String,
    #[arg(long, default_value_t = 3)]
    bits: u8,
    #[arg(long, value_enum, default_value_t = Mode::WeightOnly)]
    mode: Mode,
}

#[derive(Subcommand)]
enum Cmd {
    /// Writes synthetic samples as JSON lines.
    GenData {
        #[arg(long, value_enum, default_value_t = Split::All)]
        split: Split,
        /// Sample count; defaults to the config's size for the split.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains the toy model and writes a checkpoint directory.
    Train {
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer vision and language output-gradient magnitudes.
    Profile {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Score every position, vision included, instead of the answer tokens only.
        #[arg(long)]
        all_positions: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Runs the equalization search and reports every layer's curve.
    Calibrate {
        #[command(flatten)]
        q: QuantArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Quantizes the model and writes a quantized checkpoint directory.
    Quantize {
        #[command(flatten)]
        q: QuantArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Teacher-forced loss and exact-match accuracy.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        quantized: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
    },
    /// Every configured method and scheme over every seed.
    Matrix {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Times the reference and fused packed 3-bit GEMV.
    Bench {
        #[arg(long, value_enum, default_value_t = Shapes::Table6)]
        shapes: Shapes,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long, default_value_t = 5)]
        iters: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Packing codec utilities.
    Pack {
        /// Round-trips random and single-nonzero code tuples through both codecs.
        #[arg(long)]
        selftest: bool,
        #[arg(long, default_value_t = 100_000)]
        tuples: usize,
    },
    /// Prints a checkpoint manifest; `--verify` recomputes every stored value.
    Inspect {
        dir: PathBuf,
        #[arg(long, requires_all = ["model", "data"])]
        verify: bool,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let json = serde_json::to_string_pretty(value).expect("report types serialize");
    if let Some(p) = out {
        std::fs::write(p, format!("{json}\n")).map_err(|source| mbq::Error::Io { path: p.into(), source })?;
    }
    // A closed pipe (e.g. `| head`) is not an error worth a panic.
    let _ = writeln!(std::io::stdout().lock(), "{json}");
    Ok(())
}

fn config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    Ok(cfg)
}

fn scheme_of(q: &QuantArgs) -> Result<Scheme> {
    let act = match q.mode {
        Mode::WeightOnly => None,
        Mode::WeightActivation => Some(8),
    };
    Ok(Scheme::from_bits(q.bits, act)?)
}

fn quantize_one(cfg: &PipelineConfig, seed: u64, q: &QuantArgs) -> Result<(ToyModel, QuantizedModel)> {
    let method: Method = q.method.parse()?;
    let scheme = scheme_of(q)?;
    let (model, _) = load_model(&q.model)?;
    let calib = load_dataset(&q.data)?;
    let profile = sensitivity_profile_with(&model, &calib, LossMask::LanguageTargets)?;
    let token_weights = match method {
        Method::TokenWise => Some(token_grad_weights_all(&model, &calib)?),
        _ => None,
    };
    let inputs = capture_inputs(&model, &calib)?;
    let ctx = CalibContext { inputs: &inputs, profile: Some(&profile), token_weights: token_weights.as_deref(), seed };
    let qm = quantize_methods(&model, &[method], scheme, cfg, &ctx)?.remove(0);
    Ok((model, qm))
}

#[derive(Serialize)]
struct TrainSummary {
    seed: u64,
    initial_loss: f32,
    final_loss: f32,
    steps: usize,
    out: PathBuf,
}

#[derive(Serialize)]
struct SelftestSummary {
    ok: bool,
    tuples_checked: usize,
}

fn run(cli: Cli) -> Result<()> {
    let cfg = config(&cli)?;
    let seed = cfg.seeds[0];
    match &cli.cmd {
        Cmd::GenData { split, n, out } => {
            let (ks, stream, default_n) = match split {
                Split::All => (KeySplit::All, streams::TRAIN_DATA, cfg.train_samples),
                Split::Calibration => (KeySplit::Calibration, streams::CALIB_DATA, cfg.calib_samples),
                Split::Evaluation => (KeySplit::Evaluation, streams::EVAL_DATA, cfg.eval_samples),
            };
            let data = gen_data(&cfg.task, &mut Rng::stream(seed, stream), n.unwrap_or(default_n), ks)?;
            save_dataset(out, &data)?;
            eprintln!("wrote {} samples to {}", data.len(), out.display());
            emit(&serde_json::json!({ "samples": data.len(), "out": out }), None)
        }
        Cmd::Train { out } => {
            let train = gen_data(&cfg.task, &mut Rng::stream(seed, streams::TRAIN_DATA), cfg.train_samples, KeySplit::All)?;
            let data = SeedData { train, calib: Vec::new(), eval: Vec::new() };
            let (model, report) = train_seed(&cfg, seed, &data)?;
            save_model(out, &model, Some(seed))?;
            eprintln!("loss {:.4} -> {:.4} over {} steps", report.initial_loss, report.final_loss, cfg.train.steps);
            emit(
                &TrainSummary {
                    seed,
                    initial_loss: report.initial_loss,
                    final_loss: report.final_loss,
                    steps: cfg.train.steps,
                    out: out.clone(),
                },
                None,
            )
        }
        Cmd::Profile { model, data, all_positions, out } => {
            let (model, _) = load_model(model)?;
            let data = load_dataset(data)?;
            let mask = if *all_positions { LossMask::AllPositions } else { LossMask::LanguageTargets };
            let p = sensitivity_profile_with(&model, &data, mask)?;
            eprint!("{}", profile_table(&p));
            emit(&p, out.as_deref())
        }
        Cmd::Calibrate { q, out } => {
            let (_, qm) = quantize_one(&cfg, seed, q)?;
            let r = CalibReport::new(qm.method, qm.scheme, &qm.layers);
            eprint!("{}", r.table());
            emit(&r, out.as_deref())
        }
        Cmd::Quantize { q, out } => {
            let (model, qm) = quantize_one(&cfg, seed, q)?;
            let meta = QuantMeta { group_size: cfg.group_size, vision_factor: cfg.vision_factor, seed };
            save_quantized(out, &qm, model.config(), meta)?;
            eprintln!("wrote {} {} checkpoint to {}", qm.method, qm.scheme, out.display());
            emit(&read_manifest(out)?, None)
        }
        Cmd::Eval { model, quantized, data } => {
            let (model, _) = load_model(model)?;
            let data = load_dataset(data)?;
            let score = match quantized {
                None => eval_task(&model, None, &data)?,
                Some(dir) => {
                    let (qm, manifest) = load_quantized(dir)?;
                    qm.evaluate(&model, manifest.group_size, &data)?
                }
            };
            eprintln!("loss {:.6} exact-match {:.4} on {} samples", score.loss, score.exact_match, data.len());
            emit(&score, None)
        }
        Cmd::Matrix { out } => {
            let report = run_matrix(&cfg)?;
            eprint!("{}", matrix_table(&report));
            emit(&report, out.as_deref())
        }
        Cmd::Bench { shapes, warmup, iters, out } => {
            let shapes: Vec<(usize, usize)> = match shapes {
                Shapes::Table6 => TABLE6_SHAPES.to_vec(),
                Shapes::Small => vec![(8, 8), (64, 128), (256, 100)],
            };
            let bc = BenchConfig { warmup: *warmup, iters: *iters, seed, ..BenchConfig::default() };
            let report = bench_gemv(&shapes, &bc)?;
            eprint!("{}", bench_table(&report));
            emit(&report, out.as_deref())
        }
        Cmd::Pack { selftest, tuples } => {
            if !selftest {
                return Err(mbq::Error::Format("nothing to do: pass --selftest".into()));
            }
            let n = codec_selftest(&mut Rng::new(seed), *tuples)?;
            eprintln!("codec round trip ok on {n} tuples");
            emit(&SelftestSummary { ok: true, tuples_checked: n }, None)
        }
        Cmd::Inspect { dir, verify: check, model, data } => {
            let manifest = read_manifest(dir)?;
            eprintln!("{} {} ({} layers, group {})", manifest.method, manifest.scheme, manifest.layers.len(), manifest.group_size);
            if !check {
                return emit(&manifest, None);
            }
            let (fp, _) = load_model(model.as_deref().expect("clap enforces --model"))?;
            let calib: Vec<SyntheticSample> = load_dataset(data.as_deref().expect("clap enforces --data"))?;
            let audit = verify(dir, &fp, &calib)?;
            for l in audit.layers.iter().filter(|l| !l.ok()) {
                eprintln!("mismatch in {}: {:?}", l.layer, l);
            }
            eprintln!("verify: {}", if audit.ok { "ok" } else { "FAILED" });
            emit(&audit, None)?;
            if audit.ok {
                Ok(())
            } else {
                Err(mbq::Error::Format("checkpoint does not reproduce".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
