//! Command-line entry point: corpus synthesis, split management,
//! pretraining, fine-tuning, evaluation, prediction, and the gradient
//! verification harness.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error (unreadable or
//! malformed inputs), 3 runtime/training error.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::audio_io::{load_manifest, save_manifest, stratified_split, read_wav, Split};
use crate::classify::predict;
use crate::encoder::{
    feature_encoder_graph, span_mask, transformer_encode, EncoderConfig, EncoderParams,
};
use crate::metrics::write_report;
use crate::numcore::{grad_check, ops, Tensor};
use crate::synthgen::synth_corpus;
use crate::trainer::{
    finetune, pretrain, Model, Objective, TrainConfig, TrainerError,
};

#[derive(Parser)]
#[command(name = "voxid", version, about = "Speaker identification: synthesis, pretraining, fine-tuning, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic speaker corpus (WAVs + manifest.jsonl)
    Synth {
        #[arg(long)]
        speakers: usize,
        /// Clips per speaker
        #[arg(long)]
        clips: usize,
        /// Clip duration in seconds
        #[arg(long, default_value_t = 2.0)]
        duration: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Reassign train/val/test splits of an existing manifest in place
    Split {
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated train,val,test ratios summing to 1
        #[arg(long, default_value = "0.8,0.1,0.1")]
        ratios: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Self-supervised pretraining on the train split
    Pretrain {
        /// Flat `key = value` config file (defaults used if omitted)
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        objective: Objective,
        /// Checkpoint/output directory (overrides the config file)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Extra `key=value` config overrides; flags win over the file
        #[arg(long = "set")]
        set: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Supervised fine-tuning of encoder + classification head
    Finetune {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        /// Warm-start encoder weights from a pretraining checkpoint
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set")]
        set: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a fine-tuned checkpoint on a manifest split
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Report directory (metrics.csv, confusion.csv)
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict the speaker for one or more WAV files
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        wav: Vec<PathBuf>,
    },
    /// Run the analytic-vs-finite-difference gradient suite
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Max relative error tolerance
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

/// Map an error to its exit code: data errors (malformed or missing
/// inputs) are 2, runtime/training failures are 3.
fn exit_code(err: &TrainerError) -> i32 {
    match err {
        TrainerError::ConfigParse { .. }
        | TrainerError::UnknownKey(_)
        | TrainerError::BadValue { .. }
        | TrainerError::Audio(_)
        | TrainerError::CorruptCheckpoint(_)
        | TrainerError::VersionMismatch { .. }
        | TrainerError::Synth(_) => 2,
        _ => 3,
    }
}

/// Run the CLI; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders --help/--version through the same path
            let code = if e.use_stderr() { 1 } else { 0 };
            e.print().expect("write usage");
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command) -> Result<i32, TrainerError> {
    match command {
        Command::Synth {
            speakers,
            clips,
            duration,
            out,
            seed,
        } => {
            let manifest = synth_corpus(speakers, clips, duration, &out, seed)?;
            eprintln!(
                "wrote {} clips for {} speakers under {}",
                manifest.entries.len(),
                speakers,
                out.display()
            );
            Ok(0)
        }
        Command::Split {
            manifest,
            ratios,
            seed,
        } => {
            let parsed: Vec<f64> = ratios
                .split(',')
                .map(|r| r.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| TrainerError::BadValue {
                    key: "ratios".into(),
                    value: ratios.clone(),
                })?;
            if parsed.len() != 3 {
                return Err(TrainerError::BadValue {
                    key: "ratios".into(),
                    value: ratios,
                });
            }
            let m = load_manifest(&manifest)?;
            let m = stratified_split(&m, (parsed[0], parsed[1], parsed[2]), seed)?;
            save_manifest(&m, &manifest)?;
            for split in Split::all() {
                eprintln!("{split:?}: {} clips", m.split_entries(split).len());
            }
            Ok(0)
        }
        Command::Pretrain {
            config,
            manifest,
            objective,
            out,
            set,
            seed,
        } => {
            let cfg = build_config(config.as_deref(), objective, out, &set, seed)?;
            let m = load_manifest(&manifest)?;
            echo_config(&cfg)?;
            let result = pretrain(&cfg, &m)?;
            eprintln!(
                "pretraining done: best VL {:.6}, checkpoint {}",
                result.best_vl,
                result.checkpoint.display()
            );
            Ok(0)
        }
        Command::Finetune {
            config,
            manifest,
            init,
            out,
            set,
            seed,
        } => {
            let cfg = build_config(config.as_deref(), Objective::Finetune, out, &set, seed)?;
            let m = load_manifest(&manifest)?;
            echo_config(&cfg)?;
            let result = finetune(&cfg, &m, init.as_deref())?;
            eprintln!(
                "fine-tuning done: best VL {:.6}, checkpoint {}",
                result.best_vl,
                result.checkpoint.display()
            );
            Ok(0)
        }
        Command::Evaluate {
            ckpt,
            manifest,
            split,
            out,
        } => {
            let split = parse_split(&split)?;
            let model = Model::load(&ckpt)?;
            let m = load_manifest(&manifest)?;
            let (report, cm) = crate::trainer::evaluate(&model, &m, split)?;
            write_report(&report, &cm, &[], &out)?;
            eprintln!(
                "evaluated {} clips: accuracy {:.4}, macro-F1 {:.4}; reports in {}",
                report.total,
                report.accuracy,
                report.macro_f1,
                out.display()
            );
            Ok(0)
        }
        Command::Predict { ckpt, wav } => {
            let model = Model::load(&ckpt)?;
            let head = model.head.as_ref().ok_or_else(|| {
                TrainerError::CorruptCheckpoint(
                    "checkpoint has no classification head; fine-tune first".into(),
                )
            })?;
            for path in &wav {
                let clip = read_wav(path)?;
                let p = predict(
                    &clip,
                    &model.encoder,
                    head,
                    &model.encoder_config,
                    &model.labels,
                )?;
                let probs: Vec<String> = p.probs.iter().map(|v| format!("{v:.6}")).collect();
                println!(
                    "{{\"path\":{},\"label\":{},\"probs\":[{}]}}",
                    serde_json::to_string(&path.display().to_string()).expect("string"),
                    serde_json::to_string(&p.label).expect("string"),
                    probs.join(",")
                );
            }
            Ok(0)
        }
        Command::Gradcheck { seeds, tol } => {
            let mut failed = false;
            for (name, err) in gradient_suite(seeds) {
                let ok = err < tol;
                failed |= !ok;
                eprintln!(
                    "gradcheck {name}: max rel err {err:.3e} {}",
                    if ok { "PASS" } else { "FAIL" }
                );
            }
            Ok(if failed { 3 } else { 0 })
        }
    }
}

fn parse_split(s: &str) -> Result<Split, TrainerError> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(TrainerError::BadValue {
            key: "split".into(),
            value: other.into(),
        }),
    }
}

fn build_config(
    file: Option<&Path>,
    objective: Objective,
    out: Option<PathBuf>,
    set: &[String],
    seed: Option<u64>,
) -> Result<TrainConfig, TrainerError> {
    let mut cfg = match file {
        Some(path) => TrainConfig::from_file(path, objective)?,
        None => TrainConfig::defaults(objective),
    };
    cfg.objective = objective;
    for kv in set {
        let (key, value) = kv.split_once('=').ok_or_else(|| TrainerError::BadValue {
            key: "--set".into(),
            value: kv.clone(),
        })?;
        cfg.apply_kv(key.trim(), value.trim())?;
    }
    if let Some(out) = out {
        cfg.checkpoint_dir = out;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Write the effective config into the output directory for provenance.
fn echo_config(cfg: &TrainConfig) -> Result<(), TrainerError> {
    fs::create_dir_all(&cfg.checkpoint_dir)?;
    let mut text = String::new();
    for (k, v) in cfg.snapshot() {
        text.push_str(&format!("{k} = {v}\n"));
    }
    fs::write(cfg.checkpoint_dir.join("config_effective.txt"), text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Gradient suite

/// Analytic-vs-central-finite-difference checks for every
/// differentiable primitive plus the composed tiny encoder stack.
/// Returns `(check name, max relative error over all seeds)`.
pub fn gradient_suite(seeds: u64) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = Vec::new();
    let mut check = |name: &str, shapes: &[Vec<usize>], f: &dyn Fn(&[Tensor]) -> Tensor| {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            worst = worst.max(grad_check(shapes, seed, 1e-3, f));
        }
        out.push((name.to_string(), worst));
    };

    let s23 = vec![vec![2, 3], vec![2, 3]];
    check("add", &s23, &|p| ops::sum_all(&ops::add(&p[0], &p[1])));
    check("sub_mul", &s23, &|p| {
        ops::sum_all(&ops::mul(&ops::sub(&p[0], &p[1]), &p[0]))
    });
    check("scalar_ops", &[vec![3, 3]], &|p| {
        ops::mean_all(&ops::add_scalar(&ops::mul_scalar(&p[0], 1.7), 0.3))
    });
    check("log_exp", &[vec![2, 4]], &|p| {
        // keep the log argument positive for any draw
        ops::sum_all(&ops::log(&ops::add_scalar(&ops::mul(&p[0], &p[0]), 0.5)))
    });
    check("exp_mean_rows", &[vec![3, 4]], &|p| {
        ops::sum_all(&ops::mean_rows(&ops::exp(&p[0])))
    });
    check("reshape_transpose", &[vec![2, 6]], &|p| {
        ops::sum_all(&ops::mul(
            &ops::transpose2(&ops::reshape(&p[0], &[3, 4])),
            &ops::transpose2(&ops::reshape(&p[0], &[3, 4])),
        ))
    });
    check("matmul", &[vec![2, 3], vec![3, 4]], &|p| {
        ops::sum_all(&ops::matmul(&p[0], &p[1]))
    });
    check("linear_gelu", &[vec![3, 4], vec![4, 2], vec![2]], &|p| {
        // half-scale input keeps gelu curvature below the pinned
        // finite-difference step's truncation floor
        let x = ops::mul_scalar(&p[0], 0.5);
        ops::sum_all(&ops::gelu(&ops::linear(&x, &p[1], &p[2]).unwrap()))
    });
    check("row_bias", &[vec![3, 4], vec![4]], &|p| {
        ops::mean_all(&ops::add_row_bias(&p[0], &p[1]))
    });
    check("slice_concat", &[vec![2, 6]], &|p| {
        let a = ops::slice_cols(&p[0], 0, 2);
        let b = ops::slice_cols(&p[0], 2, 4);
        ops::sum_all(&ops::mul(&ops::concat_cols(&[b.clone(), a]), &b_weights(&[2, 6])))
    });
    check("stack_gather", &[vec![1, 4], vec![1, 4]], &|p| {
        let s = ops::stack_rows(&[p[0].clone(), p[1].clone()]);
        ops::sum_all(&ops::mul(
            &ops::gather_rows(&s, &[1, 0, 1]),
            &b_weights(&[3, 4]),
        ))
    });
    check("stack_cols", &[vec![3], vec![3]], &|p| {
        ops::sum_all(&ops::mul(
            &ops::stack_cols(&[p[0].clone(), p[1].clone()]),
            &b_weights(&[3, 2]),
        ))
    });
    check("layer_norm", &[vec![3, 5], vec![5], vec![5]], &|p| {
        ops::sum_all(&ops::mul(
            &ops::layer_norm(&p[0], &p[1], &p[2], 1e-5).unwrap(),
            &b_weights(&[3, 5]),
        ))
    });
    check("softmax", &[vec![2, 5]], &|p| {
        // full-size additive bias; -1e30 knocks one column out per row
        let bias = [0.0, 0.0, -1e30, 0.0, 0.0, 0.0, 0.0, -1e30, 0.0, 0.0];
        ops::sum_all(&ops::mul(
            &ops::softmax(&p[0], Some(&bias)),
            &b_weights(&[2, 5]),
        ))
    });
    check("conv1d", &[vec![2, 9], vec![3, 2, 4], vec![3]], &|p| {
        ops::sum_all(&ops::mul(
            &ops::conv1d(&p[0], &p[1], Some(&p[2]), 2).unwrap(),
            &b_weights(&[3, 3]),
        ))
    });
    check("mean_pool", &[vec![4, 3]], &|p| {
        let valid = [true, false, true, true];
        ops::sum_all(&ops::mul(
            &ops::mean_pool(&p[0], &valid).unwrap(),
            &b_weights(&[3]),
        ))
    });
    check("cosine_rows", &[vec![3, 4], vec![3, 4]], &|p| {
        ops::sum_all(&ops::mul(&ops::cosine_rows(&p[0], &p[1], 1e-8), &b_weights(&[3])))
    });
    check("cross_entropy", &[vec![3, 4]], &|p| {
        ops::cross_entropy_rows(&p[0], &[0, 2, 1], &[1.0, 0.5, 2.0]).unwrap()
    });
    check("weighted_cross_entropy", &[vec![3, 4]], &|p| {
        ops::weighted_cross_entropy(&p[0], &[1, 3, 0], &[0.5, 1.0, 1.5, 2.0]).unwrap()
    });
    check("gumbel_softmax_soft", &[vec![2, 4]], &|p| {
        let noise: Vec<f64> = (0..8).map(|i| 0.3 * ((i * i + 1) as f64).sin()).collect();
        ops::sum_all(&ops::mul(
            &ops::gumbel_softmax_with_noise(&p[0], 2.0, &noise, false),
            &b_weights(&[2, 4]),
        ))
    });

    // composed tiny encoder: conv features -> span mask -> transformer
    let config = EncoderConfig {
        conv_layers: vec![(8, 4, 2)],
        model_dim: 8,
        n_heads: 2,
        n_layers: 1,
        ffn_dim: 16,
        mask_prob: 0.2,
        mask_span: 2,
        max_positions: 32,
    };
    let shapes: Vec<Vec<usize>> = {
        let params = EncoderParams::init(&config, 0);
        let mut s: Vec<Vec<usize>> = params
            .named_params()
            .iter()
            .map(|(_, t)| t.shape())
            .collect();
        s.push(vec![14]); // waveform
        s
    };
    check("composed_encoder", &shapes, &move |p| {
        // half-scale operating point keeps curvature terms small at the
        // pinned finite-difference step; the chain rule still exercises
        // every backward path
        let p: Vec<Tensor> = p.iter().map(|t| ops::mul_scalar(t, 0.5)).collect();
        let n = p.len() - 1;
        let params = EncoderParams::from_flat(&config, &p[..n]);
        let wave = ops::reshape(&p[n], &[1, 14]);
        let frames = feature_encoder_graph(&wave, &params, &config).unwrap();
        let (masked, _) = span_mask(&frames, &params.mask_emb, &config, 7);
        let out = transformer_encode(&masked, &[true; 6], &params, &config).unwrap();
        ops::sum_all(&ops::mul(&out, &b_weights(&out.shape())))
    });
    out
}

/// Fixed non-uniform weights so reductions do not hide permutation bugs.
fn b_weights(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|i| 0.5 + (i % 7) as f64).collect())
}
