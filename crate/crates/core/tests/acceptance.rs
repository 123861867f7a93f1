//! Acceptance suite: one test per criterion, each printing a single
//! PASS/FAIL line. Run with `cargo test --test acceptance`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use voxid::audio_io::{decode_wav, encode_wav, load_manifest, AudioClip, AudioError, Manifest, Split};
use voxid::classify::HeadParams;
use voxid::cli::gradient_suite;
use voxid::encoder::{EncoderConfig, EncoderParams, MaskSpec};
use voxid::metrics::{precision_recall_f1, ConfusionMatrix};
use voxid::numcore::{backward, Tensor};
use voxid::objectives::{
    contrastive_loss, diversity_penalty, kmeans_fit, masked_prediction_loss,
};
use voxid::synthgen::synth_corpus;
use voxid::trainer::{
    compute_teacher_labels, contrastive_val_loss, finetune, load_checkpoint, masked_frame_accuracy,
    pretrain, save_checkpoint, Model, Objective, TrainConfig, TrainerError,
};

fn criterion(name: &str, ok: bool, detail: &str) {
    println!("{name}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name} failed: {detail}");
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

// ---------------------------------------------------------------------------

/// A1: analytic gradients of every differentiable primitive and of the
/// composed tiny encoder match central finite differences (eps = 1e-3)
/// with max relative error < 1e-4 across 10 seeds, in under 2 minutes.
#[test]
fn a1_gradient_correctness() {
    let start = Instant::now();
    let results = gradient_suite(10);
    let worst = results
        .iter()
        .cloned()
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    criterion(
        "A1 gradient correctness",
        results.iter().all(|(_, e)| *e < 1e-4) && elapsed < 120.0,
        &format!(
            "{} checks x 10 seeds, worst {} = {:.3e}, {:.1}s",
            results.len(),
            worst.0,
            worst.1,
            elapsed
        ),
    );
}

// ---------------------------------------------------------------------------

/// A2: objective invariants — masked-only gradient support, diversity
/// penalty anchors, tie-level contrastive loss, monotone k-means inertia.
#[test]
fn a2_objective_invariants() {
    // (a) masked prediction gradient is exactly zero at unmasked frames
    let (t_len, d, k) = (7, 4, 3);
    let context = Tensor::param(
        &[t_len, d],
        (0..t_len * d).map(|i| ((i * 13 % 17) as f64 - 8.0) / 8.0).collect(),
    );
    let proj = Tensor::param(&[d, k], (0..d * k).map(|i| (i as f64 - 5.0) / 10.0).collect());
    let mask = MaskSpec {
        masked_indices: vec![1, 2, 5],
        spans: vec![(1, 2), (5, 1)],
    };
    let labels = vec![0, 1, 2, 0, 1, 2, 0];
    let loss = masked_prediction_loss(&context, &labels, &mask, &proj).unwrap();
    backward(&loss).unwrap();
    let grad = context.grad().unwrap();
    let mut support_ok = true;
    for t in 0..t_len {
        let row = &grad[t * d..(t + 1) * d];
        let masked = mask.masked_indices.contains(&t);
        if masked {
            support_ok &= row.iter().any(|&g| g != 0.0);
        } else {
            support_ok &= row.iter().all(|&g| g == 0.0);
        }
    }

    // (b) diversity penalty: 0 at uniform usage, 1 - 1/V at one-hot usage
    let (g, v, rows) = (2, 5, 6);
    let uniform = Tensor::param(&[rows, g * v], vec![1.0 / v as f64; rows * g * v]);
    let div_uniform = diversity_penalty(&uniform, g).item();
    let mut onehot = vec![0.0; rows * g * v];
    for r in 0..rows {
        for gi in 0..g {
            onehot[r * g * v + gi * v] = 1.0;
        }
    }
    let div_onehot = diversity_penalty(&Tensor::param(&[rows, g * v], onehot), g).item();
    let div_ok =
        div_uniform.abs() < 1e-9 && (div_onehot - (1.0 - 1.0 / v as f64)).abs() < 1e-9;

    // (c) contrastive loss under all-equal similarities = ln(K+1)
    let mut ties_ok = true;
    for k_distractors in [1usize, 5, 10] {
        let t_len = 14;
        let row: Vec<f64> = vec![0.3, -0.4, 0.8, 0.1];
        let context = Tensor::param(&[t_len, 4], row.repeat(t_len));
        let quantized = Tensor::param(&[t_len, 4], row.repeat(t_len));
        let mask = MaskSpec {
            masked_indices: (0..t_len).collect(),
            spans: vec![(0, t_len)],
        };
        let loss = contrastive_loss(&context, &quantized, &mask, k_distractors, 0.1, 0)
            .unwrap()
            .item();
        ties_ok &= (loss - ((k_distractors + 1) as f64).ln()).abs() < 1e-9;
    }

    // (d) k-means inertia is non-increasing across Lloyd iterations
    let mut kmeans_ok = true;
    for seed in 0..20u64 {
        let pts: Vec<Vec<f64>> = (0..120)
            .map(|i| {
                let x = ((i as u64 * 2654435761 + seed * 97) % 1000) as f64 / 100.0;
                let y = ((i as u64 * 40503 + seed * 31) % 1000) as f64 / 100.0;
                vec![x, y]
            })
            .collect();
        let c = kmeans_fit(&pts, 6, 50, seed).unwrap();
        kmeans_ok &= c
            .inertia_history
            .windows(2)
            .all(|w| w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0));
        kmeans_ok &= !c.inertia_history.is_empty();
    }

    criterion(
        "A2 objective invariants",
        support_ok && div_ok && ties_ok && kmeans_ok,
        &format!(
            "grad support {support_ok}, diversity {div_ok} (uniform {div_uniform:.2e}, one-hot {div_onehot:.6}), ties {ties_ok}, kmeans {kmeans_ok}"
        ),
    );
}

// ---------------------------------------------------------------------------

fn desk_finetune_config(dir: &Path, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::defaults(Objective::Finetune);
    cfg.seed = seed;
    cfg.eval_interval = 25;
    cfg.patience = 4;
    // converged well past the accuracy target; stop instead of
    // polishing the loss for the remaining step budget
    cfg.stop_vl = 0.05;
    cfg.checkpoint_dir = dir.to_path_buf();
    cfg
}

fn steps_to_f1(curve: &[(u64, f64)], threshold: f64) -> Option<u64> {
    curve.iter().find(|(_, f1)| *f1 >= threshold).map(|(s, _)| *s)
}

/// A3: end-to-end learning on a 10-speaker x 100-clip x 2 s synthetic
/// corpus. From random init, held-out macro-F1 >= 0.95 (median over 5
/// seeds), each run <= 10 min. With one class downsampled 5x, weighted
/// cross entropy reaches minority recall >= 0.80 while unweighted
/// drops below it or ties.
#[test]
fn a3_end_to_end_learning() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let manifest = synth_corpus(10, 100, 2.0, &corpus, 0).unwrap();

    let mut f1s = Vec::new();
    let mut budget_ok = true;
    for seed in 0..5u64 {
        let start = Instant::now();
        let cfg = desk_finetune_config(&dir.path().join(format!("ft{seed}")), seed);
        let result = finetune(&cfg, &manifest, None).unwrap();
        let model = Model::load(&result.checkpoint).unwrap();
        let (report, _) = voxid::trainer::evaluate(&model, &manifest, Split::Test).unwrap();
        let elapsed = start.elapsed().as_secs_f64();
        budget_ok &= elapsed <= 600.0;
        eprintln!(
            "A3 seed {seed}: test macro-F1 {:.4} in {:.0}s ({} steps logged)",
            report.macro_f1,
            elapsed,
            result.log.rows.len()
        );
        f1s.push(report.macro_f1);
    }
    let med = median(f1s.clone());

    // imbalance: drop 4 of every 5 train clips of the first class
    let minority = manifest.labels()[0].clone();
    let mut kept = 0usize;
    let entries: Vec<_> = manifest
        .entries
        .iter()
        .filter(|e| {
            if e.speaker == minority && e.split == Split::Train {
                kept += 1;
                (kept - 1) % 5 == 0
            } else {
                true
            }
        })
        .cloned()
        .collect();
    let imbalanced = Manifest::from_entries(entries, manifest.root.clone()).unwrap();
    let minority_id = imbalanced.class_id(&minority).unwrap();

    let mut recalls = Vec::new();
    for weighting in [true, false] {
        let mut cfg = desk_finetune_config(&dir.path().join(format!("imb{weighting}")), 0);
        cfg.class_weighting = weighting;
        let result = finetune(&cfg, &imbalanced, None).unwrap();
        let model = Model::load(&result.checkpoint).unwrap();
        let (report, _) = voxid::trainer::evaluate(&model, &imbalanced, Split::Test).unwrap();
        recalls.push(report.per_class[minority_id].recall);
    }
    let (weighted_recall, unweighted_recall) = (recalls[0], recalls[1]);
    eprintln!(
        "A3 imbalance: minority recall weighted {weighted_recall:.3}, unweighted {unweighted_recall:.3}"
    );

    criterion(
        "A3 end-to-end learning",
        med >= 0.95 && budget_ok && weighted_recall >= 0.80 && unweighted_recall <= weighted_recall,
        &format!(
            "median macro-F1 {med:.4} over 5 seeds, budget ok {budget_ok}, minority recall weighted {weighted_recall:.3} vs unweighted {unweighted_recall:.3}"
        ),
    );
}

// ---------------------------------------------------------------------------

/// A4: pretraining produces signal. (a) HuBERT-style (k = 20), 500
/// steps: held-out masked-frame accuracy >= 0.15 (3x chance). (b)
/// wav2vec2-style, 500 steps: held-out contrastive loss >= 30% below
/// the ln(K+1) chance level. Median over 3 seeds, <= 15 min per run.
/// (c) fine-tuning from the HuBERT checkpoint reaches macro-F1 0.95 in
/// <= half the steps of the from-scratch run.
#[test]
fn a4_pretraining_signal() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let manifest = synth_corpus(10, 100, 2.0, &corpus, 0).unwrap();

    let mut budget_ok = true;
    let mut hubert_ckpts = Vec::new();
    let mut accuracies = Vec::new();
    for seed in 0..3u64 {
        let start = Instant::now();
        let mut cfg = TrainConfig::defaults(Objective::Hubert);
        cfg.seed = seed;
        cfg.n_clusters = 20;
        cfg.eval_interval = 100;
        cfg.checkpoint_dir = dir.path().join(format!("hubert{seed}"));
        let result = pretrain(&cfg, &manifest).unwrap();
        let model = Model::load(&result.checkpoint).unwrap();
        let teacher = compute_teacher_labels(&manifest, 20, 13, seed, 100_000).unwrap();
        let acc =
            masked_frame_accuracy(&model, &manifest, Split::Val, &teacher, 1.0, 0).unwrap();
        let elapsed = start.elapsed().as_secs_f64();
        budget_ok &= elapsed <= 900.0;
        eprintln!("A4a seed {seed}: masked-frame accuracy {acc:.4} in {elapsed:.0}s");
        accuracies.push(acc);
        hubert_ckpts.push(result.checkpoint);
    }
    let hubert_acc = median(accuracies.clone());

    let chance = (10f64 + 1.0).ln();
    let mut losses = Vec::new();
    for seed in 0..3u64 {
        let start = Instant::now();
        let mut cfg = TrainConfig::defaults(Objective::W2v);
        cfg.seed = seed;
        cfg.eval_interval = 100;
        cfg.checkpoint_dir = dir.path().join(format!("w2v{seed}"));
        let result = pretrain(&cfg, &manifest).unwrap();
        let model = Model::load(&result.checkpoint).unwrap();
        let loss = contrastive_val_loss(
            &model, &manifest, Split::Val, 10, 0.1, 2.0, 1.0, 0,
        )
        .unwrap();
        let elapsed = start.elapsed().as_secs_f64();
        budget_ok &= elapsed <= 900.0;
        eprintln!(
            "A4b seed {seed}: contrastive VL {loss:.4} (chance {chance:.4}) in {elapsed:.0}s"
        );
        losses.push(loss);
    }
    let w2v_loss = median(losses.clone());

    // (c) warm start halves the steps to macro-F1 0.95; evaluate every
    // 10 steps so the comparison has usable resolution
    let mut scratch_cfg = desk_finetune_config(&dir.path().join("scratch"), 0);
    scratch_cfg.eval_interval = 10;
    let scratch = finetune(&scratch_cfg, &manifest, None).unwrap();
    let mut warm_cfg = desk_finetune_config(&dir.path().join("warm"), 0);
    warm_cfg.eval_interval = 10;
    let warm = finetune(&warm_cfg, &manifest, Some(&hubert_ckpts[0])).unwrap();
    let scratch_steps = steps_to_f1(&scratch.f1_curve, 0.95);
    let warm_steps = steps_to_f1(&warm.f1_curve, 0.95);
    eprintln!("A4c: steps to 0.95 — scratch {scratch_steps:?}, warm {warm_steps:?}");
    let warm_ok = match (scratch_steps, warm_steps) {
        (Some(s), Some(w)) => 2 * w <= s,
        _ => false,
    };

    criterion(
        "A4 pretraining signal",
        hubert_acc >= 0.15 && w2v_loss <= 0.7 * chance && warm_ok && budget_ok,
        &format!(
            "hubert masked acc {hubert_acc:.3} (>= 0.15), w2v VL {w2v_loss:.3} (<= {:.3}), warm {warm_steps:?} vs scratch {scratch_steps:?} steps, budget ok {budget_ok}",
            0.7 * chance
        ),
    );
}

// ---------------------------------------------------------------------------

/// A5: metric exactness on the hand-counted 2x2 matrix and a 10-class
/// one-error matrix.
#[test]
fn a5_metrics_exactness() {
    let labels = vec!["a".to_string(), "b".to_string()];
    let cm = ConfusionMatrix {
        labels,
        counts: vec![vec![3, 1], vec![2, 4]],
    };
    let report = precision_recall_f1(&cm).unwrap();
    let hand_ok = (report.per_class[0].precision - 0.6).abs() < 1e-4
        && (report.per_class[1].precision - 0.8).abs() < 1e-4
        && (report.per_class[0].recall - 0.75).abs() < 1e-4
        && (report.per_class[1].recall - 0.6667).abs() < 1e-4
        && (report.macro_f1 - 0.6970).abs() < 1e-4;

    // 10 classes, 10 samples each, exactly one off-diagonal error
    let mut counts = vec![vec![0u64; 10]; 10];
    for c in 0..10 {
        counts[c][c] = 10;
    }
    counts[3][3] = 9;
    counts[3][7] += 1;
    let cm10 = ConfusionMatrix {
        labels: (0..10).map(|i| format!("c{i}")).collect(),
        counts,
    };
    let report10 = precision_recall_f1(&cm10).unwrap();
    let acc_ok = (report10.accuracy - 0.99).abs() < 1e-12;

    criterion(
        "A5 metrics exactness",
        hand_ok && acc_ok,
        &format!(
            "hand matrix macro-F1 {:.4}, 10-class accuracy {:.4}",
            report.macro_f1, report10.accuracy
        ),
    );
}

// ---------------------------------------------------------------------------

fn tiny_train_config(objective: Objective, dir: &Path) -> TrainConfig {
    let mut cfg = TrainConfig::defaults(objective);
    cfg.encoder = EncoderConfig {
        conv_layers: vec![(8, 10, 5), (8, 4, 4), (8, 4, 4)],
        model_dim: 8,
        n_heads: 2,
        n_layers: 1,
        ffn_dim: 16,
        mask_prob: 0.1,
        mask_span: 4,
        max_positions: 256,
    };
    cfg.head_hidden = 16;
    cfg.max_len_s = 0.5;
    cfg.batch_size = 2;
    cfg.max_iter = 6;
    cfg.eval_interval = 3;
    cfg.checkpoint_dir = dir.to_path_buf();
    cfg
}

/// A6: reproducibility — identical config + seed gives bitwise-identical
/// train-log CSVs, and checkpoint save/load round trips bit-exactly.
#[test]
fn a6_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let manifest = synth_corpus(3, 5, 0.5, &corpus, 0).unwrap();

    let mut csv_files = Vec::new();
    for run in 0..2 {
        let cfg = tiny_train_config(Objective::Finetune, &dir.path().join(format!("run{run}")));
        let result = finetune(&cfg, &manifest, None).unwrap();
        csv_files.push(fs::read(cfg.checkpoint_dir.join("finetune_log.csv")).unwrap());
        let _ = result;
    }
    let logs_ok = csv_files[0] == csv_files[1] && !csv_files[0].is_empty();

    // checkpoint round trip: save -> load -> save is byte-identical
    let encoder = EncoderParams::init(&EncoderConfig::default(), 3);
    let head = HeadParams::init_with_hidden(64, 128, 4, 3);
    let mut tensors = encoder.named_params();
    tensors.extend(head.named_params());
    let mut config = BTreeMap::new();
    config.insert("model_dim".to_string(), "64".to_string());
    let p1 = dir.path().join("rt1.ckpt");
    let p2 = dir.path().join("rt2.ckpt");
    save_checkpoint(&tensors, &config, &p1).unwrap();
    let (header, loaded) = load_checkpoint(&p1).unwrap();
    let reloaded: Vec<(String, Tensor)> = header
        .tensors
        .iter()
        .map(|e| {
            let (shape, data) = &loaded[&e.name];
            (e.name.clone(), Tensor::param(shape, data.clone()))
        })
        .collect();
    save_checkpoint(&reloaded, &header.config, &p2).unwrap();
    let ckpt_ok = fs::read(&p1).unwrap() == fs::read(&p2).unwrap();

    criterion(
        "A6 reproducibility",
        logs_ok && ckpt_ok,
        &format!(
            "train logs identical {logs_ok} ({} bytes), checkpoint round trip bit-exact {ckpt_ok}",
            csv_files[0].len()
        ),
    );
}

// ---------------------------------------------------------------------------

/// A7: format robustness — 100 mutated WAV / manifest / checkpoint
/// files each yield their designated error instead of crashing.
#[test]
fn a7_format_robustness() {
    let dir = tempfile::tempdir().unwrap();
    let mut checked = 0usize;
    let mut ok = true;

    // 40 corrupt WAVs
    let clip = AudioClip::new((0..800).map(|i| (i as f64 / 800.0).sin() * 0.5).collect(), 16_000);
    let wav = encode_wav(&clip);
    for i in 0..40usize {
        let mut bytes = wav.clone();
        let expect_unsupported;
        match i % 4 {
            0 => {
                // corrupt the RIFF/WAVE magic (bytes 4..8 are the chunk
                // size, not magic, so skip them)
                let magic = [0usize, 1, 2, 3, 8, 9, 10, 11];
                bytes[magic[(i / 4) % magic.len()]] ^= 0xff;
                expect_unsupported = false;
            }
            1 => {
                // truncate somewhere inside the stream
                let cut = 4 + (i * 131) % (bytes.len() - 8);
                bytes.truncate(cut);
                expect_unsupported = false;
            }
            2 => {
                // non-PCM format tag in the fmt chunk
                bytes[20] = (i % 250 + 2) as u8;
                expect_unsupported = true;
            }
            _ => {
                // multichannel claim in the fmt chunk
                bytes[22] = (i % 7 + 2) as u8;
                expect_unsupported = true;
            }
        }
        match decode_wav(&bytes) {
            Err(AudioError::UnsupportedFormat(_)) if expect_unsupported => {}
            Err(AudioError::NotWav(_) | AudioError::Truncated(_)) if !expect_unsupported => {}
            other => {
                eprintln!("A7 wav mutation {i}: unexpected {other:?}");
                ok = false;
            }
        }
        checked += 1;
    }

    // 30 corrupt manifests
    let good_line = r#"{"path":"a.wav","speaker":"s1","split":"train","duration_s":1.0}"#;
    for i in 0..30usize {
        let text = match i % 5 {
            0 => format!("{good_line}\nnot json at all\n"),
            1 => format!("{good_line}\n{good_line}\n"), // duplicate path
            2 => format!(
                "{}\n",
                good_line.replace("1.0", &format!("-{}.5", i + 1)) // bad duration
            ),
            3 => format!("{}\n", good_line.replace("\"speaker\":\"s1\",", "")), // missing field
            _ => format!("{}\n", &good_line[..good_line.len() - i % 20 - 1]), // truncated json
        };
        let path = dir.path().join(format!("manifest{i}.jsonl"));
        fs::write(&path, text).unwrap();
        match load_manifest(&path) {
            Err(AudioError::ParseError { .. }) if i % 5 != 1 => {}
            Err(AudioError::DuplicatePath(_)) if i % 5 == 1 => {}
            other => {
                eprintln!("A7 manifest mutation {i}: unexpected {other:?}");
                ok = false;
            }
        }
        checked += 1;
    }

    // 30 corrupt checkpoints
    let tensors = vec![
        ("a".to_string(), Tensor::param(&[3, 4], (0..12).map(|i| i as f64).collect())),
        ("b".to_string(), Tensor::param(&[5], vec![0.5; 5])),
    ];
    let good_path = dir.path().join("good.ckpt");
    save_checkpoint(&tensors, &BTreeMap::new(), &good_path).unwrap();
    let good = fs::read(&good_path).unwrap();
    let header_end = good.iter().position(|&b| b == b'\n').unwrap();
    for i in 0..30usize {
        let path = dir.path().join(format!("ckpt{i}.ckpt"));
        let expect_version = i % 3 == 2 && i % 2 == 0;
        match i % 3 {
            0 => {
                // truncate inside the payload
                let cut = header_end + 2 + (i * 7) % (good.len() - header_end - 3);
                fs::write(&path, &good[..cut]).unwrap();
            }
            1 => {
                // break the JSON header outright
                let mut bytes = good.clone();
                bytes[0] = b'#';
                fs::write(&path, bytes).unwrap();
            }
            _ => {
                if expect_version {
                    // well-formed header with a foreign version number
                    let text = String::from_utf8(good[..header_end].to_vec()).unwrap();
                    let hacked = text.replace("\"version\":1", &format!("\"version\":{}", i + 90));
                    let mut bytes = hacked.into_bytes();
                    bytes.push(b'\n');
                    bytes.extend_from_slice(&good[header_end + 1..]);
                    fs::write(&path, bytes).unwrap();
                } else {
                    // scramble a tensor offset so the directory is inconsistent
                    let text = String::from_utf8(good[..header_end].to_vec()).unwrap();
                    let hacked = text.replace("\"offset\":48", "\"offset\":47");
                    assert_ne!(hacked, text, "offset literal not found");
                    let mut bytes = hacked.into_bytes();
                    bytes.push(b'\n');
                    bytes.extend_from_slice(&good[header_end + 1..]);
                    fs::write(&path, bytes).unwrap();
                }
            }
        }
        match load_checkpoint(&path) {
            Err(TrainerError::VersionMismatch { .. }) if expect_version => {}
            Err(TrainerError::CorruptCheckpoint(_)) if !expect_version => {}
            other => {
                eprintln!(
                    "A7 checkpoint mutation {i}: unexpected {:?}",
                    other.map(|_| "Ok")
                );
                ok = false;
            }
        }
        checked += 1;
    }

    criterion(
        "A7 format robustness",
        ok && checked == 100,
        &format!("{checked} mutated files, all produced their designated errors: {ok}"),
    );
}
