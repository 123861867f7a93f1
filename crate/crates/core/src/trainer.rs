//! Seeded mini-batch training loops for pretraining and fine-tuning,
//! TL/VL logging, checkpointing (JSON header + 32-bit float payload),
//! teacher-label caching, and evaluation orchestration.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::{read_wav, AudioError, Manifest, Split};
use crate::classify::{
    class_weights, mlp_head_rows, pooled_context, predict, ClassifyError, HeadParams,
};
use crate::encoder::{
    feature_encoder, mfcc, span_mask, transformer_encode, EncoderConfig, EncoderError,
    EncoderParams, MaskSpec, MFCC_HOP,
};
use crate::metrics::{
    confusion_matrix, precision_recall_f1, ConfusionMatrix, CurvePoint, MetricsError,
    MetricsReport,
};
use crate::numcore::{backward, ops, Adam, AdamHyper, NumError, Tensor};
use crate::objectives::{
    quantizer_features, seed_codebook, standardize_rows,
    contrastive_loss, kmeans_assign, kmeans_fit, masked_prediction_loss, pretrain_loss_w2v,
    quantize, Codebook, ObjectiveError, W2vHyper,
};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("config line {line}: {detail}")]
    ConfigParse { line: usize, detail: String },
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("config key '{key}': cannot parse value '{value}'")]
    BadValue { key: String, value: String },
    #[error("training loss diverged (non-finite) at step {step}")]
    DivergedLoss { step: u64 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint format version {got}, this build reads {want}")]
    VersionMismatch { got: u32, want: u32 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Synth(#[from] crate::synthgen::SynthError),
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    W2v,
    Hubert,
    Finetune,
}

impl std::str::FromStr for Objective {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "w2v" => Ok(Objective::W2v),
            "hubert" => Ok(Objective::Hubert),
            "finetune" => Ok(Objective::Finetune),
            other => Err(format!("unknown objective '{other}'")),
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Objective::W2v => "w2v",
            Objective::Hubert => "hubert",
            Objective::Finetune => "finetune",
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub objective: Objective,
    pub max_iter: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub eval_interval: usize,
    pub patience: usize,
    /// Fine-tuning stops once validation loss falls to this level
    /// (0 disables the rule).
    pub stop_vl: f64,
    /// Training-window length in seconds; clips are randomly truncated
    /// to this during training steps.
    pub max_len_s: f64,
    pub encoder: EncoderConfig,
    pub head_hidden: usize,
    pub class_weighting: bool,
    pub freeze_encoder: bool,
    pub k_distractors: usize,
    pub kappa: f64,
    pub alpha: f64,
    pub gumbel_temperature: f64,
    pub codebook_groups: usize,
    pub codebook_entries: usize,
    /// HuBERT teacher cluster count.
    pub n_clusters: usize,
    pub mfcc_coeffs: usize,
    pub checkpoint_dir: PathBuf,
}

impl TrainConfig {
    /// Defaults per objective; only the learning rate differs
    /// (5e-4 pretraining, 1e-3 fine-tuning).
    pub fn defaults(objective: Objective) -> TrainConfig {
        let encoder = EncoderConfig::default();
        TrainConfig {
            objective,
            max_iter: 500,
            batch_size: 8,
            lr: match objective {
                Objective::Finetune => 1e-3,
                _ => 5e-4,
            },
            seed: 0,
            eval_interval: 10,
            patience: 10,
            stop_vl: 0.0,
            max_len_s: 1.0,
            head_hidden: 2 * encoder.model_dim,
            encoder,
            class_weighting: true,
            freeze_encoder: false,
            k_distractors: 10,
            kappa: 0.1,
            alpha: 0.1,
            gumbel_temperature: 2.0,
            codebook_groups: 2,
            codebook_entries: 32,
            n_clusters: 100,
            mfcc_coeffs: 13,
            checkpoint_dir: PathBuf::from("ckpt"),
        }
    }

    /// Parse a flat `key = value` config file into the defaults for
    /// `objective`. Unknown keys and unparsable values are errors;
    /// blank lines and `#` comments are skipped.
    pub fn from_file(path: &Path, objective: Objective) -> Result<TrainConfig, TrainerError> {
        let text = fs::read_to_string(path)?;
        let mut cfg = TrainConfig::defaults(objective);
        cfg.apply_str(&text)?;
        Ok(cfg)
    }

    pub fn apply_str(&mut self, text: &str) -> Result<(), TrainerError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(TrainerError::ConfigParse {
                line: i + 1,
                detail: "expected 'key = value'".into(),
            })?;
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), TrainerError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, TrainerError> {
            value.parse().map_err(|_| TrainerError::BadValue {
                key: key.into(),
                value: value.into(),
            })
        }
        match key {
            "objective" => self.objective = parse(key, value)?,
            "max_iter" => self.max_iter = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "eval_interval" => self.eval_interval = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "stop_vl" => self.stop_vl = parse(key, value)?,
            "max_len_s" => self.max_len_s = parse(key, value)?,
            "model_dim" => self.encoder.model_dim = parse(key, value)?,
            "n_heads" => self.encoder.n_heads = parse(key, value)?,
            "n_layers" => self.encoder.n_layers = parse(key, value)?,
            "ffn_dim" => self.encoder.ffn_dim = parse(key, value)?,
            "mask_prob" => self.encoder.mask_prob = parse(key, value)?,
            "mask_span" => self.encoder.mask_span = parse(key, value)?,
            "max_positions" => self.encoder.max_positions = parse(key, value)?,
            "conv_layers" => self.encoder.conv_layers = parse_conv_layers(value)?,
            "head_hidden" => self.head_hidden = parse(key, value)?,
            "class_weighting" => self.class_weighting = parse(key, value)?,
            "freeze_encoder" => self.freeze_encoder = parse(key, value)?,
            "k_distractors" => self.k_distractors = parse(key, value)?,
            "kappa" => self.kappa = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "gumbel_temperature" => self.gumbel_temperature = parse(key, value)?,
            "codebook_groups" => self.codebook_groups = parse(key, value)?,
            "codebook_entries" => self.codebook_entries = parse(key, value)?,
            "n_clusters" => self.n_clusters = parse(key, value)?,
            "mfcc_coeffs" => self.mfcc_coeffs = parse(key, value)?,
            "checkpoint_dir" => self.checkpoint_dir = PathBuf::from(value),
            other => return Err(TrainerError::UnknownKey(other.into())),
        }
        assert!(self.max_iter >= 1 && self.eval_interval >= 1);
        Ok(())
    }

    /// Flat key/value snapshot, both for checkpoint embedding and for
    /// echoing the effective config.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("objective", self.objective.to_string());
        put("max_iter", self.max_iter.to_string());
        put("batch_size", self.batch_size.to_string());
        put("lr", format!("{:e}", self.lr));
        put("seed", self.seed.to_string());
        put("eval_interval", self.eval_interval.to_string());
        put("patience", self.patience.to_string());
        put("stop_vl", self.stop_vl.to_string());
        put("max_len_s", self.max_len_s.to_string());
        put("model_dim", self.encoder.model_dim.to_string());
        put("n_heads", self.encoder.n_heads.to_string());
        put("n_layers", self.encoder.n_layers.to_string());
        put("ffn_dim", self.encoder.ffn_dim.to_string());
        put("mask_prob", self.encoder.mask_prob.to_string());
        put("mask_span", self.encoder.mask_span.to_string());
        put("max_positions", self.encoder.max_positions.to_string());
        put("conv_layers", conv_layers_string(&self.encoder.conv_layers));
        put("head_hidden", self.head_hidden.to_string());
        put("class_weighting", self.class_weighting.to_string());
        put("freeze_encoder", self.freeze_encoder.to_string());
        put("k_distractors", self.k_distractors.to_string());
        put("kappa", self.kappa.to_string());
        put("alpha", self.alpha.to_string());
        put("gumbel_temperature", self.gumbel_temperature.to_string());
        put("codebook_groups", self.codebook_groups.to_string());
        put("codebook_entries", self.codebook_entries.to_string());
        put("n_clusters", self.n_clusters.to_string());
        put("mfcc_coeffs", self.mfcc_coeffs.to_string());
        put("checkpoint_dir", self.checkpoint_dir.display().to_string());
        m
    }
}

fn parse_conv_layers(value: &str) -> Result<Vec<(usize, usize, usize)>, TrainerError> {
    let bad = || TrainerError::BadValue {
        key: "conv_layers".into(),
        value: value.into(),
    };
    value
        .split(';')
        .map(|layer| {
            let parts: Vec<&str> = layer.split(':').collect();
            if parts.len() != 3 {
                return Err(bad());
            }
            let nums: Result<Vec<usize>, _> = parts.iter().map(|p| p.trim().parse()).collect();
            let nums = nums.map_err(|_| bad())?;
            Ok((nums[0], nums[1], nums[2]))
        })
        .collect()
}

fn conv_layers_string(layers: &[(usize, usize, usize)]) -> String {
    layers
        .iter()
        .map(|(c, w, s)| format!("{c}:{w}:{s}"))
        .collect::<Vec<_>>()
        .join(";")
}

// ---------------------------------------------------------------------------
// Train log

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub rows: Vec<CurvePoint>,
}

impl TrainLog {
    pub fn push(&mut self, step: u64, tl: f64, vl: Option<f64>) {
        if let Some(last) = self.rows.last() {
            assert!(step > last.0, "steps must be strictly increasing");
        }
        assert!(tl.is_finite(), "TL must be finite");
        self.rows.push((step, tl, vl));
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("step,TL,VL\n");
        for &(step, tl, vl) in &self.rows {
            match vl {
                Some(v) => out.push_str(&format!("{step},{tl:.6},{v:.6}\n")),
                None => out.push_str(&format!("{step},{tl:.6},\n")),
            }
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), TrainerError> {
        fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the float payload.
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

/// Write a checkpoint: one line of JSON header, then the concatenated
/// little-endian f32 payload in directory order.
pub fn save_checkpoint(
    tensors: &[(String, Tensor)],
    config: &BTreeMap<String, String>,
    path: &Path,
) -> Result<(), TrainerError> {
    let mut dir = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    let mut payload: Vec<u8> = Vec::new();
    for (name, t) in tensors {
        dir.push(TensorEntry {
            name: name.clone(),
            shape: t.shape(),
            offset,
        });
        for v in t.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        offset += 4 * t.len() as u64;
    }
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        tensors: dir,
    };
    let mut file = Vec::new();
    serde_json::to_writer(&mut file, &header).expect("header serializes");
    file.push(b'\n');
    file.extend_from_slice(&payload);
    fs::write(path, file)?;
    Ok(())
}

/// Header-only inspection: reads and validates the JSON line, never the
/// payload.
pub fn inspect_checkpoint(path: &Path) -> Result<CheckpointHeader, TrainerError> {
    let bytes = fs::read(path)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| TrainerError::CorruptCheckpoint("missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| TrainerError::CorruptCheckpoint(format!("bad header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(TrainerError::VersionMismatch {
            got: header.version,
            want: CHECKPOINT_VERSION,
        });
    }
    Ok(header)
}

/// Load a checkpoint into named raw tensors (f32 payload widened to the
/// in-memory representation). Validates that directory offsets are
/// ascending, non-overlapping, and cover the payload exactly.
pub fn load_checkpoint(
    path: &Path,
) -> Result<(CheckpointHeader, BTreeMap<String, (Vec<usize>, Vec<f64>)>), TrainerError> {
    let bytes = fs::read(path)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| TrainerError::CorruptCheckpoint("missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| TrainerError::CorruptCheckpoint(format!("bad header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(TrainerError::VersionMismatch {
            got: header.version,
            want: CHECKPOINT_VERSION,
        });
    }
    let payload = &bytes[nl + 1..];
    let mut expected_offset = 0u64;
    let mut out = BTreeMap::new();
    for entry in &header.tensors {
        if entry.offset != expected_offset {
            return Err(TrainerError::CorruptCheckpoint(format!(
                "tensor '{}' at offset {} but {} expected",
                entry.name, entry.offset, expected_offset
            )));
        }
        let n: usize = entry.shape.iter().product();
        let end = entry.offset as usize + 4 * n;
        if end > payload.len() {
            return Err(TrainerError::CorruptCheckpoint(format!(
                "payload truncated: tensor '{}' needs {} bytes, payload has {}",
                entry.name,
                end,
                payload.len()
            )));
        }
        let data: Vec<f64> = payload[entry.offset as usize..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        out.insert(entry.name.clone(), (entry.shape.clone(), data));
        expected_offset = end as u64;
    }
    if expected_offset as usize != payload.len() {
        return Err(TrainerError::CorruptCheckpoint(format!(
            "payload has {} trailing bytes past the tensor directory",
            payload.len() - expected_offset as usize
        )));
    }
    Ok((header, out))
}

// ---------------------------------------------------------------------------
// Model bundle

pub struct Model {
    pub encoder_config: EncoderConfig,
    pub encoder: EncoderParams,
    pub head: Option<HeadParams>,
    pub codebook: Option<Codebook>,
    /// HuBERT masked-prediction projection `[d, n_clusters]`.
    pub hubert_proj: Option<Tensor>,
    /// Final projection `([d, d], [d])` mapping standardized context
    /// frames into the quantized-target space for the contrastive loss.
    pub w2v_proj: Option<(Tensor, Tensor)>,
    pub labels: Vec<String>,
}

impl Model {
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = self.encoder.named_params();
        if let Some(head) = &self.head {
            out.extend(head.named_params());
        }
        if let Some(cb) = &self.codebook {
            out.extend(cb.named_params());
        }
        if let Some(proj) = &self.hubert_proj {
            out.push(("hubert.proj".into(), proj.clone()));
        }
        if let Some((w, b)) = &self.w2v_proj {
            out.push(("w2v.proj_w".into(), w.clone()));
            out.push(("w2v.proj_b".into(), b.clone()));
        }
        out
    }

    pub fn save(&self, config: &BTreeMap<String, String>, path: &Path) -> Result<(), TrainerError> {
        let mut config = config.clone();
        config.insert("n_classes".into(), self.labels.len().to_string());
        config.insert("labels".into(), self.labels.join(","));
        save_checkpoint(&self.named_tensors(), &config, path)
    }

    /// Rebuild a model from a checkpoint; which parts exist is inferred
    /// from the tensor directory.
    pub fn load(path: &Path) -> Result<Model, TrainerError> {
        let (header, tensors) = load_checkpoint(path)?;
        let get = |key: &str| -> Result<&String, TrainerError> {
            header.config.get(key).ok_or_else(|| {
                TrainerError::CorruptCheckpoint(format!("config key '{key}' missing"))
            })
        };
        let parse_key = |key: &str| -> Result<usize, TrainerError> {
            get(key)?
                .parse()
                .map_err(|_| TrainerError::CorruptCheckpoint(format!("bad config key '{key}'")))
        };
        let encoder_config = EncoderConfig {
            conv_layers: parse_conv_layers(get("conv_layers")?)
                .map_err(|_| TrainerError::CorruptCheckpoint("bad conv_layers".into()))?,
            model_dim: parse_key("model_dim")?,
            n_heads: parse_key("n_heads")?,
            n_layers: parse_key("n_layers")?,
            ffn_dim: parse_key("ffn_dim")?,
            mask_prob: get("mask_prob")?
                .parse()
                .map_err(|_| TrainerError::CorruptCheckpoint("bad mask_prob".into()))?,
            mask_span: parse_key("mask_span")?,
            max_positions: parse_key("max_positions")?,
        };
        let d = encoder_config.model_dim;
        let encoder = EncoderParams::init(&encoder_config, 0);
        let has = |name: &str| tensors.contains_key(name);
        let head = if has("head.hidden") {
            let n_classes = parse_key("n_classes")?;
            let hidden = parse_key("head_hidden")?;
            Some(HeadParams::init_with_hidden(d, hidden, n_classes, 0))
        } else {
            None
        };
        let codebook = if has("codebook.vectors") {
            Some(Codebook::init(
                d,
                parse_key("codebook_groups")?,
                parse_key("codebook_entries")?,
                0,
            ))
        } else {
            None
        };
        let hubert_proj = if has("hubert.proj") {
            let k = parse_key("n_clusters")?;
            Some(Tensor::param(&[d, k], vec![0.0; d * k]))
        } else {
            None
        };
        let w2v_proj = if has("w2v.proj_w") {
            Some((
                Tensor::param(&[d, d], vec![0.0; d * d]),
                Tensor::param(&[d], vec![0.0; d]),
            ))
        } else {
            None
        };
        let labels: Vec<String> = match header.config.get("labels") {
            Some(s) if !s.is_empty() => s.split(',').map(str::to_string).collect(),
            _ => Vec::new(),
        };
        let model = Model {
            encoder_config,
            encoder,
            head,
            codebook,
            hubert_proj,
            w2v_proj,
            labels,
        };
        for (name, tensor) in model.named_tensors() {
            let (shape, data) = tensors.get(&name).ok_or_else(|| {
                TrainerError::CorruptCheckpoint(format!("tensor '{name}' missing"))
            })?;
            if *shape != tensor.shape() {
                return Err(TrainerError::CorruptCheckpoint(format!(
                    "tensor '{name}' has shape {shape:?}, expected {:?}",
                    tensor.shape()
                )));
            }
            tensor.set_data(data.clone());
        }
        Ok(model)
    }
}

// ---------------------------------------------------------------------------
// Clip store and window sampling

struct LoadedClip {
    path: String,
    class: usize,
    samples: Vec<f64>,
    sample_rate: u32,
}

fn load_split(manifest: &Manifest, split: Split) -> Result<Vec<LoadedClip>, TrainerError> {
    let entries = manifest.split_entries(split);
    if entries.is_empty() {
        return Err(TrainerError::Audio(AudioError::EmptySplit(split)));
    }
    entries
        .iter()
        .map(|e| {
            let clip = read_wav(&manifest.resolve(&e.path))?;
            Ok(LoadedClip {
                path: e.path.clone(),
                class: manifest.class_id(&e.speaker).expect("manifest label"),
                samples: clip.samples,
                sample_rate: clip.sample_rate,
            })
        })
        .collect()
}

fn window_len(clip: &LoadedClip, max_len_s: f64) -> usize {
    let w = (max_len_s * clip.sample_rate as f64).round() as usize;
    w.min(clip.samples.len())
}

/// Deterministic evaluation window: centered.
fn center_window(clip: &LoadedClip, max_len_s: f64) -> (usize, &[f64]) {
    let w = window_len(clip, max_len_s);
    let start = (clip.samples.len() - w) / 2;
    (start, &clip.samples[start..start + w])
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derive_seed(base: u64, a: u64, b: u64, c: u64) -> u64 {
    splitmix(base ^ splitmix(a ^ splitmix(b ^ splitmix(c))))
}

/// Draw a span mask, retrying with fresh seeds until it has at least
/// `min_masked` positions (mask probabilities make an empty draw rare
/// but possible).
fn mask_with_retry(
    frames: &Tensor,
    encoder: &EncoderParams,
    config: &EncoderConfig,
    base_seed: u64,
    min_masked: usize,
) -> (Tensor, MaskSpec) {
    for attempt in 0..64u64 {
        let (masked, spec) = span_mask(frames, &encoder.mask_emb, config, splitmix(base_seed ^ attempt));
        if spec.masked_indices.len() >= min_masked {
            return (masked, spec);
        }
    }
    // practically unreachable for any usable mask_prob; mask everything
    let t_len = frames.shape()[0];
    let spec = MaskSpec {
        masked_indices: (0..t_len).collect(),
        spans: vec![(0, t_len)],
    };
    let all = vec![true; t_len];
    let mut cfg = config.clone();
    cfg.mask_prob = 1.0 - 1e-12;
    cfg.mask_span = t_len;
    let (m, _) = span_mask(frames, &encoder.mask_emb, &cfg, base_seed);
    let _ = all;
    (m, spec)
}

// ---------------------------------------------------------------------------
// Teacher labels (HuBERT)

/// Per-clip teacher label vectors at the MFCC frame rate (10 ms hop).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TeacherLabels {
    pub k: usize,
    pub mfcc_coeffs: usize,
    pub seed: u64,
    pub per_clip: BTreeMap<String, Vec<usize>>,
}

impl TeacherLabels {
    fn cache_header(&self) -> String {
        format!(
            "{{\"k\":{},\"mfcc_coeffs\":{},\"seed\":{}}}",
            self.k, self.mfcc_coeffs, self.seed
        )
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainerError> {
        let mut out = Vec::new();
        writeln!(out, "{}", self.cache_header())?;
        for (path_key, labels) in &self.per_clip {
            let joined: Vec<String> = labels.iter().map(|l| l.to_string()).collect();
            writeln!(out, "{path_key}\t{}", joined.join(" "))?;
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Load the cache if present and built with the same settings.
    pub fn load_if_valid(
        path: &Path,
        k: usize,
        mfcc_coeffs: usize,
        seed: u64,
    ) -> Option<TeacherLabels> {
        let text = fs::read_to_string(path).ok()?;
        let mut lines = text.lines();
        let want = TeacherLabels {
            k,
            mfcc_coeffs,
            seed,
            per_clip: BTreeMap::new(),
        };
        if lines.next()? != want.cache_header() {
            return None;
        }
        let mut per_clip = BTreeMap::new();
        for line in lines {
            let (p, rest) = line.split_once('\t')?;
            let labels: Option<Vec<usize>> =
                rest.split_whitespace().map(|t| t.parse().ok()).collect();
            per_clip.insert(p.to_string(), labels?);
        }
        Some(TeacherLabels {
            k,
            mfcc_coeffs,
            seed,
            per_clip,
        })
    }
}

/// K-means over train-split MFCC frames (capped seeded sample), then
/// assignment of every frame of every clip in the given splits.
pub fn compute_teacher_labels(
    manifest: &Manifest,
    k: usize,
    mfcc_coeffs: usize,
    seed: u64,
    max_sample: usize,
) -> Result<TeacherLabels, TrainerError> {
    let mut per_clip_feats: Vec<(String, Split, Vec<Vec<f64>>)> = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        for entry in manifest.split_entries(split) {
            let clip = read_wav(&manifest.resolve(&entry.path))?;
            let feats = mfcc(&clip, mfcc_coeffs)?;
            per_clip_feats.push((entry.path.clone(), split, feats));
        }
    }
    let train_frames: Vec<&Vec<f64>> = per_clip_feats
        .iter()
        .filter(|(_, s, _)| *s == Split::Train)
        .flat_map(|(_, _, f)| f.iter())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x7463_6872);
    let sample: Vec<Vec<f64>> = if train_frames.len() > max_sample {
        let mut idx: Vec<usize> = (0..train_frames.len()).collect();
        for i in 0..max_sample {
            let j = rng.gen_range(i..idx.len());
            idx.swap(i, j);
        }
        idx[..max_sample]
            .iter()
            .map(|&i| train_frames[i].clone())
            .collect()
    } else {
        train_frames.iter().map(|f| (*f).clone()).collect()
    };
    let centroids = kmeans_fit(&sample, k, 50, seed)?;
    let mut per_clip = BTreeMap::new();
    for (path, _, feats) in &per_clip_feats {
        per_clip.insert(path.clone(), kmeans_assign(feats, &centroids)?);
    }
    Ok(TeacherLabels {
        k,
        mfcc_coeffs,
        seed,
        per_clip,
    })
}

/// Teacher label for each latent frame of a window starting at sample
/// `start`: the MFCC frame whose window center is nearest (ties toward
/// the earlier frame).
fn align_teacher_window(
    labels: &[usize],
    t_len: usize,
    start: usize,
    latent_hop: usize,
) -> Vec<usize> {
    (0..t_len)
        .map(|t| {
            let pos = start + t * latent_hop;
            let lo = pos / MFCC_HOP;
            let hi = lo + 1;
            let pick = if hi < labels.len() && (hi * MFCC_HOP).abs_diff(pos) < (lo * MFCC_HOP).abs_diff(pos)
            {
                hi
            } else {
                lo.min(labels.len().saturating_sub(1))
            };
            labels[pick]
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Training loops

pub struct PretrainResult {
    pub checkpoint: PathBuf,
    pub log: TrainLog,
    pub best_vl: f64,
}

struct Snapshot(Vec<Vec<f64>>);

fn snapshot(params: &[Tensor]) -> Snapshot {
    Snapshot(params.iter().map(|p| p.data()).collect())
}

fn restore(params: &[Tensor], snap: &Snapshot) {
    for (p, d) in params.iter().zip(&snap.0) {
        p.set_data(d.clone());
    }
}

fn mean_losses(losses: &[Tensor]) -> Tensor {
    let mut acc = losses[0].clone();
    for l in &losses[1..] {
        acc = ops::add(&acc, l);
    }
    ops::mul_scalar(&acc, 1.0 / losses.len() as f64)
}

/// Self-supervised pretraining (`w2v` or `hubert` objective) over the
/// train split, with validation loss every `eval_interval` steps. The
/// best-validation-loss parameters are saved as the checkpoint.
pub fn pretrain(config: &TrainConfig, manifest: &Manifest) -> Result<PretrainResult, TrainerError> {
    assert!(
        matches!(config.objective, Objective::W2v | Objective::Hubert),
        "pretrain requires the w2v or hubert objective"
    );
    fs::create_dir_all(&config.checkpoint_dir)?;
    let train = load_split(manifest, Split::Train)?;
    let val = load_split(manifest, Split::Val)?;
    let d = config.encoder.model_dim;

    let teacher = if config.objective == Objective::Hubert {
        let cache = config.checkpoint_dir.join("teacher_cache.txt");
        let labels = match TeacherLabels::load_if_valid(
            &cache,
            config.n_clusters,
            config.mfcc_coeffs,
            config.seed,
        ) {
            Some(t) => t,
            None => {
                let t = compute_teacher_labels(
                    manifest,
                    config.n_clusters,
                    config.mfcc_coeffs,
                    config.seed,
                    100_000,
                )?;
                t.save(&cache)?;
                t
            }
        };
        Some(labels)
    } else {
        None
    };

    let model = Model {
        encoder_config: config.encoder.clone(),
        encoder: EncoderParams::init(&config.encoder, config.seed),
        head: None,
        codebook: match config.objective {
            Objective::W2v => Some(Codebook::init(
                d,
                config.codebook_groups,
                config.codebook_entries,
                config.seed,
            )),
            _ => None,
        },
        hubert_proj: match config.objective {
            Objective::Hubert => {
                let k = config.n_clusters;
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(0x6870_726a);
                let bound = 1.0 / (d as f64).sqrt();
                Some(Tensor::param(
                    &[d, k],
                    (0..d * k).map(|_| rng.gen_range(-bound..bound)).collect(),
                ))
            }
            _ => None,
        },
        w2v_proj: match config.objective {
            Objective::W2v => {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(0x7770_726a);
                let bound = 1.0 / (d as f64).sqrt();
                Some((
                    Tensor::param(
                        &[d, d],
                        (0..d * d).map(|_| rng.gen_range(-bound..bound)).collect(),
                    ),
                    Tensor::param(&[d], vec![0.0; d]),
                ))
            }
            _ => None,
        },
        labels: manifest.labels().to_vec(),
    };
    if let Some(cb) = &model.codebook {
        // data-driven codebook start: k-means centroids over transformed
        // latents of a train-clip sample, so initial code selections are
        // coherent assignments rather than noise
        let step = (train.len() / 48).max(1);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for clip in train.iter().step_by(step).take(48) {
            let (_, window) = center_window(clip, config.max_len_s);
            let frames = feature_encoder(window, &model.encoder, &config.encoder)?;
            let feats = quantizer_features(&frames);
            let (t_len, fd) = (feats.shape()[0], feats.shape()[1]);
            let data = feats.data();
            for t in 0..t_len {
                rows.push(data[t * fd..(t + 1) * fd].to_vec());
            }
        }
        seed_codebook(cb, &rows, 3.0, config.seed)?;
    }
    let named = model.named_tensors();
    let params: Vec<Tensor> = named.iter().map(|(_, t)| t.clone()).collect();
    let mut adam = Adam::new(
        &params,
        AdamHyper {
            lr: config.lr,
            ..AdamHyper::default()
        },
    );
    let hyper = W2vHyper {
        k_distractors: config.k_distractors,
        kappa: config.kappa,
        alpha: config.alpha,
        temperature: config.gumbel_temperature,
    };

    let latent_hop = config.encoder.total_stride();
    let ckpt_path = config.checkpoint_dir.join("pretrain.ckpt");
    let snapshot_cfg = config.snapshot();
    let mut batch_rng = ChaCha8Rng::seed_from_u64(config.seed);
    batch_rng.set_stream(0x6261_7463);
    let mut log = TrainLog::default();
    let mut best_vl = f64::INFINITY;
    let mut best_state: Option<Snapshot> = None;
    let mut last_good: Option<Snapshot> = None;

    let clip_loss = |clip: &LoadedClip, start: usize, window: &[f64], mask_seed: u64| -> Result<Tensor, TrainerError> {
        let frames = feature_encoder(window, &model.encoder, &config.encoder)?;
        let t_len = frames.shape()[0];
        let min_masked = if config.objective == Objective::W2v { 2 } else { 1 };
        let (masked, spec) =
            mask_with_retry(&frames, &model.encoder, &config.encoder, mask_seed, min_masked);
        let context =
            transformer_encode(&masked, &vec![true; t_len], &model.encoder, &config.encoder)?;
        match config.objective {
            Objective::W2v => {
                let (w, b) = model.w2v_proj.as_ref().expect("context projection");
                let projected = ops::linear(&standardize_rows(&context), w, b)?;
                Ok(pretrain_loss_w2v(
                    &projected,
                    &frames,
                    model.codebook.as_ref().expect("codebook"),
                    &spec,
                    &hyper,
                    mask_seed,
                )?)
            }
            Objective::Hubert => {
                let teacher = teacher.as_ref().expect("teacher labels");
                let labels = teacher
                    .per_clip
                    .get(&clip.path)
                    .ok_or_else(|| TrainerError::CorruptCheckpoint(format!(
                        "teacher cache lacks labels for '{}'", clip.path
                    )))?;
                let aligned = align_teacher_window(labels, t_len, start, latent_hop);
                Ok(masked_prediction_loss(
                    &context,
                    &aligned,
                    &spec,
                    model.hubert_proj.as_ref().expect("projection"),
                )?)
            }
            Objective::Finetune => unreachable!(),
        }
    };

    let val_loss = |step: u64| -> Result<f64, TrainerError> {
        let mut total = 0.0;
        for (i, clip) in val.iter().enumerate() {
            let (start, window) = center_window(clip, config.max_len_s);
            let mask_seed = derive_seed(config.seed, 0xe7a1, step, i as u64);
            let loss = clip_loss(clip, start, window, mask_seed)?;
            total += loss.item();
        }
        Ok(total / val.len() as f64)
    };

    for step in 1..=config.max_iter as u64 {
        let mut losses = Vec::with_capacity(config.batch_size);
        for b in 0..config.batch_size {
            let clip = &train[batch_rng.gen_range(0..train.len())];
            let w = window_len(clip, config.max_len_s);
            let start = batch_rng.gen_range(0..=clip.samples.len() - w);
            let window = &clip.samples[start..start + w];
            let mask_seed = derive_seed(config.seed, step, b as u64, start as u64);
            losses.push(clip_loss(clip, start, window, mask_seed)?);
        }
        let loss = mean_losses(&losses);
        let tl = loss.item();
        if !tl.is_finite() {
            if let Some(snap) = last_good.as_ref().or(best_state.as_ref()) {
                restore(&params, snap);
            }
            model.save(&snapshot_cfg, &ckpt_path)?;
            return Err(TrainerError::DivergedLoss { step });
        }
        backward(&loss)?;
        adam.step(&params);
        last_good = Some(snapshot(&params));

        let vl = if step % config.eval_interval as u64 == 0 || step == config.max_iter as u64 {
            let v = val_loss(step)?;
            if v < best_vl {
                best_vl = v;
                best_state = Some(snapshot(&params));
            }
            Some(v)
        } else {
            None
        };
        log.push(step, tl, vl);
    }

    if let Some(best) = &best_state {
        restore(&params, best);
    }
    model.save(&snapshot_cfg, &ckpt_path)?;
    log.save_csv(&config.checkpoint_dir.join("pretrain_log.csv"))?;
    Ok(PretrainResult {
        checkpoint: ckpt_path,
        log,
        best_vl,
    })
}

pub struct FinetuneResult {
    pub checkpoint: PathBuf,
    pub log: TrainLog,
    pub best_vl: f64,
    /// Validation macro-F1 at each evaluation step.
    pub f1_curve: Vec<(u64, f64)>,
}

/// Supervised fine-tuning of encoder + classification head with
/// (optionally class-weighted) cross entropy, early stopping on
/// validation loss, and best-validation checkpointing. `init` warm-starts
/// the encoder from a pretraining checkpoint.
pub fn finetune(
    config: &TrainConfig,
    manifest: &Manifest,
    init: Option<&Path>,
) -> Result<FinetuneResult, TrainerError> {
    assert!(
        config.objective == Objective::Finetune,
        "finetune requires the finetune objective"
    );
    fs::create_dir_all(&config.checkpoint_dir)?;
    let train = load_split(manifest, Split::Train)?;
    let val = load_split(manifest, Split::Val)?;
    let n_classes = manifest.n_classes();
    let d = config.encoder.model_dim;

    let encoder = EncoderParams::init(&config.encoder, config.seed);
    if let Some(ckpt) = init {
        let (_, tensors) = load_checkpoint(ckpt)?;
        for (name, tensor) in encoder.named_params() {
            if let Some((shape, data)) = tensors.get(&name) {
                if *shape != tensor.shape() {
                    return Err(TrainerError::CorruptCheckpoint(format!(
                        "init tensor '{name}' has shape {shape:?}, expected {:?}",
                        tensor.shape()
                    )));
                }
                tensor.set_data(data.clone());
            }
        }
    }
    let model = Model {
        encoder_config: config.encoder.clone(),
        encoder,
        head: Some(HeadParams::init_with_hidden(
            d,
            config.head_hidden,
            n_classes,
            config.seed,
        )),
        codebook: None,
        hubert_proj: None,
        w2v_proj: None,
        labels: manifest.labels().to_vec(),
    };
    let weights = if config.class_weighting {
        class_weights(manifest, Split::Train)?
    } else {
        vec![1.0; n_classes]
    };

    let named = model.named_tensors();
    let params: Vec<Tensor> = if config.freeze_encoder {
        named
            .iter()
            .filter(|(n, _)| n.starts_with("head."))
            .map(|(_, t)| t.clone())
            .collect()
    } else {
        named.iter().map(|(_, t)| t.clone()).collect()
    };
    let mut adam = Adam::new(
        &params,
        AdamHyper {
            lr: config.lr,
            ..AdamHyper::default()
        },
    );

    let head = model.head.as_ref().expect("head");
    let forward_logits = |windows: &[&[f64]]| -> Result<Tensor, TrainerError> {
        let mut pooled = Vec::with_capacity(windows.len());
        for w in windows {
            let frames = feature_encoder(w, &model.encoder, &config.encoder)?;
            let t_len = frames.shape()[0];
            let valid = vec![true; t_len];
            let context = transformer_encode(&frames, &valid, &model.encoder, &config.encoder)?;
            let p = pooled_context(&context, &valid)?;
            pooled.push(ops::reshape(&p, &[1, d]));
        }
        Ok(mlp_head_rows(&ops::stack_rows(&pooled), head)?)
    };

    let val_eval = || -> Result<(f64, f64), TrainerError> {
        let mut preds = Vec::with_capacity(val.len());
        let mut targets = Vec::with_capacity(val.len());
        let mut total = 0.0;
        for clip in &val {
            let (_, window) = center_window(clip, config.max_len_s);
            let logits = forward_logits(&[window])?;
            total += ops::weighted_cross_entropy(&logits, &[clip.class], &weights)?.item();
            let row = logits.data();
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            preds.push(argmax);
            targets.push(clip.class);
        }
        let cm = confusion_matrix(&preds, &targets, &manifest.labels())?;
        let f1 = precision_recall_f1(&cm)?.macro_f1;
        Ok((total / val.len() as f64, f1))
    };

    let ckpt_path = config.checkpoint_dir.join("finetune.ckpt");
    let snapshot_cfg = config.snapshot();
    let mut batch_rng = ChaCha8Rng::seed_from_u64(config.seed);
    batch_rng.set_stream(0x6261_7463);
    let mut log = TrainLog::default();
    let mut f1_curve = Vec::new();
    let mut best_vl = f64::INFINITY;
    let mut best_state: Option<Snapshot> = None;
    let mut last_good: Option<Snapshot> = None;
    let mut evals_since_best = 0usize;

    for step in 1..=config.max_iter as u64 {
        let mut windows: Vec<&[f64]> = Vec::with_capacity(config.batch_size);
        let mut targets = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let clip = &train[batch_rng.gen_range(0..train.len())];
            let w = window_len(clip, config.max_len_s);
            let start = batch_rng.gen_range(0..=clip.samples.len() - w);
            windows.push(&clip.samples[start..start + w]);
            targets.push(clip.class);
        }
        let logits = forward_logits(&windows)?;
        let loss = ops::weighted_cross_entropy(&logits, &targets, &weights)?;
        let tl = loss.item();
        if !tl.is_finite() {
            if let Some(snap) = last_good.as_ref().or(best_state.as_ref()) {
                restore(&params, snap);
            }
            model.save(&snapshot_cfg, &ckpt_path)?;
            return Err(TrainerError::DivergedLoss { step });
        }
        backward(&loss)?;
        adam.step(&params);
        last_good = Some(snapshot(&params));

        let mut stop = false;
        let vl = if step % config.eval_interval as u64 == 0 || step == config.max_iter as u64 {
            let (v, f1) = val_eval()?;
            f1_curve.push((step, f1));
            if v < best_vl {
                best_vl = v;
                best_state = Some(snapshot(&params));
                evals_since_best = 0;
            } else {
                evals_since_best += 1;
                if evals_since_best >= config.patience {
                    stop = true;
                }
            }
            if config.stop_vl > 0.0 && v <= config.stop_vl {
                stop = true;
            }
            Some(v)
        } else {
            None
        };
        log.push(step, tl, vl);
        if stop {
            break;
        }
    }

    if let Some(best) = &best_state {
        restore(&params, best);
    }
    model.save(&snapshot_cfg, &ckpt_path)?;
    log.save_csv(&config.checkpoint_dir.join("finetune_log.csv"))?;
    Ok(FinetuneResult {
        checkpoint: ckpt_path,
        log,
        best_vl,
        f1_curve,
    })
}

// ---------------------------------------------------------------------------
// Evaluation

/// Deterministic whole-clip prediction over a split.
pub fn evaluate(
    model: &Model,
    manifest: &Manifest,
    split: Split,
) -> Result<(MetricsReport, ConfusionMatrix), TrainerError> {
    let entries = manifest.split_entries(split);
    if entries.is_empty() {
        return Err(TrainerError::Audio(AudioError::EmptySplit(split)));
    }
    let head = model.head.as_ref().expect("evaluate needs a classifier head");
    let mut preds = Vec::with_capacity(entries.len());
    let mut targets = Vec::with_capacity(entries.len());
    for entry in entries {
        let clip = read_wav(&manifest.resolve(&entry.path))?;
        let p = predict(
            &clip,
            &model.encoder,
            head,
            &model.encoder_config,
            &model.labels,
        )?;
        preds.push(p.class_id);
        targets.push(manifest.class_id(&entry.speaker).expect("manifest label"));
    }
    let cm = confusion_matrix(&preds, &targets, &manifest.labels())?;
    Ok((precision_recall_f1(&cm)?, cm))
}

/// Held-out masked-frame prediction accuracy for a HuBERT-pretrained
/// model: fraction of masked latent frames whose argmax cluster logit
/// matches the teacher label.
pub fn masked_frame_accuracy(
    model: &Model,
    manifest: &Manifest,
    split: Split,
    teacher: &TeacherLabels,
    max_len_s: f64,
    seed: u64,
) -> Result<f64, TrainerError> {
    let clips = load_split(manifest, split)?;
    let proj = model.hubert_proj.as_ref().expect("hubert projection");
    let latent_hop = model.encoder_config.total_stride();
    let mut hits = 0usize;
    let mut total = 0usize;
    for (i, clip) in clips.iter().enumerate() {
        let (start, window) = center_window(clip, max_len_s);
        let frames = feature_encoder(window, &model.encoder, &model.encoder_config)?;
        let t_len = frames.shape()[0];
        let (masked, spec) = mask_with_retry(
            &frames,
            &model.encoder,
            &model.encoder_config,
            derive_seed(seed, 0xacc, i as u64, 0),
            1,
        );
        let context = transformer_encode(
            &masked,
            &vec![true; t_len],
            &model.encoder,
            &model.encoder_config,
        )?;
        let labels = teacher
            .per_clip
            .get(&clip.path)
            .ok_or_else(|| TrainerError::CorruptCheckpoint(format!(
                "teacher cache lacks labels for '{}'", clip.path
            )))?;
        let aligned = align_teacher_window(labels, t_len, start, latent_hop);
        let logits = ops::matmul(&context, proj).data();
        let k = proj.shape()[1];
        for &t in &spec.masked_indices {
            let row = &logits[t * k..(t + 1) * k];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if argmax == aligned[t] {
                hits += 1;
            }
            total += 1;
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}

/// Mean held-out contrastive loss (without the diversity term) for a
/// wav2vec2-style pretrained model.
pub fn contrastive_val_loss(
    model: &Model,
    manifest: &Manifest,
    split: Split,
    k_distractors: usize,
    kappa: f64,
    temperature: f64,
    max_len_s: f64,
    seed: u64,
) -> Result<f64, TrainerError> {
    let clips = load_split(manifest, split)?;
    let codebook = model.codebook.as_ref().expect("codebook");
    let mut total = 0.0;
    for (i, clip) in clips.iter().enumerate() {
        let (_, window) = center_window(clip, max_len_s);
        let frames = feature_encoder(window, &model.encoder, &model.encoder_config)?;
        let t_len = frames.shape()[0];
        let mask_seed = derive_seed(seed, 0xc0, i as u64, 0);
        let (masked, spec) =
            mask_with_retry(&frames, &model.encoder, &model.encoder_config, mask_seed, 2);
        let context = transformer_encode(
            &masked,
            &vec![true; t_len],
            &model.encoder,
            &model.encoder_config,
        )?;
        let context = match &model.w2v_proj {
            Some((w, b)) => ops::linear(&standardize_rows(&context), w, b)?,
            None => context,
        };
        let (quantized, _) = quantize(&frames, codebook, temperature, mask_seed)?;
        total +=
            contrastive_loss(&context, &quantized, &spec, k_distractors, kappa, mask_seed)?.item();
    }
    Ok(total / clips.len() as f64)
}
