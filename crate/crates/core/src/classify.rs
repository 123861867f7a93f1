//! Speaker classification head: a one-hidden-layer MLP over mean-pooled
//! context frames, inverse-frequency class weighting, and whole-clip
//! prediction.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::audio_io::{AudioClip, Manifest, Split};
use crate::encoder::{
    feature_encoder, transformer_encode, EncoderConfig, EncoderError, EncoderParams,
};
use crate::numcore::{ops, NumError, Tensor};

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("class {class} has no clips in the requested split")]
    MissingClass { class: String },
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

pub struct HeadParams {
    pub hidden: Tensor,
    pub hidden_bias: Tensor,
    pub out: Tensor,
    pub out_bias: Tensor,
}

impl HeadParams {
    /// Hidden width defaults to `2 * model_dim`.
    pub fn init(model_dim: usize, n_classes: usize, seed: u64) -> HeadParams {
        HeadParams::init_with_hidden(model_dim, 2 * model_dim, n_classes, seed)
    }

    pub fn init_with_hidden(
        model_dim: usize,
        hidden_dim: usize,
        n_classes: usize,
        seed: u64,
    ) -> HeadParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x6865_6164);
        let mut uniform = |shape: &[usize], bound: f64| {
            let n: usize = shape.iter().product();
            Tensor::param(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
        };
        let b1 = 1.0 / (model_dim as f64).sqrt();
        let b2 = 1.0 / (hidden_dim as f64).sqrt();
        HeadParams {
            hidden: uniform(&[model_dim, hidden_dim], b1),
            hidden_bias: Tensor::param(&[hidden_dim], vec![0.0; hidden_dim]),
            out: uniform(&[hidden_dim, n_classes], b2),
            out_bias: Tensor::param(&[n_classes], vec![0.0; n_classes]),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.out.shape()[1]
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        vec![
            ("head.hidden".into(), self.hidden.clone()),
            ("head.hidden_bias".into(), self.hidden_bias.clone()),
            ("head.out".into(), self.out.clone()),
            ("head.out_bias".into(), self.out_bias.clone()),
        ]
    }
}

/// `linear -> gelu -> linear` over a batch of pooled vectors `[n, d]`.
pub fn mlp_head_rows(pooled: &Tensor, params: &HeadParams) -> Result<Tensor, ClassifyError> {
    let h = ops::gelu(&ops::linear(pooled, &params.hidden, &params.hidden_bias)?);
    Ok(ops::linear(&h, &params.out, &params.out_bias)?)
}

/// Single pooled vector `[d]` to logits `[C]`.
pub fn mlp_head(pooled: &Tensor, params: &HeadParams) -> Result<Tensor, ClassifyError> {
    let d = pooled.len();
    let logits = mlp_head_rows(&ops::reshape(pooled, &[1, d]), params)?;
    let c = logits.len();
    Ok(ops::reshape(&logits, &[c]))
}

/// Inverse-frequency weights `w_c = N / (C * n_c)` over a manifest split;
/// balanced data gives the all-ones vector and `sum_c w_c * n_c = N`.
pub fn class_weights(manifest: &Manifest, split: Split) -> Result<Vec<f64>, ClassifyError> {
    let c = manifest.n_classes();
    let mut counts = vec![0usize; c];
    for entry in manifest.split_entries(split) {
        counts[manifest.class_id(&entry.speaker).expect("manifest label")] += 1;
    }
    let n: usize = counts.iter().sum();
    let labels = manifest.labels();
    for (i, &cnt) in counts.iter().enumerate() {
        if cnt == 0 {
            return Err(ClassifyError::MissingClass {
                class: labels[i].clone(),
            });
        }
    }
    Ok(counts
        .iter()
        .map(|&cnt| n as f64 / (c as f64 * cnt as f64))
        .collect())
}

/// Mean over valid context frames, `[T, d] -> [d]`.
pub fn pooled_context(context: &Tensor, valid: &[bool]) -> Result<Tensor, ClassifyError> {
    Ok(ops::mean_pool(context, valid)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class_id: usize,
    pub label: String,
    pub probs: Vec<f64>,
}

/// Full deterministic forward pass for one clip: conv features,
/// transformer context without masking, mean pooling, MLP head, softmax.
pub fn predict(
    clip: &AudioClip,
    encoder: &EncoderParams,
    head: &HeadParams,
    config: &EncoderConfig,
    labels: &[String],
) -> Result<Prediction, ClassifyError> {
    let frames = feature_encoder(&clip.samples, encoder, config)?;
    let t_len = frames.shape()[0];
    let valid = vec![true; t_len];
    let context = transformer_encode(&frames, &valid, encoder, config)?;
    let pooled = pooled_context(&context, &valid)?;
    let logits = mlp_head(&pooled, head)?;
    let c = logits.len();
    let probs = ops::softmax(&ops::reshape(&logits, &[1, c]), None).data();
    let class_id = probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .expect("non-empty logits")
        .0;
    Ok(Prediction {
        class_id,
        label: labels
            .get(class_id)
            .cloned()
            .unwrap_or_else(|| class_id.to_string()),
        probs,
    })
}
