//! Shared representation stack: MFCC frontend (teacher features), a
//! strided convolutional latent encoder, span masking, and a pre-norm
//! transformer context network.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use thiserror::Error;

use crate::audio_io::AudioClip;
use crate::numcore::ops;
use crate::numcore::{NumError, Tensor};

pub const MFCC_WINDOW: usize = 400; // 25 ms at 16 kHz
pub const MFCC_HOP: usize = 160; // 10 ms
pub const MFCC_NFFT: usize = 512;
pub const MEL_FILTERS: usize = 26;
pub const DEFAULT_MFCC_COEFFS: usize = 13;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("clip shorter than one analysis window ({0} < {MFCC_WINDOW} samples)")]
    ClipTooShort(usize),
    #[error("waveform of {got} samples shorter than the encoder receptive field ({needed})")]
    InputTooShort { needed: usize, got: usize },
    #[error("teacher label vector is empty")]
    EmptyLabels,
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// (channels, width, stride) per conv layer.
    pub conv_layers: Vec<(usize, usize, usize)>,
    pub model_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    pub mask_prob: f64,
    pub mask_span: usize,
    pub max_positions: usize,
}

impl Default for EncoderConfig {
    /// Desk-scale default: one latent frame per 20 ms with a 25 ms
    /// receptive field (total stride 320, receptive field 400 at 16 kHz).
    fn default() -> Self {
        EncoderConfig {
            conv_layers: vec![
                (64, 10, 5),
                (64, 3, 2),
                (64, 3, 2),
                (64, 3, 2),
                (64, 3, 2),
                (64, 2, 2),
                (64, 2, 2),
            ],
            model_dim: 64,
            n_heads: 4,
            n_layers: 2,
            ffn_dim: 128,
            mask_prob: 0.065,
            mask_span: 10,
            max_positions: 512,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) {
        assert!(self.model_dim % self.n_heads == 0, "model_dim must divide by n_heads");
        assert!((0.0..1.0).contains(&self.mask_prob));
        assert!(self.mask_span >= 1);
        assert!(!self.conv_layers.is_empty());
    }

    /// Latent frame count for a waveform of `len` samples, or None if
    /// the input is shorter than the receptive field.
    pub fn conv_out_len(&self, len: usize) -> Option<usize> {
        let mut t = len;
        for &(_, width, stride) in &self.conv_layers {
            if t < width {
                return None;
            }
            t = (t - width) / stride + 1;
        }
        Some(t)
    }

    pub fn receptive_field(&self) -> usize {
        // smallest input length that yields one output frame
        let mut rf = 1;
        for &(_, width, stride) in self.conv_layers.iter().rev() {
            rf = (rf - 1) * stride + width;
        }
        rf
    }

    /// Samples between consecutive latent frame starts.
    pub fn total_stride(&self) -> usize {
        self.conv_layers.iter().map(|&(_, _, s)| s).product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub masked_indices: Vec<usize>,
    pub spans: Vec<(usize, usize)>,
}

impl MaskSpec {
    pub fn empty() -> MaskSpec {
        MaskSpec {
            masked_indices: Vec::new(),
            spans: Vec::new(),
        }
    }

    pub fn is_masked(&self, t: usize) -> bool {
        self.masked_indices.binary_search(&t).is_ok()
    }
}

// ---------------------------------------------------------------------------
// MFCC

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank over 0..8 kHz for the fixed FFT size.
fn mel_filterbank(sample_rate: f64) -> Vec<Vec<f64>> {
    let n_bins = MFCC_NFFT / 2 + 1;
    let f_max = 8000.0f64.min(sample_rate / 2.0);
    let m_lo = hz_to_mel(0.0);
    let m_hi = hz_to_mel(f_max);
    let points: Vec<f64> = (0..MEL_FILTERS + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (MEL_FILTERS + 1) as f64))
        .collect();
    let hz_per_bin = sample_rate / MFCC_NFFT as f64;
    let mut filters = vec![vec![0.0; n_bins]; MEL_FILTERS];
    for (k, filter) in filters.iter_mut().enumerate() {
        let (lo, mid, hi) = (points[k], points[k + 1], points[k + 2]);
        for (b, w) in filter.iter_mut().enumerate() {
            let f = b as f64 * hz_per_bin;
            if f > lo && f < mid {
                *w = (f - lo) / (mid - lo);
            } else if (f - mid).abs() < 1e-9 {
                *w = 1.0;
            } else if f > mid && f < hi {
                *w = (hi - f) / (hi - mid);
            }
        }
    }
    filters
}

/// Center frequencies of the mel filters in Hz.
pub fn mel_filter_centers(sample_rate: f64) -> Vec<f64> {
    let f_max = 8000.0f64.min(sample_rate / 2.0);
    let m_lo = hz_to_mel(0.0);
    let m_hi = hz_to_mel(f_max);
    (1..=MEL_FILTERS)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (MEL_FILTERS + 1) as f64))
        .collect()
}

/// Log-mel filterbank energies: 25 ms Hann window, 10 ms hop.
pub fn log_mel_spectrogram(clip: &AudioClip) -> Result<Vec<Vec<f64>>, EncoderError> {
    let n = clip.samples.len();
    if n < MFCC_WINDOW {
        return Err(EncoderError::ClipTooShort(n));
    }
    let frames = (n - MFCC_WINDOW) / MFCC_HOP + 1;
    let hann: Vec<f64> = (0..MFCC_WINDOW)
        .map(|i| {
            0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (MFCC_WINDOW - 1) as f64).cos()
        })
        .collect();
    let filters = mel_filterbank(clip.sample_rate as f64);
    let fft = FftPlanner::new().plan_fft_forward(MFCC_NFFT);
    let n_bins = MFCC_NFFT / 2 + 1;
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let start = t * MFCC_HOP;
        let mut buf: Vec<Complex<f64>> = (0..MFCC_NFFT)
            .map(|i| {
                if i < MFCC_WINDOW {
                    Complex::new(clip.samples[start + i] * hann[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                }
            })
            .collect();
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..n_bins].iter().map(|c| c.norm_sqr()).collect();
        let row: Vec<f64> = filters
            .iter()
            .map(|f| {
                let e: f64 = f.iter().zip(&power).map(|(w, p)| w * p).sum();
                (e + 1e-10).ln()
            })
            .collect();
        out.push(row);
    }
    Ok(out)
}

/// MFCCs: log-mel energies followed by DCT-II, first `n_coeffs` kept.
pub fn mfcc(clip: &AudioClip, n_coeffs: usize) -> Result<Vec<Vec<f64>>, EncoderError> {
    let mel = log_mel_spectrogram(clip)?;
    let m = MEL_FILTERS as f64;
    Ok(mel
        .iter()
        .map(|row| {
            (0..n_coeffs)
                .map(|k| {
                    row.iter()
                        .enumerate()
                        .map(|(n, &x)| {
                            x * (std::f64::consts::PI * k as f64 * (n as f64 + 0.5) / m).cos()
                        })
                        .sum()
                })
                .collect()
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Parameters

pub struct ConvLayerParams {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
}

pub struct BlockParams {
    pub attn_ln_gamma: Tensor,
    pub attn_ln_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    /// no key bias: it cancels inside the row softmax
    pub wk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ffn_ln_gamma: Tensor,
    pub ffn_ln_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

pub struct EncoderParams {
    pub conv: Vec<ConvLayerParams>,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub mask_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<BlockParams>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::param(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
}

fn ones(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::param(shape, vec![1.0; n])
}

fn zeros_p(shape: &[usize]) -> Tensor {
    Tensor::param(shape, vec![0.0; shape.iter().product()])
}

impl EncoderParams {
    pub fn init(config: &EncoderConfig, seed: u64) -> EncoderParams {
        config.validate();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x656e_6300);
        let d = config.model_dim;
        let mut conv = Vec::new();
        let mut cin = 1;
        for &(cout, width, _) in &config.conv_layers {
            let bound = 1.0 / ((cin * width) as f64).sqrt();
            conv.push(ConvLayerParams {
                kernel: uniform(&mut rng, &[cout, cin, width], bound),
                bias: zeros_p(&[cout]),
                ln_gamma: ones(&[cout]),
                ln_beta: zeros_p(&[cout]),
            });
            cin = cout;
        }
        let bound = 1.0 / (cin as f64).sqrt();
        let proj_w = uniform(&mut rng, &[cin, d], bound);
        let proj_b = zeros_p(&[d]);
        let mask_emb = uniform(&mut rng, &[d], 0.1);
        let pos_emb = uniform(&mut rng, &[config.max_positions, d], 0.5);
        let db = 1.0 / (d as f64).sqrt();
        let fb = 1.0 / (config.ffn_dim as f64).sqrt();
        let blocks = (0..config.n_layers)
            .map(|_| BlockParams {
                attn_ln_gamma: ones(&[d]),
                attn_ln_beta: zeros_p(&[d]),
                wq: uniform(&mut rng, &[d, d], db),
                bq: zeros_p(&[d]),
                wk: uniform(&mut rng, &[d, d], db),
                wv: uniform(&mut rng, &[d, d], db),
                bv: zeros_p(&[d]),
                wo: uniform(&mut rng, &[d, d], db),
                bo: zeros_p(&[d]),
                ffn_ln_gamma: ones(&[d]),
                ffn_ln_beta: zeros_p(&[d]),
                w1: uniform(&mut rng, &[d, config.ffn_dim], db),
                b1: zeros_p(&[config.ffn_dim]),
                w2: uniform(&mut rng, &[config.ffn_dim, d], fb),
                b2: zeros_p(&[d]),
            })
            .collect();
        EncoderParams {
            conv,
            proj_w,
            proj_b,
            mask_emb,
            pos_emb,
            blocks,
        }
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.conv.iter().enumerate() {
            out.push((format!("encoder.conv{i}.kernel"), layer.kernel.clone()));
            out.push((format!("encoder.conv{i}.bias"), layer.bias.clone()));
            out.push((format!("encoder.conv{i}.ln_gamma"), layer.ln_gamma.clone()));
            out.push((format!("encoder.conv{i}.ln_beta"), layer.ln_beta.clone()));
        }
        out.push(("encoder.proj_w".into(), self.proj_w.clone()));
        out.push(("encoder.proj_b".into(), self.proj_b.clone()));
        out.push(("encoder.mask_emb".into(), self.mask_emb.clone()));
        out.push(("encoder.pos_emb".into(), self.pos_emb.clone()));
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in [
                ("attn_ln_gamma", &b.attn_ln_gamma),
                ("attn_ln_beta", &b.attn_ln_beta),
                ("wq", &b.wq),
                ("bq", &b.bq),
                ("wk", &b.wk),
                ("wv", &b.wv),
                ("bv", &b.bv),
                ("wo", &b.wo),
                ("bo", &b.bo),
                ("ffn_ln_gamma", &b.ffn_ln_gamma),
                ("ffn_ln_beta", &b.ffn_ln_beta),
                ("w1", &b.w1),
                ("b1", &b.b1),
                ("w2", &b.w2),
                ("b2", &b.b2),
            ] {
                out.push((format!("encoder.block{i}.{name}"), t.clone()));
            }
        }
        out
    }

    /// Rebuild parameters from a flat tensor list in `named_params`
    /// order (used by gradient-check harnesses that own the tensors).
    pub fn from_flat(config: &EncoderConfig, flat: &[Tensor]) -> EncoderParams {
        let mut it = flat.iter().cloned();
        let mut next = || it.next().expect("enough tensors");
        let conv = (0..config.conv_layers.len())
            .map(|_| ConvLayerParams {
                kernel: next(),
                bias: next(),
                ln_gamma: next(),
                ln_beta: next(),
            })
            .collect();
        let proj_w = next();
        let proj_b = next();
        let mask_emb = next();
        let pos_emb = next();
        let blocks = (0..config.n_layers)
            .map(|_| BlockParams {
                attn_ln_gamma: next(),
                attn_ln_beta: next(),
                wq: next(),
                bq: next(),
                wk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                ffn_ln_gamma: next(),
                ffn_ln_beta: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            })
            .collect();
        EncoderParams {
            conv,
            proj_w,
            proj_b,
            mask_emb,
            pos_emb,
            blocks,
        }
    }
}

// ---------------------------------------------------------------------------
// Forward passes

/// Conv stack: per layer conv1d -> layer_norm (over channels, per frame)
/// -> gelu; then a linear projection to `model_dim`. Returns `[frames, d]`.
pub fn feature_encoder(
    waveform: &[f64],
    params: &EncoderParams,
    config: &EncoderConfig,
) -> Result<Tensor, EncoderError> {
    feature_encoder_graph(
        &Tensor::from_vec(&[1, waveform.len()], waveform.to_vec()),
        params,
        config,
    )
}

/// As `feature_encoder`, but keeps the waveform tensor in the autodiff
/// graph (shape `[1, samples]` or `[samples]`).
pub fn feature_encoder_graph(
    waveform: &Tensor,
    params: &EncoderParams,
    config: &EncoderConfig,
) -> Result<Tensor, EncoderError> {
    let len = waveform.len();
    let rf = config.receptive_field();
    if len < rf {
        return Err(EncoderError::InputTooShort { needed: rf, got: len });
    }
    let mut x = ops::reshape(waveform, &[1, len]);
    for (layer, &(_, _, stride)) in params.conv.iter().zip(&config.conv_layers) {
        let y = ops::conv1d(&x, &layer.kernel, Some(&layer.bias), stride).map_err(NumError::from)?;
        let yt = ops::transpose2(&y); // [t, channels]
        let normed = ops::layer_norm(&yt, &layer.ln_gamma, &layer.ln_beta, 1e-5)?;
        x = ops::transpose2(&ops::gelu(&normed));
    }
    let frames = ops::transpose2(&x);
    Ok(ops::linear(&frames, &params.proj_w, &params.proj_b)?)
}

/// Replace a seeded random set of spans with the mask embedding.
/// Each position independently starts a span with probability
/// `mask_prob`; spans are `mask_span` frames, clipped at the end, and
/// may overlap.
pub fn span_mask(
    frames: &Tensor,
    mask_emb: &Tensor,
    config: &EncoderConfig,
    seed: u64,
) -> (Tensor, MaskSpec) {
    let t_len = frames.shape()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x6d61_736b);
    let mut spans = Vec::new();
    let mut masked = vec![false; t_len];
    for t in 0..t_len {
        if rng.gen::<f64>() < config.mask_prob {
            let len = config.mask_span.min(t_len - t);
            spans.push((t, len));
            for slot in masked.iter_mut().skip(t).take(len) {
                *slot = true;
            }
        }
    }
    let spec = MaskSpec {
        masked_indices: masked
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| if m { Some(i) } else { None })
            .collect(),
        spans,
    };
    (replace_rows(frames, mask_emb, &masked), spec)
}

/// Rows flagged in `replace` take the embedding vector; the original
/// row content receives zero gradient there (it is fully substituted).
fn replace_rows(frames: &Tensor, emb: &Tensor, replace: &[bool]) -> Tensor {
    let shape = frames.shape();
    let (t_len, d) = (shape[0], shape[1]);
    assert_eq!(emb.len(), d);
    assert_eq!(replace.len(), t_len);
    let fd = frames.data();
    let ed = emb.data();
    let mut out = fd.clone();
    for (i, &r) in replace.iter().enumerate() {
        if r {
            out[i * d..(i + 1) * d].copy_from_slice(&ed);
        }
    }
    let (pf, pe) = (frames.clone(), emb.clone());
    let replace2 = replace.to_vec();
    Tensor::from_op(
        &shape,
        out,
        vec![frames.clone(), emb.clone()],
        Box::new(move |g| {
            let mut gf = vec![0.0; t_len * d];
            let mut ge = vec![0.0; d];
            for (i, &r) in replace2.iter().enumerate() {
                if r {
                    for j in 0..d {
                        ge[j] += g[i * d + j];
                    }
                } else {
                    gf[i * d..(i + 1) * d].copy_from_slice(&g[i * d..(i + 1) * d]);
                }
            }
            pf.accum_grad(&gf);
            pe.accum_grad(&ge);
        }),
    )
}

/// Add the learned positional embedding (the sequence handed to the
/// first attention block) and run the pre-norm transformer layers.
/// Padding positions are excluded from attention via an additive -inf
/// bias on their key columns.
pub fn transformer_encode(
    frames: &Tensor,
    valid: &[bool],
    params: &EncoderParams,
    config: &EncoderConfig,
) -> Result<Tensor, EncoderError> {
    let mut states = transformer_hidden_states(frames, valid, params, config)?;
    Ok(states.pop().expect("at least the input state"))
}

/// Per-layer hidden states: index 0 is the positional-embedded input,
/// index i the output of block i. The last entry equals
/// `transformer_encode`'s result.
pub fn transformer_hidden_states(
    frames: &Tensor,
    valid: &[bool],
    params: &EncoderParams,
    config: &EncoderConfig,
) -> Result<Vec<Tensor>, EncoderError> {
    let shape = frames.shape();
    let (t_len, d) = (shape[0], shape[1]);
    assert_eq!(valid.len(), t_len, "valid mask length mismatch");
    assert!(
        t_len <= config.max_positions,
        "sequence of {t_len} frames exceeds positional table ({})",
        config.max_positions
    );
    let positions: Vec<usize> = (0..t_len).collect();
    let pos = ops::gather_rows(&params.pos_emb, &positions);
    let mut x = ops::add(frames, &pos);
    let mut states = vec![x.clone()];

    let dh = d / config.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    // additive key bias, shared by every query row
    let mut bias = vec![0.0; t_len * t_len];
    for (j, &v) in valid.iter().enumerate() {
        if !v {
            for i in 0..t_len {
                bias[i * t_len + j] = -1e30;
            }
        }
    }

    for block in &params.blocks {
        let xn = ops::layer_norm(&x, &block.attn_ln_gamma, &block.attn_ln_beta, 1e-5)?;
        let q = ops::linear(&xn, &block.wq, &block.bq)?;
        let k = ops::matmul(&xn, &block.wk);
        let v = ops::linear(&xn, &block.wv, &block.bv)?;
        let mut heads = Vec::with_capacity(config.n_heads);
        for h in 0..config.n_heads {
            let qh = ops::slice_cols(&q, h * dh, dh);
            let kh = ops::slice_cols(&k, h * dh, dh);
            let vh = ops::slice_cols(&v, h * dh, dh);
            let scores = ops::mul_scalar(&ops::matmul(&qh, &ops::transpose2(&kh)), scale);
            let attn = ops::softmax(&scores, Some(&bias));
            heads.push(ops::matmul(&attn, &vh));
        }
        let concat = ops::concat_cols(&heads);
        let attn_out = ops::linear(&concat, &block.wo, &block.bo)?;
        x = ops::add(&x, &attn_out);

        let xn2 = ops::layer_norm(&x, &block.ffn_ln_gamma, &block.ffn_ln_beta, 1e-5)?;
        let hidden = ops::gelu(&ops::linear(&xn2, &block.w1, &block.b1)?);
        let ffn_out = ops::linear(&hidden, &block.w2, &block.b2)?;
        x = ops::add(&x, &ffn_out);
        states.push(x.clone());
    }
    Ok(states)
}

/// Map teacher labels (10 ms hop, 25 ms window) onto `target_len` latent
/// frames by nearest window center; ties break toward the earlier frame.
pub fn frame_align(teacher_labels: &[usize], target_len: usize) -> Result<Vec<usize>, EncoderError> {
    frame_align_with(teacher_labels, target_len, MFCC_HOP, 320)
}

pub fn frame_align_with(
    teacher_labels: &[usize],
    target_len: usize,
    teacher_hop: usize,
    target_hop: usize,
) -> Result<Vec<usize>, EncoderError> {
    if teacher_labels.is_empty() {
        return Err(EncoderError::EmptyLabels);
    }
    // window centers share the same offset, so only hop positions matter
    let out = (0..target_len)
        .map(|t| {
            let pos = t * target_hop;
            let lo = pos / teacher_hop;
            let hi = lo + 1;
            let pick = if hi < teacher_labels.len()
                && (hi * teacher_hop).abs_diff(pos) < (lo * teacher_hop).abs_diff(pos)
            {
                hi
            } else {
                lo.min(teacher_labels.len() - 1)
            };
            teacher_labels[pick]
        })
        .collect();
    Ok(out)
}
