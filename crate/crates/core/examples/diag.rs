//! Scratch diagnostic for the quantized-contrastive objective.
use std::path::Path;

use voxid::audio_io::{load_manifest, Split};
use voxid::encoder::{feature_encoder, transformer_encode, MFCC_HOP};
use voxid::numcore::ops;
use voxid::objectives::quantize;
use voxid::trainer::Model;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = Path::new(&args[1]);
    let manifest = load_manifest(Path::new(&args[2])).unwrap();
    let model = Model::load(ckpt).unwrap();
    let cb = model.codebook.as_ref().unwrap();
    let _ = MFCC_HOP;

    let entry = manifest
        .entries
        .iter()
        .find(|e| e.split == Split::Val)
        .unwrap();
    let clip = voxid::audio_io::decode_wav(&std::fs::read(manifest.resolve(&entry.path)).unwrap())
        .unwrap();
    let n = (clip.sample_rate as f64 * 1.0) as usize;
    let window = &clip.samples[..n.min(clip.samples.len())];

    let frames = feature_encoder(window, &model.encoder, &model.encoder_config).unwrap();
    let t_len = frames.shape()[0];
    let d = frames.shape()[1];
    println!("frames [{t_len},{d}]");

    // per-frame argmax code per group + softmax peak prob
    let logits = ops::linear(
        &voxid::objectives::quantizer_features(&frames),
        &cb.proj_w,
        &cb.proj_b,
    )
    .unwrap();
    let ld = logits.data();
    let (g, v) = (cb.groups, cb.entries);
    for gi in 0..g {
        let mut codes = Vec::new();
        let mut peaks = Vec::new();
        for t in 0..t_len {
            let row = &ld[t * g * v + gi * v..t * g * v + (gi + 1) * v];
            let (mut am, mut mx) = (0, f64::NEG_INFINITY);
            for (i, &x) in row.iter().enumerate() {
                if x > mx {
                    mx = x;
                    am = i;
                }
            }
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            codes.push(am);
            peaks.push(1.0 / z);
        }
        let used: std::collections::BTreeSet<_> = codes.iter().collect();
        println!(
            "group {gi}: codes {:?}... distinct {} peak-prob mean {:.3}",
            &codes[..t_len.min(20)],
            used.len(),
            peaks.iter().sum::<f64>() / t_len as f64
        );
        let lmin = ld.iter().cloned().fold(f64::INFINITY, f64::min);
        let lmax = ld.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        println!("  logit range [{lmin:.3},{lmax:.3}]");
    }

    // quantized rows and cosine sims against context
    let (quantized, _) = quantize(&frames, cb, 2.0, 17).unwrap();
    let context =
        transformer_encode(&frames, &vec![true; t_len], &model.encoder, &model.encoder_config)
            .unwrap();
    let q = quantized.data();
    let c = context.data();
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb).max(1e-12)
    };
    let t0 = t_len / 2;
    let mut sims = Vec::new();
    for t in 0..t_len.min(12) {
        sims.push(format!(
            "{:.3}",
            cos(&c[t0 * d..(t0 + 1) * d], &q[t * d..(t + 1) * d])
        ));
    }
    println!("cos(context[{t0}], quantized[t]) for t in 0..12: {:?}", sims);
    let qnorm0: f64 = q[t0 * d..(t0 + 1) * d].iter().map(|x| x * x).sum::<f64>().sqrt();
    let cnorm0: f64 = c[t0 * d..(t0 + 1) * d].iter().map(|x| x * x).sum::<f64>().sqrt();
    println!("norms: |q[{t0}]| {qnorm0:.4} |c[{t0}]| {cnorm0:.4}");

    // pairwise quantized-row similarity
    let mut qq = Vec::new();
    for t in 0..t_len.min(12) {
        qq.push(format!(
            "{:.3}",
            cos(&q[t0 * d..(t0 + 1) * d], &q[t * d..(t + 1) * d])
        ));
    }
    println!("cos(quantized[{t0}], quantized[t]): {:?}", qq);

    // oracle contrastive loss: context replaced by the target itself
    use voxid::encoder::MaskSpec;
    use voxid::objectives::contrastive_loss;
    let spec = MaskSpec {
        masked_indices: (0..t_len).collect(),
        spans: vec![(0, t_len)],
    };
    let oracle = contrastive_loss(&quantized, &quantized, &spec, 10, 0.1, 99)
        .unwrap()
        .item();
    let model_loss = contrastive_loss(&context, &quantized, &spec, 10, 0.1, 99)
        .unwrap()
        .item();
    let feat_oracle = contrastive_loss(
        &voxid::objectives::quantizer_features(&frames),
        &quantized,
        &spec,
        10,
        0.1,
        99,
    )
    .unwrap()
    .item();
    println!(
        "oracle contrastive {oracle:.4}  feature-context {feat_oracle:.4}  model contrastive {model_loss:.4}  chance {:.4}",
        (11f64).ln()
    );
}
