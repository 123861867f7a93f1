//! Central finite-difference verification of analytic gradients.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{backward, Tensor};

/// Compare analytic gradients against central finite differences.
///
/// `build_loss` must construct a fresh scalar loss from freshly created
/// parameter tensors each time it is called; it is the independent
/// re-evaluation path for the finite-difference probe. Returns the max
/// over all coordinates of `|analytic - fd| / max(|analytic|, |fd|, 1e-8)`.
pub fn grad_check<F>(shapes: &[Vec<usize>], seed: u64, eps: f64, build_loss: F) -> f64
where
    F: Fn(&[Tensor]) -> Tensor,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
        })
        .collect();

    let params: Vec<Tensor> = shapes
        .iter()
        .zip(&base)
        .map(|(s, d)| Tensor::param(s, d.clone()))
        .collect();
    let loss = build_loss(&params);
    backward(&loss).expect("grad_check loss must be scalar");
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();

    let eval = |data: &[Vec<f64>]| -> f64 {
        let ps: Vec<Tensor> = shapes
            .iter()
            .zip(data)
            .map(|(s, d)| Tensor::param(s, d.clone()))
            .collect();
        build_loss(&ps).item()
    };

    let mut max_rel = 0.0f64;
    for (pi, shape_data) in base.iter().enumerate() {
        for j in 0..shape_data.len() {
            let mut plus = base.clone();
            plus[pi][j] += eps;
            let mut minus = base.clone();
            minus[pi][j] -= eps;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic[pi][j];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    max_rel
}
