//! Bias-corrected Adam, applied in place to a fixed parameter list.

use super::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

pub struct Adam {
    pub hyper: AdamHyper,
    pub step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[Tensor], hyper: AdamHyper) -> Adam {
        Adam {
            hyper,
            step_count: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// One update over the same parameter list the optimizer was built
    /// with. Parameters with no accumulated gradient are left untouched.
    /// Gradients are zeroed afterwards.
    pub fn step(&mut self, params: &[Tensor]) {
        assert_eq!(params.len(), self.m.len(), "parameter list changed");
        self.step_count += 1;
        let t = self.step_count as f64;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powf(t);
        let bc2 = 1.0 - h.beta2.powf(t);
        for (i, p) in params.iter().enumerate() {
            let grad = match p.grad() {
                Some(g) => g,
                None => continue,
            };
            let mut data = p.data();
            assert_eq!(grad.len(), self.m[i].len(), "gradient shape changed");
            for j in 0..data.len() {
                let g = grad[j];
                self.m[i][j] = h.beta1 * self.m[i][j] + (1.0 - h.beta1) * g;
                self.v[i][j] = h.beta2 * self.v[i][j] + (1.0 - h.beta2) * g * g;
                let mhat = self.m[i][j] / bc1;
                let vhat = self.v[i][j] / bc2;
                data[j] -= h.lr * mhat / (vhat.sqrt() + h.epsilon);
            }
            p.set_data(data);
            p.zero_grad();
        }
    }
}
