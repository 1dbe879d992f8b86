use crate::model::TransformerWeights;
use crate::trainer::TrainConfig;

/// Adam moments for every parameter tensor, in canonical tensor order.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(w: &TransformerWeights, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f32>> = w
            .named_tensors()
            .iter()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }

    pub fn step(&mut self, w: &mut TransformerWeights, grads: &TransformerWeights) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = (1.0 - self.beta1.powi(self.t)) as f32;
        let c2 = (1.0 - self.beta2.powi(self.t)) as f32;
        let (lr, eps) = (self.lr as f32, self.eps as f32);
        let grads = grads.named_tensors();
        for (i, p) in w.tensors_mut().into_iter().enumerate() {
            let g = grads[i].1.data();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *x -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
