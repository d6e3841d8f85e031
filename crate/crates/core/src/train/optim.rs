use super::TrainConfig;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Linear warmup to `lr`, then cosine decay to `lr * min_lr_ratio` at the
/// final step.
pub fn learning_rate(cfg: &TrainConfig, step: u64) -> f64 {
    let peak = cfg.lr;
    if step < cfg.warmup_steps {
        return peak * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.steps.saturating_sub(cfg.warmup_steps).max(1);
    let progress = ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0);
    let floor = peak * cfg.min_lr_ratio;
    floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Global L2 norm of all gradients.
pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// AdamW with decoupled weight decay applied to parameters flagged `decay`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: &TrainConfig, params: &ParamStore<T>) -> Self {
        let zeros = || -> Vec<Tensor<T>> {
            params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape().to_vec()))
                .collect()
        };
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) {
        assert_eq!(
            grads.len(),
            self.m.len(),
            "gradient count does not match optimizer state"
        );
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let decay = if p.decay { lr * self.weight_decay } else { 0.0 };
            let pd = p.value.data_mut();
            for (((w, &gr), mi), vi) in pd
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gr = gr.as_f64();
                let mn = b1 * mi.as_f64() + (1.0 - b1) * gr;
                let vn = b2 * vi.as_f64() + (1.0 - b2) * gr * gr;
                *mi = T::of(mn);
                *vi = T::of(vn);
                let update = (mn / c1) / ((vn / c2).sqrt() + self.eps);
                let wv = w.as_f64();
                *w = T::of(wv - decay * wv - lr * update);
            }
        }
    }
}
