//! AdamW with decoupled weight decay, global-norm gradient clipping, and the
//! two-group cosine learning-rate schedule.

use std::collections::HashMap;

use ndarray::Array2;

use crate::nn::params::ParamStore;

pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: usize,
    m: HashMap<String, Array2<f64>>,
    v: HashMap<String, Array2<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// One update. `lr_for` maps a parameter name to its group learning
    /// rate, so backbone and head can move at different speeds. Returns the
    /// pre-clip global gradient norm.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &HashMap<String, Array2<f64>>,
        lr_for: &dyn Fn(&str) -> f64,
        clip_norm: f64,
    ) -> f64 {
        self.step += 1;
        // Sum in sorted-name order so the norm (and hence the whole run) does
        // not depend on hash-map iteration order.
        let mut grad_names: Vec<&String> = grads.keys().collect();
        grad_names.sort();
        let global_sq: f64 = grad_names
            .iter()
            .map(|n| grads[*n].iter().map(|v| v * v).sum::<f64>())
            .sum();
        let global_norm = global_sq.sqrt();
        let clip_scale = if clip_norm > 0.0 && global_norm > clip_norm {
            clip_norm / global_norm
        } else {
            1.0
        };

        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);

        let names: Vec<String> = params.names().to_vec();
        for name in names {
            let lr = lr_for(&name);
            if lr == 0.0 {
                continue;
            }
            let g = match grads.get(&name) {
                Some(g) => g,
                None => continue,
            };
            let p = params.get_mut(&name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(p.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(p.dim()));
            for ((pv, gv), (mv, vv)) in p
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let gc = gv * clip_scale;
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gc;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gc * gc;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *pv);
            }
        }
        global_norm
    }
}

/// Cosine decay to zero with a linear warmup over the leading fraction of
/// steps. lr(total_steps) is exactly 0.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, warmup_frac: f64) -> f64 {
    assert!(total_steps > 0);
    let warm = ((total_steps as f64 * warmup_frac).ceil() as usize).max(1);
    if step < warm {
        base_lr * (step + 1) as f64 / warm as f64
    } else {
        let t = (step - warm) as f64 / (total_steps - warm) as f64;
        base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
    }
}
