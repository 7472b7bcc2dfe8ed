//! Flow-matching action experts: rectified flow over a linear noise-to-action
//! path (x_tau = (1-tau)*eps + tau*a, target velocity a - eps, uniform tau,
//! Euler sampling). Two architectures share one parameterization: a
//! joint-attention variant that self-attends over [context; noisy actions;
//! tau] and a dual-system variant that self-attends over [noisy actions; tau]
//! and cross-attends to the context. The dual variant halves the expert MLP
//! width so per-layer parameter counts match the joint variant.

use ndarray::Array2;
use rand::{Rng, RngCore};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backbone::{Backbone, TokenStream};
use crate::error::{Error, Result};
use crate::nn::params::{normal_init, xavier, ParamBinding, ParamStore};
use crate::nn::tape::{Tape, Var};
use crate::types::{ActionChunk, SpaceTag};

use super::{mask_matrix, ActionHead, HeadKind};

#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    /// Euler integration steps for sampling.
    pub steps: usize,
    pub expert_width: usize,
    pub expert_layers: usize,
    pub expert_heads: usize,
    /// Dual-system only: stop gradients from the expert into the backbone.
    pub freeze_system2_link: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            expert_width: 64,
            expert_layers: 2,
            expert_heads: 4,
            freeze_system2_link: false,
        }
    }
}

/// Euler integration of a velocity field from `x0` over [0, 1] in `n` steps.
/// With the oracle constant field of a linear path this is exact for any n.
pub fn euler_integrate(
    x0: Array2<f64>,
    n: usize,
    mut velocity: impl FnMut(&Array2<f64>, f64) -> Result<Array2<f64>>,
) -> Result<Array2<f64>> {
    assert!(n >= 1, "at least one integration step");
    let dt = 1.0 / n as f64;
    let mut x = x0;
    for i in 0..n {
        let v = velocity(&x, i as f64 * dt)?;
        if v.iter().any(|e| !e.is_finite()) {
            return Err(Error::NonFiniteVelocity);
        }
        x.zip_mut_with(&v, |a, b| *a += dt * b);
    }
    Ok(x)
}

pub struct FlowHead {
    pub horizon: usize,
    pub dim: usize,
    pub cfg: FlowConfig,
    /// Joint attention (pi-style) if true, cross-attention dual-system
    /// otherwise.
    pub joint: bool,
    pub prefix: String,
}

impl FlowHead {
    pub fn joint(horizon: usize, dim: usize, cfg: FlowConfig) -> Self {
        Self {
            horizon,
            dim,
            cfg,
            joint: true,
            prefix: "head.".into(),
        }
    }

    pub fn dual(horizon: usize, dim: usize, cfg: FlowConfig) -> Self {
        Self {
            horizon,
            dim,
            cfg,
            joint: false,
            prefix: "head.".into(),
        }
    }

    fn mlp_hidden(&self) -> usize {
        if self.joint {
            4 * self.cfg.expert_width
        } else {
            2 * self.cfg.expert_width
        }
    }

    /// Velocity prediction v_theta(x_tau, tau, context) as a graph node.
    /// `ctx` is the backbone's full hidden-state sequence.
    pub fn velocity(
        &self,
        tape: &mut Tape,
        bind: &ParamBinding,
        ctx: Var,
        x_tau: &Array2<f64>,
        tau: f64,
    ) -> Var {
        let p = &self.prefix;
        let h = self.horizon;

        // embed noisy actions + tau with learned positions
        let x = tape.constant(x_tau.clone());
        let act = tape.matmul(x, bind.var(&format!("{p}flow.act_in.w")));
        let act = tape.add_row(act, bind.var(&format!("{p}flow.act_in.b")));
        let tau_in = tape.constant(Array2::from_elem((1, 1), tau));
        let tau_row = tape.matmul(tau_in, bind.var(&format!("{p}flow.tau.w")));
        let tau_row = tape.add_row(tau_row, bind.var(&format!("{p}flow.tau.b")));
        let seq = tape.concat_rows(&[act, tau_row]);
        let pos = bind.var(&format!("{p}flow.pos_emb"));
        let pos = tape.slice_rows(pos, 0, h + 1);
        let mut seq = tape.add(seq, pos);

        // project backbone context into the expert width
        let ctx_proj = tape.matmul(ctx, bind.var(&format!("{p}flow.ctx.w")));
        let ctx_proj = tape.add_row(ctx_proj, bind.var(&format!("{p}flow.ctx.b")));
        let n_ctx = tape.value(ctx_proj).nrows();

        let act_start;
        if self.joint {
            seq = tape.concat_rows(&[ctx_proj, seq]);
            act_start = n_ctx;
        } else {
            act_start = 0;
        }

        for l in 0..self.cfg.expert_layers {
            seq = self.layer(tape, bind, seq, ctx_proj, l);
        }
        let g = bind.var(&format!("{p}flow.final_ln.g"));
        let b = bind.var(&format!("{p}flow.final_ln.b"));
        let seq = tape.layer_norm(seq, g, b);
        let act_out = tape.slice_rows(seq, act_start, h);
        let v = tape.matmul(act_out, bind.var(&format!("{p}flow.out.w")));
        tape.add_row(v, bind.var(&format!("{p}flow.out.b")))
    }

    fn layer(
        &self,
        tape: &mut Tape,
        bind: &ParamBinding,
        x: Var,
        ctx_proj: Var,
        l: usize,
    ) -> Var {
        let p = &self.prefix;
        let pre = format!("{p}flow.layer{l}");
        let w = self.cfg.expert_width;
        let heads = self.cfg.expert_heads;
        let dk = w / heads;

        let attend = |tape: &mut Tape, q_src: Var, kv_src: Var, name: &str| {
            let q = tape.matmul(q_src, bind.var(&format!("{pre}.{name}.wq")));
            let k = tape.matmul(kv_src, bind.var(&format!("{pre}.{name}.wk")));
            let v = tape.matmul(kv_src, bind.var(&format!("{pre}.{name}.wv")));
            let mut outs = Vec::with_capacity(heads);
            for hh in 0..heads {
                let qh = tape.slice_cols(q, hh * dk, dk);
                let kh = tape.slice_cols(k, hh * dk, dk);
                let vh = tape.slice_cols(v, hh * dk, dk);
                let scores = tape.matmul_nt(qh, kh);
                let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
                let attn = tape.softmax_rows(scores);
                outs.push(tape.matmul(attn, vh));
            }
            let merged = tape.concat_cols(&outs);
            tape.matmul(merged, bind.var(&format!("{pre}.{name}.wo")))
        };

        let g1 = bind.var(&format!("{pre}.ln1.g"));
        let b1 = bind.var(&format!("{pre}.ln1.b"));
        let normed = tape.layer_norm(x, g1, b1);
        let a = attend(tape, normed, normed, "attn");
        let mut x = tape.add(x, a);

        if !self.joint {
            let gx = bind.var(&format!("{pre}.xln.g"));
            let bx = bind.var(&format!("{pre}.xln.b"));
            let normed = tape.layer_norm(x, gx, bx);
            let a = attend(tape, normed, ctx_proj, "xattn");
            x = tape.add(x, a);
        }

        let g2 = bind.var(&format!("{pre}.ln2.g"));
        let b2 = bind.var(&format!("{pre}.ln2.b"));
        let normed = tape.layer_norm(x, g2, b2);
        let h1 = tape.matmul(normed, bind.var(&format!("{pre}.mlp.w1")));
        let h1 = tape.add_row(h1, bind.var(&format!("{pre}.mlp.b1")));
        let h1 = tape.gelu(h1);
        let h2 = tape.matmul(h1, bind.var(&format!("{pre}.mlp.w2")));
        let h2 = tape.add_row(h2, bind.var(&format!("{pre}.mlp.b2")));
        tape.add(x, h2)
    }

    fn context(
        &self,
        tape: &mut Tape,
        bind: &ParamBinding,
        backbone: &Backbone,
        stream: &TokenStream,
    ) -> Var {
        let out = backbone.forward(tape, bind, stream);
        if !self.joint && self.cfg.freeze_system2_link {
            // System-2 stays read-only: detach the context values
            let vals = tape.value(out.full).clone();
            tape.constant(vals)
        } else {
            out.full
        }
    }

    /// Loss with frozen noise, for deterministic checks: x_tau on the linear
    /// path, masked MSE against the constant target velocity a - eps.
    pub fn loss_with_noise(
        &self,
        tape: &mut Tape,
        bind: &ParamBinding,
        backbone: &Backbone,
        stream: &TokenStream,
        target: &Array2<f64>,
        mask: &[bool],
        tau: f64,
        eps: &Array2<f64>,
    ) -> Result<Var> {
        let m = mask_matrix(self.horizon, mask)?;
        let x_tau = eps * (1.0 - tau) + target * tau;
        let v_star = target - eps;
        let ctx = self.context(tape, bind, backbone, stream);
        let v = self.velocity(tape, bind, ctx, &x_tau, tau);
        if tape.value(v).iter().any(|e| !e.is_finite()) {
            return Err(Error::NonFiniteVelocity);
        }
        Ok(tape.masked_mse(v, &v_star, &m))
    }
}

impl ActionHead for FlowHead {
    fn kind(&self) -> HeadKind {
        if self.joint {
            HeadKind::FlowPi
        } else {
            HeadKind::DualSystem
        }
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn init_params(&self, backbone_width: usize, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let pre = &self.prefix;
        let w = self.cfg.expert_width;
        p.insert(format!("{pre}flow.act_in.w"), xavier(&mut rng, self.dim, w));
        p.insert(format!("{pre}flow.act_in.b"), Array2::zeros((1, w)));
        p.insert(format!("{pre}flow.tau.w"), xavier(&mut rng, 1, w));
        p.insert(format!("{pre}flow.tau.b"), Array2::zeros((1, w)));
        p.insert(
            format!("{pre}flow.ctx.w"),
            xavier(&mut rng, backbone_width, w),
        );
        p.insert(format!("{pre}flow.ctx.b"), Array2::zeros((1, w)));
        p.insert(
            format!("{pre}flow.pos_emb"),
            normal_init(&mut rng, self.horizon + 1, w, 0.02),
        );
        for l in 0..self.cfg.expert_layers {
            let lp = format!("{pre}flow.layer{l}");
            p.insert(format!("{lp}.ln1.g"), Array2::ones((1, w)));
            p.insert(format!("{lp}.ln1.b"), Array2::zeros((1, w)));
            p.insert(format!("{lp}.attn.wq"), xavier(&mut rng, w, w));
            p.insert(format!("{lp}.attn.wk"), xavier(&mut rng, w, w));
            p.insert(format!("{lp}.attn.wv"), xavier(&mut rng, w, w));
            p.insert(format!("{lp}.attn.wo"), xavier(&mut rng, w, w));
            if !self.joint {
                p.insert(format!("{lp}.xln.g"), Array2::ones((1, w)));
                p.insert(format!("{lp}.xln.b"), Array2::zeros((1, w)));
                p.insert(format!("{lp}.xattn.wq"), xavier(&mut rng, w, w));
                p.insert(format!("{lp}.xattn.wk"), xavier(&mut rng, w, w));
                p.insert(format!("{lp}.xattn.wv"), xavier(&mut rng, w, w));
                p.insert(format!("{lp}.xattn.wo"), xavier(&mut rng, w, w));
            }
            p.insert(format!("{lp}.ln2.g"), Array2::ones((1, w)));
            p.insert(format!("{lp}.ln2.b"), Array2::zeros((1, w)));
            let hidden = self.mlp_hidden();
            p.insert(format!("{lp}.mlp.w1"), xavier(&mut rng, w, hidden));
            p.insert(format!("{lp}.mlp.b1"), Array2::zeros((1, hidden)));
            p.insert(format!("{lp}.mlp.w2"), xavier(&mut rng, hidden, w));
            p.insert(format!("{lp}.mlp.b2"), Array2::zeros((1, w)));
        }
        p.insert(format!("{pre}flow.final_ln.g"), Array2::ones((1, w)));
        p.insert(format!("{pre}flow.final_ln.b"), Array2::zeros((1, w)));
        p.insert(format!("{pre}flow.out.w"), xavier(&mut rng, w, self.dim));
        p.insert(format!("{pre}flow.out.b"), Array2::zeros((1, self.dim)));
        p
    }

    fn sample_loss(
        &self,
        tape: &mut Tape,
        bind: &ParamBinding,
        backbone: &Backbone,
        stream: &TokenStream,
        _embodiment: &str,
        target: &Array2<f64>,
        mask: &[bool],
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        let tau: f64 = rng.gen_range(0.0..1.0);
        let eps = Array2::from_shape_fn((self.horizon, self.dim), |_| {
            rng.sample::<f64, _>(StandardNormal)
        });
        self.loss_with_noise(tape, bind, backbone, stream, target, mask, tau, &eps)
    }

    fn predict(
        &self,
        tape: &mut Tape,
        bind: &ParamBinding,
        backbone: &Backbone,
        stream: &TokenStream,
        _embodiment: &str,
        rng: &mut dyn RngCore,
    ) -> Result<ActionChunk> {
        let ctx = self.context(tape, bind, backbone, stream);
        let x0 = Array2::from_shape_fn((self.horizon, self.dim), |_| {
            rng.sample::<f64, _>(StandardNormal)
        });
        let x1 = euler_integrate(x0, self.cfg.steps, |x, t| {
            let v = self.velocity(tape, bind, ctx, x, t);
            Ok(tape.value(v).clone())
        })?;
        Ok(ActionChunk::new(x1, SpaceTag::Normalized))
    }
}
