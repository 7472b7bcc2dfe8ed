//! Interchangeable action heads behind one loss/predict interface.
//!
//! Four designs: MLP chunk regression on the action-query states, an
//! autoregressive discrete head over tokenized actions, and two
//! flow-matching variants — a joint-attention expert that attends over the
//! backbone states together with the noisy-action tokens, and a dual-system
//! expert that self-attends over the noisy-action tokens and cross-attends
//! to the backbone states as read-only context. A routing wrapper dispatches
//! per-embodiment heads over a shared backbone.

mod flow;

pub use flow::{euler_integrate, FlowConfig, FlowHead};

use ndarray::Array2;
use rand::RngCore;

use crate::backbone::{tokenize, Backbone, BackboneOut, TokenStream};
use crate::error::{Error, Result};
use crate::fast::{FastTokenizer, RepairReport, TokenSequence};
use crate::nn::params::{xavier, ParamBinding, ParamStore};
use crate::nn::tape::{Tape, Var};
use crate::types::{ActionChunk, SpaceTag};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Mlp,
    FastAr,
    FlowPi,
    DualSystem,
    MultiHead,
}

impl HeadKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            HeadKind::Mlp => "mlp",
            HeadKind::FastAr => "fast_ar",
            HeadKind::FlowPi => "flow_pi",
            HeadKind::DualSystem => "dual_system",
            HeadKind::MultiHead => "multi_head",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(HeadKind::Mlp),
            "fast_ar" => Ok(HeadKind::FastAr),
            "flow_pi" => Ok(HeadKind::FlowPi),
            "dual_system" => Ok(HeadKind::DualSystem),
            "multi_head" => Ok(HeadKind::MultiHead),
            other => Err(Error::config("head.kind", format!("unknown kind {other}"))),
        }
    }
}

/// Decode settings for the autoregressive discrete head.
#[derive(Debug, Clone, PartialEq)]
pub struct FastDecodeConfig {
    /// Sampling temperature; 0 = greedy (default).
    pub temperature: f64,
    /// Hard decode limit; 0 = full fixed sequence length.
    pub max_tokens: usize,
}

impl Default for FastDecodeConfig {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub kind: HeadKind,
    /// Hidden width of the MLP head.
    pub mlp_hidden: usize,
    pub flow: FlowConfig,
    pub fast: FastDecodeConfig,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            kind: HeadKind::Mlp,
            mlp_hidden: 128,
            flow: FlowConfig::default(),
            fast: FastDecodeConfig::default(),
        }
    }
}

/// One action head: builds a per-sample loss graph on the shared tape and
/// predicts normalized `H x D_repr` chunks. Heads never denormalize or unpad;
/// that belongs to the policy wrapper.
pub trait ActionHead {
    fn kind(&self) -> HeadKind;

    /// Horizon of the produced chunks.
    fn horizon(&self) -> usize;

    /// Representation width of the produced chunks.
    fn dim(&self) -> usize;

    /// Fresh parameters for this head, to be absorbed into the shared store.
    fn init_params(&self, backbone_width: usize, seed: u64) -> ParamStore;

    /// Loss graph for one sample. `target` is the already-represented
    /// `H x D_repr` matrix with its per-dimension validity mask.
    fn sample_loss(
        &self,
        tape: &mut Tape,
        bind: &ParamBinding,
        backbone: &Backbone,
        stream: &TokenStream,
        embodiment: &str,
        target: &Array2<f64>,
        mask: &[bool],
        rng: &mut dyn RngCore,
    ) -> Result<Var>;

    /// Predicted chunk in normalized space.
    fn predict(
        &self,
        tape: &mut Tape,
        bind: &ParamBinding,
        backbone: &Backbone,
        stream: &TokenStream,
        embodiment: &str,
        rng: &mut dyn RngCore,
    ) -> Result<ActionChunk>;
}

fn mask_matrix(horizon: usize, mask: &[bool]) -> Result<Array2<f64>> {
    if !mask.iter().any(|m| *m) {
        return Err(Error::MaskAllFalse(mask.len()));
    }
    Ok(Array2::from_shape_fn((horizon, mask.len()), |(_, j)| {
        if mask[j] {
            1.0
        } else {
            0.0
        }
    }))
}

// ---------------------------------------------------------------------------
// MLP regression head
// ---------------------------------------------------------------------------

/// Per-query MLP over the K = H action-query states; query k regresses the
/// chunk's step k.
pub struct MlpHead {
    pub horizon: usize,
    pub dim: usize,
    pub hidden: usize,
    pub prefix: String,
}

impl MlpHead {
    pub fn new(horizon: usize, dim: usize, hidden: usize) -> Self {
        Self {
            horizon,
            dim,
            hidden,
            prefix: "head.".into(),
        }
    }

    fn forward(&self, tape: &mut Tape, bind: &ParamBinding, out: &BackboneOut) -> Var {
        let p = &self.prefix;
        let h1 = tape.matmul(out.queries, bind.var(&format!("{p}mlp.w1")));
        let h1 = tape.add_row(h1, bind.var(&format!("{p}mlp.b1")));
        let h1 = tape.gelu(h1);
        let h2 = tape.matmul(h1, bind.var(&format!("{p}mlp.w2")));
        tape.add_row(h2, bind.var(&format!("{p}mlp.b2")))
    }
}

impl ActionHead for MlpHead {
    fn kind(&self) -> HeadKind {
        HeadKind::Mlp
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
        p.insert(
            format!("{pre}mlp.w1"),
            xavier(&mut rng, backbone_width, self.hidden),
        );
        p.insert(format!("{pre}mlp.b1"), Array2::zeros((1, self.hidden)));
        p.insert(
            format!("{pre}mlp.w2"),
            xavier(&mut rng, self.hidden, self.dim),
        );
        p.insert(format!("{pre}mlp.b2"), Array2::zeros((1, self.dim)));
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
        _rng: &mut dyn RngCore,
    ) -> Result<Var> {
        let m = mask_matrix(self.horizon, mask)?;
        let out = backbone.forward(tape, bind, stream);
        let pred = self.forward(tape, bind, &out);
        Ok(tape.masked_mse(pred, target, &m))
    }

    fn predict(
        &self,
        tape: &mut Tape,
        bind: &ParamBinding,
        backbone: &Backbone,
        stream: &TokenStream,
        _embodiment: &str,
        _rng: &mut dyn RngCore,
    ) -> Result<ActionChunk> {
        let out = backbone.forward(tape, bind, stream);
        let pred = self.forward(tape, bind, &out);
        Ok(ActionChunk::new(
            tape.value(pred).clone(),
            SpaceTag::Normalized,
        ))
    }
}

// ---------------------------------------------------------------------------
// Autoregressive discrete head
// ---------------------------------------------------------------------------

/// Teacher-forced autoregressive head over tokenized action chunks. Token
/// rows are embedded by the head and appended to the backbone stream as a
/// causal segment; logits come from a learned projection of the segment's
/// hidden states.
pub struct FastHead {
    pub tokenizer: FastTokenizer,
    pub decode: FastDecodeConfig,
    pub prefix: String,
    /// Repair counts from the most recent decode.
    pub last_repairs: std::cell::Cell<usize>,
}

impl FastHead {
    pub fn new(tokenizer: FastTokenizer, decode: FastDecodeConfig) -> Self {
        Self {
            tokenizer,
            decode,
            prefix: "head.".into(),
            last_repairs: std::cell::Cell::new(0),
        }
    }

    fn logits_for(
        &self,
        tape: &mut Tape,
        bind: &ParamBinding,
        backbone: &Backbone,
        stream: &TokenStream,
        input_tokens: &[usize],
    ) -> Var {
        let p = &self.prefix;
        let emb = bind.var(&format!("{p}fast.tok_emb"));
        let rows = tape.gather_rows(emb, input_tokens);
        let out = backbone.forward_with_ar(tape, bind, stream, Some(rows));
        let ar = out.ar.expect("ar segment present");
        let logits = tape.matmul(ar, bind.var(&format!("{p}fast.out.w")));
        tape.add_row(logits, bind.var(&format!("{p}fast.out.b")))
    }

    fn decode_limit(&self) -> usize {
        if self.decode.max_tokens == 0 {
            self.tokenizer.sequence_len()
        } else {
            self.decode.max_tokens
        }
    }

    /// Greedy or temperature decode to EOS/limit, then total decode with the
    /// repair policy. Returns the chunk and the repair report.
    pub fn decode_tokens(
        &self,
        tape: &mut Tape,
        bind: &ParamBinding,
        backbone: &Backbone,
        stream: &TokenStream,
        rng: &mut dyn RngCore,
    ) -> (ActionChunk, RepairReport, TokenSequence) {
        let mut toks = vec![self.tokenizer.bos()];
        let limit = self.decode_limit();
        while toks.len() < limit {
            let logits = self.logits_for(tape, bind, backbone, stream, &toks);
            let table = tape.value(logits);
            let last = table.row(table.nrows() - 1);
            let next = if self.decode.temperature <= 0.0 {
                last.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                    .map(|(i, _)| i)
                    .expect("non-empty vocab")
            } else {
                sample_softmax(last.iter().copied(), self.decode.temperature, rng)
            };
            toks.push(next);
            if next == self.tokenizer.eos() {
                break;
            }
        }
        let seq = TokenSequence { tokens: toks };
        let (chunk, report) = self.tokenizer.decode(&seq);
        self.last_repairs.set(report.total());
        (chunk, report, seq)
    }
}

fn sample_softmax(
    logits: impl Iterator<Item = f64>,
    temperature: f64,
    rng: &mut dyn RngCore,
) -> usize {
    let scaled: Vec<f64> = logits.map(|l| l / temperature).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut u = (rng.next_u64() as f64 / u64::MAX as f64) * total;
    for (i, e) in exps.iter().enumerate() {
        u -= e;
        if u <= 0.0 {
            return i;
        }
    }
    exps.len() - 1
}

impl ActionHead for FastHead {
    fn kind(&self) -> HeadKind {
        HeadKind::FastAr
    }

    fn horizon(&self) -> usize {
        self.tokenizer.horizon
    }

    fn dim(&self) -> usize {
        self.tokenizer.dim
    }

    fn init_params(&self, backbone_width: usize, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let pre = &self.prefix;
        let vocab = self.tokenizer.vocab_size();
        p.insert(
            format!("{pre}fast.tok_emb"),
            crate::nn::params::normal_init(&mut rng, vocab, backbone_width, 0.02),
        );
        p.insert(
            format!("{pre}fast.out.w"),
            xavier(&mut rng, backbone_width, vocab),
        );
        p.insert(format!("{pre}fast.out.b"), Array2::zeros((1, vocab)));
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
        _rng: &mut dyn RngCore,
    ) -> Result<Var> {
        mask_matrix(self.tokenizer.horizon, mask)?;
        let chunk = ActionChunk::new(target.clone(), SpaceTag::Normalized);
        let seq = self.tokenizer.encode(&chunk)?;
        let inputs = &seq.tokens[..seq.tokens.len() - 1];
        let targets = &seq.tokens[1..];
        let logits = self.logits_for(tape, bind, backbone, stream, inputs);
        Ok(tape.cross_entropy_rows(logits, targets))
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
        let (chunk, _, _) = self.decode_tokens(tape, bind, backbone, stream, rng);
        Ok(chunk)
    }
}

// ---------------------------------------------------------------------------
// Multi-head routing
// ---------------------------------------------------------------------------

/// Per-embodiment heads over a shared backbone: each sample is dispatched to
/// its embodiment's head and scored over native dimensions.
pub struct MultiHead {
    pub heads: std::collections::BTreeMap<String, Box<dyn ActionHead>>,
    pub horizon: usize,
}

impl MultiHead {
    /// Wraps per-embodiment heads; each head's parameter names are expected
    /// to already be namespaced (`head.<embodiment>.`).
    pub fn new(heads: std::collections::BTreeMap<String, Box<dyn ActionHead>>) -> Result<Self> {
        let mut horizon = 0;
        for (name, head) in &heads {
            match head.kind() {
                HeadKind::Mlp | HeadKind::FlowPi => {}
                other => {
                    return Err(Error::config(
                        "head.multi_head",
                        format!("{name}: kind {} not routable", other.as_str()),
                    ))
                }
            }
            horizon = head.horizon();
        }
        if heads.is_empty() {
            return Err(Error::config("head.multi_head", "no heads registered"));
        }
        Ok(Self { heads, horizon })
    }

    pub fn route(&self, embodiment: &str) -> Result<&dyn ActionHead> {
        self.heads
            .get(embodiment)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::UnregisteredEmbodiment(embodiment.to_string()))
    }
}

impl ActionHead for MultiHead {
    fn kind(&self) -> HeadKind {
        HeadKind::MultiHead
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    /// Representation width varies per embodiment; 0 flags "per-route".
    fn dim(&self) -> usize {
        0
    }

    fn init_params(&self, backbone_width: usize, seed: u64) -> ParamStore {
        let mut p = ParamStore::new();
        for (i, head) in self.heads.values().enumerate() {
            p.absorb(head.init_params(backbone_width, seed.wrapping_add(i as u64)));
        }
        p
    }

    fn sample_loss(
        &self,
        tape: &mut Tape,
        bind: &ParamBinding,
        backbone: &Backbone,
        stream: &TokenStream,
        embodiment: &str,
        target: &Array2<f64>,
        mask: &[bool],
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        self.route(embodiment)?
            .sample_loss(tape, bind, backbone, stream, embodiment, target, mask, rng)
    }

    fn predict(
        &self,
        tape: &mut Tape,
        bind: &ParamBinding,
        backbone: &Backbone,
        stream: &TokenStream,
        embodiment: &str,
        rng: &mut dyn RngCore,
    ) -> Result<ActionChunk> {
        self.route(embodiment)?
            .predict(tape, bind, backbone, stream, embodiment, rng)
    }
}

// ---------------------------------------------------------------------------
// Batch loss
// ---------------------------------------------------------------------------

/// Mean per-sample loss over a batch, one backbone forward per sample on the
/// shared tape.
pub fn batch_loss(
    head: &dyn ActionHead,
    tape: &mut Tape,
    bind: &ParamBinding,
    backbone: &Backbone,
    batch: &crate::datapipe::TrainingBatch,
    use_proprio: bool,
    rng: &mut dyn RngCore,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    let mut losses = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let stream = tokenize(&batch.observations[i], &backbone.cfg, use_proprio)?;
        let l = head.sample_loss(
            tape,
            bind,
            backbone,
            &stream,
            &batch.embodiments[i],
            &batch.targets[i],
            &batch.masks[i],
            rng,
        )?;
        losses.push(l);
    }
    Ok(tape.mean_scalars(&losses))
}

/// Builds a head from its config. `dim` and `horizon` describe the
/// represented action chunks this head will see.
pub fn build_head(
    cfg: &HeadConfig,
    horizon: usize,
    dim: usize,
    tokenizer: Option<FastTokenizer>,
) -> Result<Box<dyn ActionHead>> {
    match cfg.kind {
        HeadKind::Mlp => Ok(Box::new(MlpHead::new(horizon, dim, cfg.mlp_hidden))),
        HeadKind::FastAr => {
            let tok = tokenizer.ok_or(Error::MissingArtifact("tokenizer".into()))?;
            Ok(Box::new(FastHead::new(tok, cfg.fast.clone())))
        }
        HeadKind::FlowPi => Ok(Box::new(FlowHead::joint(horizon, dim, cfg.flow.clone()))),
        HeadKind::DualSystem => Ok(Box::new(FlowHead::dual(horizon, dim, cfg.flow.clone()))),
        HeadKind::MultiHead => Err(Error::config(
            "head.kind",
            "multi_head is built from per-embodiment configs, not directly",
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::types::{Frame, Observation};

    fn tiny_backbone(k: usize) -> Backbone {
        let cfg = BackboneConfig {
            resolution: 8,
            num_action_queries: k,
            max_ar_tokens: 24,
            ..Default::default()
        };
        Backbone::new(cfg, 5)
    }

    fn obs() -> Observation {
        let mut f = Frame::filled(8, [30, 60, 120]);
        f.put(2, 2, [240, 12, 12]);
        Observation {
            frames: vec![f],
            instruction: "reach the red target".into(),
            proprio: vec![0.1, -0.3],
            step_index: 0,
        }
    }

    fn setup(head: &dyn ActionHead, backbone: &Backbone, seed: u64) -> ParamStore {
        let mut all = backbone.params.clone();
        all.absorb(head.init_params(backbone.cfg.width(), seed));
        all
    }

    #[test]
    fn mlp_zero_loss_on_matching_targets() {
        let backbone = tiny_backbone(4);
        let head = MlpHead::new(4, 2, 16);
        let params = setup(&head, &backbone, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stream = tokenize(&obs(), &backbone.cfg, true).unwrap();

        let mut tape = Tape::new();
        let bind = params.bind(&mut tape);
        let pred = head
            .predict(&mut tape, &bind, &backbone, &stream, "e", &mut rng)
            .unwrap();

        let mut tape = Tape::new();
        let bind = params.bind(&mut tape);
        let loss = head
            .sample_loss(
                &mut tape,
                &bind,
                &backbone,
                &stream,
                "e",
                &pred.values,
                &[true, true],
                &mut rng,
            )
            .unwrap();
        assert!(tape.scalar(loss).abs() < 1e-24);
    }

    #[test]
    fn mlp_masked_entries_do_not_affect_loss() {
        let backbone = tiny_backbone(4);
        let head = MlpHead::new(4, 3, 16);
        let params = setup(&head, &backbone, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stream = tokenize(&obs(), &backbone.cfg, true).unwrap();
        let mask = [true, true, false];
        let target = Array2::from_shape_fn((4, 3), |(i, j)| (i + j) as f64 * 0.1);
        let mut flipped = target.clone();
        flipped[[2, 2]] = 99.0;

        let mut loss_of = |t: &Array2<f64>| {
            let mut tape = Tape::new();
            let bind = params.bind(&mut tape);
            let l = head
                .sample_loss(&mut tape, &bind, &backbone, &stream, "e", t, &mask, &mut rng)
                .unwrap();
            tape.scalar(l)
        };
        assert_eq!(loss_of(&target), loss_of(&flipped));
    }

    #[test]
    fn all_false_mask_is_rejected() {
        let backbone = tiny_backbone(4);
        let head = MlpHead::new(4, 2, 16);
        let params = setup(&head, &backbone, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stream = tokenize(&obs(), &backbone.cfg, true).unwrap();
        let mut tape = Tape::new();
        let bind = params.bind(&mut tape);
        let err = head
            .sample_loss(
                &mut tape,
                &bind,
                &backbone,
                &stream,
                "e",
                &Array2::zeros((4, 2)),
                &[false, false],
                &mut rng,
            )
            .unwrap_err();
        assert!(matches!(err, Error::MaskAllFalse(_)));
    }

    #[test]
    fn mlp_head_gradient_check() {
        let backbone = tiny_backbone(4);
        let head = MlpHead::new(4, 2, 16);
        let params = setup(&head, &backbone, 7);
        let stream = tokenize(&obs(), &backbone.cfg, true).unwrap();
        let target = Array2::from_shape_fn((4, 2), |(i, j)| (i as f64 - j as f64) * 0.2);

        let name = "head.mlp.w1";
        let loss_and_grad = |p: &ParamStore| {
            let mut tape = Tape::new();
            let bind = p.bind(&mut tape);
            let l = head
                .sample_loss(
                    &mut tape,
                    &bind,
                    &backbone,
                    &stream,
                    "e",
                    &target,
                    &[true, true],
                    &mut ChaCha8Rng::seed_from_u64(0),
                )
                .unwrap();
            let grads = tape.backward(l);
            (tape.scalar(l), grads[bind.var(name).0].clone().unwrap())
        };
        let (_, g) = loss_and_grad(&params);
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        let mut v = Array2::from_shape_fn(g.dim(), |_| {
            rand::Rng::gen_range(&mut rng2, -1.0..1.0f64)
        });
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.mapv_inplace(|x| x / norm);
        let an: f64 = g.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        let eps = 1e-5;
        let mut plus = params.clone();
        plus.get_mut(name).zip_mut_with(&v, |p, d| *p += eps * d);
        let mut minus = params.clone();
        minus.get_mut(name).zip_mut_with(&v, |p, d| *p -= eps * d);
        let fd = (loss_and_grad(&plus).0 - loss_and_grad(&minus).0) / (2.0 * eps);
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
        assert!(rel < 1e-5, "rel={rel}");

    }

    #[test]
    fn fast_greedy_decode_is_deterministic() {
        let tok = FastTokenizer {
            horizon: 4,
            dim: 2,
            gamma: 10.0,
            coeff_clip: 8,
            keep_coeffs: 2,
        };
        let backbone = tiny_backbone(4);
        let head = FastHead::new(tok, FastDecodeConfig::default());
        let params = setup(&head, &backbone, 11);
        let stream = tokenize(&obs(), &backbone.cfg, true).unwrap();

        let run = || {
            let mut tape = Tape::new();
            let bind = params.bind(&mut tape);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let (_, _, seq) = head.decode_tokens(&mut tape, &bind, &backbone, &stream, &mut rng);
            seq
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn fast_loss_decreases_under_gradient_steps() {
        // sanity: a few SGD steps on one example reduce the CE loss
        let tok = FastTokenizer {
            horizon: 4,
            dim: 2,
            gamma: 10.0,
            coeff_clip: 8,
            keep_coeffs: 2,
        };
        let backbone = tiny_backbone(4);
        let head = FastHead::new(tok, FastDecodeConfig::default());
        let mut params = setup(&head, &backbone, 11);
        let stream = tokenize(&obs(), &backbone.cfg, true).unwrap();
        let target = Array2::from_shape_fn((4, 2), |(i, _)| i as f64 * 0.1);

        let loss_and_step = |p: &mut ParamStore, lr: f64| {
            let mut tape = Tape::new();
            let bind = p.bind(&mut tape);
            let l = head
                .sample_loss(
                    &mut tape,
                    &bind,
                    &backbone,
                    &stream,
                    "e",
                    &target,
                    &[true, true],
                    &mut ChaCha8Rng::seed_from_u64(0),
                )
                .unwrap();
            let grads = tape.backward(l);
            let val = tape.scalar(l);
            if lr > 0.0 {
                for name in p.names().to_vec() {
                    if let Some(g) = &grads[bind.var(&name).0] {
                        p.get_mut(&name).zip_mut_with(g, |w, gg| *w -= lr * gg);
                    }
                }
            }
            val
        };
        let first = loss_and_step(&mut params, 0.05);
        for _ in 0..10 {
            loss_and_step(&mut params, 0.05);
        }
        let last = loss_and_step(&mut params, 0.0);
        assert!(last < first * 0.8, "first={first} last={last}");
    }

    #[test]
    fn multi_head_routing_matches_plain_head() {
        let backbone = tiny_backbone(4);
        let mut map: std::collections::BTreeMap<String, Box<dyn ActionHead>> =
            std::collections::BTreeMap::new();
        let mut inner = MlpHead::new(4, 2, 16);
        inner.prefix = "head.e1.".into();
        map.insert("e1".into(), Box::new(inner));
        let multi = MultiHead::new(map).unwrap();

        let mut plain = MlpHead::new(4, 2, 16);
        plain.prefix = "head.e1.".into();

        // identical seeds -> identical params -> identical losses
        let params_multi = setup(&multi, &backbone, 21);
        let params_plain = setup(&plain, &backbone, 21);
        let stream = tokenize(&obs(), &backbone.cfg, true).unwrap();
        let target = Array2::from_elem((4, 2), 0.3);

        let loss = |head: &dyn ActionHead, p: &ParamStore| {
            let mut tape = Tape::new();
            let bind = p.bind(&mut tape);
            let l = head
                .sample_loss(
                    &mut tape,
                    &bind,
                    &backbone,
                    &stream,
                    "e1",
                    &target,
                    &[true, true],
                    &mut ChaCha8Rng::seed_from_u64(0),
                )
                .unwrap();
            tape.scalar(l)
        };
        assert_eq!(loss(&multi, &params_multi), loss(&plain, &params_plain));
    }

    #[test]
    fn multi_head_unknown_embodiment() {
        let mut map: std::collections::BTreeMap<String, Box<dyn ActionHead>> =
            std::collections::BTreeMap::new();
        map.insert("e1".into(), Box::new(MlpHead::new(4, 2, 16)));
        let multi = MultiHead::new(map).unwrap();
        let err = multi.route("nope").err().unwrap();
        assert!(matches!(err, Error::UnregisteredEmbodiment(_)));
    }

    #[test]
    fn multi_head_rejects_fast() {
        let tok = FastTokenizer {
            horizon: 4,
            dim: 2,
            gamma: 10.0,
            coeff_clip: 8,
            keep_coeffs: 2,
        };
        let mut map: std::collections::BTreeMap<String, Box<dyn ActionHead>> =
            std::collections::BTreeMap::new();
        map.insert(
            "e1".into(),
            Box::new(FastHead::new(tok, FastDecodeConfig::default())),
        );
        assert!(MultiHead::new(map).is_err());
    }
}
