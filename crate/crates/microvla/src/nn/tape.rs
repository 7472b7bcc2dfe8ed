//! Reverse-mode autodiff over 2-D f64 arrays.
//!
//! A `Tape` records one forward computation; `backward` replays it in
//! reverse and returns gradients for every leaf. All shapes are `(rows,
//! cols)`; scalars are 1x1. The op set is exactly what the backbone and
//! action heads need.

use ndarray::{Array2, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

enum Op {
    Leaf,
    Constant,
    Matmul(usize, usize),
    /// a @ b^T
    MatmulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// broadcast-add a 1 x d bias to every row
    AddRow(usize, usize),
    Scale(usize, f64),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
    },
    Gelu(usize),
    GatherRows {
        table: usize,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<usize>),
    SliceRows {
        src: usize,
        start: usize,
        len: usize,
    },
    SliceCols {
        src: usize,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<usize>),
    MeanAll(usize),
    AddScaled {
        srcs: Vec<usize>,
        weights: Vec<f64>,
    },
    MaskedMse {
        pred: usize,
        target: Array2<f64>,
        mask: Array2<f64>,
    },
    CrossEntropyRows {
        logits: usize,
        targets: Vec<usize>,
    },
}

pub struct Tape {
    values: Vec<Array2<f64>>,
    ops: Vec<Op>,
}

const LN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.values[v.0]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let a = &self.values[v.0];
        debug_assert_eq!(a.dim(), (1, 1));
        a[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.0].dot(&self.values[b.0]);
        self.push(v, Op::Matmul(a.0, b.0))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.0].dot(&self.values[b.0].t());
        self.push(v, Op::MatmulNt(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] + &self.values[b.0];
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] - &self.values[b.0];
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] * &self.values[b.0];
        self.push(v, Op::Mul(a.0, b.0))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        debug_assert_eq!(self.values[bias.0].nrows(), 1);
        let v = &self.values[a.0] + &self.values[bias.0];
        self.push(v, Op::AddRow(a.0, bias.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = &self.values[a.0] * c;
        self.push(v, Op::Scale(a.0, c))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = &self.values[a.0];
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(out, Op::SoftmaxRows(a.0))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let a = &self.values[x.0];
        let g = &self.values[gain.0];
        let b = &self.values[bias.0];
        let d = a.ncols() as f64;
        let mut out = a.clone();
        for mut row in out.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * g[[0, i]] + b[[0, i]];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
            },
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(gelu);
        self.push(v, Op::Gelu(a.0))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = &self.values[table.0];
        let d = t.ncols();
        let mut out = Array2::zeros((ids.len(), d));
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&t.row(id));
        }
        self.push(
            out,
            Op::GatherRows {
                table: table.0,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.values[p.0].view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows shape");
        self.push(v, Op::ConcatRows(parts.iter().map(|p| p.0).collect()))
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Var {
        let v = self.values[src.0]
            .slice(ndarray::s![start..start + len, ..])
            .to_owned();
        self.push(
            v,
            Op::SliceRows {
                src: src.0,
                start,
                len,
            },
        )
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Var {
        let v = self.values[src.0]
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.push(
            v,
            Op::SliceCols {
                src: src.0,
                start,
                len,
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.values[p.0].view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape");
        self.push(v, Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = &self.values[a.0];
        let m = x.sum() / x.len() as f64;
        self.push(Array2::from_elem((1, 1), m), Op::MeanAll(a.0))
    }

    /// Weighted sum of same-shaped vars (used to average per-example losses).
    pub fn add_scaled(&mut self, srcs: &[Var], weights: &[f64]) -> Var {
        assert_eq!(srcs.len(), weights.len());
        let mut v = &self.values[srcs[0].0] * weights[0];
        for (s, w) in srcs.iter().zip(weights).skip(1) {
            v = v + &self.values[s.0] * *w;
        }
        self.push(
            v,
            Op::AddScaled {
                srcs: srcs.iter().map(|s| s.0).collect(),
                weights: weights.to_vec(),
            },
        )
    }

    pub fn mean_scalars(&mut self, srcs: &[Var]) -> Var {
        let w = 1.0 / srcs.len() as f64;
        let weights = vec![w; srcs.len()];
        self.add_scaled(srcs, &weights)
    }

    /// Mean squared error over entries where mask is 1. Target and mask are
    /// constants; changes to masked-out target entries cannot affect the
    /// value or any gradient.
    pub fn masked_mse(&mut self, pred: Var, target: &Array2<f64>, mask: &Array2<f64>) -> Var {
        let p = &self.values[pred.0];
        debug_assert_eq!(p.dim(), target.dim());
        let denom = mask.sum();
        assert!(denom > 0.0, "masked_mse with all-false mask");
        let mut acc = 0.0;
        for ((pv, tv), mv) in p.iter().zip(target.iter()).zip(mask.iter()) {
            let d = (pv - tv) * mv;
            acc += d * d;
        }
        self.push(
            Array2::from_elem((1, 1), acc / denom),
            Op::MaskedMse {
                pred: pred.0,
                target: target.clone(),
                mask: mask.clone(),
            },
        )
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Var {
        let x = &self.values[logits.0];
        assert_eq!(x.nrows(), targets.len());
        let mut acc = 0.0;
        for (row, &t) in x.rows().into_iter().zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let logsum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            acc += logsum - row[t];
        }
        self.push(
            Array2::from_elem((1, 1), acc / targets.len() as f64),
            Op::CrossEntropyRows {
                logits: logits.0,
                targets: targets.to_vec(),
            },
        )
    }

    /// True if any recorded value is non-finite.
    pub fn has_non_finite(&self) -> bool {
        self.values
            .iter()
            .any(|v| v.iter().any(|x| !x.is_finite()))
    }

    /// Gradients of a 1x1 loss with respect to every node. Entries are None
    /// for nodes the loss does not depend on.
    pub fn backward(&self, loss: Var) -> Vec<Option<Array2<f64>>> {
        assert_eq!(self.values[loss.0].dim(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..self.ops.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads
    }

    fn propagate(&self, i: usize, g: &Array2<f64>, grads: &mut Vec<Option<Array2<f64>>>) {
        {
            let g = g.clone();
            match &self.ops[i] {
                Op::Leaf | Op::Constant => {}
                Op::Matmul(a, b) => {
                    let da = g.dot(&self.values[*b].t());
                    let db = self.values[*a].t().dot(&g);
                    accumulate(grads, *a, da);
                    accumulate(grads, *b, db);
                }
                Op::MatmulNt(a, b) => {
                    let da = g.dot(&self.values[*b]);
                    let db = g.t().dot(&self.values[*a]);
                    accumulate(grads, *a, da);
                    accumulate(grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(grads, *a, g.clone());
                    accumulate(grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(grads, *b, -&g);
                    accumulate(grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = &g * &self.values[*b];
                    let db = &g * &self.values[*a];
                    accumulate(grads, *a, da);
                    accumulate(grads, *b, db);
                }
                Op::AddRow(a, bias) => {
                    let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(grads, *a, g);
                    accumulate(grads, *bias, db);
                }
                Op::Scale(a, c) => {
                    accumulate(grads, *a, &g * *c);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.values[i];
                    let mut dx = &g * y;
                    for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let s: f64 = drow.sum();
                        for (d, yv) in drow.iter_mut().zip(yrow.iter()) {
                            *d -= s * yv;
                        }
                    }
                    accumulate(grads, *a, dx);
                }
                Op::LayerNorm { x, gain, bias } => {
                    let a = &self.values[*x];
                    let gm = &self.values[*gain];
                    let d = a.ncols() as f64;
                    let mut dx = Array2::zeros(a.dim());
                    let mut dgain = Array2::zeros((1, a.ncols()));
                    let mut dbias = Array2::zeros((1, a.ncols()));
                    for (r, row) in a.rows().into_iter().enumerate() {
                        let mean = row.sum() / d;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        // xhat_i = (x_i - mean) * inv
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                        let gy: Vec<f64> = (0..a.ncols()).map(|c| g[[r, c]] * gm[[0, c]]).collect();
                        let mean_gy = gy.iter().sum::<f64>() / d;
                        let mean_gy_xhat =
                            gy.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d;
                        for c in 0..a.ncols() {
                            dx[[r, c]] = (gy[c] - mean_gy - xhat[c] * mean_gy_xhat) * inv;
                            dgain[[0, c]] += g[[r, c]] * xhat[c];
                            dbias[[0, c]] += g[[r, c]];
                        }
                    }
                    accumulate(grads, *x, dx);
                    accumulate(grads, *gain, dgain);
                    accumulate(grads, *bias, dbias);
                }
                Op::Gelu(a) => {
                    let da = self.values[*a].mapv(gelu_grad);
                    accumulate(grads, *a, &g * &da);
                }
                Op::GatherRows { table, ids } => {
                    let t = &self.values[*table];
                    let mut dt = Array2::zeros(t.dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = dt.row_mut(id);
                        row += &g.row(r);
                    }
                    accumulate(grads, *table, dt);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.values[*p].nrows();
                        let dg = g.slice(ndarray::s![start..start + n, ..]).to_owned();
                        accumulate(grads, *p, dg);
                        start += n;
                    }
                }
                Op::SliceRows { src, start, len } => {
                    let mut ds = Array2::zeros(self.values[*src].dim());
                    ds.slice_mut(ndarray::s![*start..*start + *len, ..])
                        .assign(&g);
                    accumulate(grads, *src, ds);
                }
                Op::SliceCols { src, start, len } => {
                    let mut ds = Array2::zeros(self.values[*src].dim());
                    ds.slice_mut(ndarray::s![.., *start..*start + *len])
                        .assign(&g);
                    accumulate(grads, *src, ds);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.values[*p].ncols();
                        let dg = g.slice(ndarray::s![.., start..start + n]).to_owned();
                        accumulate(grads, *p, dg);
                        start += n;
                    }
                }
                Op::MeanAll(a) => {
                    let x = &self.values[*a];
                    let da = Array2::from_elem(x.dim(), g[[0, 0]] / x.len() as f64);
                    accumulate(grads, *a, da);
                }
                Op::AddScaled { srcs, weights } => {
                    for (s, w) in srcs.iter().zip(weights) {
                        accumulate(grads, *s, &g * *w);
                    }
                }
                Op::MaskedMse { pred, target, mask } => {
                    let p = &self.values[*pred];
                    let denom = mask.sum();
                    let mut dp = Array2::zeros(p.dim());
                    for ((dv, (pv, tv)), mv) in dp
                        .iter_mut()
                        .zip(p.iter().zip(target.iter()))
                        .zip(mask.iter())
                    {
                        *dv = 2.0 * mv * (pv - tv) / denom * g[[0, 0]];
                    }
                    accumulate(grads, *pred, dp);
                }
                Op::CrossEntropyRows { logits, targets } => {
                    let x = &self.values[*logits];
                    let n = targets.len() as f64;
                    let mut dl = Array2::zeros(x.dim());
                    for (r, (row, &t)) in x.rows().into_iter().zip(targets).enumerate() {
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                        let sum: f64 = exps.iter().sum();
                        for (c, e) in exps.iter().enumerate() {
                            let p = e / sum;
                            dl[[r, c]] = (p - if c == t { 1.0 } else { 0.0 }) / n * g[[0, 0]];
                        }
                    }
                    accumulate(grads, *logits, dl);
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], idx: usize, g: Array2<f64>) {
    match &mut grads[idx] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite-difference check of d(loss)/d(leaf) for a generic
    /// scalar-producing graph builder.
    fn check_grad<F>(build: F, leaf_shapes: &[(usize, usize)], seed: u64) -> f64
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let leaves: Vec<Array2<f64>> = leaf_shapes
            .iter()
            .map(|&(r, c)| Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0)))
            .collect();

        let eval = |arrays: &[Array2<f64>]| -> (f64, Vec<Option<Array2<f64>>>, Vec<Var>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = arrays.iter().map(|a| tape.leaf(a.clone())).collect();
            let loss = build(&mut tape, &vars);
            let grads = tape.backward(loss);
            (tape.scalar(loss), grads, vars)
        };

        let (_, grads, vars) = eval(&leaves);
        let mut max_rel = 0.0f64;
        let eps = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let g = grads[vars[li].0].as_ref().expect("leaf grad");
            for idx in 0..leaf.len().min(6) {
                let (r, c) = (idx / leaf.ncols(), idx % leaf.ncols());
                let mut plus = leaves.clone();
                plus[li][[r, c]] += eps;
                let mut minus = leaves.clone();
                minus[li][[r, c]] -= eps;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * eps);
                let an = g[[r, c]];
                let denom = an.abs().max(fd.abs()).max(1e-8);
                max_rel = max_rel.max((an - fd).abs() / denom);
            }
        }
        max_rel
    }

    #[test]
    fn matmul_grad() {
        let rel = check_grad(
            |t, vs| {
                let m = t.matmul(vs[0], vs[1]);
                t.mean_all(m)
            },
            &[(3, 4), (4, 5)],
            1,
        );
        assert!(rel < 1e-7, "rel={rel}");
    }

    #[test]
    fn matmul_nt_grad() {
        let rel = check_grad(
            |t, vs| {
                let m = t.matmul_nt(vs[0], vs[1]);
                t.mean_all(m)
            },
            &[(3, 4), (5, 4)],
            2,
        );
        assert!(rel < 1e-7, "rel={rel}");
    }

    #[test]
    fn softmax_layer_norm_gelu_grads() {
        let rel = check_grad(
            |t, vs| {
                let s = t.softmax_rows(vs[0]);
                let n = t.layer_norm(s, vs[1], vs[2]);
                let g = t.gelu(n);
                t.mean_all(g)
            },
            &[(3, 5), (1, 5), (1, 5)],
            3,
        );
        assert!(rel < 1e-6, "rel={rel}");
    }

    #[test]
    fn gather_concat_slice_grads() {
        let rel = check_grad(
            |t, vs| {
                let gathered = t.gather_rows(vs[0], &[2, 0, 2, 1]);
                let cat = t.concat_rows(&[gathered, vs[1]]);
                let sl = t.slice_rows(cat, 1, 4);
                let sc = t.slice_cols(sl, 1, 2);
                t.mean_all(sc)
            },
            &[(3, 4), (2, 4)],
            4,
        );
        assert!(rel < 1e-7, "rel={rel}");
    }

    #[test]
    fn masked_mse_grad_and_mask_insensitivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let target = Array2::from_shape_fn((4, 6), |_| rng.gen_range(-1.0..1.0));
        let mask = Array2::from_shape_fn((4, 6), |(_, c)| if c < 3 { 1.0 } else { 0.0 });
        let rel = check_grad(
            |t, vs| t.masked_mse(vs[0], &target, &mask),
            &[(4, 6)],
            6,
        );
        assert!(rel < 1e-7, "rel={rel}");

        // flipping a masked-out target entry leaves the loss bit-unchanged
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pred = Array2::from_shape_fn((4, 6), |_| rng.gen_range(-1.0..1.0));
        let mut tape = Tape::new();
        let p = tape.leaf(pred.clone());
        let l1 = tape.masked_mse(p, &target, &mask);
        let mut target2 = target.clone();
        target2[[0, 5]] = 1e9;
        let mut tape2 = Tape::new();
        let p2 = tape2.leaf(pred);
        let l2 = tape2.masked_mse(p2, &target2, &mask);
        assert_eq!(tape.scalar(l1).to_bits(), tape2.scalar(l2).to_bits());
    }

    #[test]
    fn cross_entropy_grad_and_uniform_value() {
        let rel = check_grad(
            |t, vs| t.cross_entropy_rows(vs[0], &[1, 3, 0]),
            &[(3, 5)],
            8,
        );
        assert!(rel < 1e-7, "rel={rel}");

        // uniform logits give ln(V)
        let mut tape = Tape::new();
        let v = tape.leaf(Array2::zeros((2, 7)));
        let l = tape.cross_entropy_rows(v, &[0, 6]);
        assert!((tape.scalar(l) - (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn add_scaled_and_elementwise_grads() {
        let rel = check_grad(
            |t, vs| {
                let m = t.mul(vs[0], vs[1]);
                let s = t.sub(m, vs[0]);
                let a = t.add_row(s, vs[2]);
                let sc = t.scale(a, 0.7);
                let m1 = t.mean_all(sc);
                let m2 = t.mean_all(vs[1]);
                t.add_scaled(&[m1, m2], &[0.25, 0.75])
            },
            &[(3, 4), (3, 4), (1, 4)],
            9,
        );
        assert!(rel < 1e-7, "rel={rel}");
    }
}
