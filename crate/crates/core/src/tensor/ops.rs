use rand::Rng;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{accumulate, Graph, Node, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Additive value used for masked attention logits.
pub const MASK_VALUE: f64 = -1e9;

const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    /// Average over non-ignored rows.
    Mean,
    Sum,
}

pub(super) enum Op<F: Real> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        din: usize,
        dout: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        b: Var,
        d: usize,
    },
    Affine {
        x: Var,
        scale: F,
    },
    Sigmoid(Var),
    Relu(Var),
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
        d: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<u32>,
        d: usize,
    },
    Concat {
        a: Var,
        b: Var,
        da: usize,
        db: usize,
    },
    SplitHeads {
        x: Var,
        dims: [usize; 4],
    },
    MergeHeads {
        x: Var,
        dims: [usize; 4],
    },
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<F>,
        // b, h, m, n, dk, dv
        dims: [usize; 6],
        scale: F,
    },
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<F>,
        targets: Vec<u32>,
        ignore: Option<u32>,
        smoothing: F,
        scale: F,
        vocab: usize,
    },
    Sum(Var),
}

impl<F: Real> Op<F> {
    pub(super) fn saved_len(&self) -> usize {
        match self {
            Op::LayerNorm { xhat, rstd, .. } => xhat.len() + rstd.len(),
            Op::Attention { probs, .. } => probs.len(),
            Op::Dropout { mask, .. } => mask.len(),
            Op::CrossEntropy { probs, .. } => probs.len(),
            _ => 0,
        }
    }

    pub(super) fn attention_probs(&self) -> Option<(Vec<usize>, &[F])> {
        match self {
            Op::Attention { probs, dims, .. } => {
                Some((vec![dims[0], dims[1], dims[2], dims[3]], probs.as_slice()))
            }
            _ => None,
        }
    }

    pub(super) fn backward(
        &self,
        nodes: &[Node<F>],
        out: &Tensor<F>,
        gout: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let needs = |v: Var| nodes[v.0].needs_grad;
        let val = |v: Var| nodes[v.0].value.data.as_slice();
        match self {
            Op::Leaf => {}
            Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            } => {
                if needs(*x) {
                    let gx = accumulate(grads, x.0, rows * din);
                    gemm_nt(gout, val(*w), gx, *rows, *dout, *din);
                }
                if needs(*w) {
                    let gw = accumulate(grads, w.0, din * dout);
                    gemm_tn(val(*x), gout, gw, *din, *rows, *dout);
                }
                if let Some(b) = b {
                    if needs(*b) {
                        let gb = accumulate(grads, b.0, *dout);
                        for r in 0..*rows {
                            for (g, &o) in gb.iter_mut().zip(&gout[r * dout..(r + 1) * dout]) {
                                *g += o;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if needs(*v) {
                        let g = accumulate(grads, v.0, gout.len());
                        g.iter_mut().zip(gout).for_each(|(g, &o)| *g += o);
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    let g = accumulate(grads, a.0, gout.len());
                    g.iter_mut().zip(gout).for_each(|(g, &o)| *g += o);
                }
                if needs(*b) {
                    let g = accumulate(grads, b.0, gout.len());
                    g.iter_mut().zip(gout).for_each(|(g, &o)| *g -= o);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let other = val(*b);
                    let g = accumulate(grads, a.0, gout.len());
                    for i in 0..gout.len() {
                        g[i] += gout[i] * other[i];
                    }
                }
                if needs(*b) {
                    let other = val(*a);
                    let g = accumulate(grads, b.0, gout.len());
                    for i in 0..gout.len() {
                        g[i] += gout[i] * other[i];
                    }
                }
            }
            Op::AddBias { x, b, d } => {
                if needs(*x) {
                    let g = accumulate(grads, x.0, gout.len());
                    g.iter_mut().zip(gout).for_each(|(g, &o)| *g += o);
                }
                if needs(*b) {
                    let g = accumulate(grads, b.0, *d);
                    for row in gout.chunks(*d) {
                        g.iter_mut().zip(row).for_each(|(g, &o)| *g += o);
                    }
                }
            }
            Op::Affine { x, scale } => {
                if needs(*x) {
                    let g = accumulate(grads, x.0, gout.len());
                    g.iter_mut().zip(gout).for_each(|(g, &o)| *g += o * *scale);
                }
            }
            Op::Sigmoid(x) => {
                if needs(*x) {
                    let y = &out.data;
                    let g = accumulate(grads, x.0, gout.len());
                    for i in 0..gout.len() {
                        g[i] += gout[i] * y[i] * (F::one() - y[i]);
                    }
                }
            }
            Op::Relu(x) => {
                if needs(*x) {
                    let xin = val(*x);
                    let g = accumulate(grads, x.0, gout.len());
                    for i in 0..gout.len() {
                        if xin[i] > F::zero() {
                            g[i] += gout[i];
                        }
                    }
                }
            }
            Op::Softmax { x, outer, n, inner } => {
                if needs(*x) {
                    let y = &out.data;
                    let g = accumulate(grads, x.0, gout.len());
                    for o in 0..*outer {
                        for j in 0..*inner {
                            let base = o * n * inner + j;
                            let mut s = F::zero();
                            for i in 0..*n {
                                let idx = base + i * inner;
                                s += gout[idx] * y[idx];
                            }
                            for i in 0..*n {
                                let idx = base + i * inner;
                                g[idx] += y[idx] * (gout[idx] - s);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
                d,
            } => {
                let d = *d;
                let gamma = val(*gain);
                if needs(*x) {
                    let df = F::lit(d as f64);
                    let g = accumulate(grads, x.0, gout.len());
                    for (r, &rs) in rstd.iter().enumerate() {
                        let go = &gout[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_dxh = F::zero();
                        let mut mean_dxh_xh = F::zero();
                        for i in 0..d {
                            let dxh = go[i] * gamma[i];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[i];
                        }
                        mean_dxh = mean_dxh / df;
                        mean_dxh_xh = mean_dxh_xh / df;
                        let gr = &mut g[r * d..(r + 1) * d];
                        for i in 0..d {
                            let dxh = go[i] * gamma[i];
                            gr[i] += rs * (dxh - mean_dxh - xh[i] * mean_dxh_xh);
                        }
                    }
                }
                if needs(*gain) {
                    let g = accumulate(grads, gain.0, d);
                    for (go, xh) in gout.chunks(d).zip(xhat.chunks(d)) {
                        for i in 0..d {
                            g[i] += go[i] * xh[i];
                        }
                    }
                }
                if needs(*bias) {
                    let g = accumulate(grads, bias.0, d);
                    for go in gout.chunks(d) {
                        g.iter_mut().zip(go).for_each(|(g, &o)| *g += o);
                    }
                }
            }
            Op::Embedding { table, ids, d } => {
                if needs(*table) {
                    let len = nodes[table.0].value.data.len();
                    let g = accumulate(grads, table.0, len);
                    for (r, &id) in ids.iter().enumerate() {
                        let row = &mut g[id as usize * d..(id as usize + 1) * d];
                        row.iter_mut()
                            .zip(&gout[r * d..(r + 1) * d])
                            .for_each(|(g, &o)| *g += o);
                    }
                }
            }
            Op::Concat { a, b, da, db } => {
                let w = da + db;
                let rows = gout.len() / w;
                if needs(*a) {
                    let g = accumulate(grads, a.0, rows * da);
                    for r in 0..rows {
                        for i in 0..*da {
                            g[r * da + i] += gout[r * w + i];
                        }
                    }
                }
                if needs(*b) {
                    let g = accumulate(grads, b.0, rows * db);
                    for r in 0..rows {
                        for i in 0..*db {
                            g[r * db + i] += gout[r * w + da + i];
                        }
                    }
                }
            }
            Op::SplitHeads { x, dims } => {
                if needs(*x) {
                    let g = accumulate(grads, x.0, gout.len());
                    // gout is [b,h,n,dk]; x is [b,n,h*dk]
                    permute_heads(gout, g, *dims, false);
                }
            }
            Op::MergeHeads { x, dims } => {
                if needs(*x) {
                    let g = accumulate(grads, x.0, gout.len());
                    permute_heads(gout, g, *dims, true);
                }
            }
            Op::Reshape(x) => {
                if needs(*x) {
                    let g = accumulate(grads, x.0, gout.len());
                    g.iter_mut().zip(gout).for_each(|(g, &o)| *g += o);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                probs,
                dims,
                scale,
            } => attention_backward(nodes, grads, gout, *q, *k, *v, probs, *dims, *scale),
            Op::Dropout { x, mask } => {
                if needs(*x) {
                    let g = accumulate(grads, x.0, gout.len());
                    for i in 0..gout.len() {
                        g[i] += gout[i] * mask[i];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                ignore,
                smoothing,
                scale,
                vocab,
            } => {
                if needs(*logits) {
                    let v = *vocab;
                    let s = gout[0] * *scale;
                    let uniform = *smoothing / F::lit(v as f64);
                    let on = F::one() - *smoothing;
                    let g = accumulate(grads, logits.0, probs.len());
                    for (r, &t) in targets.iter().enumerate() {
                        if Some(t) == *ignore {
                            continue;
                        }
                        let p = &probs[r * v..(r + 1) * v];
                        let gr = &mut g[r * v..(r + 1) * v];
                        for j in 0..v {
                            let mut q = uniform;
                            if j == t as usize {
                                q += on;
                            }
                            gr[j] += s * (p[j] - q);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if needs(*x) {
                    let len = nodes[x.0].value.data.len();
                    let g = accumulate(grads, x.0, len);
                    g.iter_mut().for_each(|g| *g += gout[0]);
                }
            }
        }
    }
}

/// Copy between the merged `[b,n,h*dk]` and split `[b,h,n,dk]` layouts,
/// accumulating into `dst`. `merged_src` selects the layout of `src`.
fn permute_heads<F: Real>(src: &[F], dst: &mut [F], dims: [usize; 4], merged_src: bool) {
    let [b, n, h, dk] = dims;
    for bb in 0..b {
        for nn in 0..n {
            for hh in 0..h {
                let merged = ((bb * n + nn) * h + hh) * dk;
                let split = ((bb * h + hh) * n + nn) * dk;
                let (s, d) = if merged_src { (merged, split) } else { (split, merged) };
                for i in 0..dk {
                    dst[d + i] += src[s + i];
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<F: Real>(
    nodes: &[Node<F>],
    grads: &mut [Option<Vec<F>>],
    gout: &[F],
    q: Var,
    k: Var,
    v: Var,
    probs: &[F],
    dims: [usize; 6],
    scale: F,
) {
    let [b, h, m, n, dk, dv] = dims;
    let qd = nodes[q.0].value.data.as_slice();
    let kd = nodes[k.0].value.data.as_slice();
    let vd = nodes[v.0].value.data.as_slice();
    let (nq, nk, nv) = (nodes[q.0].needs_grad, nodes[k.0].needs_grad, nodes[v.0].needs_grad);

    let mut dq = if nq { vec![F::zero(); qd.len()] } else { Vec::new() };
    let mut dkk = if nk { vec![F::zero(); kd.len()] } else { Vec::new() };
    let mut dvv = if nv { vec![F::zero(); vd.len()] } else { Vec::new() };
    let mut dp = vec![F::zero(); m * n];

    for blk in 0..b * h {
        let p = &probs[blk * m * n..(blk + 1) * m * n];
        let go = &gout[blk * m * dv..(blk + 1) * m * dv];
        let qb = &qd[blk * m * dk..(blk + 1) * m * dk];
        let kb = &kd[blk * n * dk..(blk + 1) * n * dk];
        let vb = &vd[blk * n * dv..(blk + 1) * n * dv];
        if nv {
            gemm_tn(p, go, &mut dvv[blk * n * dv..(blk + 1) * n * dv], n, m, dv);
        }
        if !(nq || nk) {
            continue;
        }
        dp.iter_mut().for_each(|x| *x = F::zero());
        gemm_nt(go, vb, &mut dp, m, dv, n);
        for i in 0..m {
            let pr = &p[i * n..(i + 1) * n];
            let dr = &mut dp[i * n..(i + 1) * n];
            let s: F = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
            for j in 0..n {
                dr[j] = pr[j] * (dr[j] - s) * scale;
            }
        }
        if nq {
            gemm_nn(&dp, kb, &mut dq[blk * m * dk..(blk + 1) * m * dk], m, n, dk);
        }
        if nk {
            gemm_tn(&dp, qb, &mut dkk[blk * n * dk..(blk + 1) * n * dk], n, m, dk);
        }
    }
    for (var, buf, flag) in [(q, dq, nq), (k, dkk, nk), (v, dvv, nv)] {
        if flag {
            let g = accumulate(grads, var.0, buf.len());
            g.iter_mut().zip(&buf).for_each(|(g, &x)| *g += x);
        }
    }
}

fn leading(shape: &[usize]) -> (Vec<usize>, usize) {
    match shape.split_last() {
        Some((&last, rest)) => (rest.to_vec(), last),
        None => (vec![], 1),
    }
}

impl<F: Real> Graph<F> {
    fn needs_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.needs(v))
    }

    /// `x · w + b` over the last dimension of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (lead, din) = leading(&xs);
        if ws.len() != 2 || ws[0] != din {
            return Err(Error::dim("linear", &xs, &ws));
        }
        let dout = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::dim("linear bias", &ws, self.shape(b)));
            }
        }
        let rows: usize = lead.iter().product();
        let mut out = vec![F::zero(); rows * dout];
        if let Some(b) = b {
            let bd = self.data(b);
            for r in 0..rows {
                out[r * dout..(r + 1) * dout].copy_from_slice(bd);
            }
        }
        gemm_nn(self.data(x), self.data(w), &mut out, rows, din, dout);
        let mut shape = lead;
        shape.push(dout);
        let mut deps = vec![x, w];
        deps.extend(b);
        let needs = self.needs_any(&deps);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            },
            needs,
        ))
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        self.linear(x, w, None)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Var {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs_any(&[a, b]);
        self.push(Tensor { shape, data, requires_grad: false, grad: None }, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Add a `[d]` vector to every row of `x[..., d]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, d) = leading(self.shape(x));
        if self.shape(b) != [d] {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(b)));
        }
        let bd = self.data(b).to_vec();
        let data = self
            .data(x)
            .chunks(d)
            .flat_map(|row| row.iter().zip(&bd).map(|(&a, &c)| a + c))
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs_any(&[x, b]);
        Ok(self.push(Tensor { shape, data, requires_grad: false, grad: None }, Op::AddBias { x, b, d }, needs))
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, t) = (F::lit(scale), F::lit(shift));
        let data = self.data(x).iter().map(|&v| s * v + t).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Tensor { shape, data, requires_grad: false, grad: None }, Op::Affine { x, scale: s }, needs)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    fn map(&mut self, x: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Tensor { shape, data, requires_grad: false, grad: None }, op, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(
            x,
            |v| {
                // stable for large |v|
                if v >= F::zero() {
                    F::one() / (F::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (F::one() + e)
                }
            },
            Op::Sigmoid(x),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > F::zero() { v } else { F::zero() }, Op::Relu(x))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::dim("softmax", &shape, &[axis]));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = self.data(x);
        let mut out = vec![F::zero(); xd.len()];
        for o in 0..outer {
            for j in 0..inner {
                let base = o * n * inner + j;
                let mut mx = F::neg_infinity();
                for i in 0..n {
                    mx = mx.max(xd[base + i * inner]);
                }
                let mut s = F::zero();
                for i in 0..n {
                    let e = (xd[base + i * inner] - mx).exp();
                    out[base + i * inner] = e;
                    s += e;
                }
                for i in 0..n {
                    out[base + i * inner] = out[base + i * inner] / s;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor { shape, data: out, requires_grad: false, grad: None }, Op::Softmax { x, outer, n, inner }, needs))
    }

    /// Layer normalisation over the last dimension with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (_, d) = leading(&shape);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim("layer_norm", &shape, self.shape(gain)));
        }
        let eps = F::lit(LAYER_NORM_EPS);
        let df = F::lit(d as f64);
        let xd = self.data(x);
        let gd = self.data(gain);
        let bd = self.data(bias);
        let rows = xd.len() / d.max(1);
        let mut xhat = vec![F::zero(); xd.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let xh = (row[i] - mean) * rs;
                xhat[r * d + i] = xh;
                out[r * d + i] = xh * gd[i] + bd[i];
            }
        }
        let needs = self.needs_any(&[x, gain, bias]);
        Ok(self.push(
            Tensor { shape, data: out, requires_grad: false, grad: None },
            Op::LayerNorm { x, gain, bias, xhat, rstd, d },
            needs,
        ))
    }

    /// Gather rows of `table[V, d]`; the result has shape `prefix ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32], prefix: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::dim("embedding", &ts, prefix));
        }
        if prefix.iter().product::<usize>() != ids.len() {
            return Err(Error::dim("embedding ids", prefix, &[ids.len()]));
        }
        let (vocab, d) = (ts[0], ts[1]);
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::Index {
                    what: "embedding",
                    index: id as usize,
                    size: vocab,
                });
            }
            out.extend_from_slice(&td[id as usize * d..(id as usize + 1) * d]);
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        let needs = self.needs(table);
        Ok(self.push(
            Tensor { shape, data: out, requires_grad: false, grad: None },
            Op::Embedding { table, ids: ids.to_vec(), d },
            needs,
        ))
    }

    /// Concatenate along the last dimension.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (la, da) = leading(self.shape(a));
        let (lb, db) = leading(self.shape(b));
        if la != lb {
            return Err(Error::dim("concat", self.shape(a), self.shape(b)));
        }
        let rows: usize = la.iter().product();
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(rows * (da + db));
        for r in 0..rows {
            out.extend_from_slice(&ad[r * da..(r + 1) * da]);
            out.extend_from_slice(&bd[r * db..(r + 1) * db]);
        }
        let mut shape = la;
        shape.push(da + db);
        let needs = self.needs_any(&[a, b]);
        Ok(self.push(Tensor { shape, data: out, requires_grad: false, grad: None }, Op::Concat { a, b, da, db }, needs))
    }

    /// `[b, n, h·dk] -> [b, h, n, dk]`
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(Error::dim("split_heads", &s, &[heads]));
        }
        let dims = [s[0], s[1], heads, s[2] / heads];
        let mut out = vec![F::zero(); self.data(x).len()];
        permute_heads(self.data(x), &mut out, dims, true);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor { shape: vec![s[0], heads, s[1], s[2] / heads], data: out, requires_grad: false, grad: None },
            Op::SplitHeads { x, dims },
            needs,
        ))
    }

    /// `[b, h, n, dk] -> [b, n, h·dk]`
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim("merge_heads", &s, &[]));
        }
        let dims = [s[0], s[2], s[1], s[3]];
        let mut out = vec![F::zero(); self.data(x).len()];
        permute_heads(self.data(x), &mut out, dims, false);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor { shape: vec![s[0], s[2], s[1] * s[3]], data: out, requires_grad: false, grad: None },
            Op::MergeHeads { x, dims },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(Tensor { requires_grad: false, grad: None, ..t }, Op::Reshape(x), needs))
    }

    /// `softmax(Q·Kᵀ/√d_k + mask)·V` per batch and head.
    ///
    /// `q: [b,h,m,dk]`, `k: [b,h,n,dk]`, `v: [b,h,n,dv]`; the additive mask is
    /// `[b,m,n]` (shared by all heads) or `[b,h,m,n]`.
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var, mask: Option<&Tensor<F>>) -> Result<Var> {
        let (qs, ks, vs) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if qs.len() != 4 || ks.len() != 4 || vs.len() != 4 {
            return Err(Error::dim("attention", &qs, &ks));
        }
        let [b, h, m, dk] = [qs[0], qs[1], qs[2], qs[3]];
        let n = ks[2];
        if ks[0] != b || ks[1] != h || ks[3] != dk {
            return Err(Error::dim("attention q/k", &qs, &ks));
        }
        if vs[0] != b || vs[1] != h || vs[2] != n {
            return Err(Error::dim("attention k/v", &ks, &vs));
        }
        let dv = vs[3];
        let per_head_mask = match mask {
            None => None,
            Some(mk) if mk.shape() == [b, m, n] => Some(false),
            Some(mk) if mk.shape() == [b, h, m, n] => Some(true),
            Some(mk) => return Err(Error::dim("attention mask", mk.shape(), &[b, h, m, n])),
        };
        let scale = F::one() / F::lit(dk as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![F::zero(); b * h * m * n];
        let mut out = vec![F::zero(); b * h * m * dv];
        for bb in 0..b {
            for hh in 0..h {
                let blk = bb * h + hh;
                let p = &mut probs[blk * m * n..(blk + 1) * m * n];
                gemm_nt(
                    &qd[blk * m * dk..(blk + 1) * m * dk],
                    &kd[blk * n * dk..(blk + 1) * n * dk],
                    p,
                    m,
                    dk,
                    n,
                );
                let mask_block = match (mask, per_head_mask) {
                    (Some(mk), Some(false)) => Some(&mk.data()[bb * m * n..(bb + 1) * m * n]),
                    (Some(mk), Some(true)) => Some(&mk.data()[blk * m * n..(blk + 1) * m * n]),
                    _ => None,
                };
                for i in 0..m {
                    let row = &mut p[i * n..(i + 1) * n];
                    let mut mx = F::neg_infinity();
                    for j in 0..n {
                        row[j] = row[j] * scale;
                        if let Some(mb) = mask_block {
                            row[j] += mb[i * n + j];
                        }
                        mx = mx.max(row[j]);
                    }
                    let mut s = F::zero();
                    for x in row.iter_mut() {
                        *x = (*x - mx).exp();
                        s += *x;
                    }
                    for x in row.iter_mut() {
                        *x = *x / s;
                    }
                }
                gemm_nn(p, &vd[blk * n * dv..(blk + 1) * n * dv], &mut out[blk * m * dv..(blk + 1) * m * dv], m, n, dv);
            }
        }
        let needs = self.needs_any(&[q, k, v]);
        Ok(self.push(
            Tensor { shape: vec![b, h, m, dv], data: out, requires_grad: false, grad: None },
            Op::Attention {
                q,
                k,
                v,
                probs,
                dims: [b, h, m, n, dk, dv],
                scale,
            },
            needs,
        ))
    }

    /// Inverted dropout. Identity outside training mode.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if !self.training || p <= 0.0 {
            return x;
        }
        let keep = F::lit(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..self.data(x).len())
            .map(|_| if rng.gen::<f64>() < p { F::zero() } else { keep })
            .collect();
        let data = self.data(x).iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Tensor { shape, data, requires_grad: false, grad: None }, Op::Dropout { x, mask }, needs)
    }

    /// Token-level cross-entropy of `logits[..., V]` against `targets`, with
    /// label smoothing mass spread uniformly over the vocabulary. Rows whose
    /// target equals `ignore` contribute nothing.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u32],
        smoothing: f64,
        ignore: Option<u32>,
        reduction: Reduction,
    ) -> Result<Var> {
        let (lead, vocab) = leading(self.shape(logits));
        let rows: usize = lead.iter().product();
        if rows != targets.len() {
            return Err(Error::dim("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let ld = self.data(logits);
        let mut probs = vec![F::zero(); ld.len()];
        let mut total = 0.0f64;
        let mut count = 0usize;
        let eps = smoothing;
        for (r, &t) in targets.iter().enumerate() {
            if Some(t) == ignore {
                continue;
            }
            if t as usize >= vocab {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: t as usize,
                    size: vocab,
                });
            }
            let row = &ld[r * vocab..(r + 1) * vocab];
            let mx = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
            let mut s = F::zero();
            for (j, &x) in row.iter().enumerate() {
                let e = (x - mx).exp();
                probs[r * vocab + j] = e;
                s += e;
            }
            let log_z = mx.to_f64_lossy() + s.to_f64_lossy().ln();
            for j in 0..vocab {
                probs[r * vocab + j] = probs[r * vocab + j] / s;
            }
            let logp_t = row[t as usize].to_f64_lossy() - log_z;
            let mut row_loss = -(1.0 - eps) * logp_t;
            if eps > 0.0 {
                let sum_logp: f64 = row.iter().map(|&x| x.to_f64_lossy() - log_z).sum();
                row_loss -= eps / vocab as f64 * sum_logp;
            }
            total += row_loss;
            count += 1;
        }
        let scale = match reduction {
            Reduction::Mean if count > 0 => 1.0 / count as f64,
            Reduction::Mean => 0.0,
            Reduction::Sum => 1.0,
        };
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(F::lit(total * scale)),
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                ignore,
                smoothing: F::lit(smoothing),
                scale: F::lit(scale),
                vocab,
            },
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: F = self.data(x).iter().copied().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn linear_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zero_b = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.linear(x, eye, Some(zero_b)).unwrap();
        assert_eq!(g.data(y), &[1.0, 2.0]);

        let zw = g.constant(t(&[2, 2], &[0.0; 4]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let y = g.linear(x, zw, Some(b)).unwrap();
        assert_eq!(g.data(y), &[3.0, 4.0]);

        let w = g.constant(t(&[2, 2], &[1.0, 1.0, 1.0, -1.0]));
        let b = g.constant(t(&[2], &[0.5, 0.0]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.data(y), &[3.5, -1.0]);
    }

    #[test]
    fn linear_shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        let w = g.constant(Tensor::zeros(&[2, 2]));
        let err = g.linear(x, w, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.data(y), &[0.5, 0.5]);

        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.softmax(x, 0).unwrap();
        for (a, b) in g.data(y).iter().zip([0.09003, 0.24473, 0.66524]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-5);
        }

        let mut g32 = Graph::<f32>::new();
        let x = g32.constant(Tensor::new(vec![2], vec![1000.0, 1000.0]).unwrap());
        let y = g32.softmax(x, 0).unwrap();
        assert_eq!(g32.data(y), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_on_inner_axis() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 2], &[0.0, 5.0, 0.0, 5.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.data(y), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn attention_examples() {
        let mut g = Graph::<f64>::new();
        // one key: output equals the single value row
        let q = g.constant(t(&[1, 1, 1, 2], &[0.3, -0.7]));
        let k = g.constant(t(&[1, 1, 1, 2], &[0.3, -0.7]));
        let v = g.constant(t(&[1, 1, 1, 3], &[1.0, 2.0, 3.0]));
        let o = g.scaled_dot_attention(q, k, v, None).unwrap();
        assert_eq!(g.data(o), &[1.0, 2.0, 3.0]);

        // identical keys average the values
        let k2 = g.constant(t(&[1, 1, 2, 2], &[1.0, 1.0, 1.0, 1.0]));
        let v2 = g.constant(t(&[1, 1, 2, 2], &[1.0, 3.0, 5.0, -1.0]));
        let o = g.scaled_dot_attention(q, k2, v2, None).unwrap();
        assert_abs_diff_eq!(g.data(o)[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.data(o)[1], 1.0, epsilon = 1e-12);

        let q = g.constant(t(&[1, 1, 1, 2], &[1.0, 0.0]));
        let k = g.constant(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let v = g.constant(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let o = g.scaled_dot_attention(q, k, v, None).unwrap();
        // softmax([1/sqrt(2), 0]) by direct exponentiation
        let e = (1.0f64 / 2f64.sqrt()).exp();
        let w0 = e / (e + 1.0);
        assert_abs_diff_eq!(w0, 0.669762, epsilon = 1e-6);
        assert_abs_diff_eq!(g.data(o)[0], w0, epsilon = 1e-4);
        assert_abs_diff_eq!(g.data(o)[1], 1.0 - w0, epsilon = 1e-4);
        let w = g.attention_weights(o).unwrap();
        assert_abs_diff_eq!(w.data()[0], w0, epsilon = 1e-4);
    }

    #[test]
    fn attention_rejects_bad_mask() {
        let mut g = Graph::<f32>::new();
        let q = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let k = g.constant(Tensor::zeros(&[1, 1, 3, 2]));
        let mask = Tensor::zeros(&[1, 3, 2]);
        assert!(matches!(
            g.scaled_dot_attention(q, k, k, Some(&mask)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 3], &[100.0, 0.0, 0.0]));
        let l = g.cross_entropy(x, &[0], 0.0, None, Reduction::Mean).unwrap();
        assert!(g.data(l)[0] < 1e-30);

        let x = g.constant(t(&[1, 4], &[0.7; 4]));
        let l = g.cross_entropy(x, &[2], 0.0, None, Reduction::Mean).unwrap();
        assert_abs_diff_eq!(g.data(l)[0], 4f64.ln(), epsilon = 1e-12);

        let x = g.constant(t(&[1, 3], &[2.0, 1.0, 0.0]));
        let l = g.cross_entropy(x, &[0], 0.0, None, Reduction::Mean).unwrap();
        assert_abs_diff_eq!(g.data(l)[0], 0.40761, epsilon = 1e-4);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            g.cross_entropy(x, &[3], 0.0, None, Reduction::Mean),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn cross_entropy_ignores_padding_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 2], &[1.0, 0.0, 50.0, -50.0]));
        let l = g.cross_entropy(x, &[0, 0], 0.0, Some(0), Reduction::Sum).unwrap();
        assert_eq!(g.data(l)[0], 0.0);
    }

    #[test]
    fn dropout_is_identity_in_eval_mode() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[4], 1.0));
        let mut rng = rand::thread_rng();
        assert_eq!(g.dropout(x, 0.5, &mut rng), x);
    }

    #[test]
    fn split_merge_heads_roundtrip() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let x = g.constant(t(&[2, 3, 4], &data));
        let s = g.split_heads(x, 2).unwrap();
        assert_eq!(g.shape(s), &[2, 2, 3, 2]);
        // batch 0, head 1, position 0 -> x[0,0,2..4]
        assert_eq!(&g.data(s)[6..8], &[2.0, 3.0]);
        let m = g.merge_heads(s).unwrap();
        assert_eq!(g.data(m), data.as_slice());
    }
}
