//! Reverse-mode tape over the fixed op set the models need.
//!
//! Ops are coarse (fused linear, layer norm, multi-head attention, the
//! associative insert/query kernels) so a segment of a small model is a few
//! dozen nodes. Values live in the tape; [`Graph::backward`] walks it once in
//! reverse.

use std::collections::HashMap;

use crate::assoc::kernels;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{dot, gemm, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the normalization vector is updated on insert.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GammaMode {
    /// `γ = 1 − zᵀφ(k) / ‖φ(k)‖²`, optionally treated as a constant by
    /// backward and optionally clipped to `[0, 1]`.
    Corrected { detach: bool, clamp: bool },
    /// `γ ≡ 1` (plain delta rule).
    One,
}

/// Layout of a batch of associative states stored as one tensor of shape
/// `[batch, d_val + 1, d_phi]`: rows `0..d_val` hold `A`, the last row holds `z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AssocDims {
    pub batch: usize,
    pub d_val: usize,
    pub d_phi: usize,
}

impl AssocDims {
    pub fn item_len(&self) -> usize {
        (self.d_val + 1) * self.d_phi
    }
    pub fn shape(&self) -> [usize; 3] {
        [self.batch, self.d_val + 1, self.d_phi]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionSpec {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub causal: bool,
}

enum Op<R> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, R),
    Sigmoid(Var),
    Gelu { x: Var, slope: Vec<R> },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<R>,
        rstd: Vec<R>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<R>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SelectRows {
        x: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<R>,
        probs: Vec<R>,
        total: R,
    },
    Dpfp {
        x: Var,
        nu: usize,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<R>,
        eps: R,
    },
    AssocInsert {
        state: Var,
        kphi: Var,
        v: Var,
        beta: Var,
        dims: AssocDims,
        mode: GammaMode,
        gammas: Vec<R>,
        eps: R,
    },
    AssocQuery {
        state: Var,
        qphi: Var,
        dims: AssocDims,
        eps: R,
    },
}

impl<R> Op<R> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Gelu { .. } => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
            Op::Gather { .. } => "gather",
            Op::ConcatRows(_) => "concat_rows",
            Op::SelectRows { .. } => "select_rows",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Dpfp { .. } => "dpfp",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::AssocInsert { .. } => "assoc_insert",
            Op::AssocQuery { .. } => "assoc_query",
        }
    }
}

struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    needs_grad: bool,
}

/// Values treated as constants by backward. A base evaluation records them;
/// a replay evaluation (finite differences) substitutes the recorded values
/// so perturbations only travel along differentiable paths.
#[derive(Default)]
struct Frozen<R> {
    recorded: Vec<Tensor<R>>,
    replay: Option<(Vec<Tensor<R>>, usize)>,
}

pub struct Graph<R> {
    nodes: Vec<Node<R>>,
    param_vars: HashMap<ParamId, Var>,
    frozen: Frozen<R>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            frozen: Frozen {
                recorded: Vec::new(),
                replay: None,
            },
        }
    }

    /// A graph whose detached values are taken from a previous recording.
    pub fn replaying(frozen: Vec<Tensor<R>>) -> Self {
        let mut g = Self::new();
        g.frozen.replay = Some((frozen, 0));
        g
    }

    /// Detached values recorded so far, in creation order.
    pub fn frozen_values(&self) -> &[Tensor<R>] {
        &self.frozen.recorded
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: format!("output of {} (node {})", op.name(), self.nodes.len()),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn freeze(&mut self, value: Tensor<R>) -> Result<Tensor<R>> {
        if let Some((vals, cursor)) = &mut self.frozen.replay {
            let v = vals
                .get(*cursor)
                .cloned()
                .ok_or_else(|| Error::Config("replay log exhausted".into()))?;
            if v.shape() != value.shape() {
                return Err(Error::shape("detach replay", "recorded shape differs"));
            }
            *cursor += 1;
            self.frozen.recorded.push(v.clone());
            Ok(v)
        } else {
            self.frozen.recorded.push(value.clone());
            Ok(value)
        }
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<R>) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, value: Tensor<R>) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter as a leaf; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<R>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let value = store.get(id).value.clone();
        self.nodes.push(Node {
            value,
            op: Op::Param,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Stop-gradient: the value passes through, backward treats it as a constant.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let value = self.freeze(self.value(x).clone())?;
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `x · w (+ b)` with `x: [.., in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, din) = xv.dims2();
        if wv.shape().len() != 2 || wv.shape()[0] != din {
            return Err(Error::shape(
                "linear",
                format!("input {:?}, weight {:?}", xv.shape(), wv.shape()),
            ));
        }
        let dout = wv.shape()[1];
        let mut out = vec![R::zero(); n * dout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != dout {
                return Err(Error::shape("linear", "bias length"));
            }
            for row in out.chunks_exact_mut(dout) {
                row.copy_from_slice(bv);
            }
        }
        gemm(n, din, dout, xv.data(), false, wv.data(), false, &mut out, b.is_some());
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Tensor::new(&shape, out)?, Op::Linear { x, w, b }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", format!("{:?} + {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(av.shape(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("mul", format!("{:?} * {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(av.shape(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, c: R) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        let ng = self.needs(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (y, slope): (Vec<R>, Vec<R>) = xv.data().iter().map(|&v| gelu_parts(v)).unzip();
        let out = Tensor::new(xv.shape(), y)?;
        let ng = self.needs(x);
        self.push(out, Op::Gelu { x, slope }, ng)
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, h) = xv.dims2();
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        if gv.len() != h || bv.len() != h {
            return Err(Error::shape("layer_norm", "gain/bias length"));
        }
        let eps = R::from_f64(1e-5);
        let hn = R::from_f64(h as f64);
        let mut xhat = vec![R::zero(); n * h];
        let mut rstd = vec![R::zero(); n];
        let mut out = vec![R::zero(); n * h];
        for r in 0..n {
            let row = &xv.data()[r * h..(r + 1) * h];
            let mean = row.iter().copied().sum::<R>() / hn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / hn;
            let rs = R::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..h {
                let xh = (row[c] - mean) * rs;
                xhat[r * h + c] = xh;
                out[r * h + c] = xh * gv[c] + bv[c];
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Multi-head scaled dot-product attention over `batch` independent
    /// sequences of length `seq`, rows laid out item-major: `[batch·seq, hidden]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (n, h) = self.value(q).dims2();
        if self.value(k).dims2() != (n, h) || self.value(v).dims2() != (n, h) {
            return Err(Error::shape("attention", "q/k/v shapes differ"));
        }
        if n != spec.batch * spec.seq {
            return Err(Error::shape(
                "attention",
                format!("{n} rows for batch {} x seq {}", spec.batch, spec.seq),
            ));
        }
        if spec.heads == 0 || h % spec.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide hidden {h}",
                spec.heads
            )));
        }
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let (t, nh) = (spec.seq, spec.heads);
        let dh = h / nh;
        let scale = R::one() / R::from_f64(dh as f64).sqrt();
        let mut probs = vec![R::zero(); spec.batch * nh * t * t];
        let mut out = vec![R::zero(); n * h];
        let mut scores = vec![R::zero(); t];
        for b in 0..spec.batch {
            for hd in 0..nh {
                let base = (b * nh + hd) * t * t;
                for i in 0..t {
                    let qi = &qd[(b * t + i) * h + hd * dh..][..dh];
                    let upto = if spec.causal { i + 1 } else { t };
                    let mut mx = R::from_f64(f64::NEG_INFINITY);
                    for (j, s) in scores.iter_mut().enumerate().take(upto) {
                        let kj = &kd[(b * t + j) * h + hd * dh..][..dh];
                        let qk = dot(qi, kj);
                        *s = qk * scale;
                        mx = mx.max(*s);
                    }
                    let mut denom = R::zero();
                    for s in scores.iter_mut().take(upto) {
                        *s = (*s - mx).exp();
                        denom += *s;
                    }
                    let orow = &mut out[(b * t + i) * h + hd * dh..][..dh];
                    for j in 0..upto {
                        let p = scores[j] / denom;
                        probs[base + i * t + j] = p;
                        let vj = &vd[(b * t + j) * h + hd * dh..][..dh];
                        for (o, &vv) in orow.iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(self.value(q).shape(), out)?;
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
            ng,
        )
    }

    /// Row lookup: `out[r] = table[ids[r]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, h) = tv.dims2();
        let mut out = Vec::with_capacity(ids.len() * h);
        for &i in ids {
            if i >= rows {
                return Err(Error::shape("gather", format!("id {i} >= {rows} rows")));
            }
            out.extend_from_slice(&tv.data()[i * h..(i + 1) * h]);
        }
        let out = Tensor::new(&[ids.len(), h], out)?;
        let ng = self.needs(table);
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let h = self.value(parts[0]).dims2().1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            if c != h {
                return Err(Error::shape("concat_rows", format!("width {c} vs {h}")));
            }
            out.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::new(&[rows, h], out)?, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// `out[r] = x[idx[r]]`; indices may repeat.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, h) = xv.dims2();
        let mut out = Vec::with_capacity(idx.len() * h);
        for &i in idx {
            if i >= rows {
                return Err(Error::shape("select_rows", format!("row {i} >= {rows}")));
            }
            out.extend_from_slice(&xv.data()[i * h..(i + 1) * h]);
        }
        let ng = self.needs(x);
        self.push(
            Tensor::new(&[idx.len(), h], out)?,
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        self.push(out, Op::Reshape(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: R = self.value(x).data().iter().copied().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Weighted mean negative log-likelihood over rows of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[R]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, vocab) = lv.dims2();
        if targets.len() != n || weights.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{n} rows, {} targets, {} weights", targets.len(), weights.len()),
            ));
        }
        let total: R = weights.iter().copied().sum();
        if total <= R::zero() {
            return Err(Error::Config("cross_entropy: no supervised positions".into()));
        }
        let mut probs = vec![R::zero(); n * vocab];
        let mut loss = R::zero();
        for r in 0..n {
            if targets[r] >= vocab {
                return Err(Error::shape("cross_entropy", format!("target {} >= vocab", targets[r])));
            }
            let row = &lv.data()[r * vocab..(r + 1) * vocab];
            let mx = row.iter().fold(row[0], |m, &x| m.max(x));
            let mut denom = R::zero();
            for (p, &x) in probs[r * vocab..].iter_mut().zip(row) {
                *p = (x - mx).exp();
                denom += *p;
            }
            for p in &mut probs[r * vocab..(r + 1) * vocab] {
                *p = *p / denom;
            }
            if weights[r] != R::zero() {
                let nll = denom.ln() + mx - row[targets[r]];
                loss += weights[r] * nll;
            }
        }
        let out = Tensor::scalar(loss / total);
        let ng = self.needs(logits);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                total,
            },
            ng,
        )
    }

    /// Deterministic parameter-free projection, applied row-wise.
    pub fn dpfp(&mut self, x: Var, nu: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = xv.dims2();
        if nu == 0 || d == 0 {
            return Err(Error::Config("dpfp needs nu >= 1 and d >= 1".into()));
        }
        let width = 2 * d * nu;
        let mut out = vec![R::zero(); n * width];
        for r in 0..n {
            kernels::dpfp_row(&xv.data()[r * d..(r + 1) * d], nu, &mut out[r * width..(r + 1) * width]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        let ng = self.needs(x);
        self.push(Tensor::new(&shape, out)?, Op::Dpfp { x, nu }, ng)
    }

    /// `x / max(‖x‖, ε)` for every row.
    pub fn normalize_rows(&mut self, x: Var, eps: R) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = xv.dims2();
        let mut out = xv.data().to_vec();
        let mut norms = Vec::with_capacity(n);
        for row in out.chunks_mut(d.max(1)).take(n) {
            let norm = dot(row, row).sqrt();
            let scale = norm.max(eps);
            row.iter_mut().for_each(|v| *v = *v / scale);
            norms.push(norm);
        }
        let shape = xv.shape().to_vec();
        let ng = self.needs(x);
        self.push(Tensor::new(&shape, out)?, Op::NormalizeRows { x, norms, eps }, ng)
    }

    /// Sequential delta-rule inserts of `rows / batch` keys per item into a
    /// batch of associative states.
    #[allow(clippy::too_many_arguments)]
    pub fn assoc_insert(
        &mut self,
        state: Var,
        kphi: Var,
        v: Var,
        beta: Var,
        dims: AssocDims,
        mode: GammaMode,
        eps: R,
    ) -> Result<Var> {
        let sv = self.value(state);
        if sv.numel() != dims.batch * dims.item_len() {
            return Err(Error::shape("assoc_insert", format!("state {:?} vs {dims:?}", sv.shape())));
        }
        let (kn, kd) = self.value(kphi).dims2();
        let (vn, vd) = self.value(v).dims2();
        let (bn, bd) = self.value(beta).dims2();
        if kd != dims.d_phi || vd != dims.d_val || bd != 1 || kn != vn || kn != bn || kn % dims.batch.max(1) != 0 {
            return Err(Error::shape(
                "assoc_insert",
                format!("keys {kn}x{kd}, values {vn}x{vd}, beta {bn}x{bd} for {dims:?}"),
            ));
        }
        let frozen_gammas = match (mode, &self.frozen.replay) {
            (GammaMode::Corrected { detach: true, .. }, Some(_)) => {
                Some(self.freeze(Tensor::zeros(&[kn]))?.into_data())
            }
            _ => None,
        };
        let (out, gammas) = kernels::insert_forward(
            self.value(state).data(),
            self.value(kphi).data(),
            self.value(v).data(),
            self.value(beta).data(),
            dims,
            mode,
            frozen_gammas.as_deref(),
            eps,
        );
        if matches!(mode, GammaMode::Corrected { detach: true, .. }) && self.frozen.replay.is_none() {
            self.freeze(Tensor::new(&[kn], gammas.clone())?)?;
        }
        let ng = self.needs(state) || self.needs(kphi) || self.needs(v) || self.needs(beta);
        self.push(
            Tensor::new(&dims.shape(), out)?,
            Op::AssocInsert {
                state,
                kphi,
                v,
                beta,
                dims,
                mode,
                gammas,
                eps,
            },
            ng,
        )
    }

    /// Normalized recall `A φ(q) / max(zᵀφ(q), ε)` for every row of `qphi`.
    pub fn assoc_query(&mut self, state: Var, qphi: Var, dims: AssocDims, eps: R) -> Result<Var> {
        let sv = self.value(state);
        let (qn, qd) = self.value(qphi).dims2();
        if sv.numel() != dims.batch * dims.item_len() || qd != dims.d_phi || qn % dims.batch.max(1) != 0 {
            return Err(Error::shape("assoc_query", format!("queries {qn}x{qd} for {dims:?}")));
        }
        let out = kernels::query_forward(sv.data(), self.value(qphi).data(), dims, eps);
        let ng = self.needs(state) || self.needs(qphi);
        self.push(
            Tensor::new(&[qn, dims.d_val], out)?,
            Op::AssocQuery {
                state,
                qphi,
                dims,
                eps,
            },
            ng,
        )
    }

    /// Gradients of scalar `loss` with respect to every leaf that needs them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", "loss must be a scalar"));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<R>>> = (0..n).map(|_| None).collect();
        let mut leaves: HashMap<usize, Tensor<R>> = HashMap::new();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), R::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient of {} (node {i})", node.op.name()),
                });
            }
            match &node.op {
                Op::Leaf | Op::Param => {
                    leaves.insert(i, g);
                }
                op => self.backward_op(op, &node.value, &g, &mut grads)?,
            }
        }
        Ok(Gradients { leaves })
    }

    fn backward_op(
        &self,
        op: &Op<R>,
        out: &Tensor<R>,
        g: &Tensor<R>,
        grads: &mut [Option<Tensor<R>>],
    ) -> Result<()> {
        let gd = g.data();
        match op {
            Op::Leaf | Op::Param => unreachable!(),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let nn = bv.shape()[1];
                if self.needs(*a) {
                    let mut ga = vec![R::zero(); m * k];
                    gemm(m, nn, k, gd, false, bv.data(), true, &mut ga, false);
                    self.acc(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![R::zero(); k * nn];
                    gemm(k, m, nn, av.data(), true, gd, false, &mut gb, false);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, din) = xv.dims2();
                let dout = wv.shape()[1];
                if self.needs(*x) {
                    let mut gx = vec![R::zero(); n * din];
                    gemm(n, dout, din, gd, false, wv.data(), true, &mut gx, false);
                    self.acc(grads, *x, gx);
                }
                if self.needs(*w) {
                    let mut gw = vec![R::zero(); din * dout];
                    gemm(din, n, dout, xv.data(), true, gd, false, &mut gw, false);
                    self.acc(grads, *w, gw);
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let mut gb = vec![R::zero(); dout];
                    for row in gd.chunks_exact(dout) {
                        for (s, &v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    self.acc(grads, b, gb);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        self.acc(grads, v, gd.to_vec());
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let gb: Vec<R> = gd.iter().zip(self.value(*b).data()).map(|(&x, &y)| x * y).collect();
                    self.acc(grads, *a, gb);
                }
                if self.needs(*b) {
                    let ga: Vec<R> = gd.iter().zip(self.value(*a).data()).map(|(&x, &y)| x * y).collect();
                    self.acc(grads, *b, ga);
                }
            }
            Op::Scale(x, c) => {
                self.acc(grads, *x, gd.iter().map(|&v| v * *c).collect());
            }
            Op::Sigmoid(x) => {
                let gx = gd
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * y * (R::one() - y))
                    .collect();
                self.acc(grads, *x, gx);
            }
            Op::Gelu { x, slope } => {
                let gx = gd.iter().zip(slope).map(|(&gv, &s)| gv * s).collect();
                self.acc(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let h = self.value(*gain).numel();
                let n = rstd.len();
                let gv = self.value(*gain).data();
                if self.needs(*gain) || self.needs(*bias) {
                    let mut ggain = vec![R::zero(); h];
                    let mut gbias = vec![R::zero(); h];
                    for r in 0..n {
                        for c in 0..h {
                            ggain[c] += gd[r * h + c] * xhat[r * h + c];
                            gbias[c] += gd[r * h + c];
                        }
                    }
                    if self.needs(*gain) {
                        self.acc(grads, *gain, ggain);
                    }
                    if self.needs(*bias) {
                        self.acc(grads, *bias, gbias);
                    }
                }
                if self.needs(*x) {
                    let hn = R::from_f64(h as f64);
                    let mut gx = vec![R::zero(); n * h];
                    for r in 0..n {
                        let mut m1 = R::zero();
                        let mut m2 = R::zero();
                        for c in 0..h {
                            let dxh = gd[r * h + c] * gv[c];
                            m1 += dxh;
                            m2 += dxh * xhat[r * h + c];
                        }
                        m1 = m1 / hn;
                        m2 = m2 / hn;
                        for c in 0..h {
                            let dxh = gd[r * h + c] * gv[c];
                            gx[r * h + c] = rstd[r] * (dxh - m1 - xhat[r * h + c] * m2);
                        }
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => {
                let (n, h) = self.value(*q).dims2();
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let (t, nh) = (spec.seq, spec.heads);
                let dh = h / nh;
                let scale = R::one() / R::from_f64(dh as f64).sqrt();
                let mut gq = vec![R::zero(); n * h];
                let mut gk = vec![R::zero(); n * h];
                let mut gv = vec![R::zero(); n * h];
                let mut dp = vec![R::zero(); t];
                for b in 0..spec.batch {
                    for hd in 0..nh {
                        let base = (b * nh + hd) * t * t;
                        for i in 0..t {
                            let upto = if spec.causal { i + 1 } else { t };
                            let goi = &gd[(b * t + i) * h + hd * dh..][..dh];
                            let mut pdp = R::zero();
                            for j in 0..upto {
                                let p = probs[base + i * t + j];
                                let vj = &vd[(b * t + j) * h + hd * dh..][..dh];
                                dp[j] = dot(goi, vj);
                                pdp += p * dp[j];
                                let gvj = &mut gv[(b * t + j) * h + hd * dh..][..dh];
                                for (s, &go) in gvj.iter_mut().zip(goi) {
                                    *s += p * go;
                                }
                            }
                            for j in 0..upto {
                                let ds = probs[base + i * t + j] * (dp[j] - pdp) * scale;
                                if ds == R::zero() {
                                    continue;
                                }
                                let qi = (b * t + i) * h + hd * dh;
                                let kj = (b * t + j) * h + hd * dh;
                                for c in 0..dh {
                                    gq[qi + c] += ds * kd[kj + c];
                                    gk[kj + c] += ds * qd[qi + c];
                                }
                            }
                        }
                    }
                }
                if self.needs(*q) {
                    self.acc(grads, *q, gq);
                }
                if self.needs(*k) {
                    self.acc(grads, *k, gk);
                }
                if self.needs(*v) {
                    self.acc(grads, *v, gv);
                }
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let (_, h) = tv.dims2();
                let mut gt = vec![R::zero(); tv.numel()];
                for (r, &i) in ids.iter().enumerate() {
                    for c in 0..h {
                        gt[i * h + c] += gd[r * h + c];
                    }
                }
                self.acc(grads, *table, gt);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.needs(p) {
                        self.acc(grads, p, gd[off..off + len].to_vec());
                    }
                    off += len;
                }
            }
            Op::SelectRows { x, idx } => {
                let xv = self.value(*x);
                let (_, h) = xv.dims2();
                let mut gx = vec![R::zero(); xv.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..h {
                        gx[i * h + c] += gd[r * h + c];
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Reshape(x) => self.acc(grads, *x, gd.to_vec()),
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.acc(grads, *x, vec![gd[0]; n]);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                total,
            } => {
                let vocab = self.value(*logits).dims2().1;
                let mut gl = vec![R::zero(); probs.len()];
                let scale = gd[0] / *total;
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == R::zero() {
                        continue;
                    }
                    for c in 0..vocab {
                        let mut p = probs[r * vocab + c];
                        if c == t {
                            p -= R::one();
                        }
                        gl[r * vocab + c] = scale * w * p;
                    }
                }
                self.acc(grads, *logits, gl);
            }
            Op::NormalizeRows { x, norms, eps } => {
                let xv = self.value(*x);
                let (n, d) = xv.dims2();
                let mut gx = vec![R::zero(); n * d];
                for r in 0..n {
                    let (xr, gr) = (&xv.data()[r * d..(r + 1) * d], &gd[r * d..(r + 1) * d]);
                    let out = &mut gx[r * d..(r + 1) * d];
                    if norms[r] > *eps {
                        // (g − y (y·g)) / ‖x‖ with y = x / ‖x‖
                        let inv = R::one() / norms[r];
                        let yg = dot(xr, gr) * inv;
                        for i in 0..d {
                            out[i] = (gr[i] - xr[i] * inv * yg) * inv;
                        }
                    } else {
                        for i in 0..d {
                            out[i] = gr[i] / *eps;
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Dpfp { x, nu } => {
                let xv = self.value(*x);
                let (n, d) = xv.dims2();
                let width = 2 * d * nu;
                let mut gx = vec![R::zero(); n * d];
                for r in 0..n {
                    kernels::dpfp_row_backward(
                        &xv.data()[r * d..(r + 1) * d],
                        *nu,
                        &gd[r * width..(r + 1) * width],
                        &mut gx[r * d..(r + 1) * d],
                    );
                }
                self.acc(grads, *x, gx);
            }
            Op::AssocInsert {
                state,
                kphi,
                v,
                beta,
                dims,
                mode,
                gammas,
                eps,
            } => {
                let gr = kernels::insert_backward(
                    self.value(*state).data(),
                    self.value(*kphi).data(),
                    self.value(*v).data(),
                    self.value(*beta).data(),
                    gammas,
                    gd,
                    *dims,
                    *mode,
                    *eps,
                );
                for (var, grad) in [(*state, gr.state), (*kphi, gr.kphi), (*v, gr.v), (*beta, gr.beta)] {
                    if self.needs(var) {
                        self.acc(grads, var, grad);
                    }
                }
            }
            Op::AssocQuery {
                state,
                qphi,
                dims,
                eps,
            } => {
                let (gs, gq) = kernels::query_backward(
                    self.value(*state).data(),
                    self.value(*qphi).data(),
                    gd,
                    *dims,
                    *eps,
                );
                if self.needs(*state) {
                    self.acc(grads, *state, gs);
                }
                if self.needs(*qphi) {
                    self.acc(grads, *qphi, gq);
                }
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor<R>>], v: Var, g: Vec<R>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(self.value(v).shape(), g).expect("gradient shape"));
            }
        }
    }

    /// Adds the gradients of every bound parameter into the store.
    pub fn accumulate_param_grads(&self, grads: &Gradients<R>, store: &mut ParamStore<R>) {
        for (&id, &var) in &self.param_vars {
            if let Some(g) = grads.get(var) {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }

    /// Parameters bound into this graph, with their leaf handles.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.param_vars.iter().map(|(&id, &v)| (id, v))
    }
}

pub struct Gradients<R> {
    leaves: HashMap<usize, Tensor<R>>,
}

impl<R: Real> Gradients<R> {
    /// Gradient of a leaf; `None` when no differentiable path reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor<R>> {
        self.leaves.get(&v.0)
    }
}

#[inline]
fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

/// GELU value and derivative.
#[inline]
fn gelu_parts<R: Real>(x: R) -> (R, R) {
    let c = R::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = R::from_f64(0.044715);
    let half = R::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    // tanh(u) = 1 − 2 / (e^{2u} + 1); exp is much cheaper than libm tanh
    let t = if u.abs() > R::from_f64(20.0) {
        if u > R::zero() { R::one() } else { -R::one() }
    } else {
        R::one() - R::from_f64(2.0) / ((u + u).exp() + R::one())
    };
    let y = half * x * (R::one() + t);
    let dy = half * (R::one() + t)
        + half * x * (R::one() - t * t) * c * (R::one() + R::from_f64(3.0) * a * x * x);
    (y, dy)
}
