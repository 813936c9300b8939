//! Fast-weight associative memory.
//!
//! A state is a value-by-feature matrix `A` plus a normalization vector `z`.
//! Keys are written with a gated delta rule: the value currently associated
//! with a key is recalled, replaced by the new value, and the key's weight in
//! `z` is corrected so that `z` keeps counting each distinct key once.
//!
//! Two surfaces share the same kernels: [`AssociativeState`] works on plain
//! vectors, and the `Graph` ops (`dpfp`, `assoc_insert`, `assoc_query`) are
//! the differentiable path used by the models.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AssocDims, GammaMode, Graph, Var};
use crate::tensor::{Real, Tensor};

/// Denominator floor for recall and γ.
pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FeatureMapSpec {
    /// Test harness only; not accepted by model configs.
    Identity,
    Dpfp { nu: usize },
}

impl Default for FeatureMapSpec {
    fn default() -> Self {
        FeatureMapSpec::Dpfp { nu: 3 }
    }
}

impl FeatureMapSpec {
    pub fn output_dim(&self, d: usize) -> usize {
        match *self {
            FeatureMapSpec::Identity => d,
            FeatureMapSpec::Dpfp { nu } => 2 * d * nu,
        }
    }

    pub(crate) fn apply_graph<R: Real>(&self, g: &mut Graph<R>, x: Var) -> Result<Var> {
        match *self {
            FeatureMapSpec::Identity => Ok(x),
            FeatureMapSpec::Dpfp { nu } => g.dpfp(x, nu),
        }
    }
}

/// φ as the model applies it: the feature map, optionally scaled to unit
/// length per row so reads and writes stay bounded however large the
/// projected keys grow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMap {
    pub spec: FeatureMapSpec,
    pub normalize: bool,
}

impl FeatureMap {
    fn apply_graph<R: Real>(&self, g: &mut Graph<R>, x: Var, eps: R) -> Result<Var> {
        let y = self.spec.apply_graph(g, x)?;
        if self.normalize {
            g.normalize_rows(y, eps)
        } else {
            Ok(y)
        }
    }
}

/// Feature map φ on a single vector.
///
/// For DPFP-ν: `r = [relu(x); relu(−x)]`, output block `j` (1-based) is
/// `r ⊙ roll(r, j)` with `roll(r, j)_i = r_{(i+j) mod 2d}`.
pub fn phi<R: Real>(x: &[R], spec: FeatureMapSpec) -> Vec<R> {
    match spec {
        FeatureMapSpec::Identity => x.to_vec(),
        FeatureMapSpec::Dpfp { nu } => {
            let mut out = vec![R::zero(); 2 * x.len() * nu];
            kernels::dpfp_row(x, nu, &mut out);
            out
        }
    }
}

/// Per-layer associative memory: `A` is `d_val × d_phi`, `z` has `d_phi` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct AssociativeState<R> {
    d_val: usize,
    d_phi: usize,
    a: Vec<R>,
    z: Vec<R>,
}

/// What one insert observed.
#[derive(Debug, Clone, PartialEq)]
pub struct InsertTrace<R> {
    pub recalled: Vec<R>,
    pub gamma: R,
    pub beta: R,
}

impl<R: Real> AssociativeState<R> {
    pub fn new(d_val: usize, d_phi: usize) -> Self {
        Self {
            d_val,
            d_phi,
            a: vec![R::zero(); d_val * d_phi],
            z: vec![R::zero(); d_phi],
        }
    }

    pub fn d_val(&self) -> usize {
        self.d_val
    }

    pub fn d_phi(&self) -> usize {
        self.d_phi
    }

    /// Row-major `d_val × d_phi`.
    pub fn a(&self) -> &[R] {
        &self.a
    }

    pub fn z(&self) -> &[R] {
        &self.z
    }

    pub fn num_floats(&self) -> usize {
        self.a.len() + self.z.len()
    }

    fn check_phi(&self, k_phi: &[R]) -> Result<()> {
        if k_phi.len() != self.d_phi {
            return Err(Error::shape(
                "associative state",
                format!("feature length {} vs d_phi {}", k_phi.len(), self.d_phi),
            ));
        }
        Ok(())
    }

    /// `A φ(k) / max(zᵀφ(k), ε)`: the value currently stored under a key.
    pub fn recall_prev(&self, k_phi: &[R]) -> Result<Vec<R>> {
        self.check_phi(k_phi)?;
        let mut out = vec![R::zero(); self.d_val];
        kernels::recall(&self.a, &self.z, k_phi, self.d_val, R::from_f64(DEFAULT_EPS), &mut out);
        Ok(out)
    }

    /// `1 − zᵀφ(k) / max(‖φ(k)‖², ε)`.
    pub fn gamma(&self, k_phi: &[R]) -> Result<R> {
        self.check_phi(k_phi)?;
        Ok(kernels::gamma(&self.z, k_phi, R::from_f64(DEFAULT_EPS)))
    }

    /// Delta-rule write of `value` under an already feature-mapped key with
    /// an explicit gate `beta`.
    pub fn insert_features(
        &mut self,
        k_phi: &[R],
        value: &[R],
        beta: R,
        mode: GammaMode,
    ) -> Result<InsertTrace<R>> {
        self.check_phi(k_phi)?;
        if value.len() != self.d_val {
            return Err(Error::shape("insert", format!("value length {} vs {}", value.len(), self.d_val)));
        }
        let eps = R::from_f64(DEFAULT_EPS);
        let mut recalled = vec![R::zero(); self.d_val];
        let gamma = kernels::insert_step(
            &mut self.a,
            &mut self.z,
            k_phi,
            value,
            beta,
            mode,
            None,
            eps,
            &mut recalled,
        );
        Ok(InsertTrace { recalled, gamma, beta })
    }

    /// Full insert of a memory-token embedding `m`: keys, values and the gate
    /// come from the projections.
    pub fn insert(
        &mut self,
        m: &[R],
        proj: &AssocProjections<R>,
        spec: FeatureMapSpec,
        mode: GammaMode,
    ) -> Result<InsertTrace<R>> {
        let k = proj.project(&proj.w_k, m)?;
        let v = proj.project(&proj.w_v, m)?;
        let logit = proj.project(&proj.w_beta, m)?[0];
        let beta = R::one() / (R::one() + (-logit).exp());
        self.insert_features(&phi(&k, spec), &v, beta, mode)
    }

    /// Read-only recall for a feature-mapped query.
    pub fn query_features(&self, q_phi: &[R]) -> Result<Vec<R>> {
        self.recall_prev(q_phi)
    }

    /// `y = A φ(W_Q x) / max(zᵀφ(W_Q x), ε)`.
    pub fn query(&self, x: &[R], proj: &AssocProjections<R>, spec: FeatureMapSpec) -> Result<Vec<R>> {
        let q = proj.project(&proj.w_q, x)?;
        self.query_features(&phi(&q, spec))
    }

    /// Packs into the `[1, d_val + 1, d_phi]` layout the graph ops use.
    pub fn to_tensor(&self) -> Tensor<R> {
        let mut data = self.a.clone();
        data.extend_from_slice(&self.z);
        Tensor::new(&[1, self.d_val + 1, self.d_phi], data).expect("state layout")
    }

    /// Item `index` of a packed `[batch, d_val + 1, d_phi]` tensor.
    pub fn from_tensor(t: &Tensor<R>, index: usize) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || index >= s[0] {
            return Err(Error::shape("associative state", format!("{s:?}, item {index}")));
        }
        let (d_val, d_phi) = (s[1] - 1, s[2]);
        let item = &t.data()[index * s[1] * d_phi..(index + 1) * s[1] * d_phi];
        Ok(Self {
            d_val,
            d_phi,
            a: item[..d_val * d_phi].to_vec(),
            z: item[d_val * d_phi..].to_vec(),
        })
    }

    /// Snapshot as two raw little-endian arrays with shape headers (`A`, then `z`).
    pub fn write_raw(&self, out: &mut Vec<u8>) {
        Tensor::new(&[self.d_val, self.d_phi], self.a.clone())
            .expect("A shape")
            .write_raw(out);
        Tensor::new(&[self.d_phi], self.z.clone()).expect("z shape").write_raw(out);
    }

    pub fn read_raw(bytes: &[u8]) -> Result<(Self, usize)> {
        let (a, n1) = Tensor::<R>::read_raw(bytes)?;
        let (z, n2) = Tensor::<R>::read_raw(&bytes[n1..])?;
        if a.shape().len() != 2 || z.shape() != [a.shape()[1]] {
            return Err(Error::Checkpoint("inconsistent associative state snapshot".into()));
        }
        Ok((
            Self {
                d_val: a.shape()[0],
                d_phi: a.shape()[1],
                a: a.into_data(),
                z: z.into_data(),
            },
            n1 + n2,
        ))
    }
}

/// Plain-tensor copy of one layer's associative projections, stored in the
/// `input × output` orientation used by the graph's `linear`.
#[derive(Debug, Clone)]
pub struct AssocProjections<R> {
    /// `hidden × d_mem`
    pub w_k: Tensor<R>,
    /// `hidden × d_val`
    pub w_v: Tensor<R>,
    /// `hidden × 1`
    pub w_beta: Tensor<R>,
    /// `hidden × d_mem`
    pub w_q: Tensor<R>,
    /// `d_val × hidden`
    pub w_o: Tensor<R>,
}

impl<R: Real> AssocProjections<R> {
    fn project(&self, w: &Tensor<R>, x: &[R]) -> Result<Vec<R>> {
        let s = w.shape();
        if s.len() != 2 || s[0] != x.len() {
            return Err(Error::shape("projection", format!("weight {s:?}, input {}", x.len())));
        }
        let mut out = vec![R::zero(); s[1]];
        crate::tensor::gemm(1, s[0], s[1], x, false, w.data(), false, &mut out, false);
        Ok(out)
    }
}

/// Graph handles of one layer's associative projections.
#[derive(Debug, Clone, Copy)]
pub struct AssocVars {
    pub w_k: Var,
    pub w_v: Var,
    pub w_beta: Var,
    pub w_q: Var,
    pub w_o: Var,
}

/// Inserts each memory row (`batch · mem_tokens` rows, item-major) into the
/// batch of states, in order.
#[allow(clippy::too_many_arguments)]
pub fn mem_update<R: Real>(
    g: &mut Graph<R>,
    state: Var,
    memory: Var,
    w: &AssocVars,
    phi: FeatureMap,
    dims: AssocDims,
    mode: GammaMode,
    eps: R,
) -> Result<Var> {
    let k = g.linear(memory, w.w_k, None)?;
    let kphi = phi.apply_graph(g, k, eps)?;
    let v = g.linear(memory, w.w_v, None)?;
    let logit = g.linear(memory, w.w_beta, None)?;
    let beta = g.sigmoid(logit)?;
    g.assoc_insert(state, kphi, v, beta, dims, mode, eps)
}

/// `out_j = x_j + W_O · query(state, x_j)` for every row.
pub fn assoc_block<R: Real>(
    g: &mut Graph<R>,
    x: Var,
    state: Var,
    w: &AssocVars,
    phi: FeatureMap,
    dims: AssocDims,
    eps: R,
) -> Result<Var> {
    let q = g.linear(x, w.w_q, None)?;
    let qphi = phi.apply_graph(g, q, eps)?;
    let y = g.assoc_query(state, qphi, dims, eps)?;
    let back = g.linear(y, w.w_o, None)?;
    g.add(x, back)
}

pub(crate) mod kernels {
    use super::*;

    pub fn dpfp_row<R: Real>(x: &[R], nu: usize, out: &mut [R]) {
        let d = x.len();
        let two_d = 2 * d;
        let mut r = Vec::with_capacity(2 * two_d);
        r.extend(x.iter().map(|&v| v.max(R::zero())));
        r.extend(x.iter().map(|&v| (-v).max(R::zero())));
        r.extend_from_within(..);
        for j in 1..=nu {
            let block = &mut out[(j - 1) * two_d..j * two_d];
            let s = j % two_d;
            for ((o, &a), &b) in block.iter_mut().zip(&r[..two_d]).zip(&r[s..s + two_d]) {
                *o = a * b;
            }
        }
    }

    pub fn dpfp_row_backward<R: Real>(x: &[R], nu: usize, g: &[R], gx: &mut [R]) {
        let d = x.len();
        let two_d = 2 * d;
        let r: Vec<R> = (0..two_d)
            .map(|i| if i < d { x[i].max(R::zero()) } else { (-x[i - d]).max(R::zero()) })
            .collect();
        let mut gr = vec![R::zero(); two_d];
        let rr: Vec<R> = r.iter().chain(&r).copied().collect();
        for j in 1..=nu {
            let gj = &g[(j - 1) * two_d..j * two_d];
            let s = j % two_d;
            for ((acc, &go), &rv) in gr.iter_mut().zip(gj).zip(&rr[s..s + two_d]) {
                *acc += go * rv;
            }
            let split = two_d - s;
            for ((acc, &go), &rv) in gr[s..].iter_mut().zip(&gj[..split]).zip(&r[..split]) {
                *acc += go * rv;
            }
            for ((acc, &go), &rv) in gr[..s].iter_mut().zip(&gj[split..]).zip(&r[split..]) {
                *acc += go * rv;
            }
        }
        for i in 0..d {
            if x[i] > R::zero() {
                gx[i] += gr[i];
            } else if x[i] < R::zero() {
                gx[i] -= gr[i + d];
            }
        }
    }

    use crate::tensor::dot;

    pub fn recall<R: Real>(a: &[R], z: &[R], k: &[R], d_val: usize, eps: R, out: &mut [R]) -> R {
        let d_phi = k.len();
        let s = dot(z, k);
        let d = s.max(eps);
        for r in 0..d_val {
            out[r] = dot(&a[r * d_phi..(r + 1) * d_phi], k) / d;
        }
        s
    }

    pub fn gamma<R: Real>(z: &[R], k: &[R], eps: R) -> R {
        R::one() - dot(z, k) / dot(k, k).max(eps)
    }

    /// One delta-rule write; returns the γ used.
    #[allow(clippy::too_many_arguments)]
    pub fn insert_step<R: Real>(
        a: &mut [R],
        z: &mut [R],
        k: &[R],
        v: &[R],
        beta: R,
        mode: GammaMode,
        gamma_override: Option<R>,
        eps: R,
        recalled: &mut [R],
    ) -> R {
        let d_val = v.len();
        let d_phi = k.len();
        let gm = match (mode, gamma_override) {
            (GammaMode::One, _) => R::one(),
            (_, Some(gv)) => gv,
            (GammaMode::Corrected { clamp, .. }, None) => {
                let gm = gamma(z, k, eps);
                if clamp {
                    gm.max(R::zero()).min(R::one())
                } else {
                    gm
                }
            }
        };
        let d = dot(z, k).max(eps);
        for r in 0..d_val {
            let arow = &mut a[r * d_phi..(r + 1) * d_phi];
            recalled[r] = dot(arow, k) / d;
            let u = beta * (v[r] - recalled[r]);
            for (dst, &kc) in arow.iter_mut().zip(k) {
                *dst += u * kc;
            }
        }
        for (zc, &kc) in z.iter_mut().zip(k) {
            *zc += gm * kc;
        }
        gm
    }

    #[allow(clippy::too_many_arguments)]
    pub fn insert_forward<R: Real>(
        state: &[R],
        kphi: &[R],
        v: &[R],
        beta: &[R],
        dims: AssocDims,
        mode: GammaMode,
        frozen: Option<&[R]>,
        eps: R,
    ) -> (Vec<R>, Vec<R>) {
        let AssocDims { batch, d_val, d_phi } = dims;
        let per = beta.len() / batch.max(1);
        let item = dims.item_len();
        let mut out = state.to_vec();
        let mut gammas = vec![R::zero(); beta.len()];
        let mut recalled = vec![R::zero(); d_val];
        for b in 0..batch {
            let (a, z) = out[b * item..(b + 1) * item].split_at_mut(d_val * d_phi);
            for i in 0..per {
                let row = b * per + i;
                gammas[row] = insert_step(
                    a,
                    z,
                    &kphi[row * d_phi..(row + 1) * d_phi],
                    &v[row * d_val..(row + 1) * d_val],
                    beta[row],
                    mode,
                    frozen.map(|f| f[row]),
                    eps,
                    &mut recalled,
                );
            }
        }
        (out, gammas)
    }

    pub struct InsertGrads<R> {
        pub state: Vec<R>,
        pub kphi: Vec<R>,
        pub v: Vec<R>,
        pub beta: Vec<R>,
    }

    /// Backward through the sequential inserts. Intermediate states are
    /// recomputed per item rather than stored on the tape.
    #[allow(clippy::too_many_arguments)]
    pub fn insert_backward<R: Real>(
        state: &[R],
        kphi: &[R],
        v: &[R],
        beta: &[R],
        gammas: &[R],
        g_out: &[R],
        dims: AssocDims,
        mode: GammaMode,
        eps: R,
    ) -> InsertGrads<R> {
        let AssocDims { batch, d_val, d_phi } = dims;
        let per = beta.len() / batch.max(1);
        let item = dims.item_len();
        let ad = d_val * d_phi;
        let mut gs_all = g_out.to_vec();
        let mut gk_all = vec![R::zero(); kphi.len()];
        let mut gv_all = vec![R::zero(); v.len()];
        let mut gb_all = vec![R::zero(); beta.len()];
        let differentiable_gamma = matches!(mode, GammaMode::Corrected { detach: false, .. });
        let clamp = matches!(mode, GammaMode::Corrected { clamp: true, .. });
        let mut states = vec![R::zero(); per * item];
        let mut recalled = vec![R::zero(); d_val];
        let mut num = vec![R::zero(); d_val];
        let mut u = vec![R::zero(); d_val];
        let mut gnum = vec![R::zero(); d_val];
        for b in 0..batch {
            // states[i] = state before insert i
            let mut cur = state[b * item..(b + 1) * item].to_vec();
            for i in 0..per {
                states[i * item..(i + 1) * item].copy_from_slice(&cur);
                let row = b * per + i;
                let (a, z) = cur.split_at_mut(ad);
                insert_step(
                    a,
                    z,
                    &kphi[row * d_phi..(row + 1) * d_phi],
                    &v[row * d_val..(row + 1) * d_val],
                    beta[row],
                    mode,
                    Some(gammas[row]),
                    eps,
                    &mut recalled,
                );
            }
            let gs = &mut gs_all[b * item..(b + 1) * item];
            for i in (0..per).rev() {
                let row = b * per + i;
                let prev = &states[i * item..(i + 1) * item];
                let (a, z) = prev.split_at(ad);
                let k = &kphi[row * d_phi..(row + 1) * d_phi];
                let vv = &v[row * d_val..(row + 1) * d_val];
                let bt = beta[row];
                let gm = gammas[row];
                let s = dot(z, k);
                let d = s.max(eps);
                for r in 0..d_val {
                    num[r] = dot(&a[r * d_phi..(r + 1) * d_phi], k);
                    u[r] = vv[r] - num[r] / d;
                }
                let gk = &mut gk_all[row * d_phi..(row + 1) * d_phi];
                let (ga, gz) = gs.split_at_mut(ad);
                // A' = A + β u kᵀ with u = v − (A k) / d, one pass per row of A
                let mut gb = R::zero();
                for r in 0..d_val {
                    let arow = &a[r * d_phi..(r + 1) * d_phi];
                    let garow = &mut ga[r * d_phi..(r + 1) * d_phi];
                    let gak = dot(garow, k);
                    gb += u[r] * gak;
                    let gu = bt * gak;
                    gv_all[row * d_val + r] = gu;
                    gnum[r] = -gu / d;
                    let (br, gn) = (bt * u[r], gnum[r]);
                    for ((gkc, gac), (&kc, &ac)) in gk.iter_mut().zip(garow.iter_mut()).zip(k.iter().zip(arow)) {
                        *gkc += br * *gac + gn * ac;
                        *gac += gn * kc;
                    }
                }
                gb_all[row] = gb;
                let gd_: R = -dot(&gnum, &num) / d;
                let mut g_s = if s > eps { gd_ } else { R::zero() };
                // z' = z + γ k
                let g_gamma = dot(gz, k);
                for c in 0..d_phi {
                    gk[c] += gm * gz[c];
                }
                let n2 = dot(k, k);
                let nn = n2.max(eps);
                let clipped = clamp && {
                    let raw = R::one() - s / nn;
                    raw <= R::zero() || raw >= R::one()
                };
                if differentiable_gamma && !clipped {
                    g_s += -g_gamma / nn;
                    if n2 > eps {
                        let coef = R::from_f64(2.0) * g_gamma * s / (nn * nn);
                        for c in 0..d_phi {
                            gk[c] += coef * k[c];
                        }
                    }
                }
                for c in 0..d_phi {
                    gk[c] += g_s * z[c];
                    gz[c] += g_s * k[c];
                }
            }
        }
        InsertGrads {
            state: gs_all,
            kphi: gk_all,
            v: gv_all,
            beta: gb_all,
        }
    }

    pub fn query_forward<R: Real>(state: &[R], qphi: &[R], dims: AssocDims, eps: R) -> Vec<R> {
        let AssocDims { batch, d_val, d_phi } = dims;
        let rows = qphi.len() / d_phi;
        let per = rows / batch.max(1);
        let item = dims.item_len();
        let mut out = vec![R::zero(); rows * d_val];
        for b in 0..batch {
            let st = &state[b * item..(b + 1) * item];
            let (a, z) = st.split_at(d_val * d_phi);
            let q = &qphi[b * per * d_phi..(b + 1) * per * d_phi];
            let o = &mut out[b * per * d_val..(b + 1) * per * d_val];
            crate::tensor::gemm(per, d_phi, d_val, q, false, a, true, o, false);
            for t in 0..per {
                let d = dot(z, &q[t * d_phi..(t + 1) * d_phi]).max(eps);
                for x in &mut o[t * d_val..(t + 1) * d_val] {
                    *x = *x / d;
                }
            }
        }
        out
    }

    pub fn query_backward<R: Real>(
        state: &[R],
        qphi: &[R],
        g_out: &[R],
        dims: AssocDims,
        eps: R,
    ) -> (Vec<R>, Vec<R>) {
        let AssocDims { batch, d_val, d_phi } = dims;
        let rows = qphi.len() / d_phi;
        let per = rows / batch.max(1);
        let item = dims.item_len();
        let ad = d_val * d_phi;
        let mut gs = vec![R::zero(); state.len()];
        let mut gq = vec![R::zero(); qphi.len()];
        let mut num = vec![R::zero(); per * d_val];
        let mut gnum = vec![R::zero(); per * d_val];
        for b in 0..batch {
            let st = &state[b * item..(b + 1) * item];
            let (a, z) = st.split_at(ad);
            let q = &qphi[b * per * d_phi..(b + 1) * per * d_phi];
            let go = &g_out[b * per * d_val..(b + 1) * per * d_val];
            crate::tensor::gemm(per, d_phi, d_val, q, false, a, true, &mut num, false);
            let (ga, gz) = gs[b * item..(b + 1) * item].split_at_mut(ad);
            let gqb = &mut gq[b * per * d_phi..(b + 1) * per * d_phi];
            for t in 0..per {
                let qt = &q[t * d_phi..(t + 1) * d_phi];
                let s = dot(z, qt);
                let d = s.max(eps);
                let mut gd_ = R::zero();
                for r in 0..d_val {
                    let gy = go[t * d_val + r];
                    gnum[t * d_val + r] = gy / d;
                    gd_ -= gy * num[t * d_val + r] / (d * d);
                }
                if s > eps {
                    for c in 0..d_phi {
                        gz[c] += gd_ * qt[c];
                        gqb[t * d_phi + c] += gd_ * z[c];
                    }
                }
            }
            // gA += Gnumᵀ Q, gQ += Gnum A
            crate::tensor::gemm(d_val, per, d_phi, &gnum, true, q, false, ga, true);
            crate::tensor::gemm(per, d_val, d_phi, &gnum, false, a, false, gqb, true);
        }
        (gs, gq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ID: FeatureMapSpec = FeatureMapSpec::Identity;
    const GAMMA: GammaMode = GammaMode::Corrected {
        detach: true,
        clamp: false,
    };

    #[test]
    fn dpfp_single_positive_input() {
        let out = phi(&[2.0f64], FeatureMapSpec::Dpfp { nu: 1 });
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn dpfp_two_dims() {
        let out = phi(&[1.0f64, -1.0], FeatureMapSpec::Dpfp { nu: 1 });
        assert_eq!(out, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn identity_map_passes_through() {
        assert_eq!(phi(&[1.5f64, -2.0], ID), vec![1.5, -2.0]);
        assert_eq!(ID.output_dim(7), 7);
        assert_eq!(FeatureMapSpec::Dpfp { nu: 3 }.output_dim(32), 192);
    }

    #[test]
    fn empty_state_recalls_zero_with_unit_gamma() {
        let s = AssociativeState::<f64>::new(3, 4);
        assert_eq!(s.recall_prev(&[0.3, 0.1, 0.0, 2.0]).unwrap(), vec![0.0; 3]);
        assert_eq!(s.gamma(&[0.3, 0.1, 0.0, 2.0]).unwrap(), 1.0);
    }

    #[test]
    fn gamma_self_cancels_and_goes_negative() {
        let mut s = AssociativeState::<f64>::new(1, 2);
        let k = [0.6, 0.8];
        s.z = k.to_vec();
        assert!(s.gamma(&k).unwrap().abs() < 1e-12);
        s.z = vec![1.2, 1.6];
        assert!((s.gamma(&k).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_trace_insert_then_overwrite() {
        let mut s = AssociativeState::<f64>::new(1, 2);
        let t = s.insert_features(&[1.0, 0.0], &[3.0], 1.0, GAMMA).unwrap();
        assert_eq!(t.recalled, vec![0.0]);
        assert_eq!(t.gamma, 1.0);
        assert_eq!(s.a(), &[3.0, 0.0]);
        assert_eq!(s.z(), &[1.0, 0.0]);
        assert_eq!(s.recall_prev(&[1.0, 0.0]).unwrap(), vec![3.0]);
        assert_eq!(s.recall_prev(&[0.0, 1.0]).unwrap(), vec![0.0]);

        let t = s.insert_features(&[1.0, 0.0], &[5.0], 1.0, GAMMA).unwrap();
        assert_eq!(t.recalled, vec![3.0]);
        assert_eq!(t.gamma, 0.0);
        assert_eq!(s.a(), &[5.0, 0.0]);
        assert_eq!(s.z(), &[1.0, 0.0]);
        assert_eq!(s.query_features(&[1.0, 0.0]).unwrap(), vec![5.0]);
        assert_eq!(s.query_features(&[0.0, 1.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn closed_gate_leaves_state_unchanged() {
        let mut s = AssociativeState::<f64>::new(1, 2);
        s.insert_features(&[1.0, 0.0], &[3.0], 1.0, GAMMA).unwrap();
        let before = s.clone();
        // β = 0 still moves z by γ·φ(k); with the same key γ = 0 so nothing changes.
        s.insert_features(&[1.0, 0.0], &[7.0], 0.0, GAMMA).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn closed_gate_on_fresh_state_keeps_a_zero() {
        let mut s = AssociativeState::<f64>::new(2, 2);
        s.insert_features(&[0.0, 1.0], &[7.0, 1.0], 0.0, GammaMode::One).unwrap();
        assert!(s.a().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn clamped_gamma_never_shrinks_z() {
        let mut s = AssociativeState::<f64>::new(1, 2);
        let clamp = GammaMode::Corrected {
            detach: true,
            clamp: true,
        };
        s.insert_features(&[2.0, 0.0], &[1.0], 1.0, clamp).unwrap();
        // raw γ = 1 − 2/1 = −1 for the shorter parallel key
        assert_eq!(s.gamma(&[1.0, 0.0]).unwrap(), -1.0);
        let t = s.insert_features(&[1.0, 0.0], &[1.0], 1.0, clamp).unwrap();
        assert_eq!(t.gamma, 0.0);
        assert_eq!(s.z(), &[2.0, 0.0]);
        // a fresh orthogonal key still gets γ = 1
        let t = s.insert_features(&[0.0, 3.0], &[1.0], 1.0, clamp).unwrap();
        assert_eq!(t.gamma, 1.0);
    }

    #[test]
    fn query_is_read_only() {
        let mut s = AssociativeState::<f64>::new(2, 3);
        s.insert_features(&[0.2, 0.5, 0.1], &[1.0, -1.0], 0.7, GAMMA).unwrap();
        let before = s.clone();
        for _ in 0..10 {
            s.query_features(&[0.4, 0.1, 0.9]).unwrap();
        }
        assert_eq!(s, before);
    }

    #[test]
    fn wrong_feature_length_rejected() {
        let s = AssociativeState::<f64>::new(2, 3);
        assert!(s.recall_prev(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let mut s = AssociativeState::<f32>::new(2, 3);
        s.insert_features(&[0.2, 0.5, 0.1], &[1.0, -1.0], 0.7, GAMMA).unwrap();
        let mut buf = Vec::new();
        s.write_raw(&mut buf);
        let (back, used) = AssociativeState::<f32>::read_raw(&buf).unwrap();
        assert_eq!(used, buf.len());
        assert_eq!(back, s);
    }
}
