//! Pre-norm decoder block.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{AttentionSpec, Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Std of the normal used for projection weights.
pub const INIT_STD: f64 = 0.02;

/// Parameter handles of one transformer block.
#[derive(Debug, Clone)]
pub struct TransformerBlockWeights {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_k: ParamId,
    pub b_k: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub w_ff1: ParamId,
    pub b_ff1: ParamId,
    pub w_ff2: ParamId,
    pub b_ff2: ParamId,
    pub heads: usize,
}

impl TransformerBlockWeights {
    pub fn register<R: Real>(
        store: &mut ParamStore<R>,
        prefix: &str,
        hidden: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || hidden % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide hidden {hidden}")));
        }
        let ff = 4 * hidden;
        let name = |n: &str| format!("{prefix}.{n}");
        let w_q = store.register_normal(name("attn.w_q"), &[hidden, hidden], INIT_STD, rng)?;
        let w_k = store.register_normal(name("attn.w_k"), &[hidden, hidden], INIT_STD, rng)?;
        let w_v = store.register_normal(name("attn.w_v"), &[hidden, hidden], INIT_STD, rng)?;
        let w_o = store.register_normal(name("attn.w_o"), &[hidden, hidden], INIT_STD, rng)?;
        let w_ff1 = store.register_normal(name("ff.w_in"), &[hidden, ff], INIT_STD, rng)?;
        let w_ff2 = store.register_normal(name("ff.w_out"), &[ff, hidden], INIT_STD, rng)?;
        let mut fill = |n: &str, len: usize, v: f64| store.register(name(n), Tensor::full(&[len], R::from_f64(v)));
        Ok(Self {
            ln1_gain: fill("ln1.gain", hidden, 1.0)?,
            ln1_bias: fill("ln1.bias", hidden, 0.0)?,
            b_q: fill("attn.b_q", hidden, 0.0)?,
            b_k: fill("attn.b_k", hidden, 0.0)?,
            b_v: fill("attn.b_v", hidden, 0.0)?,
            b_o: fill("attn.b_o", hidden, 0.0)?,
            ln2_gain: fill("ln2.gain", hidden, 1.0)?,
            ln2_bias: fill("ln2.bias", hidden, 0.0)?,
            b_ff1: fill("ff.b_in", ff, 0.0)?,
            b_ff2: fill("ff.b_out", hidden, 0.0)?,
            w_q,
            w_k,
            w_v,
            w_o,
            w_ff1,
            w_ff2,
            heads,
        })
    }
}

/// `h = x + Attn(LN₁ x)`, `out = h + FF(LN₂ h)` over `batch` sequences of
/// length `seq` stacked item-major in `x: [batch·seq, hidden]`.
pub fn transformer_block<R: Real>(
    g: &mut Graph<R>,
    store: &ParamStore<R>,
    x: Var,
    w: &TransformerBlockWeights,
    batch: usize,
    seq: usize,
    causal: bool,
) -> Result<Var> {
    let hidden = store.get(w.ln1_gain).value.numel();
    if g.value(x).dims2().1 != hidden {
        return Err(Error::shape(
            "transformer_block",
            format!("input width {} vs hidden {hidden}", g.value(x).dims2().1),
        ));
    }
    let mut p = |id| g.param(store, id);
    let (ln1g, ln1b, wq, bq, wk, bk, wv, bv, wo, bo) = (
        p(w.ln1_gain),
        p(w.ln1_bias),
        p(w.w_q),
        p(w.b_q),
        p(w.w_k),
        p(w.b_k),
        p(w.w_v),
        p(w.b_v),
        p(w.w_o),
        p(w.b_o),
    );
    let (ln2g, ln2b, w1, b1, w2, b2) = (
        p(w.ln2_gain),
        p(w.ln2_bias),
        p(w.w_ff1),
        p(w.b_ff1),
        p(w.w_ff2),
        p(w.b_ff2),
    );
    let n1 = g.layer_norm(x, ln1g, ln1b)?;
    let q = g.linear(n1, wq, Some(bq))?;
    let k = g.linear(n1, wk, Some(bk))?;
    let v = g.linear(n1, wv, Some(bv))?;
    let spec = AttentionSpec {
        batch,
        seq,
        heads: w.heads,
        causal,
    };
    let att = g.attention(q, k, v, spec)?;
    let att = g.linear(att, wo, Some(bo))?;
    let h = g.add(x, att)?;
    let n2 = g.layer_norm(h, ln2g, ln2b)?;
    let f = g.linear(n2, w1, Some(b1))?;
    let f = g.gelu(f)?;
    let f = g.linear(f, w2, Some(b2))?;
    g.add(h, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(heads: usize) -> (ParamStore<f64>, TransformerBlockWeights, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let w = TransformerBlockWeights::register(&mut store, "b", 8, heads, &mut rng).unwrap();
        let x: Vec<f64> = (0..32).map(|i| ((i * 37 % 17) as f64 - 8.0) / 5.0).collect();
        (store, w, Tensor::new(&[4, 8], x).unwrap())
    }

    #[test]
    fn zero_output_projections_give_identity() {
        let (mut store, w, x) = setup(2);
        for id in [w.w_o, w.w_ff2] {
            store.get_mut(id).value.data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let out = transformer_block(&mut g, &store, xv, &w, 1, 4, true).unwrap();
        assert_eq!(g.value(out), &x);
    }

    #[test]
    fn causal_outputs_ignore_future_tokens() {
        let (store, w, x) = setup(2);
        let run = |x: Tensor<f64>| {
            let mut g = Graph::new();
            let xv = g.constant(x).unwrap();
            let out = transformer_block(&mut g, &store, xv, &w, 1, 4, true).unwrap();
            g.value(out).clone()
        };
        let base = run(x.clone());
        let mut pert = x.clone();
        for c in 0..8 {
            pert.data_mut()[2 * 8 + c] += 0.7;
        }
        let other = run(pert);
        assert_eq!(&base.data()[..16], &other.data()[..16]);
        assert_ne!(&base.data()[16..24], &other.data()[16..24]);
    }

    #[test]
    fn heads_must_divide_hidden() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(TransformerBlockWeights::register(&mut store, "b", 8, 3, &mut rng).is_err());
    }
}
