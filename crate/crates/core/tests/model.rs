//! Model-level contracts: identity reduction at init, constant recurrent
//! state, causality across and within segments, BPTT wiring, checkpoints.

use armt_core::checkpoint::{decode_checkpoint, encode_checkpoint};
use armt_core::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(variant: Variant) -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden: 16,
        heads: 2,
        mem_tokens: 3,
        d_mem: 4,
        d_val: 5,
        ..ModelConfig::new(variant)
    }
}

fn random_segments(seed: u64, batch: usize, lens: &[usize]) -> Vec<SegmentBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last = lens.len() - 1;
    lens.iter()
        .enumerate()
        .map(|(i, &len)| {
            let tokens: Vec<usize> = (0..batch * len).map(|_| rng.gen_range(0..20)).collect();
            if i < last {
                SegmentBatch::context(batch, len, tokens)
            } else {
                let targets: Vec<usize> = (0..batch * len).map(|_| rng.gen_range(0..20)).collect();
                SegmentBatch {
                    batch,
                    len,
                    tokens,
                    targets,
                    weights: vec![1.0; batch * len],
                }
            }
        })
        .collect()
}

fn all_logits<R: Real>(model: &Model<R>, segs: &[SegmentBatch]) -> Vec<Vec<R>> {
    let mut g = Graph::new();
    let out = model.forward_sequence(&mut g, segs, None).unwrap();
    out.logits.iter().map(|&v| g.value(v).data().to_vec()).collect()
}

#[test]
fn armt_at_init_is_prmt() {
    for seed in 0..3 {
        let armt = Model::<f32>::new(small(Variant::Armt), seed).unwrap();
        let mut prmt = Model::<f32>::new(small(Variant::Prmt), seed + 100).unwrap();
        let copied = prmt.copy_shared_params_from(&armt);
        assert_eq!(copied, prmt.params().len());
        let segs = random_segments(seed, 3, &[9]);
        assert_eq!(all_logits(&armt, &segs), all_logits(&prmt, &segs));
        // the memory tokens both write are identical too
        let carry = |m: &Model<f32>| {
            let mut g = Graph::new();
            let out = m.forward_sequence(&mut g, &segs, None).unwrap();
            let snap = out.carry.snapshot(&g);
            snap.memory
        };
        assert_eq!(carry(&armt), carry(&prmt));
    }
}

#[test]
fn no_gamma_variant_differs_only_in_gamma() {
    let a = Model::<f64>::new(small(Variant::Armt), 5).unwrap();
    let b = Model::<f64>::new(small(Variant::ArmtNoGamma), 5).unwrap();
    let names = |m: &Model<f64>| m.params().iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect::<Vec<_>>();
    assert_eq!(names(&a), names(&b));
    assert_eq!(a.count_recurrent_floats(), b.count_recurrent_floats());
}

#[test]
fn carry_size_is_constant_over_100_segments() {
    for variant in Variant::ALL {
        let model = Model::<f32>::new(small(variant), 1).unwrap();
        let segs = random_segments(2, 1, &[9; 100]);
        let mut g = Graph::new();
        let mut snap = model.init_carry(&mut g, 1).unwrap().snapshot(&g);
        let mut sizes = Vec::new();
        for seg in &segs {
            let mut g = Graph::new();
            let c = snap.load(&mut g).unwrap();
            let (_, next) = model.forward_segment(&mut g, &c, seg).unwrap();
            sizes.push(next.num_floats(&g));
            snap = next.snapshot(&g);
        }
        assert!(sizes.iter().all(|&s| s == model.count_recurrent_floats()), "{variant}: {sizes:?}");
    }
}

#[test]
fn later_segments_never_change_earlier_logits() {
    for variant in Variant::ALL {
        let mut model = Model::<f64>::new(small(variant), 3).unwrap();
        randomize_output_projections(&mut model, 4);
        let segs = random_segments(4, 2, &[6, 6, 6, 6]);
        let mut perturbed = segs.clone();
        perturbed[2].tokens.iter_mut().for_each(|t| *t = (*t + 1) % 20);
        let (a, b) = (all_logits(&model, &segs), all_logits(&model, &perturbed));
        assert_eq!(a[..2], b[..2], "{variant}");
        assert_ne!(a[3], b[3], "{variant}: the perturbation must reach later segments");
    }
}

#[test]
fn causal_within_a_segment() {
    for variant in Variant::ALL {
        let model = Model::<f64>::new(small(variant), 6).unwrap();
        let segs = random_segments(7, 1, &[5, 8]);
        let mut perturbed = segs.clone();
        perturbed[1].tokens[5] = (perturbed[1].tokens[5] + 3) % 20;
        let vocab = model.config().vocab;
        let (a, b) = (all_logits(&model, &segs), all_logits(&model, &perturbed));
        assert_eq!(a[1][..5 * vocab], b[1][..5 * vocab], "{variant}");
        assert_ne!(a[1][5 * vocab..], b[1][5 * vocab..]);
    }
}

fn randomize_output_projections(model: &mut Model<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in 0..model.config().layers {
        if let Some(id) = model.assoc_output_projection(l) {
            for x in model.params_mut().get_mut(id).value.data_mut() {
                *x = rng.gen_range(-0.3..0.3);
            }
        }
    }
}

fn param_grads(model: &Model<f64>, segs: &[SegmentBatch], window: Option<usize>) -> Vec<Tensor<f64>> {
    let mut m = model.clone();
    let mut g = Graph::new();
    let out = m.forward_sequence(&mut g, segs, window).unwrap();
    let grads = g.backward(out.loss.unwrap()).unwrap();
    m.params_mut().zero_grad();
    g.accumulate_param_grads(&grads, m.params_mut());
    m.params().iter().map(|(_, p)| p.grad.clone()).collect()
}

#[test]
fn detaching_the_carry_changes_segment_zero_gradients() {
    for variant in Variant::ALL {
        let mut model = Model::<f64>::new(small(variant), 8).unwrap();
        randomize_output_projections(&mut model, 9);
        let segs = random_segments(10, 2, &[6, 6, 6]);
        let full = param_grads(&model, &segs, None);
        let cut = param_grads(&model, &segs, Some(1));
        let id = model.params().id(if variant == Variant::Rmt { "memory" } else { "memory.0" }).unwrap();
        let diff: f64 = full[id.index()]
            .data()
            .iter()
            .zip(cut[id.index()].data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-9, "{variant}: BPTT does not reach the initial memory");
    }
}

#[test]
fn single_segment_sequence_is_forward_segment_plus_loss() {
    let model = Model::<f64>::new(small(Variant::Armt), 11).unwrap();
    let segs = random_segments(12, 2, &[7]);
    let mut g = Graph::new();
    let out = model.forward_sequence(&mut g, &segs, None).unwrap();
    let seq_loss = g.value(out.loss.unwrap()).item();

    let mut g = Graph::new();
    let carry = model.init_carry(&mut g, 2).unwrap();
    let (logits, _) = model.forward_segment(&mut g, &carry, &segs[0]).unwrap();
    let w: Vec<f64> = segs[0].weights.clone();
    let loss = g.cross_entropy(logits, &segs[0].targets, &w).unwrap();
    assert_eq!(seq_loss, g.value(loss).item());
}

#[test]
fn overlong_segment_and_empty_sequence_are_rejected() {
    let model = Model::<f32>::new(small(Variant::Rmt), 0).unwrap();
    let mut g = Graph::new();
    assert!(model.forward_sequence(&mut g, &[], None).is_err());
    let long = random_segments(0, 1, &[10]);
    assert!(model.forward_sequence(&mut g, &long, None).is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    for variant in Variant::ALL {
        let mut model = Model::<f32>::new(small(variant), 13).unwrap();
        let mut opt = AdamState::new(model.params());
        // one step so optimizer moments are non-trivial
        let segs = random_segments(14, 2, &[5, 5]);
        let mut g = Graph::new();
        let out = model.forward_sequence(&mut g, &segs, None).unwrap();
        let grads = g.backward(out.loss.unwrap()).unwrap();
        g.accumulate_param_grads(&grads, model.params_mut());
        adam_step(model.params_mut(), &mut opt, &AdamConfig::default(), 1e-3).unwrap();
        let snap = out.carry.snapshot(&g);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let extra = serde_json::json!({"stage": 3});
        save_checkpoint(&path, &model, Some(&opt), Some(&snap), &extra).unwrap();
        let back = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(all_logits(&model, &segs), all_logits(&back.model, &segs));
        assert_eq!(back.optimizer.unwrap(), opt);
        assert_eq!(back.carry.unwrap(), snap);
        assert_eq!(back.extra, extra);
    }
}

#[test]
fn checkpoint_rejects_mismatches() {
    let model = Model::<f32>::new(small(Variant::Armt), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &model, None, None, &serde_json::Value::Null).unwrap();

    let wrong_vocab = ModelConfig {
        vocab: 32,
        ..small(Variant::Armt)
    };
    let err = load_checkpoint_matching::<f32>(&path, &wrong_vocab).err().unwrap().to_string();
    assert!(err.contains("vocab"), "{err}");
    assert!(load_checkpoint::<f64>(&path).is_err(), "precision mismatch must be rejected");

    let mut bytes = encode_checkpoint(&model, None, None, &serde_json::Value::Null).unwrap();
    bytes[8] = 99;
    assert!(decode_checkpoint::<f32>(&bytes).is_err(), "unknown format version");
    let bytes = encode_checkpoint(&model, None, None, &serde_json::Value::Null).unwrap();
    assert!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn forward_is_deterministic() {
    let a = Model::<f32>::new(small(Variant::Armt), 21).unwrap();
    let b = Model::<f32>::new(small(Variant::Armt), 21).unwrap();
    let segs = random_segments(22, 2, &[9, 9, 3]);
    assert_eq!(all_logits(&a, &segs), all_logits(&b, &segs));
}

#[test]
fn recurrent_float_counts() {
    let base = |v| ModelConfig::new(v);
    assert_eq!(base(Variant::Rmt).recurrent_floats(), 1280);
    assert_eq!(base(Variant::Armt).recurrent_floats(), 30464);
    assert_eq!(base(Variant::Prmt).recurrent_floats(), 5120);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn carry_size_ordering(layers in 2usize..6, heads in 1usize..4, mem in 1usize..16, d_mem in 1usize..16, d_val in 1usize..16, nu in 1usize..4) {
        let cfg = |variant| ModelConfig {
            layers,
            hidden: 8 * heads,
            heads,
            mem_tokens: mem,
            d_mem,
            d_val,
            feature_map: FeatureMapSpec::Dpfp { nu },
            ..ModelConfig::new(variant)
        };
        let (r, p, a) = (cfg(Variant::Rmt), cfg(Variant::Prmt), cfg(Variant::Armt));
        prop_assert!(r.recurrent_floats() < p.recurrent_floats());
        prop_assert!(p.recurrent_floats() < a.recurrent_floats());
        let d_phi = 2 * d_mem * nu;
        prop_assert_eq!(a.recurrent_floats(), layers * (d_val * d_phi + d_phi + mem * 8 * heads));
    }
}
