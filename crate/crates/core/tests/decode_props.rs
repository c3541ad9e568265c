use mdlab::decode::{decode, quotas, DecodeConfig, Interventions};
use mdlab::model::{forward, Model, ModelSpec, SequenceLayout, Weights};
use mdlab::oracle::argmax_excluding;
use mdlab::prior::{build_subspace, vocab_mean, SuppressionSpec};
use mdlab::rope::RopeScalerSpec;
use proptest::prelude::*;

fn model(seed: u64) -> Model<f32> {
    let spec = ModelSpec::default();
    Model::new(spec.clone(), Weights::init(&spec, seed)).unwrap()
}

fn layout(spec: &ModelSpec, gen_len: usize, salt: f32) -> SequenceLayout {
    let visual = (0..4)
        .map(|i| (0..spec.d_vis).map(|c| ((i * 7 + c) as f32 * 0.37 + salt).sin()).collect())
        .collect();
    SequenceLayout::masked(visual, vec![3, 4, 5, 6], gen_len, spec.mask_id)
}

proptest! {
    #[test]
    fn quotas_sum_to_length(l in 1usize..200, t in 1usize..200) {
        prop_assume!(t <= l);
        let q = quotas(l, t).unwrap();
        prop_assert_eq!(q.len(), t);
        prop_assert_eq!(q.iter().sum::<usize>(), l);
        prop_assert!(q.iter().all(|&x| x == l / t || x == l / t + 1));
        prop_assert!(q.windows(2).all(|w| w[0] >= w[1]));
    }
}

#[test]
fn quotas_example_and_bounds() {
    assert_eq!(quotas(10, 4).unwrap(), vec![3, 3, 2, 2]);
    assert!(quotas(4, 5).is_err());
    assert!(quotas(4, 0).is_err());
}

#[test]
fn committed_tokens_never_change() {
    let m = model(2);
    for steps in [1, 4, 8, 32] {
        let cfg = DecodeConfig { steps, ..Default::default() };
        let tr = decode(&layout(&m.spec, 32, 0.0), &m, &cfg, Interventions::default()).unwrap();
        assert_eq!(tr.steps.len(), steps);
        let q = quotas(32, steps).unwrap();
        let mut seen = std::collections::BTreeMap::new();
        for (rec, &quota) in tr.steps.iter().zip(&q) {
            assert_eq!(rec.committed.len(), quota);
            for (&p, &t) in &seen {
                assert_eq!(rec.tokens_before[p], t, "position {p} changed at step {}", rec.step);
            }
            for (&p, &t) in &rec.committed {
                assert!(rec.masked_before.contains(&p));
                assert_ne!(t, m.spec.mask_id);
                seen.insert(p, t);
            }
        }
        for (&p, &t) in &seen {
            assert_eq!(tr.tokens[p], t);
        }
        assert!(tr.tokens.iter().all(|&t| t != m.spec.mask_id));
    }
}

#[test]
fn single_step_is_per_position_argmax() {
    let m = model(3);
    let lay = layout(&m.spec, 16, 0.5);
    let cfg = DecodeConfig { gen_len: 16, steps: 1, ..Default::default() };
    let tr = decode(&lay, &m, &cfg, Interventions::default()).unwrap();
    let f = forward(&m, &lay, &RopeScalerSpec::identity(), None).unwrap();
    let start = lay.generation_span().start;
    for i in 0..16 {
        assert_eq!(tr.tokens[i], argmax_excluding(f.logits.row(start + i), m.spec.mask_id));
    }
}

#[test]
fn zero_strength_interventions_are_byte_identical() {
    let m = model(4);
    let e = vocab_mean(&m).unwrap();
    let sub = build_subspace(&e, &m, &RopeScalerSpec::identity(), 3).unwrap();
    let lay = layout(&m.spec, 32, 1.0);
    let cfg = DecodeConfig::default();
    let base = decode(&lay, &m, &cfg, Interventions::default()).unwrap().to_jsonl();

    let scaler = RopeScalerSpec::monotonic(0.0, 8.0, 0.6);
    let spec = SuppressionSpec::final_only(0.0);
    let layered = SuppressionSpec { lambda: 0.0, layers: vec![1, 2, 3, 4], ..SuppressionSpec::default() };
    for iv in [
        Interventions { scaler: Some(&scaler), suppression: None },
        Interventions { scaler: None, suppression: Some((&spec, &sub)) },
        Interventions { scaler: Some(&scaler), suppression: Some((&layered, &sub)) },
    ] {
        assert_eq!(decode(&lay, &m, &cfg, iv).unwrap().to_jsonl(), base);
    }
}

#[test]
fn decoding_is_deterministic() {
    let m = model(6);
    let lay = layout(&m.spec, 32, 2.0);
    let cfg = DecodeConfig::default();
    let a = decode(&lay, &m, &cfg, Interventions::default()).unwrap();
    let b = decode(&lay, &m, &cfg, Interventions::default()).unwrap();
    assert_eq!(a.to_jsonl(), b.to_jsonl());
}

#[test]
fn partially_masked_start_rejected() {
    let m = model(1);
    let mut lay = layout(&m.spec, 8, 0.0);
    lay.generation[3] = 7;
    let cfg = DecodeConfig { gen_len: 8, steps: 2, ..Default::default() };
    assert!(decode(&lay, &m, &cfg, Interventions::default()).is_err());
}
