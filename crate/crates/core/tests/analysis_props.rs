use mdlab::analysis::attention::{far_tercile_mean, far_tercile_start, records_from_matrices};
use mdlab::analysis::{
    attention_by_distance, attention_mass_per_step, distinct_n, frequency_decomposition, lexical, pca_trajectory,
    relative_attention_change, AttentionRecord, DistanceBins, TokenClass,
};
use mdlab::model::{Model, ModelSpec, Weights};
use mdlab::numkit::{norm, Matrix};
use mdlab::oracle::distinct_n_set;
use mdlab::prior::vocab_mean;
use mdlab::rope::{relative_score, scale_factors, RopeScalerSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use TokenClass::{Committed, Mask, Prompt, Visual};

fn uniform(j: usize) -> Matrix<f32> {
    Matrix::from_fn(j, j, |_, _| 1.0 / j as f32)
}

#[test]
fn band_contributions_sum_to_the_full_score() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let t = scale_factors(64, &RopeScalerSpec::monotonic(0.1, 8.0, 0.6)).unwrap();
    for _ in 0..1000 {
        let q: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = rng.random_range(0..4096);
        let n = rng.random_range(0..4096);
        let bands = rng.random_range(0..3);
        let n_bands = [2, 4, 8][bands];
        let parts = frequency_decomposition(&q, &k, m, n, &t, n_bands).unwrap();
        let full = relative_score(&q, &k, m, n, &t).unwrap();
        assert!((parts.iter().sum::<f64>() - full).abs() <= 1e-5);
    }
}

#[test]
fn uneven_band_split_rejected() {
    let t = scale_factors(8, &RopeScalerSpec::identity()).unwrap();
    assert!(frequency_decomposition(&[0.0f64; 8], &[0.0f64; 8], 0, 0, &t, 3).is_err());
}

proptest! {
    #[test]
    fn distinct_n_matches_set_oracle(tokens in prop::collection::vec(0u32..6, 3..40), n in 1usize..=3) {
        prop_assert_eq!(distinct_n(&tokens, n).unwrap(), distinct_n_set(&tokens, n));
    }
}

#[test]
fn lexical_marks_short_sequences() {
    let l = lexical(&[5, 5]);
    assert_eq!(l.distinct1, Some(0.5));
    assert_eq!(l.distinct2, Some(1.0));
    assert_eq!(l.distinct3, None);
    assert_eq!(l.repetition_ratio, Some(1.0));
}

#[test]
fn uniform_attention_gives_one_over_n_in_every_bin() {
    let j = 6;
    let classes = [Visual, Visual, Prompt, Committed, Mask, Mask];
    let att = vec![vec![uniform(j); 2]; 3];
    let recs: Vec<AttentionRecord> = records_from_matrices(1, &att, &classes).collect();
    assert_eq!(recs.len(), 3 * 2 * j * j);
    let bins = DistanceBins::covering(j - 1);
    let rows = attention_by_distance(&recs, &bins).unwrap();
    assert_eq!(rows.len(), bins.len() * 16);
    for r in rows.iter().filter(|r| r.count > 0) {
        assert!((r.mean - 1.0 / j as f64).abs() < 1e-7, "{r:?}");
    }
}

#[test]
fn four_position_bins_by_hand() {
    // Sources 2 and 3 (masks) attend to [visual, prompt, mask, mask].
    let classes = [Visual, Prompt, Mask, Mask];
    let m = Matrix::from_rows(&[
        vec![1.0f32, 0.0, 0.0, 0.0],
        vec![0.5, 0.5, 0.0, 0.0],
        vec![0.1, 0.2, 0.3, 0.4],
        vec![0.4, 0.3, 0.2, 0.1],
    ])
    .unwrap();
    let recs: Vec<AttentionRecord> = records_from_matrices(1, &[vec![m]], &classes).collect();
    let rows = attention_by_distance(&recs, &DistanceBins::covering(3)).unwrap();
    let cell = |b: usize, s: TokenClass, t: TokenClass| rows.iter().find(|r| r.bin == b && r.src == s && r.tgt == t).unwrap();
    // mask -> mask at distance 0: (0.3 + 0.1) / 2
    assert!((cell(0, Mask, Mask).mean - 0.2).abs() < 1e-7);
    // mask -> mask at distance 1: (0.4 + 0.2) / 2
    assert!((cell(1, Mask, Mask).mean - 0.3).abs() < 1e-7);
    // mask -> visual at distance 2 is only source 2; distance 3 only source 3
    assert!((cell(2, Mask, Visual).mean - 0.1).abs() < 1e-7);
    assert!((cell(3, Mask, Visual).mean - 0.4).abs() < 1e-7);
    assert_eq!(cell(3, Mask, Visual).count, 1);
    assert_eq!(cell(3, Mask, Prompt).count, 0);

    // Far tercile over mask -> visual distances {2, 3}: starts at ⌈2·3/3⌉ = 2.
    assert_eq!(far_tercile_start(3), 2);
    assert!((far_tercile_mean(&recs, Visual).unwrap() - 0.25).abs() < 1e-7);
}

#[test]
fn mass_sums_to_one_and_vanishes_without_masks() {
    let classes = [Visual, Prompt, Mask, Committed, Mask];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut m = Matrix::<f32>::zeros(5, 5);
    for r in 0..5 {
        let w: Vec<f32> = (0..5).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f32 = w.iter().sum();
        m.row_mut(r).iter_mut().zip(&w).for_each(|(o, x)| *o = x / s);
    }
    let recs: Vec<AttentionRecord> = records_from_matrices(2, &[vec![m.clone(), uniform(5)]], &classes).collect();
    let mass = attention_mass_per_step(&recs);
    assert_eq!(mass.len(), 4);
    assert!((mass.iter().map(|r| r.mean_mass).sum::<f64>() - 1.0).abs() < 1e-6);

    let done = [Visual, Prompt, Committed, Committed, Committed];
    let recs: Vec<AttentionRecord> = records_from_matrices(8, &[vec![m]], &done).collect();
    let mass = attention_mass_per_step(&recs);
    assert_eq!(mass.iter().find(|r| r.tgt == Mask).unwrap().mean_mass, 0.0);
}

#[test]
fn relative_change_of_doubled_attention() {
    let classes = [Visual, Mask, Mask];
    let base = Matrix::from_fn(3, 3, |_, _| 0.25f32);
    let twice = Matrix::from_fn(3, 3, |_, _| 0.5f32);
    let bins = DistanceBins::covering(2);
    let a: Vec<AttentionRecord> = records_from_matrices(1, &[vec![base.clone()]], &classes).collect();
    let b: Vec<AttentionRecord> = records_from_matrices(1, &[vec![twice]], &classes).collect();
    let ta = attention_by_distance(&a, &bins).unwrap();
    let tb = attention_by_distance(&b, &bins).unwrap();
    let change = relative_attention_change(&ta, &tb).unwrap();
    for c in &change {
        match ta.iter().find(|r| (r.bin, r.src, r.tgt) == (c.bin, c.src, c.tgt)).unwrap().count {
            0 => assert_eq!(c.relative_change, None),
            _ => assert!((c.relative_change.unwrap() - 1.0).abs() < 1e-7),
        }
    }
    let same = relative_attention_change(&ta, &ta).unwrap();
    assert!(same.iter().flat_map(|c| c.relative_change).all(|x| x == 0.0));
}

#[test]
fn records_outside_the_bins_are_errors() {
    let classes = [Visual, Mask, Mask];
    let recs: Vec<AttentionRecord> = records_from_matrices(1, &[vec![uniform(3)]], &classes).collect();
    assert!(attention_by_distance(&recs, &DistanceBins::covering(1)).is_err());
    assert!(attention_by_distance(&[], &DistanceBins::covering(1)).is_err());
}

#[test]
fn trajectory_has_two_rows_per_layer_and_never_expands() {
    let spec = ModelSpec::default();
    let model = Model::new(spec.clone(), Weights::<f32>::init(&spec, 5)).unwrap();
    let prior = vocab_mean(&model).unwrap();
    let tr = pca_trajectory(&model, &RopeScalerSpec::identity(), &prior).unwrap();
    assert_eq!(tr.rows.len(), 2 * spec.n_layers);
    assert_eq!(tr.rows.iter().filter(|r| r.source == "mask").count(), spec.n_layers);
    for (i, row) in tr.rows.iter().enumerate() {
        let centered: Vec<f64> = tr.states.row(i).iter().zip(&tr.pca.mean).map(|(a, b)| a - b).collect();
        assert!(norm(&row.coords) <= norm(&centered) + 1e-9);
    }
}
