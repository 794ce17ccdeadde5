mod common;

use common::{check, Op};
use proptest::prelude::*;

const TOL: f64 = 1e-6;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn fuse_queries_matches_oracle(seed in any::<u64>()) {
        prop_assert!(check(Op::FuseQueries, seed) < TOL);
    }

    #[test]
    fn styled_attention_matches_oracle(seed in any::<u64>()) {
        prop_assert!(check(Op::StyledAttention, seed) < TOL);
    }

    #[test]
    fn contrast_adjust_matches_oracle(seed in any::<u64>()) {
        prop_assert!(check(Op::ContrastAdjust, seed) < TOL);
    }

    #[test]
    fn adain_matches_oracle(seed in any::<u64>()) {
        prop_assert!(check(Op::Adain, seed) < TOL);
    }

    #[test]
    fn query_similarity_matches_oracle(seed in any::<u64>()) {
        prop_assert!(check(Op::QuerySimilarity, seed) < TOL);
    }

    #[test]
    fn dissimilarity_mask_matches_rank_oracle(seed in any::<u64>()) {
        prop_assert!(check(Op::DissimilarityMask, seed) < TOL);
    }

    #[test]
    fn compose_queries_matches_case_oracle(seed in any::<u64>()) {
        prop_assert!(check(Op::ComposeQueries, seed) < TOL);
    }
}

#[test]
fn contrast_row_worked_example() {
    let mut row = [0.7f64, 0.2, 0.1];
    illusign::attention::contrast_adjust_row(&mut row, 1.67);
    let mean: f64 = 1.0 / 3.0;
    let raw = [1.67 * (0.7 - mean) + mean, 1.67 * (0.2 - mean) + mean, f64::max(1.67 * (0.1 - mean) + mean, 0.0)];
    let s: f64 = raw.iter().sum();
    for (a, b) in row.iter().zip(raw) {
        assert!((a - b / s).abs() < 1e-12);
    }
}

#[test]
fn similarity_is_symmetric() {
    use illusign::overlay::query_similarity;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let a = common::feats(&mut rng, 2, 4, 4, 3);
    let b = common::feats(&mut rng, 2, 4, 4, 3);
    assert_eq!(query_similarity(&a, &b).unwrap().values, query_similarity(&b, &a).unwrap().values);
}
