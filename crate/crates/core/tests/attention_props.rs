use lintransfer::attention::{
    hedgehog_feature_map, kernel_quadratic_attention, linear_attention, mixed_attention, orthogonal_hedgehog,
    softmax_attention, AttentionParams, SelectionScore, SimilarityScale,
};
use lintransfer::parallel::set_parallel;
use lintransfer::DenseArray;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Case {
    q: DenseArray<f64>,
    k: DenseArray<f64>,
    v: DenseArray<f64>,
    hq: DenseArray<f64>,
    hk: DenseArray<f64>,
}

fn case(n: usize, half: usize, scale: f64, seed: u64) -> Case {
    let d = 2 * half;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Case {
        q: DenseArray::randn(&[n, d], scale, &mut rng),
        k: DenseArray::randn(&[n, d], scale, &mut rng),
        v: DenseArray::randn(&[n, d], 1.0, &mut rng),
        hq: orthogonal_hedgehog(d, 1.0, &mut rng).unwrap(),
        hk: orthogonal_hedgehog(d, 1.0, &mut rng).unwrap(),
    }
}

impl Case {
    fn mixed(&self, r: f64) -> DenseArray<f64> {
        let d = self.q.last_dim();
        let params = AttentionParams {
            wq: DenseArray::zeros(&[d, d]),
            wk: DenseArray::zeros(&[d, d]),
            wv: DenseArray::zeros(&[d, d]),
            hq: self.hq.clone(),
            hk: self.hk.clone(),
        };
        mixed_attention(&self.q, &self.k, &self.v, &params, SelectionScore::new(r, 0), SimilarityScale::SqrtDim).unwrap()
    }
}

/// Each output entry lies between the smallest and largest value of its column.
/// With `include_zero`, the range is widened to contain 0.
fn assert_convex(o: &DenseArray<f64>, v: &DenseArray<f64>, include_zero: bool) {
    let d = v.last_dim();
    for c in 0..d {
        let col: Vec<f64> = (0..v.rows()).map(|j| v.row(j)[c]).collect();
        let mut lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let mut hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if include_zero {
            lo = lo.min(0.0);
            hi = hi.max(0.0);
        }
        for i in 0..o.rows() {
            let x = o.row(i)[c];
            assert!(x >= lo - 1e-9 && x <= hi + 1e-9, "{x} outside [{lo}, {hi}]");
        }
    }
}

fn permute_rows(a: &DenseArray<f64>, perm: &[usize]) -> DenseArray<f64> {
    DenseArray::new(a.shape(), perm.iter().flat_map(|&j| a.row(j).to_vec()).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn linear_matches_pairwise_form_at_64_bits(n in 1usize..40, half in 1usize..6, scale in 0.1f64..3.0, seed in any::<u64>()) {
        let c = case(n, half, scale, seed);
        let a = linear_attention(&c.q, &c.k, &c.v, &c.hq, &c.hk).unwrap();
        let b = kernel_quadratic_attention(&c.q, &c.k, &c.v, &c.hq, &c.hk).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-10 * c.v.max_abs().max(1.0));
    }

    #[test]
    fn outputs_are_convex_combinations(n in 1usize..30, half in 1usize..5, scale in 0.1f64..3.0, seed in any::<u64>()) {
        let c = case(n, half, scale, seed);
        assert_convex(&softmax_attention(&c.q, &c.k, &c.v, SimilarityScale::SqrtDim).unwrap(), &c.v, false);
        // the ε in the linear normaliser only shrinks outputs towards zero
        assert_convex(&linear_attention(&c.q, &c.k, &c.v, &c.hq, &c.hk).unwrap(), &c.v, true);
    }

    #[test]
    fn key_order_does_not_matter(n in 2usize..25, half in 1usize..5, seed in any::<u64>()) {
        let c = case(n, half, 1.0, seed);
        let perm: Vec<usize> = (0..n).rev().collect();
        let (k, v) = (permute_rows(&c.k, &perm), permute_rows(&c.v, &perm));
        let tol = 1e-12 * c.v.max_abs().max(1.0);
        let a = softmax_attention(&c.q, &c.k, &c.v, SimilarityScale::SqrtDim).unwrap();
        let b = softmax_attention(&c.q, &k, &v, SimilarityScale::SqrtDim).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() <= tol);
        let a = linear_attention(&c.q, &c.k, &c.v, &c.hq, &c.hk).unwrap();
        let b = linear_attention(&c.q, &k, &v, &c.hq, &c.hk).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() <= tol);
    }

    #[test]
    fn feature_rows_are_positive_and_sum_to_two(n in 1usize..50, half in 1usize..10, scale in 0.0f64..20.0, seed in any::<u64>()) {
        let c = case(n, half, scale, seed);
        let phi = hedgehog_feature_map(&c.q, &c.hq).unwrap();
        for i in 0..n {
            let row = phi.row(i);
            prop_assert!(row.iter().all(|&x| x > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mixed_attention_interpolates(n in 1usize..20, half in 1usize..4, r in 0.0f64..=1.0, seed in any::<u64>()) {
        let c = case(n, half, 1.0, seed);
        let soft = softmax_attention(&c.q, &c.k, &c.v, SimilarityScale::SqrtDim).unwrap();
        let lin = linear_attention(&c.q, &c.k, &c.v, &c.hq, &c.hk).unwrap();
        let expected = soft.scale(r).add(&lin.scale(1.0 - r)).unwrap();
        prop_assert!(c.mixed(r).max_abs_diff(&expected).unwrap() < 1e-12);
        // scores outside the box act as their clipped value
        prop_assert_eq!(c.mixed(1.0 + r), soft);
        prop_assert_eq!(c.mixed(-r), lin);
    }
}

#[test]
fn mixed_endpoints_are_exact() {
    let c = case(17, 3, 1.0, 7);
    let soft = softmax_attention(&c.q, &c.k, &c.v, SimilarityScale::SqrtDim).unwrap();
    let lin = linear_attention(&c.q, &c.k, &c.v, &c.hq, &c.hk).unwrap();
    assert_eq!(c.mixed(1.0), soft);
    assert_eq!(c.mixed(0.0), lin);
}

#[test]
fn parallel_and_sequential_agree_bitwise() {
    let c = case(700, 16, 1.0, 3);
    let run = || {
        (
            softmax_attention(&c.q, &c.k, &c.v, SimilarityScale::SqrtDim).unwrap(),
            linear_attention(&c.q, &c.k, &c.v, &c.hq, &c.hk).unwrap(),
            hedgehog_feature_map(&c.k, &c.hk).unwrap(),
        )
    };
    let par = run();
    set_parallel(false);
    let seq = run();
    set_parallel(true);
    assert_eq!(par, seq);
}

#[test]
fn rejects_odd_width_and_mismatched_maps() {
    let c = case(4, 2, 1.0, 1);
    let odd = DenseArray::<f64>::zeros(&[4, 3]);
    assert!(hedgehog_feature_map(&odd, &c.hq).is_err());
    let wrong = DenseArray::<f64>::zeros(&[4, 4]);
    assert!(linear_attention(&c.q, &c.k, &c.v, &wrong, &c.hk).is_err());
}
