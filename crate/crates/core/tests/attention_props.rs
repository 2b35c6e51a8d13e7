use equity_attn::{compose_attention, AttentionInputs, Matrix};
use equity_attn_oracle::naive_compose_attention;
use proptest::prelude::*;

fn inputs(max_n: usize) -> impl Strategy<Value = AttentionInputs> {
    (1..=max_n).prop_flat_map(|n| {
        (
            prop::collection::vec(-20.0..20.0f64, n * n),
            prop::collection::vec(0.0..3.0f64, n),
            prop::collection::vec(0.0..10.0f64, n),
        )
            .prop_map(move |(s, a, g)| AttentionInputs::new(Matrix::new(n, n, s).unwrap(), a, g).unwrap())
    })
}

proptest! {
    #[test]
    fn future_entries_are_bit_zero(inp in inputs(24)) {
        let r = compose_attention(&inp).unwrap();
        for i in 0..inp.len() {
            for j in i + 1..inp.len() {
                prop_assert_eq!(r.attention[(i, j)].to_bits(), 0);
            }
        }
    }

    #[test]
    fn last_row_sums_to_one(inp in inputs(24)) {
        let r = compose_attention(&inp).unwrap();
        let n = inp.len();
        let sum: f64 = r.attention.row(n - 1).iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
        prop_assert!(r.absorbed_mass[n - 1].abs() <= 1e-12);
    }

    #[test]
    fn kept_plus_absorbed_is_one(inp in inputs(24)) {
        let r = compose_attention(&inp).unwrap();
        for i in 0..inp.len() {
            let kept: f64 = r.attention.row(i).iter().sum();
            prop_assert!((kept + r.absorbed_mass[i] - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn matches_oracle(inp in inputs(32)) {
        let fast = compose_attention(&inp).unwrap();
        let slow = naive_compose_attention(&inp.scores().to_rows(), inp.alphas(), inp.sigmas()).unwrap();
        let slow_a = Matrix::from_rows(&slow.attention).unwrap();
        prop_assert!(fast.attention.max_abs_diff(&slow_a).unwrap() <= 1e-10);
        for (a, b) in fast.absorbed_mass.iter().zip(&slow.absorbed_mass) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn absorbed_mass_decreases_down_the_rows(n in 2usize..40, sigma in 0.01..5.0f64) {
        let inp = AttentionInputs::uniform(Matrix::zeros(n, n), sigma).unwrap();
        let r = compose_attention(&inp).unwrap();
        for i in 1..n {
            prop_assert!(r.absorbed_mass[i] < r.absorbed_mass[i - 1]);
        }
        prop_assert_eq!(r.absorbed_mass[n - 1], 0.0);
    }

    #[test]
    fn valid_mass_non_decreasing_in_sigma(
        inp in inputs(16),
        pair in (0.0..5.0f64, 0.0..5.0f64),
    ) {
        let (lo, hi) = if pair.0 <= pair.1 { pair } else { (pair.1, pair.0) };
        let n = inp.len();
        let at = |s: f64| {
            let i = AttentionInputs::new(inp.scores().clone(), inp.alphas().to_vec(), vec![s; n]).unwrap();
            compose_attention(&i).unwrap()
        };
        let (a, b) = (at(lo), at(hi));
        for i in 0..n {
            let (ma, mb): (f64, f64) = (a.attention.row(i).iter().sum(), b.attention.row(i).iter().sum());
            prop_assert!(mb >= ma - 1e-15, "row {} mass {} -> {}", i, ma, mb);
        }
    }
}
