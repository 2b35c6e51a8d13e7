//! Oracle equivalence and invariant checks behind the `check` subcommand.

use equity_attn::equity::outlier_boost;
use equity_attn::{compose_attention, AttentionInputs, EquityContext, EquityParams, Matrix, ObjectStats, RowObjectMap};
use equity_attn_oracle::{naive_compose_attention, vanilla_causal_attention};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn random_inputs(rng: &mut ChaCha8Rng, n: usize, sigma: Option<f64>) -> AttentionInputs {
    let scores = (0..n * n).map(|_| rng.random_range(-4.0..4.0)).collect();
    let scores = Matrix::new(n, n, scores).expect("finite");
    let alphas = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
    let sigmas = (0..n)
        .map(|_| sigma.unwrap_or_else(|| rng.random_range(0.0..3.0)))
        .collect();
    AttentionInputs::new(scores, alphas, sigmas).expect("valid inputs")
}

fn oracle_equivalence(rng: &mut ChaCha8Rng, trials: usize) -> CheckOutcome {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let n = 1 + t % 64;
        let inputs = random_inputs(rng, n, None);
        let fast = compose_attention(&inputs).expect("compose");
        let slow =
            naive_compose_attention(&inputs.scores().to_rows(), inputs.alphas(), inputs.sigmas()).expect("oracle");
        let slow_a = Matrix::from_rows(&slow.attention).expect("finite");
        worst = worst.max(fast.attention.max_abs_diff(&slow_a).expect("same shape"));
        for (a, b) in fast.absorbed_mass.iter().zip(&slow.absorbed_mass) {
            worst = worst.max((a - b).abs());
        }
    }
    CheckOutcome {
        name: "oracle-equivalence",
        passed: worst <= 1e-10,
        detail: format!("max |diff| = {worst:.3e} over {trials} inputs (tol 1e-10)"),
    }
}

fn strict_causality(rng: &mut ChaCha8Rng, trials: usize) -> CheckOutcome {
    let mut violations = 0usize;
    let mut last_row_err = 0.0f64;
    for t in 0..trials {
        let n = 1 + t % 32;
        let r = compose_attention(&random_inputs(rng, n, None)).expect("compose");
        for i in 0..n {
            violations += ((i + 1)..n).filter(|&j| r.attention[(i, j)] != 0.0).count();
        }
        let last: f64 = r.attention.row(n - 1).iter().sum();
        last_row_err = last_row_err.max((last - 1.0).abs());
    }
    CheckOutcome {
        name: "strict-causality",
        passed: violations == 0 && last_row_err <= 1e-12,
        detail: format!("{violations} nonzero future entries; last-row sum error {last_row_err:.3e}"),
    }
}

fn register_limit(rng: &mut ChaCha8Rng, trials: usize) -> CheckOutcome {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let n = 1 + t % 32;
        let mut inputs = random_inputs(rng, n, Some(1e6));
        inputs = AttentionInputs::new(inputs.scores().clone(), vec![1.0; n], vec![1e6; n]).expect("valid");
        let r = compose_attention(&inputs).expect("compose");
        let v = vanilla_causal_attention(&inputs.scores().to_rows()).expect("oracle");
        let v = Matrix::from_rows(&v).expect("finite");
        worst = worst.max(r.attention.max_abs_diff(&v).expect("same shape"));
    }
    CheckOutcome {
        name: "register-limit",
        passed: worst <= 1e-8,
        detail: format!("max |diff| vs vanilla causal softmax = {worst:.3e} (tol 1e-8)"),
    }
}

fn reservoir_monotonicity(rng: &mut ChaCha8Rng) -> CheckOutcome {
    let n = 16;
    let base = random_inputs(rng, n, Some(0.0));
    let mut previous: Option<Vec<f64>> = None;
    let mut ok = true;
    for sigma in [0.0, 0.5, 1.0, 2.0, 5.0] {
        let inputs =
            AttentionInputs::new(base.scores().clone(), base.alphas().to_vec(), vec![sigma; n]).expect("valid");
        let r = compose_attention(&inputs).expect("compose");
        let valid: Vec<f64> = (0..n).map(|i| r.attention.row(i).iter().sum()).collect();
        if let Some(prev) = &previous {
            ok &= valid.iter().zip(prev).all(|(now, before)| now >= before);
        }
        ok &= r.absorbed_mass[n - 1].abs() <= 1e-12;
        previous = Some(valid);
    }
    CheckOutcome {
        name: "reservoir-monotonicity",
        passed: ok,
        detail: "valid row mass non-decreasing over sigma in {0, 0.5, 1, 2, 5}".into(),
    }
}

fn identity_modulation(rng: &mut ChaCha8Rng) -> CheckOutcome {
    let params = EquityParams::identity();
    let mut ctx = EquityContext::new(params.clone()).expect("valid params");
    let window: Vec<ObjectStats> = (0..4)
        .map(|k| ObjectStats {
            object_id: k,
            size: rng.random_range(0.0..1.0),
            persistence: rng.random_range(1.0..40.0),
            attn_share: rng.random_range(0.0..0.25),
            confidence: rng.random_range(0.0..=1.0),
            feature: Vec::new(),
        })
        .collect();
    let n = 24;
    let map = RowObjectMap::new((0..n).map(|i| (i % 3 != 0).then_some(i % 4)).collect());
    let signals = ctx.signals(&window).expect("signals");
    let m = ctx.modulation(&map, &signals).expect("modulation");
    let ok = m.alphas.iter().all(|&a| a == params.alpha0) && m.sigmas.iter().all(|&s| s == params.sigma0);
    CheckOutcome {
        name: "equity-identity",
        passed: ok,
        detail: "lambda = gamma = 0 leaves every row at (alpha0, sigma0)".into(),
    }
}

fn boost_gate(rng: &mut ChaCha8Rng, trials: usize) -> CheckOutcome {
    let p = EquityParams::default();
    let mut leaks = 0usize;
    let mut max_boost = 0.0f64;
    for _ in 0..trials {
        let r = rng.random_range(0.0..=p.r_max);
        let conf: f64 = rng.random_range(0.0..=1.0);
        let b = outlier_boost(r, conf, p.gamma, p.tau_p);
        if conf < p.tau_p && b.to_bits() != 0 {
            leaks += 1;
        }
        max_boost = max_boost.max(b);
    }
    CheckOutcome {
        name: "boost-gate",
        passed: leaks == 0 && max_boost <= p.gamma * p.r_max,
        detail: format!(
            "{leaks} sub-threshold boosts; max boost {max_boost:.6} <= {}",
            p.gamma * p.r_max
        ),
    }
}

pub fn run_checks(seed: u64, trials: usize) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        oracle_equivalence(&mut rng, trials),
        strict_causality(&mut rng, trials),
        register_limit(&mut rng, trials),
        reservoir_monotonicity(&mut rng),
        identity_modulation(&mut rng),
        boost_gate(&mut rng, trials.max(1) * 100),
    ]
}
