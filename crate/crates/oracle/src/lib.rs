//! Slow, obviously-correct reference implementations.
//!
//! Nothing here shares code with `equity-attn`: matrices are plain nested
//! vectors, sums use Neumaier compensation and every index is looped
//! explicitly. Use it to cross-check, never in a hot path.

#![allow(clippy::needless_range_loop)]

/// Reference result: final attention rows and per-row absorbed mass.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub attention: Vec<Vec<f64>>,
    pub absorbed_mass: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OracleError {
    Shape(String),
    NonFinite,
    NegativeSlope,
}

/// Compensated (Neumaier) sum.
pub fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut carry = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

fn check_square(scores: &[Vec<f64>]) -> Result<usize, OracleError> {
    let n = scores.len();
    if n == 0 {
        return Err(OracleError::Shape("empty score matrix".into()));
    }
    for row in scores {
        if row.len() != n {
            return Err(OracleError::Shape(format!("row of length {} in {n}x{n}", row.len())));
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(OracleError::NonFinite);
        }
    }
    Ok(n)
}

/// Triple-loop register attention.
///
/// For each row: logits are `alpha * s` on the causal side and `-(j-i) sigma`
/// above the diagonal, probabilities come from an explicit max-shifted
/// exponential, future probabilities are summed into the absorbed mass and
/// then zeroed.
pub fn naive_compose_attention(scores: &[Vec<f64>], alphas: &[f64], sigmas: &[f64]) -> Result<Reference, OracleError> {
    let n = check_square(scores)?;
    if alphas.len() != n || sigmas.len() != n {
        return Err(OracleError::Shape("alpha/sigma length".into()));
    }
    if alphas.iter().chain(sigmas).any(|x| !x.is_finite()) {
        return Err(OracleError::NonFinite);
    }
    if sigmas.iter().any(|&s| s < 0.0) {
        return Err(OracleError::NegativeSlope);
    }

    let mut attention = vec![vec![0.0; n]; n];
    let mut absorbed_mass = vec![0.0; n];
    for i in 0..n {
        let mut logits = vec![0.0; n];
        for j in 0..n {
            logits[j] = if j <= i {
                alphas[i] * scores[i][j]
            } else {
                -((j - i) as f64) * sigmas[i]
            };
        }
        let mut max = logits[0];
        for j in 1..n {
            if logits[j] > max {
                max = logits[j];
            }
        }
        let mut weights = vec![0.0; n];
        for j in 0..n {
            weights[j] = (logits[j] - max).exp();
        }
        let z = neumaier_sum(weights.iter().copied());
        let mut kept = Vec::with_capacity(i + 1);
        for j in 0..n {
            let p = weights[j] / z;
            if j <= i {
                attention[i][j] = p;
                kept.push(p);
            }
        }
        absorbed_mass[i] = 1.0 - neumaier_sum(kept);
    }
    Ok(Reference {
        attention,
        absorbed_mass,
    })
}

/// Standard causal softmax: future positions are excluded outright.
pub fn vanilla_causal_attention(scores: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, OracleError> {
    let n = check_square(scores)?;
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| if j <= i { scores[i][j] } else { f64::NEG_INFINITY })
            .collect();
        let max = logits[..=i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let z = neumaier_sum(weights.iter().copied());
        for j in 0..n {
            out[i][j] = weights[j] / z;
        }
    }
    Ok(out)
}

/// Plain two-loop column mass fraction per object; `-1` marks unowned columns.
pub fn naive_attention_share(attention: &[Vec<f64>], owners: &[i64], num_objects: usize) -> Vec<f64> {
    let total = neumaier_sum(attention.iter().flatten().copied());
    (0..num_objects)
        .map(|o| {
            let mut mass = Vec::new();
            for row in attention {
                for (j, &a) in row.iter().enumerate() {
                    if owners[j] == o as i64 {
                        mass.push(a);
                    }
                }
            }
            neumaier_sum(mass) / total
        })
        .collect()
}
