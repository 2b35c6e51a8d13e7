//! Causal attention with an upper-triangular decay register.
//!
//! Row `i` of the logit matrix holds the amplitude-scaled scores `α_i S_ij`
//! for `j ≤ i` and the register values `-(j - i) σ_i` for `j > i`. After the
//! row softmax the future slots are masked out again, so whatever mass they
//! captured is simply dropped from the row. That dropped mass is reported as
//! `absorbed_mass`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{check_finite, softmax_in_place, Matrix};

/// Raw scores plus the per-row amplitude and register slope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawAttentionInputs")]
pub struct AttentionInputs {
    scores: Matrix,
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
}

#[derive(Deserialize)]
struct RawAttentionInputs {
    scores: Matrix,
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
}

impl TryFrom<RawAttentionInputs> for AttentionInputs {
    type Error = Error;

    fn try_from(raw: RawAttentionInputs) -> Result<Self> {
        AttentionInputs::new(raw.scores, raw.alphas, raw.sigmas)
    }
}

impl AttentionInputs {
    pub fn new(scores: Matrix, alphas: Vec<f64>, sigmas: Vec<f64>) -> Result<Self> {
        if !scores.is_square() {
            return Err(Error::DimensionMismatch {
                what: "score matrix columns",
                expected: scores.rows(),
                actual: scores.cols(),
            });
        }
        let n = scores.rows();
        for (what, v) in [("alphas", &alphas), ("sigmas", &sigmas)] {
            if v.len() != n {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: n,
                    actual: v.len(),
                });
            }
            check_finite(what, v)?;
        }
        check_sigmas(&sigmas)?;
        Ok(Self { scores, alphas, sigmas })
    }

    /// Unit amplitudes and a shared slope for every row.
    pub fn uniform(scores: Matrix, sigma: f64) -> Result<Self> {
        let n = scores.rows();
        Self::new(scores, vec![1.0; n], vec![sigma; n])
    }

    pub fn len(&self) -> usize {
        self.scores.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn scores(&self) -> &Matrix {
        &self.scores
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }
}

/// Final masked attention and the mass each row lost to its register slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionResult {
    pub attention: Matrix,
    pub absorbed_mass: Vec<f64>,
}

impl AttentionResult {
    /// Elementwise mean of several results of the same size.
    pub fn mean(results: &[AttentionResult]) -> Result<AttentionResult> {
        let first = results.first().ok_or(Error::Empty {
            what: "attention results",
        })?;
        let n = first.absorbed_mass.len();
        let mut attention = Matrix::zeros(n, n);
        let mut absorbed = vec![0.0; n];
        for r in results {
            attention.add_assign(&r.attention)?;
            if r.absorbed_mass.len() != n {
                return Err(Error::DimensionMismatch {
                    what: "absorbed mass",
                    expected: n,
                    actual: r.absorbed_mass.len(),
                });
            }
            for (a, b) in absorbed.iter_mut().zip(&r.absorbed_mass) {
                *a += b;
            }
        }
        let k = results.len() as f64;
        Ok(AttentionResult {
            attention: attention.map(|x| x / k),
            absorbed_mass: absorbed.into_iter().map(|x| x / k).collect(),
        })
    }

    pub fn mean_absorbed(&self) -> f64 {
        if self.absorbed_mass.is_empty() {
            return 0.0;
        }
        self.absorbed_mass.iter().sum::<f64>() / self.absorbed_mass.len() as f64
    }
}

fn check_sigmas(sigmas: &[f64]) -> Result<()> {
    if let Some(i) = sigmas.iter().position(|&s| !(s >= 0.0)) {
        return Err(invalid("sigmas", format!("slope {} at row {i} is negative", sigmas[i])));
    }
    Ok(())
}

/// Lower-triangular 0/1 mask, diagonal included.
pub fn build_causal_mask(n: usize) -> Result<Matrix> {
    if n == 0 {
        return Err(Error::Empty { what: "causal mask" });
    }
    let mut mask = Matrix::zeros(n, n);
    for i in 0..n {
        mask.row_mut(i)[..=i].fill(1.0);
    }
    Ok(mask)
}

/// Strictly upper-triangular register: `P[i][j] = -(j - i) σ_i` for `j > i`.
pub fn build_register(n: usize, sigmas: &[f64]) -> Result<Matrix> {
    if n == 0 {
        return Err(Error::Empty { what: "register" });
    }
    if sigmas.len() != n {
        return Err(Error::DimensionMismatch {
            what: "sigmas",
            expected: n,
            actual: sigmas.len(),
        });
    }
    check_finite("sigmas", sigmas)?;
    check_sigmas(sigmas)?;
    let mut reg = Matrix::zeros(n, n);
    for (i, &sigma) in sigmas.iter().enumerate() {
        if sigma == 0.0 {
            continue;
        }
        let row = reg.row_mut(i);
        for (j, slot) in row.iter_mut().enumerate().skip(i + 1) {
            *slot = -((j - i) as f64) * sigma;
        }
    }
    Ok(reg)
}

/// `A = softmax((diag(α) S) ⊙ C + P) ⊙ C`, without renormalizing the rows.
pub fn compose_attention(inputs: &AttentionInputs) -> Result<AttentionResult> {
    let n = inputs.len();
    let mask = build_causal_mask(n)?;
    let register = build_register(n, inputs.sigmas())?;
    let scores = inputs.scores();

    let mut attention = Matrix::zeros(n, n);
    let mut absorbed_mass = vec![0.0; n];
    for i in 0..n {
        let alpha = inputs.alphas()[i];
        let row = attention.row_mut(i);
        for (j, logit) in row.iter_mut().enumerate() {
            *logit = alpha * scores[(i, j)] * mask[(i, j)] + register[(i, j)];
        }
        if let Some(j) = row.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: "attention logits",
                index: i * n + j,
            });
        }
        softmax_in_place(row);
        absorbed_mass[i] = row[i + 1..].iter().sum::<f64>().clamp(0.0, 1.0);
        for (p, &keep) in row.iter_mut().zip(mask.row(i)) {
            *p *= keep;
        }
    }
    Ok(AttentionResult {
        attention,
        absorbed_mass,
    })
}
