//! Object-aware row modulation.
//!
//! Two signals are computed per object proposal. The dominant-object penalty
//! `exp(-λ D)` shrinks the logit amplitude of rows tied to objects that are
//! large, persistent and already heavily attended. The outlier boost `γ r`
//! applies to confident proposals whose features sit far from the running
//! scene distribution; it sharpens their rows and flattens the register decay.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{mahalanobis_diag, minmax_normalize, EmaGaussian, Matrix, MINMAX_EPSILON};

/// Raw per-proposal signals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectStats {
    pub object_id: u32,
    /// Raw size, e.g. area fraction.
    pub size: f64,
    /// Frames present (video) or token columns covered (image).
    pub persistence: f64,
    /// Fraction of the previous step's attention mass.
    pub attn_share: f64,
    /// Detector posterior.
    pub confidence: f64,
    /// Optional rarity features, used with [`RarityFeatures::Custom`].
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub feature: Vec<f64>,
}

impl ObjectStats {
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str| format!("object {}: {name}", self.object_id);
        if !(self.size >= 0.0 && self.size.is_finite()) {
            return Err(invalid(&field("size"), "must be finite and >= 0"));
        }
        if !(self.persistence >= 0.0 && self.persistence.is_finite()) {
            return Err(invalid(&field("persistence"), "must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.attn_share) {
            return Err(invalid(&field("attn_share"), "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(invalid(&field("confidence"), "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Every tunable of the penalty, the boost and the row modulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EquityParams {
    /// Dominance weights for (size, persistence, attention share).
    pub weights: [f64; 3],
    pub lambda: f64,
    pub gamma: f64,
    pub tau_p: f64,
    pub tau_r: f64,
    pub r_max: f64,
    pub alpha0: f64,
    pub sigma0: f64,
    pub alpha_floor: f64,
    /// Lower bound on the register slope; `None` means `0.1 * sigma0`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_min: Option<f64>,
    /// EMA rate of the scene density.
    pub beta: f64,
}

impl Default for EquityParams {
    fn default() -> Self {
        Self {
            weights: [0.5, 0.25, 0.25],
            lambda: 1.0,
            gamma: 0.3,
            tau_p: 0.5,
            tau_r: 1.0,
            r_max: 2.0,
            alpha0: 1.0,
            sigma0: 0.05,
            alpha_floor: 0.1,
            sigma_min: None,
            beta: 0.1,
        }
    }
}

/// Names accepted by [`EquityParams::set`].
pub const PARAM_KEYS: &[&str] = &[
    "w1",
    "w2",
    "w3",
    "lambda",
    "gamma",
    "tau_p",
    "tau_r",
    "r_max",
    "alpha0",
    "sigma0",
    "alpha_floor",
    "sigma_min",
    "beta",
];

impl EquityParams {
    /// Parameters that leave every row at `(alpha0, sigma0)`.
    pub fn identity() -> Self {
        Self {
            lambda: 0.0,
            gamma: 0.0,
            ..Self::default()
        }
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min.unwrap_or(0.1 * self.sigma0)
    }

    pub fn validate(&self) -> Result<()> {
        check_weights(&self.weights)?;
        let nonneg = [("lambda", self.lambda), ("gamma", self.gamma), ("sigma0", self.sigma0)];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(name, format!("{v} must be finite and >= 0")));
            }
        }
        let positive = [
            ("tau_r", self.tau_r),
            ("r_max", self.r_max),
            ("alpha0", self.alpha0),
            ("alpha_floor", self.alpha_floor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(name, format!("{v} must be finite and > 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.tau_p) {
            return Err(invalid("tau_p", format!("{} outside [0, 1]", self.tau_p)));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(invalid("beta", format!("{} outside (0, 1]", self.beta)));
        }
        let sigma_min = self.sigma_min();
        if !(sigma_min >= 0.0) || sigma_min > self.sigma0 {
            return Err(invalid(
                "sigma_min",
                format!("{sigma_min} must lie in [0, sigma0 = {}]", self.sigma0),
            ));
        }
        Ok(())
    }

    /// Override one field by name. Weight overrides are not renormalized.
    pub fn set(&mut self, key: &str, value: f64) -> Result<()> {
        match key {
            "w1" => self.weights[0] = value,
            "w2" => self.weights[1] = value,
            "w3" => self.weights[2] = value,
            "lambda" => self.lambda = value,
            "gamma" => self.gamma = value,
            "tau_p" => self.tau_p = value,
            "tau_r" => self.tau_r = value,
            "r_max" => self.r_max = value,
            "alpha0" => self.alpha0 = value,
            "sigma0" => self.sigma0 = value,
            "alpha_floor" => self.alpha_floor = value,
            "sigma_min" => self.sigma_min = Some(value),
            "beta" => self.beta = value,
            other => return Err(Error::UnknownParameter(other.to_string())),
        }
        Ok(())
    }
}

fn check_weights(w: &[f64; 3]) -> Result<()> {
    if w.iter().any(|&x| !(x >= 0.0)) {
        return Err(invalid("weights", format!("{w:?} must be non-negative")));
    }
    let total: f64 = w.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(invalid("weights", format!("{w:?} sum to {total}, not 1")));
    }
    Ok(())
}

/// Row (or column) to proposal assignment; `None` marks an unmapped token.
///
/// Serializes as a list of indices with `-1` for unmapped entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<i64>", into = "Vec<i64>")]
pub struct RowObjectMap {
    assignment: Vec<Option<usize>>,
}

impl RowObjectMap {
    pub fn new(assignment: Vec<Option<usize>>) -> Self {
        Self { assignment }
    }

    pub fn unmapped(n: usize) -> Self {
        Self {
            assignment: vec![None; n],
        }
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<usize> {
        self.assignment.get(i).copied().flatten()
    }

    pub fn iter(&self) -> impl Iterator<Item = Option<usize>> + '_ {
        self.assignment.iter().copied()
    }

    /// Same map padded with unmapped entries up to length `n`.
    pub fn extended(&self, n: usize) -> Self {
        let mut assignment = self.assignment.clone();
        assignment.resize(n.max(assignment.len()), None);
        Self { assignment }
    }

    /// Errors if any entry points at or beyond `num_objects`.
    pub fn check(&self, num_objects: usize) -> Result<()> {
        for (row, o) in self.assignment.iter().enumerate() {
            if let Some(object) = *o {
                if object >= num_objects {
                    return Err(Error::UnknownObject {
                        row,
                        object,
                        len: num_objects,
                    });
                }
            }
        }
        Ok(())
    }
}

impl TryFrom<Vec<i64>> for RowObjectMap {
    type Error = Error;

    fn try_from(raw: Vec<i64>) -> Result<Self> {
        let assignment = raw
            .into_iter()
            .map(|v| match v {
                -1 => Ok(None),
                v if v >= 0 => Ok(Some(v as usize)),
                v => Err(invalid("assignment", format!("{v} is neither -1 nor an index"))),
            })
            .collect::<Result<_>>()?;
        Ok(Self { assignment })
    }
}

impl From<RowObjectMap> for Vec<i64> {
    fn from(map: RowObjectMap) -> Self {
        map.assignment.into_iter().map(|o| o.map_or(-1, |v| v as i64)).collect()
    }
}

/// Per-row amplitude and register slope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowModulation {
    pub alphas: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl RowModulation {
    pub fn uniform(n: usize, alpha: f64, sigma: f64) -> Self {
        Self {
            alphas: vec![alpha; n],
            sigmas: vec![sigma; n],
        }
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }
}

/// Window-normalized (size, persistence, attention share).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedStats {
    pub size: f64,
    pub persistence: f64,
    pub attn_share: f64,
}

pub fn normalize_object_stats(window: &[ObjectStats]) -> Result<Vec<NormalizedStats>> {
    if window.is_empty() {
        return Err(Error::Empty { what: "object window" });
    }
    let column = |f: fn(&ObjectStats) -> f64| -> Result<Vec<f64>> {
        minmax_normalize(&window.iter().map(f).collect::<Vec<_>>(), MINMAX_EPSILON)
    };
    let size = column(|o| o.size)?;
    let persistence = column(|o| o.persistence)?;
    let attn = column(|o| o.attn_share)?;
    Ok((0..window.len())
        .map(|k| NormalizedStats {
            size: size[k],
            persistence: persistence[k],
            attn_share: attn[k],
        })
        .collect())
}

/// Convex combination `w₁ŝ + w₂L̂ + w₃Â`.
pub fn dominance_score(stats: &NormalizedStats, weights: &[f64; 3]) -> Result<f64> {
    check_weights(weights)?;
    Ok(weights[0] * stats.size + weights[1] * stats.persistence + weights[2] * stats.attn_share)
}

pub fn dominant_penalty(dominance: f64, lambda: f64) -> f64 {
    (-lambda * dominance).exp()
}

/// Mahalanobis distance to the scene density, divided by `tau_r` and clipped
/// to `[0, r_max]`.
pub fn rarity_score(feature: &[f64], density: &EmaGaussian, tau_r: f64, r_max: f64) -> Result<f64> {
    if !(tau_r > 0.0) {
        return Err(invalid("tau_r", "must be positive"));
    }
    let d = mahalanobis_diag(feature, density)?;
    Ok((d / tau_r).clamp(0.0, r_max))
}

/// `γ r` when `confidence ≥ τ_p`, otherwise exactly zero.
pub fn outlier_boost(rarity: f64, confidence: f64, gamma: f64, tau_p: f64) -> f64 {
    if confidence >= tau_p {
        gamma * rarity
    } else {
        0.0
    }
}

/// Applies penalties and boosts to the rows their objects are aligned with.
/// Unmapped rows keep `(alpha0, sigma0)`.
pub fn row_modulation(
    map: &RowObjectMap,
    penalties: &[f64],
    boosts: &[f64],
    params: &EquityParams,
) -> Result<RowModulation> {
    if penalties.len() != boosts.len() {
        return Err(Error::DimensionMismatch {
            what: "boosts",
            expected: penalties.len(),
            actual: boosts.len(),
        });
    }
    map.check(penalties.len())?;
    let sigma_min = params.sigma_min();
    let mut out = RowModulation::uniform(map.len(), params.alpha0, params.sigma0);
    for (i, o) in map.iter().enumerate() {
        let Some(o) = o else { continue };
        let lift = 1.0 + boosts[o];
        out.alphas[i] = (params.alpha0 * penalties[o] * lift).max(params.alpha_floor);
        out.sigmas[i] = (params.sigma0 / lift).clamp(sigma_min, params.sigma0);
    }
    Ok(out)
}

/// Total mass per column of a square attention matrix.
pub fn column_mass(attention: &Matrix) -> Vec<f64> {
    let mut mass = vec![0.0; attention.cols()];
    for i in 0..attention.rows() {
        for (m, &a) in mass.iter_mut().zip(attention.row(i)) {
            *m += a;
        }
    }
    mass
}

/// Fraction of all attention mass landing on each object's columns.
pub fn attention_share(attention: &Matrix, columns: &RowObjectMap, num_objects: usize) -> Result<Vec<f64>> {
    shares_from_column_mass(&column_mass(attention), columns, num_objects)
}

pub(crate) fn shares_from_column_mass(mass: &[f64], columns: &RowObjectMap, num_objects: usize) -> Result<Vec<f64>> {
    if columns.len() != mass.len() {
        return Err(Error::DimensionMismatch {
            what: "column map",
            expected: mass.len(),
            actual: columns.len(),
        });
    }
    columns.check(num_objects)?;
    let total: f64 = mass.iter().sum();
    if !(total > 0.0) {
        return Err(Error::ZeroMass);
    }
    let mut shares = vec![0.0; num_objects];
    for (m, o) in mass.iter().zip(columns.iter()) {
        if let Some(o) = o {
            shares[o] += m;
        }
    }
    for s in &mut shares {
        *s /= total;
    }
    Ok(shares)
}

/// Pre-routing rescale `score · w_pen · (1 + b)`.
pub fn rescale_proposals(scores: &[f64], penalties: &[f64], boosts: &[f64]) -> Result<Vec<f64>> {
    for (what, v) in [("penalties", penalties), ("boosts", boosts)] {
        if v.len() != scores.len() {
            return Err(Error::DimensionMismatch {
                what,
                expected: scores.len(),
                actual: v.len(),
            });
        }
    }
    Ok(scores
        .iter()
        .zip(penalties)
        .zip(boosts)
        .map(|((s, p), b)| s * p * (1.0 + b))
        .collect())
}

/// Where rarity features come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RarityFeatures {
    /// `[ŝ, L̂, Â, confidence]` from the current window.
    #[default]
    Statistics,
    /// Each proposal's own `feature` vector.
    Custom,
}

/// Everything derived for one window of proposals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectSignals {
    pub normalized: Vec<NormalizedStats>,
    pub dominance: Vec<f64>,
    pub penalties: Vec<f64>,
    pub rarity: Vec<f64>,
    pub boosts: Vec<f64>,
}

/// Mutable per-scene state: the EMA scene density and an operation counter.
///
/// One context belongs to one decode loop.
#[derive(Debug, Clone)]
pub struct EquityContext {
    params: EquityParams,
    density: EmaGaussian,
    features: RarityFeatures,
    ops: u64,
}

impl EquityContext {
    pub fn new(params: EquityParams) -> Result<Self> {
        Self::with_features(params, RarityFeatures::Statistics)
    }

    pub fn with_features(params: EquityParams, features: RarityFeatures) -> Result<Self> {
        params.validate()?;
        let density = EmaGaussian::new(params.beta)?;
        Ok(Self {
            params,
            density,
            features,
            ops: 0,
        })
    }

    pub fn params(&self) -> &EquityParams {
        &self.params
    }

    pub fn density(&self) -> &EmaGaussian {
        &self.density
    }

    /// Equity-side work performed so far, in per-object and per-row steps.
    pub fn ops(&self) -> u64 {
        self.ops
    }

    pub fn reset_ops(&mut self) {
        self.ops = 0;
    }

    /// Penalties and boosts for the current window. Folds the window's
    /// features into the scene density before measuring rarity.
    pub fn signals(&mut self, window: &[ObjectStats]) -> Result<ObjectSignals> {
        for o in window {
            o.validate()?;
        }
        let p = &self.params;
        let normalized = normalize_object_stats(window)?;
        self.ops += 3 * window.len() as u64;

        let mut dominance = Vec::with_capacity(window.len());
        let mut penalties = Vec::with_capacity(window.len());
        for stats in &normalized {
            let d = dominance_score(stats, &p.weights)?;
            dominance.push(d);
            penalties.push(dominant_penalty(d, p.lambda));
            self.ops += 1;
        }

        let features: Vec<Vec<f64>> = match self.features {
            RarityFeatures::Statistics => window
                .iter()
                .zip(&normalized)
                .map(|(o, n)| vec![n.size, n.persistence, n.attn_share, o.confidence])
                .collect(),
            RarityFeatures::Custom => window.iter().map(|o| o.feature.clone()).collect(),
        };
        for f in &features {
            self.density.observe(f)?;
            self.ops += 1;
        }

        let mut rarity = Vec::with_capacity(window.len());
        let mut boosts = Vec::with_capacity(window.len());
        for (o, f) in window.iter().zip(&features) {
            let r = rarity_score(f, &self.density, p.tau_r, p.r_max)?;
            rarity.push(r);
            boosts.push(outlier_boost(r, o.confidence, p.gamma, p.tau_p));
            self.ops += 1;
        }

        Ok(ObjectSignals {
            normalized,
            dominance,
            penalties,
            rarity,
            boosts,
        })
    }

    pub fn modulation(&mut self, map: &RowObjectMap, signals: &ObjectSignals) -> Result<RowModulation> {
        self.ops += map.len() as u64;
        row_modulation(map, &signals.penalties, &signals.boosts, &self.params)
    }

    /// Per-object shares from precomputed column masses.
    pub fn shares(&mut self, column_mass: &[f64], columns: &RowObjectMap, num_objects: usize) -> Result<Vec<f64>> {
        self.ops += (column_mass.len() + num_objects) as u64;
        shares_from_column_mass(column_mass, columns, num_objects)
    }

    pub fn rescale_proposals(&mut self, scores: &[f64], signals: &ObjectSignals) -> Result<Vec<f64>> {
        self.ops += scores.len() as u64;
        rescale_proposals(scores, &signals.penalties, &signals.boosts)
    }
}
