//! Synthetic long-tail scenes and the coverage metrics scored on them.
//!
//! A scene is a set of ground-truth objects with Zipf-distributed sizes plus
//! a few small low-confidence distractor proposals. Each proposal owns a
//! contiguous block of vision-token columns sized by its area. Attention
//! collapse is simulated by a raw-score bias toward large objects' columns,
//! plus an affinity bonus between tokens of the same proposal.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{DecodeTrace, ObjectSource};
use crate::equity::{ObjectStats, RowObjectMap};
use crate::error::{invalid, Error, Result};
use crate::numerics::Matrix;

pub const SCENE_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_EMIT_THRESHOLD: f64 = 0.05;

/// Token id used for text prompt positions.
pub const TEXT_TOKEN: usize = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub num_objects: usize,
    pub num_distractors: usize,
    /// Zipf exponent `s` of the object size profile `k^-s`.
    pub zipf_exponent: f64,
    pub object_confidence: [f64; 2],
    pub distractor_confidence: [f64; 2],
    /// Vision-token columns per unit of normalized size.
    pub tokens_per_unit_size: usize,
    /// Text tokens appended after the vision tokens.
    pub prompt_tokens: usize,
    /// Score bias toward a column, scaled by its owner's relative size.
    pub dominance_bias: f64,
    /// Score bonus between tokens of the same proposal.
    pub object_affinity: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_objects: 4,
            num_distractors: 2,
            zipf_exponent: 1.5,
            object_confidence: [0.6, 0.95],
            distractor_confidence: [0.1, 0.45],
            tokens_per_unit_size: 40,
            prompt_tokens: 4,
            dominance_bias: 3.5,
            object_affinity: 6.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_objects == 0 {
            return Err(invalid("num_objects", "at least one object is required"));
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return Err(invalid("zipf_exponent", "must be finite and >= 0"));
        }
        for (name, [lo, hi]) in [
            ("object_confidence", self.object_confidence),
            ("distractor_confidence", self.distractor_confidence),
        ] {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(invalid(name, format!("[{lo}, {hi}] is not a range within [0, 1]")));
            }
        }
        if self.tokens_per_unit_size == 0 {
            return Err(invalid("tokens_per_unit_size", "must be positive"));
        }
        for (name, v) in [
            ("dominance_bias", self.dominance_bias),
            ("object_affinity", self.object_affinity),
        ] {
            if !v.is_finite() {
                return Err(invalid(name, "must be finite"));
            }
        }
        Ok(())
    }

    pub fn num_proposals(&self) -> usize {
        self.num_objects + self.num_distractors
    }
}

/// Ground truth objects, distractor proposals and their token layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub schema_version: u32,
    /// Sorted by size, largest first.
    pub objects: Vec<ObjectStats>,
    pub distractors: Vec<ObjectStats>,
    /// Owner of each vision-token column, indexing `objects ++ distractors`.
    pub column_map: RowObjectMap,
    pub prompt_tokens: usize,
    pub dominance_bias: f64,
    pub object_affinity: f64,
}

/// Raw Zipf size of the object of rank `k` (1-based).
pub fn zipf_size(rank: f64, exponent: f64) -> f64 {
    rank.powf(-exponent)
}

pub fn generate_scene(config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_obj = config.num_objects;

    let mut raw: Vec<f64> = (1..=n_obj).map(|k| zipf_size(k as f64, config.zipf_exponent)).collect();
    // distractors sit in the tail, past every real object
    for _ in 0..config.num_distractors {
        let rank = rng.random_range(n_obj as f64 + 1.0..=2.0 * n_obj as f64 + 1.0);
        raw.push(zipf_size(rank, config.zipf_exponent));
    }
    let total: f64 = raw.iter().sum();

    let mut proposals = Vec::with_capacity(raw.len());
    let mut widths = Vec::with_capacity(raw.len());
    for (k, &r) in raw.iter().enumerate() {
        let size = r / total;
        let width = ((size * config.tokens_per_unit_size as f64).round() as usize).max(1);
        let [lo, hi] = if k < n_obj {
            config.object_confidence
        } else {
            config.distractor_confidence
        };
        let confidence = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        widths.push(width);
        proposals.push(ObjectStats {
            object_id: k as u32,
            size,
            persistence: width as f64,
            attn_share: 0.0,
            confidence,
            feature: Vec::new(),
        });
    }

    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.shuffle(&mut rng);
    let mut columns = Vec::new();
    for k in order {
        columns.extend(std::iter::repeat_n(Some(k), widths[k]));
    }

    let distractors = proposals.split_off(n_obj);
    Ok(Scene {
        schema_version: SCENE_SCHEMA_VERSION,
        objects: proposals,
        distractors,
        column_map: RowObjectMap::new(columns),
        prompt_tokens: config.prompt_tokens,
        dominance_bias: config.dominance_bias,
        object_affinity: config.object_affinity,
    })
}

impl Scene {
    pub fn from_json(text: &str) -> Result<Self> {
        let scene: Scene = serde_json::from_str(text)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCENE_SCHEMA_VERSION {
            return Err(Error::Schema {
                found: self.schema_version,
                expected: SCENE_SCHEMA_VERSION,
            });
        }
        if self.objects.is_empty() {
            return Err(invalid("objects", "at least one object is required"));
        }
        for o in self.proposals() {
            o.validate()?;
        }
        let mut ids = BTreeSet::new();
        if !self.proposals().all(|o| ids.insert(o.object_id)) {
            return Err(invalid("object_id", "ids must be unique"));
        }
        self.column_map.check(self.num_proposals())?;
        for (name, v) in [
            ("dominance_bias", self.dominance_bias),
            ("object_affinity", self.object_affinity),
        ] {
            if !v.is_finite() {
                return Err(invalid(name, "must be finite"));
            }
        }
        Ok(())
    }

    /// Objects followed by distractors; positions are proposal indices.
    pub fn proposals(&self) -> impl Iterator<Item = &ObjectStats> {
        self.objects.iter().chain(&self.distractors)
    }

    pub fn proposal_ids(&self) -> Vec<u32> {
        self.proposals().map(|o| o.object_id).collect()
    }

    pub fn num_vision_tokens(&self) -> usize {
        self.column_map.len()
    }

    /// Vision tokens (one id per owning proposal) followed by text tokens.
    pub fn prompt(&self, vocab_size: usize) -> Result<Vec<usize>> {
        if self.num_proposals() + 1 > vocab_size {
            return Err(invalid(
                "vocab_size",
                format!("{vocab_size} cannot hold {} proposal tokens", self.num_proposals()),
            ));
        }
        let mut tokens: Vec<usize> = self
            .column_map
            .iter()
            .map(|o| o.map_or(TEXT_TOKEN, |k| k + 1))
            .collect();
        tokens.extend(std::iter::repeat_n(TEXT_TOKEN, self.prompt_tokens));
        Ok(tokens)
    }

    /// Proposal index of the largest ground-truth object.
    pub fn dominant_index(&self) -> usize {
        let mut best = 0;
        for (k, o) in self.objects.iter().enumerate() {
            if o.size > self.objects[best].size {
                best = k;
            }
        }
        best
    }
}

impl ObjectSource for Scene {
    fn num_proposals(&self) -> usize {
        self.objects.len() + self.distractors.len()
    }

    fn token_map(&self, seq_len: usize) -> RowObjectMap {
        self.column_map.extended(seq_len)
    }

    fn window(&self, prior_shares: Option<&[f64]>) -> Vec<ObjectStats> {
        self.proposals()
            .enumerate()
            .map(|(k, o)| ObjectStats {
                attn_share: prior_shares.map_or(0.0, |s| s[k].clamp(0.0, 1.0)),
                ..o.clone()
            })
            .collect()
    }

    /// Vision rows belong to the proposal they depict. Text rows are routed
    /// to the proposal that drew most of their attention at the previous
    /// step; rows without history stay unmapped.
    fn row_map(&self, seq_len: usize, prior: Option<&Matrix>) -> RowObjectMap {
        let columns = self.token_map(seq_len);
        let Some(prior) = prior else { return columns };
        let k = self.num_proposals();
        let rows = (0..seq_len)
            .map(|i| {
                if let Some(owner) = columns.get(i) {
                    return Some(owner);
                }
                if i >= prior.rows() {
                    return None;
                }
                let mut mass = vec![0.0; k];
                for (j, &a) in prior.row(i).iter().enumerate() {
                    if let Some(o) = columns.get(j) {
                        mass[o] += a;
                    }
                }
                let best = (0..k).fold(0, |b, o| if mass[o] > mass[b] { o } else { b });
                (mass[best] > 0.0).then_some(best)
            })
            .collect();
        RowObjectMap::new(rows)
    }

    fn score_bias(&self, map: &RowObjectMap) -> Option<Matrix> {
        let sizes: Vec<f64> = self.proposals().map(|o| o.size).collect();
        let largest = sizes.iter().copied().fold(0.0, f64::max);
        if largest <= 0.0 {
            return None;
        }
        let n = map.len();
        let mut bias = Matrix::zeros(n, n);
        for i in 0..n {
            let row_owner = map.get(i);
            let row = bias.row_mut(i);
            for (j, b) in row.iter_mut().enumerate() {
                let Some(col_owner) = map.get(j) else { continue };
                *b = self.dominance_bias * sizes[col_owner] / largest;
                if row_owner == Some(col_owner) {
                    *b += self.object_affinity;
                }
            }
        }
        Some(bias)
    }
}

/// Ids of proposals whose mean share over the trace is at least `threshold`.
pub fn emit_objects(trace: &DecodeTrace, threshold: f64, scene: &Scene) -> Result<BTreeSet<u32>> {
    if trace.is_empty() {
        return Err(Error::Empty { what: "trace" });
    }
    let mean = trace.mean_shares()?;
    emit_from_shares(&mean, threshold, &scene.proposal_ids())
}

pub fn emit_from_shares(shares: &[f64], threshold: f64, ids: &[u32]) -> Result<BTreeSet<u32>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(invalid("theta_emit", format!("{threshold} outside (0, 1)")));
    }
    if shares.len() != ids.len() {
        return Err(Error::DimensionMismatch {
            what: "shares",
            expected: ids.len(),
            actual: shares.len(),
        });
    }
    Ok(ids
        .iter()
        .zip(shares)
        .filter(|(_, &s)| s >= threshold)
        .map(|(&id, _)| id)
        .collect())
}

/// Gini coefficient `Σ_i Σ_j |x_i - x_j| / (2 m Σ x)`.
pub fn gini(shares: &[f64]) -> Result<f64> {
    if shares.is_empty() {
        return Err(Error::Empty { what: "shares" });
    }
    if shares.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
        return Err(invalid("shares", "must be finite and non-negative"));
    }
    let total: f64 = shares.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroMass);
    }
    // sorted form: Σ (2i - m + 1) x_(i), 0-based, equals half the pairwise sum
    let mut sorted = shares.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len() as f64;
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * i as f64 - m + 1.0) * x)
        .sum();
    Ok((weighted / (m * total)).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub omission_rate: f64,
    pub false_emit_rate: f64,
    /// Gini over ground-truth object shares.
    pub attention_gini: f64,
    pub per_object_shares: BTreeMap<u32, f64>,
}

/// Coverage of `emitted` against the scene. `shares` are indexed like
/// [`Scene::proposals`].
pub fn coverage_metrics(emitted: &BTreeSet<u32>, scene: &Scene, shares: &[f64]) -> Result<CoverageReport> {
    let ids = scene.proposal_ids();
    if shares.len() != ids.len() {
        return Err(Error::DimensionMismatch {
            what: "shares",
            expected: ids.len(),
            actual: shares.len(),
        });
    }
    if let Some(&foreign) = emitted.iter().find(|id| !ids.contains(id)) {
        return Err(Error::UnknownProposal(foreign));
    }
    let gt: Vec<u32> = scene.objects.iter().map(|o| o.object_id).collect();
    let missed = gt.iter().filter(|id| !emitted.contains(id)).count();
    let false_hits = scene
        .distractors
        .iter()
        .filter(|o| emitted.contains(&o.object_id))
        .count();
    let false_emit_rate = if scene.distractors.is_empty() {
        0.0
    } else {
        false_hits as f64 / scene.distractors.len() as f64
    };
    let gt_shares = &shares[..gt.len()];
    Ok(CoverageReport {
        omission_rate: missed as f64 / gt.len() as f64,
        false_emit_rate,
        attention_gini: gini(gt_shares)?,
        per_object_shares: ids.iter().copied().zip(shares.iter().copied()).collect(),
    })
}

/// Fraction of non-dominant ground-truth objects left out of `emitted`.
pub fn rare_omission_rate(emitted: &BTreeSet<u32>, scene: &Scene) -> f64 {
    let dominant = scene.dominant_index();
    let rare: Vec<u32> = scene
        .objects
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != dominant)
        .map(|(_, o)| o.object_id)
        .collect();
    if rare.is_empty() {
        return 0.0;
    }
    rare.iter().filter(|id| !emitted.contains(id)).count() as f64 / rare.len() as f64
}
