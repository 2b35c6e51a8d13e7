//! A small frozen-weight transformer decoder that runs the register attention
//! with equity modulation, plus the greedy decode loop around it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{compose_attention, AttentionInputs, AttentionResult};
use crate::equity::{column_mass, EquityContext, ObjectSignals, ObjectStats, RowModulation, RowObjectMap};
use crate::error::{invalid, Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    #[serde(default = "default_ffn_dim")]
    pub ffn_dim: usize,
    pub weight_seed: u64,
}

fn default_ffn_dim() -> usize {
    64
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            model_dim: 32,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: default_ffn_dim(),
            weight_seed: 7,
        }
    }
}

impl ToyModelConfig {
    /// Per-head query/key width.
    pub fn key_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("model_dim", self.model_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(invalid(name, "must be positive"));
            }
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(invalid(
                "num_heads",
                format!("{} does not divide model_dim {}", self.num_heads, self.model_dim),
            ));
        }
        Ok(())
    }
}

/// Frozen projections of one decoder layer.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
    pub num_heads: usize,
}

impl LayerWeights {
    fn random(rng: &mut ChaCha8Rng, d: usize, ffn: usize, num_heads: usize) -> Self {
        Self {
            wq: random_matrix(rng, d, d),
            wk: random_matrix(rng, d, d),
            wv: random_matrix(rng, d, d),
            wo: random_matrix(rng, d, d),
            w_up: random_matrix(rng, d, ffn),
            w_down: random_matrix(rng, ffn, d),
            num_heads,
        }
    }

    pub fn model_dim(&self) -> usize {
        self.wq.rows()
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let normal = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("valid std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Matrix::new(rows, cols, data).expect("finite samples")
}

/// Computes one head's attention from its inputs.
pub trait AttentionKernel {
    fn attend(&self, inputs: &AttentionInputs) -> Result<AttentionResult>;
}

/// The register attention of [`compose_attention`].
#[derive(Debug, Clone, Copy, Default)]
pub struct RegisterKernel;

impl AttentionKernel for RegisterKernel {
    fn attend(&self, inputs: &AttentionInputs) -> Result<AttentionResult> {
        compose_attention(inputs)
    }
}

/// Layer output: new hidden states and each head's attention.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub hidden: Matrix,
    pub heads: Vec<AttentionResult>,
}

fn rms_norm(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let scale = 1.0 / (ms + 1e-6).sqrt();
        row.iter_mut().for_each(|v| *v *= scale);
    }
    out
}

/// One pre-norm decoder layer with the register attention kernel.
pub fn decoder_layer_forward(
    hidden: &Matrix,
    weights: &LayerWeights,
    modulation: &RowModulation,
    score_bias: Option<&Matrix>,
) -> Result<LayerOutput> {
    decoder_layer_forward_with(hidden, weights, modulation, score_bias, &RegisterKernel)
}

/// [`decoder_layer_forward`] with a caller-supplied attention kernel.
///
/// Per head: `S = Q Kᵀ / √d_k (+ bias)`, attention from the kernel, output
/// `A V`. Heads are concatenated and projected, then a residual and a ReLU
/// feed-forward block with its own residual follow.
pub fn decoder_layer_forward_with<K: AttentionKernel + ?Sized>(
    hidden: &Matrix,
    weights: &LayerWeights,
    modulation: &RowModulation,
    score_bias: Option<&Matrix>,
    kernel: &K,
) -> Result<LayerOutput> {
    let n = hidden.rows();
    let d = weights.model_dim();
    if hidden.cols() != d {
        return Err(Error::DimensionMismatch {
            what: "hidden width",
            expected: d,
            actual: hidden.cols(),
        });
    }
    if modulation.len() != n || modulation.sigmas.len() != n {
        return Err(Error::DimensionMismatch {
            what: "row modulation",
            expected: n,
            actual: modulation.len(),
        });
    }
    if let Some(b) = score_bias {
        if b.rows() != n || b.cols() != n {
            return Err(Error::DimensionMismatch {
                what: "score bias",
                expected: n,
                actual: b.rows(),
            });
        }
    }

    let x = rms_norm(hidden);
    let q = x.matmul(&weights.wq)?;
    let k = x.matmul(&weights.wk)?;
    let v = x.matmul(&weights.wv)?;
    let dk = d / weights.num_heads;
    let scale = 1.0 / (dk as f64).sqrt();

    let mut concat = Matrix::zeros(n, d);
    let mut heads = Vec::with_capacity(weights.num_heads);
    for h in 0..weights.num_heads {
        let (qh, kh, vh) = (
            q.column_block(h * dk, dk),
            k.column_block(h * dk, dk),
            v.column_block(h * dk, dk),
        );
        let mut scores = qh.matmul_transposed(&kh)?.map(|s| s * scale);
        if let Some(b) = score_bias {
            scores.add_assign(b)?;
        }
        let inputs = AttentionInputs::new(scores, modulation.alphas.clone(), modulation.sigmas.clone())?;
        let result = kernel.attend(&inputs)?;
        let out = result.attention.matmul(&vh)?;
        for i in 0..n {
            concat.row_mut(i)[h * dk..(h + 1) * dk].copy_from_slice(out.row(i));
        }
        heads.push(result);
    }

    let mut hidden = hidden.clone();
    hidden.add_assign(&concat.matmul(&weights.wo)?)?;
    let up = rms_norm(&hidden).matmul(&weights.w_up)?.map(|v| v.max(0.0));
    hidden.add_assign(&up.matmul(&weights.w_down)?)?;
    if !hidden.is_finite() {
        return Err(Error::NonFinite {
            what: "layer output",
            index: 0,
        });
    }
    Ok(LayerOutput { hidden, heads })
}

/// Seeded frozen-weight decoder. Weights are never updated.
#[derive(Debug, Clone)]
pub struct ToyModel {
    config: ToyModelConfig,
    embedding: Matrix,
    layers: Vec<LayerWeights>,
}

/// Result of running the whole stack over a sequence.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Next-token logits for the last position.
    pub logits: Vec<f64>,
    /// Head-averaged attention per layer.
    pub layers: Vec<AttentionResult>,
    pub hidden: Matrix,
}

impl ToyModel {
    pub fn new(config: ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.weight_seed);
        let d = config.model_dim;
        let normal = Normal::new(0.0, 1.0).expect("valid std");
        let emb = (0..config.vocab_size * d).map(|_| normal.sample(&mut rng)).collect();
        let embedding = Matrix::new(config.vocab_size, d, emb)?;
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights::random(&mut rng, d, config.ffn_dim, config.num_heads))
            .collect();
        Ok(Self {
            config,
            embedding,
            layers,
        })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    /// Token embeddings plus sinusoidal positions.
    pub fn embed(&self, tokens: &[usize]) -> Result<Matrix> {
        let d = self.config.model_dim;
        let mut x = Matrix::zeros(tokens.len(), d);
        for (pos, &t) in tokens.iter().enumerate() {
            if t >= self.config.vocab_size {
                return Err(invalid(
                    "token",
                    format!("id {t} outside vocabulary of {}", self.config.vocab_size),
                ));
            }
            let row = x.row_mut(pos);
            row.copy_from_slice(self.embedding.row(t));
            for (k, v) in row.iter_mut().enumerate() {
                let freq = 1.0 / 10_000f64.powf((k / 2 * 2) as f64 / d as f64);
                let angle = pos as f64 * freq;
                *v += if k % 2 == 0 { angle.sin() } else { angle.cos() };
            }
        }
        Ok(x)
    }

    pub fn forward(
        &self,
        tokens: &[usize],
        modulation: &RowModulation,
        score_bias: Option<&Matrix>,
    ) -> Result<ForwardPass> {
        self.forward_with(tokens, modulation, score_bias, &RegisterKernel)
    }

    pub fn forward_with<K: AttentionKernel + ?Sized>(
        &self,
        tokens: &[usize],
        modulation: &RowModulation,
        score_bias: Option<&Matrix>,
        kernel: &K,
    ) -> Result<ForwardPass> {
        if tokens.is_empty() {
            return Err(Error::Empty { what: "token sequence" });
        }
        let mut hidden = self.embed(tokens)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for weights in &self.layers {
            let out = decoder_layer_forward_with(&hidden, weights, modulation, score_bias, kernel)?;
            layers.push(AttentionResult::mean(&out.heads)?);
            hidden = out.hidden;
        }
        let last = rms_norm(&hidden);
        let last = last.row(tokens.len() - 1);
        let logits = (0..self.config.vocab_size)
            .map(|t| crate::numerics::dot(last, self.embedding.row(t)))
            .collect();
        Ok(ForwardPass { logits, layers, hidden })
    }
}

/// Supplies object proposals and their token alignment to the decode loop.
pub trait ObjectSource {
    fn num_proposals(&self) -> usize;

    /// Column ownership: which proposal each of `seq_len` tokens depicts.
    fn token_map(&self, seq_len: usize) -> RowObjectMap;

    /// Row alignment for the next step. `prior` is the previous step's
    /// final-layer attention (one row and column shorter), `None` at the
    /// first step. Defaults to the column ownership map.
    fn row_map(&self, seq_len: usize, _prior: Option<&Matrix>) -> RowObjectMap {
        self.token_map(seq_len)
    }

    /// Current proposal statistics given last step's shares (`None` at the
    /// first step).
    fn window(&self, prior_shares: Option<&[f64]>) -> Vec<ObjectStats>;

    /// Optional additive bias on the raw attention scores.
    fn score_bias(&self, _map: &RowObjectMap) -> Option<Matrix> {
        None
    }
}

/// One generated token and everything observed while producing it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub token_id: usize,
    /// Head-averaged attention of every layer.
    pub layers: Vec<AttentionResult>,
    pub modulation: RowModulation,
    /// Row alignment used for the modulation.
    pub row_map: RowObjectMap,
    /// Final-layer attention share per proposal.
    pub shares: Vec<f64>,
    /// Equity-side operation count for this step.
    pub equity_ops: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub steps: Vec<StepRecord>,
}

impl DecodeTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Mean share per proposal across steps.
    pub fn mean_shares(&self) -> Result<Vec<f64>> {
        let first = self.steps.first().ok_or(Error::Empty { what: "trace" })?;
        let mut mean = vec![0.0; first.shares.len()];
        for s in &self.steps {
            for (m, v) in mean.iter_mut().zip(&s.shares) {
                *m += v;
            }
        }
        let k = self.steps.len() as f64;
        mean.iter_mut().for_each(|m| *m /= k);
        Ok(mean)
    }

    /// Absorbed mass averaged over rows, layers and steps.
    pub fn mean_absorbed_mass(&self) -> f64 {
        let (total, count) = self
            .steps
            .iter()
            .flat_map(|s| &s.layers)
            .fold((0.0, 0usize), |(t, c), l| (t + l.mean_absorbed(), c + 1));
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub generated: Vec<usize>,
    pub trace: DecodeTrace,
}

/// Equity work for one step: signals for the current window and the
/// resulting row modulation.
pub fn equity_step(
    ctx: &mut EquityContext,
    window: &[ObjectStats],
    map: &RowObjectMap,
) -> Result<(ObjectSignals, RowModulation)> {
    let signals = ctx.signals(window)?;
    let modulation = ctx.modulation(map, &signals)?;
    Ok((signals, modulation))
}

/// Greedy decoding with the register kernel.
pub fn autoregressive_decode(
    model: &ToyModel,
    prompt: &[usize],
    max_steps: usize,
    ctx: &mut EquityContext,
    source: &dyn ObjectSource,
) -> Result<DecodeOutput> {
    autoregressive_decode_with(model, prompt, max_steps, ctx, source, &RegisterKernel)
}

/// Greedy decoding. The full attention matrix is recomputed at every step;
/// the proposal window is refreshed from the previous step's shares.
pub fn autoregressive_decode_with<K: AttentionKernel + ?Sized>(
    model: &ToyModel,
    prompt: &[usize],
    max_steps: usize,
    ctx: &mut EquityContext,
    source: &dyn ObjectSource,
    kernel: &K,
) -> Result<DecodeOutput> {
    if prompt.is_empty() {
        return Err(Error::Empty { what: "prompt" });
    }
    if max_steps == 0 {
        return Err(invalid("max_steps", "must be at least 1"));
    }
    let num_proposals = source.num_proposals();
    let mut tokens = prompt.to_vec();
    let mut generated = Vec::with_capacity(max_steps);
    let mut trace = DecodeTrace::default();
    let mut prior: Option<Vec<f64>> = None;
    let mut prior_attention: Option<Matrix> = None;

    for step in 0..max_steps {
        ctx.reset_ops();
        let n = tokens.len();
        let columns = source.token_map(n);
        columns.check(num_proposals)?;
        let rows = source.row_map(n, prior_attention.as_ref());
        rows.check(num_proposals)?;
        let window = source.window(prior.as_deref());
        let (_, modulation) = equity_step(ctx, &window, &rows)?;
        let bias = source.score_bias(&columns);
        let pass = model.forward_with(&tokens, &modulation, bias.as_ref(), kernel)?;
        let last = pass.layers.last().expect("at least one layer");
        let shares = ctx.shares(&column_mass(&last.attention), &columns, num_proposals)?;
        prior_attention = Some(last.attention.clone());

        let token_id = argmax(&pass.logits);
        tokens.push(token_id);
        generated.push(token_id);
        trace.steps.push(StepRecord {
            step,
            token_id,
            layers: pass.layers,
            modulation,
            row_map: rows,
            shares: shares.clone(),
            equity_ops: ctx.ops(),
        });
        prior = Some(shares);
    }
    Ok(DecodeOutput { generated, trace })
}

/// Index of the largest value; the first one wins ties.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equity::EquityParams;

    fn model() -> ToyModel {
        ToyModel::new(ToyModelConfig::default()).unwrap()
    }

    struct NoObjects;

    impl ObjectSource for NoObjects {
        fn num_proposals(&self) -> usize {
            1
        }
        fn token_map(&self, n: usize) -> RowObjectMap {
            RowObjectMap::unmapped(n)
        }
        fn window(&self, _: Option<&[f64]>) -> Vec<ObjectStats> {
            vec![ObjectStats {
                object_id: 0,
                size: 1.0,
                persistence: 1.0,
                attn_share: 0.0,
                confidence: 1.0,
                feature: Vec::new(),
            }]
        }
    }

    #[test]
    fn config_validation() {
        assert_eq!(ToyModelConfig::default().key_dim(), 16);
        let bad = ToyModelConfig {
            num_heads: 3,
            ..ToyModelConfig::default()
        };
        assert!(ToyModel::new(bad).is_err());
    }

    #[test]
    fn layer_shape_contract() {
        let m = model();
        let x = m.embed(&[1, 2, 3, 4, 5]).unwrap();
        let out = decoder_layer_forward(&x, &m.layers()[0], &RowModulation::uniform(5, 1.0, 0.05), None).unwrap();
        assert_eq!((out.hidden.rows(), out.hidden.cols()), (5, 32));
        assert!(out.hidden.is_finite());
        assert_eq!(out.heads.len(), 2);
    }

    #[test]
    fn layer_rejects_bad_modulation() {
        let m = model();
        let x = m.embed(&[1, 2, 3]).unwrap();
        assert!(decoder_layer_forward(&x, &m.layers()[0], &RowModulation::uniform(2, 1.0, 0.05), None).is_err());
    }

    #[test]
    fn unknown_token_is_rejected() {
        assert!(model().embed(&[64]).is_err());
    }

    #[test]
    fn decode_step_budget() {
        let m = model();
        let mut ctx = EquityContext::new(EquityParams::default()).unwrap();
        assert!(autoregressive_decode(&m, &[1, 2], 0, &mut ctx, &NoObjects).is_err());
        assert!(autoregressive_decode(&m, &[], 3, &mut ctx, &NoObjects).is_err());
        let out = autoregressive_decode(&m, &[1, 2], 1, &mut ctx, &NoObjects).unwrap();
        assert_eq!(out.generated.len(), 1);
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn decode_is_deterministic_and_grows_one_row_per_step() {
        let m = model();
        let run = || {
            let mut ctx = EquityContext::new(EquityParams::default()).unwrap();
            autoregressive_decode(&m, &[3, 9, 4], 5, &mut ctx, &NoObjects).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.generated, b.generated);
        assert_eq!(a.trace, b.trace);
        for (t, s) in a.trace.steps.iter().enumerate() {
            assert_eq!(s.layers[0].attention.rows(), 3 + t);
        }
    }

    #[test]
    fn argmax_first_wins() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
    }
}
