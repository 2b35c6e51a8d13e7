use equity_attn::decoder::{decoder_layer_forward, decoder_layer_forward_with, AttentionKernel};
use equity_attn::{
    autoregressive_decode, generate_scene, AttentionInputs, AttentionResult, EquityContext, EquityParams, Matrix,
    RowModulation, SceneConfig, ToyModel, ToyModelConfig,
};
use equity_attn_oracle::vanilla_causal_attention;

struct Vanilla;

impl AttentionKernel for Vanilla {
    fn attend(&self, inputs: &AttentionInputs) -> equity_attn::Result<AttentionResult> {
        Ok(AttentionResult {
            attention: Matrix::from_rows(&vanilla_causal_attention(&inputs.scores().to_rows()).unwrap())?,
            absorbed_mass: vec![0.0; inputs.len()],
        })
    }
}

fn model() -> ToyModel {
    ToyModel::new(ToyModelConfig::default()).unwrap()
}

fn scene(seed: u64) -> equity_attn::Scene {
    generate_scene(&SceneConfig {
        seed,
        ..SceneConfig::default()
    })
    .unwrap()
}

#[test]
fn wide_register_layer_matches_vanilla_layer() {
    let m = model();
    let tokens: Vec<usize> = (0..20).map(|i| (i * 7) % 64).collect();
    let hidden = m.embed(&tokens).unwrap();
    let layer = &m.layers()[0];
    let wide = RowModulation::uniform(20, 1.0, 1e6);
    let a = decoder_layer_forward(&hidden, layer, &wide, None).unwrap();
    let b = decoder_layer_forward_with(&hidden, layer, &wide, None, &Vanilla).unwrap();
    assert!(a.hidden.max_abs_diff(&b.hidden).unwrap() <= 1e-8);
    for (x, y) in a.heads.iter().zip(&b.heads) {
        assert!(x.attention.max_abs_diff(&y.attention).unwrap() <= 1e-8);
    }
}

#[test]
fn every_layer_and_step_is_causal_under_modulation() {
    let m = model();
    let s = scene(3);
    let mut ctx = EquityContext::new(EquityParams::default()).unwrap();
    let out = autoregressive_decode(&m, &s.prompt(64).unwrap(), 6, &mut ctx, &s).unwrap();
    for step in &out.trace.steps {
        assert!(step.modulation.alphas.iter().any(|&a| a != 1.0), "modulation is active");
        for layer in &step.layers {
            let n = layer.attention.rows();
            for i in 0..n {
                assert!(layer.attention.row(i)[i + 1..].iter().all(|a| a.to_bits() == 0));
            }
        }
    }
}

#[test]
fn shorter_decodes_are_prefixes() {
    let m = model();
    let s = scene(11);
    let prompt = s.prompt(64).unwrap();
    let decode = |steps| {
        let mut ctx = EquityContext::new(EquityParams::default()).unwrap();
        autoregressive_decode(&m, &prompt, steps, &mut ctx, &s).unwrap()
    };
    let long = decode(8);
    for steps in 1..8 {
        let short = decode(steps);
        assert_eq!(short.generated[..], long.generated[..steps]);
        assert_eq!(short.trace.steps[..], long.trace.steps[..steps]);
    }
}

#[test]
fn changing_a_later_token_leaves_earlier_rows_untouched() {
    let m = model();
    let tokens: Vec<usize> = (0..16).map(|i| (i * 5 + 3) % 64).collect();
    let mut altered = tokens.clone();
    altered[10] = (altered[10] + 17) % 64;
    let n = tokens.len();
    let modulation = RowModulation::uniform(n, 0.8, 0.05);
    let a = m.forward(&tokens, &modulation, None).unwrap();
    let b = m.forward(&altered, &modulation, None).unwrap();
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        for i in 0..10 {
            assert_eq!(la.attention.row(i), lb.attention.row(i));
        }
    }
    for i in 0..10 {
        assert_eq!(a.hidden.row(i), b.hidden.row(i));
    }
}

#[test]
fn decode_reports_one_step_record_per_token() {
    let m = model();
    let s = scene(0);
    let prompt = s.prompt(64).unwrap();
    let mut ctx = EquityContext::new(EquityParams::default()).unwrap();
    let out = autoregressive_decode(&m, &prompt, 5, &mut ctx, &s).unwrap();
    assert_eq!(out.generated.len(), 5);
    for (t, step) in out.trace.steps.iter().enumerate() {
        assert_eq!(step.step, t);
        assert_eq!(step.token_id, out.generated[t]);
        assert_eq!(step.layers.len(), m.config().num_layers);
        assert_eq!(step.modulation.len(), prompt.len() + t);
        assert_eq!(step.row_map.len(), prompt.len() + t);
        assert_eq!(step.shares.len(), s.objects.len() + s.distractors.len());
        assert!(step.equity_ops > 0);
    }
}
