use contamlab::model::{ModelConfig, ModelParams, TokenBatch};
use contamlab::tensor::Tape;
use contamlab::textdata::{CLS_ID, PAD_ID, SEP_ID};

fn small_config() -> ModelConfig {
    ModelConfig { num_layers: 1, hidden_dim: 8, num_heads: 2, ffn_dim: 12, max_seq_len: 6, ..ModelConfig::toy(20) }
}

fn w(p: &ModelParams<f64>, name: &str) -> Vec<f64> {
    p.get(name).unwrap_or_else(|| panic!("{name}")).data().to_vec()
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter().enumerate().map(|(i, v)| (v - mean) / (var + eps).sqrt() * g[i] + b[i]).collect()
}

fn linear(x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let out = bias.len();
    (0..out).map(|j| bias[j] + x.iter().enumerate().map(|(i, v)| v * weight[i * out + j]).sum::<f64>()).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Scalar re-derivation of one post-LN encoder layer for a single sequence.
fn scalar_encode(p: &ModelParams<f64>, ids: &[u32]) -> Vec<Vec<f64>> {
    let cfg = p.config();
    let (h, heads) = (cfg.hidden_dim, cfg.num_heads);
    let hd = h / heads;
    let eps = cfg.layer_norm_eps;
    let (word, pos) = (w(p, "embeddings.word"), w(p, "embeddings.position"));
    let (eg, eb) = (w(p, "embeddings.norm.gain"), w(p, "embeddings.norm.bias"));
    let mut x: Vec<Vec<f64>> = ids
        .iter()
        .enumerate()
        .map(|(t, &id)| {
            let e: Vec<f64> = (0..h).map(|k| word[id as usize * h + k] + pos[t * h + k]).collect();
            layer_norm(&e, &eg, &eb, eps)
        })
        .collect();
    for l in 0..cfg.num_layers {
        let n = |s: &str| w(p, &format!("layer.{l}.{s}"));
        let q: Vec<Vec<f64>> = x.iter().map(|r| linear(r, &n("attn.query.weight"), &n("attn.query.bias"))).collect();
        let k: Vec<Vec<f64>> = x.iter().map(|r| linear(r, &n("attn.key.weight"), &n("attn.key.bias"))).collect();
        let v: Vec<Vec<f64>> = x.iter().map(|r| linear(r, &n("attn.value.weight"), &n("attn.value.bias"))).collect();
        let mut ctx = vec![vec![0.0; h]; ids.len()];
        for head in 0..heads {
            let r = head * hd..(head + 1) * hd;
            for i in 0..ids.len() {
                let scores: Vec<f64> = (0..ids.len())
                    .map(|j| {
                        if ids[j] == PAD_ID {
                            f64::NEG_INFINITY
                        } else {
                            r.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (hd as f64).sqrt()
                        }
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in r.clone() {
                    ctx[i][c] = (0..ids.len()).map(|j| e[j] / z * v[j][c]).sum();
                }
            }
        }
        x = x
            .iter()
            .zip(&ctx)
            .map(|(xi, ci)| {
                let a = linear(ci, &n("attn.output.weight"), &n("attn.output.bias"));
                let res: Vec<f64> = xi.iter().zip(&a).map(|(p, q)| p + q).collect();
                let y = layer_norm(&res, &n("attn.norm.gain"), &n("attn.norm.bias"), eps);
                let f: Vec<f64> = linear(&y, &n("ffn.in.weight"), &n("ffn.in.bias")).into_iter().map(gelu).collect();
                let f = linear(&f, &n("ffn.out.weight"), &n("ffn.out.bias"));
                let res: Vec<f64> = y.iter().zip(&f).map(|(p, q)| p + q).collect();
                layer_norm(&res, &n("ffn.norm.gain"), &n("ffn.norm.bias"), eps)
            })
            .collect();
    }
    x
}

fn perturbed(cfg: &ModelConfig, seed: u64) -> ModelParams<f64> {
    // Move biases and gains off their initial constants so they take part in the check.
    let mut p = ModelParams::<f64>::init(cfg, seed).unwrap();
    for (i, t) in p.tensors_mut().iter_mut().enumerate() {
        for (j, v) in t.data_mut().iter_mut().enumerate() {
            *v += 0.05 * (((i * 31 + j * 7) % 13) as f64 / 13.0 - 0.5);
        }
    }
    p
}

#[test]
fn encoder_matches_scalar_derivation() {
    let cfg = small_config();
    let p = perturbed(&cfg, 4);
    let seq = vec![CLS_ID, 7, 9, 11, SEP_ID, PAD_ID];
    let mut tape = Tape::<f64>::new();
    let bound = p.bind(&mut tape, false);
    let hidden = bound.encode(&mut tape, &TokenBatch::from_sequences(std::slice::from_ref(&seq)), false).unwrap();
    let got = tape.value(hidden).data();
    let want = scalar_encode(&p, &seq);
    for t in 0..5 {
        for k in 0..cfg.hidden_dim {
            let g = got[t * cfg.hidden_dim + k];
            assert!((g - want[t][k]).abs() < 1e-9, "position {t} dim {k}: {g} vs {}", want[t][k]);
        }
    }
}

#[test]
fn padding_does_not_change_real_positions() {
    let cfg = ModelConfig { num_layers: 2, ..small_config() };
    let p = perturbed(&cfg, 9);
    let short = vec![CLS_ID, 12, 8, SEP_ID];
    let long = vec![CLS_ID, 12, 8, SEP_ID, PAD_ID, PAD_ID];
    let other = vec![CLS_ID, 5, 6, 7, 8, SEP_ID];
    let mut tape = Tape::<f64>::new();
    let bound = p.bind(&mut tape, false);
    let a = bound.encode(&mut tape, &TokenBatch::from_sequences(&[short]), false).unwrap();
    let b = bound.encode(&mut tape, &TokenBatch::from_sequences(&[long, other]), false).unwrap();
    let h = cfg.hidden_dim;
    let (a, b) = (tape.value(a).data(), tape.value(b).data());
    for i in 0..4 * h {
        assert!((a[i] - b[i]).abs() < 1e-12);
    }
}

#[test]
fn parameter_count_matches_tensor_shapes() {
    for cfg in [ModelConfig::toy(300), ModelConfig::tiny(50), ModelConfig { tie_mlm_to_embeddings: false, ..small_config() }] {
        let p = ModelParams::<f32>::init(&cfg, 0).unwrap();
        assert_eq!(p.param_count(), cfg.param_count());
        let by_shape: usize = p.tensors().iter().map(|t| t.shape().iter().product::<usize>()).sum();
        assert_eq!(by_shape, cfg.param_count());
    }
}

#[test]
fn initialization_is_seeded() {
    let cfg = small_config();
    let a = ModelParams::<f32>::init(&cfg, 1).unwrap();
    assert_eq!(a, ModelParams::<f32>::init(&cfg, 1).unwrap());
    assert_ne!(a, ModelParams::<f32>::init(&cfg, 2).unwrap());
    let word = a.get("embeddings.word").unwrap().data();
    assert!(word.iter().all(|v| v.abs() <= 0.04));
    assert!(a.get("layer.0.attn.norm.gain").unwrap().data().iter().all(|&g| g == 1.0));
}

#[test]
fn classifier_head_lifecycle() {
    let cfg = small_config();
    let mut p = ModelParams::<f64>::init(&cfg, 1).unwrap();
    let mut tape = Tape::<f64>::new();
    let bound = p.bind(&mut tape, false);
    let hidden = bound.encode(&mut tape, &TokenBatch::from_sequences(&[vec![CLS_ID, 6, SEP_ID]]), false).unwrap();
    assert!(bound.cls_logits(&mut tape, hidden, 3).is_err());

    p.init_classifier(3, 5).unwrap();
    assert_eq!(p.num_classes(), Some(3));
    let mut tape = Tape::<f64>::new();
    let bound = p.bind(&mut tape, false);
    let hidden = bound.encode(&mut tape, &TokenBatch::from_sequences(&[vec![CLS_ID, 6, SEP_ID]]), false).unwrap();
    let logits = bound.cls_logits(&mut tape, hidden, 3).unwrap();
    assert_eq!(tape.value(logits).shape(), [1, 3]);
    assert!(bound.cls_logits(&mut tape, hidden, 4).is_err());

    p.drop_classifier();
    assert_eq!(p.num_classes(), None);
    assert_eq!(p.param_count(), cfg.param_count());
    assert!(p.init_classifier(1, 0).is_err());
}

#[test]
fn oversized_batches_are_rejected() {
    let cfg = small_config();
    let p = ModelParams::<f32>::init(&cfg, 1).unwrap();
    let mut tape = Tape::<f32>::new();
    let bound = p.bind(&mut tape, false);
    let too_long = vec![CLS_ID; cfg.max_seq_len + 1];
    assert!(bound.encode(&mut tape, &TokenBatch::from_sequences(&[too_long]), false).is_err());
}

#[test]
fn trimmed_batches_drop_shared_padding() {
    let b = TokenBatch::trimmed(&[vec![2, 7, 3, 0, 0], vec![2, 3, 0, 0, 0]]);
    assert_eq!(b.seq, 3);
    assert_eq!(b.row(1), [2, 3, 0]);
}
