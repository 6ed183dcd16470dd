use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{default_batch, gradient_check_model, tiny_config, Difference};
use super::*;
use crate::sequencer::{pad_batch, pad_to_longest, TokenSequence, TokenVocabulary};

type Mat = Vec<Vec<f64>>;

fn matrix(flat: &[f64], rows: usize, cols: usize) -> Mat {
    (0..rows).map(|r| flat[r * cols..(r + 1) * cols].to_vec()).collect()
}

fn matmul_add(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|j| b[j] + row.iter().enumerate().map(|(i, xi)| xi * w[i][j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn norm_rows(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| g[j] * (v - mean) / (var + 1e-5).sqrt() + b[j])
                .collect()
        })
        .collect()
}

fn gelu_tanh(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Straight-line re-derivation of the encoder on row-of-vectors matrices.
/// Returns final hidden states and per-layer attention `[head][query][key]`.
fn oracle(model: &EncoderModel<f64>, tokens: &[u32], mask: &[u8]) -> (Mat, Vec<Vec<Mat>>) {
    let c = model.config().clone();
    let (h, f) = (c.hidden_size, c.ffn_size);
    let t = |name: &str| model.tensor(name).unwrap().to_vec();
    let tok = matrix(&t("token_embedding"), c.vocab_size, h);
    let pos = matrix(&t("position_embedding"), c.max_positions, h);
    let mut x: Mat = tokens
        .iter()
        .enumerate()
        .map(|(p, &id)| (0..h).map(|j| tok[id as usize][j] + pos[p][j]).collect())
        .collect();
    let dh = h / c.n_heads;
    let mut all_probs = Vec::new();
    for l in 0..c.n_layers {
        let w = |s: &str, r, k| matrix(&t(&format!("layer{l}.{s}.weight")), r, k);
        let b = |s: &str| t(&format!("layer{l}.{s}.bias"));
        let q = matmul_add(&x, &w("query", h, h), &b("query"));
        let k = matmul_add(&x, &w("key", h, h), &b("key"));
        let v = matmul_add(&x, &w("value", h, h), &b("value"));
        let mut ctx = vec![vec![0.0; h]; x.len()];
        let mut layer_probs = Vec::new();
        for head in 0..c.n_heads {
            let cols = head * dh..(head + 1) * dh;
            let mut probs = vec![vec![0.0; x.len()]; x.len()];
            for i in 0..x.len() {
                let scores: Vec<Option<f64>> = (0..x.len())
                    .map(|j| {
                        (mask[j] == 1).then(|| {
                            cols.clone().map(|d| q[i][d] * k[j][d]).sum::<f64>() / (dh as f64).sqrt()
                        })
                    })
                    .collect();
                let denom: f64 = scores.iter().flatten().map(|s| s.exp()).sum();
                for j in 0..x.len() {
                    if let Some(s) = scores[j] {
                        probs[i][j] = s.exp() / denom;
                    }
                }
                for d in cols.clone() {
                    ctx[i][d] = (0..x.len()).map(|j| probs[i][j] * v[j][d]).sum();
                }
            }
            layer_probs.push(probs);
        }
        all_probs.push(layer_probs);
        let attn = matmul_add(&ctx, &w("attention_output", h, h), &b("attention_output"));
        let y: Mat = x.iter().zip(&attn).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect();
        let x1 = norm_rows(&y, &t(&format!("layer{l}.attention_norm.gain")), &t(&format!("layer{l}.attention_norm.bias")));
        let pre = matmul_add(&x1, &w("ffn_in", h, f), &b("ffn_in"));
        let act: Mat = pre.iter().map(|r| r.iter().map(|&z| gelu_tanh(z)).collect()).collect();
        let ffn = matmul_add(&act, &w("ffn_out", f, h), &b("ffn_out"));
        let z: Mat = x1.iter().zip(&ffn).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect();
        x = norm_rows(&z, &t(&format!("layer{l}.ffn_norm.gain")), &t(&format!("layer{l}.ffn_norm.bias")));
    }
    (norm_rows(&x, &t("final_norm.gain"), &t("final_norm.bias")), all_probs)
}

fn small_config() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 12,
        hidden_size: 8,
        n_layers: 2,
        n_heads: 2,
        ffn_size: 12,
        max_positions: 10,
        dropout: 0.0,
        seed: 5,
    }
}

/// Initialized model with every tensor perturbed to unit scale, so norms,
/// gains and biases all take part.
fn perturbed(cfg: &EncoderConfig, seed: u64) -> EncoderModel<f64> {
    let mut model = EncoderModel::<f64>::init(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in model.tensors_mut() {
        t.iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
    }
    model
}

fn random_sequences(n: usize, vocab: TokenVocabulary, max_len: usize, seed: u64) -> Vec<TokenSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let body = rng.random_range(1..=max_len - 2);
            TokenSequence {
                book_id: format!("r{i}"),
                tokens: std::iter::once(vocab.bos())
                    .chain((0..body).map(|_| rng.random_range(0..vocab.k as u32)))
                    .chain([vocab.eos()])
                    .collect(),
            }
        })
        .collect()
}

#[test]
fn forward_matches_oracle() {
    let cfg = small_config();
    let model = perturbed(&cfg, 1);
    let vocab = TokenVocabulary::from_size(cfg.vocab_size).unwrap();
    for seq in random_sequences(6, vocab, 8, 2) {
        let refs = [&seq];
        let batch = pad_batch(&refs, 9, vocab).unwrap();
        let trace = forward_row(&model, batch.row(0), batch.mask_row(0)).unwrap();
        let (want, probs) = oracle(&model, batch.row(0), batch.mask_row(0));
        for (p, row) in want.iter().enumerate() {
            for (j, w) in row.iter().enumerate() {
                let got = trace.hidden()[p * cfg.hidden_size + j];
                assert!((got - w).abs() < 1e-10, "pos {p} dim {j}: {got} vs {w}");
            }
        }
        for (l, heads) in probs.iter().enumerate() {
            let att = trace.attention(l);
            for (hd, m) in heads.iter().enumerate() {
                for (i, r) in m.iter().enumerate() {
                    for (j, w) in r.iter().enumerate() {
                        assert!((att[(hd * 9 + i) * 9 + j] - w).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn logits_use_the_token_embedding() {
    let cfg = small_config();
    let model = perturbed(&cfg, 3);
    let trace = forward_row(&model, &[cfg.vocab_size as u32 - 3, 0, 4, cfg.vocab_size as u32 - 2], &[1; 4]).unwrap();
    let h = cfg.hidden_size;
    let tok = model.tensor("token_embedding").unwrap();
    for p in 0..4 {
        for t in 0..cfg.vocab_size {
            let want: f64 = (0..h).map(|j| trace.hidden()[p * h + j] * tok[t * h + j]).sum();
            assert!((trace.logits()[p * cfg.vocab_size + t] - want).abs() < 1e-12);
        }
    }
}

/// With every projection and bias at zero, attention and feed-forward add
/// nothing and each position is the layer norm (three times over) of its
/// embedding sum.
#[test]
fn hand_computed_zero_projection_model() {
    let cfg = EncoderConfig {
        vocab_size: 5,
        hidden_size: 4,
        n_layers: 1,
        n_heads: 1,
        ffn_size: 4,
        max_positions: 2,
        dropout: 0.0,
        seed: 0,
    };
    let mut model = EncoderModel::<f64>::init(&cfg).unwrap();
    for spec in model.specs() {
        if spec.name.starts_with("layer0.") && !spec.name.contains("norm") {
            model.tensor_mut(&spec.name).unwrap().fill(0.0);
        }
    }
    // BOS = 2, EOS = 3 for k = 1
    let tok = model.tensor_mut("token_embedding").unwrap();
    tok.fill(0.0);
    tok[8..12].copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
    tok[12..16].copy_from_slice(&[2.0, 0.0, 0.0, 0.0]);
    model.tensor_mut("position_embedding").unwrap().fill(0.0);

    let trace = forward_row(&model, &[2, 3], &[1, 1]).unwrap();
    // one pass: [1,2,3,4] has mean 2.5 and variance 1.25
    let once = |x: [f64; 4]| -> [f64; 4] {
        let m = x.iter().sum::<f64>() / 4.0;
        let v = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 4.0;
        x.map(|a| (a - m) / (v + 1e-5).sqrt())
    };
    let bos = once(once(once([1.0, 2.0, 3.0, 4.0])));
    let eos = once(once(once([2.0, 0.0, 0.0, 0.0])));
    let first = [-1.5, -0.5, 0.5, 1.5].map(|a: f64| a / 1.25f64.sqrt());
    let second = [3.0, -1.0, -1.0, -1.0].map(|a: f64| a / 3.0f64.sqrt());
    for j in 0..4 {
        assert!((trace.hidden()[j] - bos[j]).abs() < 1e-12);
        assert!((trace.hidden()[4 + j] - eos[j]).abs() < 1e-12);
        assert!((bos[j] - first[j]).abs() < 1e-4);
        assert!((eos[j] - second[j]).abs() < 1e-4);
    }
    // zero queries and keys give uniform attention over both keys
    assert!(trace.attention(0).iter().all(|&p| (p - 0.5).abs() < 1e-15));
}

#[test]
fn softmax_rows_sum_to_one_and_ignore_padding() {
    let cfg = small_config();
    let model = EncoderModel::<f32>::init(&cfg).unwrap();
    let vocab = TokenVocabulary::from_size(cfg.vocab_size).unwrap();
    let seqs = random_sequences(5, vocab, 8, 7);
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    let batch = pad_batch(&refs, 10, vocab).unwrap();
    for r in 0..batch.rows {
        let mask = batch.mask_row(r);
        let trace = forward_row(&model, batch.row(r), mask).unwrap();
        for l in 0..cfg.n_layers {
            for row in trace.attention(l).chunks(10) {
                let sum: f32 = row.iter().zip(mask).filter(|(_, &m)| m == 1).map(|(p, _)| *p).sum();
                assert!((sum - 1.0).abs() < 1e-5);
                for (p, &m) in row.iter().zip(mask) {
                    if m == 0 {
                        assert_eq!(*p, 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn padding_does_not_change_real_positions() {
    let cfg = small_config();
    let model = EncoderModel::<f32>::init(&cfg).unwrap();
    let vocab = TokenVocabulary::from_size(cfg.vocab_size).unwrap();
    for seq in random_sequences(8, vocab, 6, 9) {
        let n = seq.tokens.len();
        let bare = forward_row(&model, &seq.tokens, &vec![1; n]).unwrap();
        let refs = [&seq];
        let padded = pad_batch(&refs, cfg.max_positions, vocab).unwrap();
        let out = forward(&model, &padded).unwrap();
        for p in 0..n {
            for j in 0..cfg.hidden_size {
                let a = bare.hidden()[p * cfg.hidden_size + j];
                let b = out.hidden_at(0, p)[j];
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn rows_of_a_batch_are_independent() {
    let cfg = small_config();
    let model = EncoderModel::<f64>::init(&cfg).unwrap();
    let vocab = TokenVocabulary::from_size(cfg.vocab_size).unwrap();
    let seqs = random_sequences(4, vocab, 8, 4);
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    let together = forward(&model, &pad_to_longest(&refs, vocab).unwrap()).unwrap();
    let mut swapped = refs.clone();
    swapped.swap(0, 3);
    let apart = forward(&model, &pad_to_longest(&swapped, vocab).unwrap()).unwrap();
    for p in 0..together.len {
        assert_eq!(together.hidden_at(0, p), apart.hidden_at(3, p));
        assert_eq!(together.hidden_at(1, p), apart.hidden_at(1, p));
    }
}

#[test]
fn single_and_double_precision_agree() {
    let cfg = small_config();
    let m64 = EncoderModel::<f64>::init(&cfg).unwrap();
    let m32 = EncoderModel::<f32>::init(&cfg).unwrap();
    let tokens = [cfg.vocab_size as u32 - 3, 1, 2, 7, cfg.vocab_size as u32 - 2];
    let a = forward_row(&m64, &tokens, &[1; 5]).unwrap();
    let b = forward_row(&m32, &tokens, &[1; 5]).unwrap();
    for (x, y) in a.hidden().iter().zip(b.hidden()) {
        assert!((x - *y as f64).abs() < 1e-4);
    }
}

#[test]
fn rejects_bad_rows() {
    let cfg = small_config();
    let model = EncoderModel::<f32>::init(&cfg).unwrap();
    assert!(forward_row(&model, &[0, 1], &[1]).is_err());
    assert!(forward_row(&model, &[0, 99], &[1, 1]).is_err());
    assert!(forward_row(&model, &[0; 11], &[1; 11]).is_err());
}

#[test]
fn analytic_gradients_match_extrapolated_differences() {
    let batch = default_batch(8, 4).unwrap();
    let model = EncoderModel::<f64>::init(&tiny_config()).unwrap();
    let report = gradient_check_model(model, &batch, 2e-3, Difference::Richardson).unwrap();
    assert_eq!(report.parameters, 300);
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn analytic_gradients_match_on_unit_scale_weights() {
    let cfg = small_config();
    let vocab = TokenVocabulary::from_size(cfg.vocab_size).unwrap();
    let seqs = random_sequences(3, vocab, 7, 12);
    let report = gradient_check_model(perturbed(&cfg, 8), &seqs, 1e-3, Difference::Richardson).unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn central_difference_error_shrinks_with_the_step() {
    let batch = default_batch(8, 4).unwrap();
    let model = EncoderModel::<f64>::init(&tiny_config()).unwrap();
    let at = |h| gradient_check_model(model.clone(), &batch, h, Difference::Central).unwrap().max_relative_error;
    let (fine, coarse) = (at(1e-3), at(2e-3));
    assert!(fine < coarse);
    // second-order truncation: doubling the step scales the error by about 4
    assert!(coarse / fine < 10.0, "{fine} {coarse}");
}

#[test]
fn zero_projections_keep_the_check_finite() {
    let mut model = EncoderModel::<f64>::init(&tiny_config()).unwrap();
    for spec in model.specs() {
        if spec.name.starts_with("layer0.") && spec.name.ends_with(".weight") {
            model.tensor_mut(&spec.name).unwrap().fill(0.0);
        }
    }
    let batch = default_batch(8, 4).unwrap();
    let report = gradient_check_model(model, &batch, 2e-3, Difference::Richardson).unwrap();
    assert!(report.max_relative_error.is_finite());
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn masked_training_step_changes_the_model() {
    let cfg = small_config();
    let model = EncoderModel::<f32>::init(&cfg).unwrap();
    let vocab = TokenVocabulary::from_size(cfg.vocab_size).unwrap();
    let seqs = random_sequences(10, vocab, 8, 1);
    let tcfg = TrainConfig { mask_probability: 0.15, learning_rate: 1e-3, epochs: 2, ..TrainConfig::default() };
    let trained = train(model.clone(), &seqs, &tcfg, 1).unwrap();
    assert_ne!(trained.model, model);
    assert!(trained.history.epochs.iter().all(|e| e.1.is_finite()));
}
