//! Forward pass with saved activations, and the matching backward pass.
//!
//! Each row of a batch is processed independently: attention never crosses
//! rows and PAD keys are excluded from every softmax, so a row's non-PAD
//! outputs do not depend on how much padding follows it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::model::{final_index, layer_index, slot, EncoderModel, POSITION_EMBEDDING, TOKEN_EMBEDDING};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sequencer::{PaddedBatch, TokenId};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Inverted dropout driven by a seeded stream.
pub(crate) struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn mask<T: Scalar>(&mut self, n: usize) -> Option<Vec<T>> {
        if self.p <= 0.0 {
            return None;
        }
        let keep = T::lit(1.0 / (1.0 - self.p));
        Some(
            (0..n)
                .map(|_| if self.rng.random::<f64>() < self.p { T::zero() } else { keep })
                .collect(),
        )
    }
}

#[derive(Debug, Clone)]
struct NormTrace<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

#[derive(Debug, Clone)]
struct LayerTrace<T> {
    input: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `heads * len * len`
    probs: Vec<T>,
    ctx: Vec<T>,
    attn_drop: Option<Vec<T>>,
    norm1: NormTrace<T>,
    x1: Vec<T>,
    pre_act: Vec<T>,
    act: Vec<T>,
    ffn_drop: Option<Vec<T>>,
    norm2: NormTrace<T>,
}

/// Activations of one sequence, kept for backpropagation and inspection.
#[derive(Debug, Clone)]
pub struct RowTrace<T> {
    len: usize,
    tokens: Vec<TokenId>,
    mask: Vec<u8>,
    emb_drop: Option<Vec<T>>,
    layers: Vec<LayerTrace<T>>,
    final_norm: NormTrace<T>,
    hidden: Vec<T>,
    logits: Vec<T>,
}

impl<T: Scalar> RowTrace<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Final hidden states, `len * hidden_size`.
    pub fn hidden(&self) -> &[T] {
        &self.hidden
    }

    /// `len * vocab_size`.
    pub fn logits(&self) -> &[T] {
        &self.logits
    }

    /// Attention probabilities of one layer, `heads * len * len`
    /// (query-major within each head).
    pub fn attention(&self, layer: usize) -> &[T] {
        &self.layers[layer].probs
    }

    pub fn mask(&self) -> &[u8] {
        &self.mask
    }
}

fn affine<T: Scalar>(x: &[T], rows: usize, w: &[T], b: &[T], inp: usize, out: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(rows * out);
    for r in 0..rows {
        y.extend_from_slice(b);
        let yr = &mut y[r * out..(r + 1) * out];
        for (i, &xi) in x[r * inp..(r + 1) * inp].iter().enumerate() {
            if xi == T::zero() {
                continue;
            }
            for (yj, &wij) in yr.iter_mut().zip(&w[i * out..(i + 1) * out]) {
                *yj += xi * wij;
            }
        }
    }
    y
}

/// Accumulates `dW += xᵀ dy`, `db += Σ dy` and returns `dx = dy Wᵀ`.
#[allow(clippy::too_many_arguments)]
fn affine_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    w: &[T],
    rows: usize,
    inp: usize,
    out: usize,
    dw: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let mut dx = vec![T::zero(); rows * inp];
    for r in 0..rows {
        let dyr = &dy[r * out..(r + 1) * out];
        for (bj, &g) in db.iter_mut().zip(dyr) {
            *bj += g;
        }
        for i in 0..inp {
            let xi = x[r * inp + i];
            let wrow = &w[i * out..(i + 1) * out];
            let dwrow = &mut dw[i * out..(i + 1) * out];
            let mut acc = T::zero();
            for j in 0..out {
                dwrow[j] += xi * dyr[j];
                acc += dyr[j] * wrow[j];
            }
            dx[r * inp + i] = acc;
        }
    }
    dx
}

fn layer_norm<T: Scalar>(x: &[T], rows: usize, h: usize, gain: &[T], bias: &[T]) -> (Vec<T>, NormTrace<T>) {
    let eps = T::lit(LAYER_NORM_EPS);
    let n = T::from_usize_lossy(h);
    let mut out = vec![T::zero(); rows * h];
    let mut xhat = vec![T::zero(); rows * h];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let xr = &x[r * h..(r + 1) * h];
        let mean = xr.iter().copied().sum::<T>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..h {
            let xh = (xr[j] - mean) * rs;
            xhat[r * h + j] = xh;
            out[r * h + j] = gain[j] * xh + bias[j];
        }
    }
    (out, NormTrace { xhat, rstd })
}

fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    tr: &NormTrace<T>,
    gain: &[T],
    rows: usize,
    h: usize,
    dgain: &mut [T],
    dbias: &mut [T],
) -> Vec<T> {
    let n = T::from_usize_lossy(h);
    let mut dx = vec![T::zero(); rows * h];
    for r in 0..rows {
        let dyr = &dy[r * h..(r + 1) * h];
        let xh = &tr.xhat[r * h..(r + 1) * h];
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for j in 0..h {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            let d = dyr[j] * gain[j];
            mean_d += d;
            mean_dx += d * xh[j];
        }
        mean_d /= n;
        mean_dx /= n;
        for j in 0..h {
            let d = dyr[j] * gain[j];
            dx[r * h + j] = tr.rstd[r] * (d - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

// tanh approximation of GELU
fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

fn apply_drop<T: Scalar>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        x.iter_mut().zip(m).for_each(|(v, &k)| *v *= k);
    }
}

pub(crate) fn validate_row<T: Scalar>(model: &EncoderModel<T>, tokens: &[TokenId], mask: &[u8]) -> Result<()> {
    let cfg = model.config();
    if tokens.len() != mask.len() {
        return Err(Error::Contract(format!(
            "{} tokens but {} mask entries",
            tokens.len(),
            mask.len()
        )));
    }
    if tokens.len() > cfg.max_positions {
        return Err(Error::Contract(format!(
            "sequence length {} exceeds max_positions {}",
            tokens.len(),
            cfg.max_positions
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Contract(format!(
            "token id {t} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// Runs one sequence through the encoder without dropout.
pub fn forward_row<T: Scalar>(model: &EncoderModel<T>, tokens: &[TokenId], mask: &[u8]) -> Result<RowTrace<T>> {
    validate_row(model, tokens, mask)?;
    Ok(forward_row_with(model, tokens, mask, None))
}

pub(crate) fn forward_row_with<T: Scalar>(
    model: &EncoderModel<T>,
    tokens: &[TokenId],
    mask: &[u8],
    mut dropout: Option<&mut Dropout<'_>>,
) -> RowTrace<T> {
    let cfg = model.config();
    let (len, h, f, v) = (tokens.len(), cfg.hidden_size, cfg.ffn_size, cfg.vocab_size);
    let heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let tok = &model.tensors[TOKEN_EMBEDDING];
    let pos = &model.tensors[POSITION_EMBEDDING];

    let mut x = Vec::with_capacity(len * h);
    for (p, &t) in tokens.iter().enumerate() {
        let t = t as usize;
        x.extend(tok[t * h..(t + 1) * h].iter().zip(&pos[p * h..(p + 1) * h]).map(|(a, b)| *a + *b));
    }
    let emb_drop = dropout.as_mut().and_then(|d| d.mask(len * h));
    apply_drop(&mut x, &emb_drop);

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let w = |s| model.layer(l, s);
        let q = affine(&x, len, w(slot::WQ), w(slot::BQ), h, h);
        let k = affine(&x, len, w(slot::WK), w(slot::BK), h, h);
        let vv = affine(&x, len, w(slot::WV), w(slot::BV), h, h);

        let mut probs = vec![T::zero(); heads * len * len];
        let mut ctx = vec![T::zero(); len * h];
        for hd in 0..heads {
            let off = hd * dh;
            for i in 0..len {
                let row = &mut probs[(hd * len + i) * len..(hd * len + i + 1) * len];
                let qi = &q[i * h + off..i * h + off + dh];
                let mut max = T::neg_infinity();
                for j in 0..len {
                    if mask[j] == 0 {
                        continue;
                    }
                    let kj = &k[j * h + off..j * h + off + dh];
                    let s = crate::scalar::dot(qi, kj) * scale;
                    row[j] = s;
                    max = max.max(s);
                }
                if max == T::neg_infinity() {
                    continue;
                }
                let mut total = T::zero();
                for j in 0..len {
                    if mask[j] == 0 {
                        row[j] = T::zero();
                    } else {
                        row[j] = (row[j] - max).exp();
                        total += row[j];
                    }
                }
                for j in 0..len {
                    row[j] /= total;
                }
                let ci = &mut ctx[i * h + off..i * h + off + dh];
                for j in 0..len {
                    let p = row[j];
                    if p == T::zero() {
                        continue;
                    }
                    for (c, &vj) in ci.iter_mut().zip(&vv[j * h + off..j * h + off + dh]) {
                        *c += p * vj;
                    }
                }
            }
        }

        let mut attn = affine(&ctx, len, w(slot::WO), w(slot::BO), h, h);
        let attn_drop = dropout.as_mut().and_then(|d| d.mask(len * h));
        apply_drop(&mut attn, &attn_drop);
        let y: Vec<T> = x.iter().zip(&attn).map(|(a, b)| *a + *b).collect();
        let (x1, norm1) = layer_norm(&y, len, h, w(slot::LN1_G), w(slot::LN1_B));

        let pre_act = affine(&x1, len, w(slot::W1), w(slot::B1), h, f);
        let act: Vec<T> = pre_act.iter().map(|&z| gelu(z)).collect();
        let mut ffn = affine(&act, len, w(slot::W2), w(slot::B2), f, h);
        let ffn_drop = dropout.as_mut().and_then(|d| d.mask(len * h));
        apply_drop(&mut ffn, &ffn_drop);
        let z: Vec<T> = x1.iter().zip(&ffn).map(|(a, b)| *a + *b).collect();
        let (x2, norm2) = layer_norm(&z, len, h, w(slot::LN2_G), w(slot::LN2_B));

        layers.push(LayerTrace {
            input: std::mem::replace(&mut x, x2),
            q,
            k,
            v: vv,
            probs,
            ctx,
            attn_drop,
            norm1,
            x1,
            pre_act,
            act,
            ffn_drop,
            norm2,
        });
    }

    let (hidden, final_norm) = layer_norm(&x, len, h, model.final_gain(), model.final_bias());
    let mut logits = vec![T::zero(); len * v];
    for p in 0..len {
        let hp = &hidden[p * h..(p + 1) * h];
        for t in 0..v {
            logits[p * v + t] = crate::scalar::dot(hp, &tok[t * h..(t + 1) * h]);
        }
    }

    RowTrace {
        len,
        tokens: tokens.to_vec(),
        mask: mask.to_vec(),
        emb_drop,
        layers,
        final_norm,
        hidden,
        logits,
    }
}

/// Accumulates parameter gradients of a scalar loss whose gradient with
/// respect to this row's logits is `dlogits`.
pub(crate) fn backward_row<T: Scalar>(model: &EncoderModel<T>, tr: &RowTrace<T>, dlogits: &[T], grads: &mut [Vec<T>]) {
    let cfg = model.config();
    let (len, h, f, v) = (tr.len, cfg.hidden_size, cfg.ffn_size, cfg.vocab_size);
    let heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let tok = &model.tensors[TOKEN_EMBEDDING];

    // tied output projection
    let mut dhidden = vec![T::zero(); len * h];
    {
        let dtok = &mut grads[TOKEN_EMBEDDING];
        for p in 0..len {
            let hp = &tr.hidden[p * h..(p + 1) * h];
            let dhp = &mut dhidden[p * h..(p + 1) * h];
            for t in 0..v {
                let g = dlogits[p * v + t];
                if g == T::zero() {
                    continue;
                }
                let et = &tok[t * h..(t + 1) * h];
                let dt = &mut dtok[t * h..(t + 1) * h];
                for j in 0..h {
                    dt[j] += g * hp[j];
                    dhp[j] += g * et[j];
                }
            }
        }
    }

    let fi = final_index(cfg.n_layers);
    let (dg, db) = two_mut(grads, fi, fi + 1);
    let mut dx = layer_norm_backward(&dhidden, &tr.final_norm, model.final_gain(), len, h, dg, db);

    for l in (0..cfg.n_layers).rev() {
        let lt = &tr.layers[l];
        let w = |s| model.layer(l, s);
        let gi = |s| layer_index(l, s);

        let (dg, db) = two_mut(grads, gi(slot::LN2_G), gi(slot::LN2_B));
        let dz = layer_norm_backward(&dx, &lt.norm2, w(slot::LN2_G), len, h, dg, db);
        let mut dffn = dz.clone();
        apply_drop(&mut dffn, &lt.ffn_drop);
        let (dw, db) = two_mut(grads, gi(slot::W2), gi(slot::B2));
        let dact = affine_backward(&lt.act, &dffn, w(slot::W2), len, f, h, dw, db);
        let dpre: Vec<T> = dact.iter().zip(&lt.pre_act).map(|(&d, &z)| d * gelu_grad(z)).collect();
        let (dw, db) = two_mut(grads, gi(slot::W1), gi(slot::B1));
        let dx1_ffn = affine_backward(&lt.x1, &dpre, w(slot::W1), len, h, f, dw, db);
        let dx1: Vec<T> = dz.iter().zip(&dx1_ffn).map(|(a, b)| *a + *b).collect();

        let (dg, db) = two_mut(grads, gi(slot::LN1_G), gi(slot::LN1_B));
        let dy = layer_norm_backward(&dx1, &lt.norm1, w(slot::LN1_G), len, h, dg, db);
        let mut dattn = dy.clone();
        apply_drop(&mut dattn, &lt.attn_drop);
        let (dw, db) = two_mut(grads, gi(slot::WO), gi(slot::BO));
        let dctx = affine_backward(&lt.ctx, &dattn, w(slot::WO), len, h, h, dw, db);

        let mut dq = vec![T::zero(); len * h];
        let mut dk = vec![T::zero(); len * h];
        let mut dv = vec![T::zero(); len * h];
        let mut dp = vec![T::zero(); len];
        for hd in 0..heads {
            let off = hd * dh;
            for i in 0..len {
                let probs = &lt.probs[(hd * len + i) * len..(hd * len + i + 1) * len];
                let dci = &dctx[i * h + off..i * h + off + dh];
                let mut weighted = T::zero();
                for j in 0..len {
                    let p = probs[j];
                    if p == T::zero() {
                        dp[j] = T::zero();
                        continue;
                    }
                    let vj = &lt.v[j * h + off..j * h + off + dh];
                    dp[j] = crate::scalar::dot(dci, vj);
                    weighted += p * dp[j];
                    for (d, &c) in dv[j * h + off..j * h + off + dh].iter_mut().zip(dci) {
                        *d += p * c;
                    }
                }
                for j in 0..len {
                    let p = probs[j];
                    if p == T::zero() {
                        continue;
                    }
                    let ds = p * (dp[j] - weighted) * scale;
                    for d in 0..dh {
                        dq[i * h + off + d] += ds * lt.k[j * h + off + d];
                        dk[j * h + off + d] += ds * lt.q[i * h + off + d];
                    }
                }
            }
        }

        let mut dinput = dy;
        for (s_w, s_b, d) in [(slot::WQ, slot::BQ, &dq), (slot::WK, slot::BK, &dk), (slot::WV, slot::BV, &dv)] {
            let (dw, db) = two_mut(grads, gi(s_w), gi(s_b));
            let part = affine_backward(&lt.input, d, w(s_w), len, h, h, dw, db);
            dinput.iter_mut().zip(&part).for_each(|(a, b)| *a += *b);
        }
        dx = dinput;
    }

    apply_drop(&mut dx, &tr.emb_drop);
    for (p, &t) in tr.tokens.iter().enumerate() {
        let t = t as usize;
        for j in 0..h {
            grads[TOKEN_EMBEDDING][t * h + j] += dx[p * h + j];
            grads[POSITION_EMBEDDING][p * h + j] += dx[p * h + j];
        }
    }
}

fn two_mut<T>(v: &mut [Vec<T>], a: usize, b: usize) -> (&mut [T], &mut [T]) {
    debug_assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

/// Hidden states and logits for a whole padded batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    pub rows: usize,
    pub len: usize,
    pub hidden_size: usize,
    pub vocab_size: usize,
    /// `rows * len * hidden_size`
    pub hidden: Vec<T>,
    /// `rows * len * vocab_size`
    pub logits: Vec<T>,
}

impl<T> ForwardOutput<T> {
    pub fn hidden_at(&self, row: usize, pos: usize) -> &[T] {
        let h = self.hidden_size;
        let start = (row * self.len + pos) * h;
        &self.hidden[start..start + h]
    }
}

/// Rows are evaluated in parallel; each row's arithmetic is independent of
/// the others, so the output does not depend on the thread count.
pub fn forward<T: Scalar>(model: &EncoderModel<T>, batch: &PaddedBatch) -> Result<ForwardOutput<T>> {
    for r in 0..batch.rows {
        validate_row(model, batch.row(r), batch.mask_row(r))?;
    }
    let traces: Vec<RowTrace<T>> = (0..batch.rows)
        .into_par_iter()
        .map(|r| forward_row_with(model, batch.row(r), batch.mask_row(r), None))
        .collect();
    let cfg = model.config();
    Ok(ForwardOutput {
        rows: batch.rows,
        len: batch.len,
        hidden_size: cfg.hidden_size,
        vocab_size: cfg.vocab_size,
        hidden: traces.iter().flat_map(|t| t.hidden.iter().copied()).collect(),
        logits: traces.iter().flat_map(|t| t.logits.iter().copied()).collect(),
    })
}
