//! Forward and reverse passes of the path evaluator.
//!
//! A batch holds `B` relation paths, each paired with a question embedding,
//! laid out as a zero-padded `B × pad_to` grid of rows. Attention and
//! pooling only ever read the first `len[b]` rows of each sequence, so pad
//! rows never influence a score and receive exactly zero gradient.
//!
//! Pipeline per path:
//! 1. project relation and question embeddings with the shared `proj`,
//!    add the positional row for each hop;
//! 2. pre-norm transformer blocks (`x + Attn(LN(x))`, `x + FFN(LN(x))`, GELU);
//! 3. cross-attention from every hop to the single projected question
//!    vector, whose value is mapped by `cross_value`;
//! 4. attention pooling over hops with a two-layer MLP producing logits;
//! 5. a two-layer MLP over `[pooled ‖ question]` yields the scalar score.

#![allow(clippy::needless_range_loop)]

use super::linalg::{add_row_bias, dot, gelu, gelu_grad, matmul, matmul_a_bt, matmul_at_b_acc, softmax, sum_rows_acc};
use super::params::ScorerParams;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// A batch of `(question, path)` pairs, borrowed from embedding storage.
#[derive(Clone, Debug)]
pub struct SeqBatch<'a> {
    pub questions: Vec<&'a [f64]>,
    pub paths: Vec<Vec<&'a [f64]>>,
    /// Padded length; at least the longest path.
    pub pad_to: usize,
}

impl<'a> SeqBatch<'a> {
    /// Pads to the longest path.
    pub fn new(questions: Vec<&'a [f64]>, paths: Vec<Vec<&'a [f64]>>) -> Self {
        let pad_to = paths.iter().map(Vec::len).max().unwrap_or(0);
        SeqBatch {
            questions,
            paths,
            pad_to,
        }
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
}

struct LnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

struct LayerCache {
    ln1: LnCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `B × heads × pad × pad`, zero outside the valid block.
    probs: Vec<f64>,
    ctx: Vec<f64>,
    ln2: LnCache,
    b: Vec<f64>,
    f1: Vec<f64>,
    g: Vec<f64>,
}

/// Everything the reverse pass needs.
pub struct ForwardCache {
    batch: usize,
    pad: usize,
    lens: Vec<usize>,
    rel_in: Vec<f64>,
    q_in: Vec<f64>,
    pub(crate) qhat: Vec<f64>,
    layers: Vec<LayerCache>,
    /// Transformer output, `R × d`.
    pub(crate) encoded: Vec<f64>,
    cvec: Vec<f64>,
    cross_w: Vec<f64>,
    /// Cross-attended states, `R × d`.
    pub(crate) hidden: Vec<f64>,
    pool_u: Vec<f64>,
    pool_g: Vec<f64>,
    pub(crate) alpha: Vec<f64>,
    pub(crate) pooled: Vec<f64>,
    head_in: Vec<f64>,
    head_y: Vec<f64>,
    head_g: Vec<f64>,
    pub scores: Vec<f64>,
}

impl ForwardCache {
    pub fn lens(&self) -> &[usize] {
        &self.lens
    }

    pub fn pad(&self) -> usize {
        self.pad
    }
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], d: usize) -> (Vec<f64>, LnCache) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = is;
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gain[j] + bias[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// Returns dx; accumulates dgain/dbias.
fn layer_norm_backward(
    dy: &[f64],
    cache: &LnCache,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
    d: usize,
) -> Vec<f64> {
    let rows = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        if dyr.iter().all(|&v| v == 0.0) {
            continue;
        }
        let xh = &cache.xhat[r * d..(r + 1) * d];
        for j in 0..d {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dot(&dxhat, xh) / d as f64;
        let is = cache.inv_std[r];
        for j in 0..d {
            dx[r * d + j] = is * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

fn validate_batch(params: &ScorerParams, batch: &SeqBatch<'_>) -> Result<()> {
    let dims = &params.dims;
    if batch.questions.len() != batch.paths.len() {
        return Err(Error::Precondition(format!(
            "{} questions for {} paths",
            batch.questions.len(),
            batch.paths.len()
        )));
    }
    for (b, (q, path)) in batch.questions.iter().zip(&batch.paths).enumerate() {
        if path.is_empty() {
            return Err(Error::Precondition(format!("path {b} is empty")));
        }
        if path.len() > dims.max_len {
            return Err(Error::Precondition(format!(
                "path {b} has {} hops, model accepts at most {}",
                path.len(),
                dims.max_len
            )));
        }
        if path.len() > batch.pad_to {
            return Err(Error::Precondition(format!(
                "path {b} is longer than the padded length"
            )));
        }
        for v in std::iter::once(q).chain(path.iter()) {
            if v.len() != dims.d_in {
                return Err(Error::Precondition(format!(
                    "embedding of dimension {} given to a model expecting {}",
                    v.len(),
                    dims.d_in
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Input(format!("non-finite embedding entry in item {b}")));
            }
        }
    }
    Ok(())
}

pub fn forward(params: &ScorerParams, batch: &SeqBatch<'_>) -> Result<ForwardCache> {
    validate_batch(params, batch)?;
    let dims = params.dims;
    let (d, din, dff, heads) = (dims.d_model, dims.d_in, dims.d_ff, dims.heads);
    let dh = dims.head_dim();
    let nb = batch.len();
    let pad = batch.pad_to;
    let rows = nb * pad;
    let lens: Vec<usize> = batch.paths.iter().map(Vec::len).collect();

    let mut rel_in = vec![0.0; rows * din];
    let mut q_in = vec![0.0; nb * din];
    for b in 0..nb {
        q_in[b * din..(b + 1) * din].copy_from_slice(batch.questions[b]);
        for (i, z) in batch.paths[b].iter().enumerate() {
            let r = b * pad + i;
            rel_in[r * din..(r + 1) * din].copy_from_slice(z);
        }
    }

    let mut x = vec![0.0; rows * d];
    matmul(&rel_in, &params.proj.data, &mut x, rows, din, d, false);
    for b in 0..nb {
        for i in 0..lens[b] {
            let r = b * pad + i;
            let pos = &params.pos.data[i * d..(i + 1) * d];
            x[r * d..(r + 1) * d].iter_mut().zip(pos).for_each(|(v, p)| *v += p);
        }
    }
    let mut qhat = vec![0.0; nb * d];
    matmul(&q_in, &params.proj.data, &mut qhat, nb, din, d, false);

    let scale = 1.0 / (dh as f64).sqrt();
    let mut layer_caches = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (a, ln1) = layer_norm(&x, &layer.ln1_gain.data, &layer.ln1_bias.data, d);
        let mut q = vec![0.0; rows * d];
        let mut k = vec![0.0; rows * d];
        let mut v = vec![0.0; rows * d];
        matmul(&a, &layer.attn_q.data, &mut q, rows, d, d, false);
        matmul(&a, &layer.attn_k.data, &mut k, rows, d, d, false);
        matmul(&a, &layer.attn_v.data, &mut v, rows, d, d, false);

        let mut probs = vec![0.0; nb * heads * pad * pad];
        let mut ctx = vec![0.0; rows * d];
        let mut srow = vec![0.0; pad];
        for b in 0..nb {
            let len = lens[b];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..len {
                    let qi = &q[(b * pad + i) * d + off..(b * pad + i) * d + off + dh];
                    for j in 0..len {
                        let kj = &k[(b * pad + j) * d + off..(b * pad + j) * d + off + dh];
                        srow[j] = dot(qi, kj) * scale;
                    }
                    softmax(&mut srow[..len]);
                    let pbase = ((b * heads + h) * pad + i) * pad;
                    probs[pbase..pbase + len].copy_from_slice(&srow[..len]);
                    let out = &mut ctx[(b * pad + i) * d + off..(b * pad + i) * d + off + dh];
                    for j in 0..len {
                        let p = srow[j];
                        let vj = &v[(b * pad + j) * d + off..(b * pad + j) * d + off + dh];
                        out.iter_mut().zip(vj).for_each(|(o, vv)| *o += p * vv);
                    }
                }
            }
        }
        matmul(&ctx, &layer.attn_o.data, &mut x, rows, d, d, true);

        let (bn, ln2) = layer_norm(&x, &layer.ln2_gain.data, &layer.ln2_bias.data, d);
        let mut f1 = vec![0.0; rows * dff];
        matmul(&bn, &layer.ff_w1.data, &mut f1, rows, d, dff, false);
        add_row_bias(&mut f1, &layer.ff_b1.data);
        let g: Vec<f64> = f1.iter().map(|&u| gelu(u)).collect();
        matmul(&g, &layer.ff_w2.data, &mut x, rows, dff, d, true);
        add_row_bias(&mut x, &layer.ff_b2.data);

        layer_caches.push(LayerCache {
            ln1,
            a,
            q,
            k,
            v,
            probs,
            ctx,
            ln2,
            b: bn,
            f1,
            g,
        });
    }
    let encoded = x;

    // Cross-attention onto the single question key.
    let mut cvec = vec![0.0; nb * d];
    matmul(&qhat, &params.cross_value.data, &mut cvec, nb, d, d, false);
    let qscale = 1.0 / (d as f64).sqrt();
    let mut hidden = vec![0.0; rows * d];
    let mut cross_w = vec![0.0; rows];
    for b in 0..nb {
        let qb = &qhat[b * d..(b + 1) * d];
        let cb = &cvec[b * d..(b + 1) * d];
        for i in 0..lens[b] {
            let r = b * pad + i;
            let er = &encoded[r * d..(r + 1) * d];
            let mut w = [dot(er, qb) * qscale];
            softmax(&mut w);
            cross_w[r] = w[0];
            for j in 0..d {
                hidden[r * d + j] = er[j] + w[0] * cb[j];
            }
        }
    }

    // Attention pooling over hops.
    let mut pool_u = vec![0.0; rows * dff];
    matmul(&hidden, &params.pool_w1.data, &mut pool_u, rows, d, dff, false);
    add_row_bias(&mut pool_u, &params.pool_b1.data);
    let pool_g: Vec<f64> = pool_u.iter().map(|&u| gelu(u)).collect();
    let mut alpha = vec![0.0; rows];
    let mut pooled = vec![0.0; nb * d];
    for b in 0..nb {
        let len = lens[b];
        for i in 0..len {
            let r = b * pad + i;
            alpha[r] = dot(&pool_g[r * dff..(r + 1) * dff], &params.pool_w2.data) + params.pool_b2.data[0];
        }
        softmax(&mut alpha[b * pad..b * pad + len]);
        let sb = &mut pooled[b * d..(b + 1) * d];
        for i in 0..len {
            let r = b * pad + i;
            let a = alpha[r];
            sb.iter_mut()
                .zip(&hidden[r * d..(r + 1) * d])
                .for_each(|(s, h)| *s += a * h);
        }
    }

    // Scoring head over [pooled ‖ question].
    let mut head_in = vec![0.0; nb * 2 * d];
    for b in 0..nb {
        head_in[b * 2 * d..b * 2 * d + d].copy_from_slice(&pooled[b * d..(b + 1) * d]);
        head_in[b * 2 * d + d..(b + 1) * 2 * d].copy_from_slice(&qhat[b * d..(b + 1) * d]);
    }
    let mut head_y = vec![0.0; nb * dff];
    matmul(&head_in, &params.head_w1.data, &mut head_y, nb, 2 * d, dff, false);
    add_row_bias(&mut head_y, &params.head_b1.data);
    let head_g: Vec<f64> = head_y.iter().map(|&u| gelu(u)).collect();
    let scores: Vec<f64> = (0..nb)
        .map(|b| dot(&head_g[b * dff..(b + 1) * dff], &params.head_w2.data) + params.head_b2.data[0])
        .collect();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric { tensor: "score".into() });
    }

    Ok(ForwardCache {
        batch: nb,
        pad,
        lens,
        rel_in,
        q_in,
        qhat,
        layers: layer_caches,
        encoded,
        cvec,
        cross_w,
        hidden,
        pool_u,
        pool_g,
        alpha,
        pooled,
        head_in,
        head_y,
        head_g,
        scores,
    })
}

/// Accumulates `∂(Σ_b dscores[b]·S_b)/∂θ` into `grads`.
pub fn backward(params: &ScorerParams, cache: &ForwardCache, dscores: &[f64], grads: &mut ScorerParams) {
    let dims = params.dims;
    let (d, din, dff, heads) = (dims.d_model, dims.d_in, dims.d_ff, dims.heads);
    let dh = dims.head_dim();
    let nb = cache.batch;
    let pad = cache.pad;
    let rows = nb * pad;
    let lens = &cache.lens;
    assert_eq!(dscores.len(), nb);

    // Head.
    let mut dhead_y = vec![0.0; nb * dff];
    for b in 0..nb {
        let ds = dscores[b];
        grads.head_b2.data[0] += ds;
        for j in 0..dff {
            grads.head_w2.data[j] += cache.head_g[b * dff + j] * ds;
            dhead_y[b * dff + j] = ds * params.head_w2.data[j] * gelu_grad(cache.head_y[b * dff + j]);
        }
    }
    // Sequential in batch order, so mirrored rows cancel exactly.
    for b in 0..nb {
        let dy = &dhead_y[b * dff..(b + 1) * dff];
        for (i, &x) in cache.head_in[b * 2 * d..(b + 1) * 2 * d].iter().enumerate() {
            let row = &mut grads.head_w1.data[i * dff..(i + 1) * dff];
            row.iter_mut().zip(dy).for_each(|(g, v)| *g += x * v);
        }
    }
    sum_rows_acc(&dhead_y, &mut grads.head_b1.data);
    let mut dhead_in = vec![0.0; nb * 2 * d];
    matmul_a_bt(&dhead_y, &params.head_w1.data, &mut dhead_in, nb, dff, 2 * d, false);

    let mut dqhat = vec![0.0; nb * d];
    let mut dhidden = vec![0.0; rows * d];
    let mut dlogit = vec![0.0; rows];
    for b in 0..nb {
        let dpooled = &dhead_in[b * 2 * d..b * 2 * d + d];
        dqhat[b * d..(b + 1) * d].copy_from_slice(&dhead_in[b * 2 * d + d..(b + 1) * 2 * d]);
        // Pooling: s = Σ α_i h_i.
        let len = lens[b];
        let mut dalpha = vec![0.0; len];
        for i in 0..len {
            let r = b * pad + i;
            let a = cache.alpha[r];
            dalpha[i] = dot(&cache.hidden[r * d..(r + 1) * d], dpooled);
            dhidden[r * d..(r + 1) * d]
                .iter_mut()
                .zip(dpooled)
                .for_each(|(g, v)| *g += a * v);
        }
        let mix: f64 = (0..len).map(|i| cache.alpha[b * pad + i] * dalpha[i]).sum();
        for i in 0..len {
            let r = b * pad + i;
            dlogit[r] = cache.alpha[r] * (dalpha[i] - mix);
        }
    }
    // Pooling MLP.
    let mut dpool_u = vec![0.0; rows * dff];
    for r in 0..rows {
        let dl = dlogit[r];
        if dl == 0.0 {
            continue;
        }
        grads.pool_b2.data[0] += dl;
        for j in 0..dff {
            grads.pool_w2.data[j] += cache.pool_g[r * dff + j] * dl;
            dpool_u[r * dff + j] = dl * params.pool_w2.data[j] * gelu_grad(cache.pool_u[r * dff + j]);
        }
    }
    matmul_at_b_acc(&cache.hidden, &dpool_u, &mut grads.pool_w1.data, rows, d, dff);
    sum_rows_acc(&dpool_u, &mut grads.pool_b1.data);
    matmul_a_bt(&dpool_u, &params.pool_w1.data, &mut dhidden, rows, dff, d, true);

    // Cross-attention: h = e + w·c with w = softmax([e·q̂/√d]).
    let qscale = 1.0 / (d as f64).sqrt();
    let mut dx = vec![0.0; rows * d];
    let mut dcvec = vec![0.0; nb * d];
    for b in 0..nb {
        let cb = &cache.cvec[b * d..(b + 1) * d];
        for i in 0..lens[b] {
            let r = b * pad + i;
            let dhr = &dhidden[r * d..(r + 1) * d];
            let w = cache.cross_w[r];
            let dw = dot(dhr, cb);
            // Softmax Jacobian over the single key.
            let dl = w * (dw - w * dw);
            for j in 0..d {
                dx[r * d + j] = dhr[j] + dl * cache.qhat[b * d + j] * qscale;
                dqhat[b * d + j] += dl * cache.encoded[r * d + j] * qscale;
                dcvec[b * d + j] += w * dhr[j];
            }
        }
    }
    matmul_at_b_acc(&cache.qhat, &dcvec, &mut grads.cross_value.data, nb, d, d);
    matmul_a_bt(&dcvec, &params.cross_value.data, &mut dqhat, nb, d, d, true);

    // Transformer blocks, last to first. `dx` is the residual-stream gradient.
    let scale = 1.0 / (dh as f64).sqrt();
    for li in (0..params.layers.len()).rev() {
        let (layer, lc, gl) = (&params.layers[li], &cache.layers[li], &mut grads.layers[li]);
        // FFN: x2 = x1 + W2·gelu(W1·LN2(x1)).
        sum_rows_acc(&dx, &mut gl.ff_b2.data);
        matmul_at_b_acc(&lc.g, &dx, &mut gl.ff_w2.data, rows, dff, d);
        let mut df1 = vec![0.0; rows * dff];
        matmul_a_bt(&dx, &layer.ff_w2.data, &mut df1, rows, d, dff, false);
        df1.iter_mut().zip(&lc.f1).for_each(|(g, &u)| *g *= gelu_grad(u));
        matmul_at_b_acc(&lc.b, &df1, &mut gl.ff_w1.data, rows, d, dff);
        sum_rows_acc(&df1, &mut gl.ff_b1.data);
        let mut dbn = vec![0.0; rows * d];
        matmul_a_bt(&df1, &layer.ff_w1.data, &mut dbn, rows, dff, d, false);
        let dx1_ln = layer_norm_backward(
            &dbn,
            &lc.ln2,
            &layer.ln2_gain.data,
            &mut gl.ln2_gain.data,
            &mut gl.ln2_bias.data,
            d,
        );
        dx.iter_mut().zip(&dx1_ln).for_each(|(a, b)| *a += b);

        // Attention: x1 = x + Wo·ctx.
        matmul_at_b_acc(&lc.ctx, &dx, &mut gl.attn_o.data, rows, d, d);
        let mut dctx = vec![0.0; rows * d];
        matmul_a_bt(&dx, &layer.attn_o.data, &mut dctx, rows, d, d, false);
        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let mut dp = vec![0.0; pad];
        for b in 0..nb {
            let len = lens[b];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..len {
                    let ri = b * pad + i;
                    let pbase = ((b * heads + h) * pad + i) * pad;
                    let p = &lc.probs[pbase..pbase + len];
                    let dci = &dctx[ri * d + off..ri * d + off + dh];
                    for j in 0..len {
                        let rj = b * pad + j;
                        dp[j] = dot(dci, &lc.v[rj * d + off..rj * d + off + dh]);
                        for t in 0..dh {
                            dv[rj * d + off + t] += p[j] * dci[t];
                        }
                    }
                    let mix: f64 = (0..len).map(|j| p[j] * dp[j]).sum();
                    for j in 0..len {
                        let rj = b * pad + j;
                        let ds = p[j] * (dp[j] - mix) * scale;
                        for t in 0..dh {
                            dq[ri * d + off + t] += ds * lc.k[rj * d + off + t];
                            dk[rj * d + off + t] += ds * lc.q[ri * d + off + t];
                        }
                    }
                }
            }
        }
        matmul_at_b_acc(&lc.a, &dq, &mut gl.attn_q.data, rows, d, d);
        matmul_at_b_acc(&lc.a, &dk, &mut gl.attn_k.data, rows, d, d);
        matmul_at_b_acc(&lc.a, &dv, &mut gl.attn_v.data, rows, d, d);
        let mut da = vec![0.0; rows * d];
        matmul_a_bt(&dq, &layer.attn_q.data, &mut da, rows, d, d, false);
        matmul_a_bt(&dk, &layer.attn_k.data, &mut da, rows, d, d, true);
        matmul_a_bt(&dv, &layer.attn_v.data, &mut da, rows, d, d, true);
        let dx_ln = layer_norm_backward(
            &da,
            &lc.ln1,
            &layer.ln1_gain.data,
            &mut gl.ln1_gain.data,
            &mut gl.ln1_bias.data,
            d,
        );
        dx.iter_mut().zip(&dx_ln).for_each(|(a, b)| *a += b);
    }

    // Input projection and positions.
    for b in 0..nb {
        for i in 0..lens[b] {
            let r = b * pad + i;
            grads.pos.data[i * d..(i + 1) * d]
                .iter_mut()
                .zip(&dx[r * d..(r + 1) * d])
                .for_each(|(g, v)| *g += v);
        }
    }
    matmul_at_b_acc(&cache.rel_in, &dx, &mut grads.proj.data, rows, din, d);
    matmul_at_b_acc(&cache.q_in, &dqhat, &mut grads.proj.data, nb, din, d);
}

/// Intermediates of one scored path.
#[derive(Clone, Debug, PartialEq)]
pub struct PathEncoding {
    /// Transformer output per hop (`l × d`, row-major).
    pub encoded: Vec<f64>,
    /// Cross-attended states per hop (`l × d`).
    pub hidden: Vec<f64>,
    /// Pooling weights over hops.
    pub alpha: Vec<f64>,
    /// Pooled path vector (`d`).
    pub pooled: Vec<f64>,
    /// Projected question (`d`).
    pub question: Vec<f64>,
    pub score: f64,
}

/// Scores one path and returns every intermediate.
pub fn score(params: &ScorerParams, question: &[f64], path: &[&[f64]]) -> Result<PathEncoding> {
    let batch = SeqBatch::new(vec![question], vec![path.to_vec()]);
    let cache = forward(params, &batch)?;
    let d = params.dims.d_model;
    let l = path.len();
    Ok(PathEncoding {
        encoded: cache.encoded[..l * d].to_vec(),
        hidden: cache.hidden[..l * d].to_vec(),
        alpha: cache.alpha[..l].to_vec(),
        pooled: cache.pooled.clone(),
        question: cache.qhat.clone(),
        score: cache.scores[0],
    })
}

/// Scores several paths for one question in a single padded batch.
pub fn score_batch(params: &ScorerParams, question: &[f64], paths: &[Vec<&[f64]>]) -> Result<Vec<f64>> {
    let pad = paths.iter().map(Vec::len).max().unwrap_or(0);
    score_padded(params, question, paths, pad)
}

/// As [`score_batch`] with an explicit padded length (at least the longest path).
pub fn score_padded(params: &ScorerParams, question: &[f64], paths: &[Vec<&[f64]>], pad_to: usize) -> Result<Vec<f64>> {
    if paths.is_empty() {
        return Ok(Vec::new());
    }
    let batch = SeqBatch {
        questions: vec![question; paths.len()],
        paths: paths.to_vec(),
        pad_to,
    };
    Ok(forward(params, &batch)?.scores)
}
