//! Pairwise ranking objective, Adam, and the pretraining / fine-tuning loops.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::linalg::sigmoid;
use super::model::{backward, forward, SeqBatch};
use super::params::ScorerParams;
use crate::embed::Embedding;
use crate::error::{Error, Result};

pub const PRETRAIN_LR: f64 = 1e-4;
pub const FINETUNE_LR: f64 = 1e-5;

/// `−log σ(s_pos − s_neg)`, evaluated without overflow.
pub fn bpr_loss(s_pos: f64, s_neg: f64) -> f64 {
    softplus(s_neg - s_pos)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// A question with one preferred and one dispreferred relation path.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainTriplet {
    pub question: Embedding,
    pub positive: Vec<Embedding>,
    pub negative: Vec<Embedding>,
}

impl TrainTriplet {
    pub fn new(question: Embedding, positive: Vec<Embedding>, negative: Vec<Embedding>) -> Result<Self> {
        if positive.is_empty() || negative.is_empty() {
            return Err(Error::Precondition("triplet paths need at least one relation".into()));
        }
        Ok(TrainTriplet {
            question,
            positive,
            negative,
        })
    }
}

/// Interleaves `p+, p−` per triplet so mirrored gradient terms meet in order.
fn stacked<'a>(triplets: &'a [TrainTriplet]) -> SeqBatch<'a> {
    let mut questions = Vec::with_capacity(2 * triplets.len());
    let mut paths = Vec::with_capacity(2 * triplets.len());
    for t in triplets {
        for p in [&t.positive, &t.negative] {
            questions.push(t.question.as_slice());
            paths.push(p.iter().map(Embedding::as_slice).collect());
        }
    }
    SeqBatch::new(questions, paths)
}

/// Mean BPR loss of a batch and its exact gradient.
pub fn loss_and_grads(params: &ScorerParams, triplets: &[TrainTriplet]) -> Result<(f64, ScorerParams)> {
    if triplets.is_empty() {
        return Err(Error::Precondition("empty training batch".into()));
    }
    let m = triplets.len();
    let cache = forward(params, &stacked(triplets))?;
    let s = &cache.scores;
    let mut loss = 0.0;
    let mut dscores = vec![0.0; 2 * m];
    for i in 0..m {
        let (pos, neg) = (s[2 * i], s[2 * i + 1]);
        loss += bpr_loss(pos, neg);
        // d/dΔ softplus(−Δ) = −σ(−Δ)
        let g = sigmoid(neg - pos) / m as f64;
        dscores[2 * i] = -g;
        dscores[2 * i + 1] = g;
    }
    let mut grads = params.zeros_like();
    backward(params, &cache, &dscores, &mut grads);
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::Numeric { tensor: name });
    }
    Ok((loss / m as f64, grads))
}

/// Mean BPR loss without gradients.
pub fn batch_loss(params: &ScorerParams, triplets: &[TrainTriplet]) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::Precondition("empty training batch".into()));
    }
    let m = triplets.len();
    let scores = forward(params, &stacked(triplets))?.scores;
    Ok((0..m).map(|i| bpr_loss(scores[2 * i], scores[2 * i + 1])).sum::<f64>() / m as f64)
}

/// Fraction of triplets with `S(p+) > S(p−)`.
pub fn ranking_accuracy(params: &ScorerParams, triplets: &[TrainTriplet]) -> Result<f64> {
    if triplets.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in triplets.chunks(64) {
        let scores = forward(params, &stacked(chunk))?.scores;
        correct += scores.chunks_exact(2).filter(|s| s[0] > s[1]).count();
    }
    Ok(correct as f64 / triplets.len() as f64)
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: ScorerParams,
    pub v: ScorerParams,
    pub step: u64,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(params: &ScorerParams) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update on flat slices at step `t` (1-based).
pub fn adam_update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64) {
    let (b1, b2) = (AdamState::BETA1, AdamState::BETA2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        p[i] -= lr * mh / (vh.sqrt() + AdamState::EPS);
    }
}

pub fn adam_step(params: &mut ScorerParams, grads: &ScorerParams, state: &mut AdamState, lr: f64) {
    state.step += 1;
    let t = state.step;
    let gs: Vec<_> = grads.named_tensors().into_iter().map(|(_, t)| t).collect();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, g), m), v) in params.tensors_mut().into_iter().zip(gs).zip(ms).zip(vs) {
        adam_update(&mut p.data, &g.data, &mut m.data, &mut v.data, t, lr);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            lr: PRETRAIN_LR,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Minibatch Adam on the BPR objective. Returns the mean loss of each epoch.
pub fn pretrain(params: &mut ScorerParams, triplets: &[TrainTriplet], config: &TrainConfig) -> Result<Vec<f64>> {
    if triplets.is_empty() {
        return Err(Error::Precondition("no training triplets".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Precondition("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = AdamState::new(params);
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<TrainTriplet> = chunk.iter().map(|&i| triplets[i].clone()).collect();
            let (loss, grads) = match loss_and_grads(params, &batch) {
                Ok(v) => v,
                Err(Error::Numeric { .. }) => return Err(Error::Divergence { epoch, loss: f64::NAN }),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            total += loss * batch.len() as f64;
            adam_step(params, &grads, &mut state, config.lr);
        }
        let mean = total / triplets.len() as f64;
        log::info!("epoch {}: mean loss {mean:.6}", epoch + 1);
        curve.push(mean);
        if let Some(tensor) = params.first_non_finite() {
            log::error!("parameter tensor {tensor} became non-finite");
            return Err(Error::Divergence { epoch, loss: mean });
        }
    }
    Ok(curve)
}

/// One full-batch gradient step on pseudo-labelled pairs. Returns the pre-step loss.
pub fn finetune_step(params: &mut ScorerParams, pairs: &[TrainTriplet], state: &mut AdamState, lr: f64) -> Result<f64> {
    let (loss, grads) = loss_and_grads(params, pairs)?;
    adam_step(params, &grads, state, lr);
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::params::ScorerDims;
    use rand::Rng;

    fn dims() -> ScorerDims {
        ScorerDims {
            d_in: 6,
            d_model: 8,
            layers: 2,
            heads: 2,
            d_ff: 12,
            max_len: 4,
        }
    }

    fn emb(rng: &mut ChaCha8Rng, d: usize) -> Embedding {
        Embedding::new((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn triplets(seed: u64, n: usize) -> Vec<TrainTriplet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let q = emb(&mut rng, 6);
                let lp = rng.gen_range(1..=4);
                let ln = rng.gen_range(1..=4);
                let p = (0..lp).map(|_| emb(&mut rng, 6)).collect();
                let ng = (0..ln).map(|_| emb(&mut rng, 6)).collect();
                TrainTriplet::new(q, p, ng).unwrap()
            })
            .collect()
    }

    #[test]
    fn loss_values() {
        assert_eq!(bpr_loss(0.3, 0.3), std::f64::consts::LN_2);
        assert!((bpr_loss(10.0, 0.0) - 4.539889921686464e-5).abs() < 1e-15);
        assert!((bpr_loss(0.0, 10.0) - 10.000045398899218).abs() < 1e-12);
        assert!(bpr_loss(-800.0, 800.0).is_finite());
    }

    #[test]
    fn identical_sides_give_ln2_and_zero_head_gradient() {
        let params = ScorerParams::init(dims(), 1).unwrap();
        let mut ts = triplets(2, 3);
        for t in &mut ts {
            t.negative = t.positive.clone();
        }
        let (loss, grads) = loss_and_grads(&params, &ts).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(grads.head_w1.data.iter().all(|&g| g == 0.0));
        assert!(grads.head_w2.data.iter().all(|&g| g == 0.0));
        assert_eq!(grads.head_b2.data[0], 0.0);
    }

    #[test]
    fn gradient_is_mean_over_sub_batches() {
        let params = ScorerParams::init(dims(), 3).unwrap();
        let ts = triplets(4, 5);
        let (_, all) = loss_and_grads(&params, &ts).unwrap();
        let (_, a) = loss_and_grads(&params, &ts[..2]).unwrap();
        let (_, b) = loss_and_grads(&params, &ts[2..]).unwrap();
        let mut mix = a.zeros_like();
        mix.add_scaled(&a, 2.0 / 5.0);
        mix.add_scaled(&b, 3.0 / 5.0);
        for (x, y) in all.flatten().iter().zip(mix.flatten()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let (mut p, g, mut m, mut v) = ([1.0], [1.0], [0.0], [0.0]);
        adam_update(&mut p, &g, &mut m, &mut v, 1, 0.1);
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_is_a_no_op_on_zero_gradient_or_zero_lr() {
        let mut params = ScorerParams::init(dims(), 5).unwrap();
        let before = params.clone();
        let mut state = AdamState::new(&params);
        let zeros = params.zeros_like();
        adam_step(&mut params, &zeros, &mut state, 0.1);
        assert_eq!(params, before);
        let (_, grads) = loss_and_grads(&params, &triplets(6, 4)).unwrap();
        adam_step(&mut params, &grads, &mut state, 0.0);
        assert_eq!(params, before);
        assert_eq!(state.step, 2);
    }

    #[test]
    fn pretrain_is_deterministic_and_zero_epochs_is_identity() {
        let ts = triplets(7, 20);
        let cfg = TrainConfig {
            epochs: 2,
            lr: 1e-3,
            batch_size: 8,
            seed: 9,
        };
        let mut a = ScorerParams::init(dims(), 8).unwrap();
        let mut b = a.clone();
        let ca = pretrain(&mut a, &ts, &cfg).unwrap();
        let cb = pretrain(&mut b, &ts, &cfg).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(a, b);

        let mut c = ScorerParams::init(dims(), 8).unwrap();
        let before = c.clone();
        let curve = pretrain(&mut c, &ts, &TrainConfig { epochs: 0, ..cfg }).unwrap();
        assert!(curve.is_empty());
        assert_eq!(c, before);
    }

    #[test]
    fn finetune_widens_a_single_pair_margin() {
        let mut params = ScorerParams::init(dims(), 10).unwrap();
        let pair = triplets(11, 1);
        let mut state = AdamState::new(&params);
        let margin = |p: &ScorerParams| {
            let s = forward(p, &stacked(&pair)).unwrap().scores;
            s[0] - s[1]
        };
        let mut last = margin(&params);
        for _ in 0..50 {
            finetune_step(&mut params, &pair, &mut state, FINETUNE_LR).unwrap();
            let now = margin(&params);
            assert!(now > last, "{now} <= {last}");
            last = now;
        }
    }
}
