use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape hyperparameters of the path evaluator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerDims {
    /// Input embedding size.
    pub d_in: usize,
    /// Model width.
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Rows of the positional table; the longest path the model accepts.
    pub max_len: usize,
}

impl Default for ScorerDims {
    fn default() -> Self {
        ScorerDims {
            d_in: 1024,
            d_model: 128,
            layers: 2,
            heads: 4,
            d_ff: 512,
            max_len: 8,
        }
    }
}

impl ScorerDims {
    /// Defaults with the given input size.
    pub fn with_input(d_in: usize) -> Self {
        ScorerDims {
            d_in,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_in", self.d_in),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Precondition(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Precondition(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Glorot-uniform init treating the first axis as fan-in and the last as fan-out.
    fn glorot<R: Rng>(shape: &[usize], rng: &mut R) -> Self {
        let fan_in = shape[0];
        let fan_out = *shape.last().unwrap();
        let bound = glorot_bound(fan_in, fan_out);
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.gen_range(-bound..=bound)).collect(),
        }
    }
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// One pre-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub attn_q: Tensor,
    pub attn_k: Tensor,
    pub attn_v: Tensor,
    pub attn_o: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub ff_w1: Tensor,
    pub ff_b1: Tensor,
    pub ff_w2: Tensor,
    pub ff_b2: Tensor,
}

/// Every tensor of the evaluator. Weight matrices are stored `[in, out]`
/// row-major so a row vector is mapped as `x · W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScorerParams {
    pub dims: ScorerDims,
    /// Shared input projection for question and relation embeddings.
    pub proj: Tensor,
    pub pos: Tensor,
    pub layers: Vec<LayerParams>,
    /// Value map applied to the projected question in cross-attention.
    pub cross_value: Tensor,
    pub pool_w1: Tensor,
    pub pool_b1: Tensor,
    pub pool_w2: Tensor,
    pub pool_b2: Tensor,
    pub head_w1: Tensor,
    pub head_b1: Tensor,
    pub head_w2: Tensor,
    pub head_b2: Tensor,
}

impl ScorerParams {
    /// Glorot-uniform weights, unit layer-norm gains, zero biases.
    pub fn init(dims: ScorerDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dims.d_model;
        let ff = dims.d_ff;
        let proj = Tensor::glorot(&[dims.d_in, d], &mut rng);
        let pos = Tensor::glorot(&[dims.max_len, d], &mut rng);
        let layers = (0..dims.layers)
            .map(|_| LayerParams {
                attn_q: Tensor::glorot(&[d, d], &mut rng),
                attn_k: Tensor::glorot(&[d, d], &mut rng),
                attn_v: Tensor::glorot(&[d, d], &mut rng),
                attn_o: Tensor::glorot(&[d, d], &mut rng),
                ln1_gain: Tensor::filled(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                ln2_gain: Tensor::filled(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
                ff_w1: Tensor::glorot(&[d, ff], &mut rng),
                ff_b1: Tensor::zeros(&[ff]),
                ff_w2: Tensor::glorot(&[ff, d], &mut rng),
                ff_b2: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(ScorerParams {
            dims,
            proj,
            pos,
            layers,
            cross_value: Tensor::glorot(&[d, d], &mut rng),
            pool_w1: Tensor::glorot(&[d, ff], &mut rng),
            pool_b1: Tensor::zeros(&[ff]),
            pool_w2: Tensor::glorot(&[ff, 1], &mut rng),
            pool_b2: Tensor::zeros(&[1]),
            head_w1: Tensor::glorot(&[2 * d, ff], &mut rng),
            head_b1: Tensor::zeros(&[ff]),
            head_w2: Tensor::glorot(&[ff, 1], &mut rng),
            head_b2: Tensor::zeros(&[1]),
        })
    }

    /// Same shapes, all zeros. Used for gradients and optimizer moments.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    /// Canonical tensor order, shared by checkpoints and optimizers.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("proj".to_owned(), &self.proj), ("pos".to_owned(), &self.pos)];
        for (i, l) in self.layers.iter().enumerate() {
            let items = [
                ("attn_q", &l.attn_q),
                ("attn_k", &l.attn_k),
                ("attn_v", &l.attn_v),
                ("attn_o", &l.attn_o),
                ("ln1_gain", &l.ln1_gain),
                ("ln1_bias", &l.ln1_bias),
                ("ln2_gain", &l.ln2_gain),
                ("ln2_bias", &l.ln2_bias),
                ("ff_w1", &l.ff_w1),
                ("ff_b1", &l.ff_b1),
                ("ff_w2", &l.ff_w2),
                ("ff_b2", &l.ff_b2),
            ];
            out.extend(items.into_iter().map(|(n, t)| (format!("layers.{i}.{n}"), t)));
        }
        out.extend([
            ("cross_value".to_owned(), &self.cross_value),
            ("pool_w1".to_owned(), &self.pool_w1),
            ("pool_b1".to_owned(), &self.pool_b1),
            ("pool_w2".to_owned(), &self.pool_w2),
            ("pool_b2".to_owned(), &self.pool_b2),
            ("head_w1".to_owned(), &self.head_w1),
            ("head_b1".to_owned(), &self.head_b1),
            ("head_w2".to_owned(), &self.head_w2),
            ("head_b2".to_owned(), &self.head_b2),
        ]);
        out
    }

    /// Mutable tensors in [`ScorerParams::named_tensors`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.proj, &mut self.pos];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_q,
                &mut l.attn_k,
                &mut l.attn_v,
                &mut l.attn_o,
                &mut l.ln1_gain,
                &mut l.ln1_bias,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
                &mut l.ff_w1,
                &mut l.ff_b1,
                &mut l.ff_w2,
                &mut l.ff_b2,
            ]);
        }
        out.extend([
            &mut self.cross_value,
            &mut self.pool_w1,
            &mut self.pool_b1,
            &mut self.pool_w2,
            &mut self.pool_b2,
            &mut self.head_w1,
            &mut self.head_b1,
            &mut self.head_w2,
            &mut self.head_b2,
        ]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Name of the first tensor holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        self.named_tensors()
            .into_iter()
            .find(|(_, t)| t.data.iter().any(|v| !v.is_finite()))
            .map(|(n, _)| n)
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ScorerParams, scale: f64) {
        let src: Vec<&Tensor> = other.named_tensors().into_iter().map(|(_, t)| t).collect();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            dst.data.iter_mut().zip(&src.data).for_each(|(a, b)| *a += scale * b);
        }
    }

    /// Flattened copy of all values in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        self.named_tensors()
            .into_iter()
            .flat_map(|(_, t)| t.data.iter().copied())
            .collect()
    }

    /// Mutable access to the `index`-th scalar of the flattened view.
    pub fn coord_mut(&mut self, mut index: usize) -> &mut f64 {
        for t in self.tensors_mut() {
            if index < t.len() {
                return &mut t.data[index];
            }
            index -= t.len();
        }
        panic!("parameter coordinate out of range");
    }
}
