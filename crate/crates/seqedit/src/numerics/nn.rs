//! Transformer building blocks: linear layers, layer norm, multi-head
//! attention, feed-forward, and pre-norm encoder/decoder layers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::ops;
use crate::numerics::tensor::{Scalar, Tensor};

/// Additive attention bias for masked positions. Large enough that the
/// masked weights underflow to exactly zero after the row-max shift.
pub const MASK_NEG: f64 = -1e30;

/// Fan-in scaled uniform init: U(−1/√fan_in, 1/√fan_in).
pub fn uniform_fanin<T: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data: Vec<T> = (0..fan_in * fan_out)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(data, &[fan_in, fan_out]).expect("sized buffer")
}

/// Named parameter list in a stable order; the unit of optimization,
/// freezing, checksumming, and checkpointing.
pub struct ParamSet<T: Scalar> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.entries.push((name.into(), t));
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, Tensor<T>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn set_requires_grad(&self, requires: bool) {
        for (_, t) in &self.entries {
            t.set_requires_grad(requires);
        }
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }

    /// FNV-1a over the little-endian bytes of every parameter, in order.
    /// Detects any parameter change, e.g. for the frozen-encoder contract.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for (name, t) in &self.entries {
            bytes.extend_from_slice(name.as_bytes());
            t.with_data(|d| {
                for &v in d {
                    v.append_le_bytes(&mut bytes);
                }
            });
        }
        crate::util::fnv1a64(&bytes)
    }
}

/// Affine layer with weight `[in × out]` and bias `[out]`.
#[derive(Debug)]
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: uniform_fanin(rng, input, output).as_param(),
            bias: Tensor::zeros(&[output]).as_param(),
        }
    }

    /// All-zero layer (used for FiLM-style inits and test fixtures).
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[input, output]).as_param(),
            bias: Tensor::zeros(&[output]).as_param(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::linear(x, &self.weight, &self.bias)
    }

    /// Apply to a rank-1 vector, returning a rank-1 vector.
    pub fn forward_vec(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        let n = v.len();
        let row = ops::reshape(v, &[1, n])?;
        let out = self.forward(&row)?;
        let cols = out.cols()?;
        ops::reshape(&out, &[cols])
    }

    pub fn collect_params(&self, prefix: &str, out: &mut ParamSet<T>) {
        out.push(format!("{prefix}.weight"), self.weight.clone());
        out.push(format!("{prefix}.bias"), self.bias.clone());
    }
}

#[derive(Debug)]
pub struct LayerNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: T,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::full(&[dim], T::one()).as_param(),
            beta: Tensor::zeros(&[dim]).as_param(),
            eps: T::from_f64(1e-5),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::layer_norm(x, &self.gamma, &self.beta, self.eps)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut ParamSet<T>) {
        out.push(format!("{prefix}.gamma"), self.gamma.clone());
        out.push(format!("{prefix}.beta"), self.beta.clone());
    }
}

/// Causal attention bias: position i may attend to positions ≤ i.
pub fn causal_bias<T: Scalar>(len: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); len * len];
    let neg = T::from_f64(MASK_NEG);
    for i in 0..len {
        for j in (i + 1)..len {
            data[i * len + j] = neg;
        }
    }
    Tensor::from_vec(data, &[len, len]).expect("sized buffer")
}

/// Padding bias: every query row masks the key positions where `mask_k` is
/// false.
pub fn padding_bias<T: Scalar>(query_len: usize, mask_k: &[bool]) -> Tensor<T> {
    let lk = mask_k.len();
    let neg = T::from_f64(MASK_NEG);
    let mut data = vec![T::zero(); query_len * lk];
    for i in 0..query_len {
        for (j, &keep) in mask_k.iter().enumerate() {
            if !keep {
                data[i * lk + j] = neg;
            }
        }
    }
    Tensor::from_vec(data, &[query_len, lk]).expect("sized buffer")
}

/// Scaled dot-product attention with `heads` parallel heads.
pub struct MultiHeadAttention<T: Scalar> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub heads: usize,
    dim: usize,
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn new(dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "model dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(dim, dim, rng),
            wk: Linear::new(dim, dim, rng),
            wv: Linear::new(dim, dim, rng),
            wo: Linear::new(dim, dim, rng),
            heads,
            dim,
        })
    }

    /// Attend from `q_in` (`[Lq × d]`) over `kv_in` (`[Lk × d]`), with an
    /// optional additive bias `[Lq × Lk]` holding 0 / `MASK_NEG`.
    pub fn forward(
        &self,
        q_in: &Tensor<T>,
        kv_in: &Tensor<T>,
        bias: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let q = self.wq.forward(q_in)?;
        let k = self.wk.forward(kv_in)?;
        let v = self.wv.forward(kv_in)?;
        let dh = self.dim / self.heads;
        let inv_sqrt = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut head_outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = ops::slice_cols(&q, h * dh, dh)?;
            let kh = ops::slice_cols(&k, h * dh, dh)?;
            let vh = ops::slice_cols(&v, h * dh, dh)?;
            let mut scores = ops::scale(&ops::matmul(&qh, &ops::transpose(&kh)?)?, inv_sqrt);
            if let Some(b) = bias {
                scores = ops::add(&scores, b)?;
            }
            let weights = ops::softmax_rows(&scores)?;
            head_outputs.push(ops::matmul(&weights, &vh)?);
        }
        let mut merged = head_outputs[0].clone();
        for h in &head_outputs[1..] {
            merged = ops::concat_cols(&merged, h)?;
        }
        self.wo.forward(&merged)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut ParamSet<T>) {
        self.wq.collect_params(&format!("{prefix}.wq"), out);
        self.wk.collect_params(&format!("{prefix}.wk"), out);
        self.wv.collect_params(&format!("{prefix}.wv"), out);
        self.wo.collect_params(&format!("{prefix}.wo"), out);
    }
}

/// Two-layer position-wise feed-forward with GELU.
pub struct FeedForward<T: Scalar> {
    pub lin1: Linear<T>,
    pub lin2: Linear<T>,
}

impl<T: Scalar> FeedForward<T> {
    pub fn new(dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            lin1: Linear::new(dim, hidden, rng),
            lin2: Linear::new(hidden, dim, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.lin2.forward(&ops::gelu(&self.lin1.forward(x)?))
    }

    pub fn collect_params(&self, prefix: &str, out: &mut ParamSet<T>) {
        self.lin1.collect_params(&format!("{prefix}.lin1"), out);
        self.lin2.collect_params(&format!("{prefix}.lin2"), out);
    }
}

/// Pre-norm bidirectional encoder layer.
pub struct EncoderLayer<T: Scalar> {
    pub ln1: LayerNorm<T>,
    pub attn: MultiHeadAttention<T>,
    pub ln2: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

impl<T: Scalar> EncoderLayer<T> {
    pub fn new(dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(EncoderLayer {
            ln1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(dim, heads, rng)?,
            ln2: LayerNorm::new(dim),
            ffn: FeedForward::new(dim, 4 * dim, rng),
        })
    }

    pub fn forward(&self, x: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let normed = self.ln1.forward(x)?;
        let x = ops::add(x, &self.attn.forward(&normed, &normed, bias)?)?;
        let out = ops::add(&x, &self.ffn.forward(&self.ln2.forward(&x)?)?)?;
        Ok(out)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut ParamSet<T>) {
        self.ln1.collect_params(&format!("{prefix}.ln1"), out);
        self.attn.collect_params(&format!("{prefix}.attn"), out);
        self.ln2.collect_params(&format!("{prefix}.ln2"), out);
        self.ffn.collect_params(&format!("{prefix}.ffn"), out);
    }
}

/// Pre-norm decoder layer: causal self-attention, cross-attention over the
/// conditioning features, feed-forward.
pub struct DecoderLayer<T: Scalar> {
    pub ln1: LayerNorm<T>,
    pub self_attn: MultiHeadAttention<T>,
    pub ln2: LayerNorm<T>,
    pub cross_attn: MultiHeadAttention<T>,
    pub ln3: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

impl<T: Scalar> DecoderLayer<T> {
    pub fn new(dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(DecoderLayer {
            ln1: LayerNorm::new(dim),
            self_attn: MultiHeadAttention::new(dim, heads, rng)?,
            ln2: LayerNorm::new(dim),
            cross_attn: MultiHeadAttention::new(dim, heads, rng)?,
            ln3: LayerNorm::new(dim),
            ffn: FeedForward::new(dim, 4 * dim, rng),
        })
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        cond: &Tensor<T>,
        causal: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let normed = self.ln1.forward(x)?;
        let x = ops::add(x, &self.self_attn.forward(&normed, &normed, Some(causal))?)?;
        let x = ops::add(
            &x,
            &self.cross_attn.forward(&self.ln2.forward(&x)?, cond, None)?,
        )?;
        let out = ops::add(&x, &self.ffn.forward(&self.ln3.forward(&x)?)?)?;
        Ok(out)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut ParamSet<T>) {
        self.ln1.collect_params(&format!("{prefix}.ln1"), out);
        self.self_attn
            .collect_params(&format!("{prefix}.self_attn"), out);
        self.ln2.collect_params(&format!("{prefix}.ln2"), out);
        self.cross_attn
            .collect_params(&format!("{prefix}.cross_attn"), out);
        self.ln3.collect_params(&format!("{prefix}.ln3"), out);
        self.ffn.collect_params(&format!("{prefix}.ffn"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(MultiHeadAttention::<f64>::new(10, 3, &mut rng).is_err());
        assert!(MultiHeadAttention::<f64>::new(12, 3, &mut rng).is_ok());
    }

    #[test]
    fn single_position_attention_is_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let attn = MultiHeadAttention::<f64>::new(8, 2, &mut rng).unwrap();
        let x = uniform_fanin::<f64>(&mut rng, 1, 8);
        let out = attn.forward(&x, &x, None).unwrap();
        // With one position the softmax weight is 1, so out = wo(wv(x)).
        let expected = attn.wo.forward(&attn.wv.forward(&x).unwrap()).unwrap();
        for (a, b) in out.value().iter().zip(expected.value()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_positions_get_zero_attention_weight() {
        // Recompute the head-0 weights by hand and check the masked column.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let attn = MultiHeadAttention::<f64>::new(4, 1, &mut rng).unwrap();
        let x = uniform_fanin::<f64>(&mut rng, 3, 4);
        let bias = padding_bias::<f64>(3, &[true, true, false]);
        let q = attn.wq.forward(&x).unwrap();
        let k = attn.wk.forward(&x).unwrap();
        let scores = ops::scale(
            &ops::matmul(&q, &ops::transpose(&k).unwrap()).unwrap(),
            0.5,
        );
        let weights = ops::softmax_rows(&ops::add(&scores, &bias).unwrap()).unwrap();
        for row in weights.value().chunks(3) {
            assert_eq!(row[2], 0.0);
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn param_set_checksum_changes_with_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lin = Linear::<f32>::new(3, 2, &mut rng);
        let mut params = ParamSet::new();
        lin.collect_params("lin", &mut params);
        let before = params.checksum();
        let mut v = lin.weight.value();
        v[0] += 1.0;
        lin.weight.set_data(v).unwrap();
        assert_ne!(before, params.checksum());
    }
}
