//! Symmetric contrastive alignment of the protein and biotext embedding
//! spaces, plus retrieval diagnostics and the pretraining loop.
//!
//! For a batch of N index-matched pairs with similarity matrix S (rows:
//! proteins, cols: texts), the protein-to-text loss is
//! `−(1/N)·Σ_i log softmax_row(S/τ)[i,i]`, the text-to-protein loss is the
//! transposed mirror, and the alignment objective is half their sum. Logits
//! are shifted by their row max before exponentiation; at τ = 0.01 the raw
//! exponentials would overflow.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bundle::ModelBundle;
use crate::corpus::Pair;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::numerics::optim::{Adam, AdamConfig};
use crate::numerics::tensor::no_grad;
use crate::numerics::{ops, Scalar, Tensor};
use crate::tokenize::{encode_protein, encode_text, Vocabulary};
use crate::util::derive_seed;

/// N index-matched protein/text embeddings (`[N × p]` each) and the softmax
/// temperature.
pub struct AlignBatch<T: Scalar> {
    pub protein: Tensor<T>,
    pub text: Tensor<T>,
    pub temperature: f64,
}

impl<T: Scalar> AlignBatch<T> {
    pub fn new(protein: Tensor<T>, text: Tensor<T>, temperature: f64) -> Result<Self> {
        if temperature <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let (np, dp) = (protein.rows()?, protein.cols()?);
        let (nt, dt) = (text.rows()?, text.cols()?);
        if np != nt || dp != dt {
            return Err(Error::ShapeMismatch {
                op: "align_batch",
                lhs: protein.shape(),
                rhs: text.shape(),
            });
        }
        if np == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        Ok(AlignBatch {
            protein,
            text,
            temperature,
        })
    }

    pub fn len(&self) -> usize {
        self.protein.rows().expect("validated rank-2")
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn similarities(&self) -> Result<Tensor<T>> {
        ops::matmul(&self.protein, &ops::transpose(&self.text)?)
    }
}

pub struct AlignLosses<T: Scalar> {
    pub p2t: Tensor<T>,
    pub t2p: Tensor<T>,
    pub total: Tensor<T>,
}

/// Sum over rows of `−(1/N)·log softmax_row(logits)[i,i]`.
fn diagonal_nll<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let n = logits.rows()?;
    let ls = ops::log_softmax_rows(logits)?;
    let mut eye = vec![T::zero(); n * n];
    for i in 0..n {
        eye[i * n + i] = T::one();
    }
    let eye = Tensor::from_vec(eye, &[n, n])?;
    let diag_sum = ops::sum_all(&ops::mul(&ls, &eye)?)?;
    Ok(ops::scale(&diag_sum, T::from_f64(-1.0 / n as f64)))
}

/// Both directional losses and their half-sum, computed from a raw
/// similarity matrix. Exposed separately so batch-independent identities
/// (e.g. shift invariance) can be tested on synthetic similarities.
pub fn align_losses_from_similarities<T: Scalar>(
    similarities: &Tensor<T>,
    temperature: f64,
) -> Result<AlignLosses<T>> {
    if temperature <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let (r, c) = (similarities.rows()?, similarities.cols()?);
    if r != c {
        return Err(Error::InvalidShape {
            op: "align_losses",
            msg: format!("similarity matrix must be square, got {r}×{c}"),
        });
    }
    let logits = ops::scale(similarities, T::from_f64(1.0 / temperature));
    let p2t = diagonal_nll(&logits)?;
    let t2p = diagonal_nll(&ops::transpose(&logits)?)?;
    let total = ops::scale(&ops::add(&p2t, &t2p)?, T::from_f64(0.5));
    Ok(AlignLosses { p2t, t2p, total })
}

/// Protein-to-text alignment loss (summed over the batch).
pub fn loss_p2t<T: Scalar>(batch: &AlignBatch<T>) -> Result<Tensor<T>> {
    Ok(align_losses_from_similarities(&batch.similarities()?, batch.temperature)?.p2t)
}

/// Text-to-protein alignment loss (summed over the batch).
pub fn loss_t2p<T: Scalar>(batch: &AlignBatch<T>) -> Result<Tensor<T>> {
    Ok(align_losses_from_similarities(&batch.similarities()?, batch.temperature)?.t2p)
}

/// The full contrastive objective: half the sum of both directional losses.
pub fn loss_align<T: Scalar>(batch: &AlignBatch<T>) -> Result<Tensor<T>> {
    Ok(align_losses_from_similarities(&batch.similarities()?, batch.temperature)?.total)
}

/// Fraction of queries whose true partner ranks in the top k by dot-product
/// similarity; ties resolve toward the lower index.
pub fn retrieval_topk(queries: &[Vec<f64>], targets: &[Vec<f64>], k: usize) -> Result<f64> {
    let n = queries.len();
    if n == 0 || targets.len() != n {
        return Err(Error::InvalidArgument(format!(
            "retrieval needs equal nonzero counts, got {n} and {}",
            targets.len()
        )));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "k = {k} out of range for {n} candidates"
        )));
    }
    let mut hits = 0usize;
    for (i, q) in queries.iter().enumerate() {
        let sims: Vec<f64> = targets
            .iter()
            .map(|t| q.iter().zip(t).map(|(a, b)| a * b).sum())
            .collect();
        let true_sim = sims[i];
        let rank = sims
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > true_sim || (s == true_sim && j < i))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// One structured log line per epoch. Epoch 0 is the pre-training snapshot.
#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss_align: f64,
    pub top1: f64,
    pub top5: f64,
    pub wall_ms: u128,
}

impl std::fmt::Display for EpochStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "epoch={} loss_align={:.6} top1={:.4} top5={:.4} wall_ms={}",
            self.epoch, self.loss_align, self.top1, self.top5, self.wall_ms
        )
    }
}

#[derive(Debug, Clone)]
pub struct PretrainSettings {
    pub protein: EncoderConfig,
    pub text: EncoderConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub temperature: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Content-token budget for the text vocabulary built from the corpus.
    pub text_vocab_budget: usize,
}

pub struct PretrainOutput {
    pub bundle: ModelBundle<f32>,
    pub vocab: Vocabulary,
    pub epochs: Vec<EpochStats>,
}

/// Embed every pair with a frozen bundle; returns (protein, text) rows as
/// f64 for metric code.
pub fn embed_pairs(
    bundle: &ModelBundle<f32>,
    vocab: &Vocabulary,
    pairs: &[Pair],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    no_grad(|| {
        let mut proteins = Vec::with_capacity(pairs.len());
        let mut texts = Vec::with_capacity(pairs.len());
        for pair in pairs {
            let ptok = encode_protein(&pair.sequence, bundle.protein_encoder.cfg.max_len)?;
            let ttok = encode_text(&pair.biotext, vocab, bundle.text_encoder.cfg.max_len)?;
            let p = bundle.protein_encoder.encode_tok(&ptok)?.pooled;
            let t = bundle.text_encoder.encode_tok(&ttok)?.pooled;
            proteins.push(p.value().iter().map(|&v| Scalar::as_f64(v)).collect());
            texts.push(t.value().iter().map(|&v| Scalar::as_f64(v)).collect());
        }
        Ok((proteins, texts))
    })
}

fn eval_retrieval(
    bundle: &ModelBundle<f32>,
    vocab: &Vocabulary,
    pairs: &[Pair],
) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Ok((0.0, 0.0));
    }
    let (p, t) = embed_pairs(bundle, vocab, pairs)?;
    let top1 = retrieval_topk(&p, &t, 1)?;
    let top5 = retrieval_topk(&p, &t, 5.min(pairs.len()))?;
    Ok((top1, top5))
}

fn batch_loss(
    bundle: &ModelBundle<f32>,
    vocab: &Vocabulary,
    pairs: &[Pair],
    indices: &[usize],
    temperature: f64,
) -> Result<Tensor<f32>> {
    let mut p_rows = Vec::with_capacity(indices.len());
    let mut t_rows = Vec::with_capacity(indices.len());
    for &i in indices {
        let pair = &pairs[i];
        let ptok = encode_protein(&pair.sequence, bundle.protein_encoder.cfg.max_len)?;
        let ttok = encode_text(&pair.biotext, vocab, bundle.text_encoder.cfg.max_len)?;
        p_rows.push(bundle.protein_encoder.encode_tok(&ptok)?.pooled);
        t_rows.push(bundle.text_encoder.encode_tok(&ttok)?.pooled);
    }
    let p_refs: Vec<&Tensor<f32>> = p_rows.iter().collect();
    let t_refs: Vec<&Tensor<f32>> = t_rows.iter().collect();
    let batch = AlignBatch::new(
        ops::stack_rows(&p_refs)?,
        ops::stack_rows(&t_refs)?,
        temperature,
    )?;
    loss_align(&batch)
}

/// Contrastive pretraining. Deterministic given the seed: encoder init,
/// epoch shuffles, and batch order all derive from it, and the math is
/// single-threaded.
pub fn pretrain(
    train_pairs: &[Pair],
    eval_pairs: &[Pair],
    settings: &PretrainSettings,
) -> Result<PretrainOutput> {
    if train_pairs.len() < 2 {
        return Err(Error::InvalidArgument(
            "pretraining needs at least 2 pairs".into(),
        ));
    }
    let vocab = Vocabulary::build(
        train_pairs.iter().map(|p| p.biotext.as_str()),
        settings.text_vocab_budget,
    );
    let mut text_cfg = settings.text.clone();
    text_cfg.vocab_size = vocab.len();
    let bundle = ModelBundle::<f32>::align_stage(
        settings.protein.clone(),
        text_cfg,
        derive_seed(settings.seed, "encoder-init"),
    )?;
    let params = bundle.encoder_param_set();
    params.set_requires_grad(true);
    let mut adam = Adam::new(settings.adam, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(settings.seed, "pretrain-batches"));
    let mut stats = Vec::with_capacity(settings.epochs + 1);

    let metric_pairs = if eval_pairs.is_empty() {
        train_pairs
    } else {
        eval_pairs
    };
    let mut indices: Vec<usize> = (0..train_pairs.len()).collect();

    // Epoch 0: loss and retrieval at initialization.
    let init_start = Instant::now();
    let init_loss = no_grad(|| -> Result<f64> {
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in indices.chunks(settings.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            total += Scalar::as_f64(
                batch_loss(&bundle, &vocab, train_pairs, chunk, settings.temperature)?.item()?,
            );
            batches += 1;
        }
        Ok(total / batches.max(1) as f64)
    })?;
    let (top1, top5) = eval_retrieval(&bundle, &vocab, metric_pairs)?;
    stats.push(EpochStats {
        epoch: 0,
        loss_align: init_loss,
        top1,
        top5,
        wall_ms: init_start.elapsed().as_millis(),
    });

    for epoch in 1..=settings.epochs {
        let start = Instant::now();
        indices.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in indices.chunks(settings.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            params.zero_grads();
            let loss = batch_loss(&bundle, &vocab, train_pairs, chunk, settings.temperature)?;
            let value = Scalar::as_f64(loss.item()?);
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss(format!(
                    "alignment loss diverged at epoch {epoch} (batch {batches})"
                )));
            }
            loss.backward()?;
            adam.step(&params)?;
            total += value;
            batches += 1;
        }
        let (top1, top5) = eval_retrieval(&bundle, &vocab, metric_pairs)?;
        stats.push(EpochStats {
            epoch,
            loss_align: total / batches.max(1) as f64,
            top1,
            top5,
            wall_ms: start.elapsed().as_millis(),
        });
    }

    Ok(PretrainOutput {
        bundle,
        vocab,
        epochs: stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rows(rows: Vec<Vec<f64>>) -> Tensor<f64> {
        let n = rows.len();
        let d = rows[0].len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Tensor::matrix(n, d, flat).unwrap()
    }

    #[test]
    fn single_pair_loss_is_exactly_zero() {
        let p = unit_rows(vec![vec![1.0, 0.0]]);
        let t = unit_rows(vec![vec![0.6, 0.8]]);
        let batch = AlignBatch::new(p, t, 0.01).unwrap();
        assert_eq!(loss_align(&batch).unwrap().item().unwrap(), 0.0);
        assert_eq!(loss_p2t(&batch).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn two_pairs_all_equal_similarities_give_ln2() {
        // Identical embeddings make every pairwise similarity equal.
        let p = unit_rows(vec![vec![1.0, 0.0], vec![1.0, 0.0]]);
        let t = unit_rows(vec![vec![0.0, 1.0], vec![0.0, 1.0]]);
        let batch = AlignBatch::new(p, t, 0.01).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((loss_p2t(&batch).unwrap().item().unwrap() - ln2).abs() < 1e-12);
        assert!((loss_align(&batch).unwrap().item().unwrap() - ln2).abs() < 1e-12);
    }

    #[test]
    fn align_is_mean_of_directional_losses() {
        let sims =
            Tensor::<f64>::matrix(3, 3, vec![0.9, 0.1, 0.0, 0.2, 0.7, 0.3, 0.0, 0.4, 0.8]).unwrap();
        let losses = align_losses_from_similarities(&sims, 0.5).unwrap();
        let expected = 0.5 * (losses.p2t.item().unwrap() + losses.t2p.item().unwrap());
        assert!((losses.total.item().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn dominant_diagonal_drives_loss_to_zero() {
        let mut sims = vec![0.0; 16];
        for i in 0..4 {
            sims[i * 4 + i] = 1.0;
        }
        let sims = Tensor::<f64>::matrix(4, 4, sims).unwrap();
        let loss = align_losses_from_similarities(&sims, 0.001)
            .unwrap()
            .total
            .item()
            .unwrap();
        assert!(loss >= 0.0);
        assert!(loss < 1e-6);
    }

    #[test]
    fn shift_invariance_under_constant_similarity_offset() {
        let base: Vec<f64> = (0..25).map(|i| ((i * 7 % 11) as f64) * 0.1 - 0.5).collect();
        let sims = Tensor::matrix(5, 5, base.clone()).unwrap();
        let shifted = Tensor::matrix(5, 5, base.iter().map(|v| v + 3.7).collect()).unwrap();
        let a = align_losses_from_similarities(&sims, 0.05).unwrap();
        let b = align_losses_from_similarities(&shifted, 0.05).unwrap();
        assert!((a.total.item().unwrap() - b.total.item().unwrap()).abs() < 1e-9);
        assert!((a.p2t.item().unwrap() - b.p2t.item().unwrap()).abs() < 1e-9);
    }

    /// Direct high-precision evaluation of the directional losses, written
    /// independently of the tensor ops.
    fn reference_losses(sims: &[f64], n: usize, tau: f64) -> (f64, f64, f64) {
        let mut p2t = 0.0;
        let mut t2p = 0.0;
        for i in 0..n {
            let mut denom = 0.0;
            for j in 0..n {
                denom += ((sims[i * n + j] - sims[i * n + i]) / tau).exp();
            }
            p2t += -(1.0 / n as f64) * (1.0 / denom).ln();
            let mut denom_t = 0.0;
            for j in 0..n {
                denom_t += ((sims[j * n + i] - sims[i * n + i]) / tau).exp();
            }
            t2p += -(1.0 / n as f64) * (1.0 / denom_t).ln();
        }
        (p2t, t2p, 0.5 * (p2t + t2p))
    }

    #[test]
    fn random_similarity_matrix_matches_reference() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 8;
        let sims: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = Tensor::matrix(n, n, sims.clone()).unwrap();
        for tau in [1.0, 0.1, 0.01] {
            let got = align_losses_from_similarities(&t, tau).unwrap();
            let (p2t, t2p, total) = reference_losses(&sims, n, tau);
            assert!((got.p2t.item().unwrap() - p2t).abs() < 1e-9, "tau={tau}");
            assert!((got.t2p.item().unwrap() - t2p).abs() < 1e-9);
            assert!((got.total.item().unwrap() - total).abs() < 1e-9);
        }
    }

    #[test]
    fn temperature_must_be_positive() {
        let p = unit_rows(vec![vec![1.0, 0.0]]);
        let t = unit_rows(vec![vec![1.0, 0.0]]);
        assert!(AlignBatch::new(p, t, 0.0).is_err());
    }

    #[test]
    fn retrieval_identities() {
        let embs: Vec<Vec<f64>> = (0..4)
            .map(|i| {
                let mut v = vec![0.0; 4];
                v[i] = 1.0;
                v
            })
            .collect();
        assert_eq!(retrieval_topk(&embs, &embs, 1).unwrap(), 1.0);
        assert_eq!(retrieval_topk(&embs, &embs, 4).unwrap(), 1.0);
        assert!(retrieval_topk(&embs, &embs, 5).is_err());
        assert!(retrieval_topk(&embs, &embs, 0).is_err());
    }

    #[test]
    fn retrieval_ties_prefer_lower_index() {
        // Both targets identical: item 0 wins its tie, item 1 loses it.
        let q = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let t = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        assert_eq!(retrieval_topk(&q, &t, 1).unwrap(), 0.5);
    }

    #[test]
    fn random_baseline_is_about_one_over_n() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 32;
        let trials = 200;
        let mut acc = 0.0;
        for _ in 0..trials {
            let mut mk = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
                (0..n)
                    .map(|_| {
                        let v: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
                        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                        v.into_iter().map(|x| x / norm).collect()
                    })
                    .collect()
            };
            let q = mk(&mut rng);
            let t = mk(&mut rng);
            acc += retrieval_topk(&q, &t, 1).unwrap();
        }
        let mean = acc / trials as f64;
        assert!(
            (mean - 1.0 / n as f64).abs() < 0.01,
            "mean top-1 {mean} not ≈ 1/{n}"
        );
    }
}
