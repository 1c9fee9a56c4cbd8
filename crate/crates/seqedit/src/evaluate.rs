//! Metrics and scorers: AUPR, protein-centric Fmax, the two stability
//! criteria (embedding similarity and a trained MLP oracle), improvement
//! rates, decoder-likelihood naturalness, and embedding export with a 2-D
//! PCA projection.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bundle::ModelBundle;
use crate::encoders::similarity;
use crate::error::{Error, Result};
use crate::numerics::nn::{Linear, ParamSet};
use crate::numerics::optim::{Adam, AdamConfig};
use crate::numerics::tensor::no_grad;
use crate::numerics::{ops, Scalar, Tensor};
use crate::tokenize::{
    encode_protein, encode_text, residue_id, validate_sequence, Vocabulary, BOS, EOS,
};
use crate::util::derive_seed;

// ---------------------------------------------------------------------------
// AUPR
// ---------------------------------------------------------------------------

/// Area under the precision–recall curve: threshold sweep over grouped
/// scores, precision envelope (each point takes the max precision at recall
/// ≥ its own), step integration over recall.
pub fn aupr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "aupr needs equal nonzero counts, got {} scores and {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("aupr: non-finite score".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::InvalidArgument(
            "aupr undefined for all-negative labels".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));

    // One (recall, precision) point per distinct threshold, ties grouped.
    let mut points: Vec<(f64, f64)> = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0usize;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((tp as f64 / positives as f64, tp as f64 / (tp + fp) as f64));
    }
    // Precision envelope from the right.
    for k in (0..points.len().saturating_sub(1)).rev() {
        points[k].1 = points[k].1.max(points[k + 1].1);
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for &(recall, precision) in &points {
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

// ---------------------------------------------------------------------------
// Fmax
// ---------------------------------------------------------------------------

/// The protein-centric convention: 0.01-step thresholds over (0, 1].
pub fn fmax_default_grid() -> Vec<f64> {
    (1..=100).map(|k| 0.01 * k as f64).collect()
}

/// Protein-centric maximum F1 over a threshold grid. At each threshold,
/// precision averages over proteins with at least one prediction and recall
/// averages over proteins with at least one true label; no predictions
/// anywhere means F = 0 at that threshold.
pub fn f_max(scores: &[Vec<f64>], truths: &[Vec<usize>], grid: &[f64]) -> Result<f64> {
    if scores.len() != truths.len() || scores.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "f_max needs equal nonzero counts, got {} and {}",
            scores.len(),
            truths.len()
        )));
    }
    if grid.is_empty() {
        return Err(Error::InvalidArgument(
            "f_max needs a non-empty grid".into(),
        ));
    }
    let label_space = scores[0].len();
    for (i, s) in scores.iter().enumerate() {
        if s.len() != label_space {
            return Err(Error::InvalidArgument(format!(
                "protein {i} has {} label scores, expected {label_space}",
                s.len()
            )));
        }
    }
    for (i, t) in truths.iter().enumerate() {
        if t.iter().any(|&l| l >= label_space) {
            return Err(Error::InvalidArgument(format!(
                "protein {i} has a true label outside the {label_space}-label space"
            )));
        }
    }
    let mut best = 0.0f64;
    for &t in grid {
        let mut prec_sum = 0.0;
        let mut prec_count = 0usize;
        let mut rec_sum = 0.0;
        let mut rec_count = 0usize;
        for (score_row, truth) in scores.iter().zip(truths) {
            let predicted: Vec<usize> = (0..label_space).filter(|&l| score_row[l] >= t).collect();
            let hits = predicted.iter().filter(|l| truth.contains(l)).count();
            if !predicted.is_empty() {
                prec_sum += hits as f64 / predicted.len() as f64;
                prec_count += 1;
            }
            if !truth.is_empty() {
                rec_sum += hits as f64 / truth.len() as f64;
                rec_count += 1;
            }
        }
        if prec_count == 0 || rec_count == 0 {
            continue;
        }
        let pr = prec_sum / prec_count as f64;
        let rc = rec_sum / rec_count as f64;
        if pr + rc > 0.0 {
            best = best.max(2.0 * pr * rc / (pr + rc));
        }
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// Stability criteria
// ---------------------------------------------------------------------------

/// Criterion 1: cosine similarity between the instruction text and the
/// sequence in the aligned embedding space (embeddings are unit-norm, so the
/// dot product is the cosine).
pub fn stability_similarity<T: Scalar>(
    sequence: &str,
    instruction: &str,
    bundle: &ModelBundle<T>,
    vocab: &Vocabulary,
) -> Result<f64> {
    no_grad(|| {
        let ptok = encode_protein(sequence, bundle.protein_encoder.cfg.max_len)?;
        let ttok = encode_text(instruction, vocab, bundle.text_encoder.cfg.max_len)?;
        let p = bundle.protein_encoder.encode_tok(&ptok)?.pooled;
        let t = bundle.text_encoder.encode_tok(&ttok)?.pooled;
        similarity(&p, &t)
    })
}

/// Criterion 2: a feedforward regressor over frozen pooled embeddings,
/// standing in for wet-lab stability measurements.
#[derive(Debug)]
pub struct OracleModel {
    pub lin1: Linear<f32>,
    pub lin2: Linear<f32>,
    pub lin3: Linear<f32>,
}

impl OracleModel {
    fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let h1 = ops::gelu(&self.lin1.forward(x)?);
        let h2 = ops::gelu(&self.lin2.forward(&h1)?);
        self.lin3.forward(&h2)
    }

    fn param_set(&self) -> ParamSet<f32> {
        let mut set = ParamSet::new();
        self.lin1.collect_params("oracle.lin1", &mut set);
        self.lin2.collect_params("oracle.lin2", &mut set);
        self.lin3.collect_params("oracle.lin3", &mut set);
        set
    }
}

#[derive(Debug, Clone)]
pub struct OracleConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            hidden: 256,
            epochs: 60,
            batch_size: 16,
            adam: AdamConfig {
                base_lr: 1e-3,
                warmup_steps: 10,
                ..Default::default()
            },
            seed: 0,
        }
    }
}

fn embed_sequence(bundle: &ModelBundle<f32>, sequence: &str) -> Result<Vec<f32>> {
    no_grad(|| {
        let tok = encode_protein(sequence, bundle.protein_encoder.cfg.max_len)?;
        Ok(bundle.protein_encoder.encode_tok(&tok)?.pooled.value())
    })
}

/// Train the stability oracle with mean-squared-error regression on frozen
/// embeddings. Returns the model and the per-epoch training MSE (index 0 is
/// the pre-training value).
pub fn train_oracle(
    data: &[(String, f64)],
    bundle: &ModelBundle<f32>,
    cfg: &OracleConfig,
) -> Result<(OracleModel, Vec<f64>)> {
    if data.len() < 32 {
        return Err(Error::InvalidArgument(format!(
            "oracle training needs at least 32 labeled examples, got {}",
            data.len()
        )));
    }
    let mean = data.iter().map(|(_, y)| y).sum::<f64>() / data.len() as f64;
    let variance = data
        .iter()
        .map(|(_, y)| (y - mean) * (y - mean))
        .sum::<f64>()
        / data.len() as f64;
    if variance == 0.0 {
        return Err(Error::InvalidArgument(
            "zero-variance target: all stability labels identical".into(),
        ));
    }

    let dim = bundle.protein_encoder.cfg.projection_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "oracle-init"));
    let oracle = OracleModel {
        lin1: Linear::new(dim, cfg.hidden, &mut rng),
        lin2: Linear::new(cfg.hidden, cfg.hidden, &mut rng),
        lin3: Linear::new(cfg.hidden, 1, &mut rng),
    };
    let params = oracle.param_set();
    params.set_requires_grad(true);
    let mut adam = Adam::new(cfg.adam, &params);

    let embeddings: Vec<Vec<f32>> = data
        .iter()
        .map(|(seq, _)| embed_sequence(bundle, seq))
        .collect::<Result<_>>()?;
    let labels: Vec<f32> = data.iter().map(|(_, y)| *y as f32).collect();

    let batch_mse = |indices: &[usize]| -> Result<Tensor<f32>> {
        let flat: Vec<f32> = indices
            .iter()
            .flat_map(|&i| embeddings[i].iter().copied())
            .collect();
        let x = Tensor::matrix(indices.len(), dim, flat)?;
        let pred = oracle.forward(&x)?;
        let y = Tensor::matrix(
            indices.len(),
            1,
            indices.iter().map(|&i| labels[i]).collect(),
        )?;
        let diff = ops::sub(&pred, &y)?;
        ops::mean_all(&ops::mul(&diff, &diff)?)
    };

    let mut indices: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs + 1);
    curve.push(Scalar::as_f64(no_grad(|| batch_mse(&indices))?.item()?));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "oracle-batches"));
    for _ in 0..cfg.epochs {
        indices.shuffle(&mut shuffle_rng);
        for chunk in indices.chunks(cfg.batch_size) {
            params.zero_grads();
            let loss = batch_mse(chunk)?;
            loss.backward()?;
            adam.step(&params)?;
        }
        let epoch_mse = Scalar::as_f64(no_grad(|| batch_mse(&indices))?.item()?);
        if !epoch_mse.is_finite() {
            return Err(Error::NonFiniteLoss("oracle regression diverged".into()));
        }
        curve.push(epoch_mse);
    }
    Ok((oracle, curve))
}

/// Score one sequence with a trained oracle. Pure: same inputs, same score.
pub fn oracle_score(
    sequence: &str,
    oracle: &OracleModel,
    bundle: &ModelBundle<f32>,
) -> Result<f64> {
    let emb = embed_sequence(bundle, sequence)?;
    let dim = emb.len();
    no_grad(|| {
        let x = Tensor::matrix(1, dim, emb.clone())?;
        Ok(Scalar::as_f64(oracle.forward(&x)?.item()?))
    })
}

/// Coefficient of determination of predictions against labels.
pub fn r_squared(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(Error::InvalidArgument(
            "r_squared needs equal counts".into(),
        ));
    }
    let mean = labels.iter().sum::<f64>() / labels.len() as f64;
    let ss_tot: f64 = labels.iter().map(|y| (y - mean) * (y - mean)).sum();
    let ss_res: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(p, y)| (p - y) * (p - y))
        .sum();
    if ss_tot == 0.0 {
        return Err(Error::InvalidArgument("zero-variance target".into()));
    }
    Ok(1.0 - ss_res / ss_tot)
}

// ---------------------------------------------------------------------------
// Improvement rate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ImprovementReport {
    /// Fraction of items whose edited score strictly exceeds the original.
    pub rate: f64,
    pub deltas: Vec<f64>,
    pub mean_original: f64,
    pub mean_edited: f64,
}

pub fn improvement_rate(
    originals: &[String],
    editeds: &[String],
    mut scorer: impl FnMut(&str) -> Result<f64>,
) -> Result<ImprovementReport> {
    if originals.len() != editeds.len() {
        return Err(Error::InvalidArgument(format!(
            "improvement_rate needs index-matched inputs, got {} and {}",
            originals.len(),
            editeds.len()
        )));
    }
    if originals.is_empty() {
        return Err(Error::InvalidArgument(
            "improvement_rate on empty input".into(),
        ));
    }
    let mut deltas = Vec::with_capacity(originals.len());
    let mut improved = 0usize;
    let mut sum_orig = 0.0;
    let mut sum_edit = 0.0;
    for (orig, edit) in originals.iter().zip(editeds) {
        let so = scorer(orig)?;
        let se = scorer(edit)?;
        deltas.push(se - so);
        sum_orig += so;
        sum_edit += se;
        if se > so {
            improved += 1;
        }
    }
    Ok(ImprovementReport {
        rate: improved as f64 / originals.len() as f64,
        deltas,
        mean_original: sum_orig / originals.len() as f64,
        mean_edited: sum_edit / originals.len() as f64,
    })
}

// ---------------------------------------------------------------------------
// Naturalness
// ---------------------------------------------------------------------------

/// Length-normalized log-likelihood of the sequence under the bundle's own
/// decoder, unconditioned (the cross-attention sees a single zero row).
/// Higher is more natural.
pub fn naturalness(sequence: &str, bundle: &ModelBundle<f32>) -> Result<f64> {
    if sequence.is_empty() {
        return Err(Error::InvalidArgument(
            "naturalness of an empty sequence is undefined".into(),
        ));
    }
    validate_sequence(sequence)?;
    let editor = bundle.editor_ref()?;
    let res_ids: Vec<u32> = sequence.chars().map(|c| residue_id(c).unwrap()).collect();
    no_grad(|| {
        let cond = Tensor::<f32>::zeros(&[1, editor.decoder.cfg.model_dim]);
        let mut prefix = Vec::with_capacity(res_ids.len() + 1);
        prefix.push(BOS);
        prefix.extend_from_slice(&res_ids);
        let logits = editor.decoder.forward(&prefix, &cond)?;
        let v = editor.decoder.cfg.vocab_size;
        let mut total = 0.0f64;
        logits.with_data(|d| {
            for (i, row) in d.chunks(v).enumerate() {
                let row64: Vec<f64> = row.iter().map(|&x| Scalar::as_f64(x)).collect();
                let max = row64.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let log_z = max + row64.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
                let target = if i + 1 < prefix.len() {
                    prefix[i + 1]
                } else {
                    EOS
                };
                total += row64[target as usize] - log_z;
            }
        });
        Ok(total / prefix.len() as f64)
    })
}

// ---------------------------------------------------------------------------
// Embedding export and PCA
// ---------------------------------------------------------------------------

/// Write one TSV row per item: id, then the embedding components.
pub fn export_embeddings(
    items: &[(String, String)],
    bundle: &ModelBundle<f32>,
    mut writer: impl Write,
) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(items.len());
    for (id, seq) in items {
        let emb = embed_sequence(bundle, seq)?;
        let row: Vec<f64> = emb.iter().map(|&v| v as f64).collect();
        let cols: Vec<String> = row.iter().map(|v| format!("{v:.6e}")).collect();
        writeln!(writer, "{id}\t{}", cols.join("\t"))?;
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct Pca2d {
    /// Centered 2-D coordinates, one row per input row.
    pub coords: Vec<[f64; 2]>,
    /// Set when the input had (numerically) no second principal direction;
    /// the second coordinate is all zeros then.
    pub degenerate: bool,
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major d×d).
/// Returns (eigenvalues, eigenvector columns).
fn jacobi_eigen(mut a: Vec<f64>, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                off += a[i * d + j] * a[i * d + j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() < 1e-30 {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let phi = 0.5 * (2.0 * apq).atan2(app - aqq);
                let (s, c) = phi.sin_cos();
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp + s * akq;
                    a[k * d + q] = -s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk + s * aqk;
                    a[q * d + k] = -s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp + s * vkq;
                    v[k * d + q] = -s * vkp + c * vkq;
                }
            }
        }
    }
    let eigenvalues: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
    (eigenvalues, v)
}

/// Project rows onto the top two principal components of their covariance.
/// Coordinates are centered; component order follows eigenvalue order.
pub fn pca_2d(matrix: &[Vec<f64>]) -> Result<Pca2d> {
    let n = matrix.len();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "pca_2d needs at least 2 rows".into(),
        ));
    }
    let d = matrix[0].len();
    if d == 0 || matrix.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidArgument(
            "pca_2d needs equal-length rows".into(),
        ));
    }
    let mut mean = vec![0.0; d];
    for row in matrix {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = matrix
        .iter()
        .map(|row| row.iter().zip(&mean).map(|(&x, &m)| x - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for row in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += row[i] * row[j];
            }
        }
    }
    for c in &mut cov {
        *c /= n as f64;
    }
    let (eigenvalues, vectors) = jacobi_eigen(cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigenvalues[b].partial_cmp(&eigenvalues[a]).unwrap());
    let top1 = order[0];
    let top2 = if d > 1 { order[1] } else { top1 };
    let lambda1 = eigenvalues[top1].max(0.0);
    let lambda2 = if d > 1 { eigenvalues[top2].max(0.0) } else { 0.0 };
    let degenerate = d < 2 || lambda2 <= 1e-12 * lambda1.max(1e-300);

    // Deterministic sign: first nonzero component of each axis is positive.
    let axis = |col: usize| -> Vec<f64> {
        let mut v: Vec<f64> = (0..d).map(|k| vectors[k * d + col]).collect();
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                for x in &mut v {
                    *x = -*x;
                }
            }
        }
        v
    };
    let v1 = axis(top1);
    let v2 = axis(top2);
    let coords = centered
        .iter()
        .map(|row| {
            let x: f64 = row.iter().zip(&v1).map(|(&a, &b)| a * b).sum();
            let y: f64 = if degenerate {
                0.0
            } else {
                row.iter().zip(&v2).map(|(&a, &b)| a * b).sum()
            };
            [x, y]
        })
        .collect();
    Ok(Pca2d { coords, degenerate })
}

/// Key-value metrics report body: one `name = value` line per entry.
pub fn format_report(entries: &[(&str, f64)]) -> String {
    let mut out = String::new();
    for (name, value) in entries {
        out.push_str(&format!("{name} = {value:.6}\n"));
    }
    out
}
