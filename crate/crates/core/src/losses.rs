//! Training objectives with values and analytic gradients: the text-anchor
//! contrastive hinges, focal and class-balanced focal losses, weighted
//! cross-entropy, and a supervised-contrastive baseline.
//!
//! The contrastive hinges operate on cosine *distance* d = 1 - cos: the
//! positive term pulls a feature toward its matching anchor until
//! d <= t_pos, the negative term pushes sampled non-matching anchors until
//! d >= t_neg. All losses are means over labeled points; unlabeled points
//! contribute zero loss and zero gradient.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use crate::catalog::LabelCatalog;
use crate::embed::EmbeddingTable;
use crate::error::{Error, Result};
use crate::scene::UNLABELED;

/// Feature-to-anchor distance used by the contrastive losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceMetric {
    Cosine,
    L1,
    L2,
}

/// Configuration of the contrastive pre-training objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveConfig {
    pub t_pos: f64,
    pub t_neg: f64,
    pub lambda: f64,
    /// Negatives sampled per point.
    pub n_neg: usize,
    pub distance: DistanceMetric,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            t_pos: 0.0,
            t_neg: 0.6,
            lambda: 1.0,
            n_neg: 3,
            distance: DistanceMetric::Cosine,
        }
    }
}

/// Focal-loss configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct FocalConfig {
    pub gamma: f64,
    /// Per-category weights, length N; `None` means uniform 1.
    pub alpha: Option<Vec<f64>>,
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig { gamma: 2.0, alpha: None }
    }
}

/// A loss value with the gradient of the differentiated input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub gradient: Array2<f64>,
}

/// Cosine distance d = 1 - u.v / (|u||v|), with the gradient wrt u.
pub fn cosine_distance(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> Result<(f64, Array1<f64>)> {
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateEmbedding(None));
    }
    let dot = u.dot(&v);
    let d = 1.0 - dot / (nu * nv);
    let grad = u
        .iter()
        .zip(v.iter())
        .map(|(&ui, &vi)| -(vi / (nu * nv) - dot * ui / (nu * nu * nu * nv)))
        .collect::<Array1<f64>>();
    Ok((d, grad))
}

/// Distance between a feature and an anchor under the configured metric,
/// with the gradient wrt the feature.
fn distance(metric: DistanceMetric, u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> Result<(f64, Array1<f64>)> {
    match metric {
        DistanceMetric::Cosine => cosine_distance(u, v),
        DistanceMetric::L1 => {
            let mut d = 0.0;
            let grad = u
                .iter()
                .zip(v.iter())
                .map(|(&ui, &vi)| {
                    let diff = ui - vi;
                    d += diff.abs();
                    if diff > 0.0 {
                        1.0
                    } else if diff < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                })
                .collect::<Array1<f64>>();
            Ok((d, grad))
        }
        DistanceMetric::L2 => {
            let diff = &u - &v;
            let d = diff.dot(&diff).sqrt();
            let grad = if d > 0.0 { &diff / d } else { Array1::zeros(u.len()) };
            Ok((d, grad))
        }
    }
}

fn check_dims(features: &Array2<f64>, assignments: &[u16], table: &EmbeddingTable) -> Result<()> {
    if features.nrows() != assignments.len() {
        return Err(Error::Dimension(format!(
            "{} feature rows vs {} assignments",
            features.nrows(),
            assignments.len()
        )));
    }
    if features.ncols() != table.dim() {
        return Err(Error::Dimension(format!(
            "feature dim {} vs anchor dim {}",
            features.ncols(),
            table.dim()
        )));
    }
    for &a in assignments {
        if a != UNLABELED && (a as usize) >= table.len() {
            return Err(Error::Dimension(format!("assignment {a} out of range")));
        }
    }
    Ok(())
}

fn labeled_count(assignments: &[u16]) -> usize {
    assignments.iter().filter(|&&a| a != UNLABELED).count()
}

/// Positive hinge: mean over labeled points of max(0, d(f_i, a_h(i)) - t_pos).
/// Gradient is zero on inactive hinge terms.
pub fn loss_pos(
    features: &Array2<f64>,
    assignments: &[u16],
    table: &EmbeddingTable,
    cfg: &ContrastiveConfig,
) -> Result<LossOutput> {
    check_dims(features, assignments, table)?;
    let m = labeled_count(assignments).max(1) as f64;
    let mut value = 0.0;
    let mut gradient = Array2::zeros(features.raw_dim());
    for (i, &a) in assignments.iter().enumerate() {
        if a == UNLABELED {
            continue;
        }
        let (d, grad) = distance(cfg.distance, features.row(i), table.row(a as usize))?;
        let margin = d - cfg.t_pos;
        if margin > 0.0 {
            value += margin / m;
            gradient.row_mut(i).scaled_add(1.0 / m, &grad);
        }
    }
    Ok(LossOutput { value, gradient })
}

/// Negative hinge: mean over labeled points of
/// (1/|M_i|) sum_j max(0, t_neg - d(f_i, a_j)).
pub fn loss_neg(
    features: &Array2<f64>,
    assignments: &[u16],
    table: &EmbeddingTable,
    negatives: &[Vec<u16>],
    cfg: &ContrastiveConfig,
) -> Result<LossOutput> {
    check_dims(features, assignments, table)?;
    if negatives.len() != assignments.len() {
        return Err(Error::Dimension(format!(
            "{} negative sets vs {} assignments",
            negatives.len(),
            assignments.len()
        )));
    }
    let m = labeled_count(assignments).max(1) as f64;
    let mut value = 0.0;
    let mut gradient = Array2::zeros(features.raw_dim());
    for (i, &a) in assignments.iter().enumerate() {
        if a == UNLABELED {
            continue;
        }
        let set = &negatives[i];
        if set.is_empty() {
            continue;
        }
        if set.contains(&a) {
            return Err(Error::NegativeSampling(format!(
                "negative set of point {i} contains its own label {a}"
            )));
        }
        let scale = 1.0 / (m * set.len() as f64);
        for &j in set {
            if (j as usize) >= table.len() {
                return Err(Error::Dimension(format!("negative id {j} out of range")));
            }
            let (d, grad) = distance(cfg.distance, features.row(i), table.row(j as usize))?;
            let margin = cfg.t_neg - d;
            if margin > 0.0 {
                value += margin * scale;
                gradient.row_mut(i).scaled_add(-scale, &grad);
            }
        }
    }
    Ok(LossOutput { value, gradient })
}

/// Combined contrastive objective: loss_pos + lambda * loss_neg.
pub fn loss_total(
    features: &Array2<f64>,
    assignments: &[u16],
    table: &EmbeddingTable,
    negatives: &[Vec<u16>],
    cfg: &ContrastiveConfig,
) -> Result<LossOutput> {
    let pos = loss_pos(features, assignments, table, cfg)?;
    let neg = loss_neg(features, assignments, table, negatives, cfg)?;
    Ok(LossOutput {
        value: pos.value + cfg.lambda * neg.value,
        gradient: pos.gradient + cfg.lambda * neg.gradient,
    })
}

/// Uniform negative sets: for each labeled point, `n_neg` ids drawn without
/// replacement from all categories excluding its own label. Unlabeled
/// points get empty sets.
pub fn sample_negatives(
    assignments: &[u16],
    catalog: &LabelCatalog,
    n_neg: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<u16>>> {
    let n = catalog.len();
    if n < n_neg + 1 {
        return Err(Error::NegativeSampling(format!(
            "catalog of {n} categories cannot supply {n_neg} negatives"
        )));
    }
    Ok(assignments
        .iter()
        .map(|&a| {
            if a == UNLABELED {
                return Vec::new();
            }
            // sample from N-1 candidates, then skip past the own label
            rand::seq::index::sample(rng, n - 1, n_neg)
                .into_iter()
                .map(|k| {
                    let k = k as u16;
                    if k >= a {
                        k + 1
                    } else {
                        k
                    }
                })
                .collect()
        })
        .collect())
}

fn check_logits(logits: &Array2<f64>, targets: &[u16]) -> Result<()> {
    if logits.nrows() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} logit rows vs {} targets",
            logits.nrows(),
            targets.len()
        )));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    for &t in targets {
        if t != UNLABELED && (t as usize) >= logits.ncols() {
            return Err(Error::Dimension(format!("target {t} out of range")));
        }
    }
    Ok(())
}

fn softmax_row(row: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Array1<f64> = row.mapv(|x| (x - max).exp());
    let sum = e.sum();
    e.mapv_inplace(|x| x / sum);
    e
}

/// Shared focal-family core: mean over labeled points of
/// -w_t (1 - p_t)^gamma log(p_t), gradient wrt logits.
fn focal_family(logits: &Array2<f64>, targets: &[u16], gamma: f64, weight_of: impl Fn(usize) -> f64) -> Result<LossOutput> {
    check_logits(logits, targets)?;
    if gamma < 0.0 {
        return Err(Error::Numeric(format!("gamma must be >= 0, got {gamma}")));
    }
    let m = labeled_count(targets).max(1) as f64;
    let mut value = 0.0;
    let mut gradient = Array2::zeros(logits.raw_dim());
    for (i, &t) in targets.iter().enumerate() {
        if t == UNLABELED {
            continue;
        }
        let t = t as usize;
        let p = softmax_row(logits.row(i));
        let pt = p[t].max(f64::MIN_POSITIVE);
        let w = weight_of(t);
        let one_minus = 1.0 - p[t];
        let modulator = if gamma == 0.0 { 1.0 } else { one_minus.powf(gamma) };
        value += -w * modulator * pt.ln() / m;
        // d/dp_t of -(1-p)^g ln p
        let dldp = if gamma == 0.0 {
            -1.0 / pt
        } else {
            gamma * one_minus.powf(gamma - 1.0) * pt.ln() - modulator / pt
        };
        let coeff = w * dldp * p[t] / m;
        for (k, g) in gradient.row_mut(i).iter_mut().enumerate() {
            let delta = if k == t { 1.0 } else { 0.0 };
            *g = coeff * (delta - p[k]);
        }
    }
    if !value.is_finite() {
        return Err(Error::Numeric("focal loss overflow".into()));
    }
    Ok(LossOutput { value, gradient })
}

/// Focal loss: mean of -(1-p_t)^gamma log p_t.
pub fn focal(logits: &Array2<f64>, targets: &[u16], gamma: f64) -> Result<LossOutput> {
    focal_family(logits, targets, gamma, |_| 1.0)
}

/// Class-balanced focal loss: mean of -alpha_t (1-p_t)^gamma log p_t.
pub fn cfocal(logits: &Array2<f64>, targets: &[u16], gamma: f64, alpha: &[f64]) -> Result<LossOutput> {
    if alpha.len() != logits.ncols() {
        return Err(Error::Dimension(format!(
            "{} alpha weights for {} categories",
            alpha.len(),
            logits.ncols()
        )));
    }
    focal_family(logits, targets, gamma, |t| alpha[t])
}

/// Weighted cross-entropy: mean of -w_t log p_t. Identical to cfocal with
/// gamma = 0 and alpha = weights.
pub fn weighted_ce(logits: &Array2<f64>, targets: &[u16], weights: &[f64]) -> Result<LossOutput> {
    if weights.len() != logits.ncols() {
        return Err(Error::Dimension(format!(
            "{} weights for {} categories",
            weights.len(),
            logits.ncols()
        )));
    }
    focal_family(logits, targets, 0.0, |t| weights[t])
}

/// Plain cross-entropy (uniform unit weights).
pub fn cross_entropy(logits: &Array2<f64>, targets: &[u16]) -> Result<LossOutput> {
    focal_family(logits, targets, 0.0, |_| 1.0)
}

/// Supervised-contrastive baseline: per source point, sample `n_pos`
/// same-label and `n_neg` different-label candidates and take the standard
/// log-ratio on unit-normalized features. Gradient is wrt the raw
/// (pre-normalization) features.
pub fn supcon(
    features: &Array2<f64>,
    labels: &[u16],
    n_pos: usize,
    n_neg: usize,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<LossOutput> {
    if features.nrows() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} feature rows vs {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    if temperature <= 0.0 {
        return Err(Error::Numeric(format!("temperature must be positive, got {temperature}")));
    }
    let n = features.nrows();
    // normalized features and cached norms
    let mut z = features.clone();
    let mut norms = Vec::with_capacity(n);
    for mut row in z.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateEmbedding(None));
        }
        row.mapv_inplace(|x| x / norm);
        norms.push(norm);
    }

    let mut by_label: std::collections::HashMap<u16, Vec<usize>> = std::collections::HashMap::new();
    for (i, &l) in labels.iter().enumerate() {
        if l != UNLABELED {
            by_label.entry(l).or_default().push(i);
        }
    }
    let sources: Vec<usize> = (0..n).filter(|&i| labels[i] != UNLABELED).collect();
    let m = sources.len().max(1) as f64;
    let labeled_total = sources.len();

    let mut value = 0.0;
    let mut grad_z: Array2<f64> = Array2::zeros(features.raw_dim());
    for &i in &sources {
        let same = &by_label[&labels[i]];
        if same.len() < n_pos + 1 {
            return Err(Error::NegativeSampling(format!(
                "point {i} has only {} same-label candidates, need {n_pos}",
                same.len() - 1
            )));
        }
        let n_diff = labeled_total - same.len();
        if n_diff < n_neg {
            return Err(Error::NegativeSampling(format!(
                "point {i} has only {n_diff} different-label candidates, need {n_neg}"
            )));
        }
        // positives: uniform among same-label points excluding i
        let own = same.iter().position(|&j| j == i).expect("source in its label group");
        let positives: Vec<usize> = rand::seq::index::sample(rng, same.len() - 1, n_pos)
            .into_iter()
            .map(|k| same[if k >= own { k + 1 } else { k }])
            .collect();
        // negatives: uniform among labeled points of other labels
        let others: Vec<usize> = sources.iter().copied().filter(|&j| labels[j] != labels[i]).collect();
        let negatives: Vec<usize> = rand::seq::index::sample(rng, others.len(), n_neg)
            .into_iter()
            .map(|k| others[k])
            .collect();

        let candidates: Vec<usize> = positives.iter().chain(negatives.iter()).copied().collect();
        let sims: Vec<f64> = candidates.iter().map(|&a| z.row(i).dot(&z.row(a)) / temperature).collect();
        let max_sim = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = sims.iter().map(|&s| (s - max_sim).exp()).collect();
        let denom: f64 = exps.iter().sum();

        for k in 0..n_pos {
            value += -(exps[k] / denom).ln() / (n_pos as f64 * m);
        }
        // dL_i/ds_a = (q_a - [a positive]/n_pos) / temperature, summed into z-space
        for (k, &a) in candidates.iter().enumerate() {
            let q = exps[k] / denom;
            let indicator = if k < n_pos { 1.0 / n_pos as f64 } else { 0.0 };
            let c = (q - indicator) / (temperature * m);
            grad_z.row_mut(i).scaled_add(c, &z.row(a));
            grad_z.row_mut(a).scaled_add(c, &z.row(i));
        }
    }

    // back through normalization: g_f = (g_z - (z . g_z) z) / |f|
    let mut gradient = Array2::zeros(features.raw_dim());
    for j in 0..n {
        let zj = z.row(j);
        let gz = grad_z.row(j);
        let proj = zj.dot(&gz);
        let gf = (&gz - &(proj * &zj.to_owned())) / norms[j];
        gradient.row_mut(j).assign(&gf);
    }
    Ok(LossOutput { value, gradient })
}
