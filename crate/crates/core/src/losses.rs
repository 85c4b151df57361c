//! Training losses.
//!
//! All losses are sums over the batch (and over ordered pairs for the
//! embedding terms), never means. The `*_grad` variants return the loss
//! together with its gradient with respect to the quantity the network
//! feeds in: projection rows for the embedding loss, pre-softmax logits for
//! the two cross-entropy terms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Probabilities are clamped to at least this before taking logs.
pub const LOG_EPS: f64 = 1e-12;
const ROW_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub margin: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.0,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.margin) {
            return Err(Error::invalid(format!(
                "margin {} outside [-1, 1]",
                self.margin
            )));
        }
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::invalid(format!("{name} = {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l0: f64,
    pub le: f64,
    pub lc: f64,
    pub ld: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(l0: f64, le: f64, lc: f64, ld: f64, cfg: &LossConfig) -> Self {
        Self {
            l0,
            le,
            lc,
            ld,
            total: l0 + cfg.alpha * le + cfg.beta * lc + cfg.gamma * ld,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l0, self.le, self.lc, self.ld, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// `epoch,step,L0,Le,Lc,Ld,total` with round-trip float formatting.
    pub fn log_line(&self, epoch: usize, step: usize) -> String {
        format!(
            "{epoch},{step},{},{},{},{},{}",
            self.l0, self.le, self.lc, self.ld, self.total
        )
    }

    pub fn parse_log_line(line: &str) -> Option<(usize, usize, Self)> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return None;
        }
        let v = |i: usize| f[i].parse::<f64>().ok();
        Some((
            f[0].parse().ok()?,
            f[1].parse().ok()?,
            Self {
                l0: v(2)?,
                le: v(3)?,
                lc: v(4)?,
                ld: v(5)?,
                total: v(6)?,
            },
        ))
    }

    pub fn accumulate(&mut self, other: &Self) {
        self.l0 += other.l0;
        self.le += other.le;
        self.lc += other.lc;
        self.ld += other.ld;
        self.total += other.total;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::invalid(format!(
            "cosine of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (uu, vv) = (dot(u, u), dot(v, v));
    if uu == 0.0 || vv == 0.0 {
        return Err(Error::invalid("zero-norm projection (collapsed embedding)"));
    }
    // sqrt(uu * vv) reproduces uu exactly when u == v.
    Ok((dot(u, v) / (uu * vv).sqrt()).clamp(-1.0, 1.0))
}

/// `1 - cos(u, v)` for a same-label pair, `max(0, cos(u, v) - margin)` otherwise.
pub fn cosine_pair_loss(u: &[f64], v: &[f64], same: bool, margin: f64) -> Result<f64> {
    let c = cosine(u, v)?;
    Ok(if same { 1.0 - c } else { (c - margin).max(0.0) })
}

/// Sum of [`cosine_pair_loss`] over all `m^2` ordered pairs of rows. Diagonal
/// pairs are same-labeled copies of one vector and contribute exactly zero.
pub fn embedding_loss(proj: &Matrix, labels: &[usize], margin: f64) -> Result<f64> {
    embedding_loss_grad(proj, labels, margin).map(|(l, _)| l)
}

pub fn embedding_loss_grad(proj: &Matrix, labels: &[usize], margin: f64) -> Result<(f64, Matrix)> {
    let m = proj.rows;
    if m == 0 {
        return Err(Error::invalid("embedding loss of an empty batch"));
    }
    if labels.len() != m {
        return Err(Error::invalid(format!(
            "{} labels for {m} projection rows",
            labels.len()
        )));
    }
    let sq: Vec<f64> = proj.iter_rows().map(|r| dot(r, r)).collect();
    if sq.iter().any(|&n| n == 0.0) {
        return Err(Error::invalid("zero-norm projection (collapsed embedding)"));
    }
    let norms: Vec<f64> = sq.iter().map(|n| n.sqrt()).collect();
    let mut grad = Matrix::zeros(m, proj.cols);
    let mut loss = 0.0;
    for i in 0..m {
        let (ui, ni) = (proj.row(i), norms[i]);
        for j in 0..m {
            if i == j {
                continue;
            }
            let (uj, nj) = (proj.row(j), norms[j]);
            let raw = dot(ui, uj) / (sq[i] * sq[j]).sqrt();
            let c = raw.clamp(-1.0, 1.0);
            // d loss / d cos for this ordered pair
            let slope = if labels[i] == labels[j] {
                loss += 1.0 - c;
                -1.0
            } else if c > margin {
                loss += c - margin;
                1.0
            } else {
                0.0
            };
            if slope == 0.0 || raw != c {
                continue;
            }
            // d cos / d u_i = u_j / (|u_i||u_j|) - cos * u_i / |u_i|^2
            let gi = grad.row_mut(i);
            for k in 0..ui.len() {
                gi[k] += slope * (uj[k] / (ni * nj) - c * ui[k] / (ni * ni));
            }
            let gj = grad.row_mut(j);
            for k in 0..ui.len() {
                gj[k] += slope * (ui[k] / (ni * nj) - c * uj[k] / (nj * nj));
            }
        }
    }
    Ok((loss, grad))
}

fn check_prob_rows(probs: &Matrix, what: &str) -> Result<()> {
    for (i, row) in probs.iter_rows().enumerate() {
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::invalid(format!(
                "{what} row {i} is not a probability vector (sum {sum})"
            )));
        }
    }
    Ok(())
}

#[inline]
fn neg_log(p: f64) -> f64 {
    -p.max(LOG_EPS).ln()
}

/// Cross entropy of each softmax row against one target slot. The logit
/// gradient is `p - e_target`, or zero where the clamp is active.
fn xent_rows_grad(probs: &Matrix, targets: &[usize]) -> (f64, Matrix) {
    let mut grad = Matrix::zeros(probs.rows, probs.cols);
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = probs.row(i);
        loss += neg_log(row[t]);
        if row[t] >= LOG_EPS {
            let g = grad.row_mut(i);
            g.copy_from_slice(row);
            g[t] -= 1.0;
        }
    }
    (loss, grad)
}

/// `sum_i -log(env_i[0]) - log(cat_i[1])`: environmental features carry
/// discriminator label 0 and categorical features label 1.
pub fn discrimination_loss(disc_env: &Matrix, disc_cat: &Matrix) -> Result<f64> {
    discrimination_loss_grad(disc_env, disc_cat).map(|(l, _, _)| l)
}

pub fn discrimination_loss_grad(disc_env: &Matrix, disc_cat: &Matrix) -> Result<(f64, Matrix, Matrix)> {
    if disc_env.cols != 2 || disc_cat.cols != 2 || disc_env.rows != disc_cat.rows {
        return Err(Error::invalid(format!(
            "discriminator outputs must both be m x 2, got {:?} and {:?}",
            disc_env.shape(),
            disc_cat.shape()
        )));
    }
    check_prob_rows(disc_env, "discriminator (environmental)")?;
    check_prob_rows(disc_cat, "discriminator (categorical)")?;
    let (le, ge) = xent_rows_grad(disc_env, &vec![0; disc_env.rows]);
    let (lc, gc) = xent_rows_grad(disc_cat, &vec![1; disc_cat.rows]);
    Ok((le + lc, ge, gc))
}

/// `sum_i -log(p_i[y_i])` with 1-based class labels.
pub fn classification_loss(class_probs: &Matrix, labels: &[usize]) -> Result<f64> {
    classification_loss_grad(class_probs, labels).map(|(l, _)| l)
}

pub fn classification_loss_grad(class_probs: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != class_probs.rows {
        return Err(Error::invalid(format!(
            "{} labels for {} probability rows",
            labels.len(),
            class_probs.rows
        )));
    }
    let k = class_probs.cols;
    if let Some(&bad) = labels.iter().find(|&&y| y == 0 || y > k) {
        return Err(Error::invalid(format!("class label {bad} outside 1..={k}")));
    }
    check_prob_rows(class_probs, "class probability")?;
    let targets: Vec<usize> = labels.iter().map(|&y| y - 1).collect();
    Ok(xent_rows_grad(class_probs, &targets))
}

pub fn total_loss(
    outputs: &crate::network::ForwardOutputs,
    pseudo_labels: &[usize],
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let le = embedding_loss(&outputs.env_proj, pseudo_labels, cfg.margin)?;
    let lc = embedding_loss(&outputs.cat_proj, labels, cfg.margin)?;
    let ld = discrimination_loss(&outputs.disc_probs_env, &outputs.disc_probs_cat)?;
    let l0 = classification_loss(&outputs.class_probs, labels)?;
    Ok(LossBreakdown::combine(l0, le, lc, ld, cfg))
}
