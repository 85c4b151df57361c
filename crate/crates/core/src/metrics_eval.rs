//! Accuracy metrics, confusion matrices and classification maps.

use std::fmt::Write as _;
use std::path::Path;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datacube::{extract_patch, HyperspectralCube, Rgb, SampleSet};
use crate::error::{Error, Result};
use crate::network::{self, ModelState};

pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_TXT: &str = "metrics.txt";

/// Rows index the true class, columns the predicted class; both 0-based
/// (class `k` lives at index `k - 1`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub class_names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn new(class_names: Vec<String>) -> Self {
        let k = class_names.len();
        Self { counts: vec![vec![0; k]; k], class_names }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if k == 0 || counts.iter().any(|r| r.len() != k) {
            return Err(Error::invalid("confusion matrix must be square and non-empty"));
        }
        let class_names = (1..=k).map(|i| format!("class {i}")).collect();
        Ok(Self { counts, class_names })
    }

    /// Tallies 1-based `(truth, predicted)` pairs.
    pub fn from_labels(truth: &[u16], predicted: &[u16], class_names: Vec<String>) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::invalid("truth and prediction lengths differ"));
        }
        let mut cm = Self::new(class_names);
        let k = cm.num_classes();
        for (&t, &p) in truth.iter().zip(predicted) {
            if t == 0 || p == 0 || t as usize > k || p as usize > k {
                return Err(Error::invalid(format!("label pair ({t}, {p}) outside 1..={k}")));
            }
            cm.counts[t as usize - 1][p as usize - 1] += 1;
        }
        Ok(cm)
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|k| self.counts[k][k]).sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        self.counts.iter().map(|r| r[k]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    /// Recall per class; `None` for classes absent from the evaluated set.
    pub per_class: Vec<Option<f64>>,
}

/// Cohen's kappa. When chance agreement is total the value is 1 for perfect
/// agreement and 0 otherwise.
pub fn kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::invalid("kappa of an empty confusion matrix"));
    }
    let n = total as f64;
    let po = cm.trace() as f64 / n;
    let pe = (0..cm.num_classes())
        .map(|k| cm.row_sum(k) as f64 * cm.col_sum(k) as f64)
        .sum::<f64>()
        / (n * n);
    if pe == 1.0 {
        return Ok(if po == 1.0 { 1.0 } else { 0.0 });
    }
    Ok((po - pe) / (1.0 - pe))
}

pub fn metrics_from_confusion(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::invalid("no evaluated samples"));
    }
    let per_class: Vec<Option<f64>> = (0..cm.num_classes())
        .map(|k| {
            let n = cm.row_sum(k);
            (n > 0).then(|| cm.counts[k][k] as f64 / n as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(MetricsReport {
        oa: cm.trace() as f64 / total as f64,
        aa: present.iter().sum::<f64>() / present.len() as f64,
        kappa: kappa(cm)?,
        per_class,
    })
}

/// Class predictions for every sample, computed in chunks of `batch_size`.
pub fn predict_samples(
    model: &ModelState,
    cube: &HyperspectralCube,
    positions: &[(usize, usize)],
    batch_size: usize,
) -> Result<Vec<u16>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let p = model.spec.patch_size;
    let chunks: Vec<Vec<u16>> = positions
        .par_chunks(batch_size)
        .map(|chunk| {
            let patches = chunk
                .iter()
                .map(|&(r, c)| extract_patch(cube, r, c, p))
                .collect::<Result<Vec<_>>>()?;
            network::predict(model, &patches)
        })
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

pub fn evaluate(
    model: &ModelState,
    cube: &HyperspectralCube,
    test: &SampleSet,
    batch_size: usize,
) -> Result<(ConfusionMatrix, MetricsReport)> {
    if test.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    test.validate(cube)?;
    if cube.num_classes() != model.spec.num_classes || cube.bands != model.spec.bands {
        return Err(Error::invalid("model does not match the cube's classes or bands"));
    }
    let predicted = predict_samples(model, cube, &test.indices, batch_size)?;
    let cm = ConfusionMatrix::from_labels(&test.labels, &predicted, cube.class_names.clone())?;
    let report = metrics_from_confusion(&cm)?;
    Ok((cm, report))
}

/// On-disk metrics document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub per_class: Vec<Option<f64>>,
    pub confusion: Vec<Vec<u64>>,
    pub class_names: Vec<String>,
}

impl MetricsFile {
    pub fn new(cm: &ConfusionMatrix, report: &MetricsReport) -> Self {
        Self {
            oa: report.oa,
            aa: report.aa,
            kappa: report.kappa,
            per_class: report.per_class.clone(),
            confusion: cm.counts.clone(),
            class_names: cm.class_names.clone(),
        }
    }

    pub fn confusion_matrix(&self) -> ConfusionMatrix {
        ConfusionMatrix { counts: self.confusion.clone(), class_names: self.class_names.clone() }
    }
}

/// Per-class accuracy rows followed by an OA/AA/kappa footer.
pub fn metrics_table(cm: &ConfusionMatrix, report: &MetricsReport) -> String {
    let width = cm.class_names.iter().map(String::len).max().unwrap_or(0).max(12);
    let mut out = String::new();
    let _ = writeln!(out, "{:>3}  {:<width$}  {:>8}  {:>8}", "#", "class", "samples", "acc (%)");
    for (k, name) in cm.class_names.iter().enumerate() {
        let acc = match report.per_class[k] {
            Some(a) => format!("{:.2}", 100.0 * a),
            None => "-".into(),
        };
        let _ = writeln!(out, "{:>3}  {:<width$}  {:>8}  {:>8}", k + 1, name, cm.row_sum(k), acc);
    }
    let _ = writeln!(out, "{}", "-".repeat(width + 27));
    let _ = writeln!(out, "{:>3}  {:<width$}  {:>8}  {:>8.2}", "", "OA (%)", cm.total(), 100.0 * report.oa);
    let _ = writeln!(out, "{:>3}  {:<width$}  {:>8}  {:>8.2}", "", "AA (%)", "", 100.0 * report.aa);
    let _ = writeln!(out, "{:>3}  {:<width$}  {:>8}  {:>8.4}", "", "kappa", "", report.kappa);
    out
}

pub fn write_metrics(dir: &Path, cm: &ConfusionMatrix, report: &MetricsReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(&MetricsFile::new(cm, report)).expect("metrics serialize") + "\n";
    let path = dir.join(METRICS_JSON);
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    let path = dir.join(METRICS_TXT);
    std::fs::write(&path, metrics_table(cm, report)).map_err(|e| Error::io(&path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UnlabeledPolicy {
    #[default]
    ColorAll,
    /// Unlabeled pixels are painted black.
    MaskUnlabeled,
}

impl std::str::FromStr for UnlabeledPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "color_all" => Ok(Self::ColorAll),
            "mask_unlabeled" => Ok(Self::MaskUnlabeled),
            other => Err(Error::Config(format!("unknown unlabeled policy {other:?}"))),
        }
    }
}

/// Classifies every pixel of the cube and paints it with its class color.
pub fn render_map(
    model: &ModelState,
    cube: &HyperspectralCube,
    palette: &[Rgb],
    policy: UnlabeledPolicy,
) -> Result<RgbImage> {
    if palette.len() != model.spec.num_classes {
        return Err(Error::invalid(format!(
            "palette has {} colors for {} classes",
            palette.len(),
            model.spec.num_classes
        )));
    }
    let positions: Vec<(usize, usize)> = (0..cube.rows)
        .flat_map(|r| (0..cube.cols).map(move |c| (r, c)))
        .filter(|&(r, c)| policy == UnlabeledPolicy::ColorAll || cube.label(r, c) != 0)
        .collect();
    let predicted = predict_samples(model, cube, &positions, 64)?;
    let mut img = RgbImage::new(cube.cols as u32, cube.rows as u32);
    for (&(r, c), &k) in positions.iter().zip(&predicted) {
        img.put_pixel(c as u32, r as u32, image::Rgb(palette[k as usize - 1]));
    }
    Ok(img)
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid("labelings must be non-empty and of equal length"));
    }
    let index = |xs: &[usize]| {
        let mut ids: Vec<usize> = xs.to_vec();
        ids.sort_unstable();
        ids.dedup();
        xs.iter().map(|x| ids.binary_search(x).unwrap()).collect::<Vec<_>>()
    };
    let (ia, ib) = (index(a), index(b));
    let (na, nb) = (ia.iter().max().unwrap() + 1, ib.iter().max().unwrap() + 1);
    let mut table = vec![vec![0u64; nb]; na];
    for (&x, &y) in ia.iter().zip(&ib) {
        table[x][y] += 1;
    }
    let pairs = |n: u64| (n * n.saturating_sub(1) / 2) as f64;
    let sum_ij: f64 = table.iter().flatten().map(|&n| pairs(n)).sum();
    let sum_a: f64 = table.iter().map(|r| pairs(r.iter().sum())).sum();
    let sum_b: f64 = (0..nb).map(|j| pairs(table.iter().map(|r| r[j]).sum())).sum();
    let total = pairs(a.len() as u64);
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        // Both labelings are trivial (all one cluster or all singletons).
        return Ok(if sum_a == sum_b { 1.0 } else { 0.0 });
    }
    Ok((sum_ij - expected) / (max - expected))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(counts: Vec<Vec<u64>>) -> ConfusionMatrix {
        ConfusionMatrix::from_counts(counts).unwrap()
    }

    #[test]
    fn hand_computed_two_class() {
        let r = metrics_from_confusion(&cm(vec![vec![3, 1], vec![1, 3]])).unwrap();
        assert_eq!((r.oa, r.aa, r.kappa), (0.75, 0.75, 0.5));
    }

    #[test]
    fn perfect_and_chance() {
        let r = metrics_from_confusion(&cm(vec![vec![5, 0, 0], vec![0, 2, 0], vec![0, 0, 7]])).unwrap();
        assert_eq!((r.oa, r.aa, r.kappa), (1.0, 1.0, 1.0));
        // everything predicted as class 1 on balanced data
        let r = metrics_from_confusion(&cm(vec![vec![4, 0], vec![4, 0]])).unwrap();
        assert_eq!((r.oa, r.kappa), (0.5, 0.0));
        assert_eq!(kappa(&cm(vec![vec![2, 2], vec![2, 2]])).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_single_cell() {
        assert_eq!(kappa(&cm(vec![vec![9, 0], vec![0, 0]])).unwrap(), 1.0);
        assert!(kappa(&cm(vec![vec![0, 0], vec![0, 0]])).is_err());
    }

    #[test]
    fn aa_skips_absent_classes() {
        let r = metrics_from_confusion(&cm(vec![vec![1, 1, 0], vec![0, 0, 0], vec![0, 0, 2]])).unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), None, Some(1.0)]);
        assert_eq!(r.aa, 0.75);
    }

    #[test]
    fn ari_cases() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[5, 5, 2, 2]).unwrap(), 1.0);
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap();
        assert!((v - -0.5).abs() < 1e-12);
        assert_eq!(adjusted_rand_index(&[1, 1, 1], &[2, 2, 2]).unwrap(), 1.0);
    }

    #[test]
    fn table_has_footer() {
        let c = cm(vec![vec![3, 1], vec![1, 3]]);
        let t = metrics_table(&c, &metrics_from_confusion(&c).unwrap());
        assert!(t.contains("OA (%)") && t.contains("75.00") && t.contains("0.5000"));
    }
}
