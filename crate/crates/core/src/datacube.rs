//! Hyperspectral cubes: the on-disk bundle, band normalization, patch
//! windows and train/test sampling.
//!
//! A bundle is a directory holding `meta.json`, `cube.bin` (little-endian
//! `f32`, layout `[row][col][band]`) and `labels.bin` (little-endian `u16`,
//! 0 = unlabeled, 1..=K = classes).

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

pub const META_FILE: &str = "meta.json";
pub const CUBE_FILE: &str = "cube.bin";
pub const LABELS_FILE: &str = "labels.bin";

const DTYPE: &str = "float32";
const LAYOUT: &str = "row-major [row][col][band]";

pub type Rgb = [u8; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct HyperspectralCube {
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
    /// Radiance values, `[row][col][band]`.
    pub values: Vec<f32>,
    /// Class ids, `[row][col]`; 0 marks an unlabeled pixel.
    pub labels: Vec<u16>,
    pub class_names: Vec<String>,
    pub palette: Vec<Rgb>,
}

impl HyperspectralCube {
    pub fn new(
        rows: usize,
        cols: usize,
        bands: usize,
        values: Vec<f32>,
        labels: Vec<u16>,
        class_names: Vec<String>,
        palette: Vec<Rgb>,
    ) -> Result<Self> {
        let cube = Self {
            rows,
            cols,
            bands,
            values,
            labels,
            class_names,
            palette,
        };
        cube.validate()?;
        Ok(cube)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.bands == 0 {
            return Err(Error::invalid("cube dimensions must be positive"));
        }
        if self.values.len() != self.rows * self.cols * self.bands {
            return Err(Error::invalid(format!(
                "expected {} values for {}x{}x{}, got {}",
                self.rows * self.cols * self.bands,
                self.rows,
                self.cols,
                self.bands,
                self.values.len()
            )));
        }
        if self.labels.len() != self.rows * self.cols {
            return Err(Error::invalid(format!(
                "expected {} labels, got {}",
                self.rows * self.cols,
                self.labels.len()
            )));
        }
        if self.class_names.len() != self.palette.len() {
            return Err(Error::invalid(format!(
                "{} class names but {} palette entries",
                self.class_names.len(),
                self.palette.len()
            )));
        }
        let k = self.num_classes();
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize > k) {
            return Err(Error::invalid(format!(
                "label out of range: {bad} > {k}"
            )));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    #[inline]
    pub fn spectrum(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.cols + col) * self.bands;
        &self.values[start..start + self.bands]
    }

    #[inline]
    pub fn label(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.cols + col]
    }

    /// Labeled pixel count per class; entry `k - 1` is class `k`.
    pub fn class_census(&self) -> Vec<usize> {
        let mut census = vec![0usize; self.num_classes()];
        for &l in &self.labels {
            if l > 0 {
                census[l as usize - 1] += 1;
            }
        }
        census
    }

    /// Labeled pixels of class `class_id` in row-major order.
    pub fn pixels_of_class(&self, class_id: u16) -> Vec<(usize, usize)> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class_id)
            .map(|(i, _)| (i / self.cols, i % self.cols))
            .collect()
    }

    /// Short content hash identifying this cube in sample-set files.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for dim in [self.rows, self.cols, self.bands] {
            hasher.update((dim as u64).to_le_bytes());
        }
        hasher.update(encode_values(&self.values));
        hasher.update(encode_labels(&self.labels));
        let digest = hasher.finalize();
        digest[..8].iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BundleMeta {
    rows: usize,
    cols: usize,
    bands: usize,
    class_names: Vec<String>,
    palette: Vec<Rgb>,
    dtype: String,
    layout: String,
}

fn encode_values(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn encode_labels(labels: &[u16]) -> Vec<u8> {
    labels.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn write_u16_raster(path: &Path, raster: &[u16]) -> Result<()> {
    fs::write(path, encode_labels(raster)).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_u16_raster(path: &Path, expected: usize) -> Result<Vec<u16>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 2 {
        return Err(Error::format(
            "bundle",
            format!(
                "size mismatch: {} holds {} bytes, meta implies {}",
                path.display(),
                bytes.len(),
                expected * 2
            ),
        ));
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect())
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<HyperspectralCube> {
    let dir = dir.as_ref();
    let meta_path = dir.join(META_FILE);
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: BundleMeta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::format("bundle", format!("{}: {e}", meta_path.display())))?;
    if meta.dtype != DTYPE {
        return Err(Error::format(
            "bundle",
            format!("unsupported dtype {:?}", meta.dtype),
        ));
    }
    if meta.layout != LAYOUT {
        return Err(Error::format(
            "bundle",
            format!("unsupported layout {:?}", meta.layout),
        ));
    }

    let cube_path = dir.join(CUBE_FILE);
    let bytes = fs::read(&cube_path).map_err(|e| Error::io(&cube_path, e))?;
    let n = meta.rows * meta.cols * meta.bands;
    if bytes.len() != n * 4 {
        return Err(Error::format(
            "bundle",
            format!(
                "size mismatch: {} holds {} bytes, meta implies {}",
                cube_path.display(),
                bytes.len(),
                n * 4
            ),
        ));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let labels = read_u16_raster(&dir.join(LABELS_FILE), meta.rows * meta.cols)?;

    HyperspectralCube::new(
        meta.rows,
        meta.cols,
        meta.bands,
        values,
        labels,
        meta.class_names,
        meta.palette,
    )
    .map_err(|e| match e {
        Error::InvalidInput(msg) => Error::format("bundle", msg),
        other => other,
    })
}

pub fn save_bundle(cube: &HyperspectralCube, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    cube.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = BundleMeta {
        rows: cube.rows,
        cols: cube.cols,
        bands: cube.bands,
        class_names: cube.class_names.clone(),
        palette: cube.palette.clone(),
        dtype: DTYPE.to_string(),
        layout: LAYOUT.to_string(),
    };
    let mut text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    text.push('\n');
    let meta_path = dir.join(META_FILE);
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
    let cube_path = dir.join(CUBE_FILE);
    fs::write(&cube_path, encode_values(&cube.values)).map_err(|e| Error::io(&cube_path, e))?;
    write_u16_raster(&dir.join(LABELS_FILE), &cube.labels)
}

/// Per-band min-max scaling to `[0, 1]` over the whole cube. Constant bands
/// map to zero.
pub fn normalize_bands(cube: &HyperspectralCube) -> HyperspectralCube {
    let bands = cube.bands;
    let mut lo = vec![f64::INFINITY; bands];
    let mut hi = vec![f64::NEG_INFINITY; bands];
    for px in cube.values.chunks_exact(bands) {
        for (b, &v) in px.iter().enumerate() {
            lo[b] = lo[b].min(v as f64);
            hi[b] = hi[b].max(v as f64);
        }
    }
    let mut out = cube.clone();
    for px in out.values.chunks_exact_mut(bands) {
        for (b, v) in px.iter_mut().enumerate() {
            let span = hi[b] - lo[b];
            *v = if span > 0.0 {
                ((*v as f64 - lo[b]) / span) as f32
            } else {
                0.0
            };
        }
    }
    out
}

/// A `size x size x bands` window, indexed `[row][col][band]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub bands: usize,
    pub values: Vec<f64>,
}

impl Patch {
    #[inline]
    pub fn get(&self, row: usize, col: usize, band: usize) -> f64 {
        self.values[(row * self.size + col) * self.bands + band]
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.size + col) * self.bands;
        &self.values[start..start + self.bands]
    }

    pub fn center(&self) -> &[f64] {
        let c = self.size / 2;
        self.pixel(c, c)
    }
}

/// Reflects an out-of-range coordinate back into `0..len` without repeating
/// the edge sample (`-1 -> 1`, `len -> len - 2`).
fn reflect(mut i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let n = len as isize;
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

pub fn extract_patch(
    cube: &HyperspectralCube,
    row: usize,
    col: usize,
    patch_size: usize,
) -> Result<Patch> {
    if patch_size == 0 || patch_size % 2 == 0 {
        return Err(Error::invalid(format!(
            "patch size must be odd, got {patch_size}"
        )));
    }
    if row >= cube.rows || col >= cube.cols {
        return Err(Error::invalid(format!(
            "pixel ({row}, {col}) outside {}x{} cube",
            cube.rows, cube.cols
        )));
    }
    let half = (patch_size / 2) as isize;
    let mut values = Vec::with_capacity(patch_size * patch_size * cube.bands);
    for dr in -half..=half {
        let r = reflect(row as isize + dr, cube.rows);
        for dc in -half..=half {
            let c = reflect(col as isize + dc, cube.cols);
            values.extend(cube.spectrum(r, c).iter().map(|&v| v as f64));
        }
    }
    Ok(Patch {
        size: patch_size,
        bands: cube.bands,
        values,
    })
}

/// Labeled pixel positions drawn from one cube.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSet {
    pub cube_ref: String,
    pub indices: Vec<(usize, usize)>,
    pub labels: Vec<u16>,
    pub patch_size: usize,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn validate(&self, cube: &HyperspectralCube) -> Result<()> {
        if self.patch_size == 0 || self.patch_size % 2 == 0 {
            return Err(Error::invalid(format!(
                "patch size must be odd, got {}",
                self.patch_size
            )));
        }
        if self.indices.len() != self.labels.len() {
            return Err(Error::invalid("sample indices and labels differ in length"));
        }
        let mut seen = HashSet::with_capacity(self.indices.len());
        for (&(r, c), &l) in self.indices.iter().zip(&self.labels) {
            if r >= cube.rows || c >= cube.cols {
                return Err(Error::invalid(format!("sample ({r}, {c}) outside cube")));
            }
            let actual = cube.label(r, c);
            if actual == 0 || actual != l {
                return Err(Error::invalid(format!(
                    "sample ({r}, {c}) has label {l} but cube says {actual}"
                )));
            }
            if !seen.insert((r, c)) {
                return Err(Error::invalid(format!("duplicate sample ({r}, {c})")));
            }
        }
        Ok(())
    }

    pub fn patches(&self, cube: &HyperspectralCube) -> Result<Vec<Patch>> {
        use rayon::prelude::*;
        self.indices
            .par_iter()
            .map(|&(r, c)| extract_patch(cube, r, c, self.patch_size))
            .collect()
    }

    pub fn with_patch_size(&self, patch_size: usize) -> SampleSet {
        SampleSet {
            patch_size,
            ..self.clone()
        }
    }
}

/// Per-class `(train, test)` counts plus the seed that drives selection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub per_class: BTreeMap<u16, (usize, usize)>,
    pub seed: u64,
}

impl SplitSpec {
    /// `train` pixels per class, and either `test` more or every remaining
    /// labeled pixel.
    pub fn per_class_counts(
        cube: &HyperspectralCube,
        train: usize,
        test: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        let mut per_class = BTreeMap::new();
        for (k, &available) in cube.class_census().iter().enumerate() {
            let class_id = (k + 1) as u16;
            if available < train {
                return Err(Error::invalid(format!(
                    "class {class_id} has {available} pixels, fewer than {train} training samples"
                )));
            }
            let test = test.unwrap_or(available - train);
            per_class.insert(class_id, (train, test));
        }
        Ok(Self { per_class, seed })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |detail: String| Error::format("split spec", detail);
        let mut seed = None;
        let mut per_class = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(v) = line.strip_prefix("seed=") {
                seed = Some(
                    v.trim()
                        .parse::<u64>()
                        .map_err(|e| bad(format!("line {}: seed: {e}", lineno + 1)))?,
                );
                continue;
            }
            if line.replace(' ', "") == "class_id,train,test" {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(bad(format!(
                    "line {}: expected class_id,train,test",
                    lineno + 1
                )));
            }
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|e| bad(format!("line {}: {s:?}: {e}", lineno + 1)))
            };
            let class_id = parse(fields[0])?;
            if class_id == 0 || class_id > u16::MAX as usize {
                return Err(bad(format!("line {}: class id {class_id}", lineno + 1)));
            }
            if per_class
                .insert(class_id as u16, (parse(fields[1])?, parse(fields[2])?))
                .is_some()
            {
                return Err(bad(format!("line {}: duplicate class {class_id}", lineno + 1)));
            }
        }
        let seed = seed.ok_or_else(|| bad("missing `seed=<int>` line".into()))?;
        Ok(Self { per_class, seed })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("seed={}\nclass_id,train,test\n", self.seed);
        for (class_id, (train, test)) in &self.per_class {
            let _ = writeln!(out, "{class_id},{train},{test}");
        }
        out
    }
}

/// Draws disjoint train and test sets, class by class. Each class is
/// shuffled by its own stream keyed on `(seed, class_id)`.
pub fn split_samples(
    cube: &HyperspectralCube,
    spec: &SplitSpec,
    patch_size: usize,
) -> Result<(SampleSet, SampleSet)> {
    let census = cube.class_census();
    let mut train = SampleSet {
        cube_ref: cube.fingerprint(),
        indices: Vec::new(),
        labels: Vec::new(),
        patch_size,
    };
    let mut test = train.clone();
    for (&class_id, &(n_train, n_test)) in &spec.per_class {
        let available = census
            .get((class_id as usize).wrapping_sub(1))
            .copied()
            .ok_or_else(|| Error::invalid(format!("class {class_id} not in cube")))?;
        if n_train + n_test > available {
            return Err(Error::invalid(format!(
                "class {class_id}: {n_train} train + {n_test} test exceeds {available} labeled pixels"
            )));
        }
        let mut pixels = cube.pixels_of_class(class_id);
        pixels.shuffle(&mut rng::keyed(spec.seed, class_id as u64));
        for (i, px) in pixels.into_iter().take(n_train + n_test).enumerate() {
            let set = if i < n_train { &mut train } else { &mut test };
            set.indices.push(px);
            set.labels.push(class_id);
        }
    }
    train.validate(cube)?;
    Ok((train, test))
}

/// Number of samples kept from a class of `n` at sampling `rate`.
pub fn subsample_count(n: usize, rate: f64) -> usize {
    // Guard against products like 0.1 * 30 = 3.0000000000000004.
    (((rate * n as f64) - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Keeps `ceil(rate * n_k)` samples of every class `k`, preserving the
/// original order of the survivors.
pub fn subsample_training(train: &SampleSet, rate: f64, seed: u64) -> Result<SampleSet> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::invalid(format!("sample rate {rate} outside (0, 1]")));
    }
    let mut by_class: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (i, &l) in train.labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut keep = vec![false; train.len()];
    for (class_id, mut members) in by_class {
        let n_keep = subsample_count(members.len(), rate);
        members.shuffle(&mut rng::keyed(seed, class_id as u64));
        for &i in &members[..n_keep] {
            keep[i] = true;
        }
    }
    let mut out = SampleSet {
        indices: Vec::new(),
        labels: Vec::new(),
        ..train.clone()
    };
    for (i, k) in keep.into_iter().enumerate() {
        if k {
            out.indices.push(train.indices[i]);
            out.labels.push(train.labels[i]);
        }
    }
    Ok(out)
}
