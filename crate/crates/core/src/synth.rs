//! Synthetic scenes built as `reflectance * shading + noise`, with known
//! class and environment-zone ground truth.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datacube::{self, HyperspectralCube, Rgb};
use crate::error::{Error, Result};
use crate::rng;

pub const ZONES_FILE: &str = "zones.bin";

const PALETTE: [Rgb; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [128, 128, 0],
    [0, 0, 128],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ZoneLayout {
    /// Zones are equal-width column strips.
    #[default]
    VerticalBands,
    /// Zones are Voronoi cells around seeded sites.
    Blobs,
}

impl std::str::FromStr for ZoneLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vertical_bands" => Ok(Self::VerticalBands),
            "blobs" => Ok(Self::Blobs),
            other => Err(Error::Config(format!("unknown zone layout {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
    pub num_classes: usize,
    pub num_zones: usize,
    /// One reflectance curve per class.
    pub class_spectra: Vec<Vec<f64>>,
    /// One multiplicative shading curve per zone, entries in `(0, 1]`.
    pub shading_profiles: Vec<Vec<f64>>,
    pub zone_layout: ZoneLayout,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self::standard(48, 48, 20, 3, 2, ZoneLayout::VerticalBands, 0.01, 0)
    }
}

/// `0.2 + 0.8 * exp(-(b - c)^2 / (2 w^2))` with centers spread evenly over
/// the band axis.
pub fn bump_spectra(bands: usize, num_classes: usize) -> Vec<Vec<f64>> {
    let width = (bands as f64 / (2.0 * num_classes as f64)).max(0.5);
    (0..num_classes)
        .map(|k| {
            let center = (k as f64 + 0.5) * bands as f64 / num_classes as f64;
            (0..bands)
                .map(|b| 0.2 + 0.8 * (-(b as f64 - center).powi(2) / (2.0 * width * width)).exp())
                .collect()
        })
        .collect()
}

/// Slowly varying curves whose band means step down from 1.0 to 0.4.
pub fn smooth_shading(bands: usize, num_zones: usize) -> Vec<Vec<f64>> {
    (0..num_zones)
        .map(|z| {
            let level = 1.0 - 0.6 * z as f64 / (num_zones.max(2) - 1) as f64;
            let freq = 0.5 + 0.25 * z as f64;
            (0..bands)
                .map(|b| {
                    let t = b as f64 / bands as f64;
                    level * (0.85 + 0.15 * (std::f64::consts::TAU * freq * t + z as f64).sin())
                })
                .collect()
        })
        .collect()
}

impl SyntheticSceneSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn standard(
        rows: usize,
        cols: usize,
        bands: usize,
        num_classes: usize,
        num_zones: usize,
        zone_layout: ZoneLayout,
        noise_sigma: f64,
        seed: u64,
    ) -> Self {
        Self {
            rows,
            cols,
            bands,
            num_classes,
            num_zones,
            class_spectra: bump_spectra(bands, num_classes),
            shading_profiles: smooth_shading(bands, num_zones),
            zone_layout,
            noise_sigma,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.bands == 0 {
            return Err(Error::invalid("scene dimensions must be positive"));
        }
        if self.num_classes < 2 || self.num_classes > u16::MAX as usize {
            return Err(Error::invalid(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.num_zones == 0 {
            return Err(Error::invalid("need at least one zone"));
        }
        if self.rows < self.num_classes {
            return Err(Error::invalid("fewer rows than classes"));
        }
        if self.zone_layout == ZoneLayout::VerticalBands && self.cols < self.num_zones {
            return Err(Error::invalid("fewer columns than zones"));
        }
        if self.zone_layout == ZoneLayout::Blobs && self.rows * self.cols < self.num_zones {
            return Err(Error::invalid("fewer pixels than zones"));
        }
        if self.class_spectra.len() != self.num_classes
            || self.class_spectra.iter().any(|s| s.len() != self.bands)
        {
            return Err(Error::invalid("class spectra must be num_classes x bands"));
        }
        if self.class_spectra.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("class spectra must be finite and non-negative"));
        }
        for i in 0..self.num_classes {
            for j in i + 1..self.num_classes {
                if self.class_spectra[i] == self.class_spectra[j] {
                    return Err(Error::invalid(format!("class spectra {} and {} coincide", i + 1, j + 1)));
                }
            }
        }
        if self.shading_profiles.len() != self.num_zones
            || self.shading_profiles.iter().any(|s| s.len() != self.bands)
        {
            return Err(Error::invalid("shading profiles must be num_zones x bands"));
        }
        if self.shading_profiles.iter().flatten().any(|&v| !(v > 0.0 && v <= 1.0)) {
            return Err(Error::invalid("shading entries must lie in (0, 1]"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise sigma must be finite and >= 0"));
        }
        Ok(())
    }

    /// Class of a pixel: horizontal strips, class 1 at the top.
    pub fn class_at(&self, row: usize) -> u16 {
        (row * self.num_classes / self.rows) as u16 + 1
    }

    /// 0-based zone raster, `[row][col]`.
    pub fn zone_raster(&self) -> Vec<u16> {
        match self.zone_layout {
            ZoneLayout::VerticalBands => (0..self.rows)
                .flat_map(|_| (0..self.cols).map(|c| (c * self.num_zones / self.cols) as u16))
                .collect(),
            ZoneLayout::Blobs => {
                let mut rng = rng::keyed(self.seed, 1);
                let sites: Vec<(f64, f64)> = (0..self.num_zones)
                    .map(|_| (rng.random::<f64>() * self.rows as f64, rng.random::<f64>() * self.cols as f64))
                    .collect();
                (0..self.rows)
                    .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
                    .map(|(r, c)| {
                        let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
                        let mut best = (f64::INFINITY, 0);
                        for (z, &(sy, sx)) in sites.iter().enumerate() {
                            let d = (y - sy).powi(2) + (x - sx).powi(2);
                            if d < best.0 {
                                best = (d, z);
                            }
                        }
                        best.1 as u16
                    })
                    .collect()
            }
        }
    }
}

fn palette_for(k: usize) -> Vec<Rgb> {
    (0..k)
        .map(|i| {
            let [r, g, b] = PALETTE[i % PALETTE.len()];
            let shift = (i / PALETTE.len()) as u8 * 37;
            [r.wrapping_add(shift), g.wrapping_add(shift), b.wrapping_add(shift)]
        })
        .collect()
}

/// Builds the cube and the 0-based environment-zone raster.
pub fn generate(spec: &SyntheticSceneSpec) -> Result<(HyperspectralCube, Vec<u16>)> {
    spec.validate()?;
    render(spec, &spec.class_spectra)
}

/// The same scene with every reflectance replaced by ones, leaving only
/// shading and noise.
pub fn shading_only(spec: &SyntheticSceneSpec) -> Result<HyperspectralCube> {
    spec.validate()?;
    let ones = vec![vec![1.0; spec.bands]; spec.num_classes];
    render(spec, &ones).map(|(cube, _)| cube)
}

fn render(spec: &SyntheticSceneSpec, reflectances: &[Vec<f64>]) -> Result<(HyperspectralCube, Vec<u16>)> {
    let zones = spec.zone_raster();
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = rng::keyed(spec.seed, 0);
    let mut values = Vec::with_capacity(spec.rows * spec.cols * spec.bands);
    let mut labels = Vec::with_capacity(spec.rows * spec.cols);
    for r in 0..spec.rows {
        let class = spec.class_at(r);
        let reflectance = &reflectances[class as usize - 1];
        for c in 0..spec.cols {
            let shading = &spec.shading_profiles[zones[r * spec.cols + c] as usize];
            for (rb, sb) in reflectance.iter().zip(shading) {
                let mut v = rb * sb;
                if spec.noise_sigma > 0.0 {
                    v = (v + noise.sample(&mut rng)).max(0.0);
                }
                values.push(v as f32);
            }
            labels.push(class);
        }
    }
    let names = (1..=spec.num_classes).map(|k| format!("class_{k}")).collect();
    let cube = HyperspectralCube::new(
        spec.rows,
        spec.cols,
        spec.bands,
        values,
        labels,
        names,
        palette_for(spec.num_classes),
    )?;
    Ok((cube, zones))
}

pub fn write_scene(dir: &Path, cube: &HyperspectralCube, zones: &[u16]) -> Result<()> {
    datacube::save_bundle(cube, dir)?;
    datacube::write_u16_raster(&dir.join(ZONES_FILE), zones)
}

pub fn load_zones(dir: &Path, cube: &HyperspectralCube) -> Result<Vec<u16>> {
    datacube::read_u16_raster(&dir.join(ZONES_FILE), cube.rows * cube.cols)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean(layout: ZoneLayout) -> SyntheticSceneSpec {
        SyntheticSceneSpec::standard(12, 10, 8, 3, 2, layout, 0.0, 4)
    }

    #[test]
    fn identity_shading_reproduces_reflectance() {
        let mut spec = clean(ZoneLayout::VerticalBands);
        spec.num_zones = 1;
        spec.shading_profiles = vec![vec![1.0; spec.bands]];
        let (cube, _) = generate(&spec).unwrap();
        for r in 0..cube.rows {
            for c in 0..cube.cols {
                let k = cube.label(r, c) as usize;
                let want: Vec<f32> = spec.class_spectra[k - 1].iter().map(|&v| v as f32).collect();
                assert_eq!(cube.spectrum(r, c), &want[..]);
            }
        }
    }

    #[test]
    fn noiseless_ratio_is_zone_shading() {
        for layout in [ZoneLayout::VerticalBands, ZoneLayout::Blobs] {
            let spec = clean(layout);
            let (cube, zones) = generate(&spec).unwrap();
            for r in 0..cube.rows {
                for c in 0..cube.cols {
                    let k = cube.label(r, c) as usize;
                    let shading = &spec.shading_profiles[zones[r * cube.cols + c] as usize];
                    for (b, &v) in cube.spectrum(r, c).iter().enumerate() {
                        let ratio = v as f64 / spec.class_spectra[k - 1][b];
                        assert!((ratio - shading[b]).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn default_scene_counts() {
        let spec = SyntheticSceneSpec::default();
        let (cube, zones) = generate(&spec).unwrap();
        assert_eq!((cube.rows, cube.cols, cube.bands), (48, 48, 20));
        // 48 rows over 3 strips
        assert_eq!(cube.class_census(), vec![16 * 48; 3]);
        assert_eq!(zones.iter().filter(|&&z| z == 0).count(), 24 * 48);
        assert!(cube.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = SyntheticSceneSpec::default();
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = SyntheticSceneSpec { seed: 1, ..spec.clone() };
        assert_ne!(generate(&spec).unwrap().0, generate(&other).unwrap().0);
    }

    #[test]
    fn shading_only_has_one_spectrum_per_zone() {
        let spec = clean(ZoneLayout::Blobs);
        let cube = shading_only(&spec).unwrap();
        let mut distinct: Vec<&[f32]> = (0..cube.rows * cube.cols)
            .map(|i| cube.spectrum(i / cube.cols, i % cube.cols))
            .collect();
        distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
        distinct.dedup();
        let zones_present = {
            let mut z = spec.zone_raster();
            z.sort();
            z.dedup();
            z.len()
        };
        assert_eq!(distinct.len(), zones_present);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut spec = clean(ZoneLayout::VerticalBands);
        spec.class_spectra[1] = spec.class_spectra[0].clone();
        assert!(generate(&spec).is_err());
        let mut spec = clean(ZoneLayout::VerticalBands);
        spec.shading_profiles[0][0] = 0.0;
        assert!(generate(&spec).is_err());
        let mut spec = clean(ZoneLayout::VerticalBands);
        spec.num_classes = 1;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn bundle_round_trip_with_zones() {
        let dir = tempfile::tempdir().unwrap();
        let (cube, zones) = generate(&SyntheticSceneSpec::default()).unwrap();
        write_scene(dir.path(), &cube, &zones).unwrap();
        let back = datacube::load_bundle(dir.path()).unwrap();
        assert_eq!(back, cube);
        assert_eq!(load_zones(dir.path(), &back).unwrap(), zones);
    }
}
