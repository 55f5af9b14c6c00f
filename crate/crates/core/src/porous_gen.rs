//! Truncated-Gaussian synthesis of binary porous media.
//!
//! Pipeline per sample: i.i.d. standard normal cube, circular Gaussian
//! smoothing, then a quantile threshold that hits the drawn porosity to
//! within one voxel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{flat_index, Field3, VoxelGrid};
use crate::spectral::{irfft3, rfft3};

/// Reference edge length at which the default smoothing parameters apply.
pub const REFERENCE_EDGE: usize = 48;
/// Grids smaller than this get their smoothing scaled down.
pub const DESK_SCALE_BELOW: usize = 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub edge_length: usize,
    /// Standard deviation of the smoothing kernel, voxels.
    pub smoothing_sigma: f64,
    /// Edge of the truncated kernel, voxels (odd).
    pub kernel_extent: usize,
    pub porosity_range: [f64; 2],
    /// Physical voxel edge, meters.
    pub voxel_size: f64,
    pub seed: u64,
    /// Shrink `smoothing_sigma`/`kernel_extent` by `n/48` below 40 voxels.
    pub desk_scaling: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            edge_length: REFERENCE_EDGE,
            smoothing_sigma: 5.0,
            kernel_extent: 17,
            porosity_range: [0.125, 0.200],
            voxel_size: 0.003,
            seed: 0,
            desk_scaling: true,
        }
    }
}

impl GenConfig {
    pub fn with_edge(&self, n: usize) -> Self {
        Self {
            edge_length: n,
            ..self.clone()
        }
    }

    /// Smoothing `(sigma, extent)` actually used at this config's edge length.
    pub fn effective_smoothing(&self) -> (f64, usize) {
        let n = self.edge_length;
        if !self.desk_scaling || n >= DESK_SCALE_BELOW {
            return (self.smoothing_sigma, self.kernel_extent);
        }
        let scale = n as f64 / REFERENCE_EDGE as f64;
        let target = self.kernel_extent as f64 * scale;
        let extent = (2.0 * ((target - 1.0) / 2.0).round() + 1.0).max(3.0) as usize;
        (self.smoothing_sigma * scale, extent.min(odd_floor(n)))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.edge_length;
        if n < 2 {
            return Err(Error::config(format!("edge_length must be >= 2, got {n}")));
        }
        let [lo, hi] = self.porosity_range;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::config(format!(
                "porosity_range must satisfy 0 < lo < hi < 1, got [{lo}, {hi}]"
            )));
        }
        if !(self.smoothing_sigma > 0.0) || !(self.voxel_size > 0.0) {
            return Err(Error::config("smoothing_sigma and voxel_size must be positive"));
        }
        let (_, extent) = self.effective_smoothing();
        check_extent(extent, n)
    }
}

fn odd_floor(n: usize) -> usize {
    if n % 2 == 1 {
        n
    } else {
        n - 1
    }
}

fn check_extent(extent: usize, n: usize) -> Result<()> {
    if extent.is_multiple_of(2) {
        return Err(Error::config(format!("kernel_extent must be odd, got {extent}")));
    }
    if extent > n {
        return Err(Error::config(format!("kernel_extent {extent} exceeds edge length {n}")));
    }
    Ok(())
}

/// A generated cube, optionally carrying its permeability label.
#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub voxels: VoxelGrid,
    pub porosity: f64,
    /// Millidarcy; NaN while unlabeled.
    pub permeability: f64,
    pub seed: u64,
}

/// Floats compare bitwise so unlabeled (NaN) samples equal their copies.
impl PartialEq for LabeledSample {
    fn eq(&self, other: &Self) -> bool {
        self.voxels == other.voxels
            && self.porosity.to_bits() == other.porosity.to_bits()
            && self.permeability.to_bits() == other.permeability.to_bits()
            && self.seed == other.seed
    }
}

impl LabeledSample {
    pub fn edge(&self) -> usize {
        self.voxels.edge()
    }

    pub fn is_labeled(&self) -> bool {
        !self.permeability.is_nan()
    }
}

/// I.i.d. standard normal cube; identical `(n, seed)` gives identical bits.
pub fn sample_gaussian_field(n: usize, seed: u64) -> Result<Field3> {
    if n < 2 {
        return Err(Error::shape(format!("field edge must be >= 2, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * n * n).map(|_| rng.sample(StandardNormal)).collect();
    Field3::new(n, data)
}

/// Sum-normalized Gaussian kernel wrapped onto an `n^3` periodic grid,
/// centered on voxel `(0,0,0)`.
pub fn gaussian_kernel(n: usize, sigma: f64, extent: usize) -> Result<Field3> {
    check_extent(extent, n)?;
    let half = (extent / 2) as isize;
    let mut kernel = Field3::zeros(n);
    let wrap = |d: isize| d.rem_euclid(n as isize) as usize;
    let mut total = 0.0;
    for dz in -half..=half {
        for dy in -half..=half {
            for dx in -half..=half {
                let r2 = (dx * dx + dy * dy + dz * dz) as f64;
                let w = (-r2 / (2.0 * sigma * sigma)).exp();
                kernel.data_mut()[flat_index(n, wrap(dx), wrap(dy), wrap(dz))] = w;
                total += w;
            }
        }
    }
    kernel.data_mut().iter_mut().for_each(|w| *w /= total);
    Ok(kernel)
}

/// Circular convolution with a truncated, normalized 3-D Gaussian.
pub fn smooth_field(field: &Field3, sigma: f64, extent: usize) -> Result<Field3> {
    let n = field.edge();
    if !(sigma > 0.0) {
        return Err(Error::config(format!("smoothing sigma must be positive, got {sigma}")));
    }
    let kernel = gaussian_kernel(n, sigma, extent)?;
    let mut spec = rfft3(field)?;
    let kspec = rfft3(&kernel)?;
    for (a, b) in spec.coefficients_mut().iter_mut().zip(kspec.coefficients()) {
        *a *= *b;
    }
    irfft3(&spec, n)
}

/// Pore flags for the `round(phi * len)` smallest values under the total
/// order `(value, index)`.
pub fn binarize_values(values: &[f64], porosity: f64) -> Result<(Vec<u8>, usize)> {
    if !(porosity > 0.0 && porosity < 1.0) {
        return Err(Error::config(format!(
            "target porosity must lie in (0, 1), got {porosity}"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("cannot threshold a non-finite field".into()));
    }
    let count = (porosity * values.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_unstable_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut cells = vec![0u8; values.len()];
    for &i in &order[..count] {
        cells[i] = 1;
    }
    Ok((cells, count))
}

/// Threshold at the empirical `phi`-quantile; returns the grid and its exact porosity.
pub fn binarize_to_porosity(field: &Field3, porosity: f64) -> Result<(VoxelGrid, f64)> {
    let (cells, count) = binarize_values(field.data(), porosity)?;
    let actual = count as f64 / cells.len() as f64;
    Ok((VoxelGrid::new(field.edge(), cells)?, actual))
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for sample `index` of edge `n` under a base seed.
pub fn derive_sample_seed(base: u64, n: usize, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ n as u64) ^ index)
}

/// Generate one unlabeled sample from its own seed.
pub fn generate_sample(cfg: &GenConfig, seed: u64) -> Result<LabeledSample> {
    let n = cfg.edge_length;
    let (sigma, extent) = cfg.effective_smoothing();
    let [lo, hi] = cfg.porosity_range;
    let target = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x5157_0A5E)).gen_range(lo..hi);
    let raw = sample_gaussian_field(n, seed)?;
    let smooth = smooth_field(&raw, sigma, extent)?;
    let (voxels, porosity) = binarize_to_porosity(&smooth, target)?;
    Ok(LabeledSample {
        voxels,
        porosity,
        permeability: f64::NAN,
        seed,
    })
}

/// `count` samples at `cfg.edge_length`; a pure function of `cfg` and `count`.
pub fn generate_dataset(cfg: &GenConfig, count: usize) -> Result<Vec<LabeledSample>> {
    use rayon::prelude::*;
    cfg.validate()?;
    if count == 0 {
        return Err(Error::config("sample count must be >= 1"));
    }
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_sample(cfg, derive_sample_seed(cfg.seed, cfg.edge_length, i)))
        .collect()
}

/// Split sizes `(train, val, test)` for one size group: 10% validation and
/// 10% test (rounded down), the rest for training.
pub fn split_counts(count: usize) -> (usize, usize, usize) {
    let val = count / 10;
    let test = count / 10;
    (count - val - test, val, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_field_is_deterministic_and_seed_sensitive() {
        let a = sample_gaussian_field(16, 7).unwrap();
        let b = sample_gaussian_field(16, 7).unwrap();
        let c = sample_gaussian_field(16, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn gaussian_field_moments() {
        let f = sample_gaussian_field(32, 1).unwrap();
        let bound = 4.0 / (32.0f64.powi(3)).sqrt();
        assert!(f.mean().abs() <= bound, "mean {}", f.mean());
        assert!((f.variance() - 1.0).abs() <= 0.05, "variance {}", f.variance());
    }

    #[test]
    fn smoothing_preserves_constants() {
        let f = Field3::from_fn(20, |_, _, _| 3.25);
        let s = smooth_field(&f, 5.0, 17).unwrap();
        assert!(s.data().iter().all(|v| (v - 3.25).abs() <= 1e-12));
    }

    #[test]
    fn smoothing_a_delta_returns_the_kernel() {
        let n = 20;
        let delta = Field3::from_fn(n, |x, y, z| (x + y + z == 0) as u8 as f64);
        let s = smooth_field(&delta, 5.0, 17).unwrap();
        let k = gaussian_kernel(n, 5.0, 17).unwrap();
        let err = s
            .data()
            .iter()
            .zip(k.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-12);
        assert!((k.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        // Outside the 17^3 support the kernel is exactly zero.
        assert_eq!(k.get(9, 0, 0), 0.0);
        assert!(k.get(8, 0, 0) > 0.0 && k.get(12, 0, 0) > 0.0);
    }

    #[test]
    fn smoothing_contracts_variance() {
        for seed in 0..3 {
            let f = sample_gaussian_field(24, seed).unwrap();
            let s = smooth_field(&f, 2.5, 9).unwrap();
            assert!(s.variance() < f.variance());
        }
    }

    #[test]
    fn even_extent_is_rejected() {
        let f = Field3::zeros(8);
        assert!(matches!(smooth_field(&f, 1.0, 4), Err(Error::Config(_))));
        assert!(matches!(smooth_field(&f, 1.0, 9), Err(Error::Config(_))));
    }

    #[test]
    fn binarize_lowest_quartile() {
        let (cells, count) = binarize_values(&[1.0, 2.0, 3.0, 4.0], 0.25).unwrap();
        assert_eq!(count, 1);
        assert_eq!(cells, vec![1, 0, 0, 0]);
    }

    #[test]
    fn binarize_counts_and_limits() {
        let f = sample_gaussian_field(10, 3).unwrap();
        for phi in [0.13, 0.5, 0.777] {
            let (g, actual) = binarize_to_porosity(&f, phi).unwrap();
            assert_eq!(g.pore_count(), (phi * 1000.0_f64).round() as usize);
            assert_eq!(actual, g.porosity());
        }
        let (g, _) = binarize_to_porosity(&f, 1e-6).unwrap();
        assert_eq!(g.pore_count(), 0);
        let (g, _) = binarize_to_porosity(&f, 1.0 - 1e-6).unwrap();
        assert_eq!(g.pore_count(), 1000);
        assert!(binarize_to_porosity(&f, 0.0).is_err());
    }

    #[test]
    fn constant_field_breaks_ties_by_index() {
        let f = Field3::from_fn(4, |_, _, _| 1.0);
        let (g, _) = binarize_to_porosity(&f, 0.25).unwrap();
        assert_eq!(g.pore_count(), 16);
        assert!(g.cells()[..16].iter().all(|&c| c == 1));
    }

    #[test]
    fn negation_gives_complement() {
        let f = smooth_field(&sample_gaussian_field(12, 5).unwrap(), 1.5, 5).unwrap();
        let neg = Field3::new(12, f.data().iter().map(|v| -v).collect()).unwrap();
        let phi = 0.3;
        let (a, _) = binarize_to_porosity(&f, phi).unwrap();
        let (b, _) = binarize_to_porosity(&neg, 1.0 - phi).unwrap();
        for (x, y) in a.cells().iter().zip(b.cells()) {
            assert_eq!(x + y, 1);
        }
    }

    #[test]
    fn desk_scaling_rule() {
        let base = GenConfig::default();
        assert_eq!(base.with_edge(48).effective_smoothing(), (5.0, 17));
        assert_eq!(base.with_edge(56).effective_smoothing(), (5.0, 17));
        let (s, e) = base.with_edge(24).effective_smoothing();
        assert!((s - 2.5).abs() < 1e-12);
        assert_eq!(e, 9);
        assert_eq!(base.with_edge(16).effective_smoothing().1, 5);
        assert_eq!(base.with_edge(20).effective_smoothing().1, 7);
        assert_eq!(base.with_edge(4).effective_smoothing().1, 3);
    }

    #[test]
    fn dataset_is_deterministic_and_in_range() {
        let cfg = GenConfig {
            seed: 0,
            ..GenConfig::default().with_edge(12)
        };
        let a = generate_dataset(&cfg, 3).unwrap();
        let b = generate_dataset(&cfg, 3).unwrap();
        assert_eq!(a, b);
        let vol = 12.0f64.powi(3);
        for s in &a {
            assert!(s.porosity >= 0.125 - 1.0 / vol && s.porosity <= 0.2 + 1.0 / vol);
            assert_eq!(s.porosity, s.voxels.porosity());
            assert!(!s.is_labeled());
        }
        assert_ne!(a[0].voxels, a[1].voxels);
    }

    #[test]
    fn reference_split_counts() {
        assert_eq!(split_counts(1250), (1000, 125, 125));
        let total: usize = (0..3).map(|_| split_counts(1250).0).sum();
        assert_eq!(total, 3000);
        assert_eq!(split_counts(150), (120, 15, 15));
    }

    #[test]
    fn invalid_configs() {
        let cfg = GenConfig {
            porosity_range: [0.3, 0.2],
            ..GenConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = GenConfig {
            kernel_extent: 16,
            ..GenConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(generate_dataset(&GenConfig::default().with_edge(12), 0).is_err());
    }
}
