//! Synthetic phantom generation and low-count simulation.
//!
//! Real acquisitions subsample list-mode events and re-reconstruct; here the
//! count-fraction -> noise-level relationship is reproduced by voxelwise
//! Poisson thinning of a ground-truth activity map: at count level `delta`,
//! each voxel draws `k ~ Poisson(delta * c_full * lambda)` and reports
//! `k / (delta * c_full)`, so the mean is `lambda` and the variance scales
//! as `1 / delta`. Correlated reconstruction noise is not modeled.

mod dataset;
mod volio;

pub use dataset::{
    build_dataset, DatasetConfig, DatasetManifest, ManifestRealization, ManifestStudy, Split,
};
pub use volio::{load_volume, save_volume};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of detected events retained relative to a full-count acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct CountLevel(f64);

impl CountLevel {
    /// Training/evaluation sampling range used throughout the pipeline.
    pub const SAMPLING_RANGE: (f64, f64) = (0.13, 0.22);

    pub fn new(delta: f64) -> Result<Self> {
        if delta.is_finite() && delta > 0.0 && delta <= 1.0 {
            Ok(CountLevel(delta))
        } else {
            Err(Error::InvalidArgument(format!(
                "count level must lie in (0, 1], got {delta}"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for CountLevel {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        CountLevel::new(v)
    }
}

impl From<CountLevel> for f64 {
    fn from(c: CountLevel) -> f64 {
        c.0
    }
}

/// Role of a volume in the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeRole {
    GroundTruth,
    FullCount,
    LowCount,
    Denoised,
}

/// Provenance attached to denoised outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseProvenance {
    /// SHA-256 of the checkpoint file the output came from.
    pub checkpoint_sha256: String,
    /// Operating mode of that checkpoint.
    pub mode: String,
    /// Count level supplied at inference, when the mode consumes one.
    pub delta: Option<f64>,
}

/// An H x W x D scalar field with count-level and provenance metadata.
///
/// Voxels are stored as `f32` (matching the on-disk dtype) with axes
/// `(h, w, d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    pub voxels: Array3<f32>,
    pub study_id: String,
    pub realization: u32,
    pub role: VolumeRole,
    pub delta: Option<CountLevel>,
    /// Seed the volume was generated with, when it came from a simulator.
    pub seed: Option<u64>,
    pub provenance: Option<DenoiseProvenance>,
}

impl Volume3D {
    /// Construct with invariant checks: finite voxels, non-negative unless
    /// denoised, and `delta` present iff the role is low-count.
    pub fn new(
        voxels: Array3<f32>,
        study_id: impl Into<String>,
        realization: u32,
        role: VolumeRole,
        delta: Option<CountLevel>,
    ) -> Result<Self> {
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "volume contains non-finite voxels".into(),
            ));
        }
        if role != VolumeRole::Denoised && voxels.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument(
                "simulated volumes must be non-negative".into(),
            ));
        }
        match (role, delta.is_some()) {
            (VolumeRole::LowCount, false) => {
                return Err(Error::InvalidArgument(
                    "low-count volumes must record their count level".into(),
                ))
            }
            (VolumeRole::LowCount, true) => {}
            (_, true) => {
                return Err(Error::InvalidArgument(format!(
                    "delta must be absent for role {role:?}"
                )))
            }
            _ => {}
        }
        Ok(Volume3D {
            voxels,
            study_id: study_id.into(),
            realization,
            role,
            delta,
            seed: None,
            provenance: None,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.voxels.shape();
        (s[0], s[1], s[2])
    }
}

/// Structural parameters for the synthetic activity phantom.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    /// Number of smooth hot/cold blobs inside the support.
    pub blobs: usize,
    /// Intensity clamp range (arbitrary SUVR-like units).
    pub intensity_range: (f64, f64),
    /// Baseline activity inside the support.
    pub background: f64,
    /// Ellipsoid semi-axis as a fraction of each dimension.
    pub axes_fraction: (f64, f64, f64),
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            blobs: 6,
            intensity_range: (0.0, 4.0),
            background: 1.0,
            axes_fraction: (0.42, 0.42, 0.42),
        }
    }
}

/// Generate a deterministic synthetic activity phantom: an ellipsoid support
/// with smooth internal structure, zero outside.
pub fn generate_phantom(
    seed: u64,
    dims: (usize, usize, usize),
    config: &PhantomConfig,
) -> Result<Volume3D> {
    let (h, w, d) = dims;
    if h < 8 || w < 8 || d < 8 {
        return Err(Error::InvalidArgument(format!(
            "phantom dims must each be >= 8, got {dims:?}"
        )));
    }
    let (lo, hi) = config.intensity_range;
    if !(lo.is_finite() && hi.is_finite() && hi > lo && lo >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "intensity range must satisfy 0 <= lo < hi, got ({lo}, {hi})"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_dim = h.min(w).min(d) as f64;
    let half_range = (hi - lo) * 0.5;
    // blob parameters drawn up front in a fixed order
    let blobs: Vec<([f64; 3], f64, f64)> = (0..config.blobs)
        .map(|_| {
            let cy = rng.random_range(-0.7..0.7f64);
            let cx = rng.random_range(-0.7..0.7f64);
            let cz = rng.random_range(-0.7..0.7f64);
            let sigma = rng.random_range(min_dim / 10.0..min_dim / 5.0);
            let amp = rng.random_range(-half_range..half_range);
            ([cy, cx, cz], sigma, amp)
        })
        .collect();

    let semi = (
        config.axes_fraction.0 * h as f64,
        config.axes_fraction.1 * w as f64,
        config.axes_fraction.2 * d as f64,
    );
    let center = ((h as f64) / 2.0, (w as f64) / 2.0, (d as f64) / 2.0);

    let mut voxels = Array3::<f32>::zeros((h, w, d));
    for iy in 0..h {
        for ix in 0..w {
            for iz in 0..d {
                let u = (iy as f64 + 0.5 - center.0) / semi.0;
                let v = (ix as f64 + 0.5 - center.1) / semi.1;
                let t = (iz as f64 + 0.5 - center.2) / semi.2;
                let r2 = u * u + v * v + t * t;
                if r2 > 1.0 {
                    continue;
                }
                let mut val = config.background;
                for ([cy, cx, cz], sigma, amp) in &blobs {
                    let dy = iy as f64 + 0.5 - (center.0 + cy * semi.0);
                    let dx = ix as f64 + 0.5 - (center.1 + cx * semi.1);
                    let dz = iz as f64 + 0.5 - (center.2 + cz * semi.2);
                    let dist2 = dy * dy + dx * dx + dz * dz;
                    val += amp * (-dist2 / (2.0 * sigma * sigma)).exp();
                }
                voxels[[iy, ix, iz]] = val.clamp(lo, hi) as f32;
            }
        }
    }

    let mut vol = Volume3D::new(
        voxels,
        format!("phantom-{seed}"),
        0,
        VolumeRole::GroundTruth,
        None,
    )?;
    vol.seed = Some(seed);
    Ok(vol)
}

/// Simulate a count-limited acquisition of `truth` at count level `delta`.
///
/// Voxelwise `k ~ Poisson(delta * c_full * lambda)`, output `k / (delta *
/// c_full)`; `delta = 1` yields the full-count surrogate. Deterministic for a
/// given seed.
pub fn simulate_counts(
    truth: &Volume3D,
    delta: CountLevel,
    c_full: f64,
    seed: u64,
) -> Result<Volume3D> {
    if !(c_full.is_finite() && c_full > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "c_full must be positive, got {c_full}"
        )));
    }
    if truth.role != VolumeRole::GroundTruth {
        return Err(Error::InvalidArgument(format!(
            "count simulation expects a ground-truth volume, got {:?}",
            truth.role
        )));
    }
    let scale = delta.value() * c_full;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Array3::<f32>::zeros(truth.voxels.raw_dim());
    for (o, &lam) in out.iter_mut().zip(truth.voxels.iter()) {
        let mean = lam as f64 * scale;
        if mean > 0.0 {
            let k: f64 = Poisson::new(mean)
                .map_err(|e| Error::InvalidArgument(format!("poisson rate {mean}: {e}")))?
                .sample(&mut rng);
            *o = (k / scale) as f32;
        }
    }

    let full = delta.value() == 1.0;
    let mut vol = Volume3D::new(
        out,
        truth.study_id.clone(),
        truth.realization,
        if full {
            VolumeRole::FullCount
        } else {
            VolumeRole::LowCount
        },
        if full { None } else { Some(delta) },
    )?;
    vol.seed = Some(seed);
    Ok(vol)
}

/// Derive a child seed from a master seed and a tag path (splitmix64 chain).
pub fn derive_seed(master: u64, stream: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E3779B97F4A7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }
    let mut h = mix(master);
    for (i, &s) in stream.iter().enumerate() {
        h = mix(h ^ s.rotate_left(((i as u32) % 7) * 9 + 1));
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_is_deterministic_for_a_seed() {
        let cfg = PhantomConfig::default();
        let a = generate_phantom(7, (32, 32, 16), &cfg).unwrap();
        let b = generate_phantom(7, (32, 32, 16), &cfg).unwrap();
        assert_eq!(a.voxels, b.voxels);
    }

    #[test]
    fn phantom_seeds_differ() {
        let cfg = PhantomConfig::default();
        let a = generate_phantom(7, (32, 32, 16), &cfg).unwrap();
        let b = generate_phantom(8, (32, 32, 16), &cfg).unwrap();
        assert!(a.voxels.iter().zip(b.voxels.iter()).any(|(x, y)| x != y));
    }

    #[test]
    fn phantom_without_blobs_is_constant_inside_support() {
        let cfg = PhantomConfig {
            blobs: 0,
            ..Default::default()
        };
        let v = generate_phantom(3, (16, 16, 16), &cfg).unwrap();
        let inside: Vec<f32> = v.voxels.iter().copied().filter(|&x| x != 0.0).collect();
        assert!(!inside.is_empty());
        assert!(inside.iter().all(|&x| x == cfg.background as f32));
        // and the corner is outside the ellipsoid
        assert_eq!(v.voxels[[0, 0, 0]], 0.0);
    }

    #[test]
    fn phantom_rejects_small_dims() {
        let cfg = PhantomConfig::default();
        assert!(matches!(
            generate_phantom(1, (4, 32, 32), &cfg),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn simulation_of_zero_activity_is_zero() {
        let truth = Volume3D::new(
            Array3::zeros((8, 8, 8)),
            "s",
            0,
            VolumeRole::GroundTruth,
            None,
        )
        .unwrap();
        let sim = simulate_counts(&truth, CountLevel::new(0.15).unwrap(), 50.0, 9).unwrap();
        assert!(sim.voxels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn simulation_is_deterministic() {
        let truth = generate_phantom(11, (16, 16, 16), &PhantomConfig::default()).unwrap();
        let d = CountLevel::new(0.17).unwrap();
        let a = simulate_counts(&truth, d, 50.0, 123).unwrap();
        let b = simulate_counts(&truth, d, 50.0, 123).unwrap();
        assert_eq!(a.voxels, b.voxels);
        assert_eq!(a.role, VolumeRole::LowCount);
        assert_eq!(a.delta, Some(d));
    }

    #[test]
    fn full_count_role_at_delta_one() {
        let truth = generate_phantom(11, (16, 16, 16), &PhantomConfig::default()).unwrap();
        let sim = simulate_counts(&truth, CountLevel::new(1.0).unwrap(), 200.0, 5).unwrap();
        assert_eq!(sim.role, VolumeRole::FullCount);
        assert!(sim.delta.is_none());
    }

    #[test]
    fn poisson_surrogate_mean_within_four_standard_errors() {
        // lambda = 4 constant over 1e5 voxels, delta = 0.15, c_full = 50
        let n = 100_000usize;
        let truth = Volume3D::new(
            Array3::from_elem((50, 50, 40), 4.0f32),
            "mc",
            0,
            VolumeRole::GroundTruth,
            None,
        )
        .unwrap();
        let delta = 0.15;
        let c_full = 50.0;
        let sim = simulate_counts(&truth, CountLevel::new(delta).unwrap(), c_full, 77).unwrap();
        let mean: f64 = sim.voxels.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let se = (4.0 / (delta * c_full) / n as f64).sqrt();
        assert!(
            (mean - 4.0).abs() < 4.0 * se,
            "mean {mean} outside 4 se ({se})"
        );
    }

    #[test]
    fn halving_delta_doubles_variance() {
        let truth = Volume3D::new(
            Array3::from_elem((50, 50, 40), 4.0f32),
            "mc",
            0,
            VolumeRole::GroundTruth,
            None,
        )
        .unwrap();
        let var_of = |delta: f64, seed: u64| {
            let sim =
                simulate_counts(&truth, CountLevel::new(delta).unwrap(), 50.0, seed).unwrap();
            let n = sim.voxels.len() as f64;
            let mean: f64 = sim.voxels.iter().map(|&v| v as f64).sum::<f64>() / n;
            sim.voxels
                .iter()
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
                / (n - 1.0)
        };
        let v_hi = var_of(0.2, 21);
        let v_lo = var_of(0.1, 22);
        let ratio = v_lo / v_hi;
        assert!(
            (ratio - 2.0).abs() / 2.0 < 0.10,
            "variance ratio {ratio} not within 10% of 2"
        );
    }

    #[test]
    fn delta_validation() {
        assert!(CountLevel::new(0.0).is_err());
        assert!(CountLevel::new(1.0001).is_err());
        assert!(CountLevel::new(f64::NAN).is_err());
        assert!(CountLevel::new(1.0).is_ok());
        assert!(CountLevel::new(0.13).is_ok());
    }

    #[test]
    fn volume_invariants_enforced() {
        let v = Array3::<f32>::zeros((8, 8, 8));
        // delta required for low count
        assert!(Volume3D::new(v.clone(), "s", 0, VolumeRole::LowCount, None).is_err());
        // delta forbidden elsewhere
        let d = CountLevel::new(0.2).unwrap();
        assert!(Volume3D::new(v.clone(), "s", 0, VolumeRole::FullCount, Some(d)).is_err());
        // negatives rejected for simulated roles
        let mut neg = v.clone();
        neg[[0, 0, 0]] = -1.0;
        assert!(Volume3D::new(neg.clone(), "s", 0, VolumeRole::GroundTruth, None).is_err());
        // but allowed for denoised outputs
        assert!(Volume3D::new(neg, "s", 0, VolumeRole::Denoised, None).is_ok());
    }

    #[test]
    fn derived_seeds_spread() {
        let a = derive_seed(42, &[1, 0]);
        let b = derive_seed(42, &[1, 1]);
        let c = derive_seed(42, &[2, 0]);
        let d = derive_seed(43, &[1, 0]);
        assert!(a != b && a != c && a != d && b != c);
        assert_eq!(a, derive_seed(42, &[1, 0]));
    }
}
