//! Evaluation suite: voxel-wise ensemble bias/std/RMSE over noise
//! realizations, plus MAE, MSE, PSNR and 3D SSIM.
//!
//! All statistics are computed in f64 regardless of the volume dtype. The
//! ensemble decomposition follows the bias/variance split: per voxel `i`
//! over `K` realizations, `m_i` is the mean error against the reference,
//! `sigma_i` the Bessel-corrected standard deviation of those errors, and
//! `rmse_i = sqrt(m_i^2 + sigma_i^2)`.
//!
//! Note: the error-vs-mean form `(e_i^k - m_i)` is used inside the std (not
//! the raw value form), which is what makes the `rmse^2 = m^2 + sigma^2`
//! identity hold by construction.

use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_same_dims(a: &Array3<f32>, b: &Array3<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "volume dims differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean absolute voxel difference.
pub fn mae(a: &Array3<f32>, b: &Array3<f32>) -> Result<f64> {
    check_same_dims(a, b)?;
    let n = a.len() as f64;
    Ok(a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum::<f64>()
        / n)
}

/// Mean squared voxel difference.
pub fn mse(a: &Array3<f32>, b: &Array3<f32>) -> Result<f64> {
    check_same_dims(a, b)?;
    let n = a.len() as f64;
    Ok(a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio `10 log10(L^2 / MSE)`.
///
/// `dynamic_range` defaults to the maximum of the reference; a zero MSE
/// reports `f64::INFINITY`.
pub fn psnr(pred: &Array3<f32>, reference: &Array3<f32>, dynamic_range: Option<f64>) -> Result<f64> {
    check_same_dims(pred, reference)?;
    let l = resolve_range(reference, dynamic_range)?;
    let err = mse(pred, reference)?;
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (l * l / err).log10())
}

fn resolve_range(reference: &Array3<f32>, dynamic_range: Option<f64>) -> Result<f64> {
    let l = match dynamic_range {
        Some(l) => l,
        None => reference.iter().copied().fold(f32::MIN, f32::max) as f64,
    };
    if !(l.is_finite() && l > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "dynamic range must be positive and finite, got {l} \
             (all-zero reference needs an explicit range)"
        )));
    }
    Ok(l)
}

/// 3D SSIM configuration. Defaults: K1 = 0.01, K2 = 0.03, Gaussian window
/// with k = 5 and sigma = 1.5, dynamic range from the reference maximum.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimConfig {
    pub k1: f64,
    pub k2: f64,
    pub window: usize,
    pub sigma: f64,
    pub dynamic_range: Option<f64>,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            k1: 0.01,
            k2: 0.03,
            window: 5,
            sigma: 1.5,
            dynamic_range: None,
        }
    }
}

impl SsimConfig {
    fn validate(&self) -> Result<()> {
        if self.window % 2 == 0 || self.window == 0 {
            return Err(Error::Config(format!(
                "SSIM window must be odd, got {}",
                self.window
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!(
                "SSIM sigma must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    fn kernel(&self) -> Array1<f64> {
        let k = self.window;
        let c = (k as f64 - 1.0) / 2.0;
        let mut g = Array1::from_shape_fn(k, |i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * self.sigma * self.sigma)).exp()
        });
        let sum = g.sum();
        g.mapv_inplace(|v| v / sum);
        g
    }
}

/// Separable valid-mode Gaussian filtering along all three axes. The output
/// shrinks by `window - 1` per axis; with a separable kernel this equals the
/// full 3D Gaussian-weighted window sum at every valid position.
fn blur_valid(x: &Array3<f64>, g: &Array1<f64>) -> Array3<f64> {
    let k = g.len();
    let (h, w, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut a = Array3::<f64>::zeros((h - k + 1, w, d));
    for i in 0..h - k + 1 {
        for t in 0..k {
            let gt = g[t];
            let src = x.index_axis(ndarray::Axis(0), i + t);
            let mut dst = a.index_axis_mut(ndarray::Axis(0), i);
            dst.zip_mut_with(&src, |o, &s| *o += gt * s);
        }
    }
    let mut b = Array3::<f64>::zeros((h - k + 1, w - k + 1, d));
    for j in 0..w - k + 1 {
        for t in 0..k {
            let gt = g[t];
            let src = a.index_axis(ndarray::Axis(1), j + t);
            let mut dst = b.index_axis_mut(ndarray::Axis(1), j);
            dst.zip_mut_with(&src, |o, &s| *o += gt * s);
        }
    }
    let mut c = Array3::<f64>::zeros((h - k + 1, w - k + 1, d - k + 1));
    for l in 0..d - k + 1 {
        for t in 0..k {
            let gt = g[t];
            let src = b.index_axis(ndarray::Axis(2), l + t);
            let mut dst = c.index_axis_mut(ndarray::Axis(2), l);
            dst.zip_mut_with(&src, |o, &s| *o += gt * s);
        }
    }
    c
}

/// Mean local SSIM over all valid window positions (no padding).
pub fn ssim3d(pred: &Array3<f32>, reference: &Array3<f32>, cfg: &SsimConfig) -> Result<f64> {
    check_same_dims(pred, reference)?;
    cfg.validate()?;
    let k = cfg.window;
    let (h, w, d) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
    if h < k || w < k || d < k {
        return Err(Error::InvalidArgument(format!(
            "volume {h}x{w}x{d} smaller than SSIM window {k}"
        )));
    }
    let l = resolve_range(reference, cfg.dynamic_range)?;
    let c1 = (cfg.k1 * l).powi(2);
    let c2 = (cfg.k2 * l).powi(2);

    let x = pred.mapv(|v| v as f64);
    let y = reference.mapv(|v| v as f64);
    let g = cfg.kernel();
    let mu_x = blur_valid(&x, &g);
    let mu_y = blur_valid(&y, &g);
    let xx = blur_valid(&(&x * &x), &g);
    let yy = blur_valid(&(&y * &y), &g);
    let xy = blur_valid(&(&x * &y), &g);

    let mut acc = 0.0;
    let n = mu_x.len() as f64;
    for ((((&mx, &my), &sxx), &syy), &sxy) in mu_x
        .iter()
        .zip(mu_y.iter())
        .zip(xx.iter())
        .zip(yy.iter())
        .zip(xy.iter())
    {
        let var_x = sxx - mx * mx;
        let var_y = syy - my * my;
        let cov = sxy - mx * my;
        acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
            / ((mx * mx + my * my + c1) * (var_x + var_y + c2));
    }
    Ok(acc / n)
}

/// Per-voxel ensemble statistics over `K` realizations.
#[derive(Debug, Clone)]
pub struct EnsembleStats {
    pub bias_map: Array3<f64>,
    pub std_map: Array3<f64>,
    pub rmse_map: Array3<f64>,
    pub k: usize,
    /// Aggregates over the mask (full volume when no mask was given).
    pub mean_abs_bias: f64,
    pub mean_std: f64,
    pub mean_rmse: f64,
}

/// Voxel-wise mean bias, Bessel-corrected std of the errors, and
/// `rmse = sqrt(bias^2 + std^2)` over `K >= 2` realizations.
pub fn ensemble_stats(
    realizations: &[&Array3<f32>],
    reference: &Array3<f32>,
    mask: Option<&Array3<bool>>,
) -> Result<EnsembleStats> {
    let k = realizations.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "ensemble statistics need K >= 2 realizations, got {k}"
        )));
    }
    for r in realizations {
        check_same_dims(r, reference)?;
    }
    if let Some(m) = mask {
        if m.shape() != reference.shape() {
            return Err(Error::Shape(format!(
                "mask dims {:?} differ from volume dims {:?}",
                m.shape(),
                reference.shape()
            )));
        }
    }

    let dim = reference.raw_dim();
    let mut bias = Array3::<f64>::zeros(dim.clone());
    for r in realizations {
        for (b, (&x, &y)) in bias.iter_mut().zip(r.iter().zip(reference.iter())) {
            *b += x as f64 - y as f64;
        }
    }
    bias.mapv_inplace(|v| v / k as f64);

    let mut var = Array3::<f64>::zeros(dim.clone());
    for r in realizations {
        for ((v, &m), (&x, &y)) in var
            .iter_mut()
            .zip(bias.iter())
            .zip(r.iter().zip(reference.iter()))
        {
            let e = x as f64 - y as f64;
            let c = e - m;
            *v += c * c;
        }
    }
    var.mapv_inplace(|v| v / (k as f64 - 1.0));
    let std_map = var.mapv(f64::sqrt);
    let rmse_map = ndarray::Zip::from(&bias)
        .and(&std_map)
        .map_collect(|&m, &s| (m * m + s * s).sqrt());

    let select = |map: &Array3<f64>, f: &dyn Fn(f64) -> f64| -> f64 {
        match mask {
            Some(msk) => {
                let mut acc = 0.0;
                let mut n = 0usize;
                for (&v, &keep) in map.iter().zip(msk.iter()) {
                    if keep {
                        acc += f(v);
                        n += 1;
                    }
                }
                if n == 0 {
                    f64::NAN
                } else {
                    acc / n as f64
                }
            }
            None => map.iter().map(|&v| f(v)).sum::<f64>() / map.len() as f64,
        }
    };
    let mean_abs_bias = select(&bias, &f64::abs);
    let mean_std = select(&std_map, &|v| v);
    let mean_rmse = select(&rmse_map, &|v| v);

    Ok(EnsembleStats {
        bias_map: bias,
        std_map,
        rmse_map,
        k,
        mean_abs_bias,
        mean_std,
        mean_rmse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vol(seed: u64, dims: (usize, usize, usize)) -> Array3<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn(dims, |_| rng.random_range(0.0..4.0f32))
    }

    /// Brute-force scalar-loop oracles.
    fn mae_loop(a: &Array3<f32>, b: &Array3<f32>) -> f64 {
        let mut acc = 0.0;
        let mut n = 0usize;
        for (x, y) in a.iter().zip(b.iter()) {
            acc += (*x as f64 - *y as f64).abs();
            n += 1;
        }
        acc / n as f64
    }

    fn mse_loop(a: &Array3<f32>, b: &Array3<f32>) -> f64 {
        let mut acc = 0.0;
        let mut n = 0usize;
        for (x, y) in a.iter().zip(b.iter()) {
            let d = *x as f64 - *y as f64;
            acc += d * d;
            n += 1;
        }
        acc / n as f64
    }

    /// Triple-loop sliding-window SSIM with the full (non-separated) 3D
    /// Gaussian kernel.
    fn ssim_loop(pred: &Array3<f32>, refv: &Array3<f32>, cfg: &SsimConfig, l: f64) -> f64 {
        let k = cfg.window;
        let g1 = cfg.kernel();
        let mut w3 = vec![0.0; k * k * k];
        for a in 0..k {
            for b in 0..k {
                for c in 0..k {
                    w3[(a * k + b) * k + c] = g1[a] * g1[b] * g1[c];
                }
            }
        }
        let c1 = (cfg.k1 * l).powi(2);
        let c2 = (cfg.k2 * l).powi(2);
        let (h, w, d) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
        let mut acc = 0.0;
        let mut n = 0usize;
        for oy in 0..h - k + 1 {
            for ox in 0..w - k + 1 {
                for oz in 0..d - k + 1 {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for a in 0..k {
                        for b in 0..k {
                            for c in 0..k {
                                let wt = w3[(a * k + b) * k + c];
                                let x = pred[[oy + a, ox + b, oz + c]] as f64;
                                let y = refv[[oy + a, ox + b, oz + c]] as f64;
                                mx += wt * x;
                                my += wt * y;
                                sxx += wt * x * x;
                                syy += wt * y * y;
                                sxy += wt * x * y;
                            }
                        }
                    }
                    let vx = sxx - mx * mx;
                    let vy = syy - my * my;
                    let cov = sxy - mx * my;
                    acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    n += 1;
                }
            }
        }
        acc / n as f64
    }

    #[test]
    fn mae_mse_match_loop_oracles() {
        let a = random_vol(1, (8, 8, 8));
        let b = random_vol(2, (8, 8, 8));
        assert!((mae(&a, &b).unwrap() - mae_loop(&a, &b)).abs() < 1e-12);
        assert!((mse(&a, &b).unwrap() - mse_loop(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn mae_mse_trivial_cases() {
        let a = random_vol(3, (6, 6, 6));
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        let b = a.mapv(|v| v + 1.0);
        assert!((mae(&a, &b).unwrap() - 1.0).abs() < 1e-6);
        assert!((mse(&a, &b).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn psnr_closed_form_and_composition() {
        // L = 1, MSE = 0.01 -> exactly 20 dB
        let z = Array3::<f32>::zeros((5, 5, 5));
        let p = z.mapv(|_| 0.1f32);
        let v = psnr(&p, &z, Some(1.0)).unwrap();
        assert!((v - 20.0).abs() < 1e-6);
        // composition against mse()
        let a = random_vol(4, (8, 8, 8));
        let b = random_vol(5, (8, 8, 8));
        let l = b.iter().copied().fold(f32::MIN, f32::max) as f64;
        let expect = 10.0 * (l * l / mse(&a, &b).unwrap()).log10();
        assert!((psnr(&a, &b, None).unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn psnr_edge_cases() {
        let a = random_vol(6, (6, 6, 6));
        assert_eq!(psnr(&a, &a, None).unwrap(), f64::INFINITY);
        let z = Array3::<f32>::zeros((6, 6, 6));
        assert!(matches!(
            psnr(&a, &z, None),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn ssim_identity_is_one() {
        let a = random_vol(7, (8, 8, 8));
        let s = ssim3d(&a, &a, &SsimConfig::default()).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "ssim(a,a) = {s}");
    }

    #[test]
    fn ssim_matches_triple_loop_oracle() {
        let a = random_vol(8, (8, 8, 8));
        let b = random_vol(9, (8, 8, 8));
        let cfg = SsimConfig {
            dynamic_range: Some(4.0),
            ..Default::default()
        };
        let fast = ssim3d(&a, &b, &cfg).unwrap();
        let slow = ssim_loop(&a, &b, &cfg, 4.0);
        assert!((fast - slow).abs() < 1e-8, "{fast} vs {slow}");
    }

    #[test]
    fn ssim_constant_fields_closed_form() {
        let c = 1.5f32;
        let dlt = 0.4f32;
        let refv = Array3::from_elem((7, 7, 7), c);
        let pred = Array3::from_elem((7, 7, 7), c + dlt);
        let l = 4.0;
        let cfg = SsimConfig {
            dynamic_range: Some(l),
            ..Default::default()
        };
        let c1 = (cfg.k1 * l).powi(2);
        let cf = refv[[0, 0, 0]] as f64;
        let pf = pred[[0, 0, 0]] as f64;
        // variance terms vanish; contrast factor is C2/C2 = 1
        let expect = (2.0 * cf * pf + c1) / (cf * cf + pf * pf + c1);
        let got = ssim3d(&pred, &refv, &cfg).unwrap();
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn ssim_symmetry_with_fixed_range() {
        let a = random_vol(10, (8, 8, 8));
        let b = random_vol(11, (8, 8, 8));
        let cfg = SsimConfig {
            dynamic_range: Some(4.0),
            ..Default::default()
        };
        let ab = ssim3d(&a, &b, &cfg).unwrap();
        let ba = ssim3d(&b, &a, &cfg).unwrap();
        assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn ssim_window_larger_than_volume_rejected() {
        let a = random_vol(12, (4, 8, 8));
        assert!(matches!(
            ssim3d(&a, &a, &SsimConfig::default()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn ensemble_hand_cases() {
        // single voxel, y = 2, x = {1, 3}: m = 0, sigma = sqrt(2), rmse = sqrt(2)
        let y = Array3::from_elem((1, 1, 1), 2.0f32);
        let x1 = Array3::from_elem((1, 1, 1), 1.0f32);
        let x2 = Array3::from_elem((1, 1, 1), 3.0f32);
        let st = ensemble_stats(&[&x1, &x2], &y, None).unwrap();
        assert!(st.bias_map[[0, 0, 0]].abs() < 1e-12);
        assert!((st.std_map[[0, 0, 0]] - 2.0f64.sqrt()).abs() < 1e-12);
        assert!((st.rmse_map[[0, 0, 0]] - 2.0f64.sqrt()).abs() < 1e-12);

        // y = 0, x = {1, 1, 1}: m = 1, sigma = 0, rmse = 1
        let y = Array3::from_elem((1, 1, 1), 0.0f32);
        let x = Array3::from_elem((1, 1, 1), 1.0f32);
        let st = ensemble_stats(&[&x, &x, &x], &y, None).unwrap();
        assert_eq!(st.bias_map[[0, 0, 0]], 1.0);
        assert_eq!(st.std_map[[0, 0, 0]], 0.0);
        assert_eq!(st.rmse_map[[0, 0, 0]], 1.0);
    }

    #[test]
    fn ensemble_perfect_denoiser_is_all_zero() {
        let y = random_vol(13, (6, 6, 6));
        let st = ensemble_stats(&[&y, &y, &y], &y, None).unwrap();
        assert!(st.bias_map.iter().all(|&v| v == 0.0));
        assert!(st.std_map.iter().all(|&v| v == 0.0));
        assert!(st.rmse_map.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rmse_identity_holds_everywhere() {
        let y = random_vol(14, (6, 6, 6));
        let xs: Vec<Array3<f32>> = (0..5).map(|i| random_vol(20 + i, (6, 6, 6))).collect();
        let refs: Vec<&Array3<f32>> = xs.iter().collect();
        let st = ensemble_stats(&refs, &y, None).unwrap();
        for ((&m, &s), &r) in st
            .bias_map
            .iter()
            .zip(st.std_map.iter())
            .zip(st.rmse_map.iter())
        {
            assert!((r * r - (m * m + s * s)).abs() < 1e-9);
        }
    }

    #[test]
    fn ensemble_std_shift_invariance() {
        let y = random_vol(15, (5, 5, 5));
        let xs: Vec<Array3<f32>> = (0..4).map(|i| random_vol(30 + i, (5, 5, 5))).collect();
        let refs: Vec<&Array3<f32>> = xs.iter().collect();
        let st1 = ensemble_stats(&refs, &y, None).unwrap();
        let y2 = y.mapv(|v| v + 3.0);
        let xs2: Vec<Array3<f32>> = xs.iter().map(|x| x.mapv(|v| v + 3.0)).collect();
        let refs2: Vec<&Array3<f32>> = xs2.iter().collect();
        let st2 = ensemble_stats(&refs2, &y2, None).unwrap();
        for (&a, &b) in st1.std_map.iter().zip(st2.std_map.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn ensemble_needs_two_realizations() {
        let y = random_vol(16, (4, 4, 4));
        assert!(matches!(
            ensemble_stats(&[&y], &y, None),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn masked_aggregates_ignore_outside() {
        let y = Array3::<f32>::zeros((2, 1, 1));
        let mut x = y.clone();
        x[[0, 0, 0]] = 1.0; // bias only inside the mask voxel
        let x2 = x.clone();
        let mut mask = Array3::from_elem((2, 1, 1), false);
        mask[[0, 0, 0]] = true;
        let st = ensemble_stats(&[&x, &x2], &y, Some(&mask)).unwrap();
        assert_eq!(st.mean_abs_bias, 1.0);
        let full = ensemble_stats(&[&x, &x2], &y, None).unwrap();
        assert_eq!(full.mean_abs_bias, 0.5);
    }
}
