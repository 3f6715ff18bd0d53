//! Partially coherent illumination from dynamic random phase screens.
//!
//! Each realization multiplies the coherent source by `exp(i phi_k)` with
//! `phi_k` a Gaussian random field of RMS `sigma_phi` and correlation length
//! `ell_phi = sigma_phi * l_c`, pushes it through the scene and records
//! `|u|^2`. For `sigma_phi >= 2 pi` the transmitted field has
//! `<t(r1) t*(r2)> = exp(-sigma_phi^2 (1 - exp(-dr^2 / ell_phi^2)))`, which is
//! `exp(-dr^2 / l_c^2)` to leading order. Detector intensities are averaged
//! over the ensemble.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{ComplexField, GridSpec, IntensityImage};
use crate::scene::{PreparedScene, SceneConfig};
use crate::screen::{gaussian_phase_map, realization_seed, PhaseMap};

pub const DEFAULT_SIGMA_PHI: f64 = 2.0 * PI;
pub const DEFAULT_REALIZATIONS: usize = 100;
/// Relative change between the half-ensemble and full-ensemble mean below
/// which an ensemble is flagged converged.
pub const CONVERGENCE_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseScreenSpec {
    pub grid: GridSpec,
    l_c: f64,
    sigma_phi: f64,
    pub seed: u64,
}

impl PhaseScreenSpec {
    /// `sigma_phi` must be 0 (no screen) or at least `2 pi`.
    pub fn new(grid: GridSpec, l_c: f64, sigma_phi: f64, seed: u64) -> Result<Self> {
        if !(l_c > 0.0 && l_c.is_finite()) {
            return Err(Error::config(format!("coherence length {l_c} must be > 0")));
        }
        if !(sigma_phi == 0.0 || (sigma_phi >= DEFAULT_SIGMA_PHI && sigma_phi.is_finite())) {
            return Err(Error::config(format!(
                "sigma_phi {sigma_phi} must be 0 or >= 2 pi"
            )));
        }
        Ok(Self {
            grid,
            l_c,
            sigma_phi,
            seed,
        })
    }

    pub fn with_default_sigma(grid: GridSpec, l_c: f64, seed: u64) -> Result<Self> {
        Self::new(grid, l_c, DEFAULT_SIGMA_PHI, seed)
    }

    pub fn l_c(&self) -> f64 {
        self.l_c
    }

    pub fn sigma_phi(&self) -> f64 {
        self.sigma_phi
    }

    /// Phase correlation length `sigma_phi * l_c`.
    pub fn ell_phi(&self) -> f64 {
        self.sigma_phi * self.l_c
    }

    /// Field correlation implied by the screen statistics at separation `dr`.
    pub fn field_correlation(&self, dr: f64) -> f64 {
        let s2 = self.sigma_phi * self.sigma_phi;
        if s2 == 0.0 {
            return 1.0;
        }
        let rho = (-(dr * dr) / (self.ell_phi() * self.ell_phi())).exp();
        (-s2 * (1.0 - rho)).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleSpec {
    pub screen: PhaseScreenSpec,
    realizations: usize,
}

impl EnsembleSpec {
    pub fn new(screen: PhaseScreenSpec, realizations: usize) -> Result<Self> {
        if realizations == 0 {
            return Err(Error::config("ensemble needs at least one realization"));
        }
        Ok(Self {
            screen,
            realizations,
        })
    }

    pub fn realizations(&self) -> usize {
        self.realizations
    }

    pub fn base_seed(&self) -> u64 {
        self.screen.seed
    }
}

/// Phase map of realization `k`; bit-identical for equal `(spec, k)`.
pub fn sample_phase_screen(spec: &PhaseScreenSpec, k: usize) -> PhaseMap {
    gaussian_phase_map(
        &spec.grid,
        spec.ell_phi(),
        spec.sigma_phi,
        realization_seed(spec.seed, k as u64),
    )
}

pub fn apply_screen(field: &ComplexField, phase: &PhaseMap) -> Result<ComplexField> {
    field.phase_modulated(&phase.values)
}

/// Mean detector intensity over the ensemble.
pub fn ensemble_intensity(
    source: &ComplexField,
    ensemble: &EnsembleSpec,
    scene: &SceneConfig,
) -> Result<IntensityImage> {
    let prepared = scene.prepare()?;
    ensemble_intensity_prepared(source, ensemble, &prepared)
}

/// [`ensemble_intensity`] with the scene compiled once by the caller.
pub fn ensemble_intensity_prepared(
    source: &ComplexField,
    ensemble: &EnsembleSpec,
    scene: &PreparedScene,
) -> Result<IntensityImage> {
    source.ensure_same_grid(scene.grid())?;
    if &ensemble.screen.grid != scene.grid() {
        return Err(Error::contract("phase screen grid differs from the scene grid"));
    }

    let m = ensemble.realizations;
    let (prefixed, start) = scene.apply_static_prefix(source)?;
    let realization = |k: usize| -> Result<Vec<f64>> {
        let lit = if ensemble.screen.sigma_phi == 0.0 {
            prefixed.clone()
        } else {
            apply_screen(&prefixed, &sample_phase_screen(&ensemble.screen, k))?
        };
        let out = scene.run_from(lit, start, k)?;
        if !out.is_finite() {
            return Err(Error::Numerical {
                realization: k,
                message: "non-finite detector field".into(),
            });
        }
        Ok(out.samples().iter().map(|s| s.norm_sqr()).collect())
    };

    let (sum, converged) = if m == 1 {
        (realization(0)?, None)
    } else {
        let mid = m / 2;
        let (left, right) = rayon::join(
            || pairwise_sum(0, mid, &realization),
            || pairwise_sum(mid, m, &realization),
        );
        let left = left?;
        let mut total = left.clone();
        add_assign(&mut total, &right?);
        let (mut num, mut den) = (0.0, 0.0);
        for (t, l) in total.iter().zip(&left) {
            let full = t / m as f64;
            num += (full - l / mid as f64).powi(2);
            den += full * full;
        }
        let change = if den > 0.0 { (num / den).sqrt() } else { 0.0 };
        (total, Some(change < CONVERGENCE_TOLERANCE))
    };

    let inv = 1.0 / m as f64;
    let mean: Vec<f64> = sum.into_iter().map(|v| v * inv).collect();
    let mut img = IntensityImage::new(*scene.grid(), mean)?;
    img.metadata.l_c = Some(ensemble.screen.l_c);
    img.metadata.realizations = Some(m);
    img.metadata.seed = Some(ensemble.base_seed());
    img.metadata.converged = converged;
    Ok(img)
}

/// Fixed-tree pairwise sum over realizations `lo..hi`; the tree depends
/// only on the index range, so the result is independent of scheduling.
fn pairwise_sum<F>(lo: usize, hi: usize, leaf: &F) -> Result<Vec<f64>>
where
    F: Fn(usize) -> Result<Vec<f64>> + Sync,
{
    if hi - lo == 1 {
        return leaf(lo);
    }
    let mid = lo + (hi - lo) / 2;
    let (a, b) = rayon::join(|| pairwise_sum(lo, mid, leaf), || pairwise_sum(mid, hi, leaf));
    let mut a = a?;
    add_assign(&mut a, &b?);
    Ok(a)
}

fn add_assign(acc: &mut [f64], other: &[f64]) {
    acc.par_iter_mut()
        .with_min_len(1 << 14)
        .zip(other.par_iter().with_min_len(1 << 14))
        .for_each(|(a, b)| *a += b);
}

/// Fully coherent reference: one pass through the scene, no screen.
pub fn coherent_limit_intensity(source: &ComplexField, scene: &SceneConfig) -> Result<IntensityImage> {
    let out = scene.prepare()?.run(source, 0)?;
    let mut img = IntensityImage::new(scene.grid, out.samples().iter().map(|s| s.norm_sqr()).collect())?;
    img.metadata.realizations = Some(1);
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::DEFAULT_WAVELENGTH;
    use crate::scene::{direct_scene, SlmObject, Stage};

    fn grid() -> GridSpec {
        GridSpec::with_extent(64, 2e-3).unwrap()
    }

    #[test]
    fn spec_validation() {
        let g = grid();
        assert!(PhaseScreenSpec::new(g, 0.0, DEFAULT_SIGMA_PHI, 0).is_err());
        assert!(PhaseScreenSpec::new(g, 1e-3, 1.0, 0).is_err());
        assert!(PhaseScreenSpec::new(g, 1e-3, 0.0, 0).is_ok());
        let s = PhaseScreenSpec::with_default_sigma(g, 1e-3, 0).unwrap();
        assert_eq!(s.ell_phi(), DEFAULT_SIGMA_PHI * 1e-3);
        assert!(EnsembleSpec::new(s, 0).is_err());
    }

    #[test]
    fn screen_identity_and_negation() {
        let g = grid();
        let u = ComplexField::from_fn(g, DEFAULT_WAVELENGTH, |x, y| {
            num_complex::Complex64::new(x * 1e3, 1.0 - y * 1e3)
        })
        .unwrap();
        let zero = PhaseMap {
            values: vec![0.0; g.len()],
            under_resolved: false,
            nearly_constant: false,
        };
        assert_eq!(apply_screen(&u, &zero).unwrap(), u);
        let pi = PhaseMap {
            values: vec![PI; g.len()],
            ..zero.clone()
        };
        let neg = apply_screen(&u, &pi).unwrap();
        for (a, b) in neg.samples().iter().zip(u.samples()) {
            assert!((a + b).norm() < 1e-15);
        }
        let spec = PhaseScreenSpec::with_default_sigma(g, 1e-4, 5).unwrap();
        let random = apply_screen(&u, &sample_phase_screen(&spec, 3)).unwrap();
        assert!((random.total_power() - u.total_power()).abs() <= 1e-12 * u.total_power());
    }

    #[test]
    fn screen_is_reproducible() {
        let spec = PhaseScreenSpec::with_default_sigma(grid(), 2e-4, 11).unwrap();
        assert_eq!(sample_phase_screen(&spec, 4), sample_phase_screen(&spec, 4));
        assert_ne!(sample_phase_screen(&spec, 4).values, sample_phase_screen(&spec, 5).values);
    }

    #[test]
    fn degenerate_ensemble_matches_coherent() {
        let g = grid();
        let u = ComplexField::new_plane_wave(g, DEFAULT_WAVELENGTH, 1.0).unwrap();
        let mut px = vec![0u8; 784];
        px[400] = 255;
        let scene = direct_scene(g, SlmObject::new(px).unwrap(), 0.05);
        let screen = PhaseScreenSpec::new(g, 1e-3, 0.0, 1).unwrap();
        let ens = EnsembleSpec::new(screen, 1).unwrap();
        let a = ensemble_intensity(&u, &ens, &scene).unwrap();
        let b = coherent_limit_intensity(&u, &scene).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn empty_scene_plane_wave_is_uniform() {
        let g = grid();
        let u = ComplexField::new_plane_wave(g, DEFAULT_WAVELENGTH, 1.0).unwrap();
        let scene = SceneConfig::new(g, DEFAULT_WAVELENGTH, vec![Stage::Detector]);
        let img = coherent_limit_intensity(&u, &scene).unwrap();
        assert!(img.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ensemble_metadata_and_positivity() {
        let g = grid();
        let u = ComplexField::new_plane_wave(g, DEFAULT_WAVELENGTH, 1.0).unwrap();
        let scene = direct_scene(g, SlmObject::blank(), 0.1);
        let ens = EnsembleSpec::new(PhaseScreenSpec::with_default_sigma(g, 1e-4, 3).unwrap(), 6).unwrap();
        let img = ensemble_intensity(&u, &ens, &scene).unwrap();
        assert!(img.values().iter().all(|&v| v >= 0.0));
        assert_eq!(img.metadata.l_c, Some(1e-4));
        assert_eq!(img.metadata.realizations, Some(6));
        assert_eq!(img.metadata.seed, Some(3));
        assert!(img.metadata.converged.is_some());
    }

    #[test]
    fn implied_field_correlation() {
        let s = PhaseScreenSpec::with_default_sigma(grid(), 1e-3, 0).unwrap();
        assert_eq!(s.field_correlation(0.0), 1.0);
        for k in 1..=20 {
            let dr = k as f64 * 1e-4;
            let target = (-(dr * dr) / 1e-6).exp();
            assert!((s.field_correlation(dr) - target).abs() < 0.01);
        }
    }
}
