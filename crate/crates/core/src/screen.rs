//! Gaussian-correlated random phase maps by spectral synthesis.
//!
//! White complex Gaussian noise is filtered with the square root of the
//! Gaussian power spectrum `exp(-pi^2 l^2 f^2)`, transformed back, and the
//! real part is renormalized to zero mean and the requested RMS exactly.
//! The resulting field has autocorrelation coefficient `exp(-r^2 / l^2)`.
//!
//! The periodic synthesis domain must span several correlation lengths or
//! the long-range structure is lost and the renormalization inflates the
//! short-range gradients. When the target grid is too small for that, or
//! samples the correlation length much more finely than needed, the map is
//! synthesized on a coarser, larger grid and bilinearly resampled.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::fft::{freq_index, Fft2};
use crate::field::GridSpec;

/// Synthesis domain must be at least this many correlation lengths wide.
const DOMAIN_CORRELATION_LENGTHS: f64 = 16.0;
/// Coarse synthesis grids sample one correlation length this finely.
const SAMPLES_PER_CORRELATION_LENGTH: f64 = 16.0;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of realization `k` under `base`; independent of evaluation order.
pub fn realization_seed(base: u64, k: u64) -> u64 {
    splitmix64(base ^ splitmix64(k.wrapping_add(0x5EED)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseMap {
    pub values: Vec<f64>,
    /// Correlation length below two pixels.
    pub under_resolved: bool,
    /// Correlation length above half the grid extent (near-coherent regime).
    pub nearly_constant: bool,
}

/// Samples one zero-mean Gaussian phase map on `grid` with autocorrelation
/// coefficient `exp(-r^2 / corr_len^2)` and standard deviation `rms`.
pub fn gaussian_phase_map(grid: &GridSpec, corr_len: f64, rms: f64, seed: u64) -> PhaseMap {
    let under_resolved = corr_len < 2.0 * grid.pitch();
    let nearly_constant = corr_len > grid.extent() / 2.0;
    let n = grid.n();
    if rms == 0.0 {
        return PhaseMap {
            values: vec![0.0; n * n],
            under_resolved,
            nearly_constant,
        };
    }

    let direct = grid.extent() >= DOMAIN_CORRELATION_LENGTHS * corr_len
        && corr_len <= SAMPLES_PER_CORRELATION_LENGTH * grid.pitch();
    let (n_gen, h) = if direct {
        (n, grid.pitch())
    } else {
        let h = grid.pitch().max(corr_len / SAMPLES_PER_CORRELATION_LENGTH);
        let need = (DOMAIN_CORRELATION_LENGTHS * corr_len / h)
            .ceil()
            .max((grid.extent() / h).ceil() + 2.0) as usize;
        (need.next_power_of_two(), h)
    };

    let mut field = synthesize(n_gen, h, corr_len, seed);
    normalize(&mut field, rms);

    let values = if direct {
        field
    } else {
        resample_bilinear(&field, n_gen, h, grid)
    };
    PhaseMap {
        values,
        under_resolved,
        nearly_constant,
    }
}

fn synthesize(n: usize, h: f64, corr_len: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf: Vec<Complex64> = (0..n * n)
        .map(|_| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
        .collect();

    let df = 1.0 / (n as f64 * h);
    let c = PI * PI * corr_len * corr_len / 2.0;
    let filt: Vec<f64> = (0..n)
        .map(|k| {
            let f = freq_index(k, n) * df;
            (-c * f * f).exp()
        })
        .collect();
    for (r, row) in buf.chunks_exact_mut(n).enumerate() {
        for (v, fc) in row.iter_mut().zip(&filt) {
            *v *= filt[r] * fc;
        }
    }
    Fft2::new(n).inverse(&mut buf);
    buf.into_iter().map(|v| v.re).collect()
}

fn normalize(values: &mut [f64], rms: f64) {
    let len = values.len() as f64;
    let mean = values.iter().sum::<f64>() / len;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len;
    let scale = if var > 0.0 { rms / var.sqrt() } else { 0.0 };
    for v in values.iter_mut() {
        *v = (*v - mean) * scale;
    }
}

fn resample_bilinear(src: &[f64], n_src: usize, h: f64, grid: &GridSpec) -> Vec<f64> {
    let half = (n_src / 2) as f64;
    let idx: Vec<(usize, f64)> = grid
        .coords()
        .iter()
        .map(|&x| {
            let p = x / h + half;
            let i0 = p.floor();
            (i0 as usize, p - i0)
        })
        .collect();
    let n = grid.n();
    let mut out = Vec::with_capacity(n * n);
    for &(r0, fy) in &idx {
        let row0 = &src[r0 * n_src..(r0 + 1) * n_src];
        let row1 = &src[(r0 + 1) * n_src..(r0 + 2) * n_src];
        for &(c0, fx) in &idx {
            let top = row0[c0] * (1.0 - fx) + row0[c0 + 1] * fx;
            let bot = row1[c0] * (1.0 - fx) + row1[c0 + 1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}
