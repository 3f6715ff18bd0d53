//! Band-limited angular spectrum propagation.
//!
//! The field is zero-padded to `pad_factor * n`, transformed, multiplied by
//! `H(fx, fy) = exp(i 2 pi z sqrt(1/lambda^2 - fx^2 - fy^2))` and transformed
//! back. Evanescent components are zeroed. With band limiting enabled, every
//! frequency with `|fx|` or `|fy|` above
//! `1 / (lambda * sqrt((2 df z)^2 + 1))`, `df = 1 / (n_pad * pitch)`, is zeroed
//! too, which keeps the sampled transfer-function phase from aliasing at
//! long distances.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::{freq_index, Fft2};
use crate::field::{check_wavelength, ComplexField, GridSpec};

pub const DEFAULT_PAD_FACTOR: usize = 2;

const BLOCK: usize = 16;

thread_local! {
    // Work buffers reused across calls; fresh multi-megabyte allocations
    // per propagation spend most of their time in page faults.
    static SCRATCH: RefCell<[Vec<Complex64>; 3]> = const { RefCell::new([Vec::new(), Vec::new(), Vec::new()]) };
}

fn reset(buf: &mut Vec<Complex64>, len: usize) {
    buf.clear();
    buf.resize(len, Complex64::default());
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanOptions {
    pub pad_factor: usize,
    pub bandlimit: bool,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            pad_factor: DEFAULT_PAD_FACTOR,
            bandlimit: true,
        }
    }
}

/// Cached transfer function for one `(grid, wavelength, z)` geometry.
/// Immutable and cheap to clone; share it across ensemble workers.
#[derive(Debug, Clone)]
pub struct PropagationPlan {
    grid: GridSpec,
    wavelength: f64,
    z: f64,
    options: PlanOptions,
    n_pad: usize,
    // Symmetric in (fx, fy) on square grids, so it serves the transposed
    // spectrum layout directly.
    transfer: Arc<Vec<Complex64>>,
    // Frequency bins with any nonzero transfer sample. Identical along both
    // axes; everything outside is skipped in `propagate`.
    band: Arc<Vec<usize>>,
    fft: Fft2,
}

/// Per-axis frequency cutoff, cycles/m.
pub fn bandlimit_frequency(wavelength: f64, z: f64, df: f64) -> f64 {
    1.0 / (wavelength * ((2.0 * df * z).powi(2) + 1.0).sqrt())
}

pub fn make_plan(grid: GridSpec, wavelength: f64, z: f64, pad_factor: usize) -> Result<PropagationPlan> {
    make_plan_with(
        grid,
        wavelength,
        z,
        PlanOptions {
            pad_factor,
            bandlimit: true,
        },
    )
}

/// z·fz in cycles, reduced mod 1 without losing the rounding error of the
/// product. The raw product reaches ~1e7 cycles at metre distances.
fn cycles(z: f64, fz: f64) -> f64 {
    let p = z * fz;
    let err = z.mul_add(fz, -p);
    (p - p.round()) + err
}

pub fn make_plan_with(
    grid: GridSpec,
    wavelength: f64,
    z: f64,
    options: PlanOptions,
) -> Result<PropagationPlan> {
    check_wavelength(wavelength)?;
    if ![1, 2, 4].contains(&options.pad_factor) {
        return Err(Error::config(format!(
            "pad factor {} not in {{1, 2, 4}}",
            options.pad_factor
        )));
    }
    if !z.is_finite() {
        return Err(Error::config("propagation distance must be finite"));
    }
    let n_pad = grid.n() * options.pad_factor;
    let df = 1.0 / (n_pad as f64 * grid.pitch());
    let inv_l2 = 1.0 / (wavelength * wavelength);
    let f_limit = if options.bandlimit {
        bandlimit_frequency(wavelength, z, df)
    } else {
        f64::INFINITY
    };

    let freqs: Vec<f64> = (0..n_pad).map(|k| freq_index(k, n_pad) * df).collect();
    let mut transfer = vec![Complex64::default(); n_pad * n_pad];
    for (a, &fa) in freqs.iter().enumerate() {
        let row = &mut transfer[a * n_pad..(a + 1) * n_pad];
        for (h, &fb) in row.iter_mut().zip(&freqs) {
            let arg = inv_l2 - fa * fa - fb * fb;
            *h = if arg > 0.0 && fa.abs() <= f_limit && fb.abs() <= f_limit {
                Complex64::from_polar(1.0, 2.0 * PI * cycles(z, arg.sqrt()))
            } else {
                Complex64::default()
            };
        }
    }

    let band = (0..n_pad)
        .filter(|&a| transfer[a * n_pad..(a + 1) * n_pad].iter().any(|h| *h != Complex64::default()))
        .collect();

    Ok(PropagationPlan {
        grid,
        wavelength,
        z,
        options,
        n_pad,
        transfer: Arc::new(transfer),
        band: Arc::new(band),
        fft: Fft2::new(n_pad),
    })
}

impl PropagationPlan {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn wavelength(&self) -> f64 {
        self.wavelength
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn pad_factor(&self) -> usize {
        self.options.pad_factor
    }

    pub fn bandlimited(&self) -> bool {
        self.options.bandlimit
    }

    pub fn padded_size(&self) -> usize {
        self.n_pad
    }

    /// Transfer function sample at signed frequency indices `(kx, ky)`
    /// of the padded grid.
    pub fn transfer_at(&self, kx: i64, ky: i64) -> Complex64 {
        let wrap = |k: i64| k.rem_euclid(self.n_pad as i64) as usize;
        self.transfer[wrap(kx) * self.n_pad + wrap(ky)]
    }

    pub fn transfer(&self) -> &[Complex64] {
        &self.transfer
    }

    pub fn propagate(&self, field: &ComplexField) -> Result<ComplexField> {
        field.ensure_same_grid(&self.grid)?;
        let rel = (field.wavelength() - self.wavelength).abs() / self.wavelength;
        if rel > 1e-12 {
            return Err(Error::contract(format!(
                "wavelength mismatch: field {} vs plan {}",
                field.wavelength(),
                self.wavelength
            )));
        }

        let n = self.grid.n();
        let samples = field.samples();
        let zero = Complex64::default();
        let row_live = |r: &usize| samples[r * n..(r + 1) * n].iter().any(|v| *v != zero);
        let (Some(r0), Some(r1)) = ((0..n).find(row_live), (0..n).rev().find(row_live)) else {
            return Ok(field.clone());
        };
        let live = r1 + 1 - r0;
        let out = SCRATCH.with_borrow_mut(|[rows, spec, out_rows]| {
            self.propagate_banded(samples, r0, live, rows, spec, out_rows)
        });
        Ok(ComplexField::from_parts_unchecked(self.grid, self.wavelength, out))
    }

    /// Input rows `r0..r0 + live` hold all nonzero samples.

    fn propagate_banded(
        &self,
        samples: &[Complex64],
        r0: usize,
        live: usize,
        rows: &mut Vec<Complex64>,
        spec: &mut Vec<Complex64>,
        out_rows: &mut Vec<Complex64>,
    ) -> Vec<Complex64> {
        let n = self.grid.n();
        let np = self.n_pad;
        let off = (np - n) / 2;
        let band = &self.band[..];

        // Row transforms of the live input rows, embedded in the padded width.
        reset(rows, live * np);
        for i in 0..live {
            let src = &samples[(r0 + i) * n..(r0 + i + 1) * n];
            rows[i * np + off..i * np + off + n].copy_from_slice(src);
        }
        self.fft.forward_rows(rows);

        // Column transforms, only for the in-band fx bins.
        reset(spec, band.len() * np);
        for jb in (0..band.len()).step_by(BLOCK) {
            for ib in (0..live).step_by(BLOCK) {
                for (j, &kx) in band.iter().enumerate().skip(jb).take(BLOCK) {
                    let dst = &mut spec[j * np + off + r0..];
                    for i in ib..(ib + BLOCK).min(live) {
                        dst[i] = rows[i * np + kx];
                    }
                }
            }
        }
        self.fft.forward_rows(spec);
        for (j, &kx) in band.iter().enumerate() {
            let h = &self.transfer[kx * np..(kx + 1) * np];
            for (s, h) in spec[j * np..(j + 1) * np].iter_mut().zip(h) {
                *s *= h;
            }
        }
        self.fft.inverse_rows(spec);

        // Back to row order for the output rows, then the row inverses.
        reset(out_rows, n * np);
        for jb in (0..band.len()).step_by(BLOCK) {
            for yb in (0..n).step_by(BLOCK) {
                for (j, &kx) in band.iter().enumerate().skip(jb).take(BLOCK) {
                    let src = &spec[j * np + off..];
                    for y in yb..(yb + BLOCK).min(n) {
                        out_rows[y * np + kx] = src[y];
                    }
                }
            }
        }
        self.fft.inverse_rows(out_rows);

        let scale = 1.0 / (np * np) as f64;
        let mut out = Vec::with_capacity(n * n);
        for y in 0..n {
            out.extend(out_rows[y * np + off..y * np + off + n].iter().map(|v| v * scale));
        }
        out
    }
}

/// One-shot propagation with a freshly built plan.
pub fn propagate(field: &ComplexField, z: f64, options: PlanOptions) -> Result<ComplexField> {
    make_plan_with(*field.grid(), field.wavelength(), z, options)?.propagate(field)
}

/// Propagates by `+z` and back by `-z` on the unpadded periodic grid with
/// band limiting off, where the transfer functions are exact inverses.
pub fn propagate_round_trip(field: &ComplexField, z: f64) -> Result<ComplexField> {
    let opts = PlanOptions {
        pad_factor: 1,
        bandlimit: false,
    };
    let there = propagate(field, z, opts)?;
    propagate(&there, -z, opts)
}
