//! Sampled complex optical fields on square, centered grids.
//!
//! Sample `(row, col)` lives at physical position
//! `x = (col - n/2) * pitch`, `y = (row - n/2) * pitch`, stored row-major
//! with x varying fastest.

use std::io::{Read, Write};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default illumination wavelength, meters.
pub const DEFAULT_WAVELENGTH: f64 = 635e-9;
/// Default imaging grid side, pixels.
pub const DEFAULT_N: usize = 512;
/// Default imaging grid extent, meters.
pub const DEFAULT_EXTENT: f64 = 6e-3;

const FIELD_MAGIC: &[u8; 4] = b"CFLD";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    n: usize,
    pitch: f64,
}

impl GridSpec {
    pub fn new(n: usize, pitch: f64) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::config(format!(
                "grid side {n} is not a positive power of two"
            )));
        }
        if !(pitch > 0.0 && pitch.is_finite()) {
            return Err(Error::config(format!("grid pitch {pitch} must be > 0")));
        }
        Ok(Self { n, pitch })
    }

    pub fn with_extent(n: usize, extent: f64) -> Result<Self> {
        Self::new(n, extent / n as f64)
    }

    /// 512 x 512 over 6 mm.
    pub fn imaging() -> Self {
        Self {
            n: DEFAULT_N,
            pitch: DEFAULT_EXTENT / DEFAULT_N as f64,
        }
    }

    /// 2048 x 2048 over 12 mm, wide enough for the double-pinhole mask.
    pub fn metrology() -> Self {
        Self {
            n: 2048,
            pitch: 12e-3 / 2048.0,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn extent(&self) -> f64 {
        self.n as f64 * self.pitch
    }

    pub fn len(&self) -> usize {
        self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Physical coordinate of pixel index `idx` along either axis.
    pub fn coord(&self, idx: usize) -> f64 {
        (idx as f64 - (self.n / 2) as f64) * self.pitch
    }

    pub fn coords(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.coord(i)).collect()
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::imaging()
    }
}

pub(crate) fn check_wavelength(wavelength: f64) -> Result<()> {
    if wavelength > 0.0 && wavelength.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("wavelength {wavelength} must be > 0")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    grid: GridSpec,
    wavelength: f64,
    samples: Vec<Complex64>,
}

impl ComplexField {
    /// Uniform field `amplitude + 0i`.
    pub fn new_plane_wave(grid: GridSpec, wavelength: f64, amplitude: f64) -> Result<Self> {
        check_wavelength(wavelength)?;
        if !(amplitude >= 0.0 && amplitude.is_finite()) {
            return Err(Error::config(format!("amplitude {amplitude} must be >= 0")));
        }
        Ok(Self {
            grid,
            wavelength,
            samples: vec![Complex64::new(amplitude, 0.0); grid.len()],
        })
    }

    pub fn from_samples(grid: GridSpec, wavelength: f64, samples: Vec<Complex64>) -> Result<Self> {
        check_wavelength(wavelength)?;
        if samples.len() != grid.len() {
            return Err(Error::contract(format!(
                "expected {} samples for a {}x{} grid, got {}",
                grid.len(),
                grid.n(),
                grid.n(),
                samples.len()
            )));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::data(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            grid,
            wavelength,
            samples,
        })
    }

    /// Build from a function of physical coordinates `(x, y)`.
    pub fn from_fn(
        grid: GridSpec,
        wavelength: f64,
        mut f: impl FnMut(f64, f64) -> Complex64,
    ) -> Result<Self> {
        let coords = grid.coords();
        let mut samples = Vec::with_capacity(grid.len());
        for &y in &coords {
            for &x in &coords {
                samples.push(f(x, y));
            }
        }
        Self::from_samples(grid, wavelength, samples)
    }

    pub(crate) fn from_parts_unchecked(
        grid: GridSpec,
        wavelength: f64,
        samples: Vec<Complex64>,
    ) -> Self {
        debug_assert_eq!(samples.len(), grid.len());
        Self {
            grid,
            wavelength,
            samples,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn wavelength(&self) -> f64 {
        self.wavelength
    }

    pub fn samples(&self) -> &[Complex64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Complex64> {
        self.samples
    }

    pub fn at(&self, row: usize, col: usize) -> Complex64 {
        self.samples[row * self.grid.n() + col]
    }

    /// `sum |u|^2 * pitch^2`.
    pub fn total_power(&self) -> f64 {
        let p2 = self.grid.pitch() * self.grid.pitch();
        self.samples.iter().map(|s| s.norm_sqr()).sum::<f64>() * p2
    }

    pub fn is_finite(&self) -> bool {
        self.samples.iter().all(|s| s.is_finite())
    }

    pub fn ensure_same_grid(&self, grid: &GridSpec) -> Result<()> {
        if &self.grid != grid {
            return Err(Error::contract(format!(
                "grid mismatch: field {:?} vs {:?}",
                self.grid, grid
            )));
        }
        Ok(())
    }

    /// Pointwise product with a real-valued map on the same grid.
    pub fn scaled_by(&self, factors: &[f64]) -> Result<Self> {
        if factors.len() != self.samples.len() {
            return Err(Error::contract("multiplier map has the wrong size"));
        }
        let samples = self
            .samples
            .iter()
            .zip(factors)
            .map(|(s, f)| s * f)
            .collect();
        Ok(Self::from_parts_unchecked(self.grid, self.wavelength, samples))
    }

    /// `self * exp(i * phase)` pointwise.
    pub fn phase_modulated(&self, phase: &[f64]) -> Result<Self> {
        if phase.len() != self.samples.len() {
            return Err(Error::contract("phase map has the wrong size"));
        }
        let samples = self
            .samples
            .iter()
            .zip(phase)
            .map(|(s, &p)| {
                if *s == Complex64::default() {
                    *s
                } else {
                    s * Complex64::from_polar(1.0, p)
                }
            })
            .collect();
        Ok(Self::from_parts_unchecked(self.grid, self.wavelength, samples))
    }

    pub fn to_intensity(&self) -> IntensityImage {
        IntensityImage::new(
            self.grid,
            self.samples.iter().map(|s| s.norm_sqr()).collect(),
        )
        .expect("|u|^2 is nonnegative")
    }

    /// Little-endian `CFLD` dump: magic, u32 n, f64 pitch, f64 wavelength,
    /// then `n^2` (re, im) f64 pairs.
    pub fn write_dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(FIELD_MAGIC)?;
        w.write_all(&(self.grid.n() as u32).to_le_bytes())?;
        w.write_all(&self.grid.pitch().to_le_bytes())?;
        w.write_all(&self.wavelength.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.samples.len() * 16);
        for s in &self.samples {
            buf.extend_from_slice(&s.re.to_le_bytes());
            buf.extend_from_slice(&s.im.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_dump<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::data(format!("reading field dump: {e}")))?;
        if bytes.len() < 24 || &bytes[..4] != FIELD_MAGIC {
            return Err(Error::Parse {
                offset: 0,
                message: "missing CFLD header".into(),
            });
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let pitch = f64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let wavelength = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let grid = GridSpec::new(n, pitch)?;
        let expected = 24 + grid.len() * 16;
        if bytes.len() != expected {
            return Err(Error::Parse {
                offset: bytes.len().min(expected),
                message: format!("expected {expected} bytes, found {}", bytes.len()),
            });
        }
        let samples = bytes[24..]
            .chunks_exact(16)
            .map(|c| {
                Complex64::new(
                    f64::from_le_bytes(c[..8].try_into().unwrap()),
                    f64::from_le_bytes(c[8..].try_into().unwrap()),
                )
            })
            .collect();
        Self::from_samples(grid, wavelength, samples)
    }
}

/// Per-image provenance carried alongside detector intensities.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageMetadata {
    pub l_c: Option<f64>,
    pub depth: Option<f64>,
    pub object_id: Option<u64>,
    pub seed: Option<u64>,
    pub realizations: Option<usize>,
    pub converged: Option<bool>,
    /// Set when the image was all zeros and the exposure scale fell back to 1.
    pub zero_field: bool,
}

/// Detector intensity. `values` are raw `|u|^2` sums and are never
/// normalized; `exposure_scale` only drives 8-bit previews and quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityImage {
    grid: GridSpec,
    values: Vec<f64>,
    pub exposure_scale: f64,
    pub metadata: ImageMetadata,
}

impl IntensityImage {
    /// Wraps raw values; exposure scale defaults to `255 / max`.
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::contract("intensity values do not match the grid"));
        }
        if let Some(i) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::data(format!(
                "intensity at index {i} is negative or non-finite"
            )));
        }
        let max = values.iter().cloned().fold(0.0, f64::max);
        let mut metadata = ImageMetadata::default();
        let exposure_scale = if max > 0.0 {
            255.0 / max
        } else {
            metadata.zero_field = true;
            1.0
        };
        Ok(Self {
            grid,
            values,
            exposure_scale,
            metadata,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid.n() + col]
    }

    pub fn set_exposure_scale(&mut self, scale: f64) -> Result<()> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::config(format!("exposure scale {scale} must be > 0")));
        }
        self.exposure_scale = scale;
        Ok(())
    }

    /// `clamp(round(v * exposure_scale), 0, 255)` per pixel.
    pub fn quantize(&self) -> Vec<u8> {
        quantize_values(&self.values, self.exposure_scale)
    }
}

pub fn quantize_values(values: &[f64], scale: f64) -> Vec<u8> {
    values
        .iter()
        .map(|v| (v * scale).round().clamp(0.0, 255.0) as u8)
        .collect()
}
