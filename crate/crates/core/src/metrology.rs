//! Measurements on detector images: two-dimensional entropy, fringe
//! visibility and speckle statistics, plus the CSV tables they feed.

use std::fmt::Write as _;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::Fft2;
use crate::field::IntensityImage;
use crate::scene::Axis;

pub const GRAY_LEVELS: usize = 256;

/// 3x3 neighborhood without the center pixel, borders edge-replicated,
/// mean rounded half-up to the nearest gray level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Neighborhood {
    Moore8EdgeReplicated,
}

#[derive(Debug, Clone)]
pub struct EntropyReport {
    /// Entropy of the (gray, neighborhood mean) joint distribution, bits.
    pub h: f64,
    pub neighborhood: Neighborhood,
    pub levels: usize,
    /// Joint histogram `f(i, j)` at index `i * 256 + j`.
    pub histogram: Vec<u32>,
    pub pixels: usize,
}

impl EntropyReport {
    pub fn count(&self, gray: u8, neighborhood_mean: u8) -> u32 {
        self.histogram[gray as usize * GRAY_LEVELS + neighborhood_mean as usize]
    }
}

/// Two-dimensional image entropy of a row-major 8-bit image.
pub fn entropy_2d(pixels: &[u8], width: usize) -> Result<EntropyReport> {
    if pixels.is_empty() || width == 0 || pixels.len() % width != 0 {
        return Err(Error::data("entropy needs a non-empty rectangular image"));
    }
    let height = pixels.len() / width;
    let mut histogram = vec![0u32; GRAY_LEVELS * GRAY_LEVELS];
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    for r in 0..height {
        for c in 0..width {
            let mut sum = 0u32;
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let rr = clamp(r as isize + dr, height);
                    let cc = clamp(c as isize + dc, width);
                    sum += pixels[rr * width + cc] as u32;
                }
            }
            let j = (sum + 4) / 8;
            let i = pixels[r * width + c] as usize;
            histogram[i * GRAY_LEVELS + j as usize] += 1;
        }
    }
    let total = pixels.len() as f64;
    let h = -histogram
        .iter()
        .filter(|&&f| f > 0)
        .map(|&f| {
            let p = f as f64 / total;
            p * p.log2()
        })
        .sum::<f64>();
    Ok(EntropyReport {
        h: h.max(0.0),
        neighborhood: Neighborhood::Moore8EdgeReplicated,
        levels: GRAY_LEVELS,
        histogram,
        pixels: pixels.len(),
    })
}

/// Entropy of an intensity image quantized with `exposure_scale`.
pub fn image_entropy(image: &IntensityImage, exposure_scale: f64) -> Result<f64> {
    let q = crate::field::quantize_values(image.values(), exposure_scale);
    Ok(entropy_2d(&q, image.grid().n())?.h)
}

pub fn mean_and_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::data("no values to average"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Analysis window for a fringe pattern.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FringeWindow {
    pub center_row: usize,
    pub center_col: usize,
    /// Half-length along the fringe modulation axis, pixels.
    pub half_length: usize,
    /// Half-width across the fringes, pixels; the profile averages over it.
    pub half_width: usize,
    /// Direction along which intensity oscillates.
    pub axis: Axis,
    /// Expected fringe period in pixels (`lambda z / d / pitch`).
    pub period_px: f64,
}

impl FringeWindow {
    /// Window centered on the optical axis of an `n x n` image, spanning
    /// `periods` fringe periods.
    pub fn centered(n: usize, axis: Axis, period_px: f64, periods: f64, half_width: usize) -> Self {
        Self {
            center_row: n / 2,
            center_col: n / 2,
            half_length: (period_px * periods / 2.0).ceil() as usize,
            half_width,
            axis,
            period_px,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisibilityReport {
    pub v: f64,
    pub i_max: f64,
    pub i_min: f64,
    pub window: FringeWindow,
}

/// Fringe visibility from the fitted envelope of the window profile.
///
/// The transversely averaged profile is fit by least squares with a
/// quadratic background plus a sinusoid of the known period whose
/// quadrature amplitudes are quadratic along the window too. Behind
/// pinholes both terms follow the same diffraction envelope, and giving the
/// amplitude a lower order than the background biases V low. `I_max` and
/// `I_min` are background plus/minus fringe amplitude at the window center.
pub fn fringe_visibility(image: &IntensityImage, window: &FringeWindow) -> Result<VisibilityReport> {
    let n = image.grid().n();
    let w = window;
    if w.period_px <= 0.0 || !w.period_px.is_finite() {
        return Err(Error::config("fringe period must be positive"));
    }
    if ((2 * w.half_length + 1) as f64) < 3.0 * w.period_px {
        return Err(Error::config("fringe window shorter than three periods"));
    }
    let fits = |c: usize, h: usize| c >= h && c + h < n;
    if !fits(w.center_row, w.half_length.max(w.half_width)) || !fits(w.center_col, w.half_length.max(w.half_width)) {
        return Err(Error::config("fringe window extends past the image"));
    }

    let len = 2 * w.half_length + 1;
    let mut profile = vec![0.0; len];
    for (k, p) in profile.iter_mut().enumerate() {
        let along = k as isize - w.half_length as isize;
        let mut acc = 0.0;
        for t in -(w.half_width as isize)..=(w.half_width as isize) {
            let (r, c) = match w.axis {
                Axis::Horizontal => (w.center_row as isize + t, w.center_col as isize + along),
                Axis::Vertical => (w.center_row as isize + along, w.center_col as isize + t),
            };
            acc += image.at(r as usize, c as usize);
        }
        *p = acc / (2 * w.half_width + 1) as f64;
    }
    if profile.iter().sum::<f64>() <= 0.0 {
        return Err(Error::data("no light in the fringe window"));
    }

    let omega = 2.0 * std::f64::consts::PI / w.period_px;
    let scale = w.half_length.max(1) as f64;
    let basis = |x: f64| -> [f64; 9] {
        let s = x / scale;
        let (sn, cs) = (omega * x).sin_cos();
        [1.0, s, s * s, cs, sn, s * cs, s * sn, s * s * cs, s * s * sn]
    };
    let mut ata = [[0.0; 9]; 9];
    let mut atb = [0.0; 9];
    for (k, &y) in profile.iter().enumerate() {
        let b = basis(k as f64 - w.half_length as f64);
        for i in 0..9 {
            atb[i] += b[i] * y;
            for j in 0..9 {
                ata[i][j] += b[i] * b[j];
            }
        }
    }
    let coef = solve(ata, atb).ok_or_else(|| Error::data("degenerate fringe fit"))?;
    let background = coef[0];
    let amplitude = coef[3].hypot(coef[4]);
    let i_max = background + amplitude;
    let i_min = (background - amplitude).max(0.0);
    if i_max + i_min <= 0.0 {
        return Err(Error::data("fringe fit has no positive background"));
    }
    let v = ((i_max - i_min) / (i_max + i_min)).clamp(0.0, 1.0);
    Ok(VisibilityReport {
        v,
        i_max,
        i_min,
        window: *window,
    })
}

/// Gaussian elimination with partial pivoting.
fn solve<const N: usize>(mut a: [[f64; N]; N], mut b: [f64; N]) -> Option<[f64; N]> {
    for col in 0..N {
        let pivot = (col..N).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..N {
            let f = a[row][col] / a[col][col];
            for k in col..N {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; N];
    for row in (0..N).rev() {
        let s: f64 = (row + 1..N).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// Square analysis window, top-left corner plus side in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpeckleWindow {
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

impl SpeckleWindow {
    pub fn centered(n: usize, size: usize) -> Self {
        Self {
            row: (n - size) / 2,
            col: (n - size) / 2,
            size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeckleReport {
    /// Mean of the two axis half-widths, meters.
    pub size: f64,
    pub size_x: f64,
    pub size_y: f64,
    /// `std / mean` over the window.
    pub contrast: f64,
    pub mean: f64,
}

/// Speckle grain size as the 1/e half-width of the normalized intensity
/// autocovariance, and speckle contrast.
pub fn speckle_stats(image: &IntensityImage, window: &SpeckleWindow) -> Result<SpeckleReport> {
    let n = image.grid().n();
    let w = window.size;
    if w < 4 || window.row + w > n || window.col + w > n {
        return Err(Error::config("speckle window must lie inside the image"));
    }
    let mut vals = Vec::with_capacity(w * w);
    for r in window.row..window.row + w {
        vals.extend((window.col..window.col + w).map(|c| image.at(r, c)));
    }
    let (mean, std) = mean_and_std(&vals)?;
    if mean <= 0.0 {
        return Err(Error::data("speckle window has no light"));
    }
    if std <= 0.0 {
        return Err(Error::data("speckle window is constant; size undefined"));
    }

    let m = (2 * w).next_power_of_two();
    let mut buf = vec![Complex64::default(); m * m];
    for r in 0..w {
        for c in 0..w {
            buf[r * m + c] = Complex64::new(vals[r * w + c] - mean, 0.0);
        }
    }
    let fft = Fft2::new(m);
    fft.forward(&mut buf);
    for v in buf.iter_mut() {
        *v = Complex64::new(v.norm_sqr(), 0.0);
    }
    fft.inverse(&mut buf);
    // Unbiased lag estimate: divide by the number of overlapping pairs.
    let cov = |dr: usize, dc: usize| buf[dr * m + dc].re / ((w - dr) * (w - dc)) as f64;
    let c0 = cov(0, 0);
    let half_width = |along_rows: bool| -> Result<f64> {
        let thresh = (-1.0f64).exp();
        let mut prev = 1.0;
        for k in 1..w / 2 {
            let c = if along_rows { cov(k, 0) } else { cov(0, k) } / c0;
            if c < thresh {
                return Ok(k as f64 - 1.0 + (prev - thresh) / (prev - c));
            }
            prev = c;
        }
        Err(Error::data("autocovariance never falls below 1/e in the window"))
    };
    let px_x = half_width(false)?;
    let px_y = half_width(true)?;
    let pitch = image.grid().pitch();
    Ok(SpeckleReport {
        size: 0.5 * (px_x + px_y) * pitch,
        size_x: px_x * pitch,
        size_y: px_y * pitch,
        contrast: std / mean,
        mean,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares `y = slope x + intercept`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::data("linear fit needs at least two points"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::data("linear fit needs at least two distinct x values"));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - slope * x - intercept).powi(2))
        .sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(LinearFit {
        slope,
        intercept,
        r2,
    })
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::data("rank correlation needs two equal-length series"));
    }
    let ranks = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    };
    let (ra, rb) = (ranks(a), ranks(b));
    let fit = linear_fit(&ra, &rb)?;
    let sign = fit.slope.signum();
    Ok(sign * fit.r2.max(0.0).sqrt())
}

/// Nine significant digits, scientific notation.
pub fn fmt_sig9(x: f64) -> String {
    format!("{x:.8e}")
}

/// CSV with one header line and fixed column order.
pub fn csv_table(header: &[&str], rows: &[Vec<f64>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|&v| fmt_sig9(v)).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::GridSpec;
    use std::collections::HashMap;
    use std::f64::consts::PI;

    #[test]
    fn constant_image_has_zero_entropy() {
        let r = entropy_2d(&[77; 64], 8).unwrap();
        assert_eq!(r.h, 0.0);
        assert_eq!(r.count(77, 77), 64);
        assert_eq!(r.histogram.iter().map(|&c| c as usize).sum::<usize>(), 64);
    }

    #[test]
    fn empty_image_rejected() {
        assert!(entropy_2d(&[], 4).is_err());
        assert!(entropy_2d(&[1, 2, 3], 2).is_err());
    }

    // Independent enumeration: explicit neighbor lists, HashMap counts,
    // natural-log entropy converted to bits.
    fn brute_force_entropy(img: &[u8], w: usize) -> f64 {
        let h = img.len() / w;
        let mut counts: HashMap<(u8, u8), usize> = HashMap::new();
        for y in 0..h {
            for x in 0..w {
                let mut neigh = Vec::new();
                for (dy, dx) in [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)] {
                    let yy = (y as i64 + dy).max(0).min(h as i64 - 1) as usize;
                    let xx = (x as i64 + dx).max(0).min(w as i64 - 1) as usize;
                    neigh.push(img[yy * w + xx] as f64);
                }
                let avg = neigh.iter().sum::<f64>() / 8.0;
                let j = (avg + 0.5).floor() as u8;
                *counts.entry((img[y * w + x], j)).or_default() += 1;
            }
        }
        let total = img.len() as f64;
        -counts
            .values()
            .map(|&c| {
                let p = c as f64 / total;
                p * p.ln()
            })
            .sum::<f64>()
            / 2f64.ln()
    }

    #[test]
    fn diagonal_pattern_matches_frozen_oracle() {
        let img: Vec<u8> = (0..36).map(|i| (((i % 6) * 7 + (i / 6) * 3) % 5 * 50) as u8).collect();
        // Frozen from brute_force_entropy on this image.
        let frozen = 3.919381945646371;
        assert!((brute_force_entropy(&img, 6) - frozen).abs() < 1e-12);
        let r = entropy_2d(&img, 6).unwrap();
        assert!((r.h - frozen).abs() < 1e-12);
        assert_eq!(r.count(0, 94), 4);
        assert_eq!(r.count(150, 88), 3);
        assert_eq!(r.pixels, 36);
    }

    #[test]
    fn uniform_joint_distribution_reaches_sixteen_bits() {
        // 256 x 256 cells, one count each, evaluated through the same formula.
        let total = 65536.0f64;
        let h: f64 = -(0..65536).map(|_| (1.0 / total) * (1.0 / total).log2()).sum::<f64>();
        assert!((h - 16.0).abs() < 1e-9);
    }

    #[test]
    fn spatial_arrangement_changes_entropy() {
        let n = 16;
        let split: Vec<u8> = (0..n * n).map(|i| if i % n < n / 2 { 0 } else { 255 }).collect();
        let checker: Vec<u8> = (0..n * n).map(|i| if (i % n + i / n) % 2 == 0 { 0 } else { 255 }).collect();
        let a = entropy_2d(&split, n).unwrap().h;
        let b = entropy_2d(&checker, n).unwrap().h;
        assert!((a - b).abs() > 0.1, "{a} vs {b}");
    }

    fn image_from(n: usize, f: impl Fn(usize, usize) -> f64) -> IntensityImage {
        let g = GridSpec::new(n, 1e-5).unwrap();
        let v = (0..n * n).map(|i| f(i / n, i % n)).collect();
        IntensityImage::new(g, v).unwrap()
    }

    #[test]
    fn analytic_fringes_have_unit_visibility() {
        let p = 7.3;
        let img = image_from(256, |_, c| 1.0 + (2.0 * PI * (c as f64 - 128.0) / p).cos());
        let w = FringeWindow::centered(256, Axis::Horizontal, p, 8.0, 4);
        let r = fringe_visibility(&img, &w).unwrap();
        assert!((r.v - 1.0).abs() < 1e-6, "{}", r.v);
        assert!((r.i_max - 2.0).abs() < 1e-6);
    }

    #[test]
    fn partial_and_flat_visibility() {
        let p = 10.0;
        let img = image_from(128, |_, c| 3.0 + 0.75 * (2.0 * PI * c as f64 / p + 0.4).cos());
        let w = FringeWindow::centered(128, Axis::Horizontal, p, 6.0, 2);
        assert!((fringe_visibility(&img, &w).unwrap().v - 0.25).abs() < 1e-9);

        let flat = image_from(128, |_, _| 5.0);
        assert!(fringe_visibility(&flat, &w).unwrap().v < 1e-12);

        let dark = image_from(128, |_, _| 0.0);
        assert!(fringe_visibility(&dark, &w).is_err());

        let short = FringeWindow::centered(128, Axis::Horizontal, p, 2.0, 2);
        assert!(fringe_visibility(&flat, &short).is_err());
    }

    #[test]
    fn envelope_shared_by_background_and_fringes() {
        let p = 5.42;
        for v in [0.2, 0.6, 1.0] {
            let img = image_from(128, |_, c| {
                let x = c as f64 - 64.0;
                (-(x / 20.0).powi(2)).exp() * (1.0 + v * (2.0 * PI * x / p + 0.7).cos())
            });
            let w = FringeWindow::centered(128, Axis::Horizontal, p, 4.0, 2);
            let got = fringe_visibility(&img, &w).unwrap().v;
            assert!((got - v).abs() < 0.005, "{got} vs {v}");
        }
    }

    #[test]
    fn vertical_fringes() {
        let p = 6.0;
        let img = image_from(128, |r, _| 2.0 + (2.0 * PI * r as f64 / p).cos());
        let w = FringeWindow::centered(128, Axis::Vertical, p, 5.0, 3);
        assert!((fringe_visibility(&img, &w).unwrap().v - 0.5).abs() < 1e-9);
    }

    #[test]
    fn speckle_rejects_constant_window() {
        let img = image_from(64, |_, _| 1.0);
        assert!(speckle_stats(&img, &SpeckleWindow::centered(64, 32)).is_err());
        assert!(speckle_stats(&img, &SpeckleWindow { row: 50, col: 0, size: 32 }).is_err());
    }

    #[test]
    fn linear_fit_cases() {
        let f = linear_fit(&[1.0, 3.0], &[2.0, 5.0]).unwrap();
        assert!((f.slope - 1.5).abs() < 1e-15 && (f.r2 - 1.0).abs() < 1e-15);
        assert!(linear_fit(&[1.0], &[1.0]).is_err());
        assert!(linear_fit(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
        let noisy = linear_fit(&[0.0, 1.0, 2.0, 3.0], &[0.1, 0.9, 2.2, 2.8]).unwrap();
        assert!(noisy.r2 > 0.95 && noisy.r2 < 1.0);
    }

    #[test]
    fn spearman_extremes() {
        let a = [1.0, 2.0, 5.0, 9.0];
        assert!((spearman(&a, &[0.1, 0.2, 0.3, 0.4]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn csv_format() {
        let s = csv_table(&["l_c_m", "visibility"], &[vec![3e-4, 0.123456789012]]);
        assert_eq!(s, "l_c_m,visibility\n3.00000000e-4,1.23456789e-1\n");
    }
}
