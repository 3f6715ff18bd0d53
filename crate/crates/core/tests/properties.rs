use std::collections::{BTreeMap, HashSet};

use num_complex::Complex64;
use proptest::prelude::*;

use partial_coherence::dataset::{select_objects, IntensityRecord};
use partial_coherence::field::{quantize_values, DEFAULT_WAVELENGTH as WL};
use partial_coherence::metrology::{entropy_2d, fringe_visibility, linear_fit, FringeWindow};
use partial_coherence::propagation::propagate;
use partial_coherence::scene::{Axis, PinholeMaskSpec, SlmObject};
use partial_coherence::{ComplexField, GridSpec, IntensityImage, PlanOptions};

/// Entropy by explicit enumeration of the joint (gray, neighbor mean) pairs.
fn oracle_entropy(img: &[u8], w: usize) -> f64 {
    let h = img.len() / w;
    let px = |y: i64, x: i64| img[(y.clamp(0, h as i64 - 1) as usize) * w + x.clamp(0, w as i64 - 1) as usize] as u64;
    let mut pairs: BTreeMap<(u8, u64), u64> = BTreeMap::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let ring = px(y - 1, x - 1) + px(y - 1, x) + px(y - 1, x + 1) + px(y, x - 1) + px(y, x + 1)
                + px(y + 1, x - 1)
                + px(y + 1, x)
                + px(y + 1, x + 1);
            // Round half up: floor(ring / 8 + 1/2).
            let mean = (2 * ring + 8) / 16;
            *pairs.entry((img[y as usize * w + x as usize], mean)).or_default() += 1;
        }
    }
    let n = img.len() as f64;
    pairs.values().map(|&c| c as f64 / n).map(|p| -p * p.log2()).sum()
}

fn small_field(n: usize) -> impl Strategy<Value = Vec<Complex64>> {
    prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), n * n)
        .prop_map(|v| v.into_iter().map(|(a, b)| Complex64::new(a, b)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn entropy_matches_enumeration(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
        let mut state = seed;
        let img: Vec<u8> = (0..w * h)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 56) as u8
            })
            .collect();
        let r = entropy_2d(&img, w).unwrap();
        prop_assert!((r.h - oracle_entropy(&img, w)).abs() <= 1e-12);
        prop_assert_eq!(r.histogram.iter().map(|&c| c as usize).sum::<usize>(), w * h);
    }

    #[test]
    fn entropy_is_bounded(img in prop::collection::vec(any::<u8>(), 1..400)) {
        let r = entropy_2d(&img, 1).unwrap();
        prop_assert!(r.h >= 0.0);
        prop_assert!(r.h <= (img.len() as f64).log2() + 1e-12);
        prop_assert!(r.h <= 16.0);
    }

    #[test]
    fn constant_image_has_zero_entropy(v in any::<u8>(), w in 1usize..20, h in 1usize..20) {
        prop_assert_eq!(entropy_2d(&vec![v; w * h], w).unwrap().h, 0.0);
    }

    #[test]
    fn cint_round_trip(log_n in 0u32..6, seed in any::<u64>(), pitch in 1e-7f64..1e-3) {
        let n = 1usize << log_n;
        let grid = GridSpec::new(n, pitch).unwrap();
        let values: Vec<f64> = (0..n * n).map(|i| ((i as u64 ^ seed) % 1000) as f64 * 0.37).collect();
        let rec = IntensityRecord::from_image(&IntensityImage::new(grid, values).unwrap());
        let bytes = rec.encode();
        prop_assert_eq!(IntensityRecord::decode(&bytes).unwrap(), rec.clone());
        prop_assert_eq!(IntensityRecord::decode(&bytes).unwrap().encode(), bytes);
    }

    #[test]
    fn selection_is_unique_sorted_and_reproducible(size in 1usize..2000, frac in 0.0f64..1.0, seed in any::<u64>()) {
        let count = ((size as f64 * frac) as usize).max(1);
        let a = select_objects(size, count, seed).unwrap();
        prop_assert_eq!(a.len(), count);
        prop_assert!(a.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(a.iter().all(|&i| i < size));
        prop_assert_eq!(a.iter().collect::<HashSet<_>>().len(), count);
        prop_assert_eq!(select_objects(size, count, seed).unwrap(), a);
        prop_assert!(select_objects(size, size + 1, seed).is_err());
    }

    #[test]
    fn slm_is_passive(pixels in prop::collection::vec(any::<u8>(), 784)) {
        let grid = GridSpec::new(64, 1e-4).unwrap();
        let t = SlmObject::new(pixels).unwrap().transmittance(&grid);
        prop_assert!(t.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn pinhole_mask_is_binary(d in 0.2e-3f64..1.5e-3, extra in 0.1e-3f64..3e-3, vertical in any::<bool>()) {
        let grid = GridSpec::with_extent(256, 12e-3).unwrap();
        let spec = PinholeMaskSpec {
            diameter: d,
            spacing: d + extra,
            orientation: if vertical { Axis::Vertical } else { Axis::Horizontal },
        };
        prop_assume!(spec.validate(&grid).is_ok());
        let m = spec.mask(&grid);
        prop_assert!(m.iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert!(m.iter().any(|&v| v == 1.0));
    }

    #[test]
    fn quantization_saturates_and_is_monotone(vals in prop::collection::vec(0.0f64..10.0, 1..64), scale in 0.0f64..100.0) {
        let q = quantize_values(&vals, scale);
        for (i, &a) in vals.iter().enumerate() {
            for (j, &b) in vals.iter().enumerate() {
                if a <= b {
                    prop_assert!(q[i] <= q[j]);
                }
            }
        }
        for (v, &g) in vals.iter().zip(&q) {
            if v * scale >= 254.5 {
                prop_assert_eq!(g, 255);
            } else {
                prop_assert!((g as f64 - v * scale).abs() <= 0.5);
            }
        }
    }

    #[test]
    fn visibility_is_a_fraction(amp in 0.0f64..1.0, bg in 0.5f64..4.0, tilt in -0.2f64..0.2) {
        let n = 128;
        let grid = GridSpec::new(n, 1e-5).unwrap();
        let period = 9.0;
        let values: Vec<f64> = (0..n * n)
            .map(|i| {
                let c = (i % n) as f64;
                bg * (1.0 + tilt * (c / n as f64 - 0.5)) * (1.0 + amp * (2.0 * std::f64::consts::PI * c / period).cos())
            })
            .collect();
        let img = IntensityImage::new(grid, values).unwrap();
        let v = fringe_visibility(&img, &FringeWindow::centered(n, Axis::Horizontal, period, 8.0, 8)).unwrap().v;
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((v - amp).abs() < 0.02, "v {} amp {}", v, amp);
    }

    #[test]
    fn two_point_fit_is_exact(x0 in -5.0f64..5.0, dx in 0.1f64..5.0, y0 in -5.0f64..5.0, y1 in -5.0f64..5.0) {
        let f = linear_fit(&[x0, x0 + dx], &[y0, y1]).unwrap();
        prop_assert!((f.slope - (y1 - y0) / dx).abs() < 1e-9);
        prop_assert!((f.intercept + f.slope * x0 - y0).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn propagation_never_adds_power(samples in small_field(32), z in -0.5f64..0.5, pad in prop::sample::select(vec![1usize, 2, 4])) {
        let grid = GridSpec::new(32, 2e-5).unwrap();
        let u = ComplexField::from_samples(grid, WL, samples).unwrap();
        let out = propagate(&u, z, PlanOptions { pad_factor: pad, bandlimit: true }).unwrap();
        prop_assert!(out.total_power() <= u.total_power() * (1.0 + 1e-12));
    }

    #[test]
    fn unlimited_periodic_propagation_is_unitary(samples in small_field(32), z in -0.5f64..0.5) {
        let grid = GridSpec::new(32, 2e-5).unwrap();
        let u = ComplexField::from_samples(grid, WL, samples).unwrap();
        let out = propagate(&u, z, PlanOptions { pad_factor: 1, bandlimit: false }).unwrap();
        prop_assert!((out.total_power() / u.total_power() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn propagation_is_linear(a in small_field(16), b in small_field(16), z in 0.0f64..1.0, ar in -2.0f64..2.0, bi in -2.0f64..2.0) {
        let grid = GridSpec::new(16, 5e-5).unwrap();
        let (alpha, beta) = (Complex64::new(ar, 0.5), Complex64::new(0.3, bi));
        let combo: Vec<Complex64> = a.iter().zip(&b).map(|(x, y)| alpha * x + beta * y).collect();
        let opts = PlanOptions::default();
        let f = |s: Vec<Complex64>| propagate(&ComplexField::from_samples(grid, WL, s).unwrap(), z, opts).unwrap();
        let (pa, pb, pc) = (f(a), f(b), f(combo));
        let err: f64 = pa.samples().iter().zip(pb.samples()).zip(pc.samples())
            .map(|((x, y), c)| (alpha * x + beta * y - c).norm_sqr()).sum();
        prop_assert!(err.sqrt() <= 1e-10 * pc.total_power().sqrt().max(1e-300));
    }
}
