use flowdit_core::flowgen::{FieldMeta, VoxelField};
use flowdit_core::geometry::Axis;
use flowdit_core::metrics::{evaluate, nrmse, per_plane_profile, psnr, ssim3d, SsimOptions};
use flowdit_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(extents: [usize; 3], channels: usize, seed: u64) -> VoxelField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    VoxelField::from_fn(extents, channels, FieldMeta::default(), |_, _, _, _| rng.random_range(-1.0..1.0)).unwrap()
}

fn map(f: &VoxelField, g: impl Fn(usize, f32) -> f32) -> VoxelField {
    let data = f.data().iter().enumerate().map(|(i, &v)| g(i, v)).collect();
    VoxelField::new(f.extents(), f.channels(), data, FieldMeta::default()).unwrap()
}

fn constant(extents: [usize; 3], channels: usize, v: f64) -> VoxelField {
    VoxelField::from_fn(extents, channels, FieldMeta::default(), |_, _, _, _| v).unwrap()
}

#[test]
fn nrmse_examples() {
    let t = random([8, 8, 8], 3, 1);
    assert_eq!(nrmse(&t, &t).unwrap(), 0.0);
    assert_eq!(nrmse(&map(&t, |_, v| 2.0 * v), &t).unwrap(), 1.0);

    let p = random([8, 8, 8], 3, 2);
    // compensated summation oracle
    let (mut err, mut ce, mut norm, mut cn) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in p.data().iter().zip(t.data()) {
        let d = a as f64 - b as f64;
        let y = d * d - ce;
        let s = err + y;
        ce = (s - err) - y;
        err = s;
        let y = (b as f64) * (b as f64) - cn;
        let s = norm + y;
        cn = (s - norm) - y;
        norm = s;
    }
    let oracle = (err / norm).sqrt();
    assert!((nrmse(&p, &t).unwrap() - oracle).abs() < 1e-10);
}

#[test]
fn nrmse_zero_reference_is_undefined() {
    let z = VoxelField::zeros([4, 4, 4], 1).unwrap();
    let p = random([4, 4, 4], 1, 0);
    assert!(matches!(nrmse(&p, &z), Err(Error::UndefinedMetric(_))));
    assert!(nrmse(&p, &random([4, 4, 5], 1, 0)).is_err());
}

#[test]
fn nrmse_is_scale_covariant() {
    for seed in 0..10 {
        let t = random([6, 5, 4], 3, seed);
        let p = random([6, 5, 4], 3, seed + 100);
        // powers of two scale f32 values exactly
        let k = 4.0;
        let a = nrmse(&p, &t).unwrap();
        let b = nrmse(&map(&p, |_, v| k * v), &map(&t, |_, v| k * v)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn psnr_examples() {
    let t = random([4, 4, 4], 2, 3);
    assert_eq!(psnr(&t, &t).unwrap(), f64::INFINITY);

    let ones = constant([4, 4, 4], 1, 1.0);
    let twos = constant([4, 4, 4], 1, 2.0);
    assert_eq!(psnr(&twos, &ones).unwrap(), 0.0);

    // unit error on every voxel versus on every other voxel
    let truth = map(&constant([4, 4, 4], 1, 2.0), |i, v| if i % 3 == 0 { -v } else { v });
    let full = map(&truth, |_, v| v + 1.0);
    let half = map(&truth, |i, v| if i % 2 == 0 { v + 1.0 } else { v });
    let gain = psnr(&half, &truth).unwrap() - psnr(&full, &truth).unwrap();
    assert!((gain - 3.010_299_956_639_812).abs() < 1e-12, "{gain}");
}

#[test]
fn psnr_strictly_decreases_with_error() {
    let t = random([6, 6, 6], 1, 4);
    let mut last = f64::INFINITY;
    for k in 1..20 {
        let p = map(&t, |i, v| v + if i % 2 == 0 { 0.01 * k as f32 } else { -0.01 * k as f32 });
        let v = psnr(&p, &t).unwrap();
        assert!(v < last);
        last = v;
    }
}

#[test]
fn ssim_identity_symmetry_and_range() {
    let opts = SsimOptions::default();
    let a = random([12, 12, 12], 3, 5);
    assert!((ssim3d(&a, &a, &opts).unwrap() - 1.0).abs() < 1e-12);
    let b = random([12, 12, 12], 3, 6);
    let ab = ssim3d(&a, &b, &opts).unwrap();
    let ba = ssim3d(&b, &a, &opts).unwrap();
    assert_eq!(ab, ba);
    assert!((-1.0..=1.0).contains(&ab));
    let neg = map(&a, |_, v| -v);
    let s = ssim3d(&neg, &a, &opts).unwrap();
    assert!((-1.0..0.0).contains(&s), "{s}");
}

#[test]
fn ssim_constant_fields_closed_form() {
    let opts = SsimOptions::default();
    let (a, b) = (0.5, 0.25);
    let x = constant([11, 12, 13], 2, a);
    let y = constant([11, 12, 13], 2, b);
    // zero variance: the structure term is C2/C2
    let expect = (2.0 * a * b + opts.c1) / (a * a + b * b + opts.c1);
    assert!((ssim3d(&x, &y, &opts).unwrap() - expect).abs() < 1e-10);
}

/// Uniform-window SSIM by direct summation over each window.
fn brute_ssim(x: &VoxelField, y: &VoxelField, w: usize, c1: f64, c2: f64) -> f64 {
    let [dx, dy, dz] = x.extents();
    let ch = x.channels();
    let mut per_channel = 0.0;
    for c in 0..ch {
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..=dx - w {
            for j in 0..=dy - w {
                for k in 0..=dz - w {
                    let mut xs = Vec::new();
                    let mut ys = Vec::new();
                    for a in i..i + w {
                        for b in j..j + w {
                            for d in k..k + w {
                                xs.push(x.at(a, b, d, c) as f64);
                                ys.push(y.at(a, b, d, c) as f64);
                            }
                        }
                    }
                    let n = xs.len() as f64;
                    let mx = xs.iter().sum::<f64>() / n;
                    let my = ys.iter().sum::<f64>() / n;
                    let vx = xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
                    let vy = ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
                    let cov = xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
                    total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
        }
        per_channel += total / count as f64;
    }
    per_channel / ch as f64
}

#[test]
fn ssim_matches_brute_force() {
    let x = random([12, 13, 11], 2, 7);
    let y = map(&x, |i, v| v + 0.3 * ((i * 7919 % 13) as f32 / 13.0 - 0.5));
    let opts = SsimOptions::default();
    let fast = ssim3d(&x, &y, &opts).unwrap();
    let slow = brute_ssim(&x, &y, 11, opts.c1, opts.c2);
    assert!((fast - slow).abs() < 1e-10, "{fast} vs {slow}");

    let small = SsimOptions { window: 3, ..opts };
    let fast = ssim3d(&x, &y, &small).unwrap();
    let slow = brute_ssim(&x, &y, 3, opts.c1, opts.c2);
    assert!((fast - slow).abs() < 1e-10, "{fast} vs {slow}");
}

#[test]
fn gaussian_window_still_scores_identity_as_one() {
    let opts = SsimOptions {
        gaussian_sigma: Some(1.5),
        ..SsimOptions::default()
    };
    let a = random([12, 12, 12], 1, 8);
    assert!((ssim3d(&a, &a, &opts).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn ssim_rejects_small_grid() {
    let a = random([8, 12, 12], 1, 0);
    assert!(ssim3d(&a, &a, &SsimOptions::default()).is_err());
    // the report clamps the window instead
    let r = evaluate(&a, &a, &SsimOptions::default()).unwrap();
    assert!((r.ssim - 1.0).abs() < 1e-12);
    assert_eq!(r.per_plane[0].len(), 8);
    assert_eq!(r.per_plane[1].len(), 12);
}

#[test]
fn profile_of_identical_fields_is_zero() {
    let a = random([8, 6, 4], 3, 9);
    for axis in Axis::ALL {
        let prof = per_plane_profile(&a, &a, axis, &SsimOptions::default()).unwrap();
        assert_eq!(prof.len(), a.extents()[axis.index()]);
        assert!(prof.iter().all(|p| p.nrmse == 0.0 && p.psnr == f64::INFINITY));
        assert!(prof.iter().all(|p| (p.ssim - 1.0).abs() < 1e-12));
        let n = prof.len() as i64;
        assert_eq!(prof[0].relative_position, -(n / 2));
    }
}

#[test]
fn profile_spikes_at_the_corrupted_plane() {
    let t = random([8, 8, 8], 3, 10);
    let k = 5;
    let mut p = t.clone();
    for y in 0..8 {
        for z in 0..8 {
            let o = p.offset(y, k, z);
            p.data_mut()[o] += 0.5;
        }
    }
    let prof = per_plane_profile(&p, &t, Axis::Y, &SsimOptions::default()).unwrap();
    for m in &prof {
        if m.index == k {
            assert!(m.nrmse > 0.0);
            assert_eq!(m.relative_position, (k - 4) as i64);
        } else {
            assert_eq!(m.nrmse, 0.0);
        }
    }
}

#[test]
fn profile_mean_tracks_volume_nrmse_for_homogeneous_noise() {
    let t = random([16, 16, 16], 3, 11);
    let noise = random([16, 16, 16], 3, 12);
    let p = map(&t, |i, v| v + 0.1 * noise.data()[i]);
    let vol = nrmse(&p, &t).unwrap();
    for axis in Axis::ALL {
        let prof = per_plane_profile(&p, &t, axis, &SsimOptions::default()).unwrap();
        let mean = prof.iter().map(|m| m.nrmse).sum::<f64>() / prof.len() as f64;
        assert!((mean - vol).abs() < 0.05 * vol, "{axis}: {mean} vs {vol}");
    }
}
