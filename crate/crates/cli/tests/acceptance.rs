//! Acceptance checks for the toolkit. Prints one `[PASS]`/`[FAIL]` line per
//! criterion and exits nonzero if any fails.

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsect::blocks::{decompose, extract_25d, extract_directional_patch, plan_grid, reassemble, Plane};
use sparsect::io::{read_tensor, read_volume, write_tensor, write_volume, TensorMeta};
use sparsect::manifest::{manifest_skeleton, SampleMode, Split};
use sparsect::metrics::{mse, ssim, SsimParams};
use sparsect::phantom::{chest_specs, generate_phantom_supersampled, half_extent, z_homogeneous, EllipsoidSpec};
use sparsect::projector::{forward_project_slice, ConeProjector, SliceProjector};
use sparsect::recon::{fbp_fan, fbp_parallel, FilterSpec};
use sparsect::sim::{
    apply_correction, attenuation_to_hu, hu_to_attenuation, reconstruct_levels, simulate_case, window_normalize,
    SimOptions,
};
use sparsect::{BeamGeometry, BeamKind, Image, Unit, VoxelVolume, WindowSpec};
use sparsect_cli::{
    cmd_baseline, cmd_extract, cmd_phantom, cmd_score, cmd_simulate, cmd_split, ExtractConfig, PhantomConfig,
    ScoreConfig, SimulateConfig, SplitFilter,
};

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

/// Fails unless `cond` holds; a NaN comparison counts as failure.
macro_rules! check {
    ($cond:expr, $($fmt:tt)*) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($fmt)*));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_f32(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn chest(shape: [usize; 3], spacing: [f64; 3], homogeneous: bool, supersample: usize) -> VoxelVolume {
    let mut specs = chest_specs(half_extent(shape, spacing));
    if homogeneous {
        specs = z_homogeneous(&specs);
    }
    generate_phantom_supersampled(shape, spacing, &specs, supersample).unwrap()
}

fn windowed(mu: &VoxelVolume) -> VoxelVolume {
    window_normalize(&attenuation_to_hu(mu).unwrap(), WindowSpec::WIDE).unwrap()
}

fn windowed_image(img: &Image) -> Vec<f32> {
    windowed(&VoxelVolume::from_slices(std::slice::from_ref(img), 1.0).unwrap()).into_values()
}

fn adjointness() -> Outcome {
    let mut report = Vec::new();
    for kind in BeamKind::ALL {
        let mut r = rng(kind as u64 + 1);
        let start = Instant::now();
        let (lhs, rhs, scale) = if kind == BeamKind::Cone {
            let shape = [64, 64, 64];
            let g = BeamGeometry::for_volume(kind, shape, [1.0; 3]).unwrap();
            let p = ConeProjector::new(shape, [1.0; 3], g, &g.angles(32)).unwrap();
            let x = random_f32(&mut r, p.volume_len(), -1.0, 1.0);
            let y = random_f32(&mut r, p.sinogram_len(), -1.0, 1.0);
            let ax = p.forward(&x);
            let aty = p.adjoint(&y);
            (dot(&ax, &y), dot(&x, &aty), dot(&ax, &ax).sqrt() * dot(&y, &y).sqrt())
        } else {
            let g = BeamGeometry::for_volume(kind, [64, 64, 1], [1.0; 3]).unwrap();
            let p = SliceProjector::new([64, 64], [1.0; 2], g, &g.angles(32)).unwrap();
            let x = random_f32(&mut r, p.image_len(), -1.0, 1.0);
            let y = random_f32(&mut r, p.sinogram_len(), -1.0, 1.0);
            let ax = p.forward(&x);
            let aty = p.adjoint(&y);
            (dot(&ax, &y), dot(&x, &aty), dot(&ax, &ax).sqrt() * dot(&y, &y).sqrt())
        };
        let secs = start.elapsed().as_secs_f64();
        let dev = (lhs - rhs).abs() / scale;
        report.push(format!("{kind} {dev:.1e} in {secs:.2}s"));
        check!(dev <= 1e-4, "{kind}: deviation {dev:.3e}");
        check!(secs < 10.0, "{kind}: took {secs:.1}s");
    }
    Ok(report.join(", "))
}

/// Detector bins closer than this to the disk edge are excluded; grazing rays
/// there see the pixelated boundary while the chord tends to zero.
const RIM_BAND_PX: f64 = 5.0;

fn chord_length() -> Outcome {
    let (n, pitch, r) = (256, 1.0, 100.0);
    let spec = EllipsoidSpec::cylinder([0.0, 0.0], [r, r], 0.0, 1000.0);
    let hu = generate_phantom_supersampled([n, n, 1], [pitch; 3], &[spec], 8).unwrap();
    let disk = hu_to_attenuation(&hu).unwrap().slice(0);
    let g = BeamGeometry::for_volume(BeamKind::Parallel, [n, n, 1], [pitch; 3]).unwrap();
    let angles: Vec<f64> = (0..180).map(|k| k as f64 * PI / 180.0).collect();
    let sino = forward_project_slice(&disk, &g, &angles).unwrap();
    let mut worst: f64 = 0.0;
    for v in 0..angles.len() {
        for (d, &p) in sino.view(v).iter().enumerate() {
            let s = (d as f64 - (g.det_count as f64 - 1.0) / 2.0) * g.det_spacing;
            if s.abs() <= r - RIM_BAND_PX * pitch {
                let chord = 2.0 * (r * r - s * s).sqrt();
                worst = worst.max((p as f64 - chord).abs() / chord);
            }
        }
    }
    check!(worst <= 0.01, "worst relative error {worst:.3e}");
    Ok(format!("worst relative error {worst:.2e}"))
}

/// Pixels whose 7x7 neighbourhood is constant.
fn interior(reference: &[f32], n: usize) -> Vec<bool> {
    let k = 3;
    let mut mask = vec![false; n * n];
    for j in k..n - k {
        for i in k..n - k {
            let c = reference[j * n + i];
            mask[j * n + i] = (j - k..=j + k).all(|jj| (i - k..=i + k).all(|ii| reference[jj * n + ii] == c));
        }
    }
    mask
}

fn fbp_fidelity() -> Outcome {
    let n = 256;
    let hu = chest([n, n, 1], [1.0; 3], true, 4);
    let mu = hu_to_attenuation(&hu).unwrap().slice(0);
    let truth = window_normalize(&hu, WindowSpec::WIDE).unwrap().into_values();
    let mask = interior(&mu.values, n);
    let mut report = Vec::new();
    for kind in [BeamKind::Parallel, BeamKind::Fan] {
        let start = Instant::now();
        let g = BeamGeometry::for_volume(kind, [n, n, 1], [1.0; 3]).unwrap();
        let sino = forward_project_slice(&mu, &g, &g.angles(2048)).unwrap();
        let rec = match kind {
            BeamKind::Parallel => fbp_parallel(&sino, [n, n], [1.0; 2], FilterSpec::default()).unwrap(),
            _ => fbp_fan(&sino, [n, n], [1.0; 2], FilterSpec::default()).unwrap(),
        };
        let secs = start.elapsed().as_secs_f64();
        let (mut num, mut den) = (0.0, 0.0);
        for ((&a, &b), &m) in rec.values.iter().zip(&mu.values).zip(&mask) {
            if m {
                num += (a as f64 - b as f64).powi(2);
                den += (b as f64).powi(2);
            }
        }
        let err = (num / den).sqrt();
        let s = ssim(&windowed_image(&rec), &truth, n, n, &SsimParams::default()).unwrap();
        report.push(format!("{kind} rel RMSE {err:.4} SSIM {s:.4} in {secs:.1}s"));
        check!(err <= 0.02, "{kind}: relative RMSE {err:.4}");
        check!(s >= 0.9, "{kind}: SSIM {s:.4}");
        check!(secs < 120.0, "{kind}: took {secs:.0}s");
    }
    Ok(report.join(", "))
}

fn fdk_central_plane() -> Outcome {
    let shape = [96, 96, 9];
    let hu = chest(shape, [1.0; 3], true, 2);
    let mu = hu_to_attenuation(&hu).unwrap();
    let cone = BeamGeometry::for_volume(BeamKind::Cone, shape, [1.0; 3]).unwrap();
    let vol = &reconstruct_levels(&mu, &cone, 2048, &[], FilterSpec::default()).unwrap()[&2048];
    let center = shape[2] / 2;
    let fan = BeamGeometry::for_volume(BeamKind::Fan, [shape[0], shape[1], 1], [1.0; 3]).unwrap();
    let sino = forward_project_slice(&mu.slice(center), &fan, &fan.angles(2048)).unwrap();
    let fbp = fbp_fan(&sino, [shape[0], shape[1]], [1.0; 2], FilterSpec::default()).unwrap();
    let a = windowed(&VoxelVolume::from_slices(&[vol.slice(center)], 1.0).unwrap());
    let m = mse(a.values(), &windowed_image(&fbp)).unwrap();
    check!(m <= 1e-4, "MSE {m:.3e}");
    Ok(format!("MSE {m:.2e}"))
}

fn monotonicity() -> Outcome {
    let mut report = Vec::new();
    for kind in BeamKind::ALL {
        let (shape, spacing) = match kind {
            BeamKind::Cone => ([64, 64, 16], [2.0, 2.0, 2.0]),
            _ => ([128, 128, 2], [1.5, 1.5, 2.0]),
        };
        let hu = chest(shape, spacing, false, 2);
        let truth = window_normalize(&hu, WindowSpec::WIDE).unwrap();
        let mu = hu_to_attenuation(&hu).unwrap();
        let g = BeamGeometry::for_volume(kind, shape, spacing).unwrap();
        let levels = reconstruct_levels(&mu, &g, 2048, &[32, 64, 128], FilterSpec::default()).unwrap();
        let p = SsimParams::default();
        let scores: Vec<(usize, f64, f64)> = levels
            .iter()
            .map(|(&v, rec)| {
                let s = sparsect::metrics::score_volume(&truth, &windowed(rec), &p).unwrap();
                (v, s.mse, s.ssim)
            })
            .collect();
        let ok = scores.windows(2).all(|w| w[1].1 < w[0].1 && w[1].2 > w[0].2);
        let row: Vec<String> = scores.iter().map(|(v, m, s)| format!("{v}:{m:.2e}/{s:.4}")).collect();
        report.push(format!("{kind} {}", row.join(" ")));
        check!(ok, "{kind} not strictly monotone: {}", row.join(" "));
    }
    Ok(report.join("; "))
}

fn block_pipeline() -> Outcome {
    let random_volume = |shape: [usize; 3], seed: u64| {
        let mut r = rng(seed);
        let values = random_f32(&mut r, shape.iter().product(), -1.0, 1.0);
        VoxelVolume::new(shape, [0.7, 0.7, 1.25], Unit::Difference, values).unwrap()
    };
    for (shape, bs, m) in [
        ([49, 49, 49], 64, 8),
        ([49, 49, 49], 16, 4),
        ([130, 70, 21], 128, 8),
        ([150, 150, 140], 128, 8),
    ] {
        let vol = random_volume(shape, 5);
        let grid = plan_grid(shape, bs, m).unwrap();
        let back = reassemble(decompose(&vol, &grid).unwrap(), &grid, vol.spacing(), vol.unit()).unwrap();
        check!(back == vol, "round trip differs for {shape:?} block {bs}");
    }

    let vol = random_volume([37, 29, 23], 9);
    let grid = plan_grid(vol.shape(), 16, 3).unwrap();
    let [nx, ny, nz] = vol.shape();
    let at = |x: usize, y: usize, z: usize| -> f32 {
        let (x, y, z) = (x as isize - 3, y as isize - 3, z as isize - 3);
        if x < 0 || y < 0 || z < 0 || x >= nx as isize || y >= ny as isize || z >= nz as isize {
            0.0
        } else {
            vol.get(x as usize, y as usize, z as usize)
        }
    };
    let n = grid.block_size;
    let c = n / 2;
    for block in decompose(&vol, &grid).unwrap() {
        let o = grid.block_origin(block.coords);
        let axial = extract_directional_patch(&block, Plane::Axial);
        let coronal = extract_directional_patch(&block, Plane::Coronal);
        let sagittal = extract_directional_patch(&block, Plane::Sagittal);
        let stacked = extract_25d(&block);
        for r in 0..n {
            for col in 0..n {
                let px = r * n + col;
                let expect = [
                    at(o[0] + col, o[1] + r, o[2] + c),
                    at(o[0] + col, o[1] + c, o[2] + r),
                    at(o[0] + c, o[1] + col, o[2] + r),
                ];
                let got = [axial[px], coronal[px], sagittal[px]];
                check!(
                    got.map(f32::to_bits) == expect.map(f32::to_bits)
                        && stacked[px * 3..px * 3 + 3]
                            .iter()
                            .map(|v| v.to_bits())
                            .eq(expect.map(f32::to_bits)),
                    "center cut differs at block {:?} pixel ({r},{col})",
                    block.coords
                );
            }
        }
    }

    let clinical = plan_grid([512, 512, 512], 64, 8).unwrap();
    check!(
        clinical.counts == [11, 11, 11],
        "512^3 grid counts {:?}",
        clinical.counts
    );
    check!(
        clinical.padded_shape == [544, 544, 544],
        "padded extent {:?}",
        clinical.padded_shape
    );
    Ok("round trips bit-exact, center cuts match, 512^3 -> 11^3 blocks padded to 544".into())
}

fn mse_direct(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = *x as f64 - *y as f64;
        s += d * d;
    }
    s / a.len() as f64
}

/// Mean local SSIM over all full 7x7 windows, each evaluated from scratch.
fn ssim_direct(a: &[f32], b: &[f32], h: usize, w: usize) -> f64 {
    let (c1, c2) = ((0.01f64).powi(2), (0.03f64).powi(2));
    let np = 49.0;
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=h - 7 {
        for c in 0..=w - 7 {
            let (mut sx, mut sy) = (0.0, 0.0);
            for i in 0..7 {
                for j in 0..7 {
                    sx += a[(r + i) * w + c + j] as f64;
                    sy += b[(r + i) * w + c + j] as f64;
                }
            }
            let (ux, uy) = (sx / np, sy / np);
            let (mut vx, mut vy, mut vxy) = (0.0, 0.0, 0.0);
            for i in 0..7 {
                for j in 0..7 {
                    let dx = a[(r + i) * w + c + j] as f64 - ux;
                    let dy = b[(r + i) * w + c + j] as f64 - uy;
                    vx += dx * dx;
                    vy += dy * dy;
                    vxy += dx * dy;
                }
            }
            let (vx, vy, vxy) = (vx / (np - 1.0), vy / (np - 1.0), vxy / (np - 1.0));
            total += ((2.0 * ux * uy + c1) * (2.0 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

fn metrics_oracle() -> Outcome {
    let p = SsimParams::default();
    let mut r = rng(42);
    let (mut worst_mse, mut worst_ssim) = (0.0f64, 0.0f64);
    for k in 0..100 {
        let (h, w) = (r.gen_range(7..40), r.gen_range(7..40));
        let a = random_f32(&mut r, h * w, 0.0, 1.0);
        let b: Vec<f32> = if k % 2 == 0 {
            random_f32(&mut r, h * w, 0.0, 1.0)
        } else {
            a.iter()
                .map(|&v| (v + r.gen_range(-0.1f32..0.1)).clamp(0.0, 1.0))
                .collect()
        };
        worst_mse = worst_mse.max((mse(&a, &b).unwrap() - mse_direct(&a, &b)).abs());
        worst_ssim = worst_ssim.max((ssim(&a, &b, h, w, &p).unwrap() - ssim_direct(&a, &b, h, w)).abs());
    }
    check!(worst_mse <= 1e-12, "MSE deviation {worst_mse:.3e}");
    check!(worst_ssim <= 1e-6, "SSIM deviation {worst_ssim:.3e}");

    let x = random_f32(&mut r, 32 * 32, 0.0, 1.0);
    let self_ssim = ssim(&x, &x, 32, 32, &p).unwrap();
    check!((self_ssim - 1.0).abs() <= 1e-12, "ssim(x, x) = {self_ssim}");

    let (a, b) = (vec![0.4f32; 100], vec![0.6f32; 100]);
    let (ua, ub) = (0.4f32 as f64, 0.6f32 as f64);
    let closed = (2.0 * ua * ub + p.c1()) / (ua * ua + ub * ub + p.c1());
    let got = ssim(&a, &b, 10, 10, &p).unwrap();
    check!(
        (got - closed).abs() <= 1e-6,
        "constant images: {got:.6} vs closed form {closed:.6}"
    );
    Ok(format!(
        "max |dMSE| {worst_mse:.1e}, max |dSSIM| {worst_ssim:.1e}, ssim(x,x) {self_ssim}, constant 0.4/0.6 {got:.6}"
    ))
}

fn build_dataset(root: &Path) {
    for (seed, subject) in ["a", "b", "c"].iter().enumerate() {
        let input = root.join(format!("phantoms/{subject}.spct"));
        cmd_phantom(&PhantomConfig {
            out: input.clone(),
            shape: [20, 20, 6],
            spacing: [2.0, 2.0, 2.5],
            seed: seed as u64 + 3,
            spec: None,
            supersample: 1,
        })
        .unwrap();
        cmd_simulate(&SimulateConfig {
            input,
            subject: subject.to_string(),
            geometries: BeamKind::ALL.to_vec(),
            views: vec![32, 64, 128],
            window: WindowSpec::WIDE,
            root: root.to_path_buf(),
        })
        .unwrap();
    }
    cmd_split(root, 3).unwrap();
}

fn correction_algebra() -> Outcome {
    let hu = chest([32, 32, 4], [2.0; 3], false, 1);
    let opts = SimOptions::default();
    for kind in BeamKind::ALL {
        let bundle = simulate_case(&hu, kind, WindowSpec::WIDE, &opts).unwrap();
        for v in bundle.views() {
            let target = bundle.sparse[&v]
                .values()
                .iter()
                .zip(bundle.full.values())
                .map(|(s, f)| s - f)
                .collect();
            let target =
                VoxelVolume::new(bundle.full.shape(), bundle.full.spacing(), Unit::Difference, target).unwrap();
            let corrected = apply_correction(&bundle.sparse[&v], &target).unwrap();
            check!(
                corrected
                    .values()
                    .iter()
                    .map(|v| v.to_bits())
                    .eq(bundle.full.values().iter().map(|v| v.to_bits())),
                "{kind} {v} views: corrected differs from full"
            );
        }
    }

    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("dataset");
    build_dataset(&root);
    let mut rows = 0;
    for mode in SampleMode::ALL {
        cmd_extract(&ExtractConfig {
            root: root.clone(),
            mode,
            block_size: 16,
            margin: 4,
        })
        .unwrap();
        let preds = tmp.path().join(format!("oracle-{mode}"));
        cmd_baseline(&root, mode, 1.0, SplitFilter::All, &preds).unwrap();
        let report = cmd_score(&ScoreConfig {
            root: root.clone(),
            mode,
            predictions: preds,
            split: SplitFilter::All,
            out: tmp.path().join(format!("{mode}.tsv")),
            export_images: None,
        })
        .unwrap();
        for row in &report.mean.rows {
            check!(
                row.corrected.mse == 0.0 && row.corrected.ssim == 1.0,
                "{mode} {} {}: MSE {:.3e}, SSIM {}",
                row.geometry,
                row.views,
                row.corrected.mse,
                row.corrected.ssim
            );
            rows += 1;
        }
    }
    Ok(format!(
        "bit-exact for all geometries and levels, {rows} oracle rows at MSE 0 / SSIM 1"
    ))
}

fn format_and_split() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut r = rng(7);
    let mut values = random_f32(&mut r, 5 * 4 * 3, -1e3, 1e3);
    values[..5].copy_from_slice(&[0.0, -0.0, f32::MIN_POSITIVE, f32::MAX, f32::EPSILON]);
    let meta = TensorMeta::new(vec![5, 4, 3], Unit::Difference).with("subject", "x");
    let path = tmp.path().join("t.spct");
    write_tensor(&path, &values, &meta).unwrap();
    let (back, back_meta) = read_tensor(&path).unwrap();
    check!(back_meta == meta, "metadata differs");
    check!(
        back.iter().map(|v| v.to_bits()).eq(values.iter().map(|v| v.to_bits())),
        "tensor payload differs"
    );

    let vol = VoxelVolume::new(
        [5, 4, 3],
        [0.5, 0.6, 2.0],
        Unit::Normalized,
        random_f32(&mut r, 60, 0.0, 1.0),
    )
    .unwrap();
    let vpath = tmp.path().join("v.spct");
    write_volume(&vpath, &vol, Default::default()).unwrap();
    let (vback, _) = read_volume(&vpath).unwrap();
    check!(vback == vol, "volume differs");

    let ids: Vec<String> = (1..=22).map(|i| format!("subject-{i:02}")).collect();
    let m = manifest_skeleton(&ids, 0).unwrap();
    let count = |s: Split| m.subjects.iter().filter(|e| e.split == Some(s)).count();
    let counts = (count(Split::Train), count(Split::Validation), count(Split::Test));
    check!(counts == (12, 2, 8), "split counts {counts:?}");
    Ok("tensor and volume round trips bit-exact, 22 subjects -> 12/2/8".into())
}

fn main() {
    let checks: [Check; 9] = [
        ("projector adjointness", adjointness),
        ("parallel chord length", chord_length),
        ("FBP fidelity", fbp_fidelity),
        ("FDK central plane", fdk_central_plane),
        ("sparse-view monotonicity", monotonicity),
        ("block pipeline", block_pipeline),
        ("metrics oracle", metrics_oracle),
        ("correction algebra", correction_algebra),
        ("format and split", format_and_split),
    ];
    let mut failed = 0;
    for (name, f) in checks {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {name} ({secs:.1}s): {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
