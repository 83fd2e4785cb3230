//! Acceptance suite. Prints one line per criterion and exits nonzero if any
//! criterion fails. Dataset-backed criteria read Set5 from `AUTOLUT_SET5_DIR`
//! (default `<workspace>/data/Set5`) and report UNVERIFIED when it is absent.

use std::path::PathBuf;
use std::time::Instant;

use autolut::adarl::{combine, ResidualWeights};
use autolut::autosample::{SamplerWeights, QUAD};
use autolut::eval::{evaluate_hr, load_dir_y, Method};
use autolut::export::{storage_size, Checkpoint};
use autolut::finetune::{TrainablePipeline, TrainingPair};
use autolut::image::{FloatPlane, Kernel, Plane};
use autolut::lut::{lattice_index, simplex_trace, LutTable, LATTICE_POINTS};
use autolut::par::Exec;
use autolut::pipeline::{group_response, BranchView, PipelineConfig, Preset, Sampling, ShadowTable};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    Unverified(String),
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn set5_dir() -> PathBuf {
    std::env::var_os("AUTOLUT_SET5_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/Set5"))
}

fn set5() -> Option<Vec<(String, Plane)>> {
    let images = load_dir_y(set5_dir()).ok()?;
    (!images.is_empty()).then_some(images)
}

fn baseline(kernel: Kernel, psnr: f64, psnr_tol: f64, ssim: Option<(f64, f64)>) -> Outcome {
    let Some(images) = set5() else {
        return Outcome::Unverified(format!("dataset not found at {}", set5_dir().display()));
    };
    let start = Instant::now();
    let s = match evaluate_hr("Set5", &images, &Method::Baseline(kernel), 4, Exec::Parallel) {
        Ok(s) => s,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let secs = start.elapsed().as_secs_f64();
    let mut ok = (s.mean_psnr_db - psnr).abs() <= psnr_tol && secs < 60.0;
    if let Some((target, tol)) = ssim {
        ok &= (s.mean_ssim - target).abs() <= tol;
    }
    check(
        ok,
        format!("{} images, PSNR {:.4} dB, SSIM {:.4}, {secs:.2} s", images.len(), s.mean_psnr_db, s.mean_ssim),
    )
}

fn range_suite() -> Outcome {
    let mut r = rng(1);
    let lut = LutTable::new(4, (0..LATTICE_POINTS * 4).map(|_| r.random()).collect()).unwrap();
    let mut violations = 0usize;
    let draws = 100_000;
    let mut out = [0.0; 4];
    for _ in 0..draws {
        let k = [1, 3, 5, 7][r.random_range(0..4)];
        let logits = (0..k * k * QUAD).map(|_| r.random_range(-8.0f32..8.0)).collect();
        let s = SamplerWeights::new(k, logits).unwrap().normalize();
        let patch: Vec<f64> = (0..k * k).map(|_| r.random_range(0.0..=255.0)).collect();
        let (lo, hi) = patch.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        violations += s.sample(&patch).iter().filter(|&&q| q < lo || q > hi).count();

        let c: [f64; 4] = std::array::from_fn(|_| r.random_range(0.0..=255.0));
        let p: [f64; 4] = std::array::from_fn(|_| r.random_range(0.0..=255.0));
        let w = ResidualWeights::new(std::array::from_fn(|_| r.random_range(0.0..=1.0))).unwrap();
        let m = combine(&c, &p, &w);
        violations += (0..4).filter(|&i| m[i] < c[i].min(p[i]) || m[i] > c[i].max(p[i])).count();

        let coords: [f64; 4] = std::array::from_fn(|_| r.random_range(0.0..=255.0));
        lut.lookup(coords, &mut out).unwrap();
        let t = simplex_trace(coords);
        for (ch, &o) in out.iter().enumerate() {
            let vals = t.vertices.iter().map(|&v| lut.entries()[v * 4 + ch] as f64);
            let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
            violations += usize::from(o < lo || o > hi);
        }
    }
    check(violations == 0, format!("{draws} draws per operation, {violations} violations"))
}

fn softmax_normalization() -> Outcome {
    let mut r = rng(2);
    let (mut worst, mut negative) = (0.0f64, 0usize);
    for _ in 0..10_000 {
        let k = [1, 3, 5, 7][r.random_range(0..4)];
        let logits = (0..k * k * QUAD).map(|_| r.random_range(-60.0f32..60.0)).collect();
        let s = SamplerWeights::new(k, logits).unwrap().normalize();
        for ch in 0..QUAD {
            let sum: f64 = (0..k * k).map(|p| s.weights()[p * QUAD + ch]).sum();
            worst = worst.max((sum - 1.0).abs());
        }
        negative += s.weights().iter().filter(|&&w| w < 0.0).count();
    }
    check(worst <= 1e-6 && negative == 0, format!("max |sum - 1| = {worst:.2e}, {negative} negative weights"))
}

fn lattice_exactness() -> Outcome {
    let mut r = rng(3);
    let channels = 3;
    let lut = LutTable::new(channels, (0..LATTICE_POINTS * channels).map(|_| r.random()).collect()).unwrap();
    let mut mismatches = 0;
    let mut out = vec![0.0; channels];
    // Knot 16 sits at 256, outside the coordinate domain; knots 0..=15 are addressable.
    for _ in 0..10_000 {
        let knots: [usize; 4] = std::array::from_fn(|_| r.random_range(0..16));
        lut.lookup(knots.map(|k| 16.0 * k as f64), &mut out).unwrap();
        for (c, &o) in out.iter().enumerate() {
            mismatches += usize::from(o != lut.entries()[lattice_index(knots) * channels + c] as f64);
        }
    }
    check(mismatches == 0, format!("10000 lattice points, {mismatches} mismatches"))
}

fn affine_reproduction() -> Outcome {
    let mut r = rng(4);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        // Coefficients chosen so the function stays inside [0, 255] on [0, 256]^4.
        let coef: [f64; 4] = std::array::from_fn(|_| r.random_range(-0.24..0.24));
        let span: f64 = coef.iter().map(|c| c.abs() * 256.0).sum();
        let low: f64 = coef.iter().map(|c| c.min(0.0) * 256.0).sum();
        let offset = r.random_range(0.0..=255.0 - span) - low;
        let f = |x: [f64; 4]| offset + (0..4).map(|i| coef[i] * x[i]).sum::<f64>();
        let lut = LutTable::from_fn(1, |v, _| autolut::image::quantize_u8(f(v.map(|x| x as f64)))).unwrap();
        let mut out = [0.0];
        for _ in 0..1000 {
            let x: [f64; 4] = std::array::from_fn(|_| r.random_range(0.0..=255.0));
            lut.lookup(x, &mut out).unwrap();
            worst = worst.max((out[0] - f(x)).abs());
        }
    }
    check(worst <= 0.5, format!("20 functions x 1000 coords, max error {worst:.4}"))
}

fn receptive_field() -> Outcome {
    let mut r = rng(5);
    let n = 32;
    let mut sides = Vec::new();
    for k in [3usize, 5, 7] {
        let logits = |r: &mut ChaCha8Rng| SamplerWeights::new(k, (0..k * k * QUAD).map(|_| r.random_range(-1.0f32..1.0)).collect()).unwrap().normalize();
        let coef: [f64; 4] = std::array::from_fn(|_| r.random_range(0.05..0.2));
        let table = ShadowTable {
            channels: 1,
            entries: (0..LATTICE_POINTS)
                .map(|i| {
                    let kn = autolut::lut::lattice_knots(i);
                    (0..4).map(|d| coef[d] * 16.0 * kn[d] as f64).sum()
                })
                .collect(),
        };
        let view = BranchView { current: logits(&mut r), previous: logits(&mut r), residual: [0.3, 0.5, 0.7, 0.2], entries: &table };
        let base = FloatPlane::new(n, n, (0..n * n).map(|_| r.random_range(40.0..200.0)).collect()).unwrap();
        let mut bumped = base.clone();
        *bumped.get_mut(n / 2, n / 2) += 30.0;
        let run = |x: &FloatPlane| group_response(x, x, k, 1, std::slice::from_ref(&view), true, Exec::Parallel).unwrap();
        let (a, b) = (run(&base), run(&bumped));
        let (mut r0, mut r1, mut c0, mut c1) = (n, 0, n, 0);
        for row in 0..n {
            for col in 0..n {
                if a.get(row, col) != b.get(row, col) {
                    (r0, r1, c0, c1) = (r0.min(row), r1.max(row), c0.min(col), c1.max(col));
                }
            }
        }
        sides.push((k, r1 + 1 - r0, c1 + 1 - c0));
    }
    let ok = sides.iter().all(|&(k, h, w)| h == 2 * k - 1 && w == 2 * k - 1);
    check(ok, sides.iter().map(|(k, h, w)| format!("k={k}: {h}x{w}")).collect::<Vec<_>>().join(", "))
}

fn random_pipeline(r: &mut ChaCha8Rng, preset: Preset, scale: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig::from_preset(preset, scale).unwrap();
    for g in &mut cfg.groups {
        let (k, c) = (g.sample_size, g.out_channels);
        for b in &mut g.branches {
            if g.sampling == Sampling::Learned {
                b.sampler_current = SamplerWeights::new(k, (0..k * k * QUAD).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
                b.sampler_previous = SamplerWeights::new(k, (0..k * k * QUAD).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
                b.residual = ResidualWeights::new(std::array::from_fn(|_| r.random())).unwrap();
            }
            b.lut = LutTable::new(c, (0..LATTICE_POINTS * c).map(|_| r.random()).collect()).unwrap();
        }
    }
    cfg
}

fn random_plane(r: &mut ChaCha8Rng, h: usize, w: usize) -> Plane {
    Plane::from_fn(h, w, |_, _| r.random())
}

fn ensemble_equivariance() -> Outcome {
    let mut r = rng(6);
    let cfg = random_pipeline(&mut r, Preset::MulutOurs { branches: 2, k: 3 }, 2);
    let mut mismatched = 0;
    for _ in 0..50 {
        let (h, w) = (r.random_range(5..20), r.random_range(5..20));
        let x = random_plane(&mut r, h, w);
        let a = autolut::super_resolve(&x.rotate90(1), &cfg, Exec::Parallel).unwrap();
        let b = autolut::super_resolve(&x, &cfg, Exec::Parallel).unwrap().rotate90(1);
        mismatched += usize::from(a != b);
    }
    check(mismatched == 0, format!("50 planes, {mismatched} not bit-identical"))
}

fn tiled_determinism() -> Outcome {
    let mut r = rng(7);
    let mut differing = 0;
    let presets = [Preset::Mulut, Preset::MulutOurs { branches: 3, k: 5 }, Preset::SpfLight { groups: 3, k: 5 }];
    for preset in presets {
        let cfg = random_pipeline(&mut r, preset, 4);
        let x = random_plane(&mut r, 37, 29);
        let one = autolut::super_resolve(&x, &cfg, Exec::Sequential).unwrap();
        for exec in [Exec::Threads(2), Exec::Threads(7), Exec::Parallel] {
            differing += usize::from(autolut::super_resolve(&x, &cfg, exec).unwrap() != one);
        }
    }
    check(differing == 0, format!("3 pipelines x 3 worker counts, {differing} outputs differ"))
}

fn storage_accounting() -> Outcome {
    const MIB: f64 = 1_048_576.0;
    let mulut = storage_size(&Preset::Mulut.topology(4)).total;
    let ours = storage_size(&Preset::MulutOurs { branches: 3, k: 5 }.topology(4)).total;
    let mib = mulut as f64 / MIB;
    let delta = ours - mulut;
    let target_delta = (4.067 - 4.062) * MIB;
    let ok = (mib - 4.062).abs() <= 0.01 * 4.062 && (delta as f64 - target_delta).abs() <= 1024.0;
    check(ok, format!("MuLUT {mulut} B = {mib:.4} MiB, 3x5 adds {delta} B (reference {target_delta:.0} B)"))
}

/// Relative error with both values below `floor` treated as agreement.
fn rel_err(a: f64, b: f64) -> f64 {
    let d = a.abs().max(b.abs());
    if d < 1e-10 {
        0.0
    } else {
        (a - b).abs() / d
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Param {
    Entry(usize, usize, usize),
    Logit(usize, usize, bool, usize),
    Residual(usize, usize, usize),
}

fn param(m: &mut TrainablePipeline, p: Param) -> &mut f64 {
    match p {
        Param::Entry(g, b, i) => &mut m.groups[g].branches[b].table.entries[i],
        Param::Logit(g, b, cur, i) => {
            let br = &mut m.groups[g].branches[b];
            if cur { &mut br.logits_current[i] } else { &mut br.logits_previous[i] }
        }
        Param::Residual(g, b, i) => &mut m.groups[g].branches[b].residual[i],
    }
}

fn gradient_suite() -> Outcome {
    let mut r = rng(8);
    let setups: Vec<(TrainablePipeline, Vec<TrainingPair>)> = (0..16)
        .map(|i| {
            let preset = if i % 2 == 0 { Preset::MulutOurs { branches: 2, k: 3 } } else { Preset::SpfLight { groups: 3, k: 3 } };
            let cfg = random_pipeline(&mut r, preset, 2);
            let mut m = TrainablePipeline::from_pipeline(&cfg).unwrap();
            for g in &mut m.groups {
                for b in &mut g.branches {
                    b.table.entries.iter_mut().for_each(|e| *e += r.random_range(-0.5..0.5));
                    b.residual = std::array::from_fn(|_| r.random_range(0.05..0.95));
                }
            }
            let batch = (0..2)
                .map(|_| TrainingPair { lr: random_plane(&mut r, 6, 6), hr: random_plane(&mut r, 12, 12) })
                .collect();
            (m, batch)
        })
        .collect();
    let grads: Vec<_> = setups.iter().map(|(m, b)| m.loss_and_gradients(b, false, Exec::Parallel).unwrap().1).collect();

    let mut report = Vec::new();
    let mut ok = true;
    for kind in ["entries", "logits", "residual"] {
        let mut candidates = Vec::new();
        for (si, (m, _)) in setups.iter().enumerate() {
            for (gi, g) in m.groups.iter().enumerate() {
                for (bi, b) in g.branches.iter().enumerate() {
                    let gr = &grads[si].groups[gi][bi];
                    match kind {
                        "entries" => candidates.extend(
                            gr.entries.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| (si, Param::Entry(gi, bi, i))),
                        ),
                        "logits" => {
                            for i in 0..b.logits_current.len() {
                                candidates.push((si, Param::Logit(gi, bi, true, i)));
                                candidates.push((si, Param::Logit(gi, bi, false, i)));
                            }
                        }
                        _ => candidates.extend((0..QUAD).map(|i| (si, Param::Residual(gi, bi, i)))),
                    }
                }
            }
        }
        candidates.shuffle(&mut r);
        // Residual weights scale whole intensity differences, so they get the finest stencil.
        let eps = match kind {
            "entries" => 1e-3,
            "logits" => 1e-4,
            _ => 1e-6,
        };
        let (mut probes, mut skipped, mut worst) = (0, 0, 0.0f64);
        for (si, p) in candidates {
            if probes == 100 {
                break;
            }
            let (m0, batch) = &setups[si];
            let mut m = m0.clone();
            let analytic = {
                let g = &grads[si];
                match p {
                    Param::Entry(gi, bi, i) => g.groups[gi][bi].entries[i],
                    Param::Logit(gi, bi, cur, i) => {
                        let b = &g.groups[gi][bi];
                        if cur { b.logits_current[i] } else { b.logits_previous[i] }
                    }
                    Param::Residual(gi, bi, i) => g.groups[gi][bi].residual[i],
                }
            };
            let base_sig = m.trace_signature(batch, false).unwrap();
            let orig = *param(&mut m, p);
            *param(&mut m, p) = orig + eps;
            let (hi, sig_hi) = (m.loss(batch, false, Exec::Parallel).unwrap(), m.trace_signature(batch, false).unwrap());
            *param(&mut m, p) = orig - eps;
            let (lo, sig_lo) = (m.loss(batch, false, Exec::Parallel).unwrap(), m.trace_signature(batch, false).unwrap());
            // The loss is piecewise smooth; a stencil that crosses a simplex boundary has no meaningful difference quotient.
            if sig_hi != base_sig || sig_lo != base_sig {
                skipped += 1;
                continue;
            }
            worst = worst.max(rel_err(analytic, (hi - lo) / (2.0 * eps)));
            probes += 1;
        }
        ok &= probes == 100 && worst < 1e-4;
        report.push(format!("{kind}: {probes} probes, max rel err {worst:.2e} ({skipped} boundary stencils redrawn)"));
    }
    check(ok, report.join("; "))
}

fn serialization() -> Outcome {
    let mut r = rng(9);
    let mut failures = Vec::new();
    for channels in [1, 4, 16] {
        let lut = LutTable::new(channels, (0..LATTICE_POINTS * channels).map(|_| r.random()).collect()).unwrap();
        let bytes = lut.to_bytes();
        if LutTable::from_bytes(&bytes).unwrap().to_bytes() != bytes {
            failures.push(format!("LUT {channels}ch"));
        }
    }
    let presets = [Preset::Mulut, Preset::MulutOurs { branches: 3, k: 5 }, Preset::SpfLight { groups: 6, k: 5 }, Preset::Identity];
    for preset in presets {
        let cfg = random_pipeline(&mut r, preset, 3);
        let bytes = cfg.to_bytes();
        let back = PipelineConfig::from_bytes(&bytes).unwrap();
        if back.to_bytes() != bytes || back != cfg {
            failures.push(format!("pipeline {preset:?}"));
        }
    }
    let ck = Checkpoint::initialize(Preset::MulutOurs { branches: 2, k: 3 }.topology(4), &[8, 8], 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ck.write_dir(dir.path().join("a")).unwrap();
    Checkpoint::read_dir(dir.path().join("a")).unwrap().write_dir(dir.path().join("b")).unwrap();
    for f in ["manifest.json", "weights.bin"] {
        if std::fs::read(dir.path().join("a").join(f)).unwrap() != std::fs::read(dir.path().join("b").join(f)).unwrap() {
            failures.push(format!("checkpoint {f}"));
        }
    }
    check(failures.is_empty(), if failures.is_empty() { "3 LUTs, 4 pipelines, 1 checkpoint byte-identical".into() } else { failures.join(", ") })
}

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("bicubic baseline, Set5 x4", || baseline(Kernel::Bicubic, 28.42, 0.15, Some((0.8101, 0.01)))),
        ("nearest baseline, Set5 x4", || baseline(Kernel::Nearest, 26.25, 0.20, None)),
        ("range suite (sample, combine, lookup)", range_suite),
        ("softmax normalization", softmax_normalization),
        ("lattice exactness", lattice_exactness),
        ("affine reproduction", affine_reproduction),
        ("receptive field 2k-1", receptive_field),
        ("ensemble equivariance", ensemble_equivariance),
        ("tiled-parallel determinism", tiled_determinism),
        ("storage accounting", storage_accounting),
        ("fine-tune gradient suite", gradient_suite),
        ("serialization round trips", serialization),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Unverified(d) => ("UNVERIFIED/SKIPPED", d),
        };
        println!("{tag}: {name}: {detail} [{secs:.2}s]");
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
