//! Brute-force per-pixel reimplementation of single-branch, single-pixel
//! pipelines, compared bit-for-bit with the engine on tiny planes.

use autolut::adarl::ResidualWeights;
use autolut::autosample::{SamplerWeights, QUAD};
use autolut::image::Plane;
use autolut::lut::{LutTable, LATTICE_POINTS};
use autolut::par::Exec;
use autolut::pipeline::{PipelineConfig, Preset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Grid = Vec<Vec<f64>>;

fn entry(lut: &LutTable, knots: [usize; 4], ch: usize) -> f64 {
    let idx = ((knots[0] * 17 + knots[1]) * 17 + knots[2]) * 17 + knots[3];
    lut.entries()[idx * lut.out_channels() + ch] as f64
}

fn interpolate(lut: &LutTable, x: [f64; 4], ch: usize) -> f64 {
    let cell = x.map(|v| ((v / 16.0).floor() as usize).min(15));
    let frac: [f64; 4] = std::array::from_fn(|d| (x[d] - 16.0 * cell[d] as f64) / 16.0);
    let mut order = [0usize, 1, 2, 3];
    order.sort_by(|&a, &b| frac[b].total_cmp(&frac[a]).then(a.cmp(&b)));
    let f = order.map(|d| frac[d]);
    let w = [1.0 - f[0], f[0] - f[1], f[1] - f[2], f[2] - f[3], f[3]];
    let mut v = cell;
    let mut acc = 0.0;
    for m in 0..5 {
        if m > 0 {
            v[order[m - 1]] += 1;
        }
        if w[m] != 0.0 {
            acc += w[m] * entry(lut, v, ch);
        }
    }
    acc
}

fn rot_ccw(g: &Grid) -> Grid {
    let (h, w) = (g.len(), g[0].len());
    (0..w).map(|r| (0..h).map(|c| g[c][w - 1 - r]).collect()).collect()
}

fn rot(g: &Grid, t: usize) -> Grid {
    (0..t % 4).fold(g.clone(), |a, _| rot_ccw(&a))
}

fn round_u8(v: f64) -> f64 {
    v.round().clamp(0.0, 255.0)
}

/// One group for k = 1, b = 1: every quad cell is the pixel itself.
fn group(cur: &Grid, prev: &Grid, cfg: &PipelineConfig, gi: usize) -> Grid {
    let g = &cfg.groups[gi];
    let br = &g.branches[0];
    let s = (g.out_channels as f64).sqrt() as usize;
    let (h, w) = (cur.len(), cur[0].len());
    let mut out = vec![vec![0.0; w * s]; h * s];
    for r in 0..h {
        for c in 0..w {
            let (a, b) = (cur[r][c], prev[r][c]);
            let quad: [f64; 4] = std::array::from_fn(|i| {
                let wt = br.residual.values()[i] as f64;
                ((1.0 - wt) * a + wt * b).clamp(a.min(b), a.max(b))
            });
            for ch in 0..g.out_channels {
                out[r * s + ch / s][c * s + ch % s] = interpolate(&br.lut, quad, ch);
            }
        }
    }
    out
}

fn brute_force(x: &Plane, cfg: &PipelineConfig) -> Plane {
    let input: Grid = (0..x.height()).map(|r| (0..x.width()).map(|c| x.get(r, c) as f64).collect()).collect();
    let (mut older, mut newer) = (input.clone(), input);
    for gi in 0..cfg.groups.len() {
        let out: Grid = if cfg.ensemble {
            let runs: Vec<Grid> = (0..4).map(|t| rot(&group(&rot(&newer, t), &rot(&older, t), cfg, gi), 4 - t)).collect();
            (0..runs[0].len())
                .map(|r| {
                    (0..runs[0][0].len())
                        .map(|c| {
                            let mut v = [runs[0][r][c], runs[1][r][c], runs[2][r][c], runs[3][r][c]];
                            v.sort_by(f64::total_cmp);
                            (((v[0] + v[1]) + v[2]) + v[3]) / 4.0
                        })
                        .collect()
                })
                .collect()
        } else {
            group(&newer, &older, cfg, gi)
        };
        let out: Grid = out.iter().map(|row| row.iter().map(|&v| round_u8(v)).collect()).collect();
        older = std::mem::replace(&mut newer, out);
    }
    Plane::from_fn(newer.len(), newer[0].len(), |r, c| newer[r][c] as u8)
}

fn randomize(cfg: &mut PipelineConfig, rng: &mut ChaCha8Rng) {
    for g in &mut cfg.groups {
        let c = g.out_channels;
        for b in &mut g.branches {
            b.sampler_current = SamplerWeights::new(1, (0..QUAD).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
            b.sampler_previous = SamplerWeights::new(1, (0..QUAD).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
            b.residual = ResidualWeights::new(std::array::from_fn(|_| rng.random())).unwrap();
            b.lut = LutTable::new(c, (0..LATTICE_POINTS * c).map(|_| rng.random()).collect()).unwrap();
        }
    }
}

#[test]
fn engine_matches_brute_force_on_tiny_planes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..24 {
        let scale = [1, 2, 3, 4][trial % 4];
        let preset = if trial % 3 == 0 {
            Preset::SpfLight { groups: 3, k: 1 }
        } else {
            Preset::MulutOurs { branches: 1, k: 1 }
        };
        let mut cfg = PipelineConfig::from_preset(preset, scale).unwrap();
        cfg.ensemble = trial % 2 == 0;
        randomize(&mut cfg, &mut rng);
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let x = Plane::from_fn(h, w, |_, _| rng.random());
        let expected = brute_force(&x, &cfg);
        for exec in [Exec::Sequential, Exec::Parallel] {
            assert_eq!(autolut::super_resolve(&x, &cfg, exec).unwrap(), expected, "trial {trial}");
        }
    }
}
