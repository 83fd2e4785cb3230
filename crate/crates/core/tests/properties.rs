use autolut::adarl::ResidualWeights;
use autolut::autosample::{SamplerWeights, QUAD};
use autolut::export::{export_lut, forward_backbone, BackboneWeights, Checkpoint};
use autolut::image::{psnr, rgb_to_y, ssim, Plane, PSNR_CAP_DB};
use autolut::lut::{lattice_knots, LutTable, LATTICE_POINTS};
use autolut::par::Exec;
use autolut::pipeline::{PipelineConfig, Preset, Sampling};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn plane(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Plane {
    Plane::from_fn(h, w, |_, _| rng.random())
}

fn preset(i: usize) -> Preset {
    [
        Preset::Mulut,
        Preset::MulutOurs { branches: 2, k: 3 },
        Preset::MulutOurs { branches: 1, k: 5 },
        Preset::MulutOurs { branches: 1, k: 7 },
        Preset::SpfLight { groups: 3, k: 3 },
    ][i % 5]
}

fn random_pipeline(seed: u64, preset: Preset, scale: usize) -> PipelineConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = PipelineConfig::from_preset(preset, scale).unwrap();
    for g in &mut cfg.groups {
        let (k, c) = (g.sample_size, g.out_channels);
        for b in &mut g.branches {
            if g.sampling == Sampling::Learned {
                let mut logits = || SamplerWeights::new(k, (0..k * k * QUAD).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
                b.sampler_current = logits();
                b.sampler_previous = logits();
                b.residual = ResidualWeights::new(std::array::from_fn(|_| rng.random())).unwrap();
            }
            b.lut = LutTable::new(c, (0..LATTICE_POINTS * c).map(|_| rng.random()).collect()).unwrap();
        }
    }
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn psnr_symmetric_and_capped(seed: u64, h in 8usize..24, w in 8usize..24, crop in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (plane(&mut rng, h, w), plane(&mut rng, h, w));
        prop_assert_eq!(psnr(&a, &b, crop).unwrap(), psnr(&b, &a, crop).unwrap());
        prop_assert_eq!(psnr(&a, &a, crop).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn ssim_of_self_is_one(seed: u64, h in 11usize..24, w in 11usize..24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = plane(&mut rng, h, w);
        prop_assert!((ssim(&a, &a, 0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn luma_in_studio_range(rgb in proptest::collection::vec(any::<u8>(), 3..=300)) {
        let n = rgb.len() / 3;
        let y = rgb_to_y(&rgb[..n * 3], 1, n).unwrap();
        prop_assert!(y.data().iter().all(|&v| (16..=235).contains(&v)));
    }

    #[test]
    fn lookup_is_continuous(seed: u64, x in proptest::array::uniform4(0.0f64..=254.75), d in 0usize..4, eps in 0.0f64..=0.25) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lut = LutTable::new(2, (0..LATTICE_POINTS * 2).map(|_| rng.random()).collect()).unwrap();
        let (lo, hi) = lut.entries().iter().fold((255u8, 0u8), |(a, b), &v| (a.min(v), b.max(v)));
        let mut y = x;
        y[d] += eps;
        let (mut a, mut b) = ([0.0; 2], [0.0; 2]);
        lut.lookup(x, &mut a).unwrap();
        lut.lookup(y, &mut b).unwrap();
        let bound = (hi - lo) as f64 * eps / 16.0 + 1.0;
        prop_assert!((a[0] - b[0]).abs() <= bound && (a[1] - b[1]).abs() <= bound);
    }

    #[test]
    fn output_is_scale_times_input(p in 0usize..5, scale in 1usize..=4, h in 1usize..12, w in 1usize..12) {
        let cfg = PipelineConfig::from_preset(preset(p), scale).unwrap();
        let x = Plane::from_fn(h, w, |r, c| (r * 31 + c * 17) as u8);
        let y = autolut::super_resolve(&x, &cfg, Exec::Parallel).unwrap();
        prop_assert_eq!((y.height(), y.width()), (scale * h, scale * w));
    }

    #[test]
    fn constant_in_constant_out(seed: u64, p in 0usize..5, v: u8, h in 1usize..10, w in 1usize..10) {
        let cfg = random_pipeline(seed, preset(p), 2);
        let y = autolut::super_resolve(&Plane::filled(h, w, v), &cfg, Exec::Parallel).unwrap();
        let first = y.data()[0];
        prop_assert!(y.data().iter().all(|&q| q == first));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn container_round_trip(seed: u64, p in 0usize..5, scale in 1usize..=4, ensemble: bool) {
        let mut cfg = random_pipeline(seed, preset(p), scale);
        cfg.ensemble = ensemble;
        let bytes = cfg.to_bytes();
        prop_assert_eq!(bytes.len(), cfg.byte_len());
        let back = PipelineConfig::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn worker_count_does_not_change_output(seed: u64, p in 0usize..5, threads in 2usize..6, h in 3usize..20, w in 3usize..20) {
        let cfg = random_pipeline(seed, preset(p), 3);
        let x = plane(&mut ChaCha8Rng::seed_from_u64(seed ^ 1), h, w);
        let one = autolut::super_resolve(&x, &cfg, Exec::Sequential).unwrap();
        prop_assert_eq!(&autolut::super_resolve(&x, &cfg, Exec::Threads(threads)).unwrap(), &one);
        prop_assert_eq!(&autolut::super_resolve(&x, &cfg, Exec::Parallel).unwrap(), &one);
    }

    #[test]
    fn ensemble_commutes_with_rotation(seed: u64, p in 0usize..5, turns in 1u32..4, h in 2usize..14, w in 2usize..14) {
        let cfg = random_pipeline(seed, preset(p), 2);
        let x = plane(&mut ChaCha8Rng::seed_from_u64(seed ^ 2), h, w);
        let a = autolut::super_resolve(&x.rotate90(turns), &cfg, Exec::Parallel).unwrap();
        let b = autolut::super_resolve(&x, &cfg, Exec::Parallel).unwrap().rotate90(turns);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn export_is_byte_identical_and_lattice_consistent(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = BackboneWeights::random(&[8, 8], 4, &mut rng).unwrap();
        let lut = export_lut(&net, Exec::Parallel).unwrap();
        prop_assert_eq!(lut.to_bytes(), export_lut(&net, Exec::Sequential).unwrap().to_bytes());
        let mut out = [0.0; 4];
        for _ in 0..200 {
            let i = rng.random_range(0..LATTICE_POINTS);
            let knots = lattice_knots(i);
            let quad = knots.map(|k| (16 * k).min(255) as f64);
            let want = forward_backbone(&net, quad).unwrap();
            for (c, &w) in want.iter().enumerate() {
                prop_assert!((lut.at(knots, c) as f64 - w).abs() <= 0.5);
            }
            if knots.iter().all(|&k| k < 16) {
                lut.lookup(quad, &mut out).unwrap();
                for (o, w) in out.iter().zip(&want) {
                    prop_assert!((o - w).abs() <= 0.5);
                }
            }
        }
    }

    #[test]
    fn checkpoint_export_is_deterministic(seed in 0u64..1000) {
        let topo = Preset::MulutOurs { branches: 1, k: 3 }.topology(2);
        let a = Checkpoint::initialize(topo.clone(), &[4], seed).unwrap();
        let b = Checkpoint::initialize(topo, &[4], seed).unwrap();
        let pa = autolut::export::export_pipeline(&a, Exec::Parallel).unwrap();
        let pb = autolut::export::export_pipeline(&b, Exec::Sequential).unwrap();
        prop_assert_eq!(pa.to_bytes(), pb.to_bytes());
    }
}
