//! Bicubic resampling against Pillow's float-mode resize (fixture generated
//! by `fixtures/gen_pillow_bicubic.py`). Pillow renormalizes truncated
//! kernels at the border instead of clamping coordinates, so only samples
//! whose taps stay inside the image are compared.

use autolut::image::{resize, Kernel, Plane};
use serde::Deserialize;

#[derive(Deserialize)]
struct Case {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct Fixture {
    height: usize,
    width: usize,
    cases: Vec<Case>,
}

fn pattern(r: usize, c: usize) -> u8 {
    ((r * 37 + c * 91 + (r * c) % 23 + (r / 5) * 11) % 256) as u8
}

fn interior(o: usize, in_len: usize, out_len: usize) -> bool {
    let scale = out_len as f64 / in_len as f64;
    let support = if scale < 1.0 { 2.0 / scale } else { 2.0 };
    let center = (o as f64 + 0.5) / scale - 0.5;
    center - support >= 0.0 && center + support <= (in_len - 1) as f64
}

#[test]
fn bicubic_matches_pillow_in_the_interior() {
    let fx: Fixture = serde_json::from_str(include_str!("fixtures/pillow_bicubic.json")).unwrap();
    let src = Plane::from_fn(fx.height, fx.width, pattern);
    for case in &fx.cases {
        let ours = resize(&src, case.height, case.width, Kernel::Bicubic).unwrap();
        let mut compared = 0;
        for r in (0..case.height).filter(|&r| interior(r, fx.height, case.height)) {
            for c in (0..case.width).filter(|&c| interior(c, fx.width, case.width)) {
                let reference = case.data[r * case.width + c].clamp(0.0, 255.0);
                let got = ours.get(r, c) as f64;
                assert!(
                    (got - reference).abs() <= 0.5 + 1e-3,
                    "{}x{} at ({r}, {c}): {got} vs {reference}",
                    case.height,
                    case.width
                );
                compared += 1;
            }
        }
        assert!(compared > 0, "no interior samples for {}x{}", case.height, case.width);
    }
}
