//! The differentiable renderer against the plain-loop reference, over
//! random parameter maps, frame geometries, and sampling modes.

mod common;

use common::{random_case, render_f64};
use echofield_core::renderer::render_param_maps;

#[test]
fn renderer_matches_the_reference_on_random_frames() {
    let mut worst = 0.0f64;
    for case in 0..100 {
        let (maps, spec, config, seed) = random_case(case);
        let want = common::oracle_render(&maps, &spec, &config, seed, case);
        let got = render_f64(&maps, &spec, &config, seed, case);
        assert_eq!(want.len(), got.len());
        for (i, (a, b)) in got.iter().zip(&want).enumerate() {
            let err = (a - b).abs();
            worst = worst.max(err);
            assert!(
                err <= 1e-6,
                "case {case}, element {i}: {a} vs reference {b} (abs err {err:.3e})"
            );
        }
    }
    eprintln!("double-precision worst absolute error: {worst:.3e}");
}

#[test]
fn the_production_single_precision_path_stays_close() {
    let mut worst = 0.0f64;
    for case in 0..100 {
        let (maps, spec, config, seed) = random_case(case);
        let want = common::oracle_render(&maps, &spec, &config, seed, case);
        let rendered = render_param_maps(&maps, &spec, &config, seed, case).unwrap();
        for (a, b) in rendered.echo.data.iter().zip(&want) {
            let err = (*a as f64 - b).abs();
            worst = worst.max(err);
            assert!(err <= 1e-4, "case {case}: {a} vs reference {b}");
        }
    }
    eprintln!("single-precision worst absolute error: {worst:.3e}");
}
