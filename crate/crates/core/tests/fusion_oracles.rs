mod oracles;

use blockfield::fusion::{global_guided_fuse, idw_blend, FusionInput};
use blockfield::Vec3;
use oracles::*;
use rand::Rng;

#[test]
fn closed_form_idw_and_brute_force_guided_fusion() {
    let c = fusion_check(41);
    assert!(c.idw_err <= 1e-12, "IDW error {:e}", c.idw_err);
    assert_eq!(c.guided_mismatches, 0, "of {} pixels", c.pixels);
}

#[test]
fn idw_is_convex_and_scale_invariant() {
    let mut r = rng(42);
    for _ in 0..20 {
        let k = r.gen_range(1..5);
        let blocks: Vec<_> = (0..k).map(|_| random_image(&mut r, 8, 8)).collect();
        let cents: Vec<Vec3> =
            (0..k).map(|_| Vec3::new(r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0), 1.0)).collect();
        let view = Vec3::new(r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0), 0.0);
        let gamma = r.gen_range(0.5..3.0);
        let input = FusionInput { block_images: blocks.clone(), block_centroids: cents.clone(), global_image: None, view_center: view };
        let out = idw_blend(&input, gamma).unwrap();
        for (p, o) in out.pixels().iter().enumerate() {
            for c in 0..3 {
                let lo = blocks.iter().map(|b| b.pixels()[p][c]).fold(f64::INFINITY, f64::min);
                let hi = blocks.iter().map(|b| b.pixels()[p][c]).fold(f64::NEG_INFINITY, f64::max);
                assert!(o[c] >= lo - 1e-12 && o[c] <= hi + 1e-12);
            }
        }
        let scaled = FusionInput {
            block_centroids: cents.iter().map(|c| *c * 7.0).collect(),
            view_center: view * 7.0,
            ..input
        };
        let out2 = idw_blend(&scaled, gamma).unwrap();
        for (a, b) in out.pixels().iter().zip(out2.pixels()) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn guided_output_is_a_block_pixel_no_farther_than_any_block() {
    let mut r = rng(43);
    let blocks: Vec<_> = (0..3).map(|_| random_image(&mut r, 12, 12)).collect();
    let global = random_image(&mut r, 12, 12);
    let input = FusionInput {
        block_images: blocks.clone(),
        block_centroids: vec![Vec3::ZERO; 3],
        global_image: Some(global.clone()),
        view_center: Vec3::ZERO,
    };
    let (out, _) = global_guided_fuse(&input).unwrap();
    let dist = |a: [f64; 3], b: [f64; 3]| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>();
    for (p, o) in out.pixels().iter().enumerate() {
        assert!(blocks.iter().any(|b| b.pixels()[p] == *o));
        let g = global.pixels()[p];
        assert!(blocks.iter().all(|b| dist(*o, g) <= dist(b.pixels()[p], g)));
    }
}
