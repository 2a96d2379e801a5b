mod oracles;

use blockfield::eval::{psnr, psnr_from_mse, ssim};
use blockfield::image::ImageBuffer;
use oracles::*;

#[test]
fn psnr_closed_forms() {
    assert!((psnr_from_mse(0.01) - 20.0).abs() <= 1e-9);
    let a = ImageBuffer::filled(8, 8, [0.5; 3]);
    let b = ImageBuffer::filled(8, 8, [0.0; 3]);
    assert!((psnr(&a, &b).unwrap() - 6.020_599_913_279_624).abs() <= 1e-9);
    // A constant offset of 0.1 on every channel is an MSE of 0.01.
    let c = ImageBuffer::filled(8, 8, [0.6; 3]);
    assert!((psnr(&c, &a).unwrap() - 20.0).abs() <= 1e-9);
}

#[test]
fn ssim_matches_sliding_window_oracle() {
    let mut r = rng(51);
    for _ in 0..3 {
        let a = random_image(&mut r, 32, 32);
        let b = random_image(&mut r, 32, 32);
        assert!((ssim(&a, &b).unwrap() - naive_ssim(&a, &b)).abs() <= 1e-6);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }
}

#[test]
fn psnr_falls_as_noise_grows() {
    let mut r = rng(52);
    let base = random_image(&mut r, 16, 16);
    let noise = random_image(&mut r, 16, 16);
    let mut last = f64::INFINITY;
    for amp in [0.01, 0.02, 0.05, 0.1, 0.2] {
        let noisy = ImageBuffer::from_fn(16, 16, |x, y| {
            let (p, n) = (base.get(x, y), noise.get(x, y));
            [0, 1, 2].map(|k| p[k] + amp * (n[k] - 0.5))
        })
        .unwrap();
        let v = psnr(&noisy, &base).unwrap();
        assert!(v < last);
        last = v;
    }
}
