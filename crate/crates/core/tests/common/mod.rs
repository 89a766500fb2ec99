#![allow(dead_code)]

use nntc_core::image::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0)]
}

/// A 32x32 RGB scene: a linear two-color gradient with one to three flat
/// discs or boxes on top and mild pixel noise.
pub fn synthetic_image(rng: &mut impl Rng) -> Image {
    let (c0, c1) = (color(rng), color(rng));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let shapes: Vec<(bool, f64, f64, f64, [f64; 3])> = (0..rng.gen_range(1..4))
        .map(|_| (rng.gen(), rng.gen_range(0.0..32.0), rng.gen_range(0.0..32.0), rng.gen_range(3.0..12.0), color(rng)))
        .collect();
    let noise: Vec<f64> = (0..32 * 32 * 3).map(|_| rng.gen_range(-6.0..6.0)).collect();
    Image::from_fn(32, 32, 3, |x, y, c| {
        let t = ((x as f64 - 16.0) * angle.cos() + (y as f64 - 16.0) * angle.sin()) / 45.0 + 0.5;
        let mut v = c0[c] * (1.0 - t) + c1[c] * t;
        for &(disc, cx, cy, r, col) in &shapes {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let inside = if disc { dx * dx + dy * dy < r * r } else { dx.abs() < r && dy.abs() < r * 0.6 };
            if inside {
                v = col[c];
            }
        }
        (v + noise[(y * 32 + x) * 3 + c]).clamp(0.0, 255.0) as u8
    })
}

pub fn synthetic_corpus(n: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| synthetic_image(&mut rng)).collect()
}

pub fn random_image(rng: &mut impl Rng, width: usize, height: usize, channels: usize) -> Image {
    Image::from_fn(width, height, channels, |_, _, _| rng.gen())
}
