use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DomainDataset, DomainTag};
use crate::error::{Error, Result};
use crate::objectives::OneHotLabels;
use crate::tensor::Tensor;

/// Interleaved half-circles: class 0 on the upper unit arc about the
/// origin, class 1 on the lower unit arc about `(1, 0.5)`.
pub fn gen_two_moons(n: usize, noise_sigma: f64, seed: u64) -> Result<DomainDataset> {
    if n < 2 {
        return Err(Error::contract(format!("two_moons needs n ≥ 2, got {n}")));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::contract(format!("noise_sigma = {noise_sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut data = Vec::with_capacity(2 * n);
    let mut classes = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let t = rng.random_range(0.0..PI);
        let (x, y) = match class {
            0 => (t.cos(), t.sin()),
            _ => (1.0 - t.cos(), 0.5 - t.sin()),
        };
        let (dx, dy) = if noise_sigma > 0.0 {
            (noise.sample(&mut rng), noise.sample(&mut rng))
        } else {
            (0.0, 0.0)
        };
        data.push((x + dx) as f32);
        data.push((y + dy) as f32);
        classes.push(class);
    }
    DomainDataset::new(
        Tensor::new(vec![n, 2], data)?,
        Some(OneHotLabels::from_indices(classes, 2)?),
        DomainTag::Source,
        format!("two_moons(n={n}, sigma={noise_sigma}, seed={seed})"),
    )
}

/// 5×7 bitmap digits, one row per string, `#` marks a lit cell.
pub const GLYPH_FONT: [[&str; 7]; 10] = [
    [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
    ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
    [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
    ["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."],
    ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
    ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
    ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."],
    ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
    [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
    [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."],
];

const SUPERSAMPLE: usize = 4;

fn lit(digit: usize, col: f64, row: f64) -> bool {
    if col < 0.0 || row < 0.0 || col >= 5.0 || row >= 7.0 {
        return false;
    }
    GLYPH_FONT[digit][row as usize].as_bytes()[col as usize] == b'#'
}

/// Renders one glyph with cell size `cell`, top-left corner `(ox, oy)`,
/// horizontal shear `shear` and stroke intensity `ink`.
fn render(digit: usize, size: usize, cell: f64, ox: f64, oy: f64, shear: f64, ink: f64, out: &mut [f32]) {
    let step = 1.0 / SUPERSAMPLE as f64;
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let py = y as f64 + (sy as f64 + 0.5) * step;
                    let px = x as f64 + (sx as f64 + 0.5) * step;
                    let row = (py - oy) / cell;
                    let col = (px - ox) / cell + shear * (row - 3.5);
                    hits += lit(digit, col, row) as usize;
                }
            }
            let cover = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            out[y * size + x] = (ink * cover) as f32;
        }
    }
}

/// Procedural grayscale digit images (`n × size × size × 1`, values in
/// `[0, 1]`) with random scale, position, slant and stroke intensity.
/// Class `i % classes` is assigned to sample `i`.
pub fn gen_glyph_digits(n: usize, classes: usize, image_size: usize, seed: u64) -> Result<DomainDataset> {
    if !(2..=10).contains(&classes) {
        return Err(Error::contract(format!("glyph digits support 2..=10 classes, got {classes}")));
    }
    if image_size == 0 || !image_size.is_multiple_of(16) {
        return Err(Error::contract(format!("image_size {image_size} is not a multiple of 16")));
    }
    if n == 0 {
        return Err(Error::contract("glyph digits need n ≥ 1"));
    }
    let unit = image_size as f64 / 16.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = image_size * image_size;
    let mut data = vec![0.0f32; n * px];
    let mut labels = Vec::with_capacity(n);
    for (i, img) in data.chunks_mut(px).enumerate() {
        let digit = i % classes;
        let cell = rng.random_range(1.45..1.95) * unit;
        let shear: f64 = rng.random_range(-0.15..0.15);
        let (w, h) = (5.0 * cell, 7.0 * cell);
        let lean = shear.abs() * 3.5 * cell;
        let slack_x = (image_size as f64 - w - 2.0 * lean).max(0.0);
        let ox = lean + rng.random_range(0.0..=slack_x);
        let oy = rng.random_range(0.0..=(image_size as f64 - h).max(0.0));
        let ink = rng.random_range(0.7..1.0);
        render(digit, image_size, cell, ox, oy, shear, ink, img);
        labels.push(digit);
    }
    DomainDataset::new(
        Tensor::new(vec![n, image_size, image_size, 1], data)?,
        Some(OneHotLabels::from_indices(labels, classes)?),
        DomainTag::Source,
        format!("glyph_digits(n={n}, classes={classes}, size={image_size}, seed={seed})"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_moons_lie_on_unit_arcs() {
        let ds = gen_two_moons(101, 0.0, 4).unwrap();
        let labels = ds.labels().unwrap().classes().to_vec();
        for (p, &c) in ds.inputs.data().chunks(2).zip(&labels) {
            let (cx, cy) = if c == 0 { (0.0, 0.0) } else { (1.0, 0.5) };
            let (x, y) = (p[0] as f64 - cx, p[1] as f64 - cy);
            // values are stored at single precision
            assert!(((x * x + y * y).sqrt() - 1.0).abs() < 1e-6);
        }
        let ones = labels.iter().filter(|&&c| c == 1).count();
        assert!((101 - 2 * ones as i64).abs() <= 1);
        assert_eq!(ds, gen_two_moons(101, 0.0, 4).unwrap());
    }

    #[test]
    fn glyphs_are_balanced_and_in_range() {
        let ds = gen_glyph_digits(53, 10, 16, 2).unwrap();
        assert_eq!(ds.sample_shape(), &[16, 16, 1]);
        assert!(ds.inputs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let mut counts = [0usize; 10];
        for &c in ds.labels().unwrap().classes() {
            counts[c] += 1;
        }
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        assert_eq!(ds, gen_glyph_digits(53, 10, 16, 2).unwrap());
    }

    #[test]
    fn every_glyph_has_ink_inside_the_frame() {
        let ds = gen_glyph_digits(200, 10, 32, 5).unwrap();
        for img in ds.inputs.data().chunks(32 * 32) {
            let ink: f32 = img.iter().sum();
            assert!(ink > 10.0, "glyph almost empty: {ink}");
        }
    }

    #[test]
    fn font_rows_are_five_wide() {
        assert!(GLYPH_FONT.iter().flatten().all(|r| r.len() == 5));
    }

    #[test]
    fn size_must_be_multiple_of_sixteen() {
        assert!(gen_glyph_digits(4, 10, 20, 0).is_err());
    }
}
