use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DomainDataset, DomainTag};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShiftKind {
    /// Rotation about the image centre (nearest neighbour) or, for 2-D
    /// vectors, about the origin.
    Rotate { degrees: f64 },
    /// Whole-pixel translation with zero fill; plain offset for vectors.
    Translate { dx: f64, dy: f64 },
    /// Multiplies every image by its own RGB tint drawn from `[tint_min, 1]³`.
    /// Grayscale inputs become three-channel.
    ChannelColorize { tint_min: f64 },
    /// Adds a per-image, per-channel background level drawn from
    /// `[0, offset]` plus per-value Gaussian noise of deviation `sigma`,
    /// then clamps images to `[0, 1]`.
    BackgroundNoise { sigma: f64, offset: f64 },
    IntensityInvert,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub seed: u64,
}

impl ShiftSpec {
    pub fn new(kind: ShiftKind, seed: u64) -> Self {
        ShiftSpec { kind, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::contract(format!("invalid shift: {m}")));
        match self.kind {
            ShiftKind::Rotate { degrees } if !(degrees.abs() <= 180.0) => bad(format!("rotation {degrees}° outside ±180°")),
            ShiftKind::Translate { dx, dy } if !(dx.is_finite() && dy.is_finite()) => bad("non-finite translation".into()),
            ShiftKind::ChannelColorize { tint_min } if !(0.0..=1.0).contains(&tint_min) => {
                bad(format!("tint_min {tint_min} outside [0, 1]"))
            }
            ShiftKind::BackgroundNoise { sigma, offset } if !(0.0..=1.0).contains(&sigma) || !(0.0..=1.0).contains(&offset) => {
                bad(format!("noise sigma {sigma} / offset {offset} outside [0, 1]"))
            }
            _ => Ok(()),
        }
    }

    fn name(&self) -> String {
        format!("{:?}@{}", self.kind, self.seed)
    }
}

/// Label-preserving transform of a dataset's inputs; the result is tagged
/// as a target domain.
pub fn apply_shift(ds: &DomainDataset, spec: &ShiftSpec) -> Result<DomainDataset> {
    spec.validate()?;
    let image = ds.is_image();
    let vector2 = ds.sample_shape() == [2];
    let needs_image = |what: &str| Error::contract(format!("{what} requires an image dataset, got samples of {:?}", ds.sample_shape()));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let inputs = match spec.kind {
        ShiftKind::Rotate { degrees } if image => map_images(&ds.inputs, |img, h, w, c| rotate_image(img, h, w, c, degrees)),
        ShiftKind::Rotate { degrees } if vector2 => {
            let (s, co) = degrees.to_radians().sin_cos();
            map_points(&ds.inputs, |x, y| (co * x - s * y, s * x + co * y))
        }
        ShiftKind::Translate { dx, dy } if image => {
            let (dx, dy) = (dx.round() as i64, dy.round() as i64);
            map_images(&ds.inputs, |img, h, w, c| translate_image(img, h, w, c, dx, dy))
        }
        ShiftKind::Translate { dx, dy } if vector2 => map_points(&ds.inputs, |x, y| (x + dx, y + dy)),
        ShiftKind::Rotate { .. } | ShiftKind::Translate { .. } => {
            return Err(Error::contract(format!(
                "geometric shifts need images or 2-D points, got samples of {:?}",
                ds.sample_shape()
            )))
        }
        ShiftKind::ChannelColorize { tint_min } => {
            if !image {
                return Err(needs_image("channel_colorize"));
            }
            colorize(&ds.inputs, tint_min, &mut rng)?
        }
        ShiftKind::BackgroundNoise { sigma, offset } => background_noise(&ds.inputs, image, sigma, offset, &mut rng)?,
        ShiftKind::IntensityInvert => {
            if !image {
                return Err(needs_image("intensity_invert"));
            }
            ds.inputs.map(|v| 1.0 - v)
        }
    };
    DomainDataset::new(
        inputs,
        ds.labels.clone(),
        DomainTag::Target,
        format!("{} | {}", ds.provenance, spec.name()),
    )
}

fn map_points(t: &Tensor<f32>, f: impl Fn(f64, f64) -> (f64, f64)) -> Tensor<f32> {
    let mut out = t.clone();
    for p in out.data_mut().chunks_mut(2) {
        let (x, y) = f(p[0] as f64, p[1] as f64);
        p[0] = x as f32;
        p[1] = y as f32;
    }
    out
}

fn map_images(t: &Tensor<f32>, f: impl Fn(&[f32], usize, usize, usize) -> Vec<f32>) -> Tensor<f32> {
    let &[_, h, w, c] = t.dims() else { unreachable!("image tensor") };
    let data = t.data().chunks(h * w * c).flat_map(|img| f(img, h, w, c)).collect();
    Tensor::from_parts(t.shape().clone(), data)
}

/// Inverse-maps every output pixel to its nearest source pixel. Rotations
/// by multiples of 90° on square images are exact permutations.
fn rotate_image(img: &[f32], h: usize, w: usize, c: usize, degrees: f64) -> Vec<f32> {
    let (s, co) = degrees.to_radians().sin_cos();
    // snap so that quarter turns hit integer coordinates exactly
    let snap = |v: f64| if v.abs() < 1e-12 { 0.0 } else { v };
    let (s, co) = (snap(s), snap(co));
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; img.len()];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sx = (co * dx + s * dy + cx).round();
            let sy = (-s * dx + co * dy + cy).round();
            if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
                continue;
            }
            let src = (sy as usize * w + sx as usize) * c;
            let dst = (y * w + x) * c;
            out[dst..dst + c].copy_from_slice(&img[src..src + c]);
        }
    }
    out
}

fn translate_image(img: &[f32], h: usize, w: usize, c: usize, dx: i64, dy: i64) -> Vec<f32> {
    let mut out = vec![0.0; img.len()];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let (sy, sx) = (y - dy, x - dx);
            if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                continue;
            }
            let src = (sy as usize * w + sx as usize) * c;
            let dst = (y as usize * w + x as usize) * c;
            out[dst..dst + c].copy_from_slice(&img[src..src + c]);
        }
    }
    out
}

/// `out = gray ⊗ tint`. A three-channel input is multiplied channel-wise.
fn colorize(t: &Tensor<f32>, tint_min: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    let &[n, h, w, c] = t.dims() else { unreachable!("image tensor") };
    if c != 1 && c != 3 {
        return Err(Error::contract(format!("channel_colorize needs 1 or 3 channels, got {c}")));
    }
    let mut data = Vec::with_capacity(n * h * w * 3);
    for img in t.data().chunks(h * w * c) {
        let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(tint_min..=1.0) as f32);
        for px in img.chunks(c) {
            for k in 0..3 {
                data.push(px[if c == 1 { 0 } else { k }] * tint[k]);
            }
        }
    }
    Tensor::new(vec![n, h, w, 3], data)
}

fn background_noise(t: &Tensor<f32>, image: bool, sigma: f64, offset: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    if sigma == 0.0 && offset == 0.0 {
        return Ok(t.clone());
    }
    let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let n = t.dims()[0];
    let c = if image { t.dims()[3] } else { t.numel() / n };
    let mut out = t.clone();
    for sample in out.data_mut().chunks_mut(t.numel() / n) {
        let base: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..=offset)).collect();
        for (i, v) in sample.iter_mut().enumerate() {
            let noisy = *v as f64 + base[i % c] + if sigma > 0.0 { normal.sample(rng) } else { 0.0 };
            *v = if image { noisy.clamp(0.0, 1.0) } else { noisy } as f32;
        }
    }
    Ok(out)
}
