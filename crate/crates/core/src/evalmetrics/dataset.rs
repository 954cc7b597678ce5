//! "Textured shapes": a seeded 4-class toy set. Each image holds one object
//! filled with a high-frequency stripe texture over a noisy background; the
//! class is the object's outline.

use crate::numerics::{tag, RngStream, Scalar, Tensor};

pub const SHAPE_CLASSES: [&str; 4] = ["disk", "square", "triangle", "cross"];

#[derive(Clone, Debug)]
pub struct LabeledSet<T> {
    /// `[H, W, C]` images in `[-1, 1]`.
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
}

impl<T> LabeledSet<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn inside(class: usize, dx: f64, dy: f64, r: f64) -> bool {
    match class {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
        // upward triangle with apex at -r and base at +0.6 r
        2 => dy >= -r && dy <= 0.6 * r && dx.abs() <= (dy + r) * 0.6,
        _ => (dx.abs() <= 0.3 * r && dy.abs() <= r) || (dy.abs() <= 0.3 * r && dx.abs() <= r),
    }
}

/// One image of the given class.
pub fn textured_shape<T: Scalar>(class: usize, size: usize, channels: usize, rng: &mut RngStream) -> Tensor<T> {
    let s = size as f64;
    let r = s * (0.22 + 0.1 * rng.uniform());
    let cx = r + (s - 2.0 * r) * rng.uniform();
    let cy = r + (s - 2.0 * r) * rng.uniform();
    let theta = std::f64::consts::PI * rng.uniform();
    let freq = 0.3 + 0.15 * rng.uniform();
    let phase = std::f64::consts::TAU * rng.uniform();
    let fg: Vec<f64> = (0..channels).map(|_| 0.2 + 0.6 * rng.uniform()).collect();
    let bg: Vec<f64> = (0..channels).map(|_| -0.6 + 0.4 * rng.uniform()).collect();
    let mut data = Vec::with_capacity(size * size * channels);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let stripe = (std::f64::consts::TAU * freq * (dx * theta.cos() + dy * theta.sin()) + phase).sin();
            let obj = inside(class, dx, dy, r);
            for c in 0..channels {
                let v = if obj { fg[c] * stripe } else { bg[c] + 0.25 * rng.normal() };
                data.push(T::cast(v.clamp(-1.0, 1.0)));
            }
        }
    }
    Tensor::new(vec![size, size, channels], data).expect("sized above")
}

/// `n` images with balanced labels `i % 4`, reproducible from `seed`.
pub fn textured_shapes<T: Scalar>(n: usize, size: usize, channels: usize, seed: u64) -> LabeledSet<T> {
    let root = RngStream::new(seed).derive(&[tag("textured-shapes")]);
    let labels: Vec<usize> = (0..n).map(|i| i % SHAPE_CLASSES.len()).collect();
    let images = labels
        .iter()
        .enumerate()
        .map(|(i, &c)| textured_shape(c, size, channels, &mut root.derive(&[i as u64])))
        .collect();
    LabeledSet { images, labels }
}
