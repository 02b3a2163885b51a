//! Bundled synthetic dataset: low-contrast colored shapes on shaded backgrounds.
//!
//! Ten classes = five shapes x two color families. Each image is drawn from
//! its own RNG stream keyed by `(seed, index)`, so a prefix of a larger set
//! equals the smaller set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::Image;

pub const NUM_CLASSES: usize = 10;
pub const SIDE: u32 = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub image: Image,
    pub label: u32,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
}

const SHAPES: [Shape; 5] = [Shape::Disk, Shape::Square, Shape::Triangle, Shape::Ring, Shape::Cross];
const PALETTE: [[f64; 3]; 2] = [[0.85, 0.25, 0.15], [0.15, 0.4, 0.85]];
/// How far shape colors sit from the background. Low contrast keeps the
/// classifier attackable inside an 8/255 budget.
const CONTRAST: f64 = 0.085;
const COLOR_JITTER: f64 = 0.03;
const CENTER_JITTER: f64 = 2.0;
const MAX_TILT_DEG: f64 = 8.0;

fn inside(shape: Shape, u: f64, v: f64, s: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    match shape {
        Shape::Disk => r <= s,
        Shape::Square => u.abs() <= 0.8 * s && v.abs() <= 0.8 * s,
        Shape::Triangle => v >= -s && v <= 0.6 * s && u.abs() <= (v + s) / 1.6,
        Shape::Ring => (0.55 * s..=s).contains(&r),
        Shape::Cross => {
            (u.abs() <= 0.3 * s && v.abs() <= s) || (v.abs() <= 0.3 * s && u.abs() <= s)
        }
    }
}

/// Draws image `index` of the stream `seed`. The label is `index % 10`.
pub fn render(seed: u64, index: u64) -> LabeledImage {
    let label = (index % NUM_CLASSES as u64) as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);

    let shape = SHAPES[label as usize % 5];
    let base = PALETTE[label as usize / 5];
    let bg = rng.random_range(0.25..0.55);
    let color: Vec<f64> = base
        .iter()
        .map(|c| (bg + CONTRAST * (c - 0.5) * 2.0 + rng.random_range(-COLOR_JITTER..COLOR_JITTER)).clamp(0.0, 1.0))
        .collect();
    let grad = [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)];
    let half = f64::from(SIDE - 1) / 2.0;
    let cx = half + rng.random_range(-CENTER_JITTER..CENTER_JITTER);
    let cy = half + rng.random_range(-CENTER_JITTER..CENTER_JITTER);
    let size = rng.random_range(8.0..11.0);
    let angle: f64 = rng.random_range(-MAX_TILT_DEG..MAX_TILT_DEG).to_radians();
    let (sin, cos) = angle.sin_cos();

    let mut data = Vec::with_capacity((SIDE * SIDE * 3) as usize);
    for y in 0..SIDE {
        for x in 0..SIDE {
            let dx = f64::from(x) - cx;
            let dy = f64::from(y) - cy;
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            let shade = bg + grad[0] * (f64::from(x) - half) / half + grad[1] * (f64::from(y) - half) / half;
            let hit = inside(shape, u, v, size);
            for c in color.iter() {
                let level = if hit { *c } else { shade };
                data.push(level.clamp(0.0, 1.0));
            }
        }
    }
    LabeledImage {
        id: format!("synth-{seed}-{index}"),
        image: Image::new(SIDE, SIDE, data).expect("synthetic image is valid"),
        label,
    }
}

/// `count` images starting at `offset` in stream `seed`.
pub fn generate(seed: u64, offset: u64, count: usize) -> Vec<LabeledImage> {
    (offset..offset + count as u64).map(|i| render(seed, i)).collect()
}
