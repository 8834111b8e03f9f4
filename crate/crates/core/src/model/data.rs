//! Seeded synthetic shapes: filled squares (class 0) and discs (class 1)
//! on a dark background.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::config::DatasetConfig;
use crate::tensor::Tensor4;

pub const SQUARE: usize = 0;
pub const CIRCLE: usize = 1;
pub const CLASS_NAMES: [&str; 2] = ["square", "circle"];

/// Ground-truth box, normalized center format.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtBox {
    pub class: usize,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl GtBox {
    pub fn bbox(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Shape `(1, 1, size, size)`, values in `[0, 1]`.
    pub image: Tensor4,
    pub boxes: Vec<GtBox>,
}

/// Draws one shape of `class` with top-left pixel `(x0, y0)` and side `size`.
pub fn draw_shape(image: &mut Tensor4, class: usize, x0: usize, y0: usize, size: usize, intensity: f64) {
    let r = size as f64 / 2.0;
    let (cx, cy) = (x0 as f64 + r, y0 as f64 + r);
    for y in y0..y0 + size {
        for x in x0..x0 + size {
            let inside = class == SQUARE || {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                dx * dx + dy * dy <= r * r
            };
            if inside {
                image[(0, 0, y, x)] = intensity;
            }
        }
    }
}

/// One image with 1..=max_objects non-overlapping shapes (one pixel gap).
pub fn generate_sample<R: Rng>(rng: &mut R, cfg: &DatasetConfig) -> Sample {
    let n = cfg.image_size;
    let mut image = Tensor4::zeros((1, 1, n, n));
    let want = rng.gen_range(1..=cfg.max_objects);
    let mut placed: Vec<(usize, usize, usize)> = Vec::new();
    let mut boxes = Vec::new();
    for _ in 0..100 {
        if placed.len() == want {
            break;
        }
        let size = rng.gen_range(cfg.min_size..=cfg.max_size);
        let x0 = rng.gen_range(0..=n - size);
        let y0 = rng.gen_range(0..=n - size);
        let clash = placed
            .iter()
            .any(|&(px, py, ps)| x0 <= px + ps && px <= x0 + size && y0 <= py + ps && py <= y0 + size);
        if clash {
            continue;
        }
        let class = rng.gen_range(0..2);
        let intensity = rng.gen_range(0.5..=1.0);
        draw_shape(&mut image, class, x0, y0, size, intensity);
        placed.push((x0, y0, size));
        let s = size as f64 / n as f64;
        boxes.push(GtBox {
            class,
            x: x0 as f64 / n as f64 + s / 2.0,
            y: y0 as f64 / n as f64 + s / 2.0,
            w: s,
            h: s,
        });
    }
    if cfg.noise > 0.0 {
        for v in image.data_mut() {
            *v = (*v + rng.gen_range(-cfg.noise..=cfg.noise)).clamp(0.0, 1.0);
        }
    }
    Sample { image, boxes }
}

pub fn generate(cfg: &DatasetConfig, seed: u64, count: usize) -> Result<Vec<Sample>> {
    if cfg.min_size == 0 || cfg.min_size > cfg.max_size || cfg.max_size >= cfg.image_size {
        return Err(Error::Config("dataset sizes must satisfy 0 < min_size <= max_size < image_size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count).map(|_| generate_sample(&mut rng, cfg)).collect())
}

/// Training split (dataset seed) and held-out split (a derived seed).
pub fn splits(cfg: &DatasetConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let train = generate(cfg, cfg.seed, cfg.train_count)?;
    let val = generate(cfg, cfg.seed ^ 0x5eed_0f_7e57, cfg.val_count)?;
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> DatasetConfig {
        DatasetConfig {
            seed: 3,
            train_count: 20,
            val_count: 5,
            image_size: 64,
            min_size: 8,
            max_size: 20,
            max_objects: 3,
            noise: 0.05,
        }
    }

    #[test]
    fn boxes_are_valid_and_disjoint() {
        for s in generate(&cfg(), 1, 50).unwrap() {
            assert!((1..=3).contains(&s.boxes.len()));
            for (i, a) in s.boxes.iter().enumerate() {
                assert!(a.x - a.w / 2.0 >= 0.0 && a.x + a.w / 2.0 <= 1.0);
                for b in &s.boxes[i + 1..] {
                    assert_eq!(crate::model::decode::iou(a.bbox(), b.bbox()), 0.0);
                }
            }
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn seeded_and_reproducible() {
        assert_eq!(generate(&cfg(), 9, 4).unwrap(), generate(&cfg(), 9, 4).unwrap());
        assert_ne!(generate(&cfg(), 9, 4).unwrap(), generate(&cfg(), 10, 4).unwrap());
    }

    #[test]
    fn disc_is_smaller_than_square() {
        let mut sq = Tensor4::zeros((1, 1, 16, 16));
        let mut ci = sq.clone();
        draw_shape(&mut sq, SQUARE, 2, 2, 10, 1.0);
        draw_shape(&mut ci, CIRCLE, 2, 2, 10, 1.0);
        assert_eq!(sq.sum(), 100.0);
        let area = ci.sum();
        assert!((area - std::f64::consts::PI * 25.0).abs() < 8.0, "{area}");
    }
}
