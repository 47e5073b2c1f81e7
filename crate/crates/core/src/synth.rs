//! Procedural source/target pairs: flat-colored ellipse and rectangle on a
//! background. Source and target share the layout family but draw colors
//! and positions independently, so the pair is unaligned by construction.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{derive_seed, seeded_rng};

const PALETTE: [[f64; 3]; 8] = [
    [0.90, 0.20, 0.20],
    [0.20, 0.70, 0.30],
    [0.20, 0.30, 0.85],
    [0.95, 0.85, 0.25],
    [0.60, 0.25, 0.70],
    [0.15, 0.75, 0.80],
    [0.95, 0.55, 0.15],
    [0.35, 0.35, 0.35],
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub center_y: f64,
    pub center_x: f64,
    pub radius_y: f64,
    pub radius_x: f64,
    pub color: [f64; 3],
}

impl Ellipse {
    /// Whether the center of pixel `(y, x)` lies inside.
    pub fn covers(&self, y: usize, x: usize) -> bool {
        let dy = (y as f64 + 0.5 - self.center_y) / self.radius_y;
        let dx = (x as f64 + 0.5 - self.center_x) / self.radius_x;
        dy * dy + dx * dx <= 1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub color: [f64; 3],
}

impl Rect {
    pub fn covers(&self, y: usize, x: usize) -> bool {
        (self.top..self.top + self.height).contains(&y) && (self.left..self.left + self.width).contains(&x)
    }
}

/// Layout parameters of one synthetic image. The rectangle is drawn over
/// the ellipse.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneLayout {
    pub size: usize,
    pub background: [f64; 3],
    pub ellipse: Ellipse,
    pub rect: Rect,
}

impl SceneLayout {
    pub fn from_seed(seed: u64, size: usize) -> Result<Self> {
        if size < 4 {
            return Err(Error::invalid("SceneLayout", format!("size must be >= 4, got {size}")));
        }
        let mut rng = seeded_rng(seed);
        let mut colors = PALETTE;
        colors.shuffle(&mut rng);
        let s = size as f64;
        let ellipse = Ellipse {
            center_y: rng.random_range(0.3..0.7) * s,
            center_x: rng.random_range(0.3..0.7) * s,
            radius_y: rng.random_range(0.15..0.35) * s,
            radius_x: rng.random_range(0.15..0.35) * s,
            color: colors[1],
        };
        let height = rng.random_range(size / 5..=size / 2);
        let width = rng.random_range(size / 5..=size / 2);
        let rect = Rect {
            top: rng.random_range(0..=size - height),
            left: rng.random_range(0..=size - width),
            height,
            width,
            color: colors[2],
        };
        Ok(Self {
            size,
            background: colors[0],
            ellipse,
            rect,
        })
    }

    pub fn render(&self) -> Image {
        let n = self.size;
        let mut data = Vec::with_capacity(n * n * 3);
        for y in 0..n {
            for x in 0..n {
                let c = if self.rect.covers(y, x) {
                    self.rect.color
                } else if self.ellipse.covers(y, x) {
                    self.ellipse.color
                } else {
                    self.background
                };
                data.extend_from_slice(&c);
            }
        }
        Image::new(n, n, 3, data).expect("palette colors lie in [0, 1]")
    }
}

const SOURCE_TAG: u64 = 1;
const TARGET_TAG: u64 = 2;

/// Layouts of the source and target for `seed`.
pub fn pair_layouts(seed: u64, size: usize) -> Result<(SceneLayout, SceneLayout)> {
    Ok((
        SceneLayout::from_seed(derive_seed(seed, SOURCE_TAG), size)?,
        SceneLayout::from_seed(derive_seed(seed, TARGET_TAG), size)?,
    ))
}

pub fn make_synthetic_pair(seed: u64, size: usize) -> Result<(Image, Image)> {
    let (s, t) = pair_layouts(seed, size)?;
    Ok((s.render(), t.render()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_seed_dependent() {
        assert_eq!(make_synthetic_pair(3, 16).unwrap(), make_synthetic_pair(3, 16).unwrap());
        assert_ne!(pair_layouts(1, 16).unwrap(), pair_layouts(2, 16).unwrap());
        let (s, t) = pair_layouts(1, 16).unwrap();
        assert_ne!(s, t);
    }

    #[test]
    fn rectangle_stays_in_bounds() {
        for seed in 0..50 {
            let (s, _) = pair_layouts(seed, 16).unwrap();
            assert!(s.rect.top + s.rect.height <= 16 && s.rect.left + s.rect.width <= 16);
        }
    }
}
