use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::post::BBox;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Disc,
    Box,
    Bottle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductSprite {
    pub class_id: usize,
    /// Seeds the palette and stripe pattern; equal to the class id.
    pub texture_seed: u64,
    pub base_size: usize,
    pub family: ShapeFamily,
}

impl ProductSprite {
    /// Family cycles with the class id; size varies by class within
    /// 18-30% of the image side.
    pub fn for_class(class_id: usize, image_size: usize) -> Self {
        let family = [ShapeFamily::Disc, ShapeFamily::Box, ShapeFamily::Bottle][class_id % 3];
        let frac = 0.18 + 0.03 * ((class_id * 7) % 5) as f64;
        ProductSprite {
            class_id,
            texture_seed: class_id as u64,
            base_size: ((image_size as f64 * frac).round() as usize).max(4),
            family,
        }
    }

    pub fn base_color(&self) -> [u8; 3] {
        let hue = (self.texture_seed as f64 * 0.618_033_988_75).fract();
        hsv(hue, 0.85, 0.92)
    }

    /// Full-opacity raster at `scale`, rotated by `quarter_turns * 90` degrees.
    pub fn raster(&self, scale: f64, quarter_turns: u8) -> Raster {
        let s = ((self.base_size as f64 * scale).round() as usize).max(3);
        let (w, h) = match self.family {
            ShapeFamily::Disc => (s, s),
            ShapeFamily::Box => (((s as f64) * 0.8).round().max(2.0) as usize, s),
            ShapeFamily::Bottle => (((s as f64) * 0.5).round().max(2.0) as usize, s),
        };
        let base = self.base_color();
        let dark = base.map(|c| (c as f64 * 0.7) as u8);
        let period = 3 + (self.texture_seed % 4) as usize;
        let orient = (self.texture_seed / 4) % 3;
        let mut px = vec![None; w * h];
        for y in 0..h {
            for x in 0..w {
                let inside = match self.family {
                    ShapeFamily::Disc => {
                        let r = s as f64 / 2.0;
                        let (dx, dy) = (x as f64 + 0.5 - r, y as f64 + 0.5 - r);
                        dx * dx + dy * dy <= r * r
                    }
                    ShapeFamily::Box => true,
                    ShapeFamily::Bottle => {
                        let neck = (h as f64 * 0.3) as usize;
                        let half = w / 4;
                        y >= neck || (x >= half && x < w - half)
                    }
                };
                if inside {
                    let band = match orient {
                        0 => y,
                        1 => x,
                        _ => x + y,
                    };
                    px[y * w + x] = Some(if (band / period).is_multiple_of(2) {
                        base
                    } else {
                        dark
                    });
                }
            }
        }
        let mut r = Raster {
            width: w,
            height: h,
            pixels: px,
        };
        for _ in 0..quarter_turns % 4 {
            r = r.rotate90();
        }
        r
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    let (r, g, b) = match i as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r, g, b].map(|c| (c * 255.0).round() as u8)
}

/// Sprite pixels; `None` is transparent.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Option<[u8; 3]>>,
}

impl Raster {
    /// Clockwise quarter turn.
    pub fn rotate90(&self) -> Raster {
        let (w, h) = (self.height, self.width);
        let mut px = vec![None; w * h];
        for y in 0..self.height {
            for x in 0..self.width {
                px[x * w + (w - 1 - y)] = self.pixels[y * self.width + x];
            }
        }
        Raster {
            width: w,
            height: h,
            pixels: px,
        }
    }
}

/// Counter texture: warm gray with per-pixel noise and a faint gradient.
pub fn background<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Image {
    let base: [i32; 3] = [
        118 + rng.random_range(-8..=8),
        112 + rng.random_range(-8..=8),
        104 + rng.random_range(-8..=8),
    ];
    let tilt = rng.random_range(-12.0..12.0);
    let mut img = Image::new(size, size, [0, 0, 0]);
    for y in 0..size {
        for x in 0..size {
            let g = (tilt * (x + y) as f64 / (2 * size) as f64) as i32;
            let n: i32 = rng.random_range(-6..=6);
            img.set(x, y, base.map(|b| (b + g + n).clamp(0, 255) as u8));
        }
    }
    img
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlacedItem {
    pub class_id: usize,
    pub x: usize,
    pub y: usize,
    pub raster: Raster,
}

impl PlacedItem {
    pub fn bbox(&self) -> BBox {
        BBox::new(
            self.x as f64,
            self.y as f64,
            (self.x + self.raster.width) as f64,
            (self.y + self.raster.height) as f64,
        )
    }
}

/// Paints items in order over a copy of `bg`.
pub fn compose(bg: &Image, items: &[PlacedItem]) -> Image {
    let mut img = bg.clone();
    for it in items {
        let r = &it.raster;
        for y in 0..r.height {
            for x in 0..r.width {
                if let Some(c) = r.pixels[y * r.width + x] {
                    img.set(it.x + x, it.y + y, c);
                }
            }
        }
    }
    img
}
