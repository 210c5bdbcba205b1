//! Pixel buffers shared by the simulator and the augmentation pipeline.
//!
//! A [`Raster`] wraps an RGB buffer together with a lazily computed content
//! digest. Screenshots hold rasters behind an `Arc`, so the digest of a frame
//! is computed at most once no matter how many transitions reference it.

use std::fmt;
use std::sync::OnceLock;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// SHA-256 over `width || height || raw RGB bytes`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ImageDigest(#[serde(with = "hex_bytes")] pub [u8; 32]);

impl ImageDigest {
    pub fn of(image: &RgbImage) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(image.width().to_le_bytes());
        hasher.update(image.height().to_le_bytes());
        hasher.update(image.as_raw());
        ImageDigest(hasher.finalize().into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for ImageDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ImageDigest({})", &self.to_hex()[..12])
    }
}

impl fmt::Display for ImageDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

mod hex_bytes {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let text = String::deserialize(d)?;
        let raw = hex::decode(&text).map_err(D::Error::custom)?;
        raw.try_into()
            .map_err(|_| D::Error::custom("digest must be 32 bytes"))
    }
}

/// An immutable RGB frame with a cached digest.
pub struct Raster {
    image: RgbImage,
    digest: OnceLock<ImageDigest>,
}

impl Raster {
    pub fn new(image: RgbImage) -> Self {
        Raster {
            image,
            digest: OnceLock::new(),
        }
    }

    pub fn image(&self) -> &RgbImage {
        &self.image
    }

    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }

    pub fn digest(&self) -> ImageDigest {
        *self.digest.get_or_init(|| ImageDigest::of(&self.image))
    }

    pub fn into_image(self) -> RgbImage {
        self.image
    }
}

impl Clone for Raster {
    fn clone(&self) -> Self {
        let digest = OnceLock::new();
        if let Some(d) = self.digest.get() {
            let _ = digest.set(*d);
        }
        Raster {
            image: self.image.clone(),
            digest,
        }
    }
}

impl PartialEq for Raster {
    fn eq(&self, other: &Self) -> bool {
        self.image == other.image
    }
}

impl Eq for Raster {}

impl fmt::Debug for Raster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Raster({}x{})", self.width(), self.height())
    }
}

impl From<RgbImage> for Raster {
    fn from(image: RgbImage) -> Self {
        Raster::new(image)
    }
}

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl Rect {
    pub const fn new(x: u32, y: u32, width: u32, height: u32) -> Self {
        Rect {
            x,
            y,
            width,
            height,
        }
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && y >= self.y && x < self.x + self.width && y < self.y + self.height
    }

    pub fn fits_in(&self, width: u32, height: u32) -> bool {
        self.width > 0
            && self.height > 0
            && self.x as u64 + self.width as u64 <= width as u64
            && self.y as u64 + self.height as u64 <= height as u64
    }

    pub fn center(&self) -> (u32, u32) {
        (self.x + self.width / 2, self.y + self.height / 2)
    }
}

pub fn solid(width: u32, height: u32, color: Rgb<u8>) -> RgbImage {
    RgbImage::from_pixel(width, height, color)
}

/// Fills `rect`, clipped to the canvas.
pub fn fill_rect(image: &mut RgbImage, rect: Rect, color: Rgb<u8>) {
    let x_end = (rect.x + rect.width).min(image.width());
    let y_end = (rect.y + rect.height).min(image.height());
    for y in rect.y..y_end {
        for x in rect.x..x_end {
            image.put_pixel(x, y, color);
        }
    }
}

/// Strokes the inside edge of `rect` with the given width, clipped to the canvas.
pub fn stroke_rect(image: &mut RgbImage, rect: Rect, width: u32, color: Rgb<u8>) {
    let x_end = (rect.x + rect.width).min(image.width());
    let y_end = (rect.y + rect.height).min(image.height());
    for y in rect.y..y_end {
        for x in rect.x..x_end {
            let dx = (x - rect.x).min(rect.x + rect.width - 1 - x);
            let dy = (y - rect.y).min(rect.y + rect.height - 1 - y);
            if dx < width || dy < width {
                image.put_pixel(x, y, color);
            }
        }
    }
}

/// Glyph cell size of the built-in bitmap font.
pub const GLYPH: u32 = 8;

/// Pixel width of `text` rendered with [`draw_text`].
pub fn text_width(text: &str) -> u32 {
    text.chars().count() as u32 * GLYPH
}

/// Draws `text` with its top-left corner at (`x`, `y`) using the 8x8 basic
/// latin font. Pixels falling outside the canvas are skipped, and characters
/// without a glyph render as blanks.
pub fn draw_text(image: &mut RgbImage, x: i64, y: i64, text: &str, color: Rgb<u8>) {
    use font8x8::UnicodeFonts;
    let (w, h) = (image.width() as i64, image.height() as i64);
    for (i, ch) in text.chars().enumerate() {
        let Some(glyph) = font8x8::BASIC_FONTS.get(ch) else {
            continue;
        };
        let gx = x + (i as i64) * GLYPH as i64;
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..8 {
                if bits & (1 << col) == 0 {
                    continue;
                }
                let px = gx + col;
                let py = y + row as i64;
                if px >= 0 && py >= 0 && px < w && py < h {
                    image.put_pixel(px as u32, py as u32, color);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_depends_on_dimensions_and_pixels() {
        let a = solid(4, 2, Rgb([1, 2, 3]));
        let b = solid(2, 4, Rgb([1, 2, 3]));
        assert_ne!(ImageDigest::of(&a), ImageDigest::of(&b));
        let mut c = a.clone();
        c.put_pixel(0, 0, Rgb([0, 2, 3]));
        assert_ne!(ImageDigest::of(&a), ImageDigest::of(&c));
        assert_eq!(ImageDigest::of(&a), Raster::new(a.clone()).digest());
    }

    #[test]
    fn stroke_width_one_touches_only_perimeter() {
        let mut img = solid(10, 10, Rgb([0, 0, 0]));
        stroke_rect(&mut img, Rect::new(2, 3, 5, 4), 1, Rgb([9, 9, 9]));
        for (x, y, p) in img.enumerate_pixels() {
            let on_edge = (2..7).contains(&x)
                && (3..7).contains(&y)
                && (x == 2 || x == 6 || y == 3 || y == 6);
            assert_eq!(p.0[0] == 9, on_edge, "pixel ({x},{y})");
        }
    }

    #[test]
    fn text_is_clipped_not_panicking() {
        let mut img = solid(6, 6, Rgb([0, 0, 0]));
        draw_text(&mut img, -3, -3, "Click", Rgb([255, 0, 0]));
        draw_text(&mut img, 4, 4, "W", Rgb([255, 0, 0]));
    }
}
