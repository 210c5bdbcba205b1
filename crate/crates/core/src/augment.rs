//! Geometric augmentation of pointer transitions.
//!
//! Before-screenshots get a ring marker (plus label) at the pointer location;
//! after-screenshots get an outlined region of interest and a fixed-size zoom
//! crop around the final pointer coordinate. Everything here is a pure
//! function of its inputs: no fonts are loaded from the system and no
//! anti-aliasing is applied, so outputs are bit-reproducible.

use std::sync::Arc;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{self, ImageDigest, Raster, Rect};
use crate::trajectory::{Action, ActionKind, Point, Screenshot, Transition};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AugmentError {
    #[error("point ({x}, {y}) is outside the {width}x{height} image")]
    PointOutOfBounds {
        x: u32,
        y: u32,
        width: u32,
        height: u32,
    },
    #[error("crop side {side} does not fit a {width}x{height} image")]
    CropTooLarge { side: u32, width: u32, height: u32 },
    #[error("rectangle {rect:?} is outside the {width}x{height} image")]
    RectOutOfBounds { rect: Rect, width: u32, height: u32 },
    #[error("{kind:?} action is missing its pointer coordinates")]
    MissingPointer { kind: ActionKind },
}

/// Geometry and colors for the augmentations. Colors are RGB triples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub crop_side: u32,
    pub marker_radius: u32,
    pub marker_stroke: u32,
    pub line_width: u32,
    pub outline_stroke: u32,
    pub click_color: [u8; 3],
    pub move_color: [u8; 3],
    pub drag_color: [u8; 3],
    pub outline_color: [u8; 3],
    pub label_background: [u8; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_side: 512,
            marker_radius: 12,
            marker_stroke: 3,
            line_width: 3,
            outline_stroke: 3,
            click_color: [255, 0, 0],
            move_color: [0, 0, 255],
            drag_color: [0, 200, 0],
            outline_color: [255, 0, 255],
            label_background: [255, 255, 255],
        }
    }
}

impl AugmentConfig {
    /// Defaults sized for the 640x400 simulator screen.
    pub fn desk_scale() -> Self {
        AugmentConfig {
            crop_side: 192,
            marker_radius: 8,
            marker_stroke: 2,
            line_width: 2,
            outline_stroke: 2,
            ..Self::default()
        }
    }

    fn style(&self, color: [u8; 3], label: &'static str) -> MarkerStyle {
        MarkerStyle {
            radius: self.marker_radius,
            stroke: self.marker_stroke,
            color: Rgb(color),
            label,
            label_background: Rgb(self.label_background),
        }
    }

    pub fn click_style(&self) -> MarkerStyle {
        self.style(self.click_color, "Click")
    }

    pub fn move_style(&self) -> MarkerStyle {
        self.style(self.move_color, "MoveTo")
    }

    pub fn drag_style(&self) -> MarkerStyle {
        self.style(self.drag_color, "DragTo")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MarkerStyle {
    pub radius: u32,
    pub stroke: u32,
    pub color: Rgb<u8>,
    pub label: &'static str,
    pub label_background: Rgb<u8>,
}

/// Padding between label text and the edge of its box.
pub const LABEL_PADDING: u32 = 2;
/// Vertical gap between the ring and the label box.
pub const LABEL_GAP: u32 = 2;

/// Unclipped top-left corner and size of a marker's label box. The box sits
/// above the ring, or below it when there is no room above.
fn label_box(center: Point, style: &MarkerStyle) -> (i64, i64, u32, u32) {
    let w = raster::text_width(style.label) + 2 * LABEL_PADDING;
    let h = raster::GLYPH + 2 * LABEL_PADDING;
    let left = center.x as i64 - (w / 2) as i64;
    let above = center.y as i64 - style.radius as i64 - LABEL_GAP as i64 - h as i64;
    let top = if above >= 0 {
        above
    } else {
        center.y as i64 + style.radius as i64 + LABEL_GAP as i64
    };
    (left, top, w, h)
}

/// Label box of a marker centered at `center`, clipped to the canvas.
pub fn label_rect(center: Point, style: &MarkerStyle, width: u32, height: u32) -> Option<Rect> {
    let (left, top, w, h) = label_box(center, style);
    let x0 = left.max(0);
    let y0 = top.max(0);
    let x1 = (left + w as i64).min(width as i64);
    let y1 = (top + h as i64).min(height as i64);
    (x1 > x0 && y1 > y0)
        .then(|| Rect::new(x0 as u32, y0 as u32, (x1 - x0) as u32, (y1 - y0) as u32))
}

fn check_point(image: &RgbImage, p: Point) -> Result<(), AugmentError> {
    if p.x >= image.width() || p.y >= image.height() {
        return Err(AugmentError::PointOutOfBounds {
            x: p.x,
            y: p.y,
            width: image.width(),
            height: image.height(),
        });
    }
    Ok(())
}

/// Ring pixels: `(r - stroke)^2 < d^2 <= r^2`. A stroke at least as wide as
/// the radius yields a filled disc.
fn draw_ring(image: &mut RgbImage, center: Point, radius: u32, stroke: u32, color: Rgb<u8>) {
    let r = radius as i64;
    let inner = radius as i64 - stroke as i64;
    let (cx, cy) = (center.x as i64, center.y as i64);
    let (w, h) = (image.width() as i64, image.height() as i64);
    for y in (cy - r).max(0)..=(cy + r).min(h - 1) {
        for x in (cx - r).max(0)..=(cx + r).min(w - 1) {
            let d2 = (x - cx).pow(2) + (y - cy).pow(2);
            if d2 <= r * r && (inner <= 0 || d2 > inner * inner) {
                image.put_pixel(x as u32, y as u32, color);
            }
        }
    }
}

fn draw_label(image: &mut RgbImage, center: Point, style: &MarkerStyle) {
    let (left, top, _, _) = label_box(center, style);
    if let Some(bg) = label_rect(center, style, image.width(), image.height()) {
        raster::fill_rect(image, bg, style.label_background);
    }
    raster::draw_text(
        image,
        left + LABEL_PADDING as i64,
        top + LABEL_PADDING as i64,
        style.label,
        style.color,
    );
}

/// Returns a copy of `image` with a labeled ring marker at `center`.
pub fn overlay_marker(
    image: &RgbImage,
    center: Point,
    style: &MarkerStyle,
) -> Result<RgbImage, AugmentError> {
    check_point(image, center)?;
    let mut out = image.clone();
    draw_ring(&mut out, center, style.radius, style.stroke, style.color);
    draw_label(&mut out, center, style);
    Ok(out)
}

/// Pixels whose center lies within `width / 2` of the segment `from..to`.
pub fn draw_segment(image: &mut RgbImage, from: Point, to: Point, width: u32, color: Rgb<u8>) {
    let half = width.max(1) as f64 / 2.0;
    let (ax, ay, bx, by) = (from.x as f64, from.y as f64, to.x as f64, to.y as f64);
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let pad = half.ceil() as i64;
    let x0 = (from.x.min(to.x) as i64 - pad).max(0);
    let y0 = (from.y.min(to.y) as i64 - pad).max(0);
    let x1 = (from.x.max(to.x) as i64 + pad).min(image.width() as i64 - 1);
    let y1 = (from.y.max(to.y) as i64 + pad).min(image.height() as i64 - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (px, py) = (x as f64, y as f64);
            let t = if len2 == 0.0 {
                0.0
            } else {
                (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
            };
            let (qx, qy) = (ax + t * dx, ay + t * dy);
            if (px - qx).powi(2) + (py - qy).powi(2) <= half * half {
                image.put_pixel(x as u32, y as u32, color);
            }
        }
    }
}

/// Marks the before-screenshot for a pointer action: a red `Click` ring, a
/// blue `MoveTo` ring, or for drags a blue `MoveTo` ring at the start, a
/// green `DragTo` ring at the drop point and a green line between them.
pub fn mark_action(
    image: &RgbImage,
    action: &Action,
    config: &AugmentConfig,
) -> Result<RgbImage, AugmentError> {
    let missing = || AugmentError::MissingPointer { kind: action.kind };
    match action.kind {
        ActionKind::Click => {
            overlay_marker(image, action.pointer_start.ok_or_else(missing)?, &config.click_style())
        }
        ActionKind::MoveTo => {
            overlay_marker(image, action.pointer_start.ok_or_else(missing)?, &config.move_style())
        }
        ActionKind::DragTo => {
            let from = action.pointer_start.ok_or_else(missing)?;
            let to = action.pointer_end.ok_or_else(missing)?;
            check_point(image, from)?;
            check_point(image, to)?;
            let mut out = image.clone();
            let (start, end) = (config.move_style(), config.drag_style());
            draw_segment(&mut out, from, to, config.line_width, end.color);
            draw_ring(&mut out, from, start.radius, start.stroke, start.color);
            draw_ring(&mut out, to, end.radius, end.stroke, end.color);
            draw_label(&mut out, from, &start);
            draw_label(&mut out, to, &end);
            Ok(out)
        }
        _ => Ok(image.clone()),
    }
}

/// Source rectangle of a `side`-square crop centered at `center`, slid inside
/// the image when it would cross an edge: `max(0, min(c - side/2, dim - side))`
/// per axis.
pub fn crop_rect(width: u32, height: u32, center: Point, side: u32) -> Result<Rect, AugmentError> {
    if side == 0 || side > width || side > height {
        return Err(AugmentError::CropTooLarge {
            side,
            width,
            height,
        });
    }
    if center.x >= width || center.y >= height {
        return Err(AugmentError::PointOutOfBounds {
            x: center.x,
            y: center.y,
            width,
            height,
        });
    }
    let place = |c: u32, dim: u32| c.saturating_sub(side / 2).min(dim - side);
    Ok(Rect::new(
        place(center.x, width),
        place(center.y, height),
        side,
        side,
    ))
}

/// Copies the `side x side` region around `center`; returns it with its
/// source rectangle.
pub fn zoom_crop(image: &RgbImage, center: Point, side: u32) -> Result<(RgbImage, Rect), AugmentError> {
    let rect = crop_rect(image.width(), image.height(), center, side)?;
    let crop = image::imageops::crop_imm(image, rect.x, rect.y, rect.width, rect.height).to_image();
    Ok((crop, rect))
}

/// Returns a copy with a border of `stroke` pixels drawn just inside `rect`.
pub fn outline_region(
    image: &RgbImage,
    rect: Rect,
    stroke: u32,
    color: Rgb<u8>,
) -> Result<RgbImage, AugmentError> {
    if !rect.fits_in(image.width(), image.height()) {
        return Err(AugmentError::RectOutOfBounds {
            rect,
            width: image.width(),
            height: image.height(),
        });
    }
    let mut out = image.clone();
    raster::stroke_rect(&mut out, rect, stroke.max(1), color);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedTransition {
    pub index: usize,
    pub before_marked: Screenshot,
    pub action: Action,
    pub after_outlined: Screenshot,
    pub zoom_crop: Option<Arc<Raster>>,
    pub crop_rect: Option<Rect>,
    /// Digests of the unmodified before/after frames.
    pub before_digest: ImageDigest,
    pub after_digest: ImageDigest,
}

/// Applies marker, zoom crop and outline to pointer transitions; everything
/// else passes through untouched with no crop.
pub fn augment_transition(
    t: &Transition<'_>,
    config: &AugmentConfig,
) -> Result<AugmentedTransition, AugmentError> {
    let before_digest = t.before.image.digest();
    let after_digest = t.after.image.digest();
    if !t.action.kind.is_pointer() {
        return Ok(AugmentedTransition {
            index: t.index,
            before_marked: t.before.clone(),
            action: t.action.clone(),
            after_outlined: t.after.clone(),
            zoom_crop: None,
            crop_rect: None,
            before_digest,
            after_digest,
        });
    }
    let marked = mark_action(t.before.image.image(), t.action, config)?;
    let focus = t
        .action
        .final_pointer()
        .ok_or(AugmentError::MissingPointer { kind: t.action.kind })?;
    let after = t.after.image.image();
    let (crop, rect) = zoom_crop(after, focus, config.crop_side)?;
    let outlined = outline_region(after, rect, config.outline_stroke, Rgb(config.outline_color))?;
    Ok(AugmentedTransition {
        index: t.index,
        before_marked: t.before.with_image(marked),
        action: t.action.clone(),
        after_outlined: t.after.with_image(outlined),
        zoom_crop: Some(Arc::new(Raster::new(crop))),
        crop_rect: Some(rect),
        before_digest,
        after_digest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::tests::{frame, rollout_with};
    use crate::trajectory::transitions;

    fn canvas(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x * 3 % 200) as u8 + 20, (y * 5 % 200) as u8 + 20, 90]))
    }

    fn changed(a: &RgbImage, b: &RgbImage) -> Vec<(u32, u32)> {
        a.enumerate_pixels()
            .filter(|(x, y, p)| b.get_pixel(*x, *y) != *p)
            .map(|(x, y, _)| (x, y))
            .collect()
    }

    #[test]
    fn crop_centering_and_clamping() {
        let c = |x, y| crop_rect(1920, 1080, Point::new(x, y), 512).unwrap();
        assert_eq!(c(960, 540), Rect::new(704, 284, 512, 512));
        assert_eq!(c(0, 0), Rect::new(0, 0, 512, 512));
        assert_eq!(c(1919, 1079), Rect::new(1408, 568, 512, 512));
    }

    #[test]
    fn crop_larger_than_image_is_rejected() {
        let img = canvas(100, 60);
        assert_eq!(
            zoom_crop(&img, Point::new(10, 10), 64).unwrap_err(),
            AugmentError::CropTooLarge {
                side: 64,
                width: 100,
                height: 60
            }
        );
    }

    #[test]
    fn crop_copies_source_pixels() {
        let img = canvas(300, 200);
        let (crop, rect) = zoom_crop(&img, Point::new(290, 5), 50).unwrap();
        assert_eq!(rect, Rect::new(250, 0, 50, 50));
        for (x, y, p) in crop.enumerate_pixels() {
            assert_eq!(p, img.get_pixel(rect.x + x, rect.y + y));
        }
    }

    #[test]
    fn click_marker_is_local() {
        let img = canvas(100, 100);
        let style = AugmentConfig::default().click_style();
        let out = overlay_marker(&img, Point::new(10, 10), &style).unwrap();
        let label = label_rect(Point::new(10, 10), &style, 100, 100).unwrap();
        let diff = changed(&img, &out);
        assert!(!diff.is_empty());
        for (x, y) in diff {
            let d2 = (x as i64 - 10).pow(2) + (y as i64 - 10).pow(2);
            assert!(d2 <= 15 * 15 || label.contains(x, y), "({x},{y}) changed");
        }
    }

    #[test]
    fn marker_rejects_out_of_bounds_center() {
        let img = canvas(20, 20);
        let style = AugmentConfig::default().click_style();
        assert!(matches!(
            overlay_marker(&img, Point::new(20, 3), &style),
            Err(AugmentError::PointOutOfBounds { .. })
        ));
    }

    #[test]
    fn outline_preserves_interior() {
        let img = canvas(600, 600);
        let out = outline_region(&img, Rect::new(0, 0, 512, 512), 3, Rgb([255, 0, 255])).unwrap();
        assert_eq!(out.get_pixel(256, 256), img.get_pixel(256, 256));
        assert_eq!(*out.get_pixel(0, 0), Rgb([255, 0, 255]));
        assert_eq!(*out.get_pixel(511, 200), Rgb([255, 0, 255]));
        assert_eq!(out.get_pixel(512, 200), img.get_pixel(512, 200));
    }

    #[test]
    fn outline_full_image_and_out_of_bounds() {
        let img = canvas(40, 30);
        let out = outline_region(&img, Rect::new(0, 0, 40, 30), 1, Rgb([1, 2, 3])).unwrap();
        assert_eq!(changed(&img, &out).len(), 2 * 40 + 2 * 30 - 4);
        assert!(outline_region(&img, Rect::new(1, 0, 40, 30), 1, Rgb([1, 2, 3])).is_err());
    }

    #[test]
    fn non_pointer_transition_passes_through() {
        let r = rollout_with(vec![Action::type_text("hi")], 64, 48);
        let t = transitions(&r)[0];
        let aug = augment_transition(&t, &AugmentConfig::desk_scale()).unwrap();
        assert_eq!(aug.before_marked, *t.before);
        assert_eq!(aug.after_outlined, *t.after);
        assert!(aug.zoom_crop.is_none());
        assert!(aug.crop_rect.is_none());
    }

    #[test]
    fn drag_crop_centers_on_drop_point() {
        let mut r = rollout_with(vec![Action::drag_to(Point::new(5, 5), Point::new(300, 220))], 400, 300);
        r.initial_screenshot = frame(400, 300, 7);
        let t = transitions(&r)[0];
        let cfg = AugmentConfig {
            crop_side: 100,
            ..AugmentConfig::default()
        };
        let aug = augment_transition(&t, &cfg).unwrap();
        assert_eq!(aug.crop_rect, Some(Rect::new(250, 170, 100, 100)));
        assert_eq!(aug.zoom_crop.as_ref().unwrap().width(), 100);
    }

    #[test]
    fn augmentation_is_pure() {
        let r = rollout_with(vec![Action::click(30, 40)], 200, 150);
        let t = transitions(&r)[0];
        let cfg = AugmentConfig {
            crop_side: 64,
            ..AugmentConfig::default()
        };
        let a = augment_transition(&t, &cfg).unwrap();
        let b = augment_transition(&t, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(r, rollout_with(vec![Action::click(30, 40)], 200, 150));
    }
}
