//! Set-of-mark rendering: a box outline per element and a filled, numbered
//! badge anchored at the box's top-left corner.

use std::io::Cursor;

use image::{ImageEncoder, Rgba, RgbaImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("could not decode image: {0}")]
    Decode(String),
    #[error("could not encode image: {0}")]
    Encode(String),
    #[error("mark {mark_id} lies outside the {width}x{height} image")]
    OutOfBounds { mark_id: u32, width: u32, height: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarkStyle {
    /// Badge height at `reference_height`; scaled linearly with image height.
    pub badge_height: u32,
    pub reference_height: u32,
    pub min_badge_height: u32,
    pub outline_width: u32,
    pub palette: Vec<[u8; 3]>,
    pub text_color: [u8; 3],
}

impl Default for MarkStyle {
    fn default() -> Self {
        MarkStyle {
            badge_height: 24,
            reference_height: 1080,
            min_badge_height: 9,
            outline_width: 2,
            palette: vec![
                [230, 25, 75],
                [0, 130, 200],
                [60, 160, 60],
                [245, 110, 20],
                [145, 30, 180],
                [0, 128, 128],
                [200, 30, 200],
                [128, 80, 0],
            ],
            text_color: [255, 255, 255],
        }
    }
}

impl MarkStyle {
    fn color(&self, mark_id: u32) -> [u8; 3] {
        if self.palette.is_empty() {
            return [255, 0, 0];
        }
        self.palette[(mark_id.saturating_sub(1) as usize) % self.palette.len()]
    }
}

/// Pixel rectangle, `x..x+w` by `y..y+h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl PixelRect {
    pub fn contains(&self, px: u32, py: u32) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }

    pub fn intersects(&self, other: &PixelRect) -> bool {
        self.x < other.x + other.w
            && other.x < self.x + self.w
            && self.y < other.y + other.h
            && other.y < self.y + self.h
    }
}

// 3x5 digit glyphs, one row per entry, bit 2 = leftmost column.
const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

pub fn badge_size(image_height: u32, style: &MarkStyle) -> u32 {
    let scaled = (style.badge_height as f64 * image_height as f64
        / style.reference_height.max(1) as f64)
        .round() as u32;
    scaled.max(style.min_badge_height).max(1)
}

fn glyph_scale(badge_h: u32) -> u32 {
    ((badge_h.saturating_sub(4)) / 5).max(1)
}

/// Badge placement for `mark_id`, clamped inside the image.
pub fn badge_rect(bbox: &BBox, mark_id: u32, width: u32, height: u32, style: &MarkStyle) -> PixelRect {
    let h = badge_size(height, style);
    let scale = glyph_scale(h);
    let digits = mark_id.to_string().len() as u32;
    let text_w = digits * 3 * scale + (digits - 1) * scale;
    let w = h.max(text_w + 4);
    let (w, h) = (w.min(width), h.min(height));
    let x = (bbox.x1().floor() as u32).min(width - w);
    let y = (bbox.y1().floor() as u32).min(height - h);
    PixelRect { x, y, w, h }
}

/// Pixel extent of a box outline, clamped inside the image.
pub fn outline_rect(bbox: &BBox, width: u32, height: u32) -> PixelRect {
    let x = (bbox.x1().floor() as u32).min(width - 1);
    let y = (bbox.y1().floor() as u32).min(height - 1);
    let right = (bbox.x2().ceil() as u32).clamp(x + 1, width);
    let bottom = (bbox.y2().ceil() as u32).clamp(y + 1, height);
    PixelRect {
        x,
        y,
        w: right - x,
        h: bottom - y,
    }
}

fn fill(img: &mut RgbaImage, r: PixelRect, color: [u8; 3]) {
    let px = Rgba([color[0], color[1], color[2], 255]);
    for y in r.y..r.y + r.h {
        for x in r.x..r.x + r.w {
            img.put_pixel(x, y, px);
        }
    }
}

fn draw_outline(img: &mut RgbaImage, r: PixelRect, thickness: u32, color: [u8; 3]) {
    let t = thickness.max(1);
    let tw = t.min(r.w);
    let th = t.min(r.h);
    fill(img, PixelRect { h: th, ..r }, color);
    fill(img, PixelRect { y: r.y + r.h - th, h: th, ..r }, color);
    fill(img, PixelRect { w: tw, ..r }, color);
    fill(img, PixelRect { x: r.x + r.w - tw, w: tw, ..r }, color);
}

fn draw_number(img: &mut RgbaImage, badge: PixelRect, n: u32, color: [u8; 3]) {
    let scale = glyph_scale(badge.h);
    let text = n.to_string();
    let digits = text.len() as u32;
    let text_w = digits * 3 * scale + (digits - 1) * scale;
    let text_h = 5 * scale;
    let x0 = badge.x + badge.w.saturating_sub(text_w) / 2;
    let y0 = badge.y + badge.h.saturating_sub(text_h) / 2;
    let px = Rgba([color[0], color[1], color[2], 255]);
    for (i, ch) in text.bytes().enumerate() {
        let glyph = DIGITS[(ch - b'0') as usize];
        let gx = x0 + i as u32 * 4 * scale;
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..3u32 {
                if bits & (0b100 >> col) == 0 {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        let x = gx + col * scale + dx;
                        let y = y0 + row as u32 * scale + dy;
                        if badge.contains(x, y) {
                            img.put_pixel(x, y, px);
                        }
                    }
                }
            }
        }
    }
}

/// Draws every mark onto a copy of `image`. Outlines are drawn first so
/// badges stay legible where they overlap other boxes.
pub fn render_marks(
    image: &RgbaImage,
    marks: &[(u32, BBox)],
    style: &MarkStyle,
) -> Result<RgbaImage, RenderError> {
    let (width, height) = image.dimensions();
    for (mark_id, bbox) in marks {
        if !bbox.within_image(width as f64, height as f64) {
            return Err(RenderError::OutOfBounds {
                mark_id: *mark_id,
                width,
                height,
            });
        }
    }
    let mut out = image.clone();
    if width == 0 || height == 0 {
        return Ok(out);
    }
    for (mark_id, bbox) in marks {
        draw_outline(
            &mut out,
            outline_rect(bbox, width, height),
            style.outline_width,
            style.color(*mark_id),
        );
    }
    for (mark_id, bbox) in marks {
        let badge = badge_rect(bbox, *mark_id, width, height, style);
        fill(&mut out, badge, style.color(*mark_id));
        draw_number(&mut out, badge, *mark_id, style.text_color);
    }
    Ok(out)
}

/// Decodes an encoded image, renders the marks, and re-encodes as PNG.
pub fn render_marks_encoded(
    bytes: &[u8],
    marks: &[(u32, BBox)],
    style: &MarkStyle,
) -> Result<Vec<u8>, RenderError> {
    let decoded = image::load_from_memory(bytes)
        .map_err(|e| RenderError::Decode(e.to_string()))?
        .to_rgba8();
    let rendered = render_marks(&decoded, marks, style)?;
    let mut buf = Cursor::new(Vec::new());
    image::codecs::png::PngEncoder::new(&mut buf)
        .write_image(
            rendered.as_raw(),
            rendered.width(),
            rendered.height(),
            image::ExtendedColorType::Rgba8,
        )
        .map_err(|e| RenderError::Encode(e.to_string()))?;
    Ok(buf.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn canvas(w: u32, h: u32) -> RgbaImage {
        RgbaImage::from_fn(w, h, |x, y| Rgba([(x % 7 * 20) as u8, (y % 5 * 30) as u8, 90, 255]))
    }

    fn changed(a: &RgbaImage, b: &RgbaImage) -> Vec<(u32, u32)> {
        a.enumerate_pixels()
            .filter(|(x, y, p)| b.get_pixel(*x, *y) != *p)
            .map(|(x, y, _)| (x, y))
            .collect()
    }

    #[test]
    fn no_marks_is_identity() {
        let img = canvas(64, 48);
        assert_eq!(render_marks(&img, &[], &MarkStyle::default()).unwrap(), img);
    }

    #[test]
    fn single_badge_at_origin() {
        let style = MarkStyle::default();
        let img = canvas(200, 1080);
        let b = bb(0.0, 0.0, 50.0, 50.0);
        let out = render_marks(&img, &[(1, b)], &style).unwrap();
        assert_eq!(out.dimensions(), img.dimensions());
        let size = badge_size(1080, &style);
        assert_eq!(size, 24);
        let badge = badge_rect(&b, 1, 200, 1080, &style);
        assert_eq!(badge, PixelRect { x: 0, y: 0, w: size, h: size });
        let diff = changed(&img, &out);
        assert!(diff.iter().any(|&(x, y)| x < size && y < size));
        let outline = outline_rect(&b, 200, 1080);
        assert!(diff.iter().all(|&(x, y)| badge.contains(x, y) || outline.contains(x, y)));
        // badge pixels are all either fill or numeral
        for y in 0..size {
            for x in 0..size {
                let p = out.get_pixel(x, y).0;
                assert!(p == [230, 25, 75, 255] || p == [255, 255, 255, 255]);
            }
        }
    }

    #[test]
    fn distant_boxes_get_disjoint_badges() {
        let style = MarkStyle::default();
        let img = canvas(400, 300);
        let a = bb(10.0, 10.0, 60.0, 40.0);
        let b = bb(200.0, 150.0, 260.0, 200.0);
        let out = render_marks(&img, &[(1, a), (2, b)], &style).unwrap();
        let ra = badge_rect(&a, 1, 400, 300, &style);
        let rb = badge_rect(&b, 2, 400, 300, &style);
        assert!(!ra.intersects(&rb));
        let diff = changed(&img, &out);
        assert!(diff.iter().any(|&(x, y)| ra.contains(x, y)));
        assert!(diff.iter().any(|&(x, y)| rb.contains(x, y)));
    }

    #[test]
    fn badge_clamps_inside_image() {
        let style = MarkStyle::default();
        let b = bb(390.0, 290.0, 400.0, 300.0);
        let r = badge_rect(&b, 12, 400, 300, &style);
        assert!(r.x + r.w <= 400 && r.y + r.h <= 300);
        assert!(r.w > r.h, "two digits widen the badge");
        let out = render_marks(&canvas(400, 300), &[(12, b)], &style).unwrap();
        assert_eq!(out.dimensions(), (400, 300));
    }

    #[test]
    fn rejects_out_of_bounds_and_bad_bytes() {
        let style = MarkStyle::default();
        assert!(matches!(
            render_marks(&canvas(10, 10), &[(1, bb(0.0, 0.0, 11.0, 5.0))], &style),
            Err(RenderError::OutOfBounds { mark_id: 1, .. })
        ));
        assert!(matches!(
            render_marks_encoded(b"not an image", &[], &style),
            Err(RenderError::Decode(_))
        ));
    }

    #[test]
    fn encoded_round_trip_is_deterministic() {
        let img = canvas(120, 90);
        let mut png = Cursor::new(Vec::new());
        img.write_to(&mut png, image::ImageFormat::Png).unwrap();
        let marks = [(1, bb(5.0, 5.0, 50.0, 40.0)), (2, bb(60.5, 30.2, 110.0, 80.9))];
        let a = render_marks_encoded(png.get_ref(), &marks, &MarkStyle::default()).unwrap();
        let b = render_marks_encoded(png.get_ref(), &marks, &MarkStyle::default()).unwrap();
        assert_eq!(a, b);
        let decoded = image::load_from_memory(&a).unwrap().to_rgba8();
        assert_eq!(decoded, render_marks(&img, &marks, &MarkStyle::default()).unwrap());
    }
}
