//! Pixel arrays, PNG round-tripping, geometric transforms, and a small
//! anti-aliased renderer used for schematic symbols and synthetic photos.
//!
//! Images are H×W×C with f32 values in [0, 1], row-major, channel-minor (the
//! layout matched by the dataset loaders). PNG encoding quantizes to 8 bits;
//! the encoder writes no timestamp or ancillary metadata, so identical arrays
//! produce byte-identical files.

use std::path::Path;

use crate::error::{io_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageArray {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
}

impl ImageArray {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        ImageArray {
            height,
            width,
            channels,
            pixels: vec![0.0; height * width * channels],
        }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    /// Bilinear sample with zero outside the image bounds; coordinates are in
    /// pixel units with (0, 0) at the center of the top-left pixel.
    pub fn sample_bilinear(&self, y: f64, x: f64, c: usize) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = (x - x0) as f32;
        let fy = (y - y0) as f32;
        let mut acc = 0.0f32;
        for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
            for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                let yy = y0 + dy;
                let xx = x0 + dx;
                if yy >= 0.0 && xx >= 0.0 && (yy as usize) < self.height && (xx as usize) < self.width
                {
                    acc += wy * wx * self.get(yy as usize, xx as usize, c);
                }
            }
        }
        acc
    }

    pub fn resize_bilinear(&self, height: usize, width: usize) -> ImageArray {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = ImageArray::zeros(height, width, self.channels);
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        for y in 0..height {
            for x in 0..width {
                let src_y = (y as f64 + 0.5) * sy - 0.5;
                let src_x = (x as f64 + 0.5) * sx - 0.5;
                for c in 0..self.channels {
                    out.set(y, x, c, self.sample_bilinear(src_y, src_x, c));
                }
            }
        }
        out
    }

    /// Rotates by `quarter_turns` × 90° counterclockwise.
    pub fn rotate90(&self, quarter_turns: usize) -> ImageArray {
        let q = quarter_turns % 4;
        if q == 0 {
            return self.clone();
        }
        let (h, w) = (self.height, self.width);
        let (oh, ow) = if q % 2 == 0 { (h, w) } else { (w, h) };
        let mut out = ImageArray::zeros(oh, ow, self.channels);
        for y in 0..h {
            for x in 0..w {
                let (ny, nx) = match q {
                    1 => (w - 1 - x, y),
                    2 => (h - 1 - y, w - 1 - x),
                    _ => (x, h - 1 - y),
                };
                for c in 0..self.channels {
                    out.set(ny, nx, c, self.get(y, x, c));
                }
            }
        }
        out
    }

    pub fn hflip(&self) -> ImageArray {
        let mut out = ImageArray::zeros(self.height, self.width, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(y, self.width - 1 - x, c, self.get(y, x, c));
                }
            }
        }
        out
    }

    /// Rescales the content about the image center by `factor`, keeping the
    /// canvas size (zoom in for factor > 1, zoom out padding with zeros).
    pub fn scale_about_center(&self, factor: f64) -> ImageArray {
        let mut out = ImageArray::zeros(self.height, self.width, self.channels);
        let cy = (self.height as f64 - 1.0) / 2.0;
        let cx = (self.width as f64 - 1.0) / 2.0;
        for y in 0..self.height {
            for x in 0..self.width {
                let src_y = cy + (y as f64 - cy) / factor;
                let src_x = cx + (x as f64 - cx) / factor;
                for c in 0..self.channels {
                    out.set(y, x, c, self.sample_bilinear(src_y, src_x, c));
                }
            }
        }
        out
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut raw = Vec::with_capacity(self.height * self.width * 3);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    let v = if self.channels == 1 {
                        self.get(y, x, 0)
                    } else {
                        self.get(y, x, c.min(self.channels - 1))
                    };
                    raw.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer sized to dimensions");
        let mut bytes = Vec::new();
        img.write_to(
            &mut std::io::Cursor::new(&mut bytes),
            image::ImageFormat::Png,
        )
        .map_err(|e| Error::Load {
            path: "<memory>".into(),
            reason: format!("png encode: {e}"),
        })?;
        Ok(bytes)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?).map_err(io_err(path))
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<ImageArray> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| Error::Load {
                path: "<memory>".into(),
                reason: format!("png decode: {e}"),
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = ImageArray::zeros(h, w, 3);
        for (i, v) in img.into_raw().into_iter().enumerate() {
            out.pixels[i] = v as f32 / 255.0;
        }
        Ok(out)
    }

    pub fn load_png(path: &Path) -> Result<ImageArray> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        ImageArray::from_png_bytes(&bytes)
    }
}

/// Grayscale accumulation canvas for drawing soft-edged strokes and fills.
/// Overlapping marks blend by maximum, so crossings stay evenly bright.
pub struct Canvas {
    pub size: usize,
    pub buf: Vec<f32>,
}

impl Canvas {
    pub fn new(size: usize) -> Self {
        Canvas {
            size,
            buf: vec![0.0; size * size],
        }
    }

    /// Deposits a round soft dot: full `intensity` inside `radius`, linear
    /// falloff over one extra pixel (the anti-aliasing fringe).
    pub fn stamp(&mut self, x: f64, y: f64, radius: f64, intensity: f64) {
        let reach = radius + 1.0;
        let y0 = ((y - reach).floor().max(0.0)) as usize;
        let y1 = ((y + reach).ceil().min(self.size as f64 - 1.0)) as usize;
        let x0 = ((x - reach).floor().max(0.0)) as usize;
        let x1 = ((x + reach).ceil().min(self.size as f64 - 1.0)) as usize;
        if y0 > y1 || x0 > x1 || y + reach < 0.0 || x + reach < 0.0 {
            return;
        }
        for py in y0..=y1 {
            for px in x0..=x1 {
                let d = ((px as f64 - x).powi(2) + (py as f64 - y).powi(2)).sqrt();
                let cover = (1.0 - (d - radius).max(0.0)).clamp(0.0, 1.0);
                let v = (intensity * cover) as f32;
                let cell = &mut self.buf[py * self.size + px];
                if v > *cell {
                    *cell = v;
                }
            }
        }
    }

    /// Strokes the parametric curve t ↦ (x, y) over [t0, t1] with a soft
    /// brush. Steps are spaced closely enough that the stroke reads as one
    /// continuous anti-aliased line.
    pub fn stroke(
        &mut self,
        f: impl Fn(f64) -> (f64, f64),
        t0: f64,
        t1: f64,
        steps: usize,
        radius: f64,
        intensity: f64,
    ) {
        for i in 0..=steps {
            let t = t0 + (t1 - t0) * i as f64 / steps as f64;
            let (x, y) = f(t);
            self.stamp(x, y, radius, intensity);
        }
    }

    pub fn ellipse_outline(
        &mut self,
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        angle: f64,
        radius: f64,
        intensity: f64,
    ) {
        let (sin, cos) = angle.sin_cos();
        let steps = (8.0 * (rx.max(ry) + 4.0)) as usize;
        self.stroke(
            |t| {
                let (ex, ey) = (rx * t.cos(), ry * t.sin());
                (cx + ex * cos - ey * sin, cy + ex * sin + ey * cos)
            },
            0.0,
            std::f64::consts::TAU,
            steps,
            radius,
            intensity,
        );
    }

    pub fn line(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, radius: f64, intensity: f64) {
        let len = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
        let steps = (3.0 * len).ceil().max(1.0) as usize;
        self.stroke(
            |t| (x0 + (x1 - x0) * t, y0 + (y1 - y0) * t),
            0.0,
            1.0,
            steps,
            radius,
            intensity,
        );
    }

    /// Fills a rotated ellipse with a soft edge; `softness` is the width in
    /// pixels of the intensity ramp at the boundary.
    pub fn fill_ellipse(
        &mut self,
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        angle: f64,
        softness: f64,
        intensity: f64,
    ) {
        let reach = rx.max(ry) + softness + 1.0;
        let y0 = ((cy - reach).floor().max(0.0)) as usize;
        let y1 = ((cy + reach).ceil().min(self.size as f64 - 1.0)) as usize;
        let x0 = ((cx - reach).floor().max(0.0)) as usize;
        let x1 = ((cx + reach).ceil().min(self.size as f64 - 1.0)) as usize;
        let (sin, cos) = angle.sin_cos();
        for py in y0..=y1 {
            for px in x0..=x1 {
                let dx = px as f64 - cx;
                let dy = py as f64 - cy;
                let u = (dx * cos + dy * sin) / rx;
                let v = (-dx * sin + dy * cos) / ry;
                // Approximate signed distance in pixels from the boundary.
                let r = (u * u + v * v).sqrt();
                let d = (r - 1.0) * rx.min(ry);
                let cover = (0.5 - d / softness).clamp(0.0, 1.0);
                let val = (intensity * cover) as f32;
                let cell = &mut self.buf[py * self.size + px];
                if val > *cell {
                    *cell = val;
                }
            }
        }
    }

    /// Converts the canvas to an RGB image, scaling the gray value by a
    /// per-channel tint.
    pub fn into_rgb(self, tint: [f32; 3]) -> ImageArray {
        let size = self.size;
        let mut out = ImageArray::zeros(size, size, 3);
        for y in 0..size {
            for x in 0..size {
                let g = self.buf[y * size + x].clamp(0.0, 1.0);
                for c in 0..3 {
                    out.set(y, x, c, g * tint[c]);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image() -> ImageArray {
        let mut img = ImageArray::zeros(8, 8, 3);
        for y in 0..8 {
            for x in 0..8 {
                img.set(y, x, 0, x as f32 / 7.0);
                img.set(y, x, 1, y as f32 / 7.0);
                img.set(y, x, 2, ((x + y) % 2) as f32);
            }
        }
        img
    }

    #[test]
    fn png_round_trip_preserves_quantized_pixels() {
        let img = gradient_image();
        let bytes = img.to_png_bytes().unwrap();
        let back = ImageArray::from_png_bytes(&bytes).unwrap();
        assert_eq!(back.height, 8);
        assert_eq!(back.width, 8);
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            let qa = (a.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            assert!((qa - b).abs() < 1e-6);
        }
    }

    #[test]
    fn png_encoding_is_deterministic() {
        let img = gradient_image();
        assert_eq!(img.to_png_bytes().unwrap(), img.to_png_bytes().unwrap());
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let img = gradient_image();
        let spun = img.rotate90(1).rotate90(1).rotate90(1).rotate90(1);
        assert_eq!(img, spun);
        assert_eq!(img, img.rotate90(4));
    }

    #[test]
    fn double_hflip_is_identity() {
        let img = gradient_image();
        assert_eq!(img, img.hflip().hflip());
    }

    #[test]
    fn rotate90_moves_corner_correctly() {
        let mut img = ImageArray::zeros(2, 3, 1);
        img.set(0, 2, 0, 1.0); // top-right
        let r = img.rotate90(1); // counterclockwise: top-right -> top-left
        assert_eq!(r.height, 3);
        assert_eq!(r.width, 2);
        assert_eq!(r.get(0, 0, 0), 1.0);
    }

    #[test]
    fn unit_scale_is_identity_within_interpolation_error() {
        let img = gradient_image();
        let scaled = img.scale_about_center(1.0);
        for (a, b) in img.pixels.iter().zip(&scaled.pixels) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn stamp_is_brightest_at_center() {
        let mut canvas = Canvas::new(16);
        canvas.stamp(8.0, 8.0, 1.5, 1.0);
        assert_eq!(canvas.buf[8 * 16 + 8], 1.0);
        assert!(canvas.buf[8 * 16 + 11] < 1.0);
        assert_eq!(canvas.buf[0], 0.0);
    }

    #[test]
    fn strokes_clip_outside_the_canvas() {
        let mut canvas = Canvas::new(8);
        canvas.line(-5.0, -5.0, 20.0, 20.0, 1.0, 1.0);
        assert!(canvas.buf.iter().all(|v| v.is_finite()));
        assert!(canvas.buf[3 * 8 + 3] > 0.5);
    }
}
