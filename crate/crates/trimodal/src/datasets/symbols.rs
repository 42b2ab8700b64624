//! Procedural morphology drawings.
//!
//! Every class is backed by one drawing family rendered in two modes: a
//! crisp white-on-black line schematic (the symbol modality) and a soft
//! filled rendering (the photographic stand-in used by the synthetic
//! dataset). Both modes share the same geometry, so a family's image and
//! symbol are recognizably the same shape.

use crate::raster::{Canvas, ImageArray};

/// Geometric placement of a drawing on its canvas: rotation about the
/// center, uniform scale, and a small center offset. Coordinates handed to
/// [`Placement::map`] are offsets from the center in units of the canvas
/// side.
#[derive(Clone, Copy, Debug)]
pub struct Placement {
    pub size: f64,
    pub rot: f64,
    pub scale: f64,
    pub dx: f64,
    pub dy: f64,
}

impl Placement {
    pub fn identity(size: usize) -> Self {
        Placement {
            size: size as f64,
            rot: 0.0,
            scale: 1.0,
            dx: 0.0,
            dy: 0.0,
        }
    }

    /// Maps a unit-relative offset to canvas pixel coordinates.
    pub fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let (sin, cos) = self.rot.sin_cos();
        let xr = (x * cos - y * sin) * self.scale;
        let yr = (x * sin + y * cos) * self.scale;
        (
            (0.5 + self.dx + xr) * self.size,
            (0.5 + self.dy + yr) * self.size,
        )
    }

    /// Converts a unit length to pixels under this placement.
    pub fn px(&self, len: f64) -> f64 {
        (len * self.scale * self.size).max(0.5)
    }
}

/// Drawing families. The synthetic dataset uses a prefix of these; the real
/// dataset taxonomies map their classes onto them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Ringed,
    RoundSmooth,
    InBetweenSmooth,
    CigarShaped,
    TwoArmSpiral,
    TightSpiral,
    LooseSpiral,
    BarredSpiral,
    EdgeOnDisk,
    EdgeOnBulge,
    MergingPair,
    Disturbed,
}

/// Canonical class schematic: thin white lines on black, fixed orientation.
pub fn render_symbol(family: Family, size: usize) -> ImageArray {
    let mut canvas = Canvas::new(size);
    draw(&mut canvas, family, &Placement::identity(size), true);
    canvas.into_rgb([1.0, 1.0, 1.0])
}

/// Filled rendering of the same geometry under a placement, tinted warm
/// like a telescope image. Noise is the caller's business.
pub fn render_image(family: Family, size: usize, place: &Placement) -> ImageArray {
    let mut canvas = Canvas::new(size);
    draw(&mut canvas, family, place, false);
    canvas.into_rgb([1.0, 0.88, 0.72])
}

/// Log-spiral arm: radius grows as r0 * exp(b t) while the angle sweeps.
fn arm(
    canvas: &mut Canvas,
    place: &Placement,
    phase: f64,
    r0: f64,
    b: f64,
    t_max: f64,
    radius: f64,
    intensity: f64,
) {
    let steps = (place.px(0.9) * t_max).ceil().max(24.0) as usize;
    canvas.stroke(
        |t| {
            let r = r0 * (b * t).exp();
            place.map(r * (t + phase).cos(), r * (t + phase).sin())
        },
        0.0,
        t_max,
        steps,
        radius,
        intensity,
    );
}

fn draw(canvas: &mut Canvas, family: Family, place: &Placement, line_art: bool) {
    let thin = place.px(0.012).max(0.6);
    let (cx, cy) = place.map(0.0, 0.0);
    match family {
        Family::Ringed => {
            if line_art {
                canvas.ellipse_outline(cx, cy, place.px(0.33), place.px(0.33), place.rot, thin, 1.0);
                canvas.ellipse_outline(cx, cy, place.px(0.17), place.px(0.17), place.rot, thin, 1.0);
            } else {
                canvas.ellipse_outline(
                    cx,
                    cy,
                    place.px(0.26),
                    place.px(0.26),
                    place.rot,
                    place.px(0.05),
                    0.9,
                );
                canvas.fill_ellipse(cx, cy, place.px(0.07), place.px(0.07), place.rot, place.px(0.04), 0.8);
            }
        }
        Family::RoundSmooth => {
            if line_art {
                canvas.ellipse_outline(cx, cy, place.px(0.30), place.px(0.30), place.rot, thin, 1.0);
                canvas.stamp(cx, cy, place.px(0.045), 1.0);
            } else {
                canvas.fill_ellipse(cx, cy, place.px(0.28), place.px(0.28), place.rot, place.px(0.12), 1.0);
            }
        }
        Family::InBetweenSmooth => {
            if line_art {
                canvas.ellipse_outline(cx, cy, place.px(0.32), place.px(0.20), place.rot, thin, 1.0);
                canvas.stamp(cx, cy, place.px(0.045), 1.0);
            } else {
                canvas.fill_ellipse(cx, cy, place.px(0.31), place.px(0.19), place.rot, place.px(0.10), 1.0);
            }
        }
        Family::CigarShaped => {
            if line_art {
                canvas.ellipse_outline(cx, cy, place.px(0.34), place.px(0.15), place.rot, thin, 1.0);
                canvas.stamp(cx, cy, place.px(0.04), 1.0);
            } else {
                canvas.fill_ellipse(cx, cy, place.px(0.33), place.px(0.14), place.rot, place.px(0.08), 1.0);
            }
        }
        Family::TwoArmSpiral => {
            let (r, i) = if line_art { (thin, 1.0) } else { (place.px(0.032), 0.95) };
            for phase in [0.0, std::f64::consts::PI] {
                arm(canvas, place, phase, 0.055, 0.30, 5.6, r, i);
            }
            if line_art {
                canvas.stamp(cx, cy, place.px(0.04), 1.0);
            } else {
                canvas.fill_ellipse(cx, cy, place.px(0.08), place.px(0.08), place.rot, place.px(0.05), 1.0);
            }
        }
        Family::TightSpiral => {
            let (r, i) = if line_art { (thin, 1.0) } else { (place.px(0.026), 0.95) };
            for phase in [0.0, std::f64::consts::PI] {
                arm(canvas, place, phase, 0.10, 0.085, 11.0, r, i);
            }
            if line_art {
                canvas.stamp(cx, cy, place.px(0.035), 1.0);
            } else {
                canvas.fill_ellipse(cx, cy, place.px(0.06), place.px(0.06), place.rot, place.px(0.04), 1.0);
            }
        }
        Family::LooseSpiral => {
            let (r, i) = if line_art { (thin, 1.0) } else { (place.px(0.032), 0.95) };
            for k in 0..3 {
                let phase = k as f64 * std::f64::consts::TAU / 3.0;
                arm(canvas, place, phase, 0.07, 0.50, 3.2, r, i);
            }
            if line_art {
                canvas.stamp(cx, cy, place.px(0.04), 1.0);
            } else {
                canvas.fill_ellipse(cx, cy, place.px(0.075), place.px(0.075), place.rot, place.px(0.05), 1.0);
            }
        }
        Family::BarredSpiral => {
            let (p0x, p0y) = place.map(-0.16, 0.0);
            let (p1x, p1y) = place.map(0.16, 0.0);
            if line_art {
                canvas.line(p0x, p0y, p1x, p1y, thin, 1.0);
            } else {
                canvas.line(p0x, p0y, p1x, p1y, place.px(0.045), 1.0);
            }
            let (r, i) = if line_art { (thin, 1.0) } else { (place.px(0.032), 0.95) };
            for phase in [0.0, std::f64::consts::PI] {
                arm(canvas, place, phase, 0.16, 0.26, 3.2, r, i);
            }
        }
        Family::EdgeOnDisk => {
            if line_art {
                canvas.ellipse_outline(cx, cy, place.px(0.36), place.px(0.05), place.rot, thin, 1.0);
            } else {
                canvas.fill_ellipse(cx, cy, place.px(0.35), place.px(0.045), place.rot, place.px(0.06), 1.0);
            }
        }
        Family::EdgeOnBulge => {
            if line_art {
                canvas.ellipse_outline(cx, cy, place.px(0.36), place.px(0.05), place.rot, thin, 1.0);
                canvas.ellipse_outline(cx, cy, place.px(0.12), place.px(0.12), place.rot, thin, 1.0);
            } else {
                canvas.fill_ellipse(cx, cy, place.px(0.35), place.px(0.045), place.rot, place.px(0.06), 1.0);
                canvas.fill_ellipse(cx, cy, place.px(0.13), place.px(0.13), place.rot, place.px(0.07), 1.0);
            }
        }
        Family::MergingPair => {
            let (ax, ay) = place.map(-0.16, -0.05);
            let (bx, by) = place.map(0.16, 0.05);
            if line_art {
                canvas.ellipse_outline(ax, ay, place.px(0.16), place.px(0.16), place.rot, thin, 1.0);
                canvas.ellipse_outline(bx, by, place.px(0.13), place.px(0.13), place.rot, thin, 1.0);
                let (t0x, t0y) = place.map(-0.05, -0.13);
                let (t1x, t1y) = place.map(0.05, 0.13);
                canvas.line(t0x, t0y, t1x, t1y, thin, 1.0);
            } else {
                canvas.fill_ellipse(ax, ay, place.px(0.155), place.px(0.155), place.rot, place.px(0.08), 1.0);
                canvas.fill_ellipse(bx, by, place.px(0.125), place.px(0.125), place.rot, place.px(0.08), 0.95);
                canvas.line(ax, ay, bx, by, place.px(0.04), 0.65);
            }
        }
        Family::Disturbed => {
            // Fixed irregular layout: an off-center body, two sheared arcs,
            // and a detached clump. Constants are canonical, not random.
            let blobs = [(-0.06, 0.02, 0.17), (0.20, -0.16, 0.08)];
            for &(bx, by, br) in &blobs {
                let (x, y) = place.map(bx, by);
                if line_art {
                    canvas.ellipse_outline(x, y, place.px(br), place.px(br * 0.8), place.rot + 0.5, thin, 1.0);
                } else {
                    canvas.fill_ellipse(x, y, place.px(br), place.px(br * 0.8), place.rot + 0.5, place.px(0.07), 1.0);
                }
            }
            let (r, i) = if line_art { (thin, 1.0) } else { (place.px(0.03), 0.85) };
            let steps = place.px(0.8).ceil().max(24.0) as usize;
            canvas.stroke(
                |t| place.map(-0.30 + 0.50 * t, 0.24 - 0.9 * t * (1.0 - t)),
                0.0,
                1.0,
                steps,
                r,
                i,
            );
            canvas.stroke(
                |t| place.map(-0.22 + 0.30 * t, -0.20 + 0.55 * t * t),
                0.0,
                1.0,
                steps,
                r,
                i,
            );
        }
    }
}
