//! Figure rendering: contact sheets for search, scatter plots for visualize.

use trimodal::raster::ImageArray;
use trimodal::{Error, Result};

/// Gap between tiles in a contact sheet, in pixels.
const SHEET_GAP: usize = 2;
/// Width of the outline drawn around the query tile.
const QUERY_OUTLINE: usize = 2;
/// Canvas side length for scatter plots.
const SCATTER_SIZE: usize = 800;
/// Dot radius in pixels.
const DOT_RADIUS: isize = 3;
/// Fraction of the canvas left empty on each side.
const SCATTER_MARGIN: f64 = 0.06;

/// Ten visually distinct colors; class c draws with PALETTE[c % 10].
const PALETTE: [[f32; 3]; 10] = [
    [0.894, 0.102, 0.110],
    [0.216, 0.494, 0.722],
    [0.302, 0.686, 0.290],
    [0.596, 0.306, 0.639],
    [1.000, 0.498, 0.000],
    [0.651, 0.337, 0.157],
    [0.969, 0.506, 0.749],
    [0.400, 0.400, 0.400],
    [0.737, 0.741, 0.133],
    [0.090, 0.745, 0.812],
];

/// Lays the query and its neighbors out in one row, query first with a
/// bright outline so it reads as "this one was asked for".
pub fn contact_sheet(query: &ImageArray, neighbors: &[&ImageArray]) -> Result<ImageArray> {
    let (height, width, channels) = (query.height, query.width, query.channels);
    for (i, tile) in neighbors.iter().enumerate() {
        if tile.height != height || tile.width != width || tile.channels != channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{height}x{width}x{channels} tiles"),
                got: format!(
                    "neighbor {i} is {}x{}x{}",
                    tile.height, tile.width, tile.channels
                ),
            });
        }
    }
    let tiles = neighbors.len() + 1;
    let mut sheet = ImageArray::zeros(height, tiles * width + (tiles - 1) * SHEET_GAP, channels);
    stamp(&mut sheet, query, 0);
    outline_tile(&mut sheet, 0, width, height);
    for (i, tile) in neighbors.iter().enumerate() {
        stamp(&mut sheet, tile, (i + 1) * (width + SHEET_GAP));
    }
    Ok(sheet)
}

fn stamp(sheet: &mut ImageArray, tile: &ImageArray, x0: usize) {
    for y in 0..tile.height {
        for x in 0..tile.width {
            for c in 0..tile.channels {
                sheet.set(y, x0 + x, c, tile.get(y, x, c));
            }
        }
    }
}

fn outline_tile(sheet: &mut ImageArray, x0: usize, width: usize, height: usize) {
    for y in 0..height {
        for x in 0..width {
            let edge = y < QUERY_OUTLINE
                || y >= height - QUERY_OUTLINE
                || x < QUERY_OUTLINE
                || x >= width - QUERY_OUTLINE;
            if edge {
                for c in 0..sheet.channels {
                    sheet.set(y, x0 + x, c, 1.0);
                }
            }
        }
    }
}

/// Renders projected points as filled dots, one color per class, on a white
/// canvas. The vertical axis is flipped so larger y plots upward.
pub fn scatter_png(points: &[(f64, f64)], labels: &[usize]) -> Result<ImageArray> {
    if points.is_empty() {
        return Err(Error::EmptyInput("projected points"));
    }
    if points.len() != labels.len() {
        return Err(Error::BatchSizeMismatch {
            left: points.len(),
            right: labels.len(),
        });
    }
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        min_x = min_x.min(x);
        max_x = max_x.max(x);
        min_y = min_y.min(y);
        max_y = max_y.max(y);
    }
    // A degenerate axis (all points equal) collapses to the canvas center
    // instead of dividing by zero.
    let span_x = (max_x - min_x).max(1e-12);
    let span_y = (max_y - min_y).max(1e-12);

    let mut canvas = ImageArray::zeros(SCATTER_SIZE, SCATTER_SIZE, 3);
    canvas.pixels.fill(1.0);
    let usable = SCATTER_SIZE as f64 * (1.0 - 2.0 * SCATTER_MARGIN);
    let offset = SCATTER_SIZE as f64 * SCATTER_MARGIN;
    for (i, &(x, y)) in points.iter().enumerate() {
        let px = offset + (x - min_x) / span_x * usable;
        let py = offset + (1.0 - (y - min_y) / span_y) * usable;
        let color = PALETTE[labels[i] % PALETTE.len()];
        dot(&mut canvas, px.round() as isize, py.round() as isize, color);
    }
    Ok(canvas)
}

fn dot(canvas: &mut ImageArray, cx: isize, cy: isize, color: [f32; 3]) {
    let side = SCATTER_SIZE as isize;
    for dy in -DOT_RADIUS..=DOT_RADIUS {
        for dx in -DOT_RADIUS..=DOT_RADIUS {
            if dx * dx + dy * dy > DOT_RADIUS * DOT_RADIUS {
                continue;
            }
            let (x, y) = (cx + dx, cy + dy);
            if x < 0 || y < 0 || x >= side || y >= side {
                continue;
            }
            for (c, &value) in color.iter().enumerate() {
                canvas.set(y as usize, x as usize, c, value);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tile(value: f32) -> ImageArray {
        let mut t = ImageArray::zeros(8, 8, 1);
        t.pixels.fill(value);
        t
    }

    #[test]
    fn contact_sheet_outlines_query_and_orders_neighbors() {
        let query = tile(0.2);
        let n1 = tile(0.4);
        let n2 = tile(0.6);
        let sheet = contact_sheet(&query, &[&n1, &n2]).unwrap();
        assert_eq!(sheet.height, 8);
        assert_eq!(sheet.width, 3 * 8 + 2 * SHEET_GAP);
        // Query corner carries the outline, its interior the original value.
        assert_eq!(sheet.get(0, 0, 0), 1.0);
        assert_eq!(sheet.get(4, 4, 0), 0.2);
        // First neighbor starts after the gap, unoutlined.
        let x1 = 8 + SHEET_GAP;
        assert_eq!(sheet.get(0, x1, 0), 0.4);
        assert_eq!(sheet.get(4, x1 + 4, 0), 0.4);
        let x2 = 2 * (8 + SHEET_GAP);
        assert_eq!(sheet.get(4, x2 + 4, 0), 0.6);
    }

    #[test]
    fn contact_sheet_rejects_mixed_tile_shapes() {
        let query = tile(0.2);
        let odd = ImageArray::zeros(4, 8, 1);
        assert!(contact_sheet(&query, &[&odd]).is_err());
    }

    #[test]
    fn scatter_colors_dots_by_class() {
        let points = vec![(0.0, 0.0), (1.0, 1.0)];
        let labels = vec![0, 1];
        let canvas = scatter_png(&points, &labels).unwrap();
        assert_eq!(canvas.height, SCATTER_SIZE);
        assert_eq!(canvas.channels, 3);
        // Corners of the data range: low x low y lands bottom-left, the
        // other point top-right. Check the pixel at each dot center.
        let offset = (SCATTER_SIZE as f64 * SCATTER_MARGIN).round() as usize;
        let far = (SCATTER_SIZE as f64 * (1.0 - SCATTER_MARGIN)).round() as usize;
        assert_eq!(canvas.get(far, offset, 0), PALETTE[0][0]);
        assert_eq!(canvas.get(offset, far, 2), PALETTE[1][2]);
        // Background stays white.
        assert_eq!(canvas.get(SCATTER_SIZE / 2, 2, 0), 1.0);
    }

    #[test]
    fn scatter_handles_a_degenerate_axis() {
        let points = vec![(0.5, 1.0), (0.5, 2.0)];
        let labels = vec![0, 0];
        assert!(scatter_png(&points, &labels).is_ok());
    }
}
