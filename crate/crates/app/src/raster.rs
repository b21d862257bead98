//! Scanline fill of client-drawn polygons.

use shapefit_core::render::Mask;

/// Pixels whose centers lie inside the polygon (even-odd rule). Integer
/// coordinates are pixel centers; vertices may lie outside the image.
pub fn fill_polygon(poly: &[[f64; 2]], width: u32, height: u32) -> Mask {
    let mut m = Mask::zeros(width, height);
    if poly.len() < 3 {
        return m;
    }
    let mut xs = Vec::new();
    for v in 0..height {
        let y = v as f64;
        xs.clear();
        for (i, a) in poly.iter().enumerate() {
            let b = poly[(i + 1) % poly.len()];
            // half-open in y so shared vertices are counted once
            if (a[1] <= y) != (b[1] <= y) {
                xs.push(a[0] + (y - a[1]) * (b[0] - a[0]) / (b[1] - a[1]));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            // half-open in x as well: [x0, x1)
            let mut u = pair[0].ceil().max(0.0);
            while u < pair[1] && u < width as f64 {
                m.set(u as u32, v, 1.0);
                u += 1.0;
            }
        }
    }
    m
}

/// Shoelace area.
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n).map(|i| poly[i][0] * poly[(i + 1) % n][1] - poly[(i + 1) % n][0] * poly[i][1]).sum::<f64>().abs() / 2.0
}

pub fn polygon_perimeter(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n).map(|i| (poly[(i + 1) % n][0] - poly[i][0]).hypot(poly[(i + 1) % n][1] - poly[i][1])).sum()
}
