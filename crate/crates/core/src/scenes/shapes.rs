//! Analytic shape primitives rasterized at pixel centers: a pixel (x, y) is
//! inside when its center (x + 0.5, y + 0.5) is inside the shape.

use ndarray::Array2;

use crate::mask::Mask;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Circle { cx: f64, cy: f64, r: f64 },
    /// Axis of the square rotated by `theta`.
    Square { cx: f64, cy: f64, half: f64, theta: f64 },
    /// Equilateral triangle, circumradius `r`, first vertex at angle `theta`.
    Triangle { cx: f64, cy: f64, r: f64, theta: f64 },
    Ellipse { cx: f64, cy: f64, a: f64, b: f64, theta: f64 },
    /// 3:1 rectangle, `half_l` along the rotated major axis.
    Bar { cx: f64, cy: f64, half_l: f64, theta: f64 },
}

impl Shape {
    pub fn contains(&self, px: f64, py: f64) -> bool {
        match *self {
            Shape::Circle { cx, cy, r } => {
                let (dx, dy) = (px - cx, py - cy);
                dx * dx + dy * dy <= r * r
            }
            Shape::Square { cx, cy, half, theta } => {
                let (dx, dy) = rotate_into(px - cx, py - cy, theta);
                dx.abs() <= half && dy.abs() <= half
            }
            Shape::Triangle { cx, cy, r, theta } => {
                let verts: Vec<(f64, f64)> = (0..3)
                    .map(|k| {
                        let a = theta + k as f64 * std::f64::consts::TAU / 3.0;
                        (cx + r * a.cos(), cy + r * a.sin())
                    })
                    .collect();
                point_in_triangle(px, py, &verts)
            }
            Shape::Ellipse { cx, cy, a, b, theta } => {
                let (dx, dy) = rotate_into(px - cx, py - cy, theta);
                (dx / a) * (dx / a) + (dy / b) * (dy / b) <= 1.0
            }
            Shape::Bar { cx, cy, half_l, theta } => {
                let (dx, dy) = rotate_into(px - cx, py - cy, theta);
                dx.abs() <= half_l && dy.abs() <= half_l / 3.0
            }
        }
    }

    /// Loose bounding radius used to keep shapes inside the image.
    pub fn bounding_radius(&self) -> f64 {
        match *self {
            Shape::Circle { r, .. } => r,
            Shape::Square { half, .. } => half * std::f64::consts::SQRT_2,
            Shape::Triangle { r, .. } => r,
            Shape::Ellipse { a, b, .. } => a.max(b),
            Shape::Bar { half_l, .. } => half_l,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        match *self {
            Shape::Circle { cx, cy, .. }
            | Shape::Square { cx, cy, .. }
            | Shape::Triangle { cx, cy, .. }
            | Shape::Ellipse { cx, cy, .. }
            | Shape::Bar { cx, cy, .. } => (cx, cy),
        }
    }

    pub fn rasterize(&self, size: usize) -> Mask {
        let (cx, cy) = self.center();
        let rad = self.bounding_radius() + 1.0;
        let x_lo = ((cx - rad).floor().max(0.0)) as usize;
        let y_lo = ((cy - rad).floor().max(0.0)) as usize;
        let x_hi = ((cx + rad).ceil() as usize).min(size);
        let y_hi = ((cy + rad).ceil() as usize).min(size);
        let mut m = Array2::from_elem((size, size), false);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                if self.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    m[[y, x]] = true;
                }
            }
        }
        m
    }
}

fn rotate_into(dx: f64, dy: f64, theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (dx * c + dy * s, -dx * s + dy * c)
}

fn point_in_triangle(px: f64, py: f64, v: &[(f64, f64)]) -> bool {
    let sign = |a: (f64, f64), b: (f64, f64)| (px - b.0) * (a.1 - b.1) - (a.0 - b.0) * (py - b.1);
    let d1 = sign(v[0], v[1]);
    let d2 = sign(v[1], v[2]);
    let d3 = sign(v[2], v[0]);
    let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(has_neg && has_pos)
}

/// Category names and their fixed base colors (the appearance cue the
/// diffusion model conditions on).
pub const DEFAULT_CATEGORIES: [&str; 5] = ["circle", "square", "triangle", "ellipse", "bar"];

pub fn base_color(category: &str) -> [f32; 3] {
    match category {
        "circle" => [0.85, 0.25, 0.25],
        "square" => [0.25, 0.8, 0.3],
        "triangle" => [0.3, 0.4, 0.9],
        "ellipse" => [0.85, 0.8, 0.2],
        "bar" => [0.8, 0.3, 0.8],
        _ => [0.7, 0.7, 0.7],
    }
}

/// Shape construction for a category name; `scale` is the nominal radius.
pub fn shape_for_category(
    category: &str,
    cx: f64,
    cy: f64,
    scale: f64,
    theta: f64,
) -> Shape {
    match category {
        "circle" => Shape::Circle { cx, cy, r: scale },
        "square" => Shape::Square { cx, cy, half: scale / std::f64::consts::SQRT_2, theta },
        "triangle" => Shape::Triangle { cx, cy, r: scale, theta },
        "ellipse" => Shape::Ellipse { cx, cy, a: scale, b: scale * 0.55, theta },
        "bar" => Shape::Bar { cx, cy, half_l: scale, theta },
        _ => Shape::Circle { cx, cy, r: scale },
    }
}
