//! Points, oriented boxes and rotated-box overlap.
//!
//! Headings are yaw about +Z, counterclockwise from +X, with the box length
//! running along the heading direction. All IoU routines intersect the BEV
//! footprints as convex polygons (Sutherland–Hodgman) and, for 3D, multiply
//! by the vertical interval overlap.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn distance_sq(&self, other: &Point3) -> f64 {
        let (dx, dy, dz) = (self.x - other.x, self.y - other.y, self.z - other.z);
        dx * dx + dy * dy + dz * dz
    }
}

impl From<[f64; 3]> for Point3 {
    fn from(v: [f64; 3]) -> Self {
        Point3::new(v[0], v[1], v[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }

    fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }
}

/// A 7-DoF oriented box `(cx, cy, cz, l, w, h, heading)`.
///
/// Serialized as a flat `[cx, cy, cz, l, w, h, heading]` array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 7]", into = "[f64; 7]")]
pub struct Box7 {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub heading: f64,
}

impl Box7 {
    /// Validating constructor; the heading is wrapped into (−π, π].
    pub fn new(cx: f64, cy: f64, cz: f64, l: f64, w: f64, h: f64, heading: f64) -> Result<Self> {
        let b = Box7 {
            cx,
            cy,
            cz,
            l,
            w,
            h,
            heading: wrap_angle(heading),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.to_array();
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite component in {all:?}"
            )));
        }
        if !(self.l > 0.0 && self.w > 0.0 && self.h > 0.0) {
            return Err(Error::InvalidBox(format!(
                "sizes must be positive, got l={} w={} h={}",
                self.l, self.w, self.h
            )));
        }
        Ok(())
    }

    pub fn center(&self) -> Point3 {
        Point3::new(self.cx, self.cy, self.cz)
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    pub fn bev_area(&self) -> f64 {
        self.l * self.w
    }

    pub fn bottom(&self) -> f64 {
        self.cz - 0.5 * self.h
    }

    pub fn top(&self) -> f64 {
        self.cz + 0.5 * self.h
    }

    /// Squared XY distance between centers.
    pub fn bev_distance_sq(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (self.cx - x, self.cy - y);
        dx * dx + dy * dy
    }

    /// Axis-aligned extent of the BEV footprint as `(min_x, min_y, max_x, max_y)`.
    pub fn bev_aabb(&self) -> (f64, f64, f64, f64) {
        let (s, c) = self.heading.sin_cos();
        let hx = 0.5 * (self.l * c.abs() + self.w * s.abs());
        let hy = 0.5 * (self.l * s.abs() + self.w * c.abs());
        (self.cx - hx, self.cy - hy, self.cx + hx, self.cy + hy)
    }

    pub fn to_array(&self) -> [f64; 7] {
        [
            self.cx,
            self.cy,
            self.cz,
            self.l,
            self.w,
            self.h,
            self.heading,
        ]
    }
}

impl TryFrom<[f64; 7]> for Box7 {
    type Error = Error;

    fn try_from(v: [f64; 7]) -> Result<Self> {
        Box7::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6])
    }
}

impl From<Box7> for [f64; 7] {
    fn from(b: Box7) -> Self {
        b.to_array()
    }
}

/// A convex polygon with counterclockwise vertex order.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon2 {
    vertices: Vec<Vec2>,
}

impl Polygon2 {
    /// Builds a polygon from at least three vertices, reversing clockwise input.
    ///
    /// Convexity is assumed, not checked.
    pub fn new(mut vertices: Vec<Vec2>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::InvalidSpec(format!(
                "polygon needs at least 3 vertices, got {}",
                vertices.len()
            )));
        }
        if signed_area(&vertices) < 0.0 {
            vertices.reverse();
        }
        Ok(Self { vertices })
    }

    pub fn vertices(&self) -> &[Vec2] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices).abs()
    }
}

fn signed_area(v: &[Vec2]) -> f64 {
    if v.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..v.len() {
        let j = (i + 1) % v.len();
        acc += v[i].cross(v[j]);
    }
    0.5 * acc
}

/// Wraps an angle into (−π, π].
pub fn wrap_angle(theta: f64) -> f64 {
    if theta > -PI && theta <= PI {
        return theta;
    }
    let r = theta.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Footprint corners in counterclockwise order, starting at the front-left.
pub fn box_bev_corners(b: &Box7) -> Polygon2 {
    let (s, c) = b.heading.sin_cos();
    let (hl, hw) = (0.5 * b.l, 0.5 * b.w);
    let local = [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)];
    let vertices = local
        .iter()
        .map(|&(x, y)| Vec2::new(b.cx + c * x - s * y, b.cy + s * x + c * y))
        .collect();
    Polygon2 { vertices }
}

/// Area of `a ∩ b` for convex polygons.
pub fn convex_intersection_area(a: &Polygon2, b: &Polygon2) -> f64 {
    let clipped = clip_convex(a.vertices(), b.vertices());
    signed_area(&clipped).max(0.0)
}

// Sutherland–Hodgman: clip `subject` against every edge of the CCW `clip`
// polygon. Vertices on a clipping edge count as inside.
fn clip_convex(subject: &[Vec2], clip: &[Vec2]) -> Vec<Vec2> {
    let mut output: Vec<Vec2> = subject.to_vec();
    let mut input: Vec<Vec2> = Vec::with_capacity(subject.len() + clip.len());
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let edge = clip[(i + 1) % clip.len()].sub(a);
        std::mem::swap(&mut input, &mut output);
        output.clear();

        let side = |p: Vec2| edge.cross(p.sub(a));
        let mut prev = *input.last().unwrap();
        let mut prev_side = side(prev);
        for &cur in input.iter() {
            let cur_side = side(cur);
            if cur_side >= 0.0 {
                if prev_side < 0.0 {
                    output.push(lerp_at_zero(prev, cur, prev_side, cur_side));
                }
                output.push(cur);
            } else if prev_side >= 0.0 {
                output.push(lerp_at_zero(prev, cur, prev_side, cur_side));
            }
            prev = cur;
            prev_side = cur_side;
        }
    }
    output
}

fn lerp_at_zero(s: Vec2, e: Vec2, ds: f64, de: f64) -> Vec2 {
    let t = ds / (ds - de);
    Vec2::new(s.x + t * (e.x - s.x), s.y + t * (e.y - s.y))
}

fn aabb_disjoint(a: &Box7, b: &Box7) -> bool {
    let (ax0, ay0, ax1, ay1) = a.bev_aabb();
    let (bx0, by0, bx1, by1) = b.bev_aabb();
    ax1 < bx0 || bx1 < ax0 || ay1 < by0 || by1 < ay0
}

// (intersection, area a, area b) with all three areas from the same shoelace
// arithmetic, so identical footprints give an IoU of exactly 1.
// Disjoint footprints return a zero intersection without building polygons.
fn bev_overlap(a: &Box7, b: &Box7) -> (f64, f64, f64) {
    if aabb_disjoint(a, b) {
        return (0.0, a.bev_area(), b.bev_area());
    }
    let pa = box_bev_corners(a);
    let pb = box_bev_corners(b);
    (convex_intersection_area(&pa, &pb), pa.area(), pb.area())
}

/// BEV footprint intersection area.
pub fn bev_intersection_area(a: &Box7, b: &Box7) -> f64 {
    if aabb_disjoint(a, b) {
        return 0.0;
    }
    convex_intersection_area(&box_bev_corners(a), &box_bev_corners(b))
}

/// Oriented IoU of the BEV footprints.
pub fn iou_bev(a: &Box7, b: &Box7) -> f64 {
    let (inter, area_a, area_b) = bev_overlap(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Oriented 3D IoU: BEV intersection times vertical overlap.
pub fn iou_3d(a: &Box7, b: &Box7) -> f64 {
    let dz = a.top().min(b.top()) - a.bottom().max(b.bottom());
    if dz <= 0.0 {
        return 0.0;
    }
    let (inter_bev, area_a, area_b) = bev_overlap(a, b);
    let inter = inter_bev * dz;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = area_a * a.h + area_b * b.h - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Position of `p` in the box frame (translated, then rotated by −heading).
pub fn to_box_frame(p: &Point3, b: &Box7) -> Point3 {
    let (s, c) = b.heading.sin_cos();
    let (dx, dy) = (p.x - b.cx, p.y - b.cy);
    Point3::new(c * dx + s * dy, -s * dx + c * dy, p.z - b.cz)
}

/// Boundary-inclusive containment test.
pub fn point_in_box(p: &Point3, b: &Box7) -> bool {
    let q = to_box_frame(p, b);
    q.x.abs() <= 0.5 * b.l && q.y.abs() <= 0.5 * b.w && q.z.abs() <= 0.5 * b.h
}

/// Containment restricted to the BEV footprint.
pub fn point_in_box_bev(x: f64, y: f64, b: &Box7) -> bool {
    let q = to_box_frame(&Point3::new(x, y, b.cz), b);
    q.x.abs() <= 0.5 * b.l && q.y.abs() <= 0.5 * b.w
}
