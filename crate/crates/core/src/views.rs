//! View projections (BEV, spherical, cylindrical, XZ) and uniform 2D binning.
//!
//! Every view maps a point to `(u, v, depth)`: `u`/`v` are the two grid axes
//! and `depth` is the coordinate projected out of the grid. Rows index `u`
//! (`bins[0]` of them) and columns index `v` (`bins[1]`).

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Point3;

/// Horizontal detection half-extent in meters.
pub const DETECTION_RANGE_XY: f64 = 75.2;
/// Vertical detection range in meters.
pub const DETECTION_RANGE_Z: AxisRange = AxisRange::new(-3.0, 3.0);
/// Maximum range for spherical/cylindrical depth in meters.
pub const MAX_DEPTH: f64 = 107.0;
pub const DEFAULT_BINS: [usize; 2] = [512, 512];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewKind {
    Bev,
    Spv,
    Cyv,
    Xz,
}

/// Which side of the XZ plane an XZ view covers; `y = 0` belongs to `Positive`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Half {
    Positive,
    Negative,
}

impl Half {
    pub fn contains(self, y: f64) -> bool {
        match self {
            Half::Positive => y >= 0.0,
            Half::Negative => y < 0.0,
        }
    }
}

/// Closed interval `[min, max]`, serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct AxisRange {
    pub min: f64,
    pub max: f64,
}

impl AxisRange {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn span(&self) -> f64 {
        self.max - self.min
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.min + self.max)
    }

    fn is_valid(&self) -> bool {
        self.min.is_finite() && self.max.is_finite() && self.min < self.max
    }
}

impl From<[f64; 2]> for AxisRange {
    fn from(v: [f64; 2]) -> Self {
        AxisRange::new(v[0], v[1])
    }
}

impl From<AxisRange> for [f64; 2] {
    fn from(r: AxisRange) -> Self {
        [r.min, r.max]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewCoord {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewSpec {
    pub kind: ViewKind,
    pub axis0: AxisRange,
    pub axis1: AxisRange,
    /// Optional filter on the projected-out coordinate.
    #[serde(default)]
    pub depth: Option<AxisRange>,
    pub bins: [usize; 2],
    /// Required for XZ views, forbidden otherwise.
    #[serde(default)]
    pub half: Option<Half>,
}

impl ViewSpec {
    pub fn bev() -> Self {
        let xy = AxisRange::new(-DETECTION_RANGE_XY, DETECTION_RANGE_XY);
        Self {
            kind: ViewKind::Bev,
            axis0: xy,
            axis1: xy,
            depth: Some(DETECTION_RANGE_Z),
            bins: DEFAULT_BINS,
            half: None,
        }
    }

    pub fn spherical() -> Self {
        Self {
            kind: ViewKind::Spv,
            axis0: AxisRange::new(0.0, TAU),
            axis1: AxisRange::new(0.485 * PI, 0.55 * PI),
            depth: Some(AxisRange::new(0.0, MAX_DEPTH)),
            bins: DEFAULT_BINS,
            half: None,
        }
    }

    pub fn cylindrical() -> Self {
        Self {
            kind: ViewKind::Cyv,
            axis0: AxisRange::new(0.0, TAU),
            axis1: DETECTION_RANGE_Z,
            depth: Some(AxisRange::new(0.0, MAX_DEPTH)),
            bins: DEFAULT_BINS,
            half: None,
        }
    }

    pub fn xz(half: Half) -> Self {
        let xy = AxisRange::new(-DETECTION_RANGE_XY, DETECTION_RANGE_XY);
        Self {
            kind: ViewKind::Xz,
            axis0: xy,
            axis1: DETECTION_RANGE_Z,
            depth: Some(xy),
            bins: DEFAULT_BINS,
            half: Some(half),
        }
    }

    pub fn with_bins(mut self, rows: usize, cols: usize) -> Self {
        self.bins = [rows, cols];
        self
    }

    pub fn rows(&self) -> usize {
        self.bins[0]
    }

    pub fn cols(&self) -> usize {
        self.bins[1]
    }

    pub fn num_bins(&self) -> usize {
        self.bins[0] * self.bins[1]
    }

    /// Bin size along `u` and `v`.
    pub fn pitch(&self) -> (f64, f64) {
        (
            self.axis0.span() / self.bins[0] as f64,
            self.axis1.span() / self.bins[1] as f64,
        )
    }

    pub fn flat_index(&self, row: usize, col: usize) -> usize {
        row * self.bins[1] + col
    }

    pub fn unflatten(&self, index: usize) -> (usize, usize) {
        (index / self.bins[1], index % self.bins[1])
    }

    pub fn validate(&self) -> Result<()> {
        if !self.axis0.is_valid() || !self.axis1.is_valid() {
            return Err(Error::InvalidSpec(format!(
                "axis ranges must satisfy min < max: {:?}, {:?}",
                self.axis0, self.axis1
            )));
        }
        if let Some(d) = self.depth {
            if !d.is_valid() {
                return Err(Error::InvalidSpec(format!("invalid depth range {d:?}")));
            }
        }
        if self.bins[0] == 0 || self.bins[1] == 0 {
            return Err(Error::InvalidSpec(format!(
                "bins must be positive, got {:?}",
                self.bins
            )));
        }
        match (self.kind, self.half) {
            (ViewKind::Xz, None) => Err(Error::InvalidSpec("XZ view needs a half-space".into())),
            (k, Some(_)) if k != ViewKind::Xz => Err(Error::InvalidSpec(format!(
                "half-space only applies to XZ views, not {k:?}"
            ))),
            _ => Ok(()),
        }
    }

    /// Projects `p` and applies the half-space and depth filters.
    ///
    /// Returns `None` when the projection is undefined or filtered out; the
    /// grid-axis range test is left to [`bin_of`].
    pub fn view_coord(&self, p: &Point3) -> Option<ViewCoord> {
        if let Some(half) = self.half {
            if !half.contains(p.y) {
                return None;
            }
        }
        let c = project(p, self.kind).ok()?;
        match self.depth {
            Some(d) if !d.contains(c.depth) => None,
            _ => Some(c),
        }
    }

    /// Full point-to-bin lookup: projection, filters and binning.
    pub fn bin_of_point(&self, p: &Point3) -> Option<(usize, usize)> {
        self.view_coord(p).and_then(|c| bin_of(&c, self))
    }
}

/// Projects a point into the coordinates of `kind`.
///
/// Azimuths use `atan2` mapped into [0, 2π).
pub fn project(p: &Point3, kind: ViewKind) -> Result<ViewCoord> {
    match kind {
        ViewKind::Bev => Ok(ViewCoord {
            u: p.x,
            v: p.y,
            depth: p.z,
        }),
        ViewKind::Xz => Ok(ViewCoord {
            u: p.x,
            v: p.z,
            depth: p.y,
        }),
        ViewKind::Spv => {
            if p.x == 0.0 && p.y == 0.0 {
                return Err(Error::AngleUndefined);
            }
            let d = (p.x * p.x + p.y * p.y + p.z * p.z).sqrt();
            let theta = (p.z / d).clamp(-1.0, 1.0).acos();
            Ok(ViewCoord {
                u: azimuth(p.x, p.y),
                v: theta,
                depth: d,
            })
        }
        ViewKind::Cyv => {
            let rho = p.x.hypot(p.y);
            if rho == 0.0 {
                return Err(Error::AngleUndefined);
            }
            Ok(ViewCoord {
                u: azimuth(p.x, p.y),
                v: p.z,
                depth: rho,
            })
        }
    }
}

fn azimuth(x: f64, y: f64) -> f64 {
    let phi = y.atan2(x);
    if phi >= 0.0 {
        return phi;
    }
    let wrapped = phi + TAU;
    // tiny negative angles round up to exactly 2π
    if wrapped >= TAU {
        0.0
    } else {
        wrapped
    }
}

/// Inverse of [`project`].
pub fn unproject(c: &ViewCoord, kind: ViewKind) -> Point3 {
    match kind {
        ViewKind::Bev => Point3::new(c.u, c.v, c.depth),
        ViewKind::Xz => Point3::new(c.u, c.depth, c.v),
        ViewKind::Spv => {
            let (st, ct) = c.v.sin_cos();
            let (sp, cp) = c.u.sin_cos();
            Point3::new(c.depth * st * cp, c.depth * st * sp, c.depth * ct)
        }
        ViewKind::Cyv => {
            let (sp, cp) = c.u.sin_cos();
            Point3::new(c.depth * cp, c.depth * sp, c.v)
        }
    }
}

fn axis_bin(x: f64, range: &AxisRange, n: usize) -> Option<usize> {
    if !range.contains(x) {
        return None;
    }
    let idx = ((x - range.min) / range.span() * n as f64).floor() as usize;
    Some(idx.min(n - 1))
}

/// Grid cell of a view coordinate; `None` outside either axis range.
///
/// The upper edge of each range is inclusive and lands in the last bin.
pub fn bin_of(c: &ViewCoord, spec: &ViewSpec) -> Option<(usize, usize)> {
    let row = axis_bin(c.u, &spec.axis0, spec.bins[0])?;
    let col = axis_bin(c.v, &spec.axis1, spec.bins[1])?;
    Some((row, col))
}

/// Continuous coordinates of a bin center. `depth` is the midpoint of the
/// depth filter, or 0 without one.
pub fn bin_center(row: usize, col: usize, spec: &ViewSpec) -> Result<ViewCoord> {
    if row >= spec.bins[0] || col >= spec.bins[1] {
        return Err(Error::IndexOutOfRange {
            row,
            col,
            rows: spec.bins[0],
            cols: spec.bins[1],
        });
    }
    let (pu, pv) = spec.pitch();
    Ok(ViewCoord {
        u: spec.axis0.min + (row as f64 + 0.5) * pu,
        v: spec.axis1.min + (col as f64 + 0.5) * pv,
        depth: spec.depth.map_or(0.0, |d| d.midpoint()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cylindrical_examples() {
        let c = project(&Point3::new(1.0, 0.0, 2.0), ViewKind::Cyv).unwrap();
        assert_eq!((c.u, c.v, c.depth), (0.0, 2.0, 1.0));
        let c = project(&Point3::new(3.0, 4.0, 1.0), ViewKind::Cyv).unwrap();
        assert!((c.u - 0.927_295_218_001_612_2).abs() < 1e-12);
        assert_eq!(c.v, 1.0);
        assert!((c.depth - 5.0).abs() < 1e-15);
        assert!(matches!(
            project(&Point3::new(0.0, 0.0, 1.0), ViewKind::Cyv),
            Err(Error::AngleUndefined)
        ));
    }

    #[test]
    fn spherical_pole_is_undefined() {
        assert!(matches!(
            project(&Point3::new(0.0, 0.0, 1.0), ViewKind::Spv),
            Err(Error::AngleUndefined)
        ));
        assert!(project(&Point3::ORIGIN, ViewKind::Spv).is_err());
    }

    #[test]
    fn azimuth_covers_full_turn() {
        let c = project(&Point3::new(0.0, -1.0, 0.0), ViewKind::Cyv).unwrap();
        assert!((c.u - 1.5 * PI).abs() < 1e-15);
        let c = project(&Point3::new(1.0, -1e-300, 0.0), ViewKind::Cyv).unwrap();
        assert!(c.u >= 0.0 && c.u < TAU);
    }

    #[test]
    fn binning_edges() {
        let spec = ViewSpec::bev();
        let at = |u: f64| {
            bin_of(
                &ViewCoord {
                    u,
                    v: 0.0,
                    depth: 0.0,
                },
                &spec,
            )
        };
        assert_eq!(at(-75.2).unwrap().0, 0);
        assert_eq!(at(75.2).unwrap().0, 511);
        assert_eq!(at(0.0).unwrap().0, 256);
        assert!(at(75.3).is_none());
        assert!(at(-75.21).is_none());
    }

    #[test]
    fn bin_center_examples() {
        let unit = ViewSpec {
            kind: ViewKind::Bev,
            axis0: AxisRange::new(0.0, 1.0),
            axis1: AxisRange::new(0.0, 1.0),
            depth: None,
            bins: [1, 1],
            half: None,
        };
        let c = bin_center(0, 0, &unit).unwrap();
        assert_eq!((c.u, c.v), (0.5, 0.5));
        assert!(bin_center(1, 0, &unit).is_err());

        let c = bin_center(0, 0, &ViewSpec::bev()).unwrap();
        assert!((c.u - (-75.053125)).abs() < 1e-12);
    }

    #[test]
    fn bin_center_round_trips() {
        for spec in [
            ViewSpec::bev().with_bins(64, 48),
            ViewSpec::spherical().with_bins(37, 5),
            ViewSpec::cylindrical(),
            ViewSpec::xz(Half::Negative).with_bins(100, 3),
        ] {
            for r in 0..spec.rows() {
                for c in 0..spec.cols() {
                    let center = bin_center(r, c, &spec).unwrap();
                    assert_eq!(bin_of(&center, &spec), Some((r, c)));
                }
            }
        }
    }

    #[test]
    fn default_ranges() {
        let bev = ViewSpec::bev();
        assert_eq!((bev.axis0.min, bev.axis0.max), (-75.2, 75.2));
        assert_eq!((bev.axis1.min, bev.axis1.max), (-75.2, 75.2));
        assert_eq!(bev.depth, Some(AxisRange::new(-3.0, 3.0)));
        let spv = ViewSpec::spherical();
        assert_eq!(spv.axis0, AxisRange::new(0.0, 2.0 * PI));
        assert_eq!(spv.axis1, AxisRange::new(0.485 * PI, 0.55 * PI));
        assert_eq!(spv.depth, Some(AxisRange::new(0.0, 107.0)));
        let cyv = ViewSpec::cylindrical();
        assert_eq!(cyv.axis0, AxisRange::new(0.0, 2.0 * PI));
        assert_eq!(cyv.axis1, AxisRange::new(-3.0, 3.0));
        assert_eq!(cyv.depth, Some(AxisRange::new(0.0, 107.0)));
        for half in [Half::Positive, Half::Negative] {
            let xz = ViewSpec::xz(half);
            assert_eq!(xz.axis0, AxisRange::new(-75.2, 75.2));
            assert_eq!(xz.axis1, AxisRange::new(-3.0, 3.0));
            xz.validate().unwrap();
        }
        assert_eq!(bev.bins, [512, 512]);
    }

    #[test]
    fn xz_halves_partition_points() {
        let pos = ViewSpec::xz(Half::Positive);
        let neg = ViewSpec::xz(Half::Negative);
        let on_plane = Point3::new(1.0, 0.0, 0.0);
        assert!(pos.bin_of_point(&on_plane).is_some());
        assert!(neg.bin_of_point(&on_plane).is_none());
        let below = Point3::new(1.0, -0.5, 0.0);
        assert!(pos.bin_of_point(&below).is_none());
        assert!(neg.bin_of_point(&below).is_some());
    }

    #[test]
    fn invalid_specs() {
        let mut s = ViewSpec::bev();
        s.axis0 = AxisRange::new(1.0, 1.0);
        assert!(s.validate().is_err());
        assert!(ViewSpec::bev().with_bins(0, 4).validate().is_err());
        let mut x = ViewSpec::xz(Half::Positive);
        x.half = None;
        assert!(x.validate().is_err());
        let mut b = ViewSpec::bev();
        b.half = Some(Half::Positive);
        assert!(b.validate().is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = ViewSpec::xz(Half::Negative);
        let json = serde_json::to_string(&spec).unwrap();
        let back: ViewSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        assert!(serde_json::from_str::<ViewSpec>(
            r#"{"kind":"bev","axis0":[0,1],"axis1":[0,1],"bins":[1,1],"extra":1}"#
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn cylindrical_keeps_z(x in -100.0..100.0f64, y in -100.0..100.0f64, z in -5.0..5.0f64) {
            prop_assume!(x != 0.0 || y != 0.0);
            let c = project(&Point3::new(x, y, z), ViewKind::Cyv).unwrap();
            prop_assert_eq!(c.v.to_bits(), z.to_bits());
        }

        #[test]
        fn in_range_points_bin_near_center(x in -75.2..75.2f64, y in -75.2..75.2f64, z in -3.0..3.0f64) {
            let p = Point3::new(x, y, z);
            for spec in [ViewSpec::bev(), ViewSpec::cylindrical(), ViewSpec::xz(Half::Positive), ViewSpec::xz(Half::Negative)] {
                let Some(c) = spec.view_coord(&p) else { continue };
                if !spec.axis0.contains(c.u) || !spec.axis1.contains(c.v) { continue; }
                let (r, col) = bin_of(&c, &spec).unwrap();
                let center = bin_center(r, col, &spec).unwrap();
                let (pu, pv) = spec.pitch();
                prop_assert!((center.u - c.u).abs() <= 0.5 * pu * (1.0 + 1e-9));
                prop_assert!((center.v - c.v).abs() <= 0.5 * pv * (1.0 + 1e-9));
            }
        }
    }
}
