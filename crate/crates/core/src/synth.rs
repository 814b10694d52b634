//! Deterministic synthetic scenes: oriented boxes with surface samples plus
//! uniform clutter, and the PLRD point file format.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{iou_bev, point_in_box, Box7, Point3};
use crate::views::{AxisRange, DETECTION_RANGE_XY, DETECTION_RANGE_Z};

pub const PLRD_MAGIC: &[u8; 4] = b"PLRD";
pub const PLRD_VERSION: u16 = 1;
pub const SIDECAR_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 2 + 8;

/// Sampled points are pulled this far toward the box center so they stay
/// strictly inside after rotation round-off.
const SURFACE_INSET: f64 = 0.98;

const LAYOUT_STREAM: u64 = 0;
const CLUTTER_STREAM: u64 = 1;
const FIRST_BOX_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeClass {
    pub class_id: u32,
    pub length: [f64; 2],
    pub width: [f64; 2],
    pub height: [f64; 2],
}

impl SizeClass {
    pub fn vehicle() -> Self {
        Self {
            class_id: 0,
            length: [3.5, 6.0],
            width: [1.6, 2.3],
            height: [1.4, 2.2],
        }
    }

    pub fn pedestrian() -> Self {
        Self {
            class_id: 1,
            length: [0.5, 1.0],
            width: [0.5, 1.0],
            height: [1.5, 1.95],
        }
    }
}

fn d_seed() -> u64 {
    0
}
fn d_box_count() -> [usize; 2] {
    [10, 30]
}
fn d_classes() -> Vec<SizeClass> {
    vec![SizeClass::vehicle()]
}
fn d_xy() -> AxisRange {
    AxisRange::new(-DETECTION_RANGE_XY, DETECTION_RANGE_XY)
}
fn d_z() -> AxisRange {
    DETECTION_RANGE_Z
}
fn d_points_per_box() -> [usize; 2] {
    [150, 400]
}
fn d_clutter() -> usize {
    5000
}
fn d_true() -> bool {
    true
}
fn d_attempts() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    #[serde(default = "d_seed")]
    pub seed: u64,
    /// Inclusive range of box counts.
    #[serde(default = "d_box_count")]
    pub box_count: [usize; 2],
    /// Box classes, drawn uniformly.
    #[serde(default = "d_classes")]
    pub classes: Vec<SizeClass>,
    #[serde(default = "d_xy")]
    pub range_x: AxisRange,
    #[serde(default = "d_xy")]
    pub range_y: AxisRange,
    #[serde(default = "d_z")]
    pub range_z: AxisRange,
    /// Inclusive range of points sampled per box.
    #[serde(default = "d_points_per_box")]
    pub points_per_box: [usize; 2],
    #[serde(default = "d_clutter")]
    pub clutter_points: usize,
    /// Reject layouts where two footprints overlap.
    #[serde(default = "d_true")]
    pub disjoint: bool,
    /// Share of each box's points drawn from the interior instead of the
    /// vertical faces.
    #[serde(default)]
    pub interior_fraction: f64,
    /// Placement attempts per box before giving up.
    #[serde(default = "d_attempts")]
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

fn check_range(name: &str, r: [f64; 2], positive: bool) -> Result<()> {
    let ok = r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] && (!positive || r[0] > 0.0);
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "{name} range {r:?} is invalid"
        )))
    }
}

impl SceneConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.box_count[0] > self.box_count[1] {
            return Err(Error::InvalidConfig(format!(
                "box count range {:?} is inverted",
                self.box_count
            )));
        }
        if self.points_per_box[0] > self.points_per_box[1] {
            return Err(Error::InvalidConfig(format!(
                "points per box range {:?} is inverted",
                self.points_per_box
            )));
        }
        if self.box_count[1] > 0 && self.classes.is_empty() {
            return Err(Error::InvalidConfig("no box classes configured".into()));
        }
        for c in &self.classes {
            check_range("length", c.length, true)?;
            check_range("width", c.width, true)?;
            check_range("height", c.height, true)?;
            if c.height[1] > self.range_z.span() {
                return Err(Error::InvalidConfig(format!(
                    "class {} is taller than the vertical range",
                    c.class_id
                )));
            }
        }
        for (name, r) in [
            ("x", self.range_x),
            ("y", self.range_y),
            ("z", self.range_z),
        ] {
            check_range(name, [r.min, r.max], false)?;
            if r.span() <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} placement range is empty"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.interior_fraction) {
            return Err(Error::InvalidConfig(format!(
                "interior fraction {} outside [0, 1]",
                self.interior_fraction
            )));
        }
        if self.max_attempts == 0 {
            return Err(Error::InvalidConfig("max_attempts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtBox {
    #[serde(rename = "box")]
    pub bbox: Box7,
    pub class_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub points: Vec<Point3>,
    pub gt: Vec<GtBox>,
    /// Points inside each gt box, counted over the whole scene.
    pub gt_points: Vec<usize>,
}

impl Scene {
    pub fn boxes(&self) -> Vec<Box7> {
        self.gt.iter().map(|g| g.bbox).collect()
    }

    /// Boxes and point counts restricted to one class.
    pub fn class_subset(&self, class_id: u32) -> (Vec<Box7>, Vec<usize>) {
        self.gt
            .iter()
            .zip(&self.gt_points)
            .filter(|(g, _)| g.class_id == class_id)
            .map(|(g, &n)| (g.bbox, n))
            .unzip()
    }
}

/// Generator for one entity of a scene; streams are independent.
pub fn entity_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn inside_range(b: &Box7, cfg: &SceneConfig) -> bool {
    let (x0, y0, x1, y1) = b.bev_aabb();
    cfg.range_x.contains(x0)
        && cfg.range_x.contains(x1)
        && cfg.range_y.contains(y0)
        && cfg.range_y.contains(y1)
        && cfg.range_z.contains(b.bottom())
        && cfg.range_z.contains(b.top())
}

fn place_boxes(cfg: &SceneConfig) -> Result<Vec<GtBox>> {
    let mut rng = entity_rng(cfg.seed, LAYOUT_STREAM);
    let n = rng.random_range(cfg.box_count[0]..=cfg.box_count[1]);
    let mut boxes: Vec<GtBox> = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while boxes.len() < n {
        if attempts >= cfg.max_attempts * n {
            return Err(Error::SceneTooCrowded { attempts });
        }
        attempts += 1;
        let class = &cfg.classes[rng.random_range(0..cfg.classes.len())];
        let (l, w, h) = (
            uniform(&mut rng, class.length),
            uniform(&mut rng, class.width),
            uniform(&mut rng, class.height),
        );
        let cz = uniform(
            &mut rng,
            [cfg.range_z.min + 0.5 * h, cfg.range_z.max - 0.5 * h],
        );
        let cx = rng.random_range(cfg.range_x.min..cfg.range_x.max);
        let cy = rng.random_range(cfg.range_y.min..cfg.range_y.max);
        let heading = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let b = Box7::new(cx, cy, cz, l, w, h, heading)?;
        if !inside_range(&b, cfg) {
            continue;
        }
        if cfg.disjoint && boxes.iter().any(|o| iou_bev(&o.bbox, &b) > 0.0) {
            continue;
        }
        boxes.push(GtBox {
            bbox: b,
            class_id: class.class_id,
        });
    }
    Ok(boxes)
}

/// Maps box-frame coordinates (in units of the half extents) to the world.
fn box_point(b: &Box7, u: f64, v: f64, t: f64) -> Point3 {
    let (s, c) = b.heading.sin_cos();
    let (lx, ly) = (0.5 * b.l * u * SURFACE_INSET, 0.5 * b.w * v * SURFACE_INSET);
    Point3::new(
        b.cx + c * lx - s * ly,
        b.cy + s * lx + c * ly,
        b.cz + 0.5 * b.h * t * SURFACE_INSET,
    )
}

fn sample_box(b: &Box7, cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    let n = rng.random_range(cfg.points_per_box[0]..=cfg.points_per_box[1]);
    let side = b.l / (b.l + b.w);
    (0..n)
        .map(|_| {
            let t = rng.random_range(-1.0..=1.0);
            if cfg.interior_fraction > 0.0 && rng.random_bool(cfg.interior_fraction) {
                let u = rng.random_range(-1.0..=1.0);
                let v = rng.random_range(-1.0..=1.0);
                return box_point(b, u, v, t);
            }
            let along = rng.random_range(-1.0..=1.0);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            // long faces in proportion to their area
            if rng.random_bool(side) {
                box_point(b, along, sign, t)
            } else {
                box_point(b, sign, along, t)
            }
        })
        .collect()
}

pub fn count_points_in_boxes(points: &[Point3], gt: &[GtBox]) -> Vec<usize> {
    gt.par_iter()
        .map(|g| points.iter().filter(|p| point_in_box(p, &g.bbox)).count())
        .collect()
}

/// Builds the scene determined by `cfg`.
pub fn generate(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let gt = place_boxes(cfg)?;
    let per_box: Vec<Vec<Point3>> = gt
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let mut rng = entity_rng(cfg.seed, FIRST_BOX_STREAM + i as u64);
            sample_box(&g.bbox, cfg, &mut rng)
        })
        .collect();
    let mut rng = entity_rng(cfg.seed, CLUTTER_STREAM);
    let clutter = (0..cfg.clutter_points).map(|_| {
        Point3::new(
            rng.random_range(cfg.range_x.min..=cfg.range_x.max),
            rng.random_range(cfg.range_y.min..=cfg.range_y.max),
            rng.random_range(cfg.range_z.min..=cfg.range_z.max),
        )
    });
    let mut points: Vec<Point3> = per_box.into_iter().flatten().collect();
    points.extend(clutter);
    let gt_points = count_points_in_boxes(&points, &gt);
    Ok(Scene {
        points,
        gt,
        gt_points,
    })
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty());
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidConfig(format!("{} has no file name", path.display())))?;
    let tmp = dir.unwrap_or(Path::new(".")).join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(res?)
}

pub fn encode_points(points: &[Point3]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 24 * points.len());
    out.extend_from_slice(PLRD_MAGIC);
    out.extend_from_slice(&PLRD_VERSION.to_le_bytes());
    out.extend_from_slice(&(points.len() as u64).to_le_bytes());
    for p in points {
        for v in p.to_array() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_points(bytes: &[u8], path: &Path) -> Result<Vec<Point3>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::malformed(path, "shorter than the PLRD header"));
    }
    if &bytes[..4] != PLRD_MAGIC {
        return Err(Error::malformed(path, "missing PLRD magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != PLRD_VERSION {
        return Err(Error::malformed(
            path,
            format!("unsupported PLRD version {version}"),
        ));
    }
    let count = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes"));
    let payload = &bytes[HEADER_LEN..];
    let expected = count.checked_mul(24);
    if expected != Some(payload.len() as u64) {
        return Err(Error::malformed(
            path,
            format!(
                "header declares {count} points but payload holds {} bytes",
                payload.len()
            ),
        ));
    }
    Ok(payload
        .chunks_exact(24)
        .map(|c| {
            let f = |i: usize| f64::from_le_bytes(c[i..i + 8].try_into().expect("8 bytes"));
            Point3::new(f(0), f(8), f(16))
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SidecarBox {
    #[serde(rename = "box")]
    pub bbox: Box7,
    pub class_id: u32,
    pub num_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub version: u32,
    pub num_points: usize,
    pub boxes: Vec<SidecarBox>,
}

/// The label file stored next to a point file.
pub fn sidecar_path(points_path: &Path) -> PathBuf {
    points_path.with_extension("json")
}

/// Writes `path` (PLRD points) and its JSON sidecar.
pub fn write_scene(scene: &Scene, path: &Path) -> Result<()> {
    if scene.gt_points.len() != scene.gt.len() {
        return Err(Error::mismatch(
            format!("{} per-box counts", scene.gt.len()),
            scene.gt_points.len(),
        ));
    }
    let sidecar = Sidecar {
        version: SIDECAR_VERSION,
        num_points: scene.points.len(),
        boxes: scene
            .gt
            .iter()
            .zip(&scene.gt_points)
            .map(|(g, &n)| SidecarBox {
                bbox: g.bbox,
                class_id: g.class_id,
                num_points: n,
            })
            .collect(),
    };
    let mut json = serde_json::to_vec_pretty(&sidecar)?;
    json.push(b'\n');
    write_atomic(&sidecar_path(path), &json)?;
    write_atomic(path, &encode_points(&scene.points))
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    let points = decode_points(&fs::read(path)?, path)?;
    let side = sidecar_path(path);
    let sidecar: Sidecar = serde_json::from_slice(&fs::read(&side)?)
        .map_err(|e| Error::malformed(&side, e.to_string()))?;
    if sidecar.version != SIDECAR_VERSION {
        return Err(Error::malformed(
            &side,
            format!("unsupported sidecar version {}", sidecar.version),
        ));
    }
    if sidecar.num_points != points.len() {
        return Err(Error::malformed(
            &side,
            format!(
                "sidecar declares {} points, point file holds {}",
                sidecar.num_points,
                points.len()
            ),
        ));
    }
    let (gt, gt_points) = sidecar
        .boxes
        .into_iter()
        .map(|b| {
            (
                GtBox {
                    bbox: b.bbox,
                    class_id: b.class_id,
                },
                b.num_points,
            )
        })
        .unzip();
    Ok(Scene {
        points,
        gt,
        gt_points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::point_in_box;

    fn small(seed: u64) -> SceneConfig {
        SceneConfig {
            seed,
            clutter_points: 500,
            ..Default::default()
        }
    }

    #[test]
    fn defaults() {
        let c = SceneConfig::default();
        assert_eq!(c.box_count, [10, 30]);
        assert_eq!((c.range_x.min, c.range_x.max), (-75.2, 75.2));
        assert_eq!((c.range_z.min, c.range_z.max), (-3.0, 3.0));
        assert!(c.disjoint);
        c.validate().unwrap();
        assert!(serde_json::from_str::<SceneConfig>(r#"{"sed":1}"#).is_err());
    }

    #[test]
    fn empty_layout_gives_only_clutter() {
        let cfg = SceneConfig {
            box_count: [0, 0],
            clutter_points: 300,
            ..Default::default()
        };
        let s = generate(&cfg).unwrap();
        assert!(s.gt.is_empty());
        assert_eq!(s.points.len(), 300);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = generate(&small(7)).unwrap();
        let b = generate(&small(7)).unwrap();
        assert_eq!(a, b);
        let c = generate(&small(8)).unwrap();
        assert_ne!(a.points, c.points);
    }

    #[test]
    fn invariants_hold() {
        for seed in 0..5 {
            let cfg = small(seed);
            let s = generate(&cfg).unwrap();
            assert!((10..=30).contains(&s.gt.len()));
            for (i, g) in s.gt.iter().enumerate() {
                assert!(inside_range(&g.bbox, &cfg));
                for o in &s.gt[i + 1..] {
                    assert_eq!(iou_bev(&g.bbox, &o.bbox), 0.0);
                }
            }
            // recount oracle
            for (g, &n) in s.gt.iter().zip(&s.gt_points) {
                let brute = s.points.iter().filter(|p| point_in_box(p, &g.bbox)).count();
                assert_eq!(n, brute);
                assert!(n >= 150);
            }
            for p in &s.points {
                assert!(s.gt.iter().filter(|g| point_in_box(p, &g.bbox)).count() <= 1);
                assert!(cfg.range_x.contains(p.x) && cfg.range_y.contains(p.y));
                assert!(cfg.range_z.contains(p.z));
            }
        }
    }

    #[test]
    fn interior_sampling_stays_inside() {
        let cfg = SceneConfig {
            interior_fraction: 0.5,
            clutter_points: 0,
            ..small(3)
        };
        let s = generate(&cfg).unwrap();
        assert_eq!(s.gt_points.iter().sum::<usize>(), s.points.len());
    }

    #[test]
    fn crowded_range_errors() {
        let cfg = SceneConfig {
            box_count: [30, 30],
            range_x: AxisRange::new(-6.0, 6.0),
            range_y: AxisRange::new(-6.0, 6.0),
            max_attempts: 20,
            ..Default::default()
        };
        assert!(matches!(generate(&cfg), Err(Error::SceneTooCrowded { .. })));
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.plrd");
        let s = generate(&small(2)).unwrap();
        write_scene(&s, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 14 + 24 * s.points.len());
        assert_eq!(&bytes[..4], b"PLRD");
        let back = read_scene(&path).unwrap();
        assert_eq!(back, s);

        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(read_scene(&path), Err(Error::Malformed { .. })));
        fs::write(&path, &bytes[..10]).unwrap();
        assert!(matches!(read_scene(&path), Err(Error::Malformed { .. })));
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        fs::write(&path, &wrong_magic).unwrap();
        assert!(matches!(read_scene(&path), Err(Error::Malformed { .. })));
        // count field one too high for the payload
        let mut wrong_count = bytes.clone();
        let n = s.points.len() as u64 + 1;
        wrong_count[6..14].copy_from_slice(&n.to_le_bytes());
        fs::write(&path, &wrong_count).unwrap();
        assert!(matches!(read_scene(&path), Err(Error::Malformed { .. })));
    }

    #[test]
    fn entity_streams_are_independent() {
        let mut a = entity_rng(1, 5);
        let mut b = entity_rng(1, 6);
        let mut a2 = entity_rng(1, 5);
        let x: u64 = a.random();
        assert_ne!(x, b.random::<u64>());
        assert_eq!(x, a2.random::<u64>());
    }
}
