//! Target assignment for anchor-, point- and pillar-based heads, plus the
//! shared 7-DoF box codec.
//!
//! All three paradigms regress the same parameterization relative to a
//! reference point `(x^p, y^p, z^p)`: center offsets `ref − center`, log sizes,
//! and the raw heading. The paradigms differ only in which units exist and
//! how labels are decided.

use std::f64::consts::FRAC_PI_2;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{iou_bev, point_in_box, point_in_box_bev, wrap_angle, Box7, Point3};
use crate::views::{bin_center, ViewKind, ViewSpec};

/// `(dx, dy, dz, dl, dw, dh, theta_p)`; serialized as a flat array.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 7]", into = "[f64; 7]")]
pub struct RegressionTarget {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub dl: f64,
    pub dw: f64,
    pub dh: f64,
    pub theta_p: f64,
}

impl RegressionTarget {
    pub fn to_array(&self) -> [f64; 7] {
        [
            self.dx,
            self.dy,
            self.dz,
            self.dl,
            self.dw,
            self.dh,
            self.theta_p,
        ]
    }

    pub fn from_array(v: [f64; 7]) -> Self {
        Self {
            dx: v[0],
            dy: v[1],
            dz: v[2],
            dl: v[3],
            dw: v[4],
            dh: v[5],
            theta_p: v[6],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

impl From<[f64; 7]> for RegressionTarget {
    fn from(v: [f64; 7]) -> Self {
        Self::from_array(v)
    }
}

impl From<RegressionTarget> for [f64; 7] {
    fn from(t: RegressionTarget) -> Self {
        t.to_array()
    }
}

/// The target whose regression loss against `b` vanishes at reference `r`.
pub fn encode(b: &Box7, r: &Point3) -> RegressionTarget {
    RegressionTarget {
        dx: r.x - b.cx,
        dy: r.y - b.cy,
        dz: r.z - b.cz,
        dl: b.l.ln(),
        dw: b.w.ln(),
        dh: b.h.ln(),
        theta_p: b.heading,
    }
}

/// Inverse of [`encode`]; the heading is wrapped into (−π, π].
pub fn decode(t: &RegressionTarget, r: &Point3) -> Box7 {
    Box7 {
        cx: r.x - t.dx,
        cy: r.y - t.dy,
        cz: r.z - t.dz,
        l: t.dl.exp(),
        w: t.dw.exp(),
        h: t.dh.exp(),
        heading: wrap_angle(t.theta_p),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    /// Matched to the ground-truth box with this index.
    Positive(usize),
    Negative,
    /// Excluded from every loss term.
    Ignore,
}

impl Label {
    pub fn gt_index(&self) -> Option<usize> {
        match self {
            Label::Positive(g) => Some(*g),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitKind {
    Anchor,
    Point,
    Pillar,
}

fn default_orientations() -> Vec<f64> {
    vec![0.0, FRAC_PI_2]
}

fn default_positive_iou() -> f64 {
    0.6
}

fn default_negative_iou() -> f64 {
    0.45
}

/// Anchor template for one class. Defaults describe a passenger vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorSpec {
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub center_z: f64,
    #[serde(default = "default_orientations")]
    pub orientations: Vec<f64>,
    #[serde(default = "default_positive_iou")]
    pub positive_iou: f64,
    #[serde(default = "default_negative_iou")]
    pub negative_iou: f64,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        Self {
            length: 4.73,
            width: 2.08,
            height: 1.77,
            center_z: 0.0,
            orientations: default_orientations(),
            positive_iou: default_positive_iou(),
            negative_iou: default_negative_iou(),
        }
    }
}

impl AnchorSpec {
    pub fn validate(&self) -> Result<()> {
        let sizes = [self.length, self.width, self.height];
        if sizes.iter().any(|&s| !(s.is_finite() && s > 0.0)) || !self.center_z.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "anchor sizes must be positive and finite, got {sizes:?}"
            )));
        }
        if self.orientations.is_empty() || self.orientations.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidConfig(
                "anchor orientations must be non-empty".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.negative_iou)
            || !(0.0..=1.0).contains(&self.positive_iou)
            || self.negative_iou > self.positive_iou
        {
            return Err(Error::InvalidConfig(format!(
                "anchor IoU thresholds need 0 <= negative ({}) <= positive ({}) <= 1",
                self.negative_iou, self.positive_iou
            )));
        }
        Ok(())
    }

    /// The anchor box at flat anchor index `index` of `grid`.
    pub fn anchor_box(&self, grid: &ViewSpec, index: usize) -> Box7 {
        let n_o = self.orientations.len();
        let (row, col) = grid.unflatten(index / n_o);
        let c = bin_center(row, col, grid).expect("anchor index within grid");
        Box7 {
            cx: c.u,
            cy: c.v,
            cz: self.center_z,
            l: self.length,
            w: self.width,
            h: self.height,
            heading: wrap_angle(self.orientations[index % n_o]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelCounts {
    pub positive: usize,
    pub negative: usize,
    pub ignore: usize,
}

/// Per-unit labels, reference points and (for positives) regression targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub kind: UnitKind,
    pub labels: Vec<Label>,
    pub refs: Vec<Point3>,
    pub targets: Vec<Option<RegressionTarget>>,
}

impl Assignment {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn counts(&self) -> LabelCounts {
        let mut c = LabelCounts::default();
        for l in &self.labels {
            match l {
                Label::Positive(_) => c.positive += 1,
                Label::Negative => c.negative += 1,
                Label::Ignore => c.ignore += 1,
            }
        }
        c
    }

    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.gt_index().map(|g| (i, g)))
    }

    /// Label counts; an empty assignment reports a positive fraction of 0.
    pub fn summary(&self) -> AssignmentSummary {
        let counts = self.counts();
        AssignmentSummary {
            unit_kind: self.kind,
            units: self.len(),
            positive: counts.positive,
            negative: counts.negative,
            ignore: counts.ignore,
            positive_fraction: positive_fraction(self).unwrap_or(0.0),
        }
    }

    fn from_labels(kind: UnitKind, labels: Vec<Label>, refs: Vec<Point3>, gt: &[Box7]) -> Self {
        let targets = labels
            .iter()
            .zip(&refs)
            .map(|(l, r)| l.gt_index().map(|g| encode(&gt[g], r)))
            .collect();
        Self {
            kind,
            labels,
            refs,
            targets,
        }
    }
}

/// Share of units labelled positive.
pub fn positive_fraction(a: &Assignment) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::EmptyAssignment);
    }
    Ok(a.counts().positive as f64 / a.len() as f64)
}

fn require_bev(spec: &ViewSpec) -> Result<()> {
    spec.validate()?;
    if spec.kind != ViewKind::Bev {
        return Err(Error::InvalidSpec(format!(
            "assignment grids must be BEV, got {:?}",
            spec.kind
        )));
    }
    Ok(())
}

/// Reference height for BEV pillars: middle of the vertical range.
pub fn pillar_z_ref(spec: &ViewSpec) -> f64 {
    spec.depth.map_or(0.0, |d| d.midpoint())
}

/// Reference point of pillar `flat` in a BEV grid.
pub fn pillar_ref(spec: &ViewSpec, flat: usize) -> Point3 {
    let (r, c) = spec.unflatten(flat);
    let center = bin_center(r, c, spec).expect("pillar index within grid");
    Point3::new(center.u, center.v, pillar_z_ref(spec))
}

// Inclusive index range of bins along one axis whose centers may fall in
// [lo, hi]; padded by one bin on each side.
fn center_index_range(lo: f64, hi: f64, min: f64, pitch: f64, n: usize) -> Option<(usize, usize)> {
    let first = ((lo - min) / pitch - 0.5).ceil() - 1.0;
    let last = ((hi - min) / pitch - 0.5).floor() + 1.0;
    if last < 0.0 || first > (n - 1) as f64 {
        return None;
    }
    Some((first.max(0.0) as usize, last.min((n - 1) as f64) as usize))
}

/// Pillar-based assignment: a pillar is positive iff its center lies inside
/// a ground-truth footprint; it regresses the containing box with the
/// nearest BEV center (ties to the lower box index).
pub fn assign_pillar(spec: &ViewSpec, gt: &[Box7]) -> Result<Assignment> {
    require_bev(spec)?;
    let n = spec.num_bins();
    let (pu, pv) = spec.pitch();
    let [h, w] = spec.bins;
    let mut best: Vec<Option<(f64, usize)>> = vec![None; n];
    for (g, b) in gt.iter().enumerate() {
        let (x0, y0, x1, y1) = b.bev_aabb();
        let Some((r0, r1)) = center_index_range(x0, x1, spec.axis0.min, pu, h) else {
            continue;
        };
        let Some((c0, c1)) = center_index_range(y0, y1, spec.axis1.min, pv, w) else {
            continue;
        };
        for r in r0..=r1 {
            for c in c0..=c1 {
                let center = bin_center(r, c, spec)?;
                if !point_in_box_bev(center.u, center.v, b) {
                    continue;
                }
                let d = b.bev_distance_sq(center.u, center.v);
                let slot = &mut best[spec.flat_index(r, c)];
                match slot {
                    Some((bd, _)) if *bd <= d => {}
                    _ => *slot = Some((d, g)),
                }
            }
        }
    }
    let labels = best
        .iter()
        .map(|b| b.map_or(Label::Negative, |(_, g)| Label::Positive(g)))
        .collect();
    let refs = (0..n).map(|j| pillar_ref(spec, j)).collect();
    Ok(Assignment::from_labels(UnitKind::Pillar, labels, refs, gt))
}

/// IoUs closer than this are ties, resolved by index. Symmetric anchor
/// placements produce mathematically equal overlaps that differ in the last
/// bits depending on grid offset.
pub const IOU_TIE_EPS: f64 = 1e-9;

/// Anchor-based assignment over every bin center × orientation.
///
/// Anchors with best BEV IoU ≥ `positive_iou` are positive, below
/// `negative_iou` negative, otherwise ignored. Each ground-truth box also
/// forces its single best anchor (lowest index on ties) positive.
pub fn assign_anchor(grid: &ViewSpec, spec: &AnchorSpec, gt: &[Box7]) -> Result<Assignment> {
    require_bev(grid)?;
    spec.validate()?;
    let n_o = spec.orientations.len();
    let n = grid.num_bins() * n_o;
    let (pu, pv) = grid.pitch();
    let [h, w] = grid.bins;
    let reach = 0.5 * spec.length.hypot(spec.width);

    let mut best_iou = vec![0.0f64; n];
    let mut best_gt = vec![usize::MAX; n];
    let mut forced: Vec<Option<(usize, f64)>> = Vec::with_capacity(gt.len());
    for (g, b) in gt.iter().enumerate() {
        let (x0, y0, x1, y1) = b.bev_aabb();
        let rows = center_index_range(x0 - reach, x1 + reach, grid.axis0.min, pu, h);
        let cols = center_index_range(y0 - reach, y1 + reach, grid.axis1.min, pv, w);
        let mut argmax: Option<(usize, f64)> = None;
        if let (Some((r0, r1)), Some((c0, c1))) = (rows, cols) {
            for r in r0..=r1 {
                for c in c0..=c1 {
                    for o in 0..n_o {
                        let a = grid.flat_index(r, c) * n_o + o;
                        let iou = iou_bev(&spec.anchor_box(grid, a), b);
                        if iou <= 0.0 {
                            continue;
                        }
                        if iou > best_iou[a] + IOU_TIE_EPS {
                            best_iou[a] = iou;
                            best_gt[a] = g;
                        }
                        if argmax.is_none_or(|(_, m)| iou > m + IOU_TIE_EPS) {
                            argmax = Some((a, iou));
                        }
                    }
                }
            }
        }
        forced.push(argmax);
    }

    let mut labels: Vec<Label> = best_iou
        .iter()
        .zip(&best_gt)
        .map(|(&iou, &g)| {
            if iou >= spec.positive_iou {
                Label::Positive(g)
            } else if iou < spec.negative_iou {
                Label::Negative
            } else {
                Label::Ignore
            }
        })
        .collect();

    // An anchor that is the argmax of several boxes goes to the one it
    // overlaps most, then to the lower box index.
    let mut owner: Vec<(usize, usize, f64)> = Vec::new();
    for (g, f) in forced.iter().enumerate() {
        let Some((a, iou)) = *f else { continue };
        match owner.iter_mut().find(|(oa, _, _)| *oa == a) {
            Some(entry) if iou > entry.2 + IOU_TIE_EPS => *entry = (a, g, iou),
            Some(_) => {}
            None => owner.push((a, g, iou)),
        }
    }
    for (a, g, _) in owner {
        labels[a] = Label::Positive(g);
    }

    let refs = (0..n)
        .map(|a| {
            let p = pillar_ref(grid, a / n_o);
            Point3::new(p.x, p.y, spec.center_z)
        })
        .collect();
    Ok(Assignment::from_labels(UnitKind::Anchor, labels, refs, gt))
}

/// Point-based assignment: a point inside a box is positive and regresses
/// the containing box with the nearest 3D center, relative to itself.
pub fn assign_point(points: &[Point3], gt: &[Box7]) -> Assignment {
    let labels = points
        .par_iter()
        .map(|p| {
            let mut best: Option<(f64, usize)> = None;
            for (g, b) in gt.iter().enumerate() {
                if !point_in_box(p, b) {
                    continue;
                }
                let d = p.distance_sq(&b.center());
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, g));
                }
            }
            best.map_or(Label::Negative, |(_, g)| Label::Positive(g))
        })
        .collect();
    Assignment::from_labels(UnitKind::Point, labels, points.to_vec(), gt)
}

/// One positive unit in the JSON-lines export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignmentRecord {
    pub unit_kind: UnitKind,
    pub unit_index: usize,
    #[serde(rename = "ref")]
    pub reference: [f64; 3],
    pub target: RegressionTarget,
    pub gt_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignmentSummary {
    pub unit_kind: UnitKind,
    pub units: usize,
    pub positive: usize,
    pub negative: usize,
    pub ignore: usize,
    pub positive_fraction: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum JsonLine {
    Summary { summary: AssignmentSummary },
    Record(AssignmentRecord),
}

/// Writes one line per positive unit followed by a `{"summary": ...}` line.
pub fn write_jsonl<W: Write>(a: &Assignment, mut out: W) -> Result<()> {
    for (i, g) in a.positives() {
        let record = AssignmentRecord {
            unit_kind: a.kind,
            unit_index: i,
            reference: a.refs[i].to_array(),
            target: a.targets[i].expect("positive units carry targets"),
            gt_index: g,
        };
        serde_json::to_writer(&mut out, &JsonLine::Record(record))?;
        out.write_all(b"\n")?;
    }
    let summary = a.summary();
    serde_json::to_writer(&mut out, &JsonLine::Summary { summary })?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// Parses an export written by [`write_jsonl`]. Errors carry 1-based line numbers.
pub fn read_jsonl<R: BufRead>(
    input: R,
) -> Result<(Vec<AssignmentRecord>, Option<AssignmentSummary>)> {
    let mut records = Vec::new();
    let mut summary = None;
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<JsonLine>(&line) {
            Ok(JsonLine::Record(r)) => records.push(r),
            Ok(JsonLine::Summary { summary: s }) => summary = Some(s),
            Err(e) => {
                return Err(Error::InvalidConfig(format!(
                    "assignment line {}: {e}",
                    n + 1
                )))
            }
        }
    }
    Ok((records, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::views::AxisRange;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn bx(cx: f64, cy: f64, cz: f64, l: f64, w: f64, h: f64, t: f64) -> Box7 {
        Box7::new(cx, cy, cz, l, w, h, t).unwrap()
    }

    fn grid(half: f64, bins: usize) -> ViewSpec {
        ViewSpec {
            kind: ViewKind::Bev,
            axis0: AxisRange::new(-half, half),
            axis1: AxisRange::new(-half, half),
            depth: Some(AxisRange::new(-3.0, 3.0)),
            bins: [bins, bins],
            half: None,
        }
    }

    fn random_box(rng: &mut ChaCha8Rng, reach: f64) -> Box7 {
        bx(
            rng.random_range(-reach..reach),
            rng.random_range(-reach..reach),
            rng.random_range(-1.0..1.0),
            rng.random_range(0.5..6.0),
            rng.random_range(0.5..3.0),
            rng.random_range(0.5..3.0),
            rng.random_range(-PI..PI),
        )
    }

    #[test]
    fn encode_examples() {
        let b = bx(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        assert_eq!(encode(&b, &Point3::ORIGIN).to_array(), [0.0; 7]);
        let b = bx(2.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        assert_eq!(encode(&b, &Point3::new(5.0, 0.0, 0.0)).dx, 3.0);
        let b = bx(0.0, 0.0, 0.0, std::f64::consts::E, 1.0, 1.0, 0.0);
        assert!((encode(&b, &Point3::ORIGIN).dl - 1.0).abs() < 1e-15);
    }

    #[test]
    fn decode_examples() {
        let b = decode(&RegressionTarget::default(), &Point3::ORIGIN);
        assert_eq!(b, bx(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0));
        let t = RegressionTarget {
            theta_p: 1.5 * PI,
            ..Default::default()
        };
        assert!((decode(&t, &Point3::ORIGIN).heading + 0.5 * PI).abs() < 1e-15);
    }

    #[test]
    fn pillar_single_center_box() {
        // 1m bins over [-4,4]: a 0.5m box around (0.5,0.5) covers only that center
        let spec = grid(4.0, 8);
        let gt = [bx(0.5, 0.5, 0.3, 0.5, 0.5, 1.0, 0.2)];
        let a = assign_pillar(&spec, &gt).unwrap();
        let pos: Vec<_> = a.positives().collect();
        assert_eq!(pos.len(), 1);
        let (j, g) = pos[0];
        assert_eq!(g, 0);
        let decoded = decode(&a.targets[j].unwrap(), &a.refs[j]);
        for (x, y) in decoded.to_array().iter().zip(gt[0].to_array()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(a.refs[j], Point3::new(0.5, 0.5, 0.0));
    }

    #[test]
    fn pillar_no_boxes_all_negative() {
        let a = assign_pillar(&grid(4.0, 8), &[]).unwrap();
        assert_eq!(a.counts().negative, 64);
        assert_eq!(positive_fraction(&a).unwrap(), 0.0);
    }

    #[test]
    fn pillar_tie_goes_to_lower_index() {
        let spec = grid(4.0, 8);
        // both centered symmetrically about the (0.5, 0.5) pillar center
        let gt = [
            bx(0.0, 0.5, 0.0, 2.0, 0.6, 1.0, 0.0),
            bx(1.0, 0.5, 0.0, 2.0, 0.6, 1.0, 0.0),
        ];
        let a = assign_pillar(&spec, &gt).unwrap();
        let j = spec.flat_index(4, 4);
        assert_eq!(a.labels[j], Label::Positive(0));
    }

    #[test]
    fn pillar_rejects_non_bev() {
        assert!(assign_pillar(&ViewSpec::cylindrical(), &[]).is_err());
    }

    #[test]
    fn pillar_matches_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for bins in [16, 64, 128] {
            let spec = grid(20.0, bins);
            let gt: Vec<Box7> = (0..12).map(|_| random_box(&mut rng, 22.0)).collect();
            let a = assign_pillar(&spec, &gt).unwrap();
            for j in 0..spec.num_bins() {
                let (r, c) = spec.unflatten(j);
                let center = bin_center(r, c, &spec).unwrap();
                let mut expected: Option<(f64, usize)> = None;
                for (g, b) in gt.iter().enumerate() {
                    if point_in_box_bev(center.u, center.v, b) {
                        let d = b.bev_distance_sq(center.u, center.v);
                        if expected.is_none_or(|(bd, _)| d < bd) {
                            expected = Some((d, g));
                        }
                    }
                }
                assert_eq!(a.labels[j].gt_index(), expected.map(|e| e.1), "bin {j}");
            }
        }
    }

    #[test]
    fn anchor_exact_match() {
        let spec = grid(8.0, 16);
        let anchors = AnchorSpec::default();
        let idx = (spec.flat_index(9, 5)) * 2 + 1;
        let gt = [anchors.anchor_box(&spec, idx)];
        let a = assign_anchor(&spec, &anchors, &gt).unwrap();
        assert_eq!(a.labels[idx], Label::Positive(0));
        let t = a.targets[idx].unwrap();
        assert_eq!((t.dx, t.dy, t.dz), (0.0, 0.0, 0.0));
        assert!((t.dl - anchors.length.ln()).abs() < 1e-15);
        assert!((iou_bev(&gt[0], &anchors.anchor_box(&spec, idx)) - 1.0).abs() < 1e-15);
    }

    fn brute_anchor_ious(spec: &ViewSpec, anchors: &AnchorSpec, gt: &[Box7]) -> Vec<Vec<f64>> {
        let n = spec.num_bins() * anchors.orientations.len();
        (0..n)
            .map(|a| {
                let ab = anchors.anchor_box(spec, a);
                gt.iter().map(|g| iou_bev(&ab, g)).collect()
            })
            .collect()
    }

    #[test]
    fn anchor_forced_match_for_poor_overlap() {
        // a tiny box overlaps anchors only weakly but still gets one positive
        let spec = grid(8.0, 16);
        let anchors = AnchorSpec::default();
        let gt = [bx(0.3, -0.2, 0.0, 1.5, 1.0, 1.5, 0.7)];
        let ious = brute_anchor_ious(&spec, &anchors, &gt);
        let max = ious.iter().map(|v| v[0]).fold(0.0, f64::max);
        assert!(max > 0.0 && max < 0.45, "max IoU {max}");
        let argmax = ious.iter().position(|v| v[0] == max).unwrap();
        let a = assign_anchor(&spec, &anchors, &gt).unwrap();
        let pos: Vec<_> = a.positives().collect();
        assert_eq!(pos, vec![(argmax, 0)]);
    }

    #[test]
    fn anchor_ignore_band() {
        let spec = grid(8.0, 16);
        let anchors = AnchorSpec::default();
        let gt = [bx(0.25, 0.25, 0.0, 4.73, 2.08, 1.77, 0.0)];
        let ious = brute_anchor_ious(&spec, &anchors, &gt);
        let a = assign_anchor(&spec, &anchors, &gt).unwrap();
        let mut saw_ignore = false;
        for (i, v) in ious.iter().enumerate() {
            if v[0] >= 0.45 && v[0] < 0.6 && a.labels[i] != Label::Positive(0) {
                assert_eq!(a.labels[i], Label::Ignore);
                saw_ignore = true;
            }
        }
        assert!(saw_ignore);
    }

    #[test]
    fn anchor_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let spec = grid(12.0, 24);
        let anchors = AnchorSpec::default();
        for _ in 0..5 {
            let gt: Vec<Box7> = (0..6).map(|_| random_box(&mut rng, 13.0)).collect();
            let ious = brute_anchor_ious(&spec, &anchors, &gt);
            let a = assign_anchor(&spec, &anchors, &gt).unwrap();
            let mut expected: Vec<Label> = ious
                .iter()
                .map(|v| {
                    let (mut bi, mut bg) = (0.0, usize::MAX);
                    for (g, &iou) in v.iter().enumerate() {
                        if iou > bi + IOU_TIE_EPS {
                            bi = iou;
                            bg = g;
                        }
                    }
                    if bi >= 0.6 {
                        Label::Positive(bg)
                    } else if bi < 0.45 {
                        Label::Negative
                    } else {
                        Label::Ignore
                    }
                })
                .collect();
            let mut owners: Vec<(usize, usize, f64)> = Vec::new();
            for g in 0..gt.len() {
                let (mut best, mut arg) = (0.0, None);
                for (i, v) in ious.iter().enumerate() {
                    if v[g] > best + IOU_TIE_EPS {
                        best = v[g];
                        arg = Some(i);
                    }
                }
                if let Some(i) = arg {
                    match owners.iter_mut().find(|o| o.0 == i) {
                        Some(o) if best > o.2 + IOU_TIE_EPS => *o = (i, g, best),
                        Some(_) => {}
                        None => owners.push((i, g, best)),
                    }
                }
            }
            for (i, g, _) in owners {
                expected[i] = Label::Positive(g);
            }
            assert_eq!(a.labels, expected);
            for (g, _) in gt.iter().enumerate() {
                if ious.iter().any(|v| v[g] > 0.0) {
                    assert!(a.labels.iter().any(|l| l.gt_index().is_some()));
                }
            }
            let c = a.counts();
            assert_eq!(c.positive + c.negative + c.ignore, a.len());
        }
    }

    #[test]
    fn point_assignment_examples() {
        let outer = bx(0.0, 0.0, 0.0, 6.0, 6.0, 2.0, 0.0);
        let inner = bx(1.0, 1.0, 0.0, 2.0, 2.0, 1.0, 0.3);
        let pts = [
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(20.0, 0.0, 0.0),
            Point3::new(1.2, 1.1, 0.1),
        ];
        let a = assign_point(&pts, &[outer, inner]);
        assert_eq!(a.labels[0], Label::Positive(0));
        let t = a.targets[0].unwrap();
        assert_eq!((t.dx, t.dy, t.dz), (0.0, 0.0, 0.0));
        assert_eq!(a.labels[1], Label::Negative);
        assert!(a.targets[1].is_none());
        // distance oracle: nearer center wins
        let d_outer = pts[2].distance_sq(&outer.center());
        let d_inner = pts[2].distance_sq(&inner.center());
        assert!(d_inner < d_outer);
        assert_eq!(a.labels[2], Label::Positive(1));
    }

    #[test]
    fn positive_fraction_values() {
        let empty = assign_point(&[], &[]);
        assert!(matches!(
            positive_fraction(&empty),
            Err(Error::EmptyAssignment)
        ));
        let mut labels = vec![Label::Negative; 512 * 512 * 2];
        labels[17] = Label::Positive(0);
        let n = labels.len();
        let a = Assignment {
            kind: UnitKind::Anchor,
            labels,
            refs: vec![Point3::ORIGIN; n],
            targets: vec![None; n],
        };
        assert!((positive_fraction(&a).unwrap() - 1.0 / 524_288.0).abs() < 1e-18);
    }

    #[test]
    fn translation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = grid(8.0, 32);
        let gt: Vec<Box7> = (0..5).map(|_| random_box(&mut rng, 6.0)).collect();
        let (sr, sc) = (6usize, 3usize);
        let (dx, dy) = (sr as f64 * 0.5, sc as f64 * 0.5);
        let mut moved_spec = spec;
        moved_spec.axis0 = AxisRange::new(-8.0 + dx, 8.0 + dx);
        moved_spec.axis1 = AxisRange::new(-8.0 + dy, 8.0 + dy);
        let moved: Vec<Box7> = gt
            .iter()
            .map(|b| bx(b.cx + dx, b.cy + dy, b.cz, b.l, b.w, b.h, b.heading))
            .collect();
        let a = assign_pillar(&spec, &gt).unwrap();
        let b = assign_pillar(&moved_spec, &moved).unwrap();
        assert_eq!(a.labels, b.labels);
        let anchors = AnchorSpec::default();
        let a = assign_anchor(&spec, &anchors, &gt).unwrap();
        let b = assign_anchor(&moved_spec, &anchors, &moved).unwrap();
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn jsonl_round_trip() {
        let spec = grid(4.0, 8);
        let gt = [bx(0.5, 0.5, 0.3, 2.5, 1.5, 1.0, 0.2)];
        let a = assign_pillar(&spec, &gt).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&a, &mut buf).unwrap();
        let (records, summary) = read_jsonl(&buf[..]).unwrap();
        let summary = summary.unwrap();
        assert_eq!(records.len(), a.counts().positive);
        assert_eq!(summary.positive, records.len());
        assert_eq!(summary.units, 64);
        for r in &records {
            assert_eq!(r.unit_kind, UnitKind::Pillar);
            assert_eq!(Some(r.target), a.targets[r.unit_index]);
        }
        let err = read_jsonl(&b"{\"summary\": 3}\n"[..]).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn codec_round_trip(cx in -80.0..80.0f64, cy in -80.0..80.0f64, cz in -3.0..3.0f64,
                            l in 0.1..20.0f64, w in 0.1..5.0f64, h in 0.1..5.0f64, t in -10.0..10.0f64,
                            rx in -80.0..80.0f64, ry in -80.0..80.0f64, rz in -3.0..3.0f64) {
            let b = bx(cx, cy, cz, l, w, h, t);
            let r = Point3::new(rx, ry, rz);
            let back = decode(&encode(&b, &r), &r);
            for (x, y) in back.to_array().iter().zip(b.to_array()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
