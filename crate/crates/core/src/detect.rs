//! From per-pillar predictions to final detections: decode, score floor,
//! greedy oriented NMS and the top-K cap.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{iou_3d, iou_bev, Box7, Point3};
use crate::pillars::{
    aggregate, build_grid, concat_point_features, gather, Interp, PointFeatures, Reducer,
};
use crate::targets::{assign_pillar, decode, pillar_ref, RegressionTarget};
use crate::views::ViewSpec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: Box7,
    pub score: f64,
    pub class_id: u32,
    /// Producing unit (flat pillar index); breaks score ties.
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum IouKind {
    #[default]
    #[serde(rename = "bev")]
    Bev,
    #[serde(rename = "3d")]
    ThreeD,
}

impl IouKind {
    pub fn iou(self, a: &Box7, b: &Box7) -> f64 {
        match self {
            IouKind::Bev => iou_bev(a, b),
            IouKind::ThreeD => iou_3d(a, b),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            IouKind::Bev => "bev",
            IouKind::ThreeD => "3d",
        }
    }
}

fn default_nms_iou() -> f64 {
    0.7
}

fn default_max_keep() -> usize {
    200
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NmsConfig {
    #[serde(default = "default_nms_iou")]
    pub iou_threshold: f64,
    #[serde(default = "default_max_keep")]
    pub max_keep: usize,
    #[serde(default)]
    pub score_floor: f64,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            iou_threshold: default_nms_iou(),
            max_keep: default_max_keep(),
            score_floor: 0.0,
        }
    }
}

impl NmsConfig {
    pub fn pedestrian() -> Self {
        Self {
            iou_threshold: 0.2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "NMS IoU threshold must lie in (0, 1], got {}",
                self.iou_threshold
            )));
        }
        if self.max_keep == 0 {
            return Err(Error::InvalidConfig("NMS max_keep must be positive".into()));
        }
        if !self.score_floor.is_finite() {
            return Err(Error::InvalidConfig(
                "NMS score floor must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// One candidate per pillar scoring at least `score_floor`, decoded at the
/// pillar's reference point, in flat-index order.
pub fn decode_map(
    scores: &[f64],
    targets: &[RegressionTarget],
    spec: &ViewSpec,
    score_floor: f64,
    class_id: u32,
) -> Result<Vec<Detection>> {
    let n = spec.num_bins();
    if scores.len() != n || targets.len() != n {
        return Err(Error::mismatch(
            format!("{n} scores and targets"),
            format!("{} scores and {} targets", scores.len(), targets.len()),
        ));
    }
    Ok(scores
        .par_iter()
        .zip(targets.par_iter())
        .enumerate()
        .filter(|(_, (&s, _))| s >= score_floor)
        .map(|(j, (&score, t))| Detection {
            bbox: decode(t, &pillar_ref(spec, j)),
            score,
            class_id,
            index: j,
        })
        .collect())
}

/// Score-descending order; ties go to the lower unit index, then to the
/// earlier input position.
pub fn ranking(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .total_cmp(&dets[a].score)
            .then(dets[a].index.cmp(&dets[b].index))
            .then(a.cmp(&b))
    });
    order
}

struct Extent {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl Extent {
    fn of(b: &Box7) -> Self {
        let (x0, y0, x1, y1) = b.bev_aabb();
        Self { x0, y0, x1, y1 }
    }

    fn overlaps(&self, o: &Extent) -> bool {
        self.x0 <= o.x1 && o.x0 <= self.x1 && self.y0 <= o.y1 && o.y0 <= self.y1
    }
}

/// Greedy NMS: keep the best remaining detection, drop everything overlapping
/// it by more than the threshold, stop after `max_keep`.
///
/// Classes are not distinguished; filter by class first for per-class NMS.
pub fn nms(dets: &[Detection], cfg: &NmsConfig, kind: IouKind) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    let mut kept_extent: Vec<Extent> = Vec::new();
    for i in ranking(dets) {
        if kept.len() >= cfg.max_keep {
            break;
        }
        let d = &dets[i];
        let e = Extent::of(&d.bbox);
        let suppressed = kept
            .iter()
            .zip(&kept_extent)
            .any(|(k, ke)| ke.overlaps(&e) && kind.iou(&k.bbox, &d.bbox) > cfg.iou_threshold);
        if !suppressed {
            kept.push(*d);
            kept_extent.push(e);
        }
    }
    kept
}

/// Where per-pillar scores and regression targets come from.
#[derive(Debug, Clone, Copy)]
pub enum PredictionSource<'a> {
    /// Perfect predictions derived from pillar assignment of these boxes;
    /// only positive pillars produce candidates.
    Oracle { gt: &'a [Box7] },
    /// Externally supplied maps over the BEV grid, in flat-index order.
    Maps {
        scores: &'a [f64],
        targets: &'a [RegressionTarget],
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub bev: ViewSpec,
    /// Views whose pillar features are projected back to points, concatenated
    /// in this order.
    pub feature_views: Vec<ViewSpec>,
    pub interp: Interp,
    pub nms: NmsConfig,
    pub nms_iou_kind: IouKind,
    pub class_id: u32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            bev: ViewSpec::bev(),
            feature_views: vec![ViewSpec::bev(), ViewSpec::cylindrical()],
            interp: Interp::Nearest,
            nms: NmsConfig::default(),
            nms_iou_kind: IouKind::Bev,
            class_id: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub detections: Vec<Detection>,
    /// Per-point features pooled in each feature view and projected back.
    pub point_features: PointFeatures,
    pub occupied_pillars: usize,
}

/// Pillarization, point-feature projection, prediction maps, decoding and NMS.
pub fn run_pipeline(
    points: &[Point3],
    source: PredictionSource<'_>,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    cfg.nms.validate()?;
    let bev_grid = build_grid(points, &cfg.bev)?;
    let xyz = PointFeatures::from_points(points);
    let mut parts = Vec::with_capacity(cfg.feature_views.len());
    for view in &cfg.feature_views {
        let grid = if *view == cfg.bev {
            bev_grid.clone()
        } else {
            build_grid(points, view)?
        };
        let pooled = aggregate(&xyz, &grid, Reducer::Max)?;
        parts.push(gather(&pooled, &grid, points, cfg.interp)?);
    }
    let point_features = concat_point_features(&parts)?;

    let oracle;
    let mut floor = cfg.nms.score_floor;
    let (scores, targets): (&[f64], &[RegressionTarget]) = match source {
        PredictionSource::Oracle { gt } => {
            let a = assign_pillar(&cfg.bev, gt)?;
            let scores: Vec<f64> = a
                .labels
                .iter()
                .map(|l| if l.gt_index().is_some() { 1.0 } else { 0.0 })
                .collect();
            let targets: Vec<RegressionTarget> =
                a.targets.iter().map(|t| t.unwrap_or_default()).collect();
            oracle = (scores, targets);
            // negative pillars carry no prediction
            floor = floor.max(f64::MIN_POSITIVE);
            (&oracle.0, &oracle.1)
        }
        PredictionSource::Maps { scores, targets } => (scores, targets),
    };
    let candidates = decode_map(scores, targets, &cfg.bev, floor, cfg.class_id)?;
    let detections = nms(&candidates, &cfg.nms, cfg.nms_iou_kind);
    Ok(PipelineOutput {
        detections,
        point_features,
        occupied_pillars: bev_grid.occupied_pillars(),
    })
}

/// JSON-lines detection record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub scene_id: String,
    pub class_id: u32,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: Box7,
}

pub fn write_detections<W: Write>(scene_id: &str, dets: &[Detection], mut out: W) -> Result<()> {
    for d in dets {
        let r = DetectionRecord {
            scene_id: scene_id.to_string(),
            class_id: d.class_id,
            score: d.score,
            bbox: d.bbox,
        };
        serde_json::to_writer(&mut out, &r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads detection records; schema errors name the 1-based line.
pub fn read_detections<R: BufRead>(input: R) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: DetectionRecord = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidConfig(format!("detections line {}: {e}", n + 1)))?;
        if !(r.score.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "detections line {}: score must be finite",
                n + 1
            )));
        }
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::encode;
    use crate::views::{AxisRange, ViewKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn bx(cx: f64, cy: f64, cz: f64, l: f64, w: f64, h: f64, t: f64) -> Box7 {
        Box7::new(cx, cy, cz, l, w, h, t).unwrap()
    }

    fn det(b: Box7, score: f64, index: usize) -> Detection {
        Detection {
            bbox: b,
            score,
            class_id: 0,
            index,
        }
    }

    fn small_grid() -> ViewSpec {
        ViewSpec {
            kind: ViewKind::Bev,
            axis0: AxisRange::new(-8.0, 8.0),
            axis1: AxisRange::new(-8.0, 8.0),
            depth: Some(AxisRange::new(-3.0, 3.0)),
            bins: [16, 16],
            half: None,
        }
    }

    // Literal greedy definition: repeatedly pick the best remaining and
    // remove everything above the threshold from the remaining set.
    fn reference_nms(dets: &[Detection], cfg: &NmsConfig, kind: IouKind) -> Vec<Detection> {
        let mut remaining: Vec<usize> = (0..dets.len()).collect();
        let mut kept = Vec::new();
        while !remaining.is_empty() && kept.len() < cfg.max_keep {
            let mut best = remaining[0];
            for &i in &remaining {
                let (a, b) = (&dets[i], &dets[best]);
                if a.score > b.score || (a.score == b.score && (a.index, i) < (b.index, best)) {
                    best = i;
                }
            }
            kept.push(dets[best]);
            remaining.retain(|&i| {
                i != best && kind.iou(&dets[i].bbox, &dets[best].bbox) <= cfg.iou_threshold
            });
        }
        kept
    }

    fn random_candidates(rng: &mut ChaCha8Rng, n: usize) -> Vec<Detection> {
        (0..n)
            .map(|_| {
                let b = bx(
                    rng.random_range(-4.0..4.0),
                    rng.random_range(-4.0..4.0),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(1.0..5.0),
                    rng.random_range(0.8..2.5),
                    rng.random_range(1.0..2.0),
                    rng.random_range(-PI..PI),
                );
                // coarse scores so ties occur
                det(
                    b,
                    (rng.random_range(0..10) as f64) / 10.0,
                    rng.random_range(0..50),
                )
            })
            .collect()
    }

    #[test]
    fn decode_map_examples() {
        let spec = small_grid();
        let n = spec.num_bins();
        let zeros = vec![0.0; n];
        let targets = vec![RegressionTarget::default(); n];
        assert!(decode_map(&zeros, &targets, &spec, 0.5, 0)
            .unwrap()
            .is_empty());
        assert_eq!(
            decode_map(&zeros, &targets, &spec, 0.0, 0).unwrap().len(),
            n
        );

        let gt = bx(1.3, -2.2, 0.4, 4.0, 1.8, 1.5, 0.9);
        let j = spec.flat_index(9, 5);
        let mut scores = zeros.clone();
        scores[j] = 0.9;
        let mut t = targets.clone();
        t[j] = encode(&gt, &pillar_ref(&spec, j));
        let out = decode_map(&scores, &t, &spec, 0.5, 3).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].index, out[0].class_id), (j, 3));
        for (a, b) in out[0].bbox.to_array().iter().zip(gt.to_array()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(decode_map(&scores[1..], &t, &spec, 0.0, 0).is_err());
    }

    #[test]
    fn decoding_is_local() {
        let spec = small_grid();
        let n = spec.num_bins();
        let scores = vec![0.5; n];
        let targets = vec![RegressionTarget::default(); n];
        let base = decode_map(&scores, &targets, &spec, 0.0, 0).unwrap();
        let mut t2 = targets.clone();
        t2[77].dx = 0.7;
        let changed = decode_map(&scores, &t2, &spec, 0.0, 0).unwrap();
        let diffs = base.iter().zip(&changed).filter(|(a, b)| a != b).count();
        assert_eq!(diffs, 1);
    }

    #[test]
    fn nms_examples() {
        let b = bx(0.0, 0.0, 0.0, 4.0, 2.0, 1.5, 0.3);
        let out = nms(
            &[det(b, 0.8, 1), det(b, 0.9, 2)],
            &NmsConfig::default(),
            IouKind::Bev,
        );
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);

        let far: Vec<Detection> = (0..5)
            .map(|i| det(bx(10.0 * i as f64, 0.0, 0.0, 4.0, 2.0, 1.5, 0.0), 0.5, i))
            .collect();
        assert_eq!(nms(&far, &NmsConfig::default(), IouKind::Bev).len(), 5);
        let capped = NmsConfig {
            max_keep: 2,
            ..Default::default()
        };
        let out = nms(&far, &capped, IouKind::Bev);
        assert_eq!(out.iter().map(|d| d.index).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn nms_matches_reference_and_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for trial in 0..100 {
            let n = rng.random_range(0..=20);
            let dets = random_candidates(&mut rng, n);
            let kind = if trial % 2 == 0 {
                IouKind::Bev
            } else {
                IouKind::ThreeD
            };
            let cfg = NmsConfig {
                iou_threshold: [0.1, 0.3, 0.7][trial % 3],
                max_keep: [3, 200][trial % 2],
                score_floor: 0.0,
            };
            let out = nms(&dets, &cfg, kind);
            assert_eq!(out, reference_nms(&dets, &cfg, kind));
            assert!(out.windows(2).all(|w| w[0].score >= w[1].score));
            for i in 0..out.len() {
                for j in i + 1..out.len() {
                    assert!(kind.iou(&out[i].bbox, &out[j].bbox) <= cfg.iou_threshold);
                }
            }
            assert_eq!(nms(&out, &cfg, kind), out);
        }
    }

    #[test]
    fn pipeline_oracle_and_empty() {
        let mut cfg = PipelineConfig {
            bev: small_grid(),
            feature_views: vec![small_grid()],
            ..Default::default()
        };
        let out = run_pipeline(&[], PredictionSource::Oracle { gt: &[] }, &cfg).unwrap();
        assert!(out.detections.is_empty());
        assert_eq!(out.occupied_pillars, 0);

        let gt = [
            bx(2.0, 2.0, 0.0, 4.0, 2.0, 1.5, 0.2),
            bx(-3.0, -2.0, -0.5, 3.5, 1.8, 1.6, -1.2),
        ];
        let pts = [Point3::new(2.0, 2.0, 0.0), Point3::new(-3.0, -2.0, 0.0)];
        let out = run_pipeline(&pts, PredictionSource::Oracle { gt: &gt }, &cfg).unwrap();
        assert_eq!(out.detections.len(), 2);
        for d in &out.detections {
            assert!(gt.iter().any(|g| iou_3d(g, &d.bbox) > 1.0 - 1e-9));
        }
        assert_eq!(out.point_features.channels(), 3);
        assert_eq!(out.occupied_pillars, 2);

        cfg.nms.max_keep = 1;
        let out = run_pipeline(&pts, PredictionSource::Oracle { gt: &gt }, &cfg).unwrap();
        assert_eq!(out.detections.len(), 1);
        assert_eq!(out.detections[0].score, 1.0);
    }

    #[test]
    fn pipeline_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = PipelineConfig {
            bev: small_grid(),
            feature_views: vec![small_grid(), ViewSpec::cylindrical().with_bins(32, 8)],
            interp: Interp::Bilinear,
            ..Default::default()
        };
        let pts: Vec<Point3> = (0..500)
            .map(|_| {
                Point3::new(
                    rng.random_range(-9.0..9.0),
                    rng.random_range(-9.0..9.0),
                    rng.random_range(-3.0..3.0),
                )
            })
            .collect();
        let n = cfg.bev.num_bins();
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let targets: Vec<RegressionTarget> = (0..n)
            .map(|_| RegressionTarget {
                dx: rng.random_range(-1.0..1.0),
                dy: rng.random_range(-1.0..1.0),
                dl: rng.random_range(0.0..1.5),
                dw: rng.random_range(-0.5..0.7),
                theta_p: rng.random_range(-PI..PI),
                ..Default::default()
            })
            .collect();
        let source = PredictionSource::Maps {
            scores: &scores,
            targets: &targets,
        };
        let a = run_pipeline(&pts, source, &cfg).unwrap();
        let b = run_pipeline(&pts, source, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.point_features.channels(), 6);
        assert!(a.detections.len() <= 200);
    }

    #[test]
    fn detection_jsonl() {
        let d = det(bx(1.0, 2.0, 0.5, 4.0, 2.0, 1.5, 0.1), 0.75, 4);
        let mut buf = Vec::new();
        write_detections("scene_0001", &[d], &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("\"box\":[1.0,2.0,0.5,4.0,2.0,1.5,0.1]"));
        let back = read_detections(&buf[..]).unwrap();
        assert_eq!(back[0].bbox, d.bbox);
        assert_eq!(back[0].scene_id, "scene_0001");
        let bad = b"{\"scene_id\":\"a\",\"class_id\":0,\"score\":1,\"box\":[0,0,0,1,1,1,0]}\n{\"oops\":1}\n";
        let err = read_detections(&bad[..]).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
