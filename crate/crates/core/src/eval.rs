//! Average precision with orientation-aware IoU matching, LEVEL_1 filtering
//! and a distance breakdown.

use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detect::{ranking, Detection, IouKind};
use crate::error::{Error, Result};
use crate::geom::Box7;

/// Distance interval `[lo, hi)` in meters; `hi = None` is unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f64, Option<f64>)", into = "(f64, Option<f64>)")]
pub struct DistanceBin {
    pub lo: f64,
    pub hi: Option<f64>,
}

impl From<(f64, Option<f64>)> for DistanceBin {
    fn from((lo, hi): (f64, Option<f64>)) -> Self {
        Self { lo, hi }
    }
}

impl From<DistanceBin> for (f64, Option<f64>) {
    fn from(b: DistanceBin) -> Self {
        (b.lo, b.hi)
    }
}

impl DistanceBin {
    pub const fn new(lo: f64, hi: Option<f64>) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, d: f64) -> bool {
        d >= self.lo && self.hi.is_none_or(|hi| d < hi)
    }
}

impl fmt::Display for DistanceBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.hi {
            Some(hi) => write!(f, "{}-{}m", self.lo, hi),
            None => write!(f, "{}m-inf", self.lo),
        }
    }
}

fn default_eval_iou() -> f64 {
    0.7
}

fn default_eval_kind() -> IouKind {
    IouKind::ThreeD
}

fn default_bins() -> Vec<DistanceBin> {
    vec![
        DistanceBin::new(0.0, Some(30.0)),
        DistanceBin::new(30.0, Some(50.0)),
        DistanceBin::new(50.0, None),
    ]
}

fn default_min_points() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_eval_iou")]
    pub iou_threshold: f64,
    #[serde(default = "default_eval_kind")]
    pub iou_kind: IouKind,
    #[serde(default = "default_bins")]
    pub distance_bins: Vec<DistanceBin>,
    /// A gt box counts only with strictly more points than this.
    #[serde(default = "default_min_points")]
    pub min_points_level1: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: default_eval_iou(),
            iou_kind: default_eval_kind(),
            distance_bins: default_bins(),
            min_points_level1: default_min_points(),
        }
    }
}

impl EvalConfig {
    pub fn pedestrian() -> Self {
        Self {
            iou_threshold: 0.5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "eval IoU threshold must lie in (0, 1], got {}",
                self.iou_threshold
            )));
        }
        let mut prev_hi = Some(0.0);
        for (i, b) in self.distance_bins.iter().enumerate() {
            let ok_lo = b.lo.is_finite() && b.lo >= 0.0;
            let ok_hi = b.hi.is_none_or(|hi| hi.is_finite() && hi > b.lo);
            let ascending = prev_hi.is_some_and(|p| b.lo >= p);
            if !(ok_lo && ok_hi && ascending) {
                return Err(Error::InvalidConfig(format!(
                    "distance bin {i} ({b}) is empty, negative or overlaps its predecessor"
                )));
            }
            prev_hi = b.hi;
        }
        Ok(())
    }

    pub fn bin_of(&self, distance: f64) -> Option<usize> {
        self.distance_bins.iter().position(|b| b.contains(distance))
    }
}

/// BEV distance of a box center from the sensor origin.
pub fn bev_distance(b: &Box7) -> f64 {
    b.cx.hypot(b.cy)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetOutcome {
    Tp(usize),
    Fp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matching {
    /// Indexed like the input detections.
    pub detections: Vec<DetOutcome>,
    /// For each gt box, the detection it was matched to.
    pub gt: Vec<Option<usize>>,
}

impl Matching {
    pub fn tp(&self) -> usize {
        self.gt.iter().filter(|m| m.is_some()).count()
    }

    pub fn fp(&self) -> usize {
        self.detections.len() - self.tp()
    }

    pub fn missed(&self) -> usize {
        self.gt.len() - self.tp()
    }
}

/// Greedy matching in ranking order: each detection takes the unmatched gt
/// with the highest IoU when that IoU reaches the threshold.
pub fn match_detections(dets: &[Detection], gt: &[Box7], cfg: &EvalConfig) -> Matching {
    let mut outcome = vec![DetOutcome::Fp; dets.len()];
    let mut taken: Vec<Option<usize>> = vec![None; gt.len()];
    for i in ranking(dets) {
        let mut best: Option<(usize, f64)> = None;
        for (g, b) in gt.iter().enumerate() {
            if taken[g].is_some() {
                continue;
            }
            let iou = cfg.iou_kind.iou(&dets[i].bbox, b);
            if best.is_none_or(|(_, v)| iou > v) {
                best = Some((g, iou));
            }
        }
        if let Some((g, iou)) = best {
            if iou >= cfg.iou_threshold {
                outcome[i] = DetOutcome::Tp(g);
                taken[g] = Some(i);
            }
        }
    }
    Matching {
        detections: outcome,
        gt: taken,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedHit {
    pub score: f64,
    pub tp: bool,
}

/// All-point AP with precision made non-increasing from the right.
///
/// Hits are ranked by descending score; equal scores keep their input order.
/// Returns 0 with a warning when there is no ground truth.
pub fn average_precision(hits: &[RankedHit], total_gt: usize) -> f64 {
    if total_gt == 0 {
        log::warn!("average precision requested with no ground truth; reporting 0");
        return 0.0;
    }
    let mut ranked = hits.to_vec();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    // precision after each hit as tp/k, kept as integers
    let mut precision: Vec<(u64, u64)> = Vec::with_capacity(ranked.len());
    let mut tp = 0u64;
    for (k, h) in ranked.iter().enumerate() {
        tp += u64::from(h.tp);
        precision.push((tp, k as u64 + 1));
    }
    let mut running = (0u64, 1u64);
    for p in precision.iter_mut().rev() {
        if u128::from(p.0) * u128::from(running.1) > u128::from(running.0) * u128::from(p.1) {
            running = *p;
        }
        *p = running;
    }
    // each TP raises recall by 1/total_gt
    let terms = ranked.iter().zip(&precision).filter(|(h, _)| h.tp);
    let ap = match terms
        .clone()
        .try_fold(Ratio::ZERO, |acc, (_, &(n, d))| acc.add(n, d))
    {
        Some(sum) => sum.div_to_f64(total_gt as u64),
        None => {
            let sum: f64 = terms.map(|(_, &(n, d))| n as f64 / d as f64).sum();
            sum / total_gt as f64
        }
    };
    ap.min(1.0)
}

/// Exact running sum of small fractions, abandoned on overflow.
#[derive(Debug, Clone, Copy)]
struct Ratio {
    num: u128,
    den: u128,
}

impl Ratio {
    const ZERO: Ratio = Ratio { num: 0, den: 1 };

    fn add(self, n: u64, d: u64) -> Option<Ratio> {
        let (n, d) = (u128::from(n), u128::from(d));
        let g = gcd(self.den, d);
        let den = (self.den / g).checked_mul(d)?;
        let num = self
            .num
            .checked_mul(d / g)?
            .checked_add(n.checked_mul(self.den / g)?)?;
        let r = gcd(num, den).max(1);
        Some(Ratio {
            num: num / r,
            den: den / r,
        })
    }

    fn div_to_f64(self, k: u64) -> f64 {
        let g = gcd(self.num, u128::from(k)).max(1);
        let num = self.num / g;
        match (self.den).checked_mul(u128::from(k) / g) {
            Some(den) => num as f64 / den as f64,
            None => (num as f64 / self.den as f64) / (k / g as u64) as f64,
        }
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// One scene's detections (single class) and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalScene {
    pub scene_id: String,
    pub detections: Vec<Detection>,
    pub gt: Vec<Box7>,
    /// Number of scene points inside each gt box.
    pub gt_points: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinResult {
    pub range: DistanceBin,
    /// Absent when the bin holds no LEVEL_1 ground truth.
    pub ap: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub class: String,
    pub iou_kind: IouKind,
    pub overall_ap: Option<f64>,
    pub bins: Vec<BinResult>,
}

impl EvalResult {
    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// CSV mirror of one or more results: `class,bin,lo,hi,ap,tp,fp,fn`, one
/// `overall` row per class followed by its bins; absent values are empty.
pub fn write_csv<W: Write>(results: &[EvalResult], mut out: W) -> Result<()> {
    writeln!(out, "class,bin,lo,hi,ap,tp,fp,fn")?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in results {
        let (tp, fp, fn_) = r.bins.iter().fold((0, 0, 0), |(a, b, c), b2| {
            (a + b2.tp, b + b2.fp, c + b2.fn_)
        });
        writeln!(
            out,
            "{},overall,,,{},{tp},{fp},{fn_}",
            r.class,
            opt(r.overall_ap)
        )?;
        for b in &r.bins {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.class,
                b.range,
                b.range.lo,
                opt(b.range.hi),
                opt(b.ap),
                b.tp,
                b.fp,
                b.fn_
            )?;
        }
    }
    Ok(())
}

struct ScoredHit {
    score: f64,
    scene: usize,
    det: usize,
    tp: bool,
    bin: Option<usize>,
}

/// Hits, per-bin gt counts, per-bin misses and LEVEL_1 gt total of one scene.
type SceneTally = (Vec<ScoredHit>, Vec<usize>, Vec<usize>, usize);

/// Matches each scene against its LEVEL_1 ground truth and integrates AP
/// overall and per distance bin.
///
/// TPs are binned by their matched gt, FPs by their own center distance.
pub fn evaluate(scenes: &[EvalScene], cfg: &EvalConfig, class: &str) -> Result<EvalResult> {
    cfg.validate()?;
    for s in scenes {
        if s.gt_points.len() != s.gt.len() {
            return Err(Error::InvalidConfig(format!(
                "scene {}: {} gt boxes but {} point counts",
                s.scene_id,
                s.gt.len(),
                s.gt_points.len()
            )));
        }
    }
    let nbins = cfg.distance_bins.len();
    let per_scene: Vec<SceneTally> = scenes
        .par_iter()
        .enumerate()
        .map(|(si, s)| {
            let level1: Vec<Box7> =
                s.gt.iter()
                    .zip(&s.gt_points)
                    .filter(|(_, &n)| n > cfg.min_points_level1)
                    .map(|(b, _)| *b)
                    .collect();
            let gt_bin: Vec<Option<usize>> =
                level1.iter().map(|b| cfg.bin_of(bev_distance(b))).collect();
            let m = match_detections(&s.detections, &level1, cfg);
            let hits = s
                .detections
                .iter()
                .zip(&m.detections)
                .enumerate()
                .map(|(di, (d, o))| match *o {
                    DetOutcome::Tp(g) => ScoredHit {
                        score: d.score,
                        scene: si,
                        det: di,
                        tp: true,
                        bin: gt_bin[g],
                    },
                    DetOutcome::Fp => ScoredHit {
                        score: d.score,
                        scene: si,
                        det: di,
                        tp: false,
                        bin: cfg.bin_of(bev_distance(&d.bbox)),
                    },
                })
                .collect();
            let mut gt_count = vec![0usize; nbins];
            let mut missed = vec![0usize; nbins];
            for (g, b) in gt_bin.iter().enumerate() {
                if let Some(b) = *b {
                    gt_count[b] += 1;
                    if m.gt[g].is_none() {
                        missed[b] += 1;
                    }
                }
            }
            (hits, gt_count, missed, level1.len())
        })
        .collect();

    let mut hits: Vec<ScoredHit> = Vec::new();
    let mut gt_count = vec![0usize; nbins];
    let mut missed = vec![0usize; nbins];
    let mut total_gt = 0usize;
    for (h, c, m, t) in per_scene {
        hits.extend(h);
        for b in 0..nbins {
            gt_count[b] += c[b];
            missed[b] += m[b];
        }
        total_gt += t;
    }
    hits.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| scenes[a.scene].scene_id.cmp(&scenes[b.scene].scene_id))
            .then(a.scene.cmp(&b.scene))
            .then(a.det.cmp(&b.det))
    });

    let all: Vec<RankedHit> = hits
        .iter()
        .map(|h| RankedHit {
            score: h.score,
            tp: h.tp,
        })
        .collect();
    let overall_ap = (total_gt > 0).then(|| average_precision(&all, total_gt));

    let bins = cfg
        .distance_bins
        .iter()
        .enumerate()
        .map(|(b, range)| {
            let in_bin: Vec<RankedHit> = hits
                .iter()
                .filter(|h| h.bin == Some(b))
                .map(|h| RankedHit {
                    score: h.score,
                    tp: h.tp,
                })
                .collect();
            let tp = in_bin.iter().filter(|h| h.tp).count();
            BinResult {
                range: *range,
                ap: (gt_count[b] > 0).then(|| average_precision(&in_bin, gt_count[b])),
                tp,
                fp: in_bin.len() - tp,
                fn_: missed[b],
            }
        })
        .collect();

    Ok(EvalResult {
        class: class.to_string(),
        iou_kind: cfg.iou_kind,
        overall_ap,
        bins,
    })
}
