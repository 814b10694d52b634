use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use pillarkit::config::{Paradigm, PipelineConfig};
use pillarkit::detect::{
    decode_map, nms, read_detections, run_pipeline, write_detections, Detection, PredictionSource,
};
use pillarkit::eval::{evaluate, write_csv, EvalConfig, EvalResult, EvalScene};
use pillarkit::pillars::{
    aggregate, build_grid, gather_bilinear, gather_nearest, PointFeatures, Reducer,
};
use pillarkit::synth::{self, read_scene, write_atomic, write_scene, Scene, SceneConfig};
use pillarkit::targets::{
    assign_anchor, assign_pillar, assign_point, positive_fraction, read_jsonl, write_jsonl,
    Assignment, RegressionTarget, UnitKind,
};
use pillarkit::{Box7, Point3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::EXIT_CHECK_FAILED;

/// An error tagged with the stage that raised it.
#[derive(Debug)]
pub struct Failure {
    stage: &'static str,
    message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.stage, self.message)
    }
}

fn at<E: fmt::Display>(stage: &'static str) -> impl FnOnce(E) -> Failure {
    move |e| Failure {
        stage,
        message: e.to_string(),
    }
}

type CmdResult = Result<ExitCode, Failure>;

const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    /// Point file, relative to the manifest.
    pub points: String,
    /// Label sidecar, relative to the manifest.
    pub labels: String,
    pub num_points: usize,
    pub num_boxes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub scene: SceneConfig,
    pub scenes: Vec<ManifestEntry>,
}

fn scene_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scene".into())
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<(), Failure> {
    match out {
        Some(path) => write_atomic(path, bytes).map_err(at("write")),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(bytes).map_err(at("write"))?;
            stdout.flush().map_err(at("write"))
        }
    }
}

pub fn generate(cfg: &PipelineConfig, count: u64, out: &Path) -> CmdResult {
    fs::create_dir_all(out).map_err(at("generate"))?;
    let base = cfg.scene.seed;
    let scenes: Vec<(u64, Scene)> = (0..count)
        .into_par_iter()
        .map(|k| {
            let seed = base.checked_add(k).ok_or_else(|| Failure {
                stage: "generate",
                message: "seed range overflows u64".into(),
            })?;
            let scene_cfg = SceneConfig {
                seed,
                ..cfg.scene.clone()
            };
            let scene = synth::generate(&scene_cfg).map_err(at("generate"))?;
            Ok((seed, scene))
        })
        .collect::<Result<_, Failure>>()?;
    let mut entries = Vec::with_capacity(scenes.len());
    for (seed, scene) in &scenes {
        let id = format!("scene_{seed:06}");
        let points = format!("{id}.plrd");
        write_scene(scene, &out.join(&points)).map_err(at("write"))?;
        entries.push(ManifestEntry {
            labels: synth::sidecar_path(Path::new(&points))
                .to_string_lossy()
                .into_owned(),
            id,
            seed: *seed,
            points,
            num_points: scene.points.len(),
            num_boxes: scene.gt.len(),
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        scene: cfg.scene.clone(),
        scenes: entries,
    };
    let mut json = serde_json::to_vec_pretty(&manifest).map_err(at("write"))?;
    json.push(b'\n');
    write_atomic(&out.join("manifest.json"), &json).map_err(at("write"))?;
    let boxes: usize = manifest.scenes.iter().map(|e| e.num_boxes).sum();
    eprintln!(
        "wrote {} scenes ({boxes} boxes) to {}",
        manifest.scenes.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn run_assignment(
    cfg: &PipelineConfig,
    paradigm: Paradigm,
    scene: &Scene,
) -> pillarkit::Result<Assignment> {
    let gt = scene.boxes();
    match paradigm {
        Paradigm::Pillar => assign_pillar(&cfg.views.bev, &gt),
        Paradigm::Anchor => assign_anchor(&cfg.views.bev, &cfg.anchor, &gt),
        Paradigm::Point => Ok(assign_point(&scene.points, &gt)),
    }
}

pub fn assign(cfg: &PipelineConfig, scene_path: &Path, out: Option<&Path>) -> CmdResult {
    let scene = read_scene(scene_path).map_err(at("read scene"))?;
    let a = run_assignment(cfg, cfg.paradigm, &scene).map_err(at("assign"))?;
    let mut buf = Vec::new();
    write_jsonl(&a, &mut buf).map_err(at("write"))?;
    emit(out, &buf)?;

    let s = a.summary();
    if a.is_empty() {
        log::warn!("assignment has no units; positive fraction reported as 0");
    }
    eprintln!(
        "{:?} assignment: {} units, {} positive, {} negative, {} ignore, positive fraction {:.6}%",
        s.unit_kind,
        s.units,
        s.positive,
        s.negative,
        s.ignore,
        100.0 * s.positive_fraction
    );
    let fraction = |p: Paradigm| -> Result<f64, Failure> {
        if p == cfg.paradigm {
            return Ok(s.positive_fraction);
        }
        let other = run_assignment(cfg, p, &scene).map_err(at("assign"))?;
        Ok(positive_fraction(&other).unwrap_or(0.0))
    };
    let (anchor, pillar) = (fraction(Paradigm::Anchor)?, fraction(Paradigm::Pillar)?);
    eprintln!(
        "positive fraction: anchor {:.6}% vs pillar {:.6}%",
        100.0 * anchor,
        100.0 * pillar
    );
    Ok(ExitCode::SUCCESS)
}

/// Every class in the table plus any other class ids that occur.
fn class_ids(cfg: &PipelineConfig, extra: impl IntoIterator<Item = u32>) -> Vec<u32> {
    let mut ids: Vec<u32> = cfg.classes.iter().map(|c| c.class_id).collect();
    let known: BTreeSet<u32> = ids.iter().copied().collect();
    let others: BTreeSet<u32> = extra.into_iter().filter(|c| !known.contains(c)).collect();
    ids.extend(others);
    ids
}

fn eval_config(cfg: &PipelineConfig, class_id: u32) -> EvalConfig {
    cfg.class(class_id)
        .map_or_else(|| cfg.eval.clone(), |c| cfg.eval_for(c))
}

fn report(results: &[EvalResult]) {
    for r in results {
        let bins: Vec<String> = r
            .bins
            .iter()
            .map(|b| {
                let ap = b.ap.map_or("-".to_string(), |v| format!("{v:.4}"));
                format!("{} {ap} (tp {} fp {} fn {})", b.range, b.tp, b.fp, b.fn_)
            })
            .collect();
        match r.overall_ap {
            Some(ap) => eprintln!(
                "{} {} AP {ap:.6} | {}",
                r.class,
                r.iou_kind.as_str(),
                bins.join(" | ")
            ),
            None => eprintln!("{}: no LEVEL_1 ground truth, AP absent", r.class),
        }
    }
}

/// Score map and regression map of one class.
type ClassMaps = (Vec<f64>, Vec<RegressionTarget>);

/// Per-class score and target maps from a pillar assignment export; a
/// record's class is that of the gt box it regresses.
fn maps_from_records(
    path: &Path,
    cfg: &PipelineConfig,
    scene: &Scene,
) -> Result<BTreeMap<u32, ClassMaps>, Failure> {
    let file = fs::File::open(path).map_err(at("read targets"))?;
    let (records, _) = read_jsonl(BufReader::new(file)).map_err(at("read targets"))?;
    let n = cfg.views.bev.num_bins();
    let mut maps = BTreeMap::new();
    for (k, r) in records.iter().enumerate() {
        let bad = |m: String| Failure {
            stage: "read targets",
            message: format!("record {}: {m}", k + 1),
        };
        if r.unit_kind != UnitKind::Pillar {
            return Err(bad(format!("expected pillar units, got {:?}", r.unit_kind)));
        }
        if r.unit_index >= n {
            return Err(bad(format!(
                "unit index {} outside the {n}-pillar grid",
                r.unit_index
            )));
        }
        let class = scene
            .gt
            .get(r.gt_index)
            .ok_or_else(|| bad(format!("gt index {} not in scene", r.gt_index)))?
            .class_id;
        let (scores, targets) = maps
            .entry(class)
            .or_insert_with(|| (vec![0.0; n], vec![RegressionTarget::default(); n]));
        scores[r.unit_index] = 1.0;
        targets[r.unit_index] = r.target;
    }
    Ok(maps)
}

pub fn roundtrip(
    cfg: &PipelineConfig,
    scene_path: &Path,
    targets: Option<&Path>,
    detections_out: Option<&Path>,
    out: Option<&Path>,
) -> CmdResult {
    let scene = read_scene(scene_path).map_err(at("read scene"))?;
    let id = scene_id(scene_path);
    let maps = targets
        .map(|p| maps_from_records(p, cfg, &scene))
        .transpose()?;
    let empty_scores = vec![0.0; cfg.views.bev.num_bins()];
    let empty_targets = vec![RegressionTarget::default(); cfg.views.bev.num_bins()];

    let mut results = Vec::new();
    let mut all_dets: Vec<Detection> = Vec::new();
    for class_id in class_ids(cfg, scene.gt.iter().map(|g| g.class_id)) {
        let (gt, gt_points) = scene.class_subset(class_id);
        let source = match &maps {
            None => PredictionSource::Oracle { gt: &gt },
            Some(m) => {
                let (scores, targets) = m
                    .get(&class_id)
                    .map_or((&empty_scores, &empty_targets), |(s, t)| (s, t));
                PredictionSource::Maps { scores, targets }
            }
        };
        let detect_cfg = cfg.detect_config(class_id);
        // zero-score pillars carry no prediction
        let detect_cfg = pillarkit::detect::PipelineConfig {
            nms: pillarkit::detect::NmsConfig {
                score_floor: detect_cfg.nms.score_floor.max(f64::MIN_POSITIVE),
                ..detect_cfg.nms
            },
            ..detect_cfg
        };
        let out = run_pipeline(&scene.points, source, &detect_cfg).map_err(at("pipeline"))?;
        let eval_scene = EvalScene {
            scene_id: id.clone(),
            detections: out.detections.clone(),
            gt,
            gt_points,
        };
        let r = evaluate(
            &[eval_scene],
            &eval_config(cfg, class_id),
            &cfg.class_name(class_id),
        )
        .map_err(at("evaluate"))?;
        all_dets.extend(out.detections);
        results.push(r);
    }
    report(&results);

    if let Some(path) = detections_out {
        let mut buf = Vec::new();
        write_detections(&id, &all_dets, &mut buf).map_err(at("write"))?;
        write_atomic(path, &buf).map_err(at("write"))?;
    }
    let mut json = serde_json::to_vec_pretty(&results).map_err(at("write"))?;
    json.push(b'\n');
    emit(out, &json)?;

    let scored: Vec<f64> = results.iter().filter_map(|r| r.overall_ap).collect();
    if scored.is_empty() {
        log::warn!("scene has no LEVEL_1 ground truth; nothing to check");
        return Ok(ExitCode::SUCCESS);
    }
    if scored.iter().all(|ap| (ap - 1.0).abs() <= 1e-9) {
        eprintln!("roundtrip ok: AP = 1");
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("roundtrip failed: AP below 1");
        Ok(ExitCode::from(EXIT_CHECK_FAILED))
    }
}

fn read_manifest(path: &Path) -> Result<(Manifest, Vec<Scene>), Failure> {
    let text = fs::read_to_string(path).map_err(at("read manifest"))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(at("read manifest"))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Failure {
            stage: "read manifest",
            message: format!("unsupported manifest version {}", manifest.version),
        });
    }
    let dir = path.parent().map_or_else(PathBuf::new, Path::to_path_buf);
    let scenes = manifest
        .scenes
        .par_iter()
        .map(|e| read_scene(&dir.join(&e.points)).map_err(at("read scene")))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((manifest, scenes))
}

pub fn eval(
    cfg: &PipelineConfig,
    detections: &Path,
    manifest_path: &Path,
    out: Option<&Path>,
    csv: Option<&Path>,
) -> CmdResult {
    let (manifest, scenes) = read_manifest(manifest_path)?;
    let file = fs::File::open(detections).map_err(at("read detections"))?;
    let records = read_detections(BufReader::new(file)).map_err(at("read detections"))?;
    let index: BTreeMap<&str, usize> = manifest
        .scenes
        .iter()
        .enumerate()
        .map(|(i, e)| (e.id.as_str(), i))
        .collect();
    let mut per_scene: Vec<Vec<Detection>> = vec![Vec::new(); scenes.len()];
    for (k, r) in records.iter().enumerate() {
        let Some(&s) = index.get(r.scene_id.as_str()) else {
            return Err(Failure {
                stage: "read detections",
                message: format!("record {}: unknown scene_id {:?}", k + 1, r.scene_id),
            });
        };
        let next = per_scene[s].len();
        per_scene[s].push(Detection {
            bbox: r.bbox,
            score: r.score,
            class_id: r.class_id,
            index: next,
        });
    }
    let seen = records
        .iter()
        .map(|r| r.class_id)
        .chain(scenes.iter().flat_map(|s| s.gt.iter().map(|g| g.class_id)));
    let mut results = Vec::new();
    for class_id in class_ids(cfg, seen.collect::<Vec<_>>()) {
        let eval_scenes: Vec<EvalScene> = manifest
            .scenes
            .iter()
            .zip(&scenes)
            .zip(&per_scene)
            .map(|((e, s), dets)| {
                let (gt, gt_points) = s.class_subset(class_id);
                EvalScene {
                    scene_id: e.id.clone(),
                    detections: dets
                        .iter()
                        .filter(|d| d.class_id == class_id)
                        .copied()
                        .collect(),
                    gt,
                    gt_points,
                }
            })
            .collect();
        let r = evaluate(
            &eval_scenes,
            &eval_config(cfg, class_id),
            &cfg.class_name(class_id),
        )
        .map_err(at("evaluate"))?;
        results.push(r);
    }
    report(&results);
    let mut json = serde_json::to_vec_pretty(&results).map_err(at("write"))?;
    json.push(b'\n');
    emit(out, &json)?;
    if let Some(path) = csv {
        let mut buf = Vec::new();
        write_csv(&results, &mut buf).map_err(at("write"))?;
        write_atomic(path, &buf).map_err(at("write"))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn fastest<T>(repeat: usize, mut f: impl FnMut() -> T) -> (f64, T) {
    let mut best = f64::INFINITY;
    let mut last = None;
    for _ in 0..repeat.max(1) {
        let t = Instant::now();
        let v = f();
        best = best.min(t.elapsed().as_secs_f64());
        last = Some(v);
    }
    (best, last.expect("at least one run"))
}

pub fn bench(
    cfg: &PipelineConfig,
    sizes: &[usize],
    repeat: usize,
    out: Option<&Path>,
) -> CmdResult {
    let spec = cfg.views.bev;
    let scene = synth::generate(&cfg.scene).map_err(at("generate"))?;
    let gt: Vec<Box7> = scene.boxes();
    let oracle = assign_pillar(&spec, &gt).map_err(at("assign"))?;
    let scores: Vec<f64> = oracle
        .labels
        .iter()
        .map(|l| if l.gt_index().is_some() { 1.0 } else { 0.0 })
        .collect();
    let targets: Vec<RegressionTarget> = oracle
        .targets
        .iter()
        .map(|t| t.unwrap_or_default())
        .collect();
    let detect_cfg = cfg.detect_config(0);

    let mut csv = String::from("points,stage,seconds\n");
    for &n in sizes {
        let mut rng = synth::entity_rng(cfg.scene.seed, u64::MAX - n as u64);
        let points: Vec<Point3> = (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(spec.axis0.min..=spec.axis0.max),
                    rng.random_range(spec.axis1.min..=spec.axis1.max),
                    rng.random_range(-3.0..=3.0),
                )
            })
            .collect();
        let xyz = PointFeatures::from_points(&points);
        let (t_grid, grid) = fastest(repeat, || build_grid(&points, &spec));
        let grid = grid.map_err(at("grid build"))?;
        let (t_agg, map) = fastest(repeat, || aggregate(&xyz, &grid, Reducer::Max));
        let map = map.map_err(at("aggregate"))?;
        let (t_near, r) = fastest(repeat, || gather_nearest(&map, &grid));
        r.map_err(at("gather"))?;
        let (t_bil, r) = fastest(repeat, || gather_bilinear(&map, &points, &spec));
        r.map_err(at("gather"))?;
        let bench_scene = Scene {
            points: points.clone(),
            gt: scene.gt.clone(),
            gt_points: vec![0; scene.gt.len()],
        };
        let (t_assign, r) = fastest(repeat, || run_assignment(cfg, cfg.paradigm, &bench_scene));
        r.map_err(at("assign"))?;
        let (t_nms, r) = fastest(repeat, || {
            decode_map(&scores, &targets, &spec, f64::MIN_POSITIVE, 0)
                .map(|c| nms(&c, &detect_cfg.nms, detect_cfg.nms_iou_kind))
        });
        r.map_err(at("nms"))?;
        let stages = [
            ("grid_build", t_grid),
            ("aggregate", t_agg),
            ("gather_nearest", t_near),
            ("gather_bilinear", t_bil),
            ("assignment", t_assign),
            ("nms", t_nms),
        ];
        let total: f64 = stages.iter().map(|s| s.1).sum();
        for (name, t) in stages.iter().chain([&("total", total)]) {
            csv.push_str(&format!("{n},{name},{t:.9}\n"));
        }
        eprintln!(
            "{n:>9} points: grid {:.2} ms, aggregate {:.2} ms, nearest {:.2} ms, bilinear {:.2} ms \
             (x{:.2}), assignment {:.2} ms, nms {:.2} ms",
            1e3 * t_grid,
            1e3 * t_agg,
            1e3 * t_near,
            1e3 * t_bil,
            t_bil / t_near.max(1e-12),
            1e3 * t_assign,
            1e3 * t_nms
        );
    }
    emit(out, csv.as_bytes())?;
    Ok(ExitCode::SUCCESS)
}
