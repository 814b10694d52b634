//! Whole-pipeline configuration as loaded from JSON. Every field has a
//! default, so `{}` is a complete config; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detect::{self, IouKind, NmsConfig};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::losses::LossConfig;
use crate::pillars::Interp;
use crate::synth::SceneConfig;
use crate::targets::AnchorSpec;
use crate::views::{Half, ViewKind, ViewSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Paradigm {
    Anchor,
    Point,
    #[default]
    Pillar,
}

impl std::str::FromStr for Paradigm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anchor" => Ok(Paradigm::Anchor),
            "point" => Ok(Paradigm::Point),
            "pillar" => Ok(Paradigm::Pillar),
            _ => Err(Error::InvalidConfig(format!("unknown paradigm {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewsConfig {
    pub bev: ViewSpec,
    pub spv: ViewSpec,
    pub cyv: ViewSpec,
    pub xz_positive: ViewSpec,
    pub xz_negative: ViewSpec,
}

impl Default for ViewsConfig {
    fn default() -> Self {
        Self {
            bev: ViewSpec::bev(),
            spv: ViewSpec::spherical(),
            cyv: ViewSpec::cylindrical(),
            xz_positive: ViewSpec::xz(Half::Positive),
            xz_negative: ViewSpec::xz(Half::Negative),
        }
    }
}

impl ViewsConfig {
    pub fn all(&self) -> [&ViewSpec; 5] {
        [
            &self.bev,
            &self.spv,
            &self.cyv,
            &self.xz_positive,
            &self.xz_negative,
        ]
    }

    /// The `ViewSpec` used for a view kind; XZ resolves to the positive half.
    pub fn get(&self, kind: ViewKind) -> &ViewSpec {
        match kind {
            ViewKind::Bev => &self.bev,
            ViewKind::Spv => &self.spv,
            ViewKind::Cyv => &self.cyv,
            ViewKind::Xz => &self.xz_positive,
        }
    }

    fn validate(&self) -> Result<()> {
        let expected = [
            ViewKind::Bev,
            ViewKind::Spv,
            ViewKind::Cyv,
            ViewKind::Xz,
            ViewKind::Xz,
        ];
        for (spec, kind) in self.all().into_iter().zip(expected) {
            if spec.kind != kind {
                return Err(Error::InvalidConfig(format!(
                    "view slot for {kind:?} holds a {:?} spec",
                    spec.kind
                )));
            }
            spec.validate()?;
        }
        if self.xz_positive.half != Some(Half::Positive)
            || self.xz_negative.half != Some(Half::Negative)
        {
            return Err(Error::InvalidConfig("XZ view halves are swapped".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassConfig {
    pub name: String,
    pub class_id: u32,
    pub nms_iou_threshold: f64,
    pub eval_iou_threshold: f64,
}

impl ClassConfig {
    pub fn vehicle() -> Self {
        Self {
            name: "vehicle".into(),
            class_id: 0,
            nms_iou_threshold: NmsConfig::default().iou_threshold,
            eval_iou_threshold: EvalConfig::default().iou_threshold,
        }
    }

    pub fn pedestrian() -> Self {
        Self {
            name: "pedestrian".into(),
            class_id: 1,
            nms_iou_threshold: NmsConfig::pedestrian().iou_threshold,
            eval_iou_threshold: EvalConfig::pedestrian().iou_threshold,
        }
    }
}

fn default_feature_views() -> Vec<ViewKind> {
    vec![ViewKind::Bev, ViewKind::Cyv]
}

fn default_classes() -> Vec<ClassConfig> {
    vec![ClassConfig::vehicle(), ClassConfig::pedestrian()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub views: ViewsConfig,
    /// Views pooled and projected back to points, concatenated in order.
    #[serde(default = "default_feature_views")]
    pub point_feature_views: Vec<ViewKind>,
    #[serde(default)]
    pub paradigm: Paradigm,
    #[serde(default)]
    pub interp: Interp,
    #[serde(default)]
    pub anchor: AnchorSpec,
    #[serde(default)]
    pub loss: LossConfig,
    /// Shared NMS settings; the IoU threshold is replaced per class.
    #[serde(default)]
    pub nms: NmsConfig,
    #[serde(default)]
    pub nms_iou_kind: IouKind,
    /// Shared eval settings; the IoU threshold is replaced per class.
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_classes")]
    pub classes: Vec<ClassConfig>,
    #[serde(default)]
    pub scene: SceneConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::malformed(path, j.to_string()),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.views.validate()?;
        self.anchor.validate()?;
        self.loss.validate()?;
        self.nms.validate()?;
        self.eval.validate()?;
        self.scene.validate()?;
        if self.classes.is_empty() {
            return Err(Error::InvalidConfig("class table is empty".into()));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if self.classes[..i].iter().any(|o| o.class_id == c.class_id) {
                return Err(Error::InvalidConfig(format!(
                    "class id {} listed twice",
                    c.class_id
                )));
            }
            self.nms_for(c).validate()?;
            self.eval_for(c).validate()?;
        }
        Ok(())
    }

    pub fn class(&self, class_id: u32) -> Option<&ClassConfig> {
        self.classes.iter().find(|c| c.class_id == class_id)
    }

    pub fn class_name(&self, class_id: u32) -> String {
        self.class(class_id)
            .map_or_else(|| format!("class_{class_id}"), |c| c.name.clone())
    }

    pub fn nms_for(&self, class: &ClassConfig) -> NmsConfig {
        NmsConfig {
            iou_threshold: class.nms_iou_threshold,
            ..self.nms
        }
    }

    pub fn eval_for(&self, class: &ClassConfig) -> EvalConfig {
        EvalConfig {
            iou_threshold: class.eval_iou_threshold,
            ..self.eval.clone()
        }
    }

    /// Settings for [`detect::run_pipeline`] for one class; unknown classes
    /// use the shared NMS settings.
    pub fn detect_config(&self, class_id: u32) -> detect::PipelineConfig {
        let nms = self.class(class_id).map_or(self.nms, |c| self.nms_for(c));
        detect::PipelineConfig {
            bev: self.views.bev,
            feature_views: self
                .point_feature_views
                .iter()
                .map(|k| *self.views.get(*k))
                .collect(),
            interp: self.interp,
            nms,
            nms_iou_kind: self.nms_iou_kind,
            class_id,
        }
    }
}
