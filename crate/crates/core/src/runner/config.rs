//! JSON run configuration and the ablation overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::OptimizerKind;
use crate::datakit::{BlobSpec, WarpSpec};
use crate::error::{Error, Result};
use crate::netlib::{default_groups, ClassifierMode, LayerSpec, ModelSpec, NormKind, ProjectorDims, ProjectorMode};
use crate::objective::{ClsKind, LossConfig};
use crate::oodeval::ProbeConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    CosineWarmup,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodSpec {
    pub name: String,
    pub spec: BlobSpec,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub id: BlobSpec,
    pub n_id: usize,
    /// Stratified train/test fractions of the ID samples.
    pub id_split: [f64; 2],
    pub oods: Vec<OodSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case", deny_unknown_fields)]
pub enum FileSource {
    Csv {
        path: PathBuf,
        #[serde(default)]
        has_header: bool,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedSource {
    pub name: String,
    pub source: FileSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileData {
    pub id_train: FileSource,
    pub id_test: FileSource,
    pub oods: Vec<NamedSource>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    Synthetic(SyntheticData),
    Files(FileData),
}

impl DataConfig {
    /// Ten ID classes and two disjoint ten-class OOD sets in 64 dimensions,
    /// all passed through the same fixed random warp. Every class mean lies in
    /// one shared 8-dimensional subspace, so OOD classes are near-OOD in input
    /// space and only learned features separate them.
    pub fn desk_scale() -> Self {
        let warp = WarpSpec {
            seed: 17,
            hidden: 64,
            strength: 2.0,
            gain: 2.0,
        };
        let blob = |k| BlobSpec {
            num_classes: k,
            dim: 64,
            radius: 4.0,
            sigma: 0.5,
            latent_dim: Some(8),
            priors: None,
            warp: Some(warp.clone()),
        };
        DataConfig::Synthetic(SyntheticData {
            id: blob(10),
            n_id: 3000,
            id_split: [2.0 / 3.0, 1.0 / 3.0],
            oods: (0..2)
                .map(|i| OodSpec {
                    name: format!("ood{i}"),
                    spec: blob(10),
                    n: 2000,
                })
                .collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub schedule: Schedule,
    pub loss: LossConfig,
    pub seed: u64,
    pub model: ModelSpec,
    pub data: DataConfig,
    pub probe: ProbeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adamw,
            learning_rate: 1e-3,
            weight_decay: 0.05,
            momentum: 0.9,
            betas: [0.9, 0.999],
            eps: 1e-8,
            epochs: 60,
            batch_size: 128,
            warmup_epochs: 5,
            schedule: Schedule::CosineWarmup,
            loss: LossConfig::default(),
            seed: 0,
            model: default_model(),
            data: DataConfig::desk_scale(),
            probe: ProbeConfig::default(),
        }
    }
}

/// Four width-128 `affine(WS) → GN → relu` blocks on 64-d input, a frozen
/// ETF projector 128 → 512 → 128 with L2 normalization, and a 10-way head.
pub fn default_model() -> ModelSpec {
    ModelSpec {
        input_dim: 64,
        encoder: ModelSpec::mlp_encoder(64, 128, 4, NormKind::GnWs),
        projector_mode: ProjectorMode::FixedEtf,
        projector: ProjectorDims {
            input: 128,
            hidden: 512,
            output: 128,
        },
        projector_l2: true,
        num_classes: 10,
        classifier: ClassifierMode::Plastic,
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config("warmup_epochs must not exceed epochs".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        self.loss.validate()?;
        self.model.layers().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Whether any batch needs at least two samples.
    pub fn needs_pairs(&self) -> bool {
        self.loss.needs_pairs()
            || self
                .model
                .encoder
                .iter()
                .any(|l| matches!(l, LayerSpec::BatchNorm { .. }))
    }
}

/// Overrides matching the ablation study axes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ablation {
    pub projector: Option<ProjectorMode>,
    pub l2_norm: Option<bool>,
    pub norm: Option<NormKind>,
    pub loss: Option<ClsKind>,
    pub optimizer: Option<OptimizerKind>,
    pub classifier: Option<ClassifierMode>,
    pub alpha: Option<f64>,
}

impl Ablation {
    pub fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        if let Some(p) = self.projector {
            cfg.model.projector_mode = p;
        }
        if let Some(l2) = self.l2_norm {
            cfg.model.projector_l2 = l2;
        }
        if let Some(norm) = self.norm {
            let mut width = cfg.model.input_dim;
            for l in &mut cfg.model.encoder {
                match l {
                    LayerSpec::Affine {
                        out_dim,
                        weight_standardized,
                        ..
                    } => {
                        width = *out_dim;
                        *weight_standardized = norm == NormKind::GnWs;
                    }
                    LayerSpec::GroupNorm { .. } | LayerSpec::BatchNorm { .. } => {
                        *l = match norm {
                            NormKind::GnWs => LayerSpec::GroupNorm {
                                num_groups: default_groups(width),
                            },
                            NormKind::Bn => LayerSpec::BatchNorm { momentum: 0.1 },
                        }
                    }
                    _ => {}
                }
            }
        }
        if let Some(kind) = self.loss {
            cfg.loss.cls_kind = kind;
        }
        if let Some(opt) = self.optimizer {
            if opt == OptimizerKind::Sgd && cfg.optimizer != OptimizerKind::Sgd {
                // the SGD recipe: LR 0.2 and WD 1e-4
                cfg.learning_rate = 0.2;
                cfg.weight_decay = 1e-4;
            }
            cfg.optimizer = opt;
        }
        if let Some(c) = self.classifier {
            cfg.model.classifier = c;
        }
        if let Some(a) = self.alpha {
            cfg.loss.reg_alpha = a;
        }
        cfg.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_and_validates() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(TrainConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(TrainConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(matches!(
            TrainConfig::from_json(r#"{"epoch": 3}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            TrainConfig::from_json(r#"{"loss": {"alpha": 0.1}}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            TrainConfig::from_json(r#"{"epochs": 2, "warmup_epochs": 3}"#),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ablations() {
        let mut cfg = TrainConfig::default();
        Ablation {
            norm: Some(NormKind::Bn),
            alpha: Some(0.0),
            l2_norm: Some(false),
            projector: Some(ProjectorMode::Plastic),
            ..Ablation::default()
        }
        .apply(&mut cfg)
        .unwrap();
        assert!(cfg
            .model
            .encoder
            .iter()
            .any(|l| matches!(l, LayerSpec::BatchNorm { .. })));
        assert!(!cfg.model.encoder.iter().any(|l| matches!(
            l,
            LayerSpec::Affine {
                weight_standardized: true,
                ..
            }
        )));
        assert_eq!(cfg.loss.reg_alpha, 0.0);
        assert!(!cfg.model.projector_l2);
        assert!(cfg.needs_pairs());

        let mut cfg = TrainConfig::default();
        Ablation {
            optimizer: Some(OptimizerKind::Sgd),
            ..Ablation::default()
        }
        .apply(&mut cfg)
        .unwrap();
        assert_eq!((cfg.learning_rate, cfg.weight_decay), (0.2, 1e-4));
    }
}
