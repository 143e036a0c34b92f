//! Experiment configuration: one JSON document resolving to model and
//! training configurations per seed, with task-specific defaults.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, Task};
use crate::error::{Error, Result};
use crate::eval::{evaluate_run, EvalOptions, RunReport};
use crate::graph::SplitName;
use crate::layers::{ConvKind, Readout};
use crate::model::{AttentionGnnSpec, AttentionKind, AttentionSpec, ModelConfig, PoolSpec};
use crate::pooling::PoolMode;
use crate::training::{train_with, EpochRecord, Supervision, TrainConfig, TrainData, TrainOutcome, WeakLabels};

/// Attention subnetwork used for hidden-layer pooling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnArch {
    /// Same stack as the classifier with scale count 2.
    #[default]
    PaperAppendix,
    /// Three layers of 32 filters.
    PaperBody,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub model: ConvKind,
    pub pooling: PoolMode,
    #[serde(default = "default_supervision")]
    pub supervision: Supervision,
    #[serde(default)]
    pub alpha_tilde: Option<f64>,
    #[serde(default)]
    pub ratio: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub weight_decay: Option<f64>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub decay_epochs: Option<Vec<usize>>,
    #[serde(default)]
    pub filters: Option<Vec<usize>>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub mlp_hidden: Option<usize>,
    #[serde(default)]
    pub readout: Option<Readout>,
    #[serde(default)]
    pub attn_arch: Option<AttnArch>,
    /// Pooling points; 0 is the input.
    #[serde(default)]
    pub pool_after: Option<Vec<usize>>,
    /// Weak-label file, relative to the working directory.
    #[serde(default)]
    pub weak_labels: Option<PathBuf>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub eval_every: Option<usize>,
    /// Test graphs per split scored by occlusion when the model has no pooling.
    #[serde(default)]
    pub occlusion_limit: Option<usize>,
    #[serde(default)]
    pub freeze: Vec<String>,
    #[serde(default)]
    pub tag: Option<String>,
}

fn default_supervision() -> Supervision {
    Supervision::None
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl ExperimentConfig {
    pub fn new(task: Task, model: ConvKind, pooling: PoolMode, supervision: Supervision) -> Self {
        ExperimentConfig {
            task,
            model,
            pooling,
            supervision,
            alpha_tilde: None,
            ratio: None,
            beta: None,
            lr: None,
            batch_size: None,
            weight_decay: None,
            epochs: None,
            decay_epochs: None,
            filters: None,
            k: None,
            mlp_hidden: None,
            readout: None,
            attn_arch: None,
            pool_after: None,
            weak_labels: None,
            seeds: default_seeds(),
            eval_every: None,
            occlusion_limit: None,
            freeze: Vec::new(),
            tag: None,
        }
    }

    pub fn tag(&self) -> String {
        self.tag.clone().unwrap_or_else(|| {
            let sup = match self.supervision {
                Supervision::None => "unsup",
                Supervision::Gt => "sup",
                Supervision::Weak => "weaksup",
            };
            let pool = match self.pooling {
                PoolMode::None => "global",
                PoolMode::Topk => "topk",
                PoolMode::Threshold => "threshold",
            };
            if self.pooling == PoolMode::None {
                format!("{}-{pool}", self.model.as_str())
            } else {
                format!("{}-{pool}-{sup}", self.model.as_str())
            }
        })
    }

    /// Checks that exactly the fields required by the selected modes are set.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        match self.pooling {
            PoolMode::None => {
                if self.alpha_tilde.is_some() || self.ratio.is_some() {
                    return bad("global pooling takes neither alpha_tilde nor ratio");
                }
                if self.supervision != Supervision::None {
                    return bad("attention supervision needs a pooling mode");
                }
                if self.attn_arch.is_some() || self.pool_after.is_some() {
                    return bad("global pooling takes no attention settings");
                }
            }
            PoolMode::Topk => {
                if self.ratio.is_none() || self.alpha_tilde.is_some() {
                    return bad("topk pooling needs ratio and no alpha_tilde");
                }
            }
            PoolMode::Threshold => {
                if self.alpha_tilde.is_none() || self.ratio.is_some() {
                    return bad("threshold pooling needs alpha_tilde and no ratio");
                }
            }
        }
        if self.beta.is_some() && self.supervision == Supervision::None {
            return bad("beta applies to supervised or weakly supervised attention only");
        }
        if self.weak_labels.is_some() != (self.supervision == Supervision::Weak) {
            return bad("weak_labels is required for, and only for, weak supervision");
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        if self.task == Task::Colors && self.attn_arch.is_some() {
            return bad("attn_arch applies to triangles only");
        }
        Ok(())
    }

    /// Model configuration for inputs of width `in_dim`.
    pub fn model_config(&self, in_dim: usize) -> Result<ModelConfig> {
        self.validate()?;
        let colors = self.task == Task::Colors;
        let filters = self.filters.clone().unwrap_or_else(|| if colors { vec![64, 64] } else { vec![64, 64, 64] });
        let k = if self.model.is_multiscale() {
            Some(self.k.unwrap_or(if colors { 2 } else { 7 }))
        } else {
            if self.k.is_some() {
                return Err(Error::Config(format!("{} takes no k", self.model.as_str())));
            }
            None
        };
        let mlp_hidden = match self.model {
            ConvKind::Gin => Some(self.mlp_hidden.unwrap_or(if colors { 256 } else { 64 })),
            ConvKind::Chebygin => Some(self.mlp_hidden.unwrap_or(64)),
            _ => {
                if self.mlp_hidden.is_some() {
                    return Err(Error::Config(format!("{} takes no mlp_hidden", self.model.as_str())));
                }
                None
            }
        };
        let readout = self.readout.unwrap_or(if colors { Readout::Sum } else { Readout::Max });
        let (pool, attention) = match self.pooling {
            PoolMode::None => (PoolSpec::none(), None),
            mode => {
                let layers_after = self.pool_after.clone().unwrap_or_else(|| if colors { vec![0] } else { vec![1, 2] });
                let pool =
                    PoolSpec { mode, r: self.ratio, alpha_tilde: self.alpha_tilde, layers_after: layers_after.clone() };
                let attention = if colors {
                    let width = if layers_after[0] == 0 { in_dim } else { filters[layers_after[0] - 1] };
                    AttentionSpec { kind: AttentionKind::LinearProjection, gnn_spec: None, projection_dim: Some(width) }
                } else {
                    let hidden = match self.attn_arch.unwrap_or_default() {
                        AttnArch::PaperAppendix => filters[..filters.len() - 1].to_vec(),
                        AttnArch::PaperBody => vec![32, 32],
                    };
                    let gnn = AttentionGnnSpec {
                        conv: self.model,
                        hidden,
                        k: self.model.is_multiscale().then_some(2),
                        mlp_hidden,
                    };
                    AttentionSpec { kind: AttentionKind::Gnn, gnn_spec: Some(gnn), projection_dim: None }
                };
                (pool, Some(attention))
            }
        };
        let cfg = ModelConfig { conv: self.model, in_dim, filters, k, mlp_hidden, readout, pool, attention };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Training configuration for one seed.
    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        self.validate()?;
        let colors = self.task == Task::Colors;
        let attention = self.pooling != PoolMode::None;
        let (epochs, decay) = match (colors, attention) {
            (true, false) => (100, vec![90]),
            (true, true) => (300, vec![280]),
            (false, _) => (100, vec![85, 95]),
        };
        let epochs = self.epochs.unwrap_or(epochs);
        let decay_epochs = match &self.decay_epochs {
            Some(d) => d.clone(),
            None if self.epochs.is_some() => {
                // Keep the decay points at the same fractions of a shortened schedule.
                let full = if colors && attention { 300.0 } else { 100.0 };
                decay
                    .iter()
                    .map(|&d| (d as f64 / full * epochs as f64).round() as usize)
                    .filter(|&d| d < epochs)
                    .collect()
            }
            None => decay,
        };
        let cfg = TrainConfig {
            lr: self.lr.unwrap_or(1e-3),
            batch_size: self.batch_size.unwrap_or(32),
            weight_decay: self.weight_decay.unwrap_or(1e-4),
            epochs,
            decay_epochs,
            decay_factor: 0.1,
            beta: self.beta.unwrap_or(if self.supervision == Supervision::None { 0.0 } else { 100.0 }),
            supervision: self.supervision,
            seed,
            eval_every: self.eval_every.unwrap_or(1),
            freeze: self.freeze.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One trained and evaluated seed.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub outcome: TrainOutcome<f64>,
    pub report: RunReport,
    pub train_secs: f64,
}

impl ExperimentConfig {
    /// Rejects datasets the experiment cannot run on, before any training.
    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        self.validate()?;
        if data.info.task != self.task {
            return Err(Error::Config(format!("experiment is for {}, dataset holds {}", self.task, data.info.task)));
        }
        let train = data.require(SplitName::Train)?;
        if self.supervision == Supervision::Gt {
            if let Some(i) = train.graphs.iter().position(|g| g.gt_attention().is_none()) {
                return Err(Error::Config(format!("supervision gt: training graph {i} has no gt_attn")));
            }
        }
        self.model_config(data.info.feature_dim)?;
        Ok(())
    }

    pub fn eval_options(&self, jobs: usize) -> EvalOptions {
        EvalOptions { occlusion_limit: self.occlusion_limit, jobs, ..EvalOptions::default() }
    }

    /// Trains one seed on the train split (validation on val) and evaluates every test split.
    pub fn run_seed(
        &self,
        data: &Dataset,
        weak: Option<&WeakLabels>,
        seed: u64,
        jobs: usize,
        on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<SeedRun> {
        self.check_dataset(data)?;
        let model_cfg = self.model_config(data.info.feature_dim)?;
        let train_cfg = self.train_config(seed)?;
        let input = TrainData {
            train: data.require(SplitName::Train)?,
            val: data.split(SplitName::Val),
            weak,
            label_range: data.info.label_range,
        };
        let start = Instant::now();
        let outcome = train_with::<f64>(&model_cfg, input, &train_cfg, on_epoch)?;
        let train_secs = start.elapsed().as_secs_f64();
        let report = evaluate_run(&outcome.model, data, &self.tag(), seed, &self.eval_options(jobs))?;
        Ok(SeedRun { seed, outcome, report, train_secs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strict_parsing_and_mode_fields() {
        let ok = r#"{"task":"colors","model":"gin","pooling":"threshold","supervision":"gt","alpha_tilde":0.05}"#;
        let cfg: ExperimentConfig = serde_json::from_str(ok).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.tag(), "gin-threshold-sup");
        let typo = r#"{"task":"colors","model":"gin","pooling":"none","alpah_tilde":0.05}"#;
        assert!(serde_json::from_str::<ExperimentConfig>(typo).is_err());

        let mut c = cfg.clone();
        c.alpha_tilde = None;
        assert!(c.validate().is_err());
        let mut c = cfg.clone();
        c.ratio = Some(0.5);
        assert!(c.validate().is_err());
        let mut c = cfg.clone();
        c.supervision = Supervision::Weak;
        assert!(c.validate().is_err());
        c.weak_labels = Some("w.jsonl".into());
        c.validate().unwrap();
        let mut c = ExperimentConfig::new(Task::Colors, ConvKind::Gin, PoolMode::None, Supervision::None);
        c.beta = Some(10.0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn colors_defaults() {
        let mut e = ExperimentConfig::new(Task::Colors, ConvKind::Gin, PoolMode::Threshold, Supervision::Gt);
        e.alpha_tilde = Some(0.05);
        let m = e.model_config(4).unwrap();
        assert_eq!(m.filters, vec![64, 64]);
        assert_eq!(m.mlp_hidden, Some(256));
        assert_eq!(m.readout, Readout::Sum);
        assert_eq!(m.pool.layers_after, vec![0]);
        assert_eq!(m.attention.unwrap().projection_dim, Some(4));
        let t = e.train_config(3).unwrap();
        assert_eq!((t.epochs, t.decay_epochs.clone(), t.beta, t.seed), (300, vec![280], 100.0, 3));
        e.epochs = Some(30);
        assert_eq!(e.train_config(0).unwrap().decay_epochs, vec![28]);

        let g = ExperimentConfig::new(Task::Colors, ConvKind::Cheby, PoolMode::None, Supervision::None);
        let m = g.model_config(4).unwrap();
        assert_eq!((m.k, m.mlp_hidden), (Some(2), None));
        assert_eq!(g.train_config(0).unwrap().epochs, 100);
    }

    #[test]
    fn triangles_defaults() {
        let mut e = ExperimentConfig::new(Task::Triangles, ConvKind::Chebygin, PoolMode::Topk, Supervision::Gt);
        e.ratio = Some(0.97);
        let m = e.model_config(12).unwrap();
        assert_eq!((m.k, m.mlp_hidden, m.readout), (Some(7), Some(64), Readout::Max));
        assert_eq!(m.pool.layers_after, vec![1, 2]);
        let g = m.attention.unwrap().gnn_spec.unwrap();
        assert_eq!((g.hidden, g.k), (vec![64, 64], Some(2)));
        e.attn_arch = Some(AttnArch::PaperBody);
        assert_eq!(e.model_config(12).unwrap().attention.unwrap().gnn_spec.unwrap().hidden, vec![32, 32]);
        assert_eq!(e.train_config(0).unwrap().decay_epochs, vec![85, 95]);
    }
}
