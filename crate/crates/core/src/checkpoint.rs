//! Model checkpoints as JSON: the model configuration plus named parameter tensors.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::datasets::Task;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::seeding::substream;
use crate::training::{TrainConfig, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub task: Task,
    /// Experiment tag, e.g. `gin-threshold-sup`.
    pub tag: String,
    pub label_range: [i64; 2],
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    /// Adam `(beta1, beta2, eps)`.
    pub adam: [f64; 3],
    pub final_train_loss: Option<f64>,
    pub params: BTreeMap<String, ParamEntry>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(
        model: &Model<T>,
        task: Task,
        tag: &str,
        label_range: [i64; 2],
        train: Option<&TrainConfig>,
        final_train_loss: Option<f64>,
    ) -> Checkpoint {
        let params = model
            .params
            .iter()
            .map(|(name, t)| (name.to_string(), ParamEntry { rows: t.rows(), cols: t.cols(), data: t.to_f64_vec() }))
            .collect();
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            task,
            tag: tag.to_string(),
            label_range,
            model: model.config.clone(),
            train: train.cloned(),
            adam: [ADAM_BETA1, ADAM_BETA2, ADAM_EPS],
            final_train_loss,
            params,
        }
    }

    /// Rebuilds the model; every parameter must be present with its original shape.
    pub fn to_model<T: Scalar>(&self) -> Result<Model<T>> {
        let mut model = Model::<T>::new(self.model.clone(), &mut substream(0, "checkpoint"))?;
        if model.params.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.name(id).to_string();
            let entry =
                self.params.get(&name).ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            let t = Tensor::from_f64(entry.rows, entry.cols, &entry.data)?;
            if t.shape() != model.params.get(id).shape() {
                return Err(Error::shape("checkpoint", t.shape(), model.params.get(id).shape()));
            }
            *model.params.get_mut(id) = t;
        }
        Ok(model)
    }

    /// Writes through a temporary file in the same directory, then renames.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        serde_json::to_writer(&mut tmp, self)?;
        tmp.write_all(b"\n")?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let ck: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "{}: unsupported checkpoint version {}",
                path.display(),
                ck.format_version
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Graph, Topology};
    use crate::layers::{ConvKind, Readout};
    use crate::model::{AttentionKind, AttentionSpec, PoolSpec};
    use crate::pooling::PoolMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn save_load_preserves_predictions() {
        let cfg = ModelConfig {
            conv: ConvKind::Gin,
            in_dim: 4,
            filters: vec![8, 8],
            k: None,
            mlp_hidden: Some(16),
            readout: Readout::Sum,
            pool: PoolSpec { mode: PoolMode::Threshold, r: None, alpha_tilde: Some(0.05), layers_after: vec![0] },
            attention: Some(AttentionSpec {
                kind: AttentionKind::LinearProjection,
                gnn_spec: None,
                projection_dim: Some(4),
            }),
        };
        let model: Model<f64> = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let topo = Topology::new(3, vec![[0, 1], [1, 2]]).unwrap();
        let g = Graph::new(topo, 4, vec![1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0.], 1, None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        Checkpoint::from_model(&model, Task::Colors, "gin-threshold-sup", [0, 10], None, Some(1.5))
            .save(&path)
            .unwrap();
        let back: Model<f64> = Checkpoint::load(&path).unwrap().to_model().unwrap();
        assert_eq!(back.params.values(), model.params.values());
        assert_eq!(back.predict(&g).unwrap(), model.predict(&g).unwrap());

        let mut ck = Checkpoint::load(&path).unwrap();
        ck.params.remove("head.bias");
        assert!(ck.to_model::<f64>().is_err());
    }
}
