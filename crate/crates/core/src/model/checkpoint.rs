//! Single-document JSON checkpoints.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use super::config::ModelConfig;
use super::net::{Model, ModelContext};
use crate::autodiff::serial::{tensor_from_raw, tensor_to_raw};
use crate::autodiff::Tensor;
use crate::data::{DataBundle, DatasetNorm, NormStats};
use crate::embeddings::E_X_KEY;
use crate::error::{Error, Result};

const FORMAT: &str = "regionformer-checkpoint/1";
const ADJACENCY_KEY: &str = "region.adjacency";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Doc {
    format: String,
    config: ModelConfig,
    n_roads: usize,
    n_cells: usize,
    params: IndexMap<String, Box<RawValue>>,
    buffers: IndexMap<String, Box<RawValue>>,
}

/// Trained parameters plus everything needed to rebuild the model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub n_roads: usize,
    pub n_cells: usize,
    pub norm: DatasetNorm,
    pub params: IndexMap<String, Tensor>,
    /// Non-trainable tensors: road embedding and, when used, the cell graph.
    pub buffers: IndexMap<String, Tensor>,
}

fn norm_tensors(norm: &DatasetNorm) -> Result<[(&'static str, Tensor); 4]> {
    let t = |v: &Vec<f64>| Tensor::new(vec![v.len()], v.clone());
    Ok([
        ("norm.x.mean", t(&norm.x.mean)?),
        ("norm.x.std", t(&norm.x.std)?),
        ("norm.z.mean", t(&norm.z.mean)?),
        ("norm.z.std", t(&norm.z.std)?),
    ])
}

impl Checkpoint {
    pub fn from_model(model: &Model, norm: &DatasetNorm) -> Result<Self> {
        let params = model
            .store
            .iter()
            .map(|(k, t)| (k.to_string(), t.clone()))
            .collect();
        let mut buffers = IndexMap::new();
        buffers.insert(E_X_KEY.to_string(), model.context.e_x.clone());
        if let Some(a) = &model.context.adjacency {
            buffers.insert(ADJACENCY_KEY.to_string(), a.clone());
        }
        for (k, t) in norm_tensors(norm)? {
            buffers.insert(k.to_string(), t);
        }
        Ok(Checkpoint {
            config: model.config.clone(),
            n_roads: model.context.n_x,
            n_cells: model.context.n_z,
            norm: norm.clone(),
            params,
            buffers,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let raw = |m: &IndexMap<String, Tensor>| -> Result<IndexMap<String, Box<RawValue>>> {
            m.iter().map(|(k, t)| Ok((k.clone(), tensor_to_raw(t)?))).collect()
        };
        let doc = Doc {
            format: FORMAT.to_string(),
            config: self.config.clone(),
            n_roads: self.n_roads,
            n_cells: self.n_cells,
            params: raw(&self.params)?,
            buffers: raw(&self.buffers)?,
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: Doc = serde_json::from_str(s)?;
        if doc.format != FORMAT {
            return Err(Error::data(format!("unsupported checkpoint format `{}`", doc.format)));
        }
        doc.config.validate()?;
        let tensors = |m: IndexMap<String, Box<RawValue>>| -> Result<IndexMap<String, Tensor>> {
            m.into_iter()
                .map(|(k, v)| {
                    let t = tensor_from_raw(&v).map_err(|e| Error::data(format!("checkpoint tensor `{k}`: {e}")))?;
                    Ok((k, t))
                })
                .collect()
        };
        let params = tensors(doc.params)?;
        let buffers = tensors(doc.buffers)?;
        let vec = |k: &str| -> Result<Vec<f64>> {
            buffers
                .get(k)
                .map(|t| t.data().to_vec())
                .ok_or_else(|| Error::data(format!("checkpoint lacks `{k}`")))
        };
        let norm = DatasetNorm {
            x: NormStats {
                mean: vec("norm.x.mean")?,
                std: vec("norm.x.std")?,
            },
            z: NormStats {
                mean: vec("norm.z.mean")?,
                std: vec("norm.z.std")?,
            },
        };
        Ok(Checkpoint {
            config: doc.config,
            n_roads: doc.n_roads,
            n_cells: doc.n_cells,
            norm,
            params,
            buffers,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    /// Rebuilds the model against `bundle`, refusing mismatched shapes or names.
    pub fn to_model(&self, bundle: &DataBundle) -> Result<Model> {
        let (n_x, n_z) = (bundle.graph.n_nodes(), bundle.grid.n_cells());
        if (n_x, n_z) != (self.n_roads, self.n_cells) {
            return Err(Error::config(format!(
                "checkpoint expects {} roads and {} cells, dataset has {n_x} and {n_z}",
                self.n_roads, self.n_cells
            )));
        }
        let e_x = self
            .buffers
            .get(E_X_KEY)
            .cloned()
            .ok_or_else(|| Error::data(format!("checkpoint lacks `{E_X_KEY}`")))?;
        let adjacency = self.buffers.get(ADJACENCY_KEY).cloned();
        let ctx = ModelContext::assemble(&self.config, bundle, e_x, adjacency)?;
        let mut model = Model::new(self.config.clone(), ctx)?;
        if model.store.len() != self.params.len() {
            return Err(Error::config(format!(
                "checkpoint has {} parameters, configuration builds {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (name, t) in &self.params {
            let id = model
                .store
                .id(name)
                .ok_or_else(|| Error::config(format!("checkpoint parameter `{name}` not in model")))?;
            model
                .store
                .set_value(id, t.clone())
                .map_err(|e| Error::config(format!("parameter `{name}`: {e}")))?;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::super::fixture::{batch, model};
    use super::super::Variant;
    use super::*;

    #[test]
    fn json_round_trip_is_exact() {
        for v in [Variant::Full, Variant::NoRegion, Variant::CnnSpatial] {
            let (m, b) = model(v);
            let norm = b.data.norm.clone().unwrap();
            let ck = Checkpoint::from_model(&m, &norm).unwrap();
            let text = ck.to_json().unwrap();
            let back = Checkpoint::from_json(&text).unwrap();
            assert_eq!(back.to_json().unwrap(), text);
            assert_eq!(back.norm, norm);
            let m2 = back.to_model(&b).unwrap();
            assert!(m.store.values_bitwise_eq(&m2.store));
            let batch = batch(&m, &b, 2);
            let (p, p2) = (m.predict(&batch).unwrap(), m2.predict(&batch).unwrap());
            assert!(p.data().iter().zip(p2.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{v}");
        }
    }

    #[test]
    fn mismatches_are_refused() {
        let (m, b) = model(Variant::Full);
        let norm = b.data.norm.clone().unwrap();
        let mut ck = Checkpoint::from_model(&m, &norm).unwrap();
        let (name, t) = ck.params.get_index(0).map(|(k, t)| (k.clone(), t.clone())).unwrap();
        ck.params.insert(name.clone(), Tensor::zeros(&[t.numel() + 1]));
        assert!(ck.to_model(&b).is_err());
        ck.params.shift_remove(&name);
        assert!(ck.to_model(&b).is_err());
        let ck = Checkpoint {
            n_roads: 99,
            ..Checkpoint::from_model(&m, &norm).unwrap()
        };
        assert!(ck.to_model(&b).is_err());
        assert!(Checkpoint::from_json(r#"{"format":"other"}"#).is_err());
    }
}
