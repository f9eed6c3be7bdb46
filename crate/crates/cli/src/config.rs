use std::path::{Path, PathBuf};

use regionformer::model::ModelConfig;
use regionformer::synth::SynthSpec;
use regionformer::{Error, Result};
use serde::{Deserialize, Serialize};

/// Everything a `train` or `ablate` run needs. Every key is optional; paths
/// given on the command line take precedence over the ones stored here.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Dataset directory.
    pub data: Option<PathBuf>,
    /// Output directory.
    pub out: Option<PathBuf>,
    /// Generate the dataset in memory from this spec when no data directory
    /// is given.
    pub synth: Option<SynthSpec>,
    /// Add top/bottom POI-density strata to the test report.
    pub stratify_poi: bool,
    /// Evaluation threads.
    pub threads: usize,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.model.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.model.l_x, 3);
        assert!(c.synth.is_none());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"modle": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"model": {"dd": 3}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"synth": {"alpah": 0.1}}"#).is_err());
    }

    #[test]
    fn nested_overrides_keep_other_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"model": {"d": 16, "k": 4}, "synth": {"alpha": 0.0}}"#).unwrap();
        assert_eq!((c.model.d, c.model.k, c.model.p), (16, 4, 12));
        assert_eq!(c.synth.unwrap().alpha, 0.0);
    }
}
