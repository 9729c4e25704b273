//! Service configuration, read from a TOML or JSON file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_store::StayCap;
use crate::forecaster::{Family, TargetSpec, TrainConfig};
use crate::service::Thresholds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Holds the encounter log, model bundle, prediction and action logs.
    pub data_dir: PathBuf,
    pub bind: String,
    pub port: u16,
    /// Static bearer token required by the HTTP API when set.
    pub api_token: Option<String>,
    pub stay_cap_hours: i64,
    pub thresholds: Thresholds,
    /// Target label (`census/2h`) to family name (`GBM`). Targets not
    /// listed use the family with the lowest test MAE.
    pub deployment: BTreeMap<String, Family>,
    pub train: TrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("edf-data"),
            bind: "127.0.0.1".into(),
            port: 8080,
            api_token: None,
            stay_cap_hours: StayCap::default().hours,
            thresholds: Thresholds::default(),
            deployment: BTreeMap::new(),
            train: TrainConfig::default(),
        }
    }
}

impl Config {
    /// Parse by extension: `.json` as JSON, anything else as TOML.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: Config = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            serde_json::from_str(&raw).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&raw).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stay_cap_hours <= 0 {
            return Err(Error::Config("stay_cap_hours must be positive".into()));
        }
        let t = &self.thresholds;
        if !(t.psi > 0.0 && t.mae_ratio > 0.0) || t.max_reconcile_attempts == 0 {
            return Err(Error::Config("alarm thresholds must be positive".into()));
        }
        self.deployment_overrides()?;
        Ok(())
    }

    pub fn stay_cap(&self) -> StayCap {
        StayCap {
            hours: self.stay_cap_hours,
        }
    }

    pub fn deployment_overrides(&self) -> Result<Vec<(TargetSpec, Family)>> {
        self.deployment
            .iter()
            .map(|(k, &f)| {
                TargetSpec::parse(k)
                    .map(|t| (t, f))
                    .ok_or_else(|| Error::Config(format!("unknown deployment target {k:?}")))
            })
            .collect()
    }

    pub fn encounters_log(&self) -> PathBuf {
        self.data_dir.join("encounters.jsonl")
    }

    pub fn model_bundle(&self) -> PathBuf {
        self.data_dir.join("models.json")
    }

    pub fn predictions_log(&self) -> PathBuf {
        self.data_dir.join("predictions.jsonl")
    }

    pub fn actions_log(&self) -> PathBuf {
        self.data_dir.join("shift_actions.jsonl")
    }

    pub fn evaluation_report(&self) -> PathBuf {
        self.data_dir.join("evaluation.json")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_json_agree() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("edf.toml");
        std::fs::write(
            &toml_path,
            "port = 9000\n[thresholds]\npsi = 0.25\n[deployment]\n\"census/2h\" = \"GLM-Ridge\"\n",
        )
        .unwrap();
        let json_path = dir.path().join("edf.json");
        std::fs::write(
            &json_path,
            r#"{"port": 9000, "thresholds": {"psi": 0.25}, "deployment": {"census/2h": "GLM-Ridge"}}"#,
        )
        .unwrap();
        let a = Config::load(&toml_path).unwrap();
        let b = Config::load(&json_path).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.port, 9000);
        assert_eq!(a.thresholds.mae_ratio, 1.25);
        assert_eq!(a.deployment_overrides().unwrap().len(), 1);
    }

    #[test]
    fn rejects_unknown_target_and_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.toml");
        std::fs::write(&p, "[deployment]\n\"census/3h\" = \"GBM\"\n").unwrap();
        assert!(Config::load(&p).is_err());
        std::fs::write(&p, "prot = 1\n").unwrap();
        assert!(Config::load(&p).is_err());
    }
}
