//! Flat TOML run configuration. Every key is optional and every command-line
//! flag overrides the key of the same name.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BandwidthSetting {
    Width(f64),
    Text(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Directory holding offers.csv, market.csv and (optionally) areas.csv.
    pub data: Option<PathBuf>,
    pub offers: Option<PathBuf>,
    pub market: Option<PathBuf>,
    pub areas: Option<PathBuf>,
    /// Observation panel for `rdd`; built from the dataset when absent.
    pub panel: Option<PathBuf>,
    /// Synthetic spec; `pipeline` generates its dataset from it first.
    pub spec: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,

    /// `isone` (10 segments) or `nyiso` (12 segments).
    pub iso: Option<String>,
    /// `rsi` or `congestion`.
    pub score: Option<String>,
    pub cutoff: Option<f64>,
    /// `max-output` or `segment-quantity`.
    pub must_take: Option<String>,
    pub window_days: Option<u32>,

    pub preset: Option<Vec<String>>,
    /// CSV with an `hour` column of hours to leave out of scenarios.
    pub exclude: Option<PathBuf>,
    pub conduct_abs: Option<f64>,
    pub conduct_pct: Option<f64>,
    pub impact_abs: Option<f64>,
    pub impact_pct: Option<f64>,
    pub structural_test: Option<bool>,
    /// `mitigated` or `unmitigated`.
    pub impact_base: Option<String>,
    pub area_avg_price: Option<f64>,
    pub area_constrained_hours: Option<f64>,

    /// A width, or `retain:<fraction>`.
    pub bandwidth: Option<BandwidthSetting>,
    pub retain: Option<f64>,
    pub fuzzy: Option<f64>,
    /// Interact the score with the sharp indicator instead of the fuzzy probability.
    pub sharp_interaction: Option<bool>,
    pub quadratic: Option<bool>,
    pub fixed_effects: Option<bool>,
    pub per_bidder: Option<bool>,
    pub min_rows: Option<usize>,

    /// Pipeline steps, run in dependency order.
    pub steps: Option<Vec<String>>,
}

impl Config {
    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Config = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.data,
            &mut cfg.offers,
            &mut cfg.market,
            &mut cfg.areas,
            &mut cfg.panel,
            &mut cfg.spec,
            &mut cfg.out,
            &mut cfg.exclude,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_keys_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "data = \"sample\"\nseed = 7\npreset = [\"baseline\", \"lower-conduct\"]\nbandwidth = \"retain:0.3\"\n",
        )
        .unwrap();
        let cfg = Config::load(&path).unwrap();
        assert_eq!(cfg.data, Some(dir.path().join("sample")));
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.bandwidth, Some(BandwidthSetting::Text("retain:0.3".into())));
        assert_eq!(cfg.preset.unwrap().len(), 2);
    }

    #[test]
    fn rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "bandwith = 0.2\n").unwrap();
        assert!(Config::load(&path).is_err());
    }
}
