//! Run configuration file: `[train]`, `[synth]`, `[paths]` and `[report]`
//! tables, every key optional, unknown keys rejected.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use misleading_core::data::Split;
use misleading_core::metrics::{GroupBy, DEFAULT_THRESHOLD};
use misleading_core::synth::SynthConfig;
use misleading_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Dataset manifest used by `train` and `eval`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            manifest: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportOptions {
    pub threshold: f64,
    pub group_by: GroupBy,
    pub split: Split,
    /// Seed of the per-sample disturbance streams.
    pub disturbance_seed: u64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            group_by: GroupBy::Subgroup,
            split: Split::Test,
            disturbance_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub paths: Paths,
    pub report: ReportOptions,
}

/// Parses the right-hand side of `--set key=value` as a TOML value, falling
/// back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    toml::from_str::<Wrap>(&format!("v = {raw}"))
        .map(|w| w.v)
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}

fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("--set expects key=value, got {assignment:?}"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("bad config key {key:?}");
    }
    let (last, parents) = parts.split_last().expect("non-empty");
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("config key {p:?} is not a table"))?;
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Reads `path` (or the defaults) and applies `overrides` in order.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| anyhow!("invalid configuration: {e}"))?;
    cfg.train.validate()?;
    cfg.synth.validate()?;
    Ok(cfg)
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
    match v {
        toml::Value::Table(t) if !t.is_empty() && !prefix.contains("proportions") && !prefix.ends_with("n_per_split") => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// `key = default` lines for the given top-level tables.
pub fn key_listing(tables: &[&str]) -> String {
    let value = toml::Value::try_from(RunConfig::default()).expect("defaults serialize");
    let mut rows = Vec::new();
    flatten("", &value, &mut rows);
    let mut extra = Vec::new();
    if tables.contains(&"paths") {
        extra.push(("paths.manifest".to_string(), "(unset)".to_string()));
    }
    if tables.contains(&"synth") {
        extra.push(("synth.fake_fraction_by_subgroup".to_string(), "{}".to_string()));
    }
    rows.extend(extra);
    rows.sort();
    let mut s = String::from("Config keys (set in --config or with --set key=value):\n");
    for (k, v) in rows {
        if tables.iter().any(|t| k.starts_with(&format!("{t}."))) {
            s.push_str(&format!("  {k} = {v}\n"));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = load(None, &["train.lr=0.01".into(), "train.ablation.use_scam=false".into()]).unwrap();
        assert_eq!(cfg.train.lr, 0.01);
        assert!(!cfg.train.ablation.use_scam);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(load(None, &["train.learning_rate=0.01".into()]).is_err());
        assert!(load(None, &["bogus.x=1".into()]).is_err());
    }

    #[test]
    fn string_values_need_no_quotes() {
        let cfg = load(None, &["train.preprocess=dct".into(), "report.group_by=method".into()]).unwrap();
        assert_eq!(cfg.report.group_by, GroupBy::Method);
    }

    #[test]
    fn listing_names_train_keys() {
        let s = key_listing(&["train"]);
        assert!(s.contains("train.lr = "));
        assert!(s.contains("train.ablation.use_bias_sampling = true"));
        assert!(!s.contains("synth."));
    }
}
