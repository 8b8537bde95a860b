//! Run configuration: one TOML document with a section per stage, dotted-key
//! overrides and seed derivation from the top-level seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rocktoken::detect::DetectionConfig;
use rocktoken::reweight::Regime;
use rocktoken::rng::derive_seed;
use rocktoken::simlab::SimConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const CONFIG_ENV: &str = "ROCKTOKEN_CONFIG";

/// Stages whose `seed` is derived from the top-level seed unless set explicitly.
const SEEDED_STAGES: [&str; 5] = ["detect", "sweep", "gradgeom", "knockout", "mask"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub simulate: SimConfig,
    pub detect: DetectionConfig,
    pub sweep: SweepStage,
    pub gradgeom: GradgeomStage,
    pub knockout: KnockoutStage,
    pub mask: MaskStage,
    pub train: TrainStage,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 5,
            simulate: SimConfig::default(),
            detect: DetectionConfig::default(),
            sweep: SweepStage::default(),
            gradgeom: GradgeomStage::default(),
            knockout: KnockoutStage::default(),
            mask: MaskStage::default(),
            train: TrainStage::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepStage {
    /// Subsample sizes as fractions of the trajectory count.
    pub fractions: Vec<f64>,
    pub ks: Vec<usize>,
    pub repeats: usize,
    pub min_jaccard: f64,
    pub min_coverage: f64,
    pub basis: rocktoken::cutoff::RankBasis,
    pub seed: u64,
}

impl Default for SweepStage {
    fn default() -> Self {
        Self {
            fractions: vec![0.25, 0.5, 0.75],
            ks: vec![2, 4, 6, 8, 12, 16, 20, 24, 32],
            repeats: 8,
            min_jaccard: 0.70,
            min_coverage: 0.50,
            basis: Default::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradgeomStage {
    /// Checkpoint whose distributions feed the gradient summary.
    pub checkpoint: String,
    pub early: String,
    pub late: String,
    /// Checkpoint whose mean KL defines the rare high-KL group.
    pub group_checkpoint: String,
    pub rare_freq_percentile: f64,
    pub high_kl_percentile: f64,
    pub seed: u64,
}

impl Default for GradgeomStage {
    fn default() -> Self {
        let g = rocktoken::gradgeom::GroupConfig::default();
        Self {
            checkpoint: "post".into(),
            early: "pre".into(),
            late: "post".into(),
            group_checkpoint: g.checkpoint,
            rare_freq_percentile: g.rare_freq_percentile,
            high_kl_percentile: g.high_kl_percentile,
            seed: 0,
        }
    }
}

impl GradgeomStage {
    pub fn groups(&self) -> rocktoken::gradgeom::GroupConfig {
        rocktoken::gradgeom::GroupConfig {
            checkpoint: self.group_checkpoint.clone(),
            rare_freq_percentile: self.rare_freq_percentile,
            high_kl_percentile: self.high_kl_percentile,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnockoutStage {
    pub prompts: usize,
    pub rollouts: usize,
    pub resamples: usize,
    pub alpha: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub bh_q: f64,
    /// Core size K; the sweep's choice, else the rock-set size, when unset.
    pub core_k: Option<usize>,
    /// Screening pool size; twice the core size when unset.
    pub pool: Option<usize>,
    /// Phantom-token knockouts for false-positive calibration.
    pub null_candidates: usize,
    pub seed: u64,
}

impl Default for KnockoutStage {
    fn default() -> Self {
        let k = rocktoken::knockout::KnockoutConfig::default();
        Self {
            prompts: k.prompts,
            rollouts: k.rollouts,
            resamples: k.resamples,
            alpha: k.alpha,
            epsilon: k.epsilon,
            gamma: k.gamma,
            bh_q: k.bh_q,
            core_k: None,
            pool: None,
            null_candidates: 0,
            seed: 0,
        }
    }
}

impl KnockoutStage {
    pub fn knockout_config(&self) -> rocktoken::knockout::KnockoutConfig {
        rocktoken::knockout::KnockoutConfig {
            prompts: self.prompts,
            rollouts: self.rollouts,
            resamples: self.resamples,
            alpha: self.alpha,
            epsilon: self.epsilon,
            gamma: self.gamma,
            bh_q: self.bh_q,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskStage {
    pub regime: Regime,
    /// Weight on selected positions; 0 for the freeze regimes and 1 for the baseline when unset.
    pub lambda: Option<f64>,
    /// Window radius; the detection radius when unset.
    pub radius: Option<usize>,
    /// Checkpoint whose losses are reweighted in the summary.
    pub checkpoint: String,
    pub seed: u64,
}

impl Default for MaskStage {
    fn default() -> Self {
        Self {
            regime: Regime::RockFreeze,
            lambda: None,
            radius: None,
            checkpoint: "post".into(),
            seed: 0,
        }
    }
}

impl MaskStage {
    pub fn effective_lambda(&self) -> f64 {
        self.lambda.unwrap_or(match self.regime {
            Regime::Baseline => 1.0,
            _ => 0.0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainSource {
    /// Replays the simulate-stage trace with the mask-stage weights.
    Replay,
    /// Samples fresh rollouts, freezing windows around detected rock tokens.
    Online,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainStage {
    pub source: TrainSource,
    /// Also run the SGD vs adaptive-moment suppression probe.
    pub optimizer_probe: bool,
    pub probe_sgd_learning_rate: f64,
    pub probe_adam_learning_rate: f64,
}

impl Default for TrainStage {
    fn default() -> Self {
        Self {
            source: TrainSource::Replay,
            optimizer_probe: false,
            probe_sgd_learning_rate: 4.0,
            probe_adam_learning_rate: 0.05,
        }
    }
}

/// A resolved configuration together with the provenance needed to echo it.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub source: Option<PathBuf>,
    pub text: String,
    pub overrides: Vec<String>,
}

/// Reads the config file (explicit path, else the environment variable, else
/// defaults), applies overrides and fills stage seeds.
pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Resolved, CliError> {
    let env_path = std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
    let source = path.map(Path::to_path_buf).or(env_path);
    let text = match &source {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
        CliError::Validation(format!(
            "config {}: {}",
            source.as_deref().map_or("<default>".into(), |p| p.display().to_string()),
            e.message()
        ))
    })?;
    apply_overrides(&mut table, overrides)?;

    let explicit: Vec<bool> = SEEDED_STAGES
        .iter()
        .map(|s| table.get(*s).and_then(|v| v.as_table()).is_some_and(|t| t.contains_key("seed")))
        .collect();
    let simulate_seeded = table
        .get("simulate")
        .and_then(|v| v.as_table())
        .is_some_and(|t| t.contains_key("seed"));

    let mut config: RunConfig = toml::Value::Table(table.clone()).try_into().map_err(|e: toml::de::Error| {
        match unknown_keys(&table, overrides).first() {
            Some(k) => CliError::Validation(format!("unknown config key `{k}`")),
            None => CliError::Validation(format!("invalid config: {}", e.message())),
        }
    })?;
    if !simulate_seeded {
        config.simulate.seed = config.seed;
    }
    for (stage, set) in SEEDED_STAGES.iter().zip(explicit) {
        if set {
            continue;
        }
        let s = derive_seed(config.seed, stage);
        match *stage {
            "detect" => config.detect.seed = s,
            "sweep" => config.sweep.seed = s,
            "gradgeom" => config.gradgeom.seed = s,
            "knockout" => config.knockout.seed = s,
            "mask" => config.mask.seed = s,
            _ => unreachable!(),
        }
    }
    Ok(Resolved {
        config,
        source,
        text,
        overrides: overrides.to_vec(),
    })
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `dotted.key=value` pairs. A key given twice with different values,
/// or a key nested under another override, is a conflict.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<(), CliError> {
    let mut seen: BTreeMap<String, String> = BTreeMap::new();
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("override `{o}` is not of the form key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(CliError::Validation(format!("override `{o}` has an empty key segment")));
        }
        if let Some(prev) = seen.get(key) {
            if prev != raw {
                return Err(CliError::Validation(format!("conflicting overrides for key `{key}`")));
            }
            continue;
        }
        if let Some(other) = seen
            .keys()
            .find(|k| k.starts_with(&format!("{key}.")) || key.starts_with(&format!("{k}.")))
        {
            return Err(CliError::Validation(format!("conflicting overrides for key `{key}` and `{other}`")));
        }
        seen.insert(key.to_string(), raw.to_string());

        let parts: Vec<&str> = key.split('.').collect();
        let mut cur = &mut *table;
        for (i, p) in parts[..parts.len() - 1].iter().enumerate() {
            let entry = cur
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            cur = entry.as_table_mut().ok_or_else(|| {
                CliError::Validation(format!(
                    "override key `{key}` conflicts with the value at `{}`",
                    parts[..=i].join(".")
                ))
            })?;
        }
        cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    }
    Ok(())
}

/// Keys in `table` (override keys first) absent from the default config's
/// sections, one level deep plus the optimizer table.
fn unknown_keys(table: &toml::Table, overrides: &[String]) -> Vec<String> {
    let known = serde_json::to_value(RunConfig::default()).expect("default config serializes");
    let is_known = |path: &[&str]| -> bool {
        let mut cur = &known;
        for (i, p) in path.iter().enumerate() {
            match cur.get(*p) {
                Some(next) => cur = next,
                None => return false,
            }
            let nested = i == 0 || (path[0] == "simulate" && path[1] == "optimizer");
            if !nested || !cur.is_object() {
                return true;
            }
        }
        true
    };
    let mut out: Vec<String> = overrides
        .iter()
        .filter_map(|o| o.split_once('=').map(|(k, _)| k.trim().to_string()))
        .filter(|k| !is_known(&k.split('.').collect::<Vec<_>>()))
        .collect();
    fn walk(t: &toml::Table, prefix: &mut Vec<String>, out: &mut Vec<String>, is_known: &dyn Fn(&[&str]) -> bool) {
        for (k, v) in t {
            prefix.push(k.clone());
            let path: Vec<&str> = prefix.iter().map(String::as_str).collect();
            if !is_known(&path) {
                out.push(prefix.join("."));
            } else if let (Some(sub), true) = (v.as_table(), prefix.len() < 3) {
                walk(sub, prefix, out, is_known);
            }
            prefix.pop();
        }
    }
    walk(table, &mut Vec::new(), &mut out, &is_known);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_parses_typed_values() {
        let mut t = toml::Table::new();
        apply_overrides(
            &mut t,
            &["detect.gamma=0.25".into(), "simulate.planted_pillar_token=none".into(), "sweep.ks=[1,2]".into()],
        )
        .unwrap();
        assert_eq!(t["detect"]["gamma"].as_float(), Some(0.25));
        assert_eq!(t["simulate"]["planted_pillar_token"].as_str(), Some("none"));
        assert_eq!(t["sweep"]["ks"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn repeated_identical_override_is_fine() {
        let mut t = toml::Table::new();
        apply_overrides(&mut t, &["seed=3".into(), "seed=3".into()]).unwrap();
    }

    #[test]
    fn conflicting_override_names_key() {
        let mut t = toml::Table::new();
        let e = apply_overrides(&mut t, &["detect.w=3".into(), "detect.w=4".into()]).unwrap_err();
        assert!(e.to_string().contains("detect.w"));
        let e = apply_overrides(&mut toml::Table::new(), &["detect=1".into(), "detect.w=4".into()]).unwrap_err();
        assert!(e.to_string().contains("detect.w"));
    }

    #[test]
    fn unknown_override_is_named() {
        let e = resolve(None, &["detect.gama=0.3".into()]).unwrap_err();
        assert!(e.to_string().contains("detect.gama"), "{e}");
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn seeds_derive_from_top_level() {
        let a = resolve(None, &["seed=11".into()]).unwrap().config;
        assert_eq!(a.simulate.seed, 11);
        assert_eq!(a.detect.seed, derive_seed(11, "detect"));
        assert_ne!(a.sweep.seed, a.mask.seed);
        let b = resolve(None, &["seed=11".into(), "mask.seed=4".into()]).unwrap().config;
        assert_eq!(b.mask.seed, 4);
    }

    #[test]
    fn defaults_round_trip_through_json() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_value(serde_json::to_value(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
