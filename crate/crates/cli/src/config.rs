//! Experiment configuration: a versioned TOML (or JSON) document.
//!
//! `resolve` fills every default and expands presets, so the resolved form
//! written next to the results re-runs the experiment bit-identically.

use std::path::Path;

use aoi_whittle::policies::{PolicyKind, TieBreak};
use aoi_whittle::sim::default_warmup;
use aoi_whittle::{CostFunction, UeConfig};
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_SEED: u64 = 20_240_601;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    IndexTable,
    OracleCheck,
    SimRun,
    Sweep,
    PresetFig2,
    PresetFig3,
    PresetFig4,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl OutputFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub kind: ExperimentKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<OutputFormat>,
    /// Primary results file name inside the output directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index_table: Option<IndexTableSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_check: Option<OracleCheckSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<PresetSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexTableSpec {
    pub lambda: f64,
    pub epsilon: f64,
    pub cost: CostFunction,
    pub a_max: u64,
    pub d_max: u64,
    /// Evaluate the index with `v(h + offset)`.
    #[serde(default)]
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleCheckSpec {
    pub lambda: f64,
    pub epsilon: f64,
    pub cost: CostFunction,
    pub a_max: u64,
    pub d_max: u64,
    /// Truncation caps of the value-iteration state space.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caps: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub absolute_floor: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    pub ues: Vec<UeConfig>,
    pub horizon: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replications: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub charge: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index_offset: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tie_break: Option<TieBreak>,
    /// Per-UE caps of the joint MDP behind the `optimal` policy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimal_caps: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clamp_to_table: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub lambdas: Vec<f64>,
    #[serde(default)]
    pub epsilons: Vec<f64>,
    pub policies: Vec<String>,
}

/// Overrides of the preset defaults; only valid without explicit `sim` and
/// `sweep` sections.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetSpec {
    pub horizon: Option<u64>,
    pub warmup: Option<u64>,
    pub replications: Option<u32>,
    pub lambdas: Option<Vec<f64>>,
    pub epsilons: Option<Vec<f64>>,
    pub policies: Option<Vec<String>>,
    /// fig2 preset only: per-UE generation probabilities.
    pub ue_lambdas: Option<Vec<f64>>,
    /// fig2 preset only: per-UE error probabilities.
    pub ue_epsilons: Option<Vec<f64>>,
    pub optimal_caps: Option<u64>,
    pub index_offset: Option<u64>,
}

pub const DEFAULT_HORIZON: u64 = 1_000_000;
pub const DEFAULT_REPLICATIONS: u32 = 20;
pub const DEFAULT_INDEX_OFFSET: u64 = 1;
pub const DEFAULT_OPTIMAL_CAPS: u64 = 12;
pub const FIG2_THRESHOLD: u64 = 6;
pub const FIG2_LAMBDA: f64 = 0.6;
pub const FIG2_EPSILON: f64 = 0.2;
pub const FIG34_UES: usize = 6;
pub const FIG34_EPSILONS: [f64; 2] = [0.2, 0.5];

pub fn fig34_lambdas() -> Vec<f64> {
    (1..=10).map(|k| k as f64 / 10.0).collect()
}

fn err<T>(field: impl Into<String>, message: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::new(field, message))
}

fn check_probability(field: &str, p: f64) -> Result<(), ConfigError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        err(field, format!("must lie in [0, 1], got {p}"))
    }
}

fn check_cost(field: &str, cost: &CostFunction) -> Result<(), ConfigError> {
    cost.check().or_else(|e| err(field, e.to_string()))
}

pub fn parse_policy(field: &str, name: &str) -> Result<PolicyKind, ConfigError> {
    name.parse::<PolicyKind>().or_else(|_| {
        err(
            field,
            format!(
                "unknown policy {name:?}; expected one of {}",
                PolicyKind::ALL.map(|k| k.as_str()).join(", ")
            ),
        )
    })
}

impl ExperimentConfig {
    /// Reads TOML, or JSON when the file ends in `.json`.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("--config", format!("cannot read {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| ConfigError::new("config", e.to_string()))
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::new("config", e.to_string().trim().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes to TOML")
    }

    pub fn format(&self) -> OutputFormat {
        self.format.unwrap_or_default()
    }

    pub fn output_name(&self) -> String {
        self.output
            .clone()
            .unwrap_or_else(|| format!("results.{}", self.format().extension()))
    }

    fn section<'a, T>(&self, value: &'a Option<T>, name: &str) -> Result<&'a T, ConfigError> {
        value
            .as_ref()
            .ok_or_else(|| ConfigError::new(name, format!("section required for kind {:?}", self.kind)))
    }

    /// Validates, fills defaults and expands presets.
    pub fn resolve(&self, seed_override: Option<u64>, format_override: Option<OutputFormat>) -> Result<Self, ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return err(
                "schema_version",
                format!("unsupported version {}; expected {SCHEMA_VERSION}", self.schema_version),
            );
        }
        if let Some(name) = &self.output {
            if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
                return err("output", "must be a plain file name");
            }
        }
        let mut out = ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            kind: self.kind,
            format: Some(format_override.or(self.format).unwrap_or_default()),
            output: self.output.clone(),
            seed: Some(seed_override.or(self.seed).unwrap_or(DEFAULT_SEED)),
            index_table: None,
            oracle_check: None,
            sim: None,
            sweep: None,
            preset: None,
        };
        out.output = Some(out.output_name());
        let stray = |present: bool, name: &str| -> Result<(), ConfigError> {
            if present {
                err(name, format!("section not used by kind {:?}", self.kind))
            } else {
                Ok(())
            }
        };
        match self.kind {
            ExperimentKind::IndexTable => {
                let spec = self.section(&self.index_table, "index_table")?;
                check_index_params("index_table", spec.lambda, spec.epsilon, &spec.cost)?;
                check_range("index_table", spec.a_max, spec.d_max)?;
                stray(self.sim.is_some() || self.sweep.is_some() || self.preset.is_some() || self.oracle_check.is_some(), "sim")?;
                out.index_table = Some(spec.clone());
            }
            ExperimentKind::OracleCheck => {
                let spec = self.section(&self.oracle_check, "oracle_check")?;
                check_index_params("oracle_check", spec.lambda, spec.epsilon, &spec.cost)?;
                check_range("oracle_check", spec.a_max, spec.d_max)?;
                let caps = spec.caps.unwrap_or(aoi_whittle::oracle::DEFAULT_CAP);
                if caps < 2 || caps < spec.a_max || caps < spec.d_max {
                    return err("oracle_check.caps", "must be at least 2 and cover a_max and d_max");
                }
                let tolerance = spec.tolerance.unwrap_or(aoi_whittle::oracle::DEFAULT_TOLERANCE);
                if !(tolerance > 0.0) {
                    return err("oracle_check.tolerance", "must be positive");
                }
                let rel = spec.relative_tolerance.unwrap_or(0.02);
                let floor = spec.absolute_floor.unwrap_or(0.01);
                if !(rel >= 0.0) || !(floor >= 0.0) {
                    return err("oracle_check.relative_tolerance", "tolerances must be non-negative");
                }
                stray(self.sim.is_some() || self.sweep.is_some() || self.preset.is_some() || self.index_table.is_some(), "sim")?;
                out.oracle_check = Some(OracleCheckSpec {
                    caps: Some(caps),
                    tolerance: Some(tolerance),
                    relative_tolerance: Some(rel),
                    absolute_floor: Some(floor),
                    ..spec.clone()
                });
            }
            ExperimentKind::SimRun => {
                let sim = self.section(&self.sim, "sim")?;
                stray(self.sweep.is_some() || self.preset.is_some(), "sweep")?;
                out.sim = Some(resolve_sim(sim, "sim")?);
            }
            ExperimentKind::Sweep => {
                let sim = self.section(&self.sim, "sim")?;
                let sweep = self.section(&self.sweep, "sweep")?;
                stray(self.preset.is_some(), "preset")?;
                out.sim = Some(resolve_sim(sim, "sim")?);
                out.sweep = Some(resolve_sweep(sweep)?);
            }
            ExperimentKind::PresetFig2 | ExperimentKind::PresetFig3 | ExperimentKind::PresetFig4 => {
                if self.sim.is_some() || self.sweep.is_some() {
                    if self.preset.is_some() {
                        return err("preset", "cannot be combined with explicit sim or sweep sections");
                    }
                    let sim = self.section(&self.sim, "sim")?;
                    out.sim = Some(resolve_sim(sim, "sim")?);
                    if self.kind != ExperimentKind::PresetFig2 {
                        out.sweep = Some(resolve_sweep(self.section(&self.sweep, "sweep")?)?);
                    } else {
                        out.sweep = self.sweep.as_ref().map(resolve_sweep).transpose()?;
                    }
                } else {
                    let preset = self.preset.clone().unwrap_or_default();
                    let (sim, sweep) = expand_preset(self.kind, &preset)?;
                    out.sim = Some(resolve_sim(&sim, "preset")?);
                    out.sweep = Some(resolve_sweep(&sweep)?);
                }
            }
        }
        Ok(out)
    }
}

fn check_index_params(section: &str, lambda: f64, eps: f64, cost: &CostFunction) -> Result<(), ConfigError> {
    check_probability(&format!("{section}.lambda"), lambda)?;
    check_probability(&format!("{section}.epsilon"), eps)?;
    check_cost(&format!("{section}.cost"), cost)?;
    aoi_whittle::cost::validate(cost, lambda, eps).or_else(|e| err(section, e.to_string()))
}

fn check_range(section: &str, a_max: u64, d_max: u64) -> Result<(), ConfigError> {
    if a_max == 0 {
        return err(format!("{section}.a_max"), "must be at least 1");
    }
    if a_max > 10_000 || d_max > 10_000 {
        return err(format!("{section}.a_max"), "a_max and d_max must not exceed 10000");
    }
    Ok(())
}

fn resolve_sim(sim: &SimSpec, section: &str) -> Result<SimSpec, ConfigError> {
    if sim.ues.is_empty() {
        return err(format!("{section}.ues"), "at least one UE is required");
    }
    for (n, ue) in sim.ues.iter().enumerate() {
        check_probability(&format!("{section}.ues[{n}].lambda"), ue.lambda)?;
        check_probability(&format!("{section}.ues[{n}].epsilon"), ue.eps)?;
        check_cost(&format!("{section}.ues[{n}].cost"), &ue.cost)?;
    }
    let warmup = sim.warmup.unwrap_or_else(|| default_warmup(sim.horizon));
    if sim.horizon <= warmup {
        return err(
            format!("{section}.horizon"),
            format!("must exceed warmup ({} <= {warmup})", sim.horizon),
        );
    }
    let replications = sim.replications.unwrap_or(DEFAULT_REPLICATIONS);
    if replications == 0 {
        return err(format!("{section}.replications"), "must be at least 1");
    }
    let policy = sim.policy.clone().unwrap_or_else(|| "whittle".into());
    parse_policy(&format!("{section}.policy"), &policy)?;
    let charge = sim.charge.unwrap_or(0.0);
    if !(charge >= 0.0) || !charge.is_finite() {
        return err(format!("{section}.charge"), "must be finite and non-negative");
    }
    let caps = sim.optimal_caps.unwrap_or(DEFAULT_OPTIMAL_CAPS);
    if caps < 2 {
        return err(format!("{section}.optimal_caps"), "must be at least 2");
    }
    Ok(SimSpec {
        ues: sim.ues.clone(),
        horizon: sim.horizon,
        warmup: Some(warmup),
        replications: Some(replications),
        policy: Some(policy),
        charge: Some(charge),
        index_offset: Some(sim.index_offset.unwrap_or(DEFAULT_INDEX_OFFSET)),
        tie_break: Some(sim.tie_break.unwrap_or_default()),
        optimal_caps: Some(caps),
        clamp_to_table: Some(sim.clamp_to_table.unwrap_or(true)),
    })
}

fn resolve_sweep(sweep: &SweepSpec) -> Result<SweepSpec, ConfigError> {
    for (k, &l) in sweep.lambdas.iter().enumerate() {
        check_probability(&format!("sweep.lambdas[{k}]"), l)?;
    }
    for (k, &e) in sweep.epsilons.iter().enumerate() {
        check_probability(&format!("sweep.epsilons[{k}]"), e)?;
    }
    if sweep.policies.is_empty() {
        return err("sweep.policies", "at least one policy is required");
    }
    for (k, p) in sweep.policies.iter().enumerate() {
        parse_policy(&format!("sweep.policies[{k}]"), p)?;
    }
    Ok(sweep.clone())
}

/// Preset defaults with `[preset]` overrides applied.
pub fn expand_preset(kind: ExperimentKind, preset: &PresetSpec) -> Result<(SimSpec, SweepSpec), ConfigError> {
    let horizon = preset.horizon.unwrap_or(DEFAULT_HORIZON);
    let policies_default: Vec<String>;
    let ues: Vec<UeConfig>;
    let mut lambdas = Vec::new();
    let mut epsilons = Vec::new();
    match kind {
        ExperimentKind::PresetFig2 => {
            if preset.lambdas.is_some() || preset.epsilons.is_some() {
                return err("preset.lambdas", "the fig2 preset takes ue_lambdas / ue_epsilons instead of a grid");
            }
            let ls = preset.ue_lambdas.clone().unwrap_or(vec![FIG2_LAMBDA; 2]);
            let es = preset.ue_epsilons.clone().unwrap_or(vec![FIG2_EPSILON; 2]);
            if ls.len() != 2 || es.len() != 2 {
                return err("preset.ue_lambdas", "the fig2 preset has exactly two UEs");
            }
            ues = ls
                .iter()
                .zip(&es)
                .map(|(&l, &e)| UeConfig::new(l, e, CostFunction::step(FIG2_THRESHOLD)))
                .collect();
            policies_default = ["whittle", "optimal", "age_greedy", "on_demand_whittle"]
                .map(String::from)
                .to_vec();
        }
        ExperimentKind::PresetFig3 | ExperimentKind::PresetFig4 => {
            if preset.ue_lambdas.is_some() || preset.ue_epsilons.is_some() {
                return err("preset.ue_lambdas", "only the fig2 preset takes per-UE parameters");
            }
            ues = (0..FIG34_UES)
                .map(|n| {
                    let threshold = if kind == ExperimentKind::PresetFig4 && n >= FIG34_UES / 2 {
                        15
                    } else {
                        10
                    };
                    UeConfig::new(0.5, FIG34_EPSILONS[0], CostFunction::step(threshold))
                })
                .collect();
            lambdas = preset.lambdas.clone().unwrap_or_else(fig34_lambdas);
            epsilons = preset.epsilons.clone().unwrap_or(FIG34_EPSILONS.to_vec());
            if lambdas.is_empty() || epsilons.is_empty() {
                return err("preset.lambdas", "grid must not be empty");
            }
            policies_default = ["whittle", "age_greedy", "on_demand_whittle"].map(String::from).to_vec();
        }
        _ => unreachable!("not a preset kind"),
    }
    let sim = SimSpec {
        ues,
        horizon,
        warmup: preset.warmup,
        replications: preset.replications,
        policy: Some("whittle".into()),
        charge: None,
        index_offset: preset.index_offset,
        tie_break: None,
        optimal_caps: preset.optimal_caps,
        clamp_to_table: None,
    };
    let sweep = SweepSpec {
        lambdas,
        epsilons,
        policies: preset.policies.clone().unwrap_or(policies_default),
    };
    Ok((sim, sweep))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SIM: &str = r#"
schema_version = 1
kind = "sim_run"

[sim]
horizon = 20000
policy = "age_greedy"

[[sim.ues]]
lambda = 0.5
epsilon = 0.2
cost = { kind = "step_violation", params = { threshold = 10 } }

[[sim.ues]]
lambda = 0.3
epsilon = 0.1
cost = { kind = "linear" }
"#;

    #[test]
    fn parses_and_fills_defaults() {
        let cfg = ExperimentConfig::from_toml(SIM).unwrap();
        let r = cfg.resolve(None, None).unwrap();
        let sim = r.sim.as_ref().unwrap();
        assert_eq!(sim.ues[0].cost, CostFunction::step(10));
        assert_eq!(sim.warmup, Some(1000));
        assert_eq!(sim.replications, Some(DEFAULT_REPLICATIONS));
        assert_eq!(r.seed, Some(DEFAULT_SEED));
        assert_eq!(r.output.as_deref(), Some("results.csv"));
        assert_eq!(r.resolve(None, None).unwrap(), r);
        let again = ExperimentConfig::from_toml(&r.to_toml()).unwrap();
        assert_eq!(again, r);
    }

    #[test]
    fn overrides_win() {
        let cfg = ExperimentConfig::from_toml(SIM).unwrap();
        let r = cfg.resolve(Some(5), Some(OutputFormat::Json)).unwrap();
        assert_eq!(r.seed, Some(5));
        assert_eq!(r.output.as_deref(), Some("results.json"));
    }

    #[test]
    fn errors_name_the_field() {
        let bad = SIM.replacen("lambda = 0.5", "lambda = 1.5", 1);
        let e = ExperimentConfig::from_toml(&bad).unwrap().resolve(None, None).unwrap_err();
        assert_eq!(e.field, "sim.ues[0].lambda");

        let bad = SIM.replace("age_greedy", "fifo");
        let e = ExperimentConfig::from_toml(&bad).unwrap().resolve(None, None).unwrap_err();
        assert_eq!(e.field, "sim.policy");

        let bad = SIM.replace("schema_version = 1", "schema_version = 7");
        let e = ExperimentConfig::from_toml(&bad).unwrap().resolve(None, None).unwrap_err();
        assert_eq!(e.field, "schema_version");

        let bad = SIM.replace("horizon = 20000", "horizon = 20000\nhorizn = 3");
        let e = ExperimentConfig::from_toml(&bad).unwrap_err();
        assert!(e.message.contains("horizn"), "{e}");

        let bad = SIM.replace("horizon = 20000", "horizon = 500");
        let e = ExperimentConfig::from_toml(&bad).unwrap().resolve(None, None).unwrap_err();
        assert_eq!(e.field, "sim.horizon");
    }

    #[test]
    fn presets_expand() {
        let cfg = ExperimentConfig::from_toml("schema_version = 1\nkind = \"preset_fig4\"").unwrap();
        let r = cfg.resolve(None, None).unwrap();
        let sim = r.sim.as_ref().unwrap();
        assert_eq!(sim.ues.len(), 6);
        assert_eq!(sim.ues[5].cost, CostFunction::step(15));
        assert_eq!(sim.ues[0].cost, CostFunction::step(10));
        let sweep = r.sweep.as_ref().unwrap();
        assert_eq!(sweep.lambdas.len(), 10);
        assert_eq!(sweep.epsilons, vec![0.2, 0.5]);
        assert_eq!(r.resolve(None, None).unwrap(), r);

        let cfg = ExperimentConfig::from_toml(
            "schema_version = 1\nkind = \"preset_fig2\"\n[preset]\nhorizon = 5000\nue_lambdas = [0.5, 0.7]",
        )
        .unwrap();
        let r = cfg.resolve(None, None).unwrap();
        let sim = r.sim.unwrap();
        assert_eq!(sim.horizon, 5000);
        assert_eq!(sim.ues[1].lambda, 0.7);
        assert_eq!(sim.ues[1].cost, CostFunction::step(6));
    }

    #[test]
    fn index_table_rejects_divergent_parameters() {
        let text = r#"
schema_version = 1
kind = "index_table"
[index_table]
lambda = 0.0
epsilon = 0.25
cost = { kind = "linear" }
a_max = 4
d_max = 4
"#;
        let e = ExperimentConfig::from_toml(text).unwrap().resolve(None, None).unwrap_err();
        assert_eq!(e.field, "index_table");
        let e = ExperimentConfig::from_toml(&text.replace("kind = \"index_table\"", "kind = \"sim_run\""))
            .unwrap()
            .resolve(None, None)
            .unwrap_err();
        assert_eq!(e.field, "sim");
    }
}
