//! Experiment configuration: one TOML file with `model`, `sim`, `predict`,
//! `analysis`, `io` and `rng` sections. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use slfv_core::model::{default_n_max, validate_assumptions};
use slfv_core::pde::{PdeConfig, ReactionScale};
use slfv_core::predict::KernelConfig;
use slfv_core::sim::{InitialState, SimConfig};
use slfv_core::{Boundary, GrowthSpec, ModelParams};

use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub u: f64,
    pub mu: f64,
    pub radius: usize,
    pub grid_len: usize,
    pub boundary: Boundary,
    pub dim: u32,
    /// Population ceiling; derived from the growth function when absent.
    pub n_max: Option<f64>,
    pub growth: GrowthSpec,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            u: 0.04,
            mu: 1e-4,
            radius: 4,
            grid_len: 101,
            boundary: Boundary::Clip,
            dim: 1,
            n_max: None,
            growth: GrowthSpec::valley(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitialKind {
    #[default]
    AllUniformPool,
    OneTypePerSite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    #[serde(alias = "T_end")]
    pub t_end: f64,
    pub initial_mass: f64,
    pub initial_state: InitialKind,
    /// Start every replicate from this snapshot instead.
    pub initial_snapshot: Option<PathBuf>,
    pub type_capacity: usize,
    pub strict_assumptions: bool,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            t_end: 125.0,
            initial_mass: 3.0,
            initial_state: InitialKind::AllUniformPool,
            initial_snapshot: None,
            type_capacity: slfv_core::field::DEFAULT_TYPE_CAPACITY,
            strict_assumptions: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictSection {
    pub t_max: usize,
    pub rate_scale: f64,
    /// Alignment constant `N`.
    pub alignment_n: f64,
    pub delta: f64,
    pub bc_value: f64,
    pub reaction_scale: ReactionScale,
    /// Explicit-Euler step; half the stability limit when absent.
    pub dt: Option<f64>,
    pub tol_steady: f64,
    pub max_steps: usize,
}

impl Default for PredictSection {
    fn default() -> Self {
        PredictSection {
            t_max: 28,
            rate_scale: 1.0,
            alignment_n: 2.8,
            delta: 1.0,
            bc_value: 8.0,
            reaction_scale: ReactionScale::WithoutUvr,
            dt: None,
            tol_steady: 1e-10,
            max_steps: 2_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub reference_sites: Vec<usize>,
    pub replicates: usize,
    /// Half-width of the window around each reference used for coverage.
    pub coverage_window: usize,
    pub qv_replicates: usize,
    pub qv_horizon: f64,
    pub convergence_deltas: Vec<f64>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            reference_sites: vec![45, 60, 75],
            replicates: 2000,
            coverage_window: 20,
            qv_replicates: 2000,
            qv_horizon: 1.0,
            convergence_deltas: vec![0.25, 0.125, 0.0625, 0.03125],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    pub out_dir: PathBuf,
    /// Write the final field of every replicate as a snapshot file.
    pub write_snapshots: bool,
}

impl Default for IoSection {
    fn default() -> Self {
        IoSection {
            out_dir: PathBuf::from("out"),
            write_snapshots: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RngSection {
    pub seed: u64,
}

impl Default for RngSection {
    fn default() -> Self {
        RngSection { seed: 20_240_101 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub sim: SimSection,
    pub predict: PredictSection,
    pub analysis: AnalysisSection,
    pub io: IoSection,
    pub rng: RngSection,
}

/// Parses a `key.path=value` override. The value is read as a TOML value and
/// falls back to a plain string.
fn parse_override(spec: &str) -> Result<(Vec<String>, toml::Value), HarnessError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| HarnessError::Validation(format!("override `{spec}` is not key=value")))?;
    // every key is lower case, so `sim.T_end` and `sim.t_end` name one field
    let path: Vec<String> = key.trim().split('.').map(str::to_lowercase).collect();
    if path.iter().any(String::is_empty) {
        return Err(HarnessError::Validation(format!("bad override key `{key}`")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
    Ok((path, value))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), HarnessError> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| HarnessError::Validation(format!("`{p}` is not a section")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML text and applies `key.path=value` overrides.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, HarnessError> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| HarnessError::Validation(format!("config: {e}")))?;
        for o in overrides {
            let (path, value) = parse_override(o)?;
            set_path(&mut table, &path, value)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| HarnessError::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file, or the built-in defaults when `path` is `None`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, HarnessError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| HarnessError::Validation(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form, in hex. The output directory is
    /// left out so that identical experiments written to different places
    /// carry the same hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.io.out_dir = IoSection::default().out_dir;
        hex_digest(c.to_toml().as_bytes())
    }

    pub fn n_max(&self) -> Result<f64, HarnessError> {
        match self.model.n_max {
            Some(v) => Ok(v),
            None => default_n_max(&self.model.growth, self.model.grid_len)
                .map_err(|e| HarnessError::Validation(e.to_string())),
        }
    }

    pub fn params(&self) -> Result<ModelParams, HarnessError> {
        let m = &self.model;
        Ok(ModelParams {
            u: m.u,
            mu: m.mu,
            radius: m.radius,
            n_max: self.n_max()?,
            grid_len: m.grid_len,
            boundary: m.boundary,
            dim: m.dim,
        })
    }

    /// Simulation settings for replicate `k` (the starting state is filled
    /// in by the caller when a snapshot is configured).
    pub fn sim_config(&self, k: usize) -> Result<SimConfig, HarnessError> {
        let mut c = SimConfig::new(self.params()?, self.model.growth.clone(), self.sim.t_end, self.rng.seed);
        c.stream = k as u64;
        c.initial_mass = self.sim.initial_mass;
        c.initial_state = match self.sim.initial_state {
            InitialKind::AllUniformPool => InitialState::AllUniformPool,
            InitialKind::OneTypePerSite => InitialState::OneTypePerSite,
        };
        c.type_capacity = self.sim.type_capacity;
        c.strict_assumptions = self.sim.strict_assumptions;
        Ok(c)
    }

    pub fn pde_config(&self) -> Result<PdeConfig, HarnessError> {
        let p = self.params()?;
        let mut c = PdeConfig::for_params(&p);
        if let Some(dt) = self.predict.dt {
            c.dt = dt;
        }
        c.bc_value = self.predict.bc_value;
        c.reaction_scale = self.predict.reaction_scale;
        c.tol_steady = self.predict.tol_steady;
        c.max_steps = self.predict.max_steps;
        Ok(c)
    }

    pub fn kernel_config(&self) -> KernelConfig {
        KernelConfig {
            mu: self.model.mu,
            t_max: self.predict.t_max,
            rate_scale: self.predict.rate_scale,
            boundary: self.model.boundary,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Validation(m));
        let p = self.params()?;
        if self.model.n_max.is_none() && p.n_max > 1e9 {
            return bad("growth function has no offspring maximum; set model.n_max explicitly".into());
        }
        p.check().map_err(|e| HarnessError::Validation(e.to_string()))?;
        self.model
            .growth
            .check_grid(p.grid_len)
            .map_err(|e| HarnessError::Validation(e.to_string()))?;
        if self.sim.strict_assumptions {
            let rep = validate_assumptions(&self.model.growth, &p)
                .map_err(|e| HarnessError::Validation(e.to_string()))?;
            if let Some(v) = rep.violation {
                return bad(format!(
                    "growth function fails {:?} at site {} mass {} (set sim.strict_assumptions=false to run anyway)",
                    v.kind, v.site, v.mass
                ));
            }
        }
        if !(self.sim.t_end >= 0.0 && self.sim.t_end.is_finite()) {
            return bad(format!("sim.t_end must be >= 0, got {}", self.sim.t_end));
        }
        if !(self.sim.initial_mass > 0.0 && self.sim.initial_mass <= p.n_max) {
            return bad(format!("sim.initial_mass must lie in (0, n_max = {}]", p.n_max));
        }
        if self.sim.initial_state == InitialKind::OneTypePerSite && self.sim.type_capacity < p.grid_len {
            return bad("sim.type_capacity must be at least grid_len for one_type_per_site".into());
        }
        if self.sim.type_capacity == 0 {
            return bad("sim.type_capacity must be positive".into());
        }
        if self.predict.t_max < 1 {
            return bad("predict.t_max must be >= 1".into());
        }
        if !(self.predict.alignment_n > 0.0 && self.predict.delta > 0.0) {
            return bad("predict.alignment_n and predict.delta must be positive".into());
        }
        if self.predict.delta != 1.0 {
            return bad("only predict.delta = 1 is supported (simulation and kernel grids coincide)".into());
        }
        if !(self.predict.rate_scale >= 0.0) {
            return bad("predict.rate_scale must be >= 0".into());
        }
        if !(self.predict.bc_value > 0.0) {
            return bad("predict.bc_value must be positive".into());
        }
        if let Some(dt) = self.predict.dt {
            if !(dt > 0.0) {
                return bad("predict.dt must be positive".into());
            }
        }
        if self.analysis.replicates < 1 {
            return bad("analysis.replicates must be >= 1".into());
        }
        if self.analysis.qv_replicates < 2 || !(self.analysis.qv_horizon > 0.0) {
            return bad("analysis.qv_replicates must be >= 2 and qv_horizon > 0".into());
        }
        if let Some(&r) = self.analysis.reference_sites.iter().find(|&&r| r >= p.grid_len) {
            return bad(format!("reference site {r} outside the grid of {} sites", p.grid_len));
        }
        if self.analysis.convergence_deltas.iter().any(|d| !(*d > 0.0 && *d <= 1.0)) {
            return bad("analysis.convergence_deltas must lie in (0, 1]".into());
        }
        Ok(())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_derive_n_max() {
        let c = ExperimentConfig::from_toml("", &[]).unwrap();
        assert!((c.n_max().unwrap() - 21.2625).abs() < 1e-9);
        assert_eq!(c.analysis.reference_sites, vec![45, 60, 75]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = ExperimentConfig::from_toml("[sim]\nt_ned = 3\n", &[]).unwrap_err();
        assert!(matches!(e, HarnessError::Validation(_)));
        assert!(ExperimentConfig::from_toml("[simulation]\n", &[]).is_err());
    }

    #[test]
    fn overrides_use_dotted_paths() {
        let c = ExperimentConfig::from_toml(
            "[sim]\nt_end = 3.0\n",
            &["sim.T_end=7".into(), "model.boundary=wrap".into(), "io.out_dir=/tmp/x".into()],
        )
        .unwrap();
        assert_eq!(c.sim.t_end, 7.0);
        assert_eq!(c.model.boundary, Boundary::Wrap);
        assert_eq!(c.io.out_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn growth_family_from_toml() {
        let c = ExperimentConfig::from_toml("[model.growth]\nfamily = \"logistic_const\"\nkappa = 8.0\n", &[]).unwrap();
        assert_eq!(c.model.growth, GrowthSpec::LogisticConst { kappa: 8.0 });
    }

    #[test]
    fn validation_failures() {
        for o in [
            "predict.t_max=0",
            "analysis.replicates=0",
            "analysis.reference_sites=[200]",
            "model.u=1.5",
            "sim.t_end=-1",
        ] {
            assert!(ExperimentConfig::from_toml("", &[o.into()]).is_err(), "{o}");
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.io.out_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.rng.seed += 1;
        assert_ne!(a.hash(), b.hash());
        let back = ExperimentConfig::from_toml(&a.to_toml(), &[]).unwrap();
        assert_eq!(back, a);
    }
}
