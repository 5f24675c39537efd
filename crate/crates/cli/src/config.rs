//! Declarative experiment configuration (TOML, units in key names).

use std::fmt;
use std::path::{Path, PathBuf};

use permeadiff::engine::{SimParams, StartRegion, TransitRule, WalkerCount};
use permeadiff::sequence::{load_protocol, preset_by_name, Protocol};
use permeadiff::substrate::SphereSpec;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Walker density of the model-comparison simulations, per µm³.
pub const REFERENCE_DENSITY: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub protocol: ProtocolSpec,
    #[serde(default)]
    pub simulation: SimulationSpec,
    pub biophysics: BiophysicsSpec,
    pub substrates: Vec<SubstrateSpec>,
    #[serde(default)]
    pub analysis: AnalysisSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub fit: FitSpec,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Either a named preset or a protocol file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSpec {
    pub preset: Option<String>,
    pub path: Option<PathBuf>,
}

/// Walker count used when neither a count nor a density is given.
pub const DEFAULT_WALKERS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSpec {
    pub dt_us: f64,
    pub walkers: Option<usize>,
    pub walker_density_per_um3: Option<f64>,
    pub transit_rule: TransitRuleName,
    pub start_region: StartRegionName,
    /// Extra propagator checkpoints; the protocol's Δ values are always added.
    pub checkpoints_ms: Vec<f64>,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        Self {
            dt_us: 5.0,
            walkers: None,
            walker_density_per_um3: None,
            transit_rule: TransitRuleName::FluxMatched,
            start_region: StartRegionName::Anywhere,
            checkpoints_ms: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitRuleName {
    FluxMatched,
    FirstOrder,
}

impl From<TransitRuleName> for TransitRule {
    fn from(r: TransitRuleName) -> Self {
        match r {
            TransitRuleName::FluxMatched => TransitRule::FluxMatched,
            TransitRuleName::FirstOrder => TransitRule::FirstOrder,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartRegionName {
    #[default]
    Anywhere,
    Intracellular,
    Extracellular,
}

impl From<StartRegionName> for StartRegion {
    fn from(r: StartRegionName) -> Self {
        match r {
            StartRegionName::Anywhere => StartRegion::Anywhere,
            StartRegionName::Intracellular => StartRegion::Intracellular,
            StartRegionName::Extracellular => StartRegion::Extracellular,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiophysicsSpec {
    pub kappa_um_per_s: Vec<f64>,
    pub d_e0_um2_per_ms: Vec<f64>,
    pub d_i0_um2_per_ms: f64,
}

/// A substrate to pack, or an existing substrate file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubstrateSpec {
    pub name: String,
    pub path: Option<PathBuf>,
    pub voxel_um: Option<f64>,
    pub icvf: Option<f64>,
    #[serde(default)]
    pub populations: Vec<PopulationSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSpec {
    pub mean_radius_um: f64,
    pub radius_std_um: f64,
    pub volume_share: f64,
}

impl From<&PopulationSpec> for SphereSpec {
    fn from(p: &PopulationSpec) -> Self {
        SphereSpec::new(p.mean_radius_um, p.radius_std_um, p.volume_share)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSpec {
    /// Walker bootstrap replicates for propagator standard errors.
    pub propagator_bootstrap: usize,
    pub nmse_replicates: usize,
    pub b_cut_ms_per_um2: f64,
    pub directions: usize,
    /// Lower time bound of the ADK_ex power-law fits.
    pub powerlaw_t_min_ms: f64,
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        Self {
            propagator_bootstrap: 20,
            nmse_replicates: 50,
            b_cut_ms_per_um2: permeadiff::analysis::DEFAULT_B_CUT,
            directions: 30,
            powerlaw_t_min_ms: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub snr: Vec<f64>,
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSpec {
    pub models: Vec<ModelName>,
    pub modes: Vec<ModeName>,
    pub n_starts: usize,
}

impl Default for FitSpec {
    fn default() -> Self {
        Self {
            models: vec![ModelName::Cexi, ModelName::Verdict, ModelName::Sandi],
            modes: vec![ModeName::AllDelta, ModeName::PerDelta],
            n_starts: permeadiff::fitting::DEFAULT_STARTS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelName {
    #[serde(rename = "CEXI")]
    Cexi,
    #[serde(rename = "VERDICT")]
    Verdict,
    #[serde(rename = "SANDI")]
    Sandi,
}

impl fmt::Display for ModelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelName::Cexi => "CEXI",
            ModelName::Verdict => "VERDICT",
            ModelName::Sandi => "SANDI",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModeName {
    #[serde(rename = "allDelta")]
    AllDelta,
    #[serde(rename = "perDelta")]
    PerDelta,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.out_dir);
        if let Some(p) = config.protocol.path.as_mut() {
            resolve(p);
        }
        for s in &mut config.substrates {
            if let Some(p) = s.path.as_mut() {
                resolve(p);
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.substrates.is_empty() {
            return bad("at least one substrate is required".into());
        }
        let mut names: Vec<&str> = self.substrates.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("substrate names must be unique".into());
        }
        for s in &self.substrates {
            if s.name.is_empty() || !s.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return bad(format!("substrate name {:?} must be alphanumeric", s.name));
            }
            match (&s.path, s.voxel_um, s.icvf) {
                (Some(p), None, None) if s.populations.is_empty() => {
                    if !p.exists() {
                        return bad(format!("substrate file {} not found", p.display()));
                    }
                }
                (None, Some(_), Some(_)) if !s.populations.is_empty() => {}
                _ => {
                    return bad(format!(
                        "substrate {} needs either `path` or `voxel_um`, `icvf` and `populations`",
                        s.name
                    ))
                }
            }
        }
        let b = &self.biophysics;
        if b.kappa_um_per_s.is_empty() || b.d_e0_um2_per_ms.is_empty() {
            return bad("kappa and D_e,0 lists must be non-empty".into());
        }
        if b.kappa_um_per_s.iter().any(|k| !(*k >= 0.0 && k.is_finite())) {
            return bad("kappa values must be finite and non-negative".into());
        }
        if b.d_e0_um2_per_ms.iter().chain([&b.d_i0_um2_per_ms]).any(|d| !(*d > 0.0 && d.is_finite())) {
            return bad("diffusivities must be positive".into());
        }
        let sim = &self.simulation;
        if !(sim.dt_us > 0.0 && sim.dt_us.is_finite()) {
            return bad(format!("dt_us = {}", sim.dt_us));
        }
        if sim.walkers.is_some() && sim.walker_density_per_um3.is_some() {
            return bad("set at most one of `walkers` and `walker_density_per_um3`".into());
        }
        if !self.walker_count_positive() {
            return bad("walker count and density must be positive".into());
        }
        if self.simulation.checkpoints_ms.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return bad("checkpoints must be positive times".into());
        }
        if self.noise.snr.iter().any(|s| !(*s > 0.0)) {
            return bad("SNR values must be positive".into());
        }
        if !self.noise.snr.is_empty() && self.noise.replicates == 0 {
            return bad("noise.replicates must be positive when SNR values are given".into());
        }
        if !self.fit.models.is_empty() && self.fit.modes.is_empty() {
            return bad("fit.modes must be non-empty when models are fitted".into());
        }
        self.load_protocol()?;
        Ok(())
    }

    pub fn load_protocol(&self) -> Result<Protocol, CliError> {
        match (&self.protocol.preset, &self.protocol.path) {
            (Some(name), None) => preset_by_name(name).map_err(|e| CliError::Config(e.to_string())),
            (None, Some(path)) => load_protocol(path).map_err(|e| CliError::Config(e.to_string())),
            _ => Err(CliError::Config("protocol needs exactly one of `preset` or `path`".into())),
        }
    }

    pub fn walker_count(&self) -> WalkerCount {
        match (self.simulation.walkers, self.simulation.walker_density_per_um3) {
            (Some(n), _) => WalkerCount::Count(n),
            (None, Some(rho)) => WalkerCount::Density(rho),
            (None, None) => WalkerCount::Count(DEFAULT_WALKERS),
        }
    }

    fn walker_count_positive(&self) -> bool {
        match self.walker_count() {
            WalkerCount::Count(n) => n > 0,
            WalkerCount::Density(rho) => rho > 0.0 && rho.is_finite(),
        }
    }

    pub fn sim_params(&self, duration_ms: f64, seed: u64) -> SimParams {
        let mut p = SimParams::covering(duration_ms, self.simulation.dt_us, self.walker_count(), seed);
        p.transit_rule = self.simulation.transit_rule.into();
        p.start_region = self.simulation.start_region.into();
        p
    }
}
