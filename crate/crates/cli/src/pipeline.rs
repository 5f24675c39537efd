//! Stage orchestration: pack → simulate → analyze → fit → report.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use permeadiff::analysis::{
    adc_adk_from_signal, powerlaw_fit, propagator_cumulants, write_cumulants_csv, CompartmentFilter,
    CumulantEstimate, Source,
};
use permeadiff::engine::run_simulation;
use permeadiff::fitting::{
    build_dictionary, evaluate_mae, fit_dictionary, fit_nlls, Dictionary, FitBounds, FitMode, FitModel, FitPoint,
};
use permeadiff::rng::derive_seed;
use permeadiff::sequence::{uniform_directions, write_protocol, Protocol};
use permeadiff::signal::{
    bootstrap_nmse, powder_average, read_signals_csv, rician_replicate, synthesize, write_nmse_csv,
    write_powder_csv, write_signals_csv, PowderRow, Provenance, SignalRow,
};
use permeadiff::substrate::{load_substrate, pack_spheres, save_substrate, volume_weighted_radius, Substrate};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ModeName, ModelName, REFERENCE_DENSITY};
use crate::manifest::{hash_file, sha256_hex, ArtifactRecord, KeyBuilder, RunManifest, UnitRecord};
use crate::stats::spearman_test;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Pack,
    Simulate,
    Analyze,
    Fit,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pack => "pack",
            Stage::Simulate => "simulate",
            Stage::Analyze => "analyze",
            Stage::Fit => "fit",
            Stage::Report => "report",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
}

/// One (substrate, κ, D_e,0) simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub substrate: String,
    pub kappa: f64,
    pub d_e0: f64,
}

impl Condition {
    pub fn id(&self) -> String {
        format!("{}_k{}_de{}", self.substrate, self.kappa, self.d_e0)
    }

    pub fn dir(&self) -> PathBuf {
        Path::new("sims").join(self.id())
    }
}

/// Row of the fit results table. Optional estimates are empty cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRow {
    pub model: String,
    pub substrate: String,
    pub kappa: f64,
    pub d_e0: f64,
    /// `inf` for noiseless data.
    pub snr: String,
    pub replicate: usize,
    pub mode: String,
    #[serde(rename = "Delta_ms")]
    pub delta_ms: Option<f64>,
    #[serde(rename = "R_hat")]
    pub r_hat: Option<f64>,
    #[serde(rename = "ICVF_hat")]
    pub icvf_hat: Option<f64>,
    #[serde(rename = "De_hat")]
    pub de_hat: Option<f64>,
    #[serde(rename = "Di_hat")]
    pub di_hat: Option<f64>,
    pub tau_ex_hat: Option<f64>,
    pub kappa_hat: Option<f64>,
    pub residual: Option<f64>,
}

/// Row of the merged cumulant table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulantRow {
    pub substrate: String,
    pub kappa: f64,
    pub d_e0: f64,
    pub t_ms: f64,
    pub compartment: String,
    pub source: String,
    pub adc: f64,
    pub adk: f64,
    pub adc_se: f64,
    pub adk_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PropagatorRow {
    t_ms: f64,
    compartment: String,
    source: String,
    adc: f64,
    adk: f64,
    adc_se: f64,
    adk_se: f64,
}

/// Row of the merged NMSE table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmseTableRow {
    pub substrate: String,
    pub kappa: f64,
    pub d_e0: f64,
    pub delta_ms: f64,
    #[serde(rename = "Delta_ms")]
    pub delta_big_ms: f64,
    pub b: f64,
    pub nmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NmseRecord {
    delta_ms: f64,
    #[serde(rename = "Delta_ms")]
    delta_big_ms: f64,
    b: f64,
    nmse: f64,
}

/// Row of the merged occupancy table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyRow {
    pub substrate: String,
    pub kappa: f64,
    pub d_e0: f64,
    pub t_ms: f64,
    pub intra_fraction: f64,
    pub icvf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OccupancyRecord {
    t_ms: f64,
    intra_fraction: f64,
    icvf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PowderRecord {
    delta_ms: f64,
    #[serde(rename = "Delta_ms")]
    delta_big_ms: f64,
    b: f64,
    #[serde(rename = "S")]
    s: f64,
    #[serde(rename = "S_intra")]
    s_intra: f64,
    #[serde(rename = "S_extra")]
    s_extra: f64,
}

/// Power-law fit of the extracellular propagator kurtosis against ln(t)/t.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerLawRow {
    pub substrate: String,
    pub kappa: f64,
    pub d_e0: f64,
    pub t_min_ms: f64,
    pub n_points: usize,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeTableRow {
    pub model: String,
    pub mode: String,
    pub substrate: String,
    pub kappa: f64,
    pub snr: String,
    pub parameter: String,
    pub n: usize,
    pub mae: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub model: String,
    pub mode: String,
    pub substrate: String,
    pub d_e0: f64,
    pub snr: String,
    pub n: usize,
    pub spearman_rho: f64,
    pub p_positive: f64,
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, String> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    reader.deserialize().collect::<Result<Vec<T>, _>>().map_err(|e| format!("{}: {e}", path.display()))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<(), String> {
    let mut w = csv::Writer::from_writer(create(path)?);
    if rows.is_empty() {
        // serde only emits headers alongside the first record
        w.write_record(header).map_err(|e| e.to_string())?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| e.to_string())?;
    }
    w.flush().map_err(|e| e.to_string())
}

fn create(path: &Path) -> Result<BufWriter<File>, String> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| format!("{}: {e}", path.display()))
}

/// Seed for a named unit of work.
pub fn label_seed(seed: u64, label: &str) -> u64 {
    let digest = sha256_hex(label.as_bytes());
    derive_seed(seed, u64::from_str_radix(&digest[..16], 16).expect("hex digest"))
}

pub struct Pipeline {
    config: ExperimentConfig,
    out: PathBuf,
    protocol: Protocol,
    manifest: RunManifest,
    substrates: BTreeMap<String, Substrate>,
    pub summary: RunSummary,
    pub verbose: bool,
}

impl Pipeline {
    pub fn new(config: ExperimentConfig) -> Result<Self, CliError> {
        config.validate()?;
        let protocol = config.load_protocol()?;
        let out = config.out_dir.clone();
        std::fs::create_dir_all(&out).map_err(|e| CliError::Config(format!("{}: {e}", out.display())))?;
        let manifest = RunManifest::load_or_new(&out, config_hash(&config));
        Ok(Self {
            config,
            out,
            protocol,
            manifest,
            substrates: BTreeMap::new(),
            summary: RunSummary::default(),
            verbose: false,
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn conditions(&self) -> Vec<Condition> {
        let mut out = Vec::new();
        for s in &self.config.substrates {
            for &kappa in &self.config.biophysics.kappa_um_per_s {
                for &d_e0 in &self.config.biophysics.d_e0_um2_per_ms {
                    out.push(Condition { substrate: s.name.clone(), kappa, d_e0 });
                }
            }
        }
        out
    }

    /// Runs every stage up to and including `last`.
    pub fn run(&mut self, last: Stage) -> Result<RunSummary, CliError> {
        self.pack()?;
        if last >= Stage::Simulate {
            self.simulate()?;
        }
        if last >= Stage::Analyze {
            self.analyze()?;
        }
        if last >= Stage::Fit {
            self.fit()?;
        }
        if last >= Stage::Report {
            self.report()?;
        }
        Ok(self.summary.clone())
    }

    fn log(&self, msg: &str) {
        if self.verbose {
            eprintln!("{msg}");
        }
    }

    fn run_unit(
        &mut self,
        stage: Stage,
        unit: &str,
        key: String,
        work: impl FnOnce(&Path) -> Result<Vec<PathBuf>, String>,
    ) -> Result<(), CliError> {
        if self.manifest.is_current(&self.out, unit, &key) {
            self.summary.skipped.push(unit.to_string());
            self.log(&format!("[{}] {unit}: up to date", stage.name()));
            return Ok(());
        }
        let failure = |message: String| CliError::Stage { stage: stage.name().to_string(), message: format!("{unit}: {message}") };
        let start = Instant::now();
        let paths = work(&self.out).map_err(failure)?;
        let wall_clock_s = start.elapsed().as_secs_f64();
        let artifacts = paths
            .into_iter()
            .map(|path| {
                let sha256 = hash_file(&self.out.join(&path)).map_err(|e| failure(format!("{}: {e}", path.display())))?;
                Ok(ArtifactRecord { path, sha256 })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        self.manifest
            .units
            .insert(unit.to_string(), UnitRecord { stage: stage.name().to_string(), key, artifacts, wall_clock_s });
        self.manifest.save(&self.out).map_err(|e| failure(e.to_string()))?;
        self.summary.executed.push(unit.to_string());
        self.log(&format!("[{}] {unit}: done in {wall_clock_s:.1} s", stage.name()));
        Ok(())
    }

    fn hashes_of(&self, unit: &str) -> String {
        self.manifest.units.get(unit).map(|u| u.artifacts.iter().map(|a| a.sha256.as_str()).collect()).unwrap_or_default()
    }

    fn protocol_text(&self) -> String {
        let mut buf = Vec::new();
        write_protocol(&self.protocol, &mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("protocol text is UTF-8")
    }

    pub fn pack(&mut self) -> Result<(), CliError> {
        for spec in self.config.substrates.clone() {
            let unit = format!("pack/{}", spec.name);
            let rel = Path::new("substrates").join(format!("{}.sub", spec.name));
            let mut key = KeyBuilder::new(&unit);
            key.add_json(&spec.populations).add_json(&(spec.voxel_um, spec.icvf));
            if let Some(p) = &spec.path {
                key.add(&hash_file(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?);
            } else {
                key.add(&self.config.seed.to_string());
            }
            let seed = label_seed(self.config.seed, &unit);
            self.run_unit(Stage::Pack, &unit, key.finish(), |out| {
                let substrate = match &spec.path {
                    Some(p) => load_substrate(p).map_err(|e| e.to_string())?,
                    None => {
                        let populations: Vec<_> = spec.populations.iter().map(Into::into).collect();
                        let (voxel, icvf) = (spec.voxel_um.unwrap_or_default(), spec.icvf.unwrap_or_default());
                        pack_spheres(voxel, &populations, icvf, seed).map_err(|e| e.to_string())?
                    }
                };
                std::fs::create_dir_all(out.join("substrates")).map_err(|e| e.to_string())?;
                save_substrate(&substrate, out.join(&rel)).map_err(|e| e.to_string())?;
                Ok(vec![rel.clone()])
            })?;
            let substrate = load_substrate(self.out.join(&rel))
                .map_err(|e| CliError::Stage { stage: "pack".into(), message: e.to_string() })?;
            let n = self.config.walker_count().resolve(substrate.voxel_side);
            let density = n as f64 / substrate.voxel_side.powi(3);
            if density < REFERENCE_DENSITY {
                eprintln!(
                    "warning: {} walkers in substrate {} is {density:.3} per µm³, below the reference density of {REFERENCE_DENSITY}",
                    n, spec.name
                );
            }
            self.substrates.insert(spec.name.clone(), substrate);
        }
        Ok(())
    }

    /// Propagator checkpoints: configured times plus every Δ of the protocol.
    pub fn checkpoints(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.config.simulation.checkpoints_ms.iter().copied().chain(self.protocol.delta_bigs()).collect();
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    }

    pub fn simulate(&mut self) -> Result<(), CliError> {
        let checkpoints = self.checkpoints();
        let duration = checkpoints.iter().copied().fold(self.protocol.duration(), f64::max);
        let protocol_text = self.protocol_text();
        for cond in self.conditions() {
            let unit = format!("simulate/{}", cond.id());
            let mut key = KeyBuilder::new(&unit);
            key.add(&self.hashes_of(&format!("pack/{}", cond.substrate)))
                .add(&protocol_text)
                .add_json(&self.config.simulation)
                .add_json(&self.config.analysis)
                .add_json(&(cond.kappa, cond.d_e0, self.config.biophysics.d_i0_um2_per_ms, self.config.seed));
            let substrate = self.substrates[&cond.substrate].clone().with_biophysics(
                cond.kappa,
                self.config.biophysics.d_i0_um2_per_ms,
                cond.d_e0,
            );
            // Same walkers for every κ and D_e,0 of a substrate.
            let seed = label_seed(self.config.seed, &format!("sim/{}", cond.substrate));
            let params = self.config.sim_params(duration, seed);
            let protocol = self.protocol.clone();
            let analysis = self.config.analysis.clone();
            let checkpoints = checkpoints.clone();
            self.run_unit(Stage::Simulate, &unit, key.finish(), |out| {
                let dir = cond.dir();
                let sim = run_simulation(&substrate, &params, &protocol, &checkpoints).map_err(|e| e.to_string())?;
                if let Some(e) = sim.stats.geometry_error() {
                    return Err(e.to_string());
                }
                let mut set = synthesize(&sim.phases, &protocol).map_err(|e| e.to_string())?;
                set.provenance =
                    Provenance { substrate_id: cond.substrate.clone(), seed, n_walkers: sim.phases.n_walkers() };
                write_signals_csv(&set, create(&out.join(dir.join("signals.csv")))?).map_err(|e| e.to_string())?;
                write_powder_csv(&set, create(&out.join(dir.join("powder.csv")))?).map_err(|e| e.to_string())?;

                let dirs = uniform_directions(analysis.directions);
                let mut cumulants = Vec::new();
                for (i, &t) in checkpoints.iter().enumerate() {
                    for filter in CompartmentFilter::ALL {
                        let boot_seed = derive_seed(seed, (i * 3 + filter as usize) as u64);
                        // an empty compartment has no cumulants
                        if let Ok(c) = propagator_cumulants(
                            sim.displacements.at(i),
                            &sim.displacements.initial,
                            filter,
                            t,
                            &dirs,
                            analysis.propagator_bootstrap,
                            boot_seed,
                        ) {
                            cumulants.push(c);
                        }
                    }
                }
                write_cumulants_csv(&cumulants, create(&out.join(dir.join("propagator.csv")))?)
                    .map_err(|e| e.to_string())?;

                let icvf = substrate.icvf();
                let occupancy: Vec<OccupancyRecord> = checkpoints
                    .iter()
                    .enumerate()
                    .map(|(i, &t)| OccupancyRecord { t_ms: t, intra_fraction: sim.displacements.intra_fraction(i), icvf })
                    .collect();
                write_csv(&out.join(dir.join("occupancy.csv")), &occupancy, &["t_ms", "intra_fraction", "icvf"])?;

                let nmse = bootstrap_nmse(&sim.phases, &protocol, analysis.nmse_replicates, derive_seed(seed, u64::MAX))
                    .map_err(|e| e.to_string())?;
                write_nmse_csv(&nmse, create(&out.join(dir.join("nmse.csv")))?).map_err(|e| e.to_string())?;

                let s = &sim.stats;
                let mut w = create(&out.join(dir.join("stats.csv")))?;
                writeln!(w, "n_walkers,steps,membrane_hits,transits,exhausted,crossed_walkers").map_err(|e| e.to_string())?;
                writeln!(
                    w,
                    "{},{},{},{},{},{}",
                    sim.phases.n_walkers(),
                    s.steps,
                    s.membrane_hits,
                    s.transits,
                    s.exhausted,
                    s.crossed_walkers
                )
                .map_err(|e| e.to_string())?;
                w.flush().map_err(|e| e.to_string())?;
                Ok(["signals.csv", "powder.csv", "propagator.csv", "occupancy.csv", "nmse.csv", "stats.csv"]
                    .iter()
                    .map(|f| dir.join(f))
                    .collect())
            })?;
        }
        Ok(())
    }

    pub fn analyze(&mut self) -> Result<(), CliError> {
        let conditions = self.conditions();
        let mut key = KeyBuilder::new("analyze");
        key.add_json(&self.config.analysis);
        for c in &conditions {
            key.add(&self.hashes_of(&format!("simulate/{}", c.id())));
        }
        let analysis = self.config.analysis.clone();
        self.run_unit(Stage::Analyze, "analyze", key.finish(), |out| {
            let tables = out.join("tables");
            std::fs::create_dir_all(&tables).map_err(|e| e.to_string())?;
            let mut cumulants = Vec::new();
            let mut nmse = Vec::new();
            let mut occupancy = Vec::new();
            let mut powerlaw = Vec::new();
            for c in &conditions {
                let dir = out.join(c.dir());
                let tag = |t_ms, compartment: String, source: String, adc, adk, adc_se, adk_se| CumulantRow {
                    substrate: c.substrate.clone(),
                    kappa: c.kappa,
                    d_e0: c.d_e0,
                    t_ms,
                    compartment,
                    source,
                    adc,
                    adk,
                    adc_se,
                    adk_se,
                };
                let propagator: Vec<PropagatorRow> = read_csv(&dir.join("propagator.csv"))?;
                let (mut ts, mut ks) = (Vec::new(), Vec::new());
                for r in &propagator {
                    if r.compartment == CompartmentFilter::Extra.to_string() {
                        ts.push(r.t_ms);
                        ks.push(r.adk);
                    }
                }
                cumulants.extend(
                    propagator.into_iter().map(|r| tag(r.t_ms, r.compartment, r.source, r.adc, r.adk, r.adc_se, r.adk_se)),
                );
                for e in signal_cumulants(&read_csv(&dir.join("powder.csv"))?, analysis.b_cut_ms_per_um2) {
                    cumulants.push(tag(e.t, e.compartment.to_string(), e.source.to_string(), e.adc, e.adk, e.adc_se, e.adk_se));
                }
                if let Ok(fit) = powerlaw_fit(&ts, &ks, analysis.powerlaw_t_min_ms) {
                    powerlaw.push(PowerLawRow {
                        substrate: c.substrate.clone(),
                        kappa: c.kappa,
                        d_e0: c.d_e0,
                        t_min_ms: analysis.powerlaw_t_min_ms,
                        n_points: ts.iter().filter(|&&t| t > analysis.powerlaw_t_min_ms).count(),
                        slope: fit.slope,
                        intercept: fit.intercept,
                        r2: fit.r2,
                    });
                }
                for r in read_csv::<NmseRecord>(&dir.join("nmse.csv"))? {
                    nmse.push(NmseTableRow {
                        substrate: c.substrate.clone(),
                        kappa: c.kappa,
                        d_e0: c.d_e0,
                        delta_ms: r.delta_ms,
                        delta_big_ms: r.delta_big_ms,
                        b: r.b,
                        nmse: r.nmse,
                    });
                }
                for r in read_csv::<OccupancyRecord>(&dir.join("occupancy.csv"))? {
                    occupancy.push(OccupancyRow {
                        substrate: c.substrate.clone(),
                        kappa: c.kappa,
                        d_e0: c.d_e0,
                        t_ms: r.t_ms,
                        intra_fraction: r.intra_fraction,
                        icvf: r.icvf,
                    });
                }
            }
            let cond_cols = ["substrate", "kappa", "d_e0"];
            let with = |rest: &[&'static str]| cond_cols.iter().chain(rest).copied().collect::<Vec<&str>>();
            write_csv(
                &tables.join("cumulants.csv"),
                &cumulants,
                &with(&["t_ms", "compartment", "source", "adc", "adk", "adc_se", "adk_se"]),
            )?;
            write_csv(&tables.join("nmse.csv"), &nmse, &with(&["delta_ms", "Delta_ms", "b", "nmse"]))?;
            write_csv(&tables.join("occupancy.csv"), &occupancy, &with(&["t_ms", "intra_fraction", "icvf"]))?;
            write_csv(
                &tables.join("powerlaw.csv"),
                &powerlaw,
                &with(&["t_min_ms", "n_points", "slope", "intercept", "r2"]),
            )?;
            Ok(["cumulants.csv", "nmse.csv", "occupancy.csv", "powerlaw.csv"]
                .iter()
                .map(|f| Path::new("tables").join(f))
                .collect())
        })
    }

    pub fn fit(&mut self) -> Result<(), CliError> {
        if self.config.fit.models.is_empty() {
            self.log("[fit] no models configured");
            return Ok(());
        }
        let conditions = self.conditions();
        let protocol_text = self.protocol_text();
        for cond in &conditions {
            let unit = format!("fit/{}", cond.id());
            let mut key = KeyBuilder::new(&unit);
            key.add(&self.hashes_of(&format!("simulate/{}", cond.id())))
                .add(&protocol_text)
                .add_json(&self.config.fit)
                .add_json(&self.config.noise)
                .add(&self.config.seed.to_string());
            let job = FitJob {
                cond: cond.clone(),
                config: self.config.clone(),
                dictionary: build_dictionary(&self.protocol),
                seed: label_seed(self.config.seed, &unit),
            };
            self.run_unit(Stage::Fit, &unit, key.finish(), |out| {
                let rel = cond.dir().join("fits.csv");
                let signals = read_signals_csv(File::open(out.join(cond.dir().join("signals.csv"))).map_err(|e| e.to_string())?)
                    .map_err(|e| e.to_string())?;
                let rows = job.run(&signals);
                write_csv(&out.join(&rel), &rows, FIT_COLUMNS)?;
                Ok(vec![rel])
            })?;
        }

        let mut key = KeyBuilder::new("fit/summary");
        for c in &conditions {
            key.add(&self.hashes_of(&format!("fit/{}", c.id())));
            key.add(&self.hashes_of(&format!("simulate/{}", c.id())));
        }
        for s in &self.config.substrates {
            key.add(&self.hashes_of(&format!("pack/{}", s.name)));
        }
        let substrates = self.substrates.clone();
        let delta_max = self.protocol.delta_bigs().last().copied().unwrap_or(0.0);
        let kappas = self.config.biophysics.kappa_um_per_s.clone();
        self.run_unit(Stage::Fit, "fit/summary", key.finish(), |out| {
            let mut fits: Vec<FitRow> = Vec::new();
            for c in &conditions {
                fits.extend(read_csv::<FitRow>(&out.join(c.dir().join("fits.csv")))?);
            }
            let truth = ground_truth(out, &conditions, &substrates, &kappas, delta_max)?;
            let mae = mae_table(&fits, &truth).map_err(|e| e.to_string())?;
            std::fs::create_dir_all(out.join("tables")).map_err(|e| e.to_string())?;
            write_csv(&out.join("tables/fits.csv"), &fits, FIT_COLUMNS)?;
            write_csv(
                &out.join("tables/mae.csv"),
                &mae,
                &["model", "mode", "substrate", "kappa", "snr", "parameter", "n", "mae", "variance"],
            )?;
            Ok(vec![PathBuf::from("tables/fits.csv"), PathBuf::from("tables/mae.csv")])
        })
    }

    pub fn report(&mut self) -> Result<(), CliError> {
        let mut key = KeyBuilder::new("report");
        key.add(&self.hashes_of("fit/summary")).add(&self.hashes_of("analyze"));
        let has_fits = !self.config.fit.models.is_empty();
        self.run_unit(Stage::Report, "report", key.finish(), |out| {
            let fits: Vec<FitRow> = if has_fits { read_csv(&out.join("tables/fits.csv"))? } else { Vec::new() };
            let rows = sensitivity_table(&fits);
            std::fs::create_dir_all(out.join("tables")).map_err(|e| e.to_string())?;
            write_csv(
                &out.join("tables/sensitivity.csv"),
                &rows,
                &["model", "mode", "substrate", "d_e0", "snr", "n", "spearman_rho", "p_positive"],
            )?;
            Ok(vec![PathBuf::from("tables/sensitivity.csv")])
        })
    }
}

pub const FIT_COLUMNS: &[&str] = &[
    "model",
    "substrate",
    "kappa",
    "d_e0",
    "snr",
    "replicate",
    "mode",
    "Delta_ms",
    "R_hat",
    "ICVF_hat",
    "De_hat",
    "Di_hat",
    "tau_ex_hat",
    "kappa_hat",
    "residual",
];

fn config_hash(config: &ExperimentConfig) -> String {
    let mut c = config.clone();
    c.out_dir = PathBuf::new();
    sha256_hex(serde_json::to_string(&c).expect("config serialises").as_bytes())
}

/// Signal-derived ADC/ADK per Δ for the total and compartment signals.
fn signal_cumulants(powder: &[PowderRecord], b_cut: f64) -> Vec<CumulantEstimate> {
    let mut deltas: Vec<f64> = Vec::new();
    for r in powder {
        if !deltas.contains(&r.delta_big_ms) {
            deltas.push(r.delta_big_ms);
        }
    }
    let mut out = Vec::new();
    for d in deltas {
        let rows: Vec<&PowderRecord> = powder.iter().filter(|r| r.delta_big_ms == d).collect();
        let b: Vec<f64> = rows.iter().map(|r| r.b).collect();
        let parts: [(CompartmentFilter, Vec<f64>); 3] = [
            (CompartmentFilter::All, rows.iter().map(|r| r.s).collect()),
            (CompartmentFilter::Intra, rows.iter().map(|r| r.s_intra).collect()),
            (CompartmentFilter::Extra, rows.iter().map(|r| r.s_extra).collect()),
        ];
        for (compartment, s) in parts {
            if let Ok((adc, adk)) = adc_adk_from_signal(&b, &s, b_cut) {
                out.push(CumulantEstimate {
                    t: d,
                    adc,
                    adk,
                    adc_se: f64::NAN,
                    adk_se: f64::NAN,
                    source: Source::Signal,
                    compartment,
                });
            }
        }
    }
    out
}

struct FitJob {
    cond: Condition,
    config: ExperimentConfig,
    dictionary: Dictionary,
    seed: u64,
}

impl FitJob {
    fn run(&self, signals: &[SignalRow]) -> Vec<FitRow> {
        let mut rows = Vec::new();
        self.fit_dataset(&powder_average(signals), "inf".into(), 0, &mut rows);
        for (k, &snr) in self.config.noise.snr.iter().enumerate() {
            for rep in 0..self.config.noise.replicates {
                let noise_seed = derive_seed(self.seed, ((k as u64) << 32) | rep as u64);
                let clean: Vec<f64> = signals.iter().map(|r| r.s).collect();
                let noisy: Vec<SignalRow> = signals
                    .iter()
                    .zip(rician_replicate(&clean, snr, noise_seed))
                    .map(|(r, s)| SignalRow { s, ..r.clone() })
                    .collect();
                self.fit_dataset(&powder_average(&noisy), snr.to_string(), rep, &mut rows);
            }
        }
        rows
    }

    fn fit_dataset(&self, powder: &[PowderRow], snr: String, replicate: usize, rows: &mut Vec<FitRow>) {
        let points: Vec<FitPoint> = powder.iter().map(FitPoint::from).collect();
        let mut deltas: Vec<f64> = points.iter().map(|p| p.delta_big).collect();
        deltas.sort_by(f64::total_cmp);
        deltas.dedup();
        let mut modes = Vec::new();
        for m in &self.config.fit.modes {
            match m {
                ModeName::AllDelta => modes.push(FitMode::AllDelta),
                ModeName::PerDelta => modes.extend(deltas.iter().map(|&d| FitMode::PerDelta(d))),
            }
        }
        let fit_seed = derive_seed(self.seed, label_seed(replicate as u64, &snr));
        for &model in &self.config.fit.models {
            for &mode in &modes {
                let mut row = FitRow {
                    model: model.to_string(),
                    substrate: self.cond.substrate.clone(),
                    kappa: self.cond.kappa,
                    d_e0: self.cond.d_e0,
                    snr: snr.clone(),
                    replicate,
                    mode: match mode {
                        FitMode::AllDelta => "allDelta".into(),
                        FitMode::PerDelta(_) => "perDelta".into(),
                    },
                    delta_ms: match mode {
                        FitMode::AllDelta => None,
                        FitMode::PerDelta(d) => Some(d),
                    },
                    r_hat: None,
                    icvf_hat: None,
                    de_hat: None,
                    di_hat: None,
                    tau_ex_hat: None,
                    kappa_hat: None,
                    residual: None,
                };
                match model {
                    ModelName::Cexi | ModelName::Verdict => {
                        let m = if model == ModelName::Cexi { FitModel::Cexi } else { FitModel::Verdict };
                        let bounds = FitBounds::default();
                        if let Ok(fit) = fit_nlls(m, &points, &bounds, self.config.fit.n_starts, fit_seed, mode) {
                            let e = fit.estimates;
                            row.r_hat = Some(e.r);
                            row.icvf_hat = Some(e.f_i);
                            row.de_hat = Some(e.d_e);
                            row.di_hat = Some(e.d_i);
                            row.tau_ex_hat = e.tau_ex;
                            row.kappa_hat = e.kappa;
                            row.residual = Some(fit.residual_sse);
                        }
                    }
                    ModelName::Sandi => {
                        if let Some((dict, signal)) = dictionary_rows(&self.dictionary, powder, mode) {
                            if let Ok(fit) = fit_dictionary(&dict, &signal) {
                                row.r_hat = Some(fit.r_mean);
                                row.icvf_hat = Some(fit.icvf);
                                row.de_hat = Some(fit.d_e_mean);
                                row.di_hat = Some(fit.d_i_mean);
                                row.residual = Some(fit.residual);
                            }
                        }
                    }
                }
                rows.push(row);
            }
        }
    }
}

/// Dictionary restricted to the rows of `mode`, with the matching signal.
fn dictionary_rows(dict: &Dictionary, powder: &[PowderRow], mode: FitMode) -> Option<(Dictionary, Vec<f64>)> {
    let mut keep = Vec::new();
    let mut signal = Vec::new();
    for (i, &(ds, db, b)) in dict.points.iter().enumerate() {
        if let FitMode::PerDelta(d) = mode {
            if (db - d).abs() > 1e-9 {
                continue;
            }
        }
        let row = powder.iter().find(|r| r.delta_small == ds && r.delta_big == db && r.b == b)?;
        keep.push(i);
        signal.push(row.s);
    }
    let matrix = dict.matrix.select_rows(keep.iter());
    let points = keep.iter().map(|&i| dict.points[i]).collect();
    Some((Dictionary { points, atoms: dict.atoms.clone(), matrix }, signal))
}

/// Ground truth per condition: (R, ICVF, D_e, κ).
type Truth = BTreeMap<String, [f64; 4]>;

fn condition_key(substrate: &str, kappa: f64, d_e0: f64) -> String {
    format!("{substrate}|{kappa}|{d_e0}")
}

/// R and ICVF from the substrate; D_e is the extracellular propagator ADC at
/// the longest Δ of the impermeable run when one exists.
fn ground_truth(
    out: &Path,
    conditions: &[Condition],
    substrates: &BTreeMap<String, Substrate>,
    kappas: &[f64],
    delta_max: f64,
) -> Result<Truth, String> {
    let mut truth = Truth::new();
    for c in conditions {
        let s = &substrates[&c.substrate];
        let r = if s.spheres.is_empty() { 0.0 } else { volume_weighted_radius(&s.radii()).map_err(|e| e.to_string())? };
        let reference =
            if kappas.contains(&0.0) { Condition { kappa: 0.0, ..c.clone() } } else { c.clone() };
        let propagator: Vec<PropagatorRow> = read_csv(&out.join(reference.dir().join("propagator.csv")))?;
        let d_e = propagator
            .iter()
            .find(|r| r.compartment == "extra" && r.t_ms == delta_max)
            .map_or(f64::NAN, |r| r.adc);
        truth.insert(condition_key(&c.substrate, c.kappa, c.d_e0), [r, s.icvf(), d_e, c.kappa]);
    }
    Ok(truth)
}

const PARAMETERS: [&str; 4] = ["R", "ICVF", "De", "kappa"];

/// MAE per (model, mode, Δ, substrate, κ, SNR, parameter), pooled over D_e,0
/// and replicates. Failed fits are left out of `n`.
fn mae_table(fits: &[FitRow], truth: &Truth) -> Result<Vec<MaeTableRow>, permeadiff::fitting::FitError> {
    let mut estimates: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut truths: BTreeMap<String, f64> = BTreeMap::new();
    let mut labels: BTreeMap<String, MaeTableRow> = BTreeMap::new();
    for f in fits {
        let Some(t) = truth.get(&condition_key(&f.substrate, f.kappa, f.d_e0)) else { continue };
        let mode = match f.delta_ms {
            Some(d) => format!("{}:{d}", f.mode),
            None => f.mode.clone(),
        };
        let values = [f.r_hat, f.icvf_hat, f.de_hat, f.kappa_hat];
        for (p, (value, truth_value)) in PARAMETERS.iter().zip(values.iter().zip(t)) {
            let Some(v) = value else { continue };
            if !truth_value.is_finite() {
                continue;
            }
            // pooled over D_e,0, so the D_e truth differs inside a group: store the error
            let key = format!("{}|{}|{}|{:020.6}|{}|{}", f.model, mode, f.substrate, f.kappa, f.snr, p);
            estimates.entry(key.clone()).or_default().push(v - truth_value);
            truths.insert(key.clone(), 0.0);
            labels.entry(key).or_insert_with(|| MaeTableRow {
                model: f.model.clone(),
                mode: mode.clone(),
                substrate: f.substrate.clone(),
                kappa: f.kappa,
                snr: f.snr.clone(),
                parameter: p.to_string(),
                n: 0,
                mae: 0.0,
                variance: 0.0,
            });
        }
    }
    Ok(evaluate_mae(&estimates, &truths)?
        .into_iter()
        .map(|m| MaeTableRow { n: m.n, mae: m.mae, variance: m.variance, ..labels[&m.condition].clone() })
        .collect())
}

/// Spearman correlation between true and fitted κ per (mode, Δ, substrate,
/// D_e,0, SNR), over all κ and replicates.
pub fn sensitivity_table(fits: &[FitRow]) -> Vec<SensitivityRow> {
    let mut groups: BTreeMap<(String, String, String, String, String), (f64, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for f in fits {
        let Some(k) = f.kappa_hat else { continue };
        let mode = match f.delta_ms {
            Some(d) => format!("{}:{d}", f.mode),
            None => f.mode.clone(),
        };
        let entry = groups
            .entry((f.model.clone(), mode, f.substrate.clone(), format!("{:020.6}", f.d_e0), f.snr.clone()))
            .or_insert((f.d_e0, Vec::new(), Vec::new()));
        entry.1.push(f.kappa);
        entry.2.push(k);
    }
    groups
        .into_iter()
        .filter_map(|((model, mode, substrate, _, snr), (d_e0, x, y))| {
            let t = spearman_test(&x, &y)?;
            Some(SensitivityRow { model, mode, substrate, d_e0, snr, n: t.n, spearman_rho: t.rho, p_positive: t.p_positive })
        })
        .collect()
}
