//! Experiment configuration file.
//!
//! ```toml
//! feeder = "loop8"        # bundled name, or a feeder file path relative to this file
//! seed = 7                # master seed
//! parallelism = 1         # worker threads
//! output_dir = "out"      # optional, overridden by --out
//!
//! [scenario]
//! out_branches = [[3, 4], [2, 6]]
//! outage = { fixed = 21 } # or { geometric = 0.04 }
//! horizon = 60
//! noise_variance = 1e-6
//! injection_variance = 1.0  # or one value per bus
//! mean_shift = 0.0
//! record_currents = false
//! current_noise_variance = 0.0
//! der = []                # DER buses
//! sensors = [ { bus = 2, kind = "phasor", period = 1 } ]  # default: phasor on every non-slack bus
//!
//! [detector]
//! rho = 1e-4
//! alpha = 1e-6
//! mode = "known_f"        # or "adaptive"
//! fusion = "complete_frame"  # or "hold_last_value"
//! adaptive = { window = 50, cold_inflation = 4.0, shrinkage = 20.0, circular = true }
//!
//! [experiment]
//! alphas = [1e-2, 1e-4, 1e-6]
//! replications = 200
//! modes = ["known_f", "adaptive"]
//! max_delay = 1000
//! false_alarm_runs = 0    # no-change runs per mode; 0 skips the false-alarm table
//! false_alarm_alphas = [1e-2, 1e-3]
//!
//! [localize]
//! history_samples = 5000
//! post_samples = 500
//! pairs = "branches"      # or "all"
//! variance_floor_factor = 1.5
//! top_k = 5
//! candidate_cut = 0.1
//! bootstrap = { resamples = 200 }
//!
//! [pmu_sweep]
//! placements = [[2, 3, 4, 5, 6, 7, 8], [2, 4, 5, 8], [2, 8]]
//! replications = 200
//! ```
//!
//! Every table is optional and unknown keys are rejected. `experiment` and
//! `pmu-sweep` ignore `scenario.outage` and `scenario.horizon`: each
//! replication draws its change time from `detector.rho`.

use std::path::{Path, PathBuf};

use outage_core::detector::{AdaptiveConfig, DetectionRule, DetectorConfig, FusionPolicy, GeometricPrior, Mode};
use outage_core::grid::feeders;
use outage_core::grid::{BranchKey, BusId, GridTopology};
use outage_core::localizer::BootstrapConfig;
use outage_core::simgen::{OutageTiming, Scenario, SensorSchedule, SensorSpec};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub feeder: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub scenario: ScenarioSection,
    #[serde(default)]
    pub detector: DetectorSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub localize: LocalizeSection,
    #[serde(default)]
    pub pmu_sweep: PmuSweepSection,
    /// Directory that relative feeder paths resolve against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

fn default_parallelism() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InjectionVariance {
    Uniform(f64),
    PerBus(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    pub out_branches: Vec<[usize; 2]>,
    pub outage: OutageTiming,
    pub horizon: u64,
    pub noise_variance: f64,
    pub injection_variance: InjectionVariance,
    pub mean_shift: f64,
    pub record_currents: bool,
    pub current_noise_variance: f64,
    pub der: Vec<usize>,
    pub sensors: Option<Vec<SensorSpec>>,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        ScenarioSection {
            out_branches: Vec::new(),
            outage: OutageTiming::Fixed(21),
            horizon: 60,
            noise_variance: 1e-6,
            injection_variance: InjectionVariance::Uniform(1.0),
            mean_shift: 0.0,
            record_currents: false,
            current_noise_variance: 0.0,
            der: Vec::new(),
            sensors: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSection {
    pub rho: f64,
    pub alpha: f64,
    pub mode: Mode,
    pub fusion: FusionPolicy,
    pub adaptive: AdaptiveConfig,
}

impl Default for DetectorSection {
    fn default() -> Self {
        DetectorSection {
            rho: 1e-4,
            alpha: 1e-6,
            mode: Mode::KnownF,
            fusion: FusionPolicy::CompleteFrame,
            adaptive: AdaptiveConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub alphas: Vec<f64>,
    pub replications: usize,
    pub modes: Vec<Mode>,
    /// Ticks after the change before a run counts as missed.
    pub max_delay: u64,
    pub false_alarm_runs: usize,
    pub false_alarm_alphas: Vec<f64>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            alphas: (1..=6).map(|k| 10f64.powi(-2 * k)).collect(),
            replications: 200,
            modes: vec![Mode::KnownF],
            max_delay: 1000,
            false_alarm_runs: 0,
            false_alarm_alphas: vec![1e-2, 1e-3],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairUniverse {
    Branches,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalizeSection {
    pub history_samples: usize,
    pub post_samples: usize,
    pub pairs: PairUniverse,
    /// Noise-only floor as a multiple of the noise variance.
    pub variance_floor_factor: f64,
    pub top_k: usize,
    pub candidate_cut: f64,
    pub bootstrap: BootstrapConfig,
}

impl Default for LocalizeSection {
    fn default() -> Self {
        LocalizeSection {
            history_samples: 5000,
            post_samples: 500,
            pairs: PairUniverse::Branches,
            variance_floor_factor: 1.5,
            top_k: 5,
            candidate_cut: 0.1,
            bootstrap: BootstrapConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PmuSweepSection {
    /// Observed bus sets, largest first. Empty means the nested chain
    /// obtained by dropping one random non-slack bus at a time.
    pub placements: Vec<Vec<usize>>,
    pub replications: usize,
    pub max_delay: u64,
}

impl Default for PmuSweepSection {
    fn default() -> Self {
        PmuSweepSection {
            placements: Vec::new(),
            replications: 200,
            max_delay: 1000,
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1".into());
        }
        let e = &self.experiment;
        if e.replications == 0 {
            return bad("replications must be at least 1".into());
        }
        if let Some(a) = e.alphas.iter().chain(&e.false_alarm_alphas).find(|a| !(**a > 0.0 && **a < 1.0)) {
            return bad(format!("alpha {a} outside (0, 1)"));
        }
        if e.alphas.is_empty() {
            return bad("alpha grid is empty".into());
        }
        if self.pmu_sweep.replications == 0 {
            return bad("pmu_sweep.replications must be at least 1".into());
        }
        if self.pmu_sweep.placements.iter().any(Vec::is_empty) {
            return bad("a placement observes no bus".into());
        }
        Ok(())
    }

    pub fn topology(&self) -> Result<GridTopology> {
        let base = match feeders::bundled(&self.feeder) {
            Some(t) => t,
            None => {
                let path = match &self.base_dir {
                    Some(dir) => dir.join(&self.feeder),
                    None => PathBuf::from(&self.feeder),
                };
                feeders::load_feeder(&path)?
            }
        };
        if self.scenario.der.is_empty() {
            Ok(base)
        } else {
            let der = base.der().iter().copied().chain(self.scenario.der.iter().map(|b| BusId(*b)));
            Ok(base.with_der(der.collect::<Vec<_>>())?)
        }
    }

    pub fn out_branches(&self) -> Vec<BranchKey> {
        self.scenario
            .out_branches
            .iter()
            .map(|[a, b]| BranchKey::from_pair(*a, *b))
            .collect()
    }

    pub fn injection_variance(&self, bus_count: usize) -> Result<Vec<f64>> {
        match &self.scenario.injection_variance {
            InjectionVariance::Uniform(v) => Ok(vec![*v; bus_count]),
            InjectionVariance::PerBus(v) if v.len() == bus_count => Ok(v.clone()),
            InjectionVariance::PerBus(v) => Err(CliError::Config(format!(
                "injection_variance lists {} buses, feeder has {bus_count}",
                v.len()
            ))),
        }
    }

    pub fn schedule(&self, topo: &GridTopology) -> Result<SensorSchedule> {
        match &self.scenario.sensors {
            None => Ok(SensorSchedule::full_phasor(topo)),
            Some(s) => Ok(SensorSchedule::new(s.clone())?),
        }
    }

    /// The configured scenario with the given seed.
    pub fn scenario(&self, seed: u64) -> Result<Scenario> {
        let topology = self.topology()?;
        let m = topology.bus_count();
        let schedule = self.schedule(&topology)?;
        Ok(Scenario {
            out_branches: self.out_branches(),
            outage: self.scenario.outage,
            injection_variance: self.injection_variance(m)?,
            noise_variance: self.scenario.noise_variance,
            schedule,
            horizon: self.scenario.horizon,
            seed,
            mean_shift: self.scenario.mean_shift,
            record_currents: self.scenario.record_currents,
            current_noise_variance: self.scenario.current_noise_variance,
            topology,
        })
    }

    pub fn detector_config(&self, alpha: f64, mode: Mode) -> Result<DetectorConfig> {
        Ok(DetectorConfig {
            rule: DetectionRule::new(alpha)?,
            prior: GeometricPrior::new(self.detector.rho)?,
            mode,
            adaptive: self.detector.adaptive,
            fusion: self.detector.fusion,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = Config::parse("feeder = \"loop8\"\n").unwrap();
        assert_eq!(c.parallelism, 1);
        assert_eq!(c.experiment.alphas.len(), 6);
        let s = c.scenario(3).unwrap();
        assert_eq!(s.topology.bus_count(), 8);
        assert_eq!(s.schedule.layout().dim(), 14);
    }

    #[test]
    fn full_config_round_trips() {
        let text = r#"
feeder = "loop8"
seed = 9
[scenario]
out_branches = [[3, 4], [2, 6]]
outage = { geometric = 0.04 }
injection_variance = [1, 1, 1, 1, 2, 1, 1, 1]
sensors = [ { bus = 2, kind = "phasor" }, { bus = 5, kind = "magnitude", period = 15 } ]
[detector]
mode = "adaptive"
adaptive = { window = 30 }
[experiment]
modes = ["known_f", "adaptive"]
"#;
        let c = Config::parse(text).unwrap();
        assert_eq!(c.scenario.outage, OutageTiming::Geometric(0.04));
        assert_eq!(c.detector.adaptive.window, 30);
        assert_eq!(c.detector.adaptive.shrinkage, 20.0);
        let s = c.scenario(1).unwrap();
        assert_eq!(s.schedule.layout().dim(), 3);
        let again = Config::parse(&toml::to_string(&c).unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_alphas() {
        assert!(Config::parse("feeder = \"loop8\"\nbogus = 1\n").is_err());
        assert!(Config::parse("feeder = \"loop8\"\n[detector]\nrhoo = 0.1\n").is_err());
        assert!(Config::parse("feeder = \"loop8\"\n[experiment]\nalphas = [1.5]\n").is_err());
        assert!(Config::parse("feeder = \"loop8\"\n[experiment]\nreplications = 0\n").is_err());
    }
}
