//! Monte Carlo experiments: delay curves, false-alarm rates and the sensor
//! coverage sweep.

use outage_core::detector::{expected_delay_bound, DetectionRule, DetectorState, FusionPolicy, GeometricPrior, Mode};
use outage_core::gaussmodel::{kl_divergence, model_from_grid, reduced_model, CoordLayout, GaussianModel};
use outage_core::grid::BusId;
use outage_core::rng::{substream, StreamKind};
use outage_core::simgen::{replication_seed, OutageTiming, Scenario, SensorSchedule, StreamGenerator};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{CliError, Result};

/// Pre- and post-outage models over one layout.
#[derive(Clone, Debug)]
pub struct Models {
    pub layout: CoordLayout,
    pub g: GaussianModel,
    pub f: GaussianModel,
    /// `KL(f ‖ g)`.
    pub kl: f64,
}

impl Models {
    fn build(g: GaussianModel, f: GaussianModel, layout: CoordLayout, shift: f64) -> Result<Self> {
        let f = if shift != 0.0 {
            GaussianModel::new(f.mean().add_scalar(shift), f.cov().clone())?
        } else {
            f
        };
        let kl = kl_divergence(&f, &g)?;
        Ok(Models { layout, g, f, kl })
    }
}

/// Exact models over the scenario's sensor layout.
pub fn exact_models(scenario: &Scenario) -> Result<Models> {
    let layout = scenario.schedule.layout();
    let post = scenario.topology.apply_outage(&scenario.out_branches)?;
    let g = model_from_grid(&scenario.topology, &layout, &scenario.injection_variance, scenario.noise_variance)?;
    let f = model_from_grid(&post, &layout, &scenario.injection_variance, scenario.noise_variance)?;
    Models::build(g, f, layout, scenario.mean_shift)
}

/// Models over phasor channels at `observed`, through the Kron-reduced
/// network.
pub fn observed_models(scenario: &Scenario, observed: &[BusId]) -> Result<Models> {
    let buses: Vec<BusId> = observed.iter().copied().filter(|b| !scenario.topology.is_slack(*b)).collect();
    if buses.is_empty() {
        return Err(CliError::Invalid("placement observes no non-slack bus".into()));
    }
    let layout = CoordLayout::phasor(buses.clone())?;
    if buses == scenario.topology.non_slack_buses() {
        // nothing to eliminate
        let mut s = scenario.clone();
        s.schedule = SensorSchedule::full_phasor(&s.topology);
        return exact_models(&s);
    }
    let post = scenario.topology.apply_outage(&scenario.out_branches)?;
    let g = reduced_model(&scenario.topology, &layout, &scenario.injection_variance, scenario.noise_variance)?;
    let f = reduced_model(&post, &layout, &scenario.injection_variance, scenario.noise_variance)?;
    Models::build(g, f, layout, scenario.mean_shift)
}

/// Detector settings shared by every replication.
#[derive(Clone, Copy, Debug)]
pub struct RunSettings<'a> {
    pub prior: GeometricPrior,
    pub mode: Mode,
    pub fusion: FusionPolicy,
    pub adaptive: outage_core::detector::AdaptiveConfig,
    /// Alarm thresholds on the log-odds, one per α.
    pub thresholds: &'a [f64],
}

/// Steps one detector through ticks `1..=stop` of `gen` and returns, per
/// threshold, the first tick whose log-odds reach it. Coordinates are
/// restricted to `projection` when given. Stops early once every threshold
/// has been crossed.
pub fn first_crossings(
    gen: &StreamGenerator,
    projection: Option<&[usize]>,
    models: &Models,
    settings: &RunSettings<'_>,
    stop: u64,
) -> Result<Vec<Option<u64>>> {
    let full_dim = gen.layout().dim();
    let idx: Vec<usize> = match projection {
        Some(p) => p.to_vec(),
        None => (0..full_dim).collect(),
    };
    let d = idx.len();
    if d != models.g.dim() {
        return Err(CliError::Invalid(format!(
            "models have {} coordinates, stream has {d}",
            models.g.dim()
        )));
    }
    let mut state = match settings.mode {
        Mode::KnownF => DetectorState::known_f(settings.prior),
        Mode::Adaptive => DetectorState::adaptive(settings.prior, settings.adaptive, Some(&models.layout)),
    };
    let mut crossed: Vec<Option<u64>> = vec![None; settings.thresholds.len()];
    let mut remaining = crossed.len();
    let mut held = vec![f64::NAN; d];
    let mut seen = vec![false; d];
    for tick in 1..=stop {
        if remaining == 0 {
            break;
        }
        let fresh_full = gen.fresh_mask(tick);
        let fresh: Vec<bool> = idx.iter().map(|k| fresh_full[*k]).collect();
        if !fresh.iter().any(|f| *f) {
            continue;
        }
        let x = gen.sample(tick);
        for (k, &src) in idx.iter().enumerate() {
            if fresh[k] {
                held[k] = x[src];
                seen[k] = true;
            }
        }
        let usable = match settings.fusion {
            FusionPolicy::CompleteFrame => fresh.iter().all(|f| *f),
            FusionPolicy::HoldLastValue => seen.iter().all(|s| *s),
        };
        if !usable {
            continue;
        }
        match settings.mode {
            Mode::KnownF => state.posterior_update(&held, &models.g, &models.f)?,
            Mode::Adaptive => state.adaptive_step(&held, &models.g)?,
        }
        let lo = state.log_odds();
        for (c, thr) in crossed.iter_mut().zip(settings.thresholds) {
            if c.is_none() && lo >= *thr {
                *c = Some(tick);
                remaining -= 1;
            }
        }
    }
    Ok(crossed)
}

/// Runs `f` for every index on a pool of `threads` workers and returns the
/// results in index order; the first failing index wins.
pub fn parallel_map<T, F>(count: usize, threads: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| CliError::Invalid(e.to_string()))?;
    let results: Vec<Result<T>> = pool.install(|| (0..count).into_par_iter().map(&f).collect());
    results.into_iter().collect()
}

fn replication_error(index: usize, seed: u64) -> impl Fn(CliError) -> CliError {
    move |e| match e {
        CliError::Core(source) => CliError::Replication { index, seed, source },
        other => other,
    }
}

/// Outcome of one replication: change tick and first alarm tick per α.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub lambda: u64,
    pub tau: Vec<Option<u64>>,
}

fn scenario_for(config: &Config, seed: u64) -> Result<Scenario> {
    let mut s = config.scenario(seed)?;
    s.outage = OutageTiming::Geometric(config.detector.rho);
    s.horizon = u64::MAX;
    Ok(s)
}

fn log_thresholds(alphas: &[f64]) -> Result<Vec<f64>> {
    alphas
        .iter()
        .map(|a| Ok(DetectionRule::new(*a)?.log_odds_threshold()))
        .collect()
}

/// Replications with a geometric change time; each runs until every α has
/// alarmed or `max_delay` ticks after the change (or only up to the change
/// when `stop_before_change`).
pub fn replicate(
    config: &Config,
    mode: Mode,
    alphas: &[f64],
    replications: usize,
    max_delay: u64,
    stop_before_change: bool,
) -> Result<(Models, Vec<Outcome>)> {
    let models = exact_models(&config.scenario(config.seed)?)?;
    let thresholds = log_thresholds(alphas)?;
    let settings = RunSettings {
        prior: GeometricPrior::new(config.detector.rho)?,
        mode,
        fusion: config.detector.fusion,
        adaptive: config.detector.adaptive,
        thresholds: &thresholds,
    };
    let outcomes = parallel_map(replications, config.parallelism, |i| {
        let seed = replication_seed(config.seed, i as u64);
        let run = || -> Result<Outcome> {
            let gen = StreamGenerator::new(&scenario_for(config, seed)?)?;
            let lambda = gen.lambda();
            let stop = if stop_before_change {
                lambda - 1
            } else {
                lambda.saturating_add(max_delay)
            };
            let tau = first_crossings(&gen, None, &models, &settings, stop)?;
            Ok(Outcome { lambda, tau })
        };
        run().map_err(replication_error(i, seed))
    })?;
    Ok((models, outcomes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub alpha: f64,
    pub mode: Mode,
    /// Mean of `τ − λ` over runs that alarmed at or after the change.
    pub avg_delay: f64,
    pub delay_over_logalpha: f64,
    pub empirical_false_alarm: f64,
    /// Asymptotic delay bound.
    pub bound: f64,
    pub bound_over_logalpha: f64,
    pub replications: usize,
    pub detected: usize,
    pub false_alarms: usize,
    pub missed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub kl: f64,
    pub rows: Vec<MetricsRow>,
}

fn summarize(alpha: f64, k: usize, mode: Mode, outcomes: &[Outcome], prior: &GeometricPrior, kl: f64) -> Result<MetricsRow> {
    let mut delay_sum: u64 = 0;
    let (mut detected, mut false_alarms, mut missed) = (0, 0, 0);
    for o in outcomes {
        match o.tau[k] {
            Some(t) if t < o.lambda => false_alarms += 1,
            Some(t) => {
                detected += 1;
                delay_sum += t - o.lambda;
            }
            None => missed += 1,
        }
    }
    let avg_delay = if detected > 0 {
        delay_sum as f64 / detected as f64
    } else {
        f64::NAN
    };
    let log_alpha = alpha.ln().abs();
    let bound = expected_delay_bound(alpha, prior, kl)?;
    Ok(MetricsRow {
        alpha,
        mode,
        avg_delay,
        delay_over_logalpha: avg_delay / log_alpha,
        empirical_false_alarm: false_alarms as f64 / outcomes.len() as f64,
        bound,
        bound_over_logalpha: bound / log_alpha,
        replications: outcomes.len(),
        detected,
        false_alarms,
        missed,
    })
}

/// Delay curve over the configured α grid for every configured mode. All α
/// are evaluated on the same replications.
pub fn run_experiment(config: &Config) -> Result<MetricsTable> {
    let e = &config.experiment;
    let prior = GeometricPrior::new(config.detector.rho)?;
    let mut rows = Vec::new();
    let mut kl = 0.0;
    for mode in &e.modes {
        let (models, outcomes) = replicate(config, *mode, &e.alphas, e.replications, e.max_delay, false)?;
        kl = models.kl;
        for (k, alpha) in e.alphas.iter().enumerate() {
            rows.push(summarize(*alpha, k, *mode, &outcomes, &prior, models.kl)?);
        }
    }
    Ok(MetricsTable { kl, rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FalseAlarmRow {
    pub alpha: f64,
    pub mode: Mode,
    pub runs: usize,
    pub false_alarms: usize,
    pub rate: f64,
}

/// No-change runs: each stream holds only the pre-outage ticks `1..λ`.
pub fn run_false_alarm(config: &Config, runs: usize) -> Result<Vec<FalseAlarmRow>> {
    let e = &config.experiment;
    let mut rows = Vec::new();
    for mode in &e.modes {
        let (_, outcomes) = replicate(config, *mode, &e.false_alarm_alphas, runs, 0, true)?;
        for (k, alpha) in e.false_alarm_alphas.iter().enumerate() {
            let false_alarms = outcomes.iter().filter(|o| o.tau[k].is_some()).count();
            rows.push(FalseAlarmRow {
                alpha: *alpha,
                mode: *mode,
                runs,
                false_alarms,
                rate: false_alarms as f64 / runs as f64,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Observed buses, space separated.
    pub observed: String,
    pub count: usize,
    pub kl: f64,
    pub avg_delay: f64,
    pub detected: usize,
    pub false_alarms: usize,
    pub missed: usize,
    /// Share of seeds whose alarm is no earlier than at the previous, larger
    /// placement; 1 for the first row.
    pub share_not_earlier: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// `tau[level][replication]`.
    pub tau: Vec<Vec<Option<u64>>>,
    pub lambda: Vec<u64>,
}

impl SweepResult {
    /// Every smaller placement alarms no earlier than the previous one in a
    /// majority of seeds.
    pub fn majority_nondecreasing(&self) -> bool {
        self.rows.iter().skip(1).all(|r| r.share_not_earlier > 0.5)
    }

    /// Share of seeds where level `a` alarms no earlier than level `b`.
    pub fn share_not_earlier(&self, a: usize, b: usize) -> f64 {
        share_not_earlier(&self.tau[a], &self.tau[b])
    }
}

fn share_not_earlier(a: &[Option<u64>], b: &[Option<u64>]) -> f64 {
    let ok = a
        .iter()
        .zip(b)
        .filter(|(x, y)| x.unwrap_or(u64::MAX) >= y.unwrap_or(u64::MAX))
        .count();
    ok as f64 / a.len().max(1) as f64
}

/// Placements to sweep: the configured list, or a nested chain dropping one
/// seeded-random bus at a time from all non-slack buses.
pub fn sweep_placements(config: &Config) -> Result<Vec<Vec<BusId>>> {
    let topo = config.topology()?;
    if !config.pmu_sweep.placements.is_empty() {
        return Ok(config
            .pmu_sweep
            .placements
            .iter()
            .map(|p| {
                let mut v: Vec<BusId> = p.iter().map(|b| BusId(*b)).collect();
                v.sort();
                v.dedup();
                v
            })
            .collect());
    }
    let mut current = topo.non_slack_buses();
    let mut rng = substream(config.seed, StreamKind::Placement, 0, 0);
    let mut out = vec![current.clone()];
    while current.len() > 1 {
        current.remove(rng.random_range(0..current.len()));
        out.push(current.clone());
    }
    Ok(out)
}

/// Detection with sensors restricted to each placement. Data are generated
/// on the full phasor layout and projected; models come from the
/// Kron-reduced network. Change times and seeds are those of
/// [`run_experiment`].
pub fn run_pmu_sweep(config: &Config) -> Result<SweepResult> {
    let placements = sweep_placements(config)?;
    let base = config.scenario(config.seed)?;
    let full = CoordLayout::full_phasor(&base.topology);
    let thresholds = log_thresholds(&[config.detector.alpha])?;
    let settings = RunSettings {
        prior: GeometricPrior::new(config.detector.rho)?,
        mode: config.detector.mode,
        fusion: FusionPolicy::CompleteFrame,
        adaptive: config.detector.adaptive,
        thresholds: &thresholds,
    };
    let reps = config.pmu_sweep.replications;
    let levels: Vec<(Models, Vec<usize>)> = placements
        .iter()
        .map(|p| {
            let m = observed_models(&base, p)?;
            let idx = m.layout.indices_in(&full)?;
            Ok((m, idx))
        })
        .collect::<Result<_>>()?;
    let per_rep: Vec<(u64, Vec<Option<u64>>)> = parallel_map(reps, config.parallelism, |i| {
        let seed = replication_seed(config.seed, i as u64);
        let run = || -> Result<(u64, Vec<Option<u64>>)> {
            let mut s = scenario_for(config, seed)?;
            s.schedule = SensorSchedule::full_phasor(&s.topology);
            let gen = StreamGenerator::new(&s)?;
            let lambda = gen.lambda();
            let stop = lambda.saturating_add(config.pmu_sweep.max_delay);
            let taus = levels
                .iter()
                .map(|(m, idx)| Ok(first_crossings(&gen, Some(idx), m, &settings, stop)?[0]))
                .collect::<Result<_>>()?;
            Ok((lambda, taus))
        };
        run().map_err(replication_error(i, seed))
    })?;
    let lambda: Vec<u64> = per_rep.iter().map(|r| r.0).collect();
    let tau: Vec<Vec<Option<u64>>> = (0..levels.len())
        .map(|l| per_rep.iter().map(|r| r.1[l]).collect())
        .collect();
    let mut rows = Vec::new();
    for (l, (m, _)) in levels.iter().enumerate() {
        let mut delay_sum = 0u64;
        let (mut detected, mut false_alarms, mut missed) = (0, 0, 0);
        for (t, lam) in tau[l].iter().zip(&lambda) {
            match t {
                Some(t) if t < lam => false_alarms += 1,
                Some(t) => {
                    detected += 1;
                    delay_sum += t - lam;
                }
                None => missed += 1,
            }
        }
        rows.push(SweepRow {
            observed: m.layout.buses().iter().map(|b| b.to_string()).collect::<Vec<_>>().join(" "),
            count: m.layout.buses().len(),
            kl: m.kl,
            avg_delay: if detected > 0 {
                delay_sum as f64 / detected as f64
            } else {
                f64::NAN
            },
            detected,
            false_alarms,
            missed,
            share_not_earlier: if l == 0 {
                1.0
            } else {
                share_not_earlier(&tau[l], &tau[l - 1])
            },
        });
    }
    Ok(SweepResult { rows, tau, lambda })
}
