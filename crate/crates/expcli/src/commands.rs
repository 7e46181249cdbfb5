//! One function per subcommand. Each writes its files into `out` and returns
//! a JSON summary.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use outage_core::detector::{run_detector, write_trace_csv, Mode};
use outage_core::grid::BranchKey;
use outage_core::localizer::{
    all_pairs, bootstrap_thresholds, estimate_admittance, observed_branches, rank_changes, scan_pairs,
    write_report_csv, AdmittanceEstimate, LocalizationReport, Method, PairScore, Thresholds,
};
use outage_core::simgen::{
    read_stream_csv, write_currents_csv, write_stream_csv, OutageTiming, Scenario,
    StreamGenerator, StreamMetadata,
};
use serde_json::{json, Value};

use crate::config::{Config, PairUniverse};
use crate::error::{CliError, Result};
use crate::output::{
    emit_heatmaps, ensure_dir, false_alarm_csv, metrics_csv, read_bytes, sweep_csv, write_bytes, write_json, write_with,
};
use crate::runner::{exact_models, run_experiment, run_false_alarm, run_pmu_sweep, Models};

fn names(paths: &[PathBuf]) -> Vec<String> {
    paths
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect()
}

/// Sidecar path of a stream file: `x.csv` → `x.meta.toml`.
pub fn meta_path(stream: &Path) -> PathBuf {
    stream.with_extension("meta.toml")
}

/// Currents file next to a stream file: `x.csv` → `x.currents.csv`.
pub fn currents_path(stream: &Path) -> PathBuf {
    stream.with_extension("currents.csv")
}

pub fn simulate(config: &Config, out: &Path) -> Result<Value> {
    ensure_dir(out)?;
    let scenario = config.scenario(config.seed)?;
    let stream = StreamGenerator::new(&scenario)?.generate()?;
    let stream_path = write_with(out, "stream.csv", |b| write_stream_csv(&stream, b))?;
    let meta = StreamMetadata::from_scenario(&scenario, &stream);
    write_bytes(&meta_path(&stream_path), meta.to_toml().as_bytes())?;
    let mut files = vec![stream_path.clone(), meta_path(&stream_path)];
    if scenario.record_currents {
        let p = currents_path(&stream_path);
        let mut buf = Vec::new();
        write_currents_csv(&stream, &mut buf)?;
        write_bytes(&p, &buf)?;
        files.push(p);
    }
    Ok(json!({
        "command": "simulate",
        "ticks": stream.frames().len(),
        "dim": stream.layout().dim(),
        "lambda": stream.ground_truth().lambda,
        "files": names(&files),
    }))
}

/// Scenario reconstructed from stream metadata; models only depend on the
/// fields restored here.
fn scenario_from_meta(meta: &StreamMetadata) -> Result<Scenario> {
    Ok(Scenario {
        topology: meta.topology()?,
        outage: meta.outage,
        out_branches: meta.ground_truth.out_branches.clone(),
        injection_variance: meta.injection_variance.clone(),
        noise_variance: meta.noise_variance,
        schedule: meta.sensors.clone(),
        horizon: meta.horizon,
        seed: meta.seed,
        mean_shift: meta.mean_shift,
        record_currents: false,
        current_noise_variance: meta.current_noise_variance,
    })
}

/// Detection on a stored stream, or on a stream generated from the config.
pub fn detect(config: &Config, out: &Path, stream_file: Option<&Path>) -> Result<Value> {
    ensure_dir(out)?;
    let (scenario, stream) = match stream_file {
        Some(path) => {
            let meta_file = meta_path(path);
            let meta = StreamMetadata::load(&meta_file).map_err(|e| CliError::Invalid(format!("{}: {e}", meta_file.display())))?;
            let bytes = read_bytes(path)?;
            let stream = read_stream_csv(bytes.as_slice(), meta.ground_truth.clone())?;
            (scenario_from_meta(&meta)?, stream)
        }
        None => {
            let s = config.scenario(config.seed)?;
            let stream = StreamGenerator::new(&s)?.generate()?;
            (s, stream)
        }
    };
    let models = exact_models(&scenario)?;
    if models.layout != *stream.layout() {
        return Err(CliError::Invalid("stream layout does not match its sensor schedule".into()));
    }
    let det = config.detector_config(config.detector.alpha, config.detector.mode)?;
    let report = run_detector(&stream, &models.g, Some(&models.f), &det)?;
    let trace = write_with(out, "trace.csv", |b| write_trace_csv(&report.posterior_trace, b))?;
    let summary = json!({
        "command": "detect",
        "alpha": config.detector.alpha,
        "rho": config.detector.rho,
        "mode": config.detector.mode.as_str(),
        "kl": models.kl,
        "tau": report.tau,
        "lambda": report.lambda_true,
        "delay": report.delay,
        "false_alarm": report.false_alarm(),
        "steps": report.posterior_trace.len(),
    });
    let report_path = out.join("detection.json");
    write_json(&report_path, &summary)?;
    let mut s = summary;
    s["files"] = json!(names(&[trace, report_path]));
    Ok(s)
}

/// Everything the localize and heatmap commands compute.
pub struct Localization {
    pub models: Models,
    pub pairs: Vec<BranchKey>,
    pub exact: LocalizationReport,
    pub exact_thresholds: Thresholds,
    pub estimated: LocalizationReport,
    pub estimated_thresholds: Thresholds,
    pub sigma0_hat: DMatrix<f64>,
    pub sigma1_hat: DMatrix<f64>,
    pub ranking: Vec<PairScore>,
    pub admittance: Option<Vec<AdmittanceEstimate>>,
    /// Every non-slack bus carries a phasor channel.
    pub full_coverage: bool,
}

/// Noise level of the exact zero test. White measurement noise fills in the
/// precision matrix, so the test runs on the voltage covariance itself; the
/// tiny floor keeps dead coordinates factorable.
pub const EXACT_NOISE: f64 = 1e-12;

fn sample_cov(xs: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let mut w = vec![0.0; xs.len()];
    w[0] = 1.0;
    let prior = outage_core::gaussmodel::EstimationPrior::from_weights(w)?;
    Ok(outage_core::gaussmodel::estimate_weighted(xs, &prior)?.cov)
}

pub fn compute_localization(config: &Config) -> Result<Localization> {
    let l = &config.localize;
    if l.history_samples < 2 || l.post_samples < 2 {
        return Err(CliError::Config("localize needs at least 2 samples per regime".into()));
    }
    let mut scenario = config.scenario(config.seed)?;
    let lambda = l.history_samples as u64 + 1;
    scenario.outage = OutageTiming::Fixed(lambda);
    scenario.horizon = (l.history_samples + l.post_samples) as u64;
    let models = exact_models(&scenario)?;
    let layout = &models.layout;
    let pairs = match l.pairs {
        PairUniverse::Branches => observed_branches(&scenario.topology, layout),
        PairUniverse::All => all_pairs(layout),
    };
    let floor = l.variance_floor_factor * scenario.noise_variance;
    let noiseless = exact_models(&Scenario {
        noise_variance: EXACT_NOISE,
        ..scenario.clone()
    })?;
    let exact_thresholds = Thresholds {
        variance_floor: l.variance_floor_factor * EXACT_NOISE,
        ..Thresholds::exact()
    };
    let exact = scan_pairs(noiseless.g.cov(), noiseless.f.cov(), layout, &pairs, &exact_thresholds)?;

    let gen = StreamGenerator::new(&scenario)?;
    let pre: Vec<DVector<f64>> = (1..lambda).map(|t| gen.sample(t)).collect();
    let post: Vec<DVector<f64>> = (lambda..=scenario.horizon).map(|t| gen.sample(t)).collect();
    let sigma0_hat = sample_cov(&pre)?;
    let sigma1_hat = sample_cov(&post)?;
    let mut boot = l.bootstrap;
    boot.post_samples = l.post_samples;
    boot.history_samples = l.history_samples;
    let estimated_thresholds = bootstrap_thresholds(&pre, layout, &pairs, &boot, floor)?;
    let estimated = scan_pairs(&sigma0_hat, &sigma1_hat, layout, &pairs, &estimated_thresholds)?;

    let ranking = rank_changes(noiseless.g.cov(), noiseless.f.cov(), layout, &all_pairs(layout), Some(l.top_k))?;
    let full_coverage = scenario
        .topology
        .non_slack_buses()
        .iter()
        .all(|b| layout.coords_of(*b).len() == 2);

    let admittance = if scenario.record_currents {
        let stream = gen.generate()?;
        let w0 = stream.kcl_window(1..=lambda - 1)?;
        let w1 = stream.kcl_window(lambda..=scenario.horizon)?;
        let branches = scenario.topology.branch_keys();
        let mut candidates: Vec<BranchKey> = ranking
            .iter()
            .map(PairScore::key)
            .chain(estimated.flagged.iter().copied())
            .filter(|k| branches.contains(k))
            .collect();
        candidates.sort();
        candidates.dedup();
        let mut found: Vec<AdmittanceEstimate> = Vec::new();
        for c in candidates {
            // candidates whose endpoints lack the required phasors are skipped
            if let Ok(est) = estimate_admittance(&w0, &w1, &scenario.topology, &[c], l.candidate_cut) {
                for e in est {
                    if !found.iter().any(|x| x.branch == e.branch) {
                        found.push(e);
                    }
                }
            }
        }
        found.sort_by_key(|e| e.branch);
        Some(found)
    } else {
        None
    };
    Ok(Localization {
        models,
        pairs,
        exact,
        exact_thresholds,
        estimated,
        estimated_thresholds,
        sigma0_hat,
        sigma1_hat,
        ranking,
        admittance,
        full_coverage,
    })
}

fn keys(k: &[BranchKey]) -> Vec<String> {
    k.iter().map(BranchKey::to_string).collect()
}

pub fn localize(config: &Config, out: &Path) -> Result<Value> {
    ensure_dir(out)?;
    let loc = compute_localization(config)?;
    let mut files = vec![
        write_with(out, "localization_exact.csv", |b| write_report_csv(&loc.exact, b))?,
        write_with(out, "localization_estimated.csv", |b| write_report_csv(&loc.estimated, b))?,
    ];
    let ranking = LocalizationReport {
        flagged: Vec::new(),
        scores: loc.ranking.clone(),
        method: Method::RankChange,
        admittance_estimates: None,
    };
    files.push(write_with(out, "ranking.csv", |b| write_report_csv(&ranking, b))?);
    if let Some(est) = &loc.admittance {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["branch", "pre_re", "pre_im", "post_re", "post_im", "ratio", "likely_out"])
            .map_err(|e| CliError::Invalid(e.to_string()))?;
        for e in est {
            w.write_record([
                e.branch.to_string(),
                e.pre.re.to_string(),
                e.pre.im.to_string(),
                e.post.re.to_string(),
                e.post.im.to_string(),
                e.ratio.to_string(),
                (e.likely_out as u8).to_string(),
            ])
            .map_err(|e| CliError::Invalid(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Invalid(e.to_string()))?;
        let p = out.join("admittance.csv");
        write_bytes(&p, &bytes)?;
        files.push(p);
    }
    let summary = json!({
        "command": "localize",
        "truth": keys(&config.out_branches().iter().copied().collect::<Vec<_>>()),
        "exact_flagged": keys(&loc.exact.flagged),
        "exact_skipped": keys(&loc.exact.skipped()),
        "estimated_flagged": keys(&loc.estimated.flagged),
        "estimated_skipped": keys(&loc.estimated.skipped()),
        "thresholds": {
            "exact": loc.exact_thresholds,
            "estimated": loc.estimated_thresholds,
        },
        "full_coverage": loc.full_coverage,
        "top_ranked": loc.ranking.iter().map(|s| s.key().to_string()).collect::<Vec<_>>(),
        "likely_out": loc.admittance.as_ref().map(|a| a.iter().filter(|e| e.likely_out).map(|e| e.branch.to_string()).collect::<Vec<_>>()),
    });
    let p = out.join("localization.json");
    write_json(&p, &summary)?;
    files.push(p);
    let mut s = summary;
    s["files"] = json!(names(&files));
    Ok(s)
}

pub fn heatmap(config: &Config, out: &Path) -> Result<Value> {
    ensure_dir(out)?;
    let loc = compute_localization(config)?;
    let floor = config.localize.variance_floor_factor * config.scenario.noise_variance;
    let files = emit_heatmaps(
        out,
        &loc.models.layout,
        floor,
        &[
            ("pre", loc.models.g.cov()),
            ("post", loc.models.f.cov()),
            ("post_estimated", &loc.sigma1_hat),
        ],
    )?;
    Ok(json!({
        "command": "heatmap",
        "buses": loc.models.layout.buses().iter().map(|b| b.0).collect::<Vec<_>>(),
        "files": names(&files),
    }))
}

pub fn experiment(config: &Config, out: &Path) -> Result<Value> {
    ensure_dir(out)?;
    let table = run_experiment(config)?;
    let mut files = vec![out.join("metrics.csv")];
    write_bytes(&files[0], &metrics_csv(&table.rows)?)?;
    let mut fa = None;
    if config.experiment.false_alarm_runs > 0 {
        let rows = run_false_alarm(config, config.experiment.false_alarm_runs)?;
        let p = out.join("false_alarm.csv");
        write_bytes(&p, &false_alarm_csv(&rows)?)?;
        files.push(p);
        fa = Some(rows);
    }
    Ok(json!({
        "command": "experiment",
        "kl": table.kl,
        "rows": table.rows.len(),
        "modes": config.experiment.modes.iter().map(Mode::as_str).collect::<Vec<_>>(),
        "replications": config.experiment.replications,
        "false_alarm": fa.map(|r| r.iter().map(|x| json!({"alpha": x.alpha, "mode": x.mode.as_str(), "rate": x.rate})).collect::<Vec<_>>()),
        "files": names(&files),
    }))
}

pub fn pmu_sweep(config: &Config, out: &Path) -> Result<Value> {
    ensure_dir(out)?;
    let sweep = run_pmu_sweep(config)?;
    let p = out.join("pmu_sweep.csv");
    write_bytes(&p, &sweep_csv(&sweep.rows)?)?;
    Ok(json!({
        "command": "pmu-sweep",
        "levels": sweep.rows.len(),
        "majority_nondecreasing": sweep.majority_nondecreasing(),
        "files": names(&[p]),
    }))
}
