//! Bayesian quickest change detection with a geometric change-time prior.
//!
//! The statistic is the posterior odds `R_N = P(λ≤N | x₁..x_N) / P(λ>N | ·)`,
//! updated as `R_N = L_N (R_{N−1} + ρ) / (1 − ρ)` with `R_0 = 0` and
//! `L_N = f(x_N) / g(x_N)`, all in the log domain. An alarm is raised at the
//! first `N` with posterior `≥ 1 − α`.

use std::collections::VecDeque;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussmodel::{estimate_weighted, CoordLayout, EstimationPrior, GaussianModel};
use crate::simgen::MeasurementStream;

/// Log-odds are clamped to this magnitude.
pub const LOG_ODDS_CLAMP: f64 = 700.0;

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometricPrior {
    rho: f64,
}

impl GeometricPrior {
    /// `0 < ρ ≤ 1`; `ρ = 1` puts the change at the first sample.
    pub fn new(rho: f64) -> Result<Self> {
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::InvalidParameter(format!("rho {rho} outside (0, 1]")));
        }
        Ok(GeometricPrior { rho })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// `ln(1 − ρ)`.
    pub fn log_stay(&self) -> f64 {
        (-self.rho).ln_1p()
    }

    /// `ln π(k)` for `k ≥ 1`.
    pub fn log_pmf(&self, k: u64) -> f64 {
        let stay = if k > 1 { (k - 1) as f64 * self.log_stay() } else { 0.0 };
        self.rho.ln() + stay
    }

    /// `P(λ ≤ n) = 1 − (1 − ρ)^n`.
    pub fn cdf(&self, n: u64) -> f64 {
        -(n as f64 * self.log_stay()).exp_m1()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRule {
    alpha: f64,
}

impl DetectionRule {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidParameter(format!("alpha {alpha} outside (0, 1)")));
        }
        Ok(DetectionRule { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Log-odds equivalent of the posterior threshold `1 − α`.
    pub fn log_odds_threshold(&self) -> f64 {
        (-self.alpha).ln_1p() - self.alpha.ln()
    }

    pub fn alarms_at_posterior(&self, posterior: f64) -> bool {
        posterior >= 1.0 - self.alpha
    }

    /// Same rule on log-odds, exact for `α` far below machine epsilon.
    pub fn alarms_at_log_odds(&self, log_odds: f64) -> bool {
        log_odds >= self.log_odds_threshold()
    }
}

/// Posterior `P(λ ≤ N | x₁..x_N)` by explicit summation over every change
/// time `k = 1..=N+1`, the last term being "no change yet".
pub fn posterior_direct(
    g: &GaussianModel,
    f: &GaussianModel,
    prior: &GeometricPrior,
    data: &[DVector<f64>],
) -> Result<f64> {
    let n = data.len();
    if n == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let lg: Vec<f64> = data.iter().map(|x| g.log_density(x.as_slice())).collect::<Result<_>>()?;
    let lf: Vec<f64> = data.iter().map(|x| f.log_density(x.as_slice())).collect::<Result<_>>()?;
    // prefix of g log-densities, suffix of f log-densities
    let mut g_before = vec![0.0; n + 1];
    for k in 0..n {
        g_before[k + 1] = g_before[k] + lg[k];
    }
    let mut f_from = vec![0.0; n + 1];
    for k in (0..n).rev() {
        f_from[k] = f_from[k + 1] + lf[k];
    }
    let changed: Vec<f64> = (0..n)
        .map(|k| prior.log_pmf(k as u64 + 1) + g_before[k] + f_from[k])
        .collect();
    let not_yet = n as f64 * prior.log_stay() + g_before[n];
    let num = log_sum_exp(&changed);
    let den = log_add_exp(num, not_yet);
    Ok((num - den).exp())
}

/// `|ln α| / (−ln(1−ρ) + D)`.
pub fn expected_delay_bound(alpha: f64, prior: &GeometricPrior, dkl: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("alpha {alpha} outside (0, 1)")));
    }
    if !(dkl >= 0.0) {
        return Err(Error::InvalidParameter(format!("divergence {dkl} is negative")));
    }
    let den = -prior.log_stay() + dkl;
    if den <= 0.0 {
        return Err(Error::InvalidParameter(
            "delay bound denominator is zero".into(),
        ));
    }
    Ok(alpha.ln().abs() / den)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    KnownF,
    Adaptive,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::KnownF => "known_f",
            Mode::Adaptive => "adaptive",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "known_f" => Ok(Mode::KnownF),
            "adaptive" => Ok(Mode::Adaptive),
            _ => Err(Error::Parse(format!("unknown mode {s:?}"))),
        }
    }
}

/// Settings of the unknown-`f` mode.
///
/// The post-change model used at step `N` is estimated from the window as it
/// stood before `x_N` arrived, so `x_N` is scored out of sample. The estimate
/// is shrunk toward `g` with weight `ν / (N_eff + ν)`, where `N_eff` is the
/// effective number of weighted window samples. With fewer than `min_samples`
/// samples `f` is `g` with its covariance inflated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptiveConfig {
    pub window: usize,
    /// Defaults to `dim + 2` when unset.
    pub min_samples: Option<usize>,
    pub cold_inflation: f64,
    /// Prior strength `ν` in pseudo-samples.
    pub shrinkage: f64,
    /// Average the covariance with its rotation by 90° in every phasor plane.
    /// Only applied to all-phasor layouts.
    pub circular: bool,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        AdaptiveConfig {
            window: 50,
            min_samples: None,
            cold_inflation: 4.0,
            shrinkage: 20.0,
            circular: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Alarm { tau: u64 },
}

#[derive(Clone, Debug)]
pub struct DetectorState {
    n: u64,
    log_odds: f64,
    mode: Mode,
    prior: GeometricPrior,
    window: VecDeque<DVector<f64>>,
    f_current: Option<GaussianModel>,
    f_refreshed: bool,
    adaptive: AdaptiveConfig,
    circular: bool,
    tau: Option<u64>,
}

impl DetectorState {
    pub fn known_f(prior: GeometricPrior) -> Self {
        DetectorState {
            n: 0,
            log_odds: -LOG_ODDS_CLAMP,
            mode: Mode::KnownF,
            prior,
            window: VecDeque::new(),
            f_current: None,
            f_refreshed: false,
            adaptive: AdaptiveConfig::default(),
            circular: false,
            tau: None,
        }
    }

    /// `layout` decides whether the circular projection applies.
    pub fn adaptive(prior: GeometricPrior, config: AdaptiveConfig, layout: Option<&CoordLayout>) -> Self {
        let mut s = Self::known_f(prior);
        s.mode = Mode::Adaptive;
        s.adaptive = config;
        s.circular = config.circular && layout.is_some_and(CoordLayout::is_all_phasor);
        s
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn log_odds(&self) -> f64 {
        self.log_odds
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn posterior(&self) -> f64 {
        1.0 / (1.0 + (-self.log_odds).exp())
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    /// Post-change model used in the last adaptive step.
    pub fn f_current(&self) -> Option<&GaussianModel> {
        self.f_current.as_ref()
    }

    /// Whether the last adaptive step used an estimate rather than the
    /// cold-start fallback.
    pub fn f_refreshed(&self) -> bool {
        self.f_refreshed
    }

    /// Alarm time, frozen at the first alarm.
    pub fn tau(&self) -> Option<u64> {
        self.tau
    }

    /// Advances the odds with log-likelihood ratio `llr = ln f(x) − ln g(x)`.
    pub fn update_llr(&mut self, llr: f64) {
        let prev = log_add_exp(self.log_odds, self.prior.rho().ln());
        let next = llr + prev - self.prior.log_stay();
        self.log_odds = if next.is_nan() {
            LOG_ODDS_CLAMP
        } else {
            next.clamp(-LOG_ODDS_CLAMP, LOG_ODDS_CLAMP)
        };
        self.n += 1;
    }

    pub fn posterior_update(&mut self, x: &[f64], g: &GaussianModel, f: &GaussianModel) -> Result<()> {
        let llr = f.log_density(x)? - g.log_density(x)?;
        self.update_llr(llr);
        Ok(())
    }

    fn fitted_f(&self, g: &GaussianModel) -> Result<Option<GaussianModel>> {
        let d = g.dim();
        let n_min = self.adaptive.min_samples.unwrap_or(d + 2).max(2);
        if self.window.len() < n_min {
            return Ok(None);
        }
        let samples: Vec<DVector<f64>> = self.window.iter().cloned().collect();
        let prior = EstimationPrior::geometric(self.prior.rho(), samples.len())?;
        let est = estimate_weighted(&samples, &prior)?;
        let nu = self.adaptive.shrinkage.max(0.0);
        let a = est.effective_samples / (est.effective_samples + nu);
        let mut cov = &est.cov * a + g.cov() * (1.0 - a);
        if self.circular {
            cov = circular_projection(&cov);
        }
        let mean = &est.mean * a + g.mean() * (1.0 - a);
        GaussianModel::new(mean, cov).map(Some)
    }

    /// One step of the unknown-`f` mode: score `x` under the current estimate,
    /// then add `x` to the window.
    pub fn adaptive_step(&mut self, x: &[f64], g: &GaussianModel) -> Result<()> {
        if x.len() != g.dim() {
            return Err(Error::DimensionMismatch {
                expected: g.dim(),
                found: x.len(),
            });
        }
        let (f, refreshed) = match self.fitted_f(g)? {
            Some(f) => (f, true),
            None => (g.inflated(self.adaptive.cold_inflation)?, false),
        };
        self.posterior_update(x, g, &f)?;
        self.f_current = Some(f);
        self.f_refreshed = refreshed;
        self.window.push_back(DVector::from_column_slice(x));
        while self.window.len() > self.adaptive.window.max(2) {
            self.window.pop_front();
        }
        Ok(())
    }

    /// Applies the rule; the first alarm fixes `τ` for good.
    pub fn decide(&mut self, rule: &DetectionRule) -> Decision {
        if self.tau.is_none() && rule.alarms_at_log_odds(self.log_odds) {
            self.tau = Some(self.n);
        }
        match self.tau {
            Some(tau) => Decision::Alarm { tau },
            None => Decision::Continue,
        }
    }
}

/// `(Σ + J Σ Jᵀ) / 2` with `J = [[0, −I], [I, 0]]` over the (re, im) blocks.
pub fn circular_projection(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let d = cov.nrows();
    let h = d / 2;
    let mut out = cov.clone();
    for r in 0..h {
        for c in 0..h {
            let aa = 0.5 * (cov[(r, c)] + cov[(h + r, h + c)]);
            let bb = 0.5 * (cov[(h + r, c)] - cov[(r, h + c)]);
            out[(r, c)] = aa;
            out[(h + r, h + c)] = aa;
            out[(h + r, c)] = bb;
            out[(r, h + c)] = -bb;
        }
    }
    out
}

/// How ticks with only some fresh channels are handled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionPolicy {
    /// Step only when every channel is fresh.
    #[default]
    CompleteFrame,
    /// Step whenever any channel is fresh, reusing the last value of stale
    /// channels once all of them have reported.
    HoldLastValue,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectorConfig {
    pub rule: DetectionRule,
    pub prior: GeometricPrior,
    pub mode: Mode,
    pub adaptive: AdaptiveConfig,
    pub fusion: FusionPolicy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub n: u64,
    pub tick: u64,
    pub posterior: f64,
    pub log_odds: f64,
    pub mode: Mode,
    pub f_refreshed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionReport {
    /// Tick of the first alarm.
    pub tau: Option<u64>,
    pub posterior_trace: Vec<TraceRow>,
    pub lambda_true: Option<u64>,
    /// `τ − λ` in ticks when the alarm is not early.
    pub delay: Option<u64>,
}

impl DetectionReport {
    pub fn false_alarm(&self) -> bool {
        matches!((self.tau, self.lambda_true), (Some(t), Some(l)) if t < l)
    }
}

/// Runs the detector over every usable tick of `stream`. The trace continues
/// after the alarm. `f` is required in known-`f` mode and ignored otherwise.
pub fn run_detector(
    stream: &MeasurementStream,
    g: &GaussianModel,
    f: Option<&GaussianModel>,
    config: &DetectorConfig,
) -> Result<DetectionReport> {
    let d = stream.layout().dim();
    if g.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: g.dim(),
        });
    }
    let mut state = match config.mode {
        Mode::KnownF => DetectorState::known_f(config.prior),
        Mode::Adaptive => DetectorState::adaptive(config.prior, config.adaptive, Some(stream.layout())),
    };
    let f = match config.mode {
        Mode::KnownF => {
            let f = f.ok_or_else(|| Error::InvalidParameter("known-f mode needs a post-change model".into()))?;
            if f.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: f.dim(),
                });
            }
            Some(f)
        }
        Mode::Adaptive => None,
    };
    let mut trace = Vec::new();
    let mut tau_tick = None;
    let mut seen = vec![false; d];
    for frame in stream.frames() {
        if frame.values.len() != d || frame.fresh.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: frame.values.len(),
            });
        }
        for (s, fr) in seen.iter_mut().zip(&frame.fresh) {
            *s |= *fr;
        }
        let usable = match config.fusion {
            FusionPolicy::CompleteFrame => frame.fresh.iter().all(|f| *f),
            FusionPolicy::HoldLastValue => frame.fresh.iter().any(|f| *f) && seen.iter().all(|s| *s),
        };
        if !usable {
            continue;
        }
        match f {
            Some(f) => state.posterior_update(&frame.values, g, f)?,
            None => state.adaptive_step(&frame.values, g)?,
        }
        let was_alarmed = state.tau().is_some();
        if let Decision::Alarm { .. } = state.decide(&config.rule) {
            if !was_alarmed {
                tau_tick = Some(frame.tick);
            }
        }
        trace.push(TraceRow {
            n: state.n(),
            tick: frame.tick,
            posterior: state.posterior(),
            log_odds: state.log_odds(),
            mode: state.mode(),
            f_refreshed: state.f_refreshed(),
        });
    }
    let lambda = stream.ground_truth().lambda;
    let delay = match (tau_tick, lambda) {
        (Some(t), Some(l)) if t >= l => Some(t - l),
        _ => None,
    };
    Ok(DetectionReport {
        tau: tau_tick,
        posterior_trace: trace,
        lambda_true: lambda,
        delay,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRecord {
    n: u64,
    tick: u64,
    posterior: f64,
    log_odds: f64,
    mode: String,
    f_refreshed: u8,
}

pub fn write_trace_csv<W: Write>(trace: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in trace {
        w.serialize(TraceRecord {
            n: r.n,
            tick: r.tick,
            posterior: r.posterior,
            log_odds: r.log_odds,
            mode: r.mode.as_str().to_string(),
            f_refreshed: r.f_refreshed as u8,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_csv<R: Read>(input: R) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize::<TraceRecord>()
        .map(|rec| {
            let rec = rec?;
            Ok(TraceRow {
                n: rec.n,
                tick: rec.tick,
                posterior: rec.posterior,
                log_odds: rec.log_odds,
                mode: Mode::parse(&rec.mode)?,
                f_refreshed: rec.f_refreshed != 0,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar(mu: f64, var: f64) -> GaussianModel {
        GaussianModel::new(DVector::from_element(1, mu), DMatrix::from_element(1, 1, var)).unwrap()
    }

    fn xs(v: &[f64]) -> Vec<DVector<f64>> {
        v.iter().map(|x| DVector::from_element(1, *x)).collect()
    }

    #[test]
    fn equal_models_give_prior_cdf() {
        let g = scalar(0.0, 1.0);
        let prior = GeometricPrior::new(0.1).unwrap();
        let data = xs(&[0.3, -1.2, 2.0, 0.1, 0.0]);
        let p = posterior_direct(&g, &g, &prior, &data).unwrap();
        assert_relative_eq!(p, 1.0 - 0.9f64.powi(5), epsilon = 1e-12);

        let tiny = GeometricPrior::new(1e-300).unwrap();
        assert!(posterior_direct(&g, &g, &tiny, &data).unwrap() < 1e-290);
    }

    #[test]
    fn one_strong_sample() {
        // two terms: k=1 with weight 0.5 f(10); k=2 with weight 0.5 g(10)
        let g = scalar(0.0, 1.0);
        let f = scalar(10.0, 1.0);
        let prior = GeometricPrior::new(0.5).unwrap();
        let p = posterior_direct(&g, &f, &prior, &xs(&[10.0])).unwrap();
        let expected = 1.0 / (1.0 + (-50.0f64).exp());
        assert_relative_eq!(p, expected, epsilon = 1e-15);
        assert!(p > 0.999);
    }

    #[test]
    fn recursion_arithmetic() {
        let prior = GeometricPrior::new(0.5).unwrap();
        let mut s = DetectorState::known_f(prior);
        s.update_llr(0.0);
        assert_relative_eq!(s.log_odds(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(s.posterior(), 0.5, epsilon = 1e-12);

        let prior = GeometricPrior::new(0.03).unwrap();
        let mut s = DetectorState::known_f(prior);
        for n in 1..=40 {
            s.update_llr(0.0);
            assert_relative_eq!(s.posterior(), prior.cdf(n), epsilon = 1e-12);
        }
    }

    #[test]
    fn decision_boundary() {
        let rule = DetectionRule::new(1e-6).unwrap();
        let at = 1.0 - 1e-6;
        assert!(rule.alarms_at_posterior(at));
        let below = f64::from_bits(at.to_bits() - 1);
        assert!(!rule.alarms_at_posterior(below));
        assert!(rule.alarms_at_log_odds(rule.log_odds_threshold()));
        assert!(!rule.alarms_at_log_odds(rule.log_odds_threshold() - 1e-9));
    }

    #[test]
    fn first_alarm_freezes_tau() {
        let prior = GeometricPrior::new(0.1).unwrap();
        let rule = DetectionRule::new(0.01).unwrap();
        let mut s = DetectorState::known_f(prior);
        s.update_llr(1.0);
        assert_eq!(s.decide(&rule), Decision::Continue);
        s.update_llr(20.0);
        assert_eq!(s.decide(&rule), Decision::Alarm { tau: 2 });
        s.update_llr(-50.0);
        assert_eq!(s.decide(&rule), Decision::Alarm { tau: 2 });
    }

    #[test]
    fn delay_bound_values() {
        let rho = -(-1.0f64).exp_m1();
        let prior = GeometricPrior::new(rho).unwrap();
        assert_relative_eq!(
            expected_delay_bound((-10.0f64).exp(), &prior, 4.0).unwrap(),
            2.0,
            epsilon = 1e-12
        );
        assert!(
            expected_delay_bound(1e-3, &prior, 8.0).unwrap() < expected_delay_bound(1e-3, &prior, 4.0).unwrap()
        );
        // ρ = 0.04, KL(N(2,1) ‖ N(0,1)) = 2, α = 1e-8
        let p = GeometricPrior::new(0.04).unwrap();
        let expected = 18.420680743952367 / (0.040821994520255166 + 2.0);
        assert_relative_eq!(expected_delay_bound(1e-8, &p, 2.0).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn circular_projection_is_idempotent() {
        let c = DMatrix::from_row_slice(
            4,
            4,
            &[2.0, 0.3, 0.1, -0.2, 0.3, 1.0, 0.4, 0.0, 0.1, 0.4, 1.5, 0.2, -0.2, 0.0, 0.2, 3.0],
        );
        let p = circular_projection(&c);
        assert_relative_eq!(circular_projection(&p), p, epsilon = 1e-15);
        assert_relative_eq!(p.transpose(), p, epsilon = 1e-15);
    }

    #[test]
    fn constant_window_adaptive_does_not_fail() {
        let g = scalar(0.0, 1.0);
        let prior = GeometricPrior::new(0.01).unwrap();
        let mut s = DetectorState::adaptive(prior, AdaptiveConfig::default(), None);
        for _ in 0..30 {
            s.adaptive_step(&[0.5], &g).unwrap();
            assert!(s.log_odds().is_finite());
        }
        assert!(s.f_refreshed());
        assert!(s.window_len() <= 50);
    }

    #[test]
    fn trace_csv_round_trip() {
        let trace = vec![
            TraceRow {
                n: 1,
                tick: 1,
                posterior: 0.25,
                log_odds: -1.0986122886681098,
                mode: Mode::Adaptive,
                f_refreshed: false,
            },
            TraceRow {
                n: 2,
                tick: 3,
                posterior: 1.0 - 1e-12,
                log_odds: 27.631021115928547,
                mode: Mode::Adaptive,
                f_refreshed: true,
            },
        ];
        let mut buf = Vec::new();
        write_trace_csv(&trace, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("n,tick,posterior,log_odds,mode,f_refreshed"));
        assert_eq!(read_trace_csv(buf.as_slice()).unwrap(), trace);
    }
}
