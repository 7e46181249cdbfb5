//! Outage localization from conditional correlations.
//!
//! Two buses joined by a branch are conditionally dependent given all other
//! buses; once the branch opens (and no other two-hop path joins them) the
//! dependence vanishes. The zero test flags pairs whose score drops from
//! clearly active to numerically zero. With partial observability the ranking
//! of score changes narrows the search, and a KCL fit of the candidate
//! branches' admittances confirms which one opened.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussmodel::{conditional_corr, estimate_weighted, CoordLayout, EstimationPrior};
use crate::grid::{BranchKey, BusId, GridTopology};
use crate::rng::{substream, StreamKind};
use crate::simgen::KclWindow;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// A post-outage score below this counts as zero.
    pub zero: f64,
    /// A pre-outage score above this counts as an active branch.
    pub active: f64,
    /// Conditional variances at or below this mark a coordinate as
    /// noise-only. A pair is skipped when both buses are noise-only.
    pub variance_floor: f64,
}

impl Thresholds {
    /// For covariances computed from the model rather than sampled.
    pub fn exact() -> Self {
        Thresholds {
            zero: 1e-6,
            active: 1e-3,
            variance_floor: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairScore {
    pub i: BusId,
    pub j: BusId,
    pub rho_pre: f64,
    pub rho_post: f64,
    pub delta: f64,
    /// Both buses are noise-only after the outage; not zero-tested.
    pub degenerate: bool,
}

impl PairScore {
    pub fn key(&self) -> BranchKey {
        BranchKey::new(self.i, self.j)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ZeroTest,
    RankChange,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdmittanceEstimate {
    pub branch: BranchKey,
    pub pre: Complex64,
    pub post: Complex64,
    /// `|post| / |pre|`.
    pub ratio: f64,
    pub likely_out: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationReport {
    pub flagged: Vec<BranchKey>,
    /// Sorted by `delta` descending, ties by pair.
    pub scores: Vec<PairScore>,
    pub method: Method,
    pub admittance_estimates: Option<Vec<AdmittanceEstimate>>,
}

impl LocalizationReport {
    pub fn skipped(&self) -> Vec<BranchKey> {
        self.scores.iter().filter(|s| s.degenerate).map(PairScore::key).collect()
    }
}

/// Every unordered pair of distinct buses in the layout.
pub fn all_pairs(layout: &CoordLayout) -> Vec<BranchKey> {
    let buses = layout.buses();
    let mut out = Vec::new();
    for (a, i) in buses.iter().enumerate() {
        for j in &buses[a + 1..] {
            out.push(BranchKey::new(*i, *j));
        }
    }
    out
}

/// Branches whose endpoints are both in the layout.
pub fn observed_branches(topo: &GridTopology, layout: &CoordLayout) -> Vec<BranchKey> {
    topo.branch_keys()
        .into_iter()
        .filter(|k| layout.contains(k.0) && layout.contains(k.1))
        .collect()
}

/// Deltas are compared on a 1e-12 grid so that changes at rounding level
/// count as ties and fall back to pair order.
fn sort_scores(scores: &mut [PairScore]) {
    let grid = |d: f64| (d * 1e12).round() as i64;
    scores.sort_by(|a, b| grid(b.delta).cmp(&grid(a.delta)).then((a.i, a.j).cmp(&(b.i, b.j))));
}

fn score_pairs(
    sigma0: &DMatrix<f64>,
    sigma1: &DMatrix<f64>,
    layout: &CoordLayout,
    pairs: &[BranchKey],
    floor: f64,
) -> Result<Vec<PairScore>> {
    pairs
        .iter()
        .map(|p| {
            let pre = conditional_corr(sigma0, layout, p.0, p.1, floor)?;
            let post = conditional_corr(sigma1, layout, p.0, p.1, floor)?;
            Ok(PairScore {
                i: p.0,
                j: p.1,
                rho_pre: pre.score,
                rho_post: post.score,
                delta: (post.score - pre.score).abs(),
                degenerate: post.degenerate,
            })
        })
        .collect()
}

/// Zero test over `pairs`: flag a pair when its pre-outage score exceeds
/// `active` and its post-outage score is below `zero`.
pub fn scan_pairs(
    sigma0: &DMatrix<f64>,
    sigma1: &DMatrix<f64>,
    layout: &CoordLayout,
    pairs: &[BranchKey],
    thresholds: &Thresholds,
) -> Result<LocalizationReport> {
    let mut scores = score_pairs(sigma0, sigma1, layout, pairs, thresholds.variance_floor)?;
    sort_scores(&mut scores);
    let mut flagged: Vec<BranchKey> = scores
        .iter()
        .filter(|s| !s.degenerate && s.rho_pre > thresholds.active && s.rho_post < thresholds.zero)
        .map(PairScore::key)
        .collect();
    flagged.sort();
    Ok(LocalizationReport {
        flagged,
        scores,
        method: Method::ZeroTest,
        admittance_estimates: None,
    })
}

/// Pairs sorted by the size of their score change, keeping the first `top_k`.
pub fn rank_changes(
    sigma0: &DMatrix<f64>,
    sigma1: &DMatrix<f64>,
    layout: &CoordLayout,
    pairs: &[BranchKey],
    top_k: Option<usize>,
) -> Result<Vec<PairScore>> {
    let mut scores = score_pairs(sigma0, sigma1, layout, pairs, 0.0)?;
    sort_scores(&mut scores);
    if let Some(k) = top_k {
        scores.truncate(k);
    }
    Ok(scores)
}

/// Square matrix of absolute conditional correlation scores over the
/// layout's buses, ones on the diagonal.
pub fn abs_corr_matrix(sigma: &DMatrix<f64>, layout: &CoordLayout, floor: f64) -> Result<DMatrix<f64>> {
    let buses = layout.buses();
    let n = buses.len();
    let mut m = DMatrix::identity(n, n);
    for a in 0..n {
        for b in (a + 1)..n {
            let s = conditional_corr(sigma, layout, buses[a], buses[b], floor)?.score;
            m[(a, b)] = s;
            m[(b, a)] = s;
        }
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapConfig {
    pub resamples: usize,
    /// Sample size of the post-outage covariance estimate.
    pub post_samples: usize,
    /// Sample size of the pre-outage covariance estimate.
    pub history_samples: usize,
    pub quantile: f64,
    pub zero_factor: f64,
    pub active_factor: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            resamples: 200,
            post_samples: 500,
            history_samples: 5000,
            quantile: 0.99,
            zero_factor: 3.0,
            active_factor: 10.0,
            seed: 0,
        }
    }
}

fn sample_cov(xs: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let mut w = vec![0.0; xs.len()];
    w[0] = 1.0;
    Ok(estimate_weighted(xs, &EstimationPrior::from_weights(w)?)?.cov)
}

/// Quantile of `|ρ̂_b − ρ̂|` over resamples of size `n` drawn with
/// replacement from `data`, pooled over `pairs`.
pub fn bootstrap_noise(
    data: &[DVector<f64>],
    layout: &CoordLayout,
    pairs: &[BranchKey],
    n: usize,
    config: &BootstrapConfig,
    floor: f64,
) -> Result<f64> {
    if data.len() < 2 || n < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: data.len().min(n),
        });
    }
    let full = sample_cov(data)?;
    let base: Vec<f64> = pairs
        .iter()
        .map(|p| conditional_corr(&full, layout, p.0, p.1, floor).map(|c| c.score))
        .collect::<Result<_>>()?;
    let mut diffs = Vec::with_capacity(config.resamples * pairs.len());
    for b in 0..config.resamples {
        let mut rng = substream(config.seed, StreamKind::Bootstrap, b as u64, n as u64);
        let draw: Vec<DVector<f64>> = (0..n).map(|_| data[rng.random_range(0..data.len())].clone()).collect();
        let cov = sample_cov(&draw)?;
        for (p, s0) in pairs.iter().zip(&base) {
            let s = conditional_corr(&cov, layout, p.0, p.1, floor)?.score;
            diffs.push((s - s0).abs());
        }
    }
    if diffs.is_empty() {
        return Ok(0.0);
    }
    diffs.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let q = config.quantile.clamp(0.0, 1.0);
    let idx = ((diffs.len() as f64 - 1.0) * q).round() as usize;
    Ok(diffs[idx])
}

/// Data-driven thresholds from pre-outage samples.
///
/// `zero` is `zero_factor` times the bootstrap noise quantile at the
/// post-outage sample size. `active` is `active_factor` times the quantile
/// at the pre-outage sample size, and never below `zero`.
pub fn bootstrap_thresholds(
    pre: &[DVector<f64>],
    layout: &CoordLayout,
    pairs: &[BranchKey],
    config: &BootstrapConfig,
    variance_floor: f64,
) -> Result<Thresholds> {
    let q_post = bootstrap_noise(pre, layout, pairs, config.post_samples, config, variance_floor)?;
    let q_hist = bootstrap_noise(pre, layout, pairs, config.history_samples, config, variance_floor)?;
    let zero = config.zero_factor * q_post;
    Ok(Thresholds {
        zero,
        active: (config.active_factor * q_hist).max(zero),
        variance_floor,
    })
}

fn solve_least_squares(a: DMatrix<Complex64>, b: DVector<Complex64>) -> Result<DVector<Complex64>> {
    a.svd(true, true)
        .solve(&b, 1e-13)
        .map_err(|e| Error::InvalidParameter(e.to_string()))
}

/// Fits the admittance of every branch at the candidates' endpoints from the
/// KCL relation `I_i = Σ_e y_ie (V_i − V_e)`, separately on the pre- and the
/// post-outage window. Reference buses contribute `ΔV = 0`. Endpoints and
/// their neighbours must be phasor-metered or slack; at least one endpoint
/// needs a current record.
pub fn estimate_admittance(
    pre: &KclWindow,
    post: &KclWindow,
    topo: &GridTopology,
    candidates: &[BranchKey],
    candidate_cut: f64,
) -> Result<Vec<AdmittanceEstimate>> {
    let fit = |w: &KclWindow, key: BranchKey| -> Result<Complex64> {
        let pos = |b: BusId| w.buses.iter().position(|x| *x == b);
        let volt = |n: usize, b: BusId| -> Result<Complex64> {
            match pos(b) {
                Some(p) => Ok(w.voltages[n][p]),
                None if topo.is_slack(b) => Ok(Complex64::new(0.0, 0.0)),
                None => Err(Error::InvalidParameter(format!("bus {b} is not phasor-metered"))),
            }
        };
        let ends: Vec<BusId> = [key.0, key.1].into_iter().filter(|b| pos(*b).is_some()).collect();
        if ends.is_empty() {
            return Err(Error::InvalidParameter(format!("no current record at either end of {key}")));
        }
        let mut unknowns: Vec<BranchKey> = topo
            .branch_keys()
            .into_iter()
            .filter(|k| ends.iter().any(|e| k.0 == *e || k.1 == *e))
            .collect();
        unknowns.sort();
        let Some(target) = unknowns.iter().position(|k| *k == key) else {
            return Err(Error::UnknownBranch {
                from: key.0,
                to: key.1,
            });
        };
        let samples = w.voltages.len();
        if samples * ends.len() < unknowns.len() {
            return Err(Error::TooFewSamples {
                needed: unknowns.len().div_ceil(ends.len()),
                got: samples,
            });
        }
        let rows = samples * ends.len();
        let mut a = DMatrix::<Complex64>::zeros(rows, unknowns.len());
        let mut b = DVector::<Complex64>::zeros(rows);
        for n in 0..samples {
            for (r, e) in ends.iter().enumerate() {
                let row = n * ends.len() + r;
                let ve = volt(n, *e)?;
                for (u, k) in unknowns.iter().enumerate() {
                    let other = if k.0 == *e {
                        k.1
                    } else if k.1 == *e {
                        k.0
                    } else {
                        continue;
                    };
                    a[(row, u)] = ve - volt(n, other)?;
                }
                b[row] = w.currents[n][pos(*e).unwrap()];
            }
        }
        Ok(solve_least_squares(a, b)?[target])
    };
    candidates
        .iter()
        .map(|key| {
            let y0 = fit(pre, *key)?;
            let y1 = fit(post, *key)?;
            let ratio = y1.norm() / y0.norm();
            Ok(AdmittanceEstimate {
                branch: *key,
                pre: y0,
                post: y1,
                ratio,
                likely_out: ratio < candidate_cut,
            })
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRecord {
    pair: String,
    rho_pre: f64,
    rho_post: f64,
    delta: f64,
    flagged: u8,
    degenerate: u8,
}

fn parse_pair(s: &str) -> Result<BranchKey> {
    let bad = || Error::Parse(format!("bad pair {s:?}"));
    let (a, b) = s.split_once('-').ok_or_else(bad)?;
    Ok(BranchKey::from_pair(a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
}

pub fn write_report_csv<W: Write>(report: &LocalizationReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in &report.scores {
        w.serialize(ScoreRecord {
            pair: s.key().to_string(),
            rho_pre: s.rho_pre,
            rho_post: s.rho_post,
            delta: s.delta,
            flagged: report.flagged.contains(&s.key()) as u8,
            degenerate: s.degenerate as u8,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Scores and flags back from a report file.
pub fn read_report_csv<R: Read>(input: R) -> Result<(Vec<PairScore>, Vec<BranchKey>)> {
    let mut r = csv::Reader::from_reader(input);
    let mut scores = Vec::new();
    let mut flagged = Vec::new();
    for rec in r.deserialize::<ScoreRecord>() {
        let rec = rec?;
        let key = parse_pair(&rec.pair)?;
        if rec.flagged != 0 {
            flagged.push(key);
        }
        scores.push(PairScore {
            i: key.0,
            j: key.1,
            rho_pre: rec.rho_pre,
            rho_post: rec.rho_post,
            delta: rec.delta,
            degenerate: rec.degenerate != 0,
        });
    }
    flagged.sort();
    Ok((scores, flagged))
}

/// Matrix with a header row and a leading column of bus ids.
pub fn write_matrix_csv<W: Write>(m: &DMatrix<f64>, buses: &[BusId], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["bus".to_string()];
    header.extend(buses.iter().map(BusId::to_string));
    w.write_record(&header)?;
    for (r, b) in buses.iter().enumerate() {
        let mut row = vec![b.to_string()];
        row.extend((0..m.ncols()).map(|c| m[(r, c)].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv<R: Read>(input: R) -> Result<(DMatrix<f64>, Vec<BusId>)> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let parse_bus = |s: &str| s.parse::<usize>().map(BusId).map_err(|_| Error::Parse(format!("bad bus {s:?}")));
    let buses: Vec<BusId> = header.iter().skip(1).map(parse_bus).collect::<Result<_>>()?;
    let n = buses.len();
    let mut m = DMatrix::zeros(n, n);
    let mut rows = 0;
    for (ri, rec) in r.records().enumerate() {
        let rec = rec?;
        if ri >= n || rec.len() != n + 1 || parse_bus(&rec[0])? != buses[ri] {
            return Err(Error::Parse("matrix file is not square".into()));
        }
        for c in 0..n {
            m[(ri, c)] = rec[c + 1].parse().map_err(|_| Error::Parse(format!("bad value {:?}", &rec[c + 1])))?;
        }
        rows += 1;
    }
    if rows != n {
        return Err(Error::Parse("matrix file is not square".into()));
    }
    Ok((m, buses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussmodel::model_from_grid;
    use crate::grid::feeders;
    use crate::simgen::{generate, Scenario};

    fn loop8_models(out: &[BranchKey]) -> (CoordLayout, DMatrix<f64>, DMatrix<f64>) {
        let topo = feeders::bundled("loop8").unwrap();
        let layout = CoordLayout::full_phasor(&topo);
        let inj = vec![1.0; 8];
        let g = model_from_grid(&topo, &layout, &inj, 0.0).unwrap();
        let f = model_from_grid(&topo.apply_outage(out).unwrap(), &layout, &inj, 0.0).unwrap();
        (layout, g.cov().clone(), f.cov().clone())
    }

    #[test]
    fn double_outage_flags_exactly_the_removed_pair() {
        let out = [BranchKey::from_pair(3, 4), BranchKey::from_pair(2, 6)];
        let (layout, s0, s1) = loop8_models(&out);
        let topo = feeders::bundled("loop8").unwrap();
        let r = scan_pairs(&s0, &s1, &layout, &observed_branches(&topo, &layout), &Thresholds::exact()).unwrap();
        let mut want = out.to_vec();
        want.sort();
        assert_eq!(r.flagged, want);
        assert!(r.skipped().is_empty());
    }

    #[test]
    fn unchanged_covariance_flags_nothing() {
        let (layout, s0, _) = loop8_models(&[]);
        let r = scan_pairs(&s0, &s0, &layout, &all_pairs(&layout), &Thresholds::exact()).unwrap();
        assert!(r.flagged.is_empty());
        assert!(r.scores.iter().all(|s| s.delta == 0.0));
    }

    #[test]
    fn ranking_is_scale_free_and_ordered() {
        let (layout, s0, s1) = loop8_models(&[BranchKey::from_pair(2, 6)]);
        let pairs = all_pairs(&layout);
        let a = rank_changes(&s0, &s1, &layout, &pairs, None).unwrap();
        let b = rank_changes(&(&s0 * 7.5), &(&s1 * 7.5), &layout, &pairs, None).unwrap();
        let keys = |v: &[PairScore]| v.iter().map(PairScore::key).collect::<Vec<_>>();
        assert_eq!(keys(&a), keys(&b));
        assert!(a.windows(2).all(|w| w[0].delta >= w[1].delta - 1e-12));
        assert_eq!(rank_changes(&s0, &s1, &layout, &pairs, Some(3)).unwrap().len(), 3);
    }

    #[test]
    fn dead_pair_is_skipped_not_flagged() {
        let topo = feeders::bundled("path3").unwrap();
        let layout = CoordLayout::full_phasor(&topo);
        let inj = [1.0; 3];
        let noise = 1e-4;
        let g = model_from_grid(&topo, &layout, &inj, noise).unwrap();
        let out = [BranchKey::from_pair(1, 2)];
        let f = model_from_grid(&topo.apply_outage(&out).unwrap(), &layout, &inj, noise).unwrap();
        let th = Thresholds {
            zero: 1e-6,
            active: 1e-3,
            variance_floor: 1.5 * noise,
        };
        let r = scan_pairs(g.cov(), f.cov(), &layout, &[BranchKey::from_pair(2, 3)], &th).unwrap();
        assert!(r.flagged.is_empty());
        assert_eq!(r.skipped(), vec![BranchKey::from_pair(2, 3)]);
    }

    #[test]
    fn heatmap_matrix_has_unit_diagonal() {
        let (layout, s0, _) = loop8_models(&[]);
        let m = abs_corr_matrix(&s0, &layout, 0.0).unwrap();
        assert!((0..m.nrows()).all(|k| m[(k, k)] == 1.0));
        assert_eq!(m, m.transpose());
        let mut buf = Vec::new();
        write_matrix_csv(&m, &layout.buses(), &mut buf).unwrap();
        let (back, buses) = read_matrix_csv(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        assert_eq!(buses, layout.buses());
    }

    #[test]
    fn report_csv_round_trip() {
        let out = [BranchKey::from_pair(3, 4), BranchKey::from_pair(2, 6)];
        let (layout, s0, s1) = loop8_models(&out);
        let r = scan_pairs(&s0, &s1, &layout, &all_pairs(&layout), &Thresholds::exact()).unwrap();
        let mut buf = Vec::new();
        write_report_csv(&r, &mut buf).unwrap();
        let (scores, flagged) = read_report_csv(buf.as_slice()).unwrap();
        assert_eq!(scores, r.scores);
        assert_eq!(flagged, r.flagged);
    }

    fn kcl_stream(out: Vec<BranchKey>) -> (GridTopology, crate::simgen::MeasurementStream) {
        let topo = feeders::bundled("loop8").unwrap();
        let mut s = Scenario::basic(topo.clone(), out, 41, 80, 5);
        s.record_currents = true;
        (topo, generate(&s).unwrap())
    }

    #[test]
    fn noiseless_admittance_fit_is_exact() {
        let key = BranchKey::from_pair(2, 6);
        let (topo, stream) = kcl_stream(vec![key]);
        let pre = stream.kcl_window(1..=40).unwrap();
        let post = stream.kcl_window(41..=80).unwrap();
        let est = estimate_admittance(&pre, &post, &topo, &[key, BranchKey::from_pair(6, 7)], 0.1).unwrap();
        let truth = topo.branch(key).unwrap().admittance;
        assert!((est[0].pre - truth).norm() <= 1e-8 * truth.norm());
        assert!(est[0].post.norm() <= 1e-6 * est[0].pre.norm());
        assert!(est[0].likely_out);
        assert!(!est[1].likely_out);
        assert!((est[1].ratio - 1.0).abs() < 1e-8);
    }

    #[test]
    fn too_few_samples_reports_requirement() {
        let key = BranchKey::from_pair(2, 6);
        let (topo, stream) = kcl_stream(vec![key]);
        let w = stream.kcl_window(1..=1).unwrap();
        match estimate_admittance(&w, &w, &topo, &[key], 0.1) {
            Err(Error::TooFewSamples { needed, got }) => assert!(needed > got),
            other => panic!("unexpected {other:?}"),
        }
    }
}
