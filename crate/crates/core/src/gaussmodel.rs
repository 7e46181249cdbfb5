//! Gaussian models over real-stacked voltage coordinates.
//!
//! A [`CoordLayout`] fixes the coordinate order: the real part (or the
//! magnitude) of every sensed bus in ascending bus id, then the imaginary part
//! of every phasor bus in ascending bus id. A magnitude coordinate is the
//! linearized deviation `Re(ΔV)` about a zero-phase operating point, so it is
//! interchangeable with the real part of a phasor channel on the same bus.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{kron_reduce, solve_complex, AdmittanceMatrix, BusId, GridTopology, IslandKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Phasor,
    Magnitude,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Part {
    Re,
    Im,
    Mag,
}

/// One real coordinate of the stacked vector, written `2.re`, `2.im`, `5.mag`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Coord {
    pub bus: BusId,
    pub part: Part,
}

impl fmt::Display for Coord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let part = match self.part {
            Part::Re => "re",
            Part::Im => "im",
            Part::Mag => "mag",
        };
        write!(f, "{}.{}", self.bus, part)
    }
}

impl FromStr for Coord {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("bad coordinate id {s:?}"));
        let (bus, part) = s.split_once('.').ok_or_else(bad)?;
        let bus: usize = bus.parse().map_err(|_| bad())?;
        let part = match part {
            "re" => Part::Re,
            "im" => Part::Im,
            "mag" => Part::Mag,
            _ => return Err(bad()),
        };
        Ok(Coord {
            bus: BusId(bus),
            part,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoordLayout {
    channels: Vec<(BusId, ChannelKind)>,
    coords: Vec<Coord>,
}

impl CoordLayout {
    pub fn new(channels: impl IntoIterator<Item = (BusId, ChannelKind)>) -> Result<Self> {
        let mut channels: Vec<_> = channels.into_iter().collect();
        channels.sort_by_key(|c| c.0);
        if channels.is_empty() {
            return Err(Error::InvalidParameter("layout has no sensed bus".into()));
        }
        if channels.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidParameter("bus listed twice in layout".into()));
        }
        let mut coords: Vec<Coord> = channels
            .iter()
            .map(|(bus, kind)| Coord {
                bus: *bus,
                part: match kind {
                    ChannelKind::Phasor => Part::Re,
                    ChannelKind::Magnitude => Part::Mag,
                },
            })
            .collect();
        coords.extend(
            channels
                .iter()
                .filter(|c| c.1 == ChannelKind::Phasor)
                .map(|(bus, _)| Coord {
                    bus: *bus,
                    part: Part::Im,
                }),
        );
        Ok(CoordLayout { channels, coords })
    }

    pub fn phasor(buses: impl IntoIterator<Item = BusId>) -> Result<Self> {
        Self::new(buses.into_iter().map(|b| (b, ChannelKind::Phasor)))
    }

    pub fn magnitude(buses: impl IntoIterator<Item = BusId>) -> Result<Self> {
        Self::new(buses.into_iter().map(|b| (b, ChannelKind::Magnitude)))
    }

    /// Phasor channels on every non-slack bus.
    pub fn full_phasor(topo: &GridTopology) -> Self {
        Self::phasor(topo.non_slack_buses()).expect("topology has a non-slack bus")
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn channels(&self) -> &[(BusId, ChannelKind)] {
        &self.channels
    }

    pub fn buses(&self) -> Vec<BusId> {
        self.channels.iter().map(|c| c.0).collect()
    }

    pub fn contains(&self, bus: BusId) -> bool {
        self.channels.iter().any(|c| c.0 == bus)
    }

    pub fn is_all_phasor(&self) -> bool {
        self.channels.iter().all(|c| c.1 == ChannelKind::Phasor)
    }

    /// Coordinate indices belonging to `bus`, real (or magnitude) part first.
    pub fn coords_of(&self, bus: BusId) -> Vec<usize> {
        self.coords
            .iter()
            .enumerate()
            .filter(|(_, c)| c.bus == bus)
            .map(|(k, _)| k)
            .collect()
    }

    pub fn index_of(&self, coord: Coord) -> Option<usize> {
        self.coords.iter().position(|c| {
            c.bus == coord.bus
                && (c.part == coord.part
                    || matches!((c.part, coord.part), (Part::Re, Part::Mag) | (Part::Mag, Part::Re)))
        })
    }

    /// For each coordinate of `self`, its index in `outer`. A magnitude
    /// coordinate matches the real part of a phasor channel.
    pub fn indices_in(&self, outer: &CoordLayout) -> Result<Vec<usize>> {
        self.coords
            .iter()
            .map(|c| {
                outer
                    .index_of(*c)
                    .ok_or_else(|| Error::InvalidParameter(format!("coordinate {c} not in layout")))
            })
            .collect()
    }
}

fn ridge_epsilon(m: &DMatrix<f64>) -> f64 {
    let d = m.nrows().max(1) as f64;
    let tr = m.trace();
    if tr > 0.0 {
        1e-8 * tr / d
    } else {
        1e-12
    }
}

/// Cholesky factor, retrying once with the ridge `1e-8·trace/d` on failure.
/// Returns the lower factor and the ridge that was added.
fn factor(m: &DMatrix<f64>) -> Option<(DMatrix<f64>, f64)> {
    if let Some(c) = m.clone().cholesky() {
        return Some((c.unpack(), 0.0));
    }
    let eps = ridge_epsilon(m);
    let mut r = m.clone();
    for k in 0..r.nrows() {
        r[(k, k)] += eps;
    }
    r.cholesky().map(|c| (c.unpack(), eps))
}

#[derive(Clone, Debug)]
pub struct GaussianModel {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    log_det: f64,
    ridge: f64,
}

impl GaussianModel {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: cov.nrows(),
            });
        }
        if d == 0 {
            return Err(Error::InvalidParameter("zero-dimensional model".into()));
        }
        let scale = cov.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
        let asym = (&cov - cov.transpose()).iter().map(|v| v.abs()).fold(0.0, f64::max);
        if asym > 1e-12 * scale {
            return Err(Error::NotSymmetric(asym));
        }
        let cov = (&cov + cov.transpose()) * 0.5;
        let (chol, ridge) = factor(&cov).ok_or(Error::NotPositiveDefinite)?;
        let log_det = 2.0 * chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(GaussianModel {
            mean,
            cov,
            chol,
            log_det,
            ridge,
        })
    }

    pub fn zero_mean(cov: DMatrix<f64>) -> Result<Self> {
        Self::new(DVector::zeros(cov.nrows()), cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Covariance as supplied, without the ridge.
    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Ridge added before factoring; zero when the plain factorization worked.
    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Lower Cholesky factor of the (regularized) covariance.
    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        if n != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: n,
            });
        }
        Ok(())
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x.len())?;
        let r = DVector::from_iterator(x.len(), x.iter().zip(self.mean.iter()).map(|(a, m)| a - m));
        let y = self
            .chol
            .solve_lower_triangular(&r)
            .ok_or(Error::NotPositiveDefinite)?;
        let d = self.dim() as f64;
        Ok(-0.5 * (d * (2.0 * std::f64::consts::PI).ln() + self.log_det + y.norm_squared()))
    }

    pub fn marginal(&self, idx: &[usize]) -> Result<GaussianModel> {
        if let Some(bad) = idx.iter().find(|k| **k >= self.dim()) {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: bad + 1,
            });
        }
        let mean = DVector::from_iterator(idx.len(), idx.iter().map(|k| self.mean[*k]));
        let cov = self.cov.select_rows(idx).select_columns(idx);
        GaussianModel::new(mean, cov)
    }

    /// Same mean, covariance multiplied by `factor`.
    pub fn inflated(&self, factor: f64) -> Result<GaussianModel> {
        GaussianModel::new(self.mean.clone(), &self.cov * factor)
    }

    /// `μ + L z` for a standard normal draw `z`.
    pub fn transform_standard(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.mean + &self.chol * z
    }
}

/// Closed-form `KL(f ‖ g)` between Gaussians, clamped at zero.
pub fn kl_divergence(f: &GaussianModel, g: &GaussianModel) -> Result<f64> {
    g.check_dim(f.dim())?;
    let d = f.dim() as f64;
    let m = g
        .chol
        .solve_lower_triangular(&f.chol)
        .ok_or(Error::NotPositiveDefinite)?;
    let dm = &g.mean - &f.mean;
    let q = g
        .chol
        .solve_lower_triangular(&dm)
        .ok_or(Error::NotPositiveDefinite)?;
    let kl = 0.5 * (m.norm_squared() + q.norm_squared() - d + g.log_det - f.log_det);
    Ok(kl.max(0.0))
}

/// Linear map from full-bus complex injections to full-bus voltage
/// deviations, `ΔV = T ΔI`, built island by island. Slack-connected islands
/// use their slack buses as reference, DER-backed islands their DER buses,
/// and dead islands map to zero.
pub fn transfer_matrix(topo: &GridTopology) -> Result<DMatrix<Complex64>> {
    let y = topo.admittance()?;
    let m = topo.bus_count();
    let mut t = DMatrix::<Complex64>::zeros(m, m);
    for island in topo.islands() {
        let reference: &std::collections::BTreeSet<BusId> = match island.kind {
            IslandKind::SlackConnected => topo.slack(),
            IslandKind::DerBacked => topo.der(),
            IslandKind::Dead => continue,
        };
        let free: Vec<BusId> = island
            .buses
            .iter()
            .copied()
            .filter(|b| !reference.contains(b))
            .collect();
        if free.is_empty() {
            continue;
        }
        let pos: Vec<usize> = free.iter().map(|b| b.index()).collect();
        let y_ff = y.values().select_rows(&pos).select_columns(&pos);
        let z = solve_complex(&y_ff, &DMatrix::identity(pos.len(), pos.len())).ok_or_else(|| {
            Error::SingularBlock {
                block: "island",
                buses: free.clone(),
            }
        })?;
        for (a, pa) in pos.iter().enumerate() {
            for (b, pb) in pos.iter().enumerate() {
                t[(*pa, *pb)] = z[(a, b)];
            }
        }
    }
    Ok(t)
}

/// Transfer rows for the `observed` buses obtained through the Kron-reduced
/// network: `V_A = Ỹ⁻¹ (I_A − Y_AB Y_BB⁻¹ I_B)` with slack buses grounded.
/// Rows of unobserved buses are zero. Needs a single slack-connected island.
pub fn kron_transfer(topo: &GridTopology, observed: &[BusId]) -> Result<DMatrix<Complex64>> {
    let islands = topo.islands();
    if islands.len() != 1 || islands[0].kind != IslandKind::SlackConnected {
        return Err(Error::InvalidParameter(
            "reduced model needs one slack-connected island".into(),
        ));
    }
    let y = topo.admittance()?;
    let free = topo.non_slack_buses();
    let grounded = y.submatrix(&free)?;
    let mut obs: Vec<BusId> = observed.iter().copied().filter(|b| !topo.is_slack(*b)).collect();
    obs.sort();
    obs.dedup();
    let hidden: Vec<BusId> = free.iter().copied().filter(|b| !obs.contains(b)).collect();
    let m = topo.bus_count();
    let mut t = DMatrix::<Complex64>::zeros(m, m);
    if obs.is_empty() {
        return Ok(t);
    }
    let reduced = kron_reduce(&grounded, &obs)?;
    let n_a = obs.len();
    let z_red = solve_complex(reduced.values(), &DMatrix::identity(n_a, n_a)).ok_or_else(|| {
        Error::SingularBlock {
            block: "reduced",
            buses: obs.clone(),
        }
    })?;
    let sub = |rows: &[BusId], cols: &[BusId]| -> Result<DMatrix<Complex64>> {
        let r: Vec<usize> = rows.iter().map(|b| grounded.position(*b).unwrap()).collect();
        let c: Vec<usize> = cols.iter().map(|b| grounded.position(*b).unwrap()).collect();
        Ok(grounded.values().select_rows(&r).select_columns(&c))
    };
    // equivalent injections at the observed buses: I_A − Y_AB Y_BB⁻¹ I_B
    let mut equiv = DMatrix::<Complex64>::zeros(n_a, m);
    for (a, bus) in obs.iter().enumerate() {
        equiv[(a, bus.index())] = Complex64::new(1.0, 0.0);
    }
    if !hidden.is_empty() {
        let y_bb = sub(&hidden, &hidden)?;
        let y_ba = sub(&hidden, &obs)?;
        let k = solve_complex(&y_bb, &y_ba)
            .ok_or_else(|| Error::SingularBlock {
                block: "eliminated",
                buses: hidden.clone(),
            })?
            .transpose();
        for (b, bus) in hidden.iter().enumerate() {
            for a in 0..n_a {
                equiv[(a, bus.index())] = -k[(a, b)];
            }
        }
    }
    let rows = z_red * equiv;
    for (a, bus) in obs.iter().enumerate() {
        t.set_row(bus.index(), &rows.row(a));
    }
    Ok(t)
}

/// Real loading matrix `H` with `x = H z`, `z ~ N(0, I)` of length `2M`:
/// the first `M` entries drive the real parts of the injections, the last `M`
/// the imaginary parts, each with variance `injection_variance[i] / 2`.
pub fn loading_matrix(
    transfer: &DMatrix<Complex64>,
    layout: &CoordLayout,
    injection_variance: &[f64],
) -> Result<DMatrix<f64>> {
    let m = transfer.ncols();
    if injection_variance.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            found: injection_variance.len(),
        });
    }
    if let Some(c) = layout.coords().iter().find(|c| c.bus.0 == 0 || c.bus.0 > m) {
        return Err(Error::BusOutOfRange {
            bus: c.bus,
            bus_count: m,
        });
    }
    let scale: Vec<f64> = injection_variance.iter().map(|v| (v / 2.0).sqrt()).collect();
    let mut h = DMatrix::<f64>::zeros(layout.dim(), 2 * m);
    for (k, c) in layout.coords().iter().enumerate() {
        let r = c.bus.index();
        for j in 0..m {
            let z = transfer[(r, j)] * scale[j];
            match c.part {
                Part::Re | Part::Mag => {
                    h[(k, j)] = z.re;
                    h[(k, m + j)] = -z.im;
                }
                Part::Im => {
                    h[(k, j)] = z.im;
                    h[(k, m + j)] = z.re;
                }
            }
        }
    }
    Ok(h)
}

fn model_from_loading(h: &DMatrix<f64>, noise_variance: f64) -> Result<GaussianModel> {
    let mut cov = h * h.transpose();
    cov = (&cov + cov.transpose()) * 0.5;
    for k in 0..cov.nrows() {
        cov[(k, k)] += noise_variance;
    }
    GaussianModel::zero_mean(cov)
}

/// Zero-mean model of the stacked voltage deviations under independent
/// complex injections and white measurement noise.
pub fn model_from_grid(
    topo: &GridTopology,
    layout: &CoordLayout,
    injection_variance: &[f64],
    noise_variance: f64,
) -> Result<GaussianModel> {
    let h = loading_matrix(&transfer_matrix(topo)?, layout, injection_variance)?;
    model_from_loading(&h, noise_variance)
}

/// Model over the buses of `layout` computed from the Kron-reduced network.
pub fn reduced_model(
    topo: &GridTopology,
    layout: &CoordLayout,
    injection_variance: &[f64],
    noise_variance: f64,
) -> Result<GaussianModel> {
    let t = kron_transfer(topo, &layout.buses())?;
    let h = loading_matrix(&t, layout, injection_variance)?;
    model_from_loading(&h, noise_variance)
}

/// Conditional covariance `Σ_II − Σ_IJ Σ_JJ⁻¹ Σ_JI`.
pub fn conditional_cov(sigma: &DMatrix<f64>, i_set: &[usize], j_set: &[usize]) -> Result<DMatrix<f64>> {
    let d = sigma.nrows();
    if sigma.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: sigma.ncols(),
        });
    }
    if let Some(bad) = i_set.iter().chain(j_set).find(|k| **k >= d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: bad + 1,
        });
    }
    let s_ii = sigma.select_rows(i_set).select_columns(i_set);
    if j_set.is_empty() {
        return Ok(s_ii);
    }
    let s_jj = sigma.select_rows(j_set).select_columns(j_set);
    let s_ji = sigma.select_rows(j_set).select_columns(i_set);
    let (l, _) = factor(&s_jj).ok_or_else(|| Error::SingularConditioning {
        coords: j_set.to_vec(),
    })?;
    let w = l
        .solve_lower_triangular(&s_ji)
        .ok_or_else(|| Error::SingularConditioning {
            coords: j_set.to_vec(),
        })?;
    let c = s_ii - w.transpose() * w;
    Ok((&c + c.transpose()) * 0.5)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairCorrelation {
    /// Largest |correlation| between a coordinate of `i` and one of `j`,
    /// conditioned on every other coordinate.
    pub score: f64,
    /// Every conditional variance of both buses is at or below the floor.
    pub degenerate: bool,
}

/// Conditional correlation score of buses `i` and `j` given all other
/// coordinates of `layout`. A coordinate with non-positive conditional
/// variance contributes zero.
pub fn conditional_corr(
    sigma: &DMatrix<f64>,
    layout: &CoordLayout,
    i: BusId,
    j: BusId,
    variance_floor: f64,
) -> Result<PairCorrelation> {
    if sigma.nrows() != layout.dim() {
        return Err(Error::DimensionMismatch {
            expected: layout.dim(),
            found: sigma.nrows(),
        });
    }
    let ci = layout.coords_of(i);
    let cj = layout.coords_of(j);
    if ci.is_empty() || cj.is_empty() {
        let bus = if ci.is_empty() { i } else { j };
        return Err(Error::InvalidParameter(format!("bus {bus} is not in the layout")));
    }
    if i == j {
        return Ok(PairCorrelation {
            score: 1.0,
            degenerate: false,
        });
    }
    let pair: Vec<usize> = ci.iter().chain(cj.iter()).copied().collect();
    let rest: Vec<usize> = (0..layout.dim()).filter(|k| !pair.contains(k)).collect();
    let c = conditional_cov(sigma, &pair, &rest)?;
    let ni = ci.len();
    let degenerate = (0..pair.len()).all(|k| c[(k, k)] <= variance_floor);
    let mut score: f64 = 0.0;
    for a in 0..ni {
        for b in ni..pair.len() {
            let v = c[(a, a)] * c[(b, b)];
            if v > 0.0 {
                score = score.max((c[(a, b)] / v.sqrt()).abs());
            }
        }
    }
    Ok(PairCorrelation {
        score: score.min(1.0),
        degenerate,
    })
}

/// Change-point prior weights `π(k)` over a window of `N` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimationPrior {
    weights: Vec<f64>,
}

impl EstimationPrior {
    /// `π(k) = ρ(1−ρ)^{k−1}`, `k = 1..=n`.
    pub fn geometric(rho: f64, n: usize) -> Result<Self> {
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::InvalidParameter(format!("rho {rho} outside (0, 1]")));
        }
        let l = (-rho).ln_1p();
        let weights = (0..n).map(|k| rho * (k as f64 * l).exp()).collect();
        Self::from_weights(weights)
    }

    /// Arbitrary nonnegative weights with positive total.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let bad = weights.iter().any(|w| !w.is_finite() || *w < 0.0);
        if bad || !weights.iter().any(|w| *w > 0.0) {
            return Err(Error::InvalidParameter(
                "prior weights must be finite, nonnegative and not all zero".into(),
            ));
        }
        Ok(EstimationPrior { weights })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

#[derive(Clone, Debug)]
pub struct PostOutageEstimate {
    pub mean: DVector<f64>,
    /// Weighted covariance plus `ridge · I`.
    pub cov: DMatrix<f64>,
    pub ridge: f64,
    /// `(Σ w)² / Σ w²` of the per-sample weights.
    pub effective_samples: f64,
}

/// Weighted estimate of the post-change mean and covariance. Sample `n`
/// carries weight `Σ_{k≤n} π(k)`, which collapses the double sums over the
/// change time `k` and the samples `n ≥ k`.
pub fn estimate_weighted(window: &[DVector<f64>], prior: &EstimationPrior) -> Result<PostOutageEstimate> {
    let n = window.len();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    if prior.weights.len() < n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: prior.weights.len(),
        });
    }
    let d = window[0].len();
    if let Some(x) = window.iter().find(|x| x.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: x.len(),
        });
    }
    let mut w = Vec::with_capacity(n);
    let mut acc = 0.0;
    for p in &prior.weights[..n] {
        acc += p;
        w.push(acc);
    }
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidParameter("prior weights sum to zero".into()));
    }
    // accumulate offsets from the first sample so a constant window is exact
    let origin = &window[0];
    let mut shift = DVector::zeros(d);
    for (x, wn) in window.iter().zip(&w) {
        shift.axpy(*wn, &(x - origin), 1.0);
    }
    let mean = origin + shift / total;
    let mut cov = DMatrix::zeros(d, d);
    for (x, wn) in window.iter().zip(&w) {
        let r = x - &mean;
        cov.ger(*wn, &r, &r, 1.0);
    }
    cov /= total;
    let ridge = ridge_epsilon(&cov);
    for k in 0..d {
        cov[(k, k)] += ridge;
    }
    let sq: f64 = w.iter().map(|v| v * v).sum();
    Ok(PostOutageEstimate {
        mean,
        cov,
        ridge,
        effective_samples: total * total / sq,
    })
}

/// `(μ̂₁, Σ̂₁)` with the ridge applied.
pub fn estimate_post_outage(
    window: &[DVector<f64>],
    prior: &EstimationPrior,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let e = estimate_weighted(window, prior)?;
    Ok((e.mean, e.cov))
}

/// Admittance matrix of the Kron-reduced grounded network over `keep`.
pub fn grounded_reduction(topo: &GridTopology, keep: &[BusId]) -> Result<AdmittanceMatrix> {
    let y = topo.admittance()?;
    kron_reduce(&y.submatrix(&topo.non_slack_buses())?, keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{feeders, Branch, BranchKey};
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn scalar(mu: f64, var: f64) -> GaussianModel {
        GaussianModel::new(DVector::from_element(1, mu), DMatrix::from_element(1, 1, var)).unwrap()
    }

    fn naive_log_density(mu: &DVector<f64>, s: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
        let inv = s.clone().try_inverse().unwrap();
        let r = x - mu;
        let d = mu.len() as f64;
        -0.5 * (d * (2.0 * PI).ln() + s.determinant().ln() + (r.transpose() * inv * &r)[(0, 0)])
    }

    #[test]
    fn layout_order_and_labels() {
        let l = CoordLayout::new([
            (BusId(5), ChannelKind::Magnitude),
            (BusId(2), ChannelKind::Phasor),
            (BusId(3), ChannelKind::Phasor),
        ])
        .unwrap();
        let labels: Vec<String> = l.coords().iter().map(|c| c.to_string()).collect();
        assert_eq!(labels, ["2.re", "3.re", "5.mag", "2.im", "3.im"]);
        assert_eq!(l.coords_of(BusId(3)), vec![1, 4]);
        for c in l.coords() {
            assert_eq!(c.to_string().parse::<Coord>().unwrap(), *c);
        }
        let sub = CoordLayout::magnitude([BusId(2), BusId(5)]).unwrap();
        assert_eq!(sub.indices_in(&l).unwrap(), vec![0, 2]);
    }

    #[test]
    fn log_density_scalar_cases() {
        let m = scalar(0.0, 1.0);
        assert_relative_eq!(m.log_density(&[0.0]).unwrap(), -0.5 * (2.0 * PI).ln(), epsilon = 1e-15);
        assert!(matches!(m.log_density(&[0.0, 1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn log_density_at_mean_and_against_inverse() {
        let s = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, -0.4, 0.3, 1.5, 0.2, -0.4, 0.2, 1.1]);
        let mu = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let m = GaussianModel::new(mu.clone(), s.clone()).unwrap();
        let at_mean = -0.5 * (2.0 * PI * s.clone()).determinant().ln();
        assert_relative_eq!(m.log_density(mu.as_slice()).unwrap(), at_mean, epsilon = 1e-12);
        let x = DVector::from_vec(vec![1.3, 0.2, -0.7]);
        assert_relative_eq!(
            m.log_density(x.as_slice()).unwrap(),
            naive_log_density(&mu, &s, &x),
            epsilon = 1e-10
        );
    }

    #[test]
    fn scalar_kl_values() {
        let f = scalar(0.0, 1.0);
        let g = scalar(1.0, 1.0);
        assert_relative_eq!(kl_divergence(&f, &g).unwrap(), 0.5, epsilon = 1e-15);
        assert_eq!(kl_divergence(&f, &f).unwrap(), 0.0);
        let a = scalar(0.0, 1.0);
        let b = scalar(0.0, 3.0);
        // 0.5 (σf²/σg² − 1 + ln σg²/σf²)
        assert_relative_eq!(
            kl_divergence(&a, &b).unwrap(),
            0.5 * (1.0 / 3.0 - 1.0 + 3f64.ln()),
            epsilon = 1e-15
        );
        assert!((kl_divergence(&a, &b).unwrap() - kl_divergence(&b, &a).unwrap()).abs() > 0.1);
    }

    #[test]
    fn schur_complement_example() {
        let s = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0]);
        let c = conditional_cov(&s, &[0, 1], &[2]).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.5]);
        assert_relative_eq!(c, expected, epsilon = 1e-15);

        let block = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 5.0]);
        let c = conditional_cov(&block, &[0, 1], &[2]).unwrap();
        assert_relative_eq!(c, block.view((0, 0), (2, 2)).into_owned(), epsilon = 1e-15);
    }

    #[test]
    fn two_bus_voltage_variance_equals_injection_variance() {
        let topo = GridTopology::new(
            2,
            vec![Branch::new(1, 2, Complex64::new(1.0, 0.0))],
            [BusId(1)],
            [],
        )
        .unwrap();
        let layout = CoordLayout::full_phasor(&topo);
        let m = model_from_grid(&topo, &layout, &[1.0, 1.0], 0.0).unwrap();
        assert_relative_eq!(m.cov()[(0, 0)] + m.cov()[(1, 1)], 1.0, epsilon = 1e-15);
        assert_relative_eq!(m.cov()[(0, 1)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn cut_path_end_becomes_noise_only() {
        let topo = feeders::bundled("path3").unwrap();
        let post = topo.apply_outage(&[BranchKey::from_pair(2, 3)]).unwrap();
        let layout = CoordLayout::full_phasor(&topo);
        let noise = 1e-6;
        let m = model_from_grid(&post, &layout, &[1.0; 3], noise).unwrap();
        let b3 = layout.coords_of(BusId(3));
        let b2 = layout.coords_of(BusId(2));
        for &a in &b3 {
            for k in 0..layout.dim() {
                let want = if a == k { noise } else { 0.0 };
                assert_eq!(m.cov()[(a, k)], want);
            }
        }
        // bus 2 still hangs off the slack
        assert!(m.cov()[(b2[0], b2[0])] > 0.1);
    }

    #[test]
    fn empty_outage_keeps_covariance() {
        let topo = feeders::bundled("loop8").unwrap();
        let layout = CoordLayout::full_phasor(&topo);
        let a = model_from_grid(&topo, &layout, &[1.0; 8], 1e-3).unwrap();
        let b = model_from_grid(&topo.apply_outage(&[]).unwrap(), &layout, &[1.0; 8], 1e-3).unwrap();
        assert_eq!(a.cov(), b.cov());
    }

    #[test]
    fn kron_model_matches_direct_marginal() {
        let topo = feeders::bundled("loop8").unwrap();
        let full = CoordLayout::full_phasor(&topo);
        let sub = CoordLayout::phasor([2, 4, 5, 8].map(BusId)).unwrap();
        let inj = [1.0, 0.5, 1.5, 1.0, 2.0, 0.7, 1.0, 1.2];
        let direct = model_from_grid(&topo, &full, &inj, 1e-4)
            .unwrap()
            .marginal(&sub.indices_in(&full).unwrap())
            .unwrap();
        let reduced = reduced_model(&topo, &sub, &inj, 1e-4).unwrap();
        assert_relative_eq!(direct.cov(), reduced.cov(), epsilon = 1e-12);
    }

    #[test]
    fn estimator_hand_values() {
        // π = (1/2, 1/4, 1/8); denominator 17/8; mean 37/17; variance 3026/4913
        let window: Vec<DVector<f64>> = [1.0, 2.0, 3.0].iter().map(|v| DVector::from_element(1, *v)).collect();
        let prior = EstimationPrior::geometric(0.5, 3).unwrap();
        let e = estimate_weighted(&window, &prior).unwrap();
        assert_relative_eq!(e.mean[0], 37.0 / 17.0, epsilon = 1e-12);
        assert_relative_eq!(e.cov[(0, 0)] - e.ridge, 3026.0 / 4913.0, epsilon = 1e-12);
        assert_relative_eq!(e.ridge, 1e-8 * 3026.0 / 4913.0, epsilon = 1e-20);
    }

    #[test]
    fn estimator_constant_window_is_ridge_only() {
        let c = DVector::from_vec(vec![1.5, -2.0]);
        let window = vec![c.clone(); 6];
        let prior = EstimationPrior::geometric(0.1, 6).unwrap();
        let (mu, s) = estimate_post_outage(&window, &prior).unwrap();
        assert_relative_eq!(mu, c, epsilon = 1e-15);
        assert_eq!(s[(0, 1)], 0.0);
        assert!(s[(0, 0)] > 0.0 && s[(0, 0)] == s[(1, 1)]);
        assert!(GaussianModel::new(mu, s).is_ok());
    }

    #[test]
    fn estimator_rejects_bad_input() {
        let one = vec![DVector::from_element(1, 1.0)];
        let prior = EstimationPrior::geometric(0.5, 3).unwrap();
        assert!(matches!(estimate_weighted(&one, &prior), Err(Error::TooFewSamples { .. })));
        assert!(EstimationPrior::from_weights(vec![0.0, 0.0]).is_err());
        assert!(EstimationPrior::from_weights(vec![1.0, -0.1]).is_err());
    }

    #[test]
    fn conditional_corr_self_pair_is_one() {
        let topo = feeders::bundled("path3").unwrap();
        let layout = CoordLayout::full_phasor(&topo);
        let m = model_from_grid(&topo, &layout, &[1.0; 3], 0.0).unwrap();
        let s = conditional_corr(m.cov(), &layout, BusId(2), BusId(2), 0.0).unwrap();
        assert_eq!(s.score, 1.0);
    }
}
