use nalgebra::{DMatrix, DVector};
use outage_core::detector::{run_detector, DetectionRule, DetectorConfig, DetectorState, FusionPolicy, GeometricPrior, Mode};
use outage_core::gaussmodel::{
    estimate_weighted, model_from_grid, reduced_model, CoordLayout, EstimationPrior, GaussianModel,
};
use outage_core::grid::feeders::bundled;
use outage_core::grid::{BranchKey, BusId};
use outage_core::localizer::{
    all_pairs, bootstrap_thresholds, estimate_admittance, observed_branches, rank_changes, scan_pairs, Thresholds,
};
use outage_core::rng::{substream, StreamKind};
use outage_core::simgen::{generate, sample_outage_time, Scenario, StreamGenerator};
use rand::Rng;
use rand_distr::StandardNormal;

fn sample_cov(xs: &[DVector<f64>]) -> DMatrix<f64> {
    let n = xs.len() as f64;
    let d = xs[0].len();
    let mean = xs.iter().fold(DVector::zeros(d), |a, x| a + x) / n;
    xs.iter().fold(DMatrix::zeros(d, d), |a, x| {
        let r = x - &mean;
        a + &r * r.transpose()
    }) / n
}

fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

#[test]
fn brute_force_double_sum_matches_weighted_estimator() {
    let mut rng = substream(11, StreamKind::Replication, 0, 0);
    for _ in 0..50 {
        let n = rng.random_range(2..=10);
        let d = rng.random_range(1..=3);
        let xs: Vec<DVector<f64>> = (0..n)
            .map(|_| DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let pi: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let est = estimate_weighted(&xs, &EstimationPrior::from_weights(pi.clone()).unwrap()).unwrap();
        // Σ_k π(k) Σ_{n≥k} over change times k and samples n
        let mut den = 0.0;
        let mut num = DVector::zeros(d);
        for k in 0..n {
            for x in &xs[k..] {
                den += pi[k];
                num += x * pi[k];
            }
        }
        let mu = num / den;
        let mut cov = DMatrix::zeros(d, d);
        for k in 0..n {
            for x in &xs[k..] {
                let r = x - &mu;
                cov += &r * r.transpose() * pi[k];
            }
        }
        cov /= den;
        assert!((&est.mean - &mu).amax() <= 1e-12);
        let unridged = &est.cov - DMatrix::identity(d, d) * est.ridge;
        assert!((unridged - cov).amax() <= 1e-12);
    }
}

#[test]
fn geometric_estimator_converges_to_the_generating_model() {
    let sigma = DMatrix::from_row_slice(3, 3, &[2.0, 0.6, -0.3, 0.6, 1.0, 0.2, -0.3, 0.2, 0.5]);
    let mu = DVector::from_column_slice(&[0.5, -1.0, 2.0]);
    let truth = GaussianModel::new(mu.clone(), sigma.clone()).unwrap();
    let mut rng = substream(5, StreamKind::Replication, 1, 0);
    let xs: Vec<DVector<f64>> = (0..20_000)
        .map(|_| {
            let z = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
            truth.transform_standard(&z)
        })
        .collect();
    let est = estimate_weighted(&xs, &EstimationPrior::geometric(1e-2, xs.len()).unwrap()).unwrap();
    assert!(rel_frobenius(&est.cov, &sigma) < 0.03);
    assert!((&est.mean - &mu).amax() < 0.05);
}

#[test]
fn generated_pre_outage_covariance_matches_the_model() {
    let topo = bundled("loop8").unwrap();
    let frames = 100_000;
    let s = Scenario::basic(topo.clone(), vec![], frames, frames, 3);
    let gen = StreamGenerator::new(&s).unwrap();
    let xs: Vec<DVector<f64>> = (1..=frames).map(|t| gen.sample(t)).collect();
    let model = model_from_grid(&topo, gen.layout(), &s.injection_variance, s.noise_variance).unwrap();
    assert!(rel_frobenius(&sample_cov(&xs), model.cov()) < 0.02);
    // mean within 3σ/√N per coordinate
    let n = xs.len() as f64;
    let mean = xs.iter().fold(DVector::zeros(xs[0].len()), |a, x| a + x) / n;
    for k in 0..mean.len() {
        assert!(mean[k].abs() <= 3.0 * (model.cov()[(k, k)] / n).sqrt(), "coordinate {k}");
    }
}

#[test]
fn geometric_outage_times_have_mean_one_over_rho() {
    let prior = GeometricPrior::new(0.04).unwrap();
    let n = 100_000u64;
    let mean = (0..n).map(|s| sample_outage_time(&prior, s) as f64).sum::<f64>() / n as f64;
    assert!((mean - 25.0).abs() < 0.02 * 25.0, "mean {mean}");
}

#[test]
fn magnitude_channels_never_detect_sooner_in_most_seeds() {
    let topo = bundled("loop8").unwrap();
    let out = vec![BranchKey::from_pair(4, 7)];
    let phasor = CoordLayout::full_phasor(&topo);
    let magnitude = CoordLayout::magnitude(topo.non_slack_buses()).unwrap();
    let inj = vec![1.0; 8];
    let post = topo.apply_outage(&out).unwrap();
    let models = |l: &CoordLayout| {
        (
            model_from_grid(&topo, l, &inj, 1e-6).unwrap(),
            model_from_grid(&post, l, &inj, 1e-6).unwrap(),
        )
    };
    let (gp, fp) = models(&phasor);
    let (gm, fm) = models(&magnitude);
    let cfg = DetectorConfig {
        rule: DetectionRule::new(1e-6).unwrap(),
        prior: GeometricPrior::new(0.04).unwrap(),
        mode: Mode::KnownF,
        adaptive: Default::default(),
        fusion: FusionPolicy::CompleteFrame,
    };
    let seeds = 200;
    let mut ok = 0;
    for seed in 0..seeds {
        let stream = generate(&Scenario::basic(topo.clone(), out.clone(), 21, 160, seed)).unwrap();
        let tp = run_detector(&stream, &gp, Some(&fp), &cfg).unwrap().tau;
        let mag = stream.project(&magnitude).unwrap();
        let tm = run_detector(&mag, &gm, Some(&fm), &cfg).unwrap().tau;
        if tm.unwrap_or(u64::MAX) >= tp.unwrap_or(u64::MAX) {
            ok += 1;
        }
    }
    assert!(ok as f64 >= 0.9 * seeds as f64, "{ok}/{seeds}");
}

#[test]
fn adaptive_posterior_stays_low_without_a_change() {
    let topo = bundled("path3").unwrap();
    let layout = CoordLayout::full_phasor(&topo);
    let g = model_from_grid(&topo, &layout, &[1.0; 3], 0.0).unwrap();
    // the odds reach 1 within T steps with probability of order Tρ
    let prior = GeometricPrior::new(1e-6).unwrap();
    let rule = DetectionRule::new(1e-3).unwrap();
    let seeds = 200;
    let steps = 10_000;
    let mut low = 0;
    for seed in 0..seeds {
        let gen = StreamGenerator::new(&Scenario::basic(topo.clone(), vec![], steps, steps, seed)).unwrap();
        let mut s = DetectorState::adaptive(prior, Default::default(), Some(&layout));
        let mut max_p: f64 = 0.0;
        for t in 1..steps {
            s.adaptive_step(gen.sample(t).as_slice(), &g).unwrap();
            s.decide(&rule);
            max_p = max_p.max(s.posterior());
        }
        if max_p < 0.5 {
            low += 1;
        }
    }
    assert!(low * 100 >= 99 * seeds, "{low}/{seeds}");
}

#[test]
fn sampled_covariances_flag_the_same_branches() {
    let topo = bundled("loop8").unwrap();
    let out = vec![BranchKey::from_pair(3, 4), BranchKey::from_pair(2, 6)];
    let layout = CoordLayout::full_phasor(&topo);
    let pairs = observed_branches(&topo, &layout);
    let history = 5000;
    let post_n = 500;
    let noise = 1e-6;
    for seed in 0..3 {
        let s = Scenario::basic(topo.clone(), out.clone(), history + 1, history + post_n, seed);
        let gen = StreamGenerator::new(&s).unwrap();
        let pre: Vec<DVector<f64>> = (1..=history).map(|t| gen.sample(t)).collect();
        let post: Vec<DVector<f64>> = (history + 1..=history + post_n).map(|t| gen.sample(t)).collect();
        let th = bootstrap_thresholds(&pre, &layout, &pairs, &Default::default(), 1.5 * noise).unwrap();
        let rep = scan_pairs(&sample_cov(&pre), &sample_cov(&post), &layout, &pairs, &th).unwrap();
        let mut want = out.clone();
        want.sort();
        assert_eq!(rep.flagged, want, "seed {seed}, thresholds {th:?}");
    }
}

#[test]
fn partial_coverage_ranks_the_pair_around_the_open_branch_first() {
    let topo = bundled("loop8").unwrap();
    let layout = CoordLayout::phasor([2, 4, 5, 8].map(BusId)).unwrap();
    let post = topo.apply_outage(&[BranchKey::from_pair(2, 6)]).unwrap();
    let inj = vec![1.0; 8];
    let g = reduced_model(&topo, &layout, &inj, 1e-12).unwrap();
    let f = reduced_model(&post, &layout, &inj, 1e-12).unwrap();
    let ranked = rank_changes(g.cov(), f.cov(), &layout, &all_pairs(&layout), None).unwrap();
    assert_eq!(ranked[0].key(), BranchKey::from_pair(2, 5));
    assert!(ranked[0].delta > ranked[1].delta);
    // the zero test needs both endpoints metered
    let th = Thresholds::exact();
    let rep = scan_pairs(g.cov(), f.cov(), &layout, &observed_branches(&topo, &layout), &th).unwrap();
    assert!(rep.flagged.is_empty());
}

#[test]
fn admittance_fit_survives_one_percent_noise() {
    let topo = bundled("loop8").unwrap();
    let cut = BranchKey::from_pair(6, 7);
    let mut s = Scenario::basic(topo.clone(), vec![cut], 2001, 4000, 9);
    s.noise_variance = 1e-6;
    s.record_currents = true;
    s.current_noise_variance = 1e-4;
    let stream = generate(&s).unwrap();
    let w0 = stream.kcl_window(1..=2000).unwrap();
    let w1 = stream.kcl_window(2001..=4000).unwrap();
    let est = estimate_admittance(&w0, &w1, &topo, &[cut], 0.1).unwrap();
    for e in &est {
        let y = topo.branch(e.branch).unwrap().admittance;
        assert!((e.pre - y).norm() < 0.05 * y.norm(), "{}: {} vs {}", e.branch, e.pre, y);
        assert_eq!(e.likely_out, e.branch == cut, "{}", e.branch);
    }
    assert!(est.iter().any(|e| e.branch == cut));
}
