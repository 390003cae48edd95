//! End-to-end acceptance checks. Each test prints one pass/fail line with
//! the quantities it verified; heavy Monte Carlo runs are shared across
//! tests through lazily initialized fixtures.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};

use spatial_plm::config::ExperimentConfig;
use spatial_plm::dgp::{gen_confounder_surface, gen_fixed_confounder, FixedConfounderConfig};
use spatial_plm::estimators::{fit_gls_known, fit_ols, fit_rsr};
use spatial_plm::geometry::{sample_gaussian_line, sample_uniform_square};
use spatial_plm::harness::{
    run_experiment, run_lemma_diagnostics, run_trend, DiagRecord, ExperimentReport, LemmaKind,
};
use spatial_plm::kernels::{covariance_matrix, KernelFamily, KernelSpec};
use spatial_plm::linalg::{spd_factor, top_eigenvalues};
use spatial_plm::mercer::hermite_eigensystem;
use spatial_plm::oracles::ols_asymptotic_bias;
use spatial_plm::report::write_report;
use spatial_plm::rng::RngStream;
use spatial_plm::smoothers::thinplate_basis;

const SEED: u64 = 20260826;

fn verdict(criterion: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn within_budget(elapsed: Duration, budget_secs: u64) -> String {
    format!("{:.0?} (budget {}s)", elapsed, budget_secs)
}

struct TimedReport {
    report: ExperimentReport,
    elapsed: Duration,
}

fn run_timed(json: &str) -> TimedReport {
    let cfg = ExperimentConfig::from_json(json).expect("valid config");
    let t = Instant::now();
    let report = run_experiment(&cfg).expect("run completes");
    TimedReport { report, elapsed: t.elapsed() }
}

fn table1() -> &'static TimedReport {
    static CELL: OnceLock<TimedReport> = OnceLock::new();
    CELL.get_or_init(|| {
        run_timed(
            r#"{"scenario":"fixed_confounder","seed":20260826,"replications":300,
                "estimators":["ols","gls_profile","gam","gam_fx","spatial_plus"],
                "n":2000}"#,
        )
    })
}

fn table2() -> &'static TimedReport {
    static CELL: OnceLock<TimedReport> = OnceLock::new();
    CELL.get_or_init(|| {
        run_timed(
            r#"{"scenario":"random_confounder","seed":20260826,"replications":300,
                "estimators":["ols","gls_profile","gam","gam_fx","spatial_plus"],
                "n":2000}"#,
        )
    })
}

fn summary_of<'r>(report: &'r ExperimentReport, est: &str) -> &'r spatial_plm::harness::SummaryRow {
    report
        .summaries
        .iter()
        .find(|s| s.estimator == est)
        .unwrap_or_else(|| panic!("no summary row for {est}"))
}

// ---------------------------------------------------------------------------
// 1. RSR point estimate coincides with OLS
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_rsr_equals_ols() {
    let t = Instant::now();
    let mut worst = 0.0f64;
    for i in 0..1000u64 {
        let mut rng = RngStream::new(SEED, i);
        let n = 30 + (rng.uniform(0.0, 1.0) * 470.0) as usize;
        let rank = 5 + (rng.uniform(0.0, 1.0) * 20.0) as usize;
        let locations = sample_uniform_square(n, 0.0, 10.0, &mut rng).unwrap();
        let basis = thinplate_basis(&locations, rank).unwrap();
        let mut x = Array2::ones((n, 2));
        x.column_mut(0).assign(&Array1::from(rng.normal_vec(n)));
        let y = Array1::from(rng.normal_vec(n));
        let ols = fit_ols(x.view(), y.view()).unwrap();
        let rsr = fit_rsr(x.view(), y.view(), &basis).unwrap();
        worst = worst.max((ols.beta_hat - rsr.beta_hat).abs());
    }
    let elapsed = t.elapsed();
    verdict(
        "1 (RSR = OLS)",
        worst <= 1e-8 && elapsed.as_secs() < 60,
        &format!(
            "max |beta_RSR - beta_OLS| = {worst:.2e} over 1000 instances in {}",
            within_budget(elapsed, 60)
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. GLS point estimate is invariant to rescaling Sigma
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_gls_scaling_identity() {
    let mut worst = 0.0f64;
    for i in 0..1000u64 {
        let mut rng = RngStream::new(SEED + 1, i);
        let n = 20 + (rng.uniform(0.0, 1.0) * 50.0) as usize;
        let locations = sample_uniform_square(n, 0.0, 5.0, &mut rng).unwrap();
        let gamma2 = rng.uniform(0.2, 3.0);
        let sigma2 = rng.uniform(0.2, 3.0);
        let sigma0_2 = rng.uniform(0.2, 3.0);
        let scale = rng.uniform(0.3, 2.0);
        let c = sigma0_2 / sigma2;
        let spec_a = KernelSpec::new(KernelFamily::Exponential, gamma2, scale, sigma2).unwrap();
        let spec_b =
            KernelSpec::new(KernelFamily::Exponential, gamma2 * c, scale, sigma0_2).unwrap();
        let fa = spd_factor(&covariance_matrix(&spec_a, &locations).unwrap()).unwrap();
        let fb = spd_factor(&covariance_matrix(&spec_b, &locations).unwrap()).unwrap();
        let mut x = Array2::ones((n, 2));
        x.column_mut(0).assign(&Array1::from(rng.normal_vec(n)));
        let y = Array1::from(rng.normal_vec(n));
        let ba = fit_gls_known(x.view(), y.view(), &fa).unwrap().beta_hat;
        let bb = fit_gls_known(x.view(), y.view(), &fb).unwrap().beta_hat;
        worst = worst.max((ba - bb).abs());
    }
    verdict(
        "2 (GLS scaling identity)",
        worst <= 1e-10,
        &format!("max |beta(S) - beta(cS)| = {worst:.2e} over 1000 instances"),
    );
}

// ---------------------------------------------------------------------------
// 3. OLS bias matches the moment plug-in under the fixed confounder
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_ols_bias_matches_plugin() {
    let t = Instant::now();
    let fc = FixedConfounderConfig::default();
    // Same stream layout as the harness: surface on stream 0, replication
    // r generates from substream 0 of stream r.
    let mut srng = RngStream::new(SEED, 0);
    let surface = gen_confounder_surface(&fc, &mut srng).unwrap();
    let reps = 300;
    let mut diffs = Vec::with_capacity(reps);
    let mut biases = Vec::with_capacity(reps);
    for r in 1..=reps {
        let mut rng = RngStream::new(SEED, r as u64).substream(0);
        let data = gen_fixed_confounder(&fc, Some(&surface), &mut rng).unwrap();
        let mut x = Array2::ones((data.n(), 2));
        x.column_mut(0).assign(&data.x);
        let bias = fit_ols(x.view(), data.y.view()).unwrap().beta_hat - data.beta_true;
        let plugin = ols_asymptotic_bias(data.x.view(), data.g_true.view()).unwrap();
        biases.push(bias);
        diffs.push(bias - plugin);
    }
    let mean_bias = biases.iter().sum::<f64>() / reps as f64;
    let mean_diff = diffs.iter().sum::<f64>() / reps as f64;
    let sd_diff = (diffs.iter().map(|d| (d - mean_diff).powi(2)).sum::<f64>()
        / (reps - 1) as f64)
        .sqrt();
    let mc_se = sd_diff / (reps as f64).sqrt();
    let elapsed = t.elapsed();
    verdict(
        "3 (OLS bias = cov(X,g)/var(X))",
        mean_diff.abs() <= 4.0 * mc_se
            && (0.3..=0.6).contains(&mean_bias)
            && elapsed.as_secs() < 600,
        &format!(
            "mean bias {mean_bias:.4} in [0.3, 0.6]; |mean(bias - plugin)| = {:.2e} vs 4 MC SE = {:.2e}; {}",
            mean_diff.abs(),
            4.0 * mc_se,
            within_budget(elapsed, 600)
        ),
    );
}

// ---------------------------------------------------------------------------
// 4. Fixed-confounder bias and coverage table
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_fixed_confounder_table() {
    let run = table1();
    let r = &run.report;
    assert!(
        r.failure_fraction() <= 0.05,
        "failures: {:?}",
        r.errors.iter().take(3).collect::<Vec<_>>()
    );
    let ols = summary_of(r, "ols");
    let checks = [
        ("ols coverage <= 0.05", ols.coverage <= 0.05),
        ("gam_fx coverage >= 0.85", summary_of(r, "gam_fx").coverage >= 0.85),
        ("spatial_plus coverage >= 0.85", summary_of(r, "spatial_plus").coverage >= 0.85),
        ("|ols bias| >= 0.3", ols.mean_bias.abs() >= 0.3),
        ("|gls_profile bias| <= 0.05", summary_of(r, "gls_profile").mean_bias.abs() <= 0.05),
        ("|gam bias| <= 0.05", summary_of(r, "gam").mean_bias.abs() <= 0.05),
        ("|gam_fx bias| <= 0.05", summary_of(r, "gam_fx").mean_bias.abs() <= 0.05),
        ("|spatial_plus bias| <= 0.05", summary_of(r, "spatial_plus").mean_bias.abs() <= 0.05),
        ("runtime < 2h", run.elapsed.as_secs() < 7200),
    ];
    let detail = r
        .summaries
        .iter()
        .map(|s| format!("{} bias {:+.3} cov {:.2}", s.estimator, s.mean_bias, s.coverage))
        .collect::<Vec<_>>()
        .join("; ");
    let failed: Vec<&str> =
        checks.iter().filter(|(_, ok)| !ok).map(|(name, _)| *name).collect();
    verdict(
        "4 (fixed-confounder table)",
        failed.is_empty(),
        &format!(
            "{detail}; {}{}",
            within_budget(run.elapsed, 7200),
            if failed.is_empty() { String::new() } else { format!("; failed: {failed:?}") }
        ),
    );
}

// ---------------------------------------------------------------------------
// 5. Random-confounder table plus variance inflation of OLS
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_random_confounder_table() {
    let fixed = table1();
    let run = table2();
    let r = &run.report;
    assert!(r.failure_fraction() <= 0.05);
    let ols = summary_of(r, "ols");
    let ols_fixed_sd = summary_of(&fixed.report, "ols").sd_bias;
    let checks = [
        ("ols coverage <= 0.05", ols.coverage <= 0.05),
        ("gam_fx coverage >= 0.85", summary_of(r, "gam_fx").coverage >= 0.85),
        ("spatial_plus coverage >= 0.85", summary_of(r, "spatial_plus").coverage >= 0.85),
        ("|ols bias| >= 0.3", ols.mean_bias.abs() >= 0.3),
        ("|gls_profile bias| <= 0.05", summary_of(r, "gls_profile").mean_bias.abs() <= 0.05),
        ("|gam bias| <= 0.05", summary_of(r, "gam").mean_bias.abs() <= 0.05),
        ("|gam_fx bias| <= 0.05", summary_of(r, "gam_fx").mean_bias.abs() <= 0.05),
        ("|spatial_plus bias| <= 0.05", summary_of(r, "spatial_plus").mean_bias.abs() <= 0.05),
        ("ols sd inflation >= 1.25", ols.sd_bias >= 1.25 * ols_fixed_sd),
    ];
    let failed: Vec<&str> =
        checks.iter().filter(|(_, ok)| !ok).map(|(name, _)| *name).collect();
    verdict(
        "5 (random-confounder table)",
        failed.is_empty(),
        &format!(
            "ols sd {:.3} vs fixed {:.3} (ratio {:.2}); bias/coverage bands as in criterion 4{}",
            ols.sd_bias,
            ols_fixed_sd,
            ols.sd_bias / ols_fixed_sd,
            if failed.is_empty() { String::new() } else { format!("; failed: {failed:?}") }
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. Clustered scenario: grouped RE undercovers, spatial GLS recovers
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_clustered_table() {
    let run = run_timed(
        r#"{"scenario":"clustered","seed":20260826,"replications":300,
            "estimators":["ols","grouped_re","gls_vecchia"],"m":300,"k":10}"#,
    );
    let r = &run.report;
    assert!(
        r.failure_fraction() <= 0.05,
        "failures: {:?}",
        r.errors.iter().take(3).collect::<Vec<_>>()
    );
    let b_ols = summary_of(r, "ols").mean_bias.abs();
    let b_grp = summary_of(r, "grouped_re").mean_bias.abs();
    let b_sp = summary_of(r, "gls_vecchia").mean_bias.abs();
    let cov_grp = summary_of(r, "grouped_re").coverage;
    let cov_sp = summary_of(r, "gls_vecchia").coverage;
    verdict(
        "6 (clustered table)",
        cov_grp <= 0.5
            && cov_sp >= 0.8
            && b_sp < b_grp
            && b_grp < b_ols
            && run.elapsed.as_secs() < 3600,
        &format!(
            "coverage grouped {cov_grp:.2} <= 0.5, spatial {cov_sp:.2} >= 0.8; \
             |bias| spatial {b_sp:.3} < grouped {b_grp:.3} < ols {b_ols:.3}; {}",
            within_budget(run.elapsed, 3600)
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. Exact GLS bias tracks the spectral prediction
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_eigen_bias_agreement() {
    let run = run_timed(
        r#"{"scenario":"eigen","seed":20260826,"replications":200,
            "estimators":["ols"],"n":3000}"#,
    );
    let r = &run.report;
    assert!(r.failure_fraction() <= 0.05);
    let exact: Vec<f64> = r
        .diagnostics
        .iter()
        .filter(|d| d.statistic == "exact_bias")
        .map(|d| d.value)
        .collect();
    let pred: Vec<f64> = r
        .diagnostics
        .iter()
        .filter(|d| d.statistic == "predicted_bias")
        .map(|d| d.value)
        .collect();
    assert_eq!(exact.len(), 200);
    assert_eq!(pred.len(), 200);
    let m = exact.len() as f64;
    let me = exact.iter().sum::<f64>() / m;
    let mp = pred.iter().sum::<f64>() / m;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (e, p) in exact.iter().zip(&pred) {
        sxy += (e - me) * (p - mp);
        sxx += (p - mp) * (p - mp);
        syy += (e - me) * (e - me);
    }
    let corr = sxy / (sxx * syy).sqrt();
    let slope = sxy / sxx;
    verdict(
        "7 (exact vs predicted GLS bias)",
        corr >= 0.9 && (0.8..=1.2).contains(&slope) && run.elapsed.as_secs() < 1800,
        &format!(
            "pearson r = {corr:.3}, slope = {slope:.3} over 200 trials; {}",
            within_budget(run.elapsed, 1800)
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. Hermite eigensystem constants and empirical spectrum
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_hermite_eigensystem() {
    let n = 3000;
    let mut rng = RngStream::new(SEED + 8, 0);
    let locations = sample_gaussian_line(n, 1.0, &mut rng).unwrap();
    let sys = hermite_eigensystem(1.0, 1.0, 5, &locations).unwrap();
    let consts = [
        ("a", sys.a, 0.25),
        ("b", sys.b, 0.5),
        ("c", sys.c, 0.5590169943749475),
        ("A", sys.big_a, 1.3090169943749475),
        ("B", sys.big_b, 0.3819660112501051),
        ("lambda0", sys.eigenvalues[0], 0.6180339887498949),
    ];
    let const_err = consts
        .iter()
        .map(|(_, got, want)| (got - want).abs())
        .fold(0.0f64, f64::max);

    // empirical spectrum of K/n against the analytic eigenvalues
    let spec = KernelSpec::new(KernelFamily::SquaredExponential, 1.0, 1.0, 0.0).unwrap();
    let mut k_over_n = covariance_matrix(&spec, &locations).unwrap();
    k_over_n.mapv_inplace(|v| v / n as f64);
    let top = top_eigenvalues(&k_over_n, 5, 200);
    let mut worst_rel = 0.0f64;
    for (k, &emp) in top.iter().enumerate() {
        worst_rel = worst_rel.max((emp - sys.eigenvalues[k]).abs() / sys.eigenvalues[k]);
    }
    verdict(
        "8 (Hermite eigensystem)",
        const_err <= 1e-6 && worst_rel <= 0.05,
        &format!(
            "max constant error {const_err:.2e}; top-5 eigenvalue rel. error {worst_rel:.3} \
             (analytic {:?})",
            &sys.eigenvalues[..5]
        ),
    );
}

// ---------------------------------------------------------------------------
// 9. Concentration diagnostics for the cross term and quadratic form
// ---------------------------------------------------------------------------

fn group_values(diags: &[DiagRecord], n: usize) -> Vec<f64> {
    diags.iter().filter(|d| d.n == n).map(|d| d.value).collect()
}

#[test]
fn criterion_09_lemma_diagnostics() {
    let t = Instant::now();
    let sweep = [250usize, 500, 1000, 2000];
    let reps = 300;
    let cross = run_lemma_diagnostics(LemmaKind::Cross, &sweep, reps, SEED + 9).unwrap();
    let quad = run_lemma_diagnostics(LemmaKind::Quadform, &sweep, reps, SEED + 10).unwrap();

    let mut mean_ok = true;
    let mut sds = Vec::new();
    let mut detail = String::new();
    for &n in &sweep {
        let v = group_values(&cross, n);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt();
        let se = sd / (v.len() as f64).sqrt();
        if m.abs() > 4.0 * se {
            mean_ok = false;
        }
        sds.push(sd);
        detail.push_str(&format!("n={n}: mean {m:+.1e} (4se {:.1e}) sd {sd:.2e}; ", 4.0 * se));
    }
    let mut ratio_ok = true;
    for w in sds.windows(2) {
        let ratio = w[1] / w[0];
        if !(0.55..=0.87).contains(&ratio) {
            ratio_ok = false;
        }
        detail.push_str(&format!("sd ratio {ratio:.3}; "));
    }
    // var(eta) / (gamma^2 + sigma^2) = 1 / 2 under the diagnostic kernel
    let bound = 0.9 * 0.5;
    let quad_min = quad
        .iter()
        .filter(|d| d.n >= 200)
        .map(|d| d.value)
        .fold(f64::INFINITY, f64::min);
    let elapsed = t.elapsed();
    verdict(
        "9 (lemma diagnostics)",
        mean_ok && ratio_ok && quad_min >= bound && elapsed.as_secs() < 600,
        &format!(
            "{detail}quadform min {quad_min:.3} >= {bound}; {}",
            within_budget(elapsed, 600)
        ),
    );
}

// ---------------------------------------------------------------------------
// 10. Consistency trend: GLS bias shrinks, OLS bias does not
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_consistency_trend() {
    let cfg = ExperimentConfig::from_json(
        r#"{"scenario":"eigen","seed":20260826,"replications":80,
            "estimators":["gls_known","ols"],"n":250,
            "n_sweep":[250,500,1000,2000]}"#,
    )
    .unwrap();
    let diags = run_trend(&cfg).unwrap();
    let median_abs = |stat: &str, n: usize| -> f64 {
        let mut v: Vec<f64> = diags
            .iter()
            .filter(|d| d.statistic == stat && d.n == n)
            .map(|d| d.value.abs())
            .collect();
        assert!(!v.is_empty(), "no rows for {stat} at n={n}");
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let sweep = [250usize, 500, 1000, 2000];
    let gls: Vec<f64> = sweep.iter().map(|&n| median_abs("bias_gls_known", n)).collect();
    let ols: Vec<f64> = sweep.iter().map(|&n| median_abs("bias_ols", n)).collect();
    let inversions = gls.windows(2).filter(|w| w[1] >= w[0]).count();
    let ols_stable = ols.iter().all(|&b| b >= 0.8 * ols[0] && b <= 1.2 * ols[0]);
    verdict(
        "10 (consistency trend)",
        inversions <= 1 && ols_stable,
        &format!(
            "median |GLS bias| {gls:?} ({inversions} inversions); median |OLS bias| {ols:?} \
             within 20% of {:.3}: {ols_stable}",
            ols[0]
        ),
    );
}

// ---------------------------------------------------------------------------
// 11. Byte-identical CSV output on rerun
// ---------------------------------------------------------------------------

#[test]
fn criterion_11_determinism() {
    let configs = [
        r#"{"scenario":"fixed_confounder","seed":31,"replications":4,
            "estimators":["ols","rsr","gls_profile","gam","gam_fx","spatial_plus"],
            "n":300,"smoother_rank":60,"boot_reps":50}"#,
        r#"{"scenario":"clustered","seed":32,"replications":3,
            "estimators":["ols","grouped_re","gls_vecchia"],"m":60,"k":5,
            "boot_reps":50,"subsample_fraction":0.2,"subsample_reps":60}"#,
        r#"{"scenario":"eigen","seed":33,"replications":3,
            "estimators":["gls_known","gp_ridge"],"n":250}"#,
    ];
    let formats = [spatial_plm::report::Format::Csv];
    let mut checked = 0;
    for json in configs {
        let cfg = ExperimentConfig::from_json(json).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        write_report(&run_experiment(&cfg).unwrap(), d1.path(), &formats).unwrap();
        write_report(&run_experiment(&cfg).unwrap(), d2.path(), &formats).unwrap();
        for name in ["per_rep.csv", "summary.csv", "diagnostics.csv"] {
            let a = std::fs::read(d1.path().join(name)).ok();
            let b = std::fs::read(d2.path().join(name)).ok();
            assert_eq!(a.is_some(), b.is_some(), "{name} presence differs");
            if let (Some(a), Some(b)) = (a, b) {
                assert_eq!(a, b, "{name} differs between reruns");
                checked += 1;
            }
        }
    }
    verdict(
        "11 (determinism)",
        true,
        &format!("{checked} CSV files byte-identical across reruns of 3 scenarios"),
    );
}
