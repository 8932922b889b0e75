//! One test per acceptance criterion. Each prints a single PASS/FAIL line
//! with its measurement and wall-clock time against the budget, written
//! straight to stdout so the lines survive output capture.

mod common;

use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use common::{digamma_half_series, i0_scaled_quadrature, i0_series, k0_quadrature, k0_scaled_quadrature, rel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use tlsloss::constants::half_photon_energy_ratio;
use tlsloss::decomposition::{
    aggregate_triplets, fit_spr_scaling, q_tls_at_photon, solve_placement, HydrocarbonPlacement, SprFit,
    SprFitOptions, SprPoint, SurfaceEntry, SurfaceLossTable, Treatment,
};
use tlsloss::design::{
    coupling_capacitance, cpw_f0, cpw_length, extract_lumped, CpwDesign, FrequencyConvention, SPEED_OF_LIGHT,
};
use tlsloss::freqshift::{fit_freq_shift, FreqShiftFitOptions, FreqShiftParams, GammaRegime};
use tlsloss::lineshape::{fit_trace, s21_model, LineshapeParams, TraceFitOptions, TraceMetadata};
use tlsloss::lossmodel::{
    fit_sweep, profile_likelihood, qp_loss, LossFitOptions, LossFitResult, LossParams, QOtherStatus, IDX_TC,
};
use tlsloss::numerics::{bessel_i0, bessel_i0_scaled, bessel_k0, bessel_k0_scaled, digamma_real_half};
use tlsloss::pipeline::{run_pipeline, write_outputs, RunConfig, RunStatus};
use tlsloss::synth::{
    device_population, generate_campaign, generate_freq_shift, generate_sweep_grid, generate_trace, write_campaign,
    CampaignSpec, PopulationSpec, TraceSpec, CAMPAIGN_CONFIG_FILE,
};

/// Run one criterion, print its line and fail the test when it does not hold.
fn criterion(id: u8, name: &str, budget: Duration, check: impl FnOnce() -> (bool, String)) {
    let start = Instant::now();
    let (ok, detail) = check();
    let elapsed = start.elapsed();
    let in_time = elapsed <= budget;
    let verdict = if ok && in_time { "PASS" } else { "FAIL" };
    let line = format!(
        "criterion {id:>2} {verdict} {name}: {detail} [{:.2} s, budget {} s]\n",
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    let _ = std::io::stdout().write_all(line.as_bytes());
    assert!(ok, "criterion {id}: {detail}");
    assert!(in_time, "criterion {id}: {:.2} s over the {} s budget", elapsed.as_secs_f64(), budget.as_secs());
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (lo.ln() + (hi / lo).ln() * i as f64 / (n - 1) as f64).exp())
        .collect()
}

fn within_one_sigma(value: f64, sigma: f64, truth: f64) -> bool {
    (value - truth).abs() <= sigma
}

#[test]
fn c01_special_functions() {
    // Oracles are evaluated outside the timed region; the budget is for the library.
    let k_x = log_grid(1e-3, 50.0, 200);
    let k_ref: Vec<(f64, f64)> = k_x.iter().map(|&x| (k0_quadrature(x), k0_scaled_quadrature(x))).collect();
    let i_x = log_grid(1e-3, 600.0, 200);
    let i_ref: Vec<(Option<f64>, f64)> = i_x
        .iter()
        .map(|&x| ((x < 40.0).then(|| i0_series(x)), i0_scaled_quadrature(x)))
        .collect();
    let y = log_grid(1e-3, 300.0, 40);
    let d_ref: Vec<f64> = y.iter().map(|&y| digamma_half_series(y)).collect();

    criterion(1, "special functions vs quadrature and series", Duration::from_secs(1), || {
        let mut worst: f64 = 0.0;
        for (x, (k, ks)) in k_x.iter().zip(&k_ref) {
            worst = worst.max(rel(bessel_k0(*x).unwrap(), *k));
            worst = worst.max(rel(bessel_k0_scaled(*x).unwrap(), *ks));
        }
        for (x, (i, is)) in i_x.iter().zip(&i_ref) {
            if let Some(i) = i {
                worst = worst.max(rel(bessel_i0(*x).unwrap(), *i));
            }
            worst = worst.max(rel(bessel_i0_scaled(*x).unwrap(), *is));
        }
        for (y, d) in y.iter().zip(&d_ref) {
            worst = worst.max((digamma_real_half(*y).unwrap() - d).abs() / d.abs().max(1.0));
        }
        (worst <= 1e-9, format!("max relative error {worst:.2e} (limit 1e-9)"))
    });
}

#[test]
fn c02_lineshape_limits() {
    criterion(2, "lineshape trivial limits", Duration::from_secs(1), || {
        let mut worst: f64 = 0.0;
        for (q_int, q_c) in [(3e5, 1e5), (1e5, 1e5), (2e4, 8e5), (1e6, 1e6)] {
            let p = LineshapeParams::from_q_int(5e9, q_int, q_c, 0.0, 0.0);
            worst = worst.max((s21_model(&p, p.f0_hz) - (1.0 - p.q_tot / q_c)).abs());
            if q_int == q_c {
                worst = worst.max((s21_model(&p, p.f0_hz) - 0.5).abs());
            }
            for k in 1..50 {
                let df = 0.1 * k as f64 * p.linewidth_hz();
                worst = worst.max((s21_model(&p, p.f0_hz + df) - s21_model(&p, p.f0_hz - df)).abs());
            }
        }
        (worst <= 1e-12, format!("max deviation {worst:.2e} (limit 1e-12)"))
    });
}

#[test]
fn c03_trace_fit_recovery() {
    criterion(3, "trace-fit Q_int recovery at 40 dB", Duration::from_secs(30), || {
        let n = 500;
        let hits = (0..n as u64)
            .into_par_iter()
            .filter(|&seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let ratio = 10f64.powf(rng.random_range(-1.0..=1.0));
                let q_c = 10f64.powf(rng.random_range(4.0..6.0));
                let asym = rng.random_range(-0.2..=0.2);
                let f0 = rng.random_range(4e9..8e9);
                let truth = LineshapeParams::from_q_int(f0, ratio * q_c, q_c, asym, 0.0);
                let meta = TraceMetadata::new("acc", "r", -100.0, 0.02);
                let trace = generate_trace(&truth, meta, &TraceSpec::default(), seed.wrapping_mul(7919));
                fit_trace(&trace, &TraceFitOptions::default())
                    .map(|f| rel(f.q_int, ratio * q_c) < 0.05)
                    .unwrap_or(false)
            })
            .count();
        let frac = hits as f64 / n as f64;
        (frac >= 0.95, format!("{hits}/{n} within 5% ({:.1}%, need 95%)", 100.0 * frac))
    });
}

const SWEEP_OMEGA: f64 = 2.0 * PI * 5e9;
const SWEEP_PHOTONS: [f64; 6] = [1.0, 10.0, 100.0, 1e3, 1e4, 1e5];
const SWEEP_TEMPS: [f64; 12] = [0.017, 0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.85, 1.0];

fn sweep_device() -> LossParams {
    LossParams {
        q_tls0: 6.97e5,
        d: 588.0,
        beta1: 1.0,
        beta2: 0.5,
        q_qp0: 2e3,
        tc: 3.0,
        q_other: None,
    }
}

#[test]
fn c04_sweep_fit_recovery() {
    criterion(4, "seven-parameter sweep-fit recovery", Duration::from_secs(120), || {
        let cases: Vec<(Option<f64>, u64)> = [None, Some(3e6)]
            .into_iter()
            .flat_map(|q| (0..10).map(move |s| (q, s)))
            .collect();
        let failures: Vec<String> = cases
            .par_iter()
            .filter_map(|&(q_other, seed)| {
                let truth = LossParams { q_other, ..sweep_device() };
                let data =
                    generate_sweep_grid(&truth, SWEEP_OMEGA, "acc", &SWEEP_PHOTONS, &SWEEP_TEMPS, 0.03, seed);
                let options = LossFitOptions {
                    seed,
                    ..LossFitOptions::default()
                };
                let fit = fit_sweep(&data, &options).ok()?;
                let p = fit.params;
                let ridge = profile_likelihood(&data, &fit, IDX_TC, &[truth.tc], &options).ok()?;
                let flag_ok = match q_other {
                    Some(_) => fit.q_other_status == QOtherStatus::Identified,
                    None => fit.q_other_status == QOtherStatus::Unidentifiable,
                };
                let ok = rel(p.q_tls0, truth.q_tls0) < 0.1
                    && rel(p.beta1, truth.beta1) < 0.3
                    && rel(p.beta2, truth.beta2) < 0.3
                    && rel(fit.qp_loss_at(1.0), qp_loss(&truth, 1.0, SWEEP_OMEGA)) < 0.1
                    && rel(ridge[0].params.q_qp0, truth.q_qp0) < 0.1
                    && flag_ok;
                (!ok).then(|| format!("q_other={q_other:?} seed={seed}"))
            })
            .collect();
        let n = 20;
        (
            failures.is_empty(),
            format!(
                "{}/{n} grids recovered (Q_TLS0 10%, beta 30%, Q_QP0 on the Tc ridge 10%, Q_other flag){}",
                n - failures.len(),
                if failures.is_empty() { String::new() } else { format!("; failed {failures:?}") }
            ),
        )
    });
}

fn shift_device(gamma: GammaRegime) -> FreqShiftParams {
    FreqShiftParams {
        q_tls0: 6.97e5,
        tc: 4.3,
        alpha_kin: 1e-3,
        gamma,
    }
}

fn shift_temperatures() -> Vec<f64> {
    (0..20).map(|i| 0.02 + 1.18 * i as f64 / 19.0).collect()
}

#[test]
fn c05_frequency_shift_cross_validation() {
    criterion(5, "frequency-shift cross-validation", Duration::from_secs(120), || {
        let f0 = SWEEP_OMEGA / (2.0 * PI);
        let shift_truth = shift_device(GammaRegime::ThinFilm);
        let clean = generate_freq_shift(&shift_truth, f0, &shift_temperatures(), 0.0, 0);
        let sigma = 0.05 * clean.points.iter().map(|q| q.df_over_f.abs()).fold(0.0, f64::max);
        let loss_truth = LossParams {
            q_tls0: shift_truth.q_tls0,
            ..sweep_device()
        };
        let agree = (0..100u64)
            .into_par_iter()
            .filter(|&seed| {
                let sweep = generate_sweep_grid(&loss_truth, SWEEP_OMEGA, "acc", &SWEEP_PHOTONS, &SWEEP_TEMPS, 0.03, seed);
                let Ok(loss) = fit_sweep(&sweep, &LossFitOptions { seed, ..LossFitOptions::default() }) else {
                    return false;
                };
                let shift = generate_freq_shift(&shift_truth, f0, &shift_temperatures(), sigma, seed + 1000);
                let Ok(fs) = fit_freq_shift(&shift, GammaRegime::ThinFilm, &FreqShiftFitOptions::default()) else {
                    return false;
                };
                (loss.params.q_tls0 - fs.params.q_tls0).abs() <= 2.0 * loss.sigma[0].hypot(fs.q_tls0_sigma)
            })
            .count();
        let mut regimes_ok = 0;
        for seed in 0..5 {
            let data = generate_freq_shift(&shift_truth, f0, &shift_temperatures(), sigma, seed);
            let fits: Vec<_> = GammaRegime::ALL
                .iter()
                .filter_map(|&g| fit_freq_shift(&data, g, &FreqShiftFitOptions::default()).ok())
                .collect();
            let consistent = fits.len() == 3
                && fits.iter().all(|a| {
                    fits.iter()
                        .all(|b| (a.params.tc - b.params.tc).abs() <= a.tc_sigma.hypot(b.tc_sigma))
                });
            regimes_ok += consistent as usize;
        }
        (
            agree >= 90 && regimes_ok == 5,
            format!("Q_TLS0 agree within 2 sigma in {agree}/100 (need 90); gamma regimes agree on Tc in {regimes_ok}/5"),
        )
    });
}

fn published_table() -> SurfaceLossTable {
    SurfaceLossTable {
        t0_nm: 3.0,
        entries: vec![
            SurfaceEntry::with_defaults(Treatment::Native, 13.6e-4, 0.6e-4),
            SurfaceEntry::with_defaults(Treatment::Boe, 7.2e-4, 0.6e-4),
            SurfaceEntry::with_defaults(Treatment::LongBoe, 7.0e-4, 1.0e-4),
            SurfaceEntry::with_defaults(Treatment::Triacid, 14.0e-4, 3.0e-4),
        ],
        tan_delta_bulk: None,
    }
}

#[test]
fn c06_decomposition_arithmetic() {
    criterion(6, "decomposition of the published tangents", Duration::from_secs(1), || {
        let table = published_table();
        let r = aggregate_triplets(&table).unwrap();
        let overlap = |v: f64, s: f64, target: f64, ts: f64| (v - target).abs() <= s + ts;
        let hc = r.hydrocarbon.unwrap();
        let oxide_ok = overlap(r.ma0.value, r.ma0.sigma, 5e-4, 1e-4);
        let hc_ok = overlap(hc.value, hc.sigma, 4.9e-4, 0.5e-4);
        let sub_ok = overlap(r.sa_ms.value, r.sa_ms.sigma, 4e-4, 1e-4);
        let alt = solve_placement(&table, HydrocarbonPlacement::MetalAirAndSubstrateAir).unwrap();
        let negative: Vec<&str> = alt
            .terms
            .iter()
            .filter(|t| t.unphysical && t.value.value < 0.0)
            .map(|t| t.name.as_str())
            .collect();
        let alt_ok = alt.unphysical && !negative.is_empty();
        (
            oxide_ok && hc_ok && sub_ok && alt_ok,
            format!(
                "oxide {:.2}±{:.2}, hydrocarbon {:.2}±{:.2}, substrate {:.2}±{:.2} (×1e-4); alternative placement negative: {negative:?}",
                r.ma0.value * 1e4,
                r.ma0.sigma * 1e4,
                hc.value * 1e4,
                hc.sigma * 1e4,
                r.sa_ms.value * 1e4,
                r.sa_ms.sigma * 1e4
            ),
        )
    });
}

/// Sweep fits for every device of the default population, with 3% noise on
/// a 6 × 12 grid; returns the regression at zero and at one photon.
fn population_regressions(seed: u64) -> (SprFit, SprFit) {
    let spec = PopulationSpec::default();
    let devices = device_population(&spec);
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = devices.iter().map(|_| master.random()).collect();
    let points: Vec<(SprPoint, SprPoint)> = devices
        .par_iter()
        .zip(&seeds)
        .map(|(d, &s)| {
            let r = &d.resonator;
            let data = generate_sweep_grid(&r.loss, r.omega(), &d.geometry.device_id, &SWEEP_PHOTONS, &SWEEP_TEMPS, 0.03, s);
            let fit = fit_sweep(&data, &LossFitOptions { seed: s, ..LossFitOptions::default() }).unwrap();
            let zero = SprPoint::from_fit(&d.geometry, &fit);
            let one = SprPoint::from_fit_at_photon(&d.geometry, &fit, 1.0, spec.base_temperature_k);
            (zero, one)
        })
        .collect();
    let (zero, one): (Vec<_>, Vec<_>) = points.into_iter().unzip();
    let options = SprFitOptions::default();
    (fit_spr_scaling(&zero, &options).unwrap(), fit_spr_scaling(&one, &options).unwrap())
}

#[test]
fn c07_spr_regression() {
    // Coverage over further seeds, untimed: the verdict uses seed 0 only.
    let coverage_seeds = 1..=10u64;
    let n_cov = coverage_seeds.clone().count();
    let mut covered = [0usize; 3];
    for seed in coverage_seeds {
        let (fit, _) = population_regressions(seed);
        let boe = fit.tangent(Treatment::Boe).unwrap();
        let native = fit.tangent(Treatment::Native).unwrap();
        let bulk = fit.tan_delta_bulk;
        covered[0] += within_one_sigma(boe.value, boe.sigma, 7.2e-4) as usize;
        covered[1] += within_one_sigma(native.value, native.sigma, 13.6e-4) as usize;
        covered[2] += within_one_sigma(bulk.value, bulk.sigma, 1.5e-7) as usize;
    }
    criterion(7, "participation-ratio regression", Duration::from_secs(10), || {
        let (fit, _) = population_regressions(0);
        let boe = fit.tangent(Treatment::Boe).unwrap();
        let native = fit.tangent(Treatment::Native).unwrap();
        let bulk = fit.tan_delta_bulk;
        let ratio = fit.ratio(Treatment::Native, Treatment::Boe).unwrap();
        let checks = [
            within_one_sigma(boe.value, boe.sigma, 7.2e-4),
            within_one_sigma(native.value, native.sigma, 13.6e-4),
            within_one_sigma(bulk.value, bulk.sigma, 1.5e-7),
            (ratio.value - 1.89).abs() <= 0.15,
        ];
        (
            checks.iter().all(|c| *c),
            format!(
                "BOE {:.3}±{:.3}e-4, native {:.3}±{:.3}e-4, bulk {:.3}±{:.3}e-7, native/BOE {:.3} (within-1σ flags {:?}; 1σ coverage over {n_cov} other seeds: BOE {}, native {}, bulk {})",
                boe.value * 1e4,
                boe.sigma * 1e4,
                native.value * 1e4,
                native.sigma * 1e4,
                bulk.value * 1e7,
                bulk.sigma * 1e7,
                ratio.value,
                &checks[..3],
                covered[0],
                covered[1],
                covered[2]
            ),
        )
    });
}

fn fit_with(params: LossParams, covariance: Vec<Vec<f64>>, omega: f64) -> LossFitResult {
    LossFitResult {
        device_id: "acc".into(),
        omega_rad_s: omega,
        params,
        sigma: (0..7).map(|i| covariance[i][i].sqrt()).collect(),
        covariance,
        chi_square: 0.0,
        reduced_chi_square: 0.0,
        n_points: 72,
        converged: true,
        q_other_status: QOtherStatus::Unidentifiable,
        q_other_delta_chi_square: 0.0,
        correlated: Vec::new(),
        unidentified: Vec::new(),
    }
}

#[test]
fn c08_one_photon_analysis() {
    criterion(8, "one-photon TLS analysis", Duration::from_secs(10), || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut violations = 0;
        for _ in 0..10_000 {
            let p = LossParams {
                q_tls0: 10f64.powf(rng.random_range(4.0..8.0)),
                d: 10f64.powf(rng.random_range(-2.0..6.0)),
                beta1: rng.random_range(0.0..2.0),
                beta2: rng.random_range(0.05..2.0),
                q_qp0: 1e3,
                tc: 3.0,
                q_other: None,
            };
            let omega = 2.0 * PI * rng.random_range(3e9..9e9);
            let t = rng.random_range(0.01..1.0);
            let n = 10f64.powf(rng.random_range(-3.0..6.0));
            let q = q_tls_at_photon(&fit_with(p, vec![vec![0.0; 7]; 7], omega), n, t).value;
            let floor = p.q_tls0 / half_photon_energy_ratio(omega, t).tanh();
            violations += (q < floor * (1.0 - 1e-12)) as usize;
        }
        let (_, one) = population_regressions(0);
        let boe = one.tangent(Treatment::Boe).unwrap();
        let ok = violations == 0 && within_one_sigma(boe.value, boe.sigma, 6.6e-4);
        (
            ok,
            format!(
                "{violations}/10000 below Q_TLS0/tanh; BOE tan δ(n̄=1) = {:.3}±{:.3}e-4 vs 6.6e-4",
                boe.value * 1e4,
                boe.sigma * 1e4
            ),
        )
    });
}

#[test]
fn c09_design_calculators() {
    criterion(9, "design calculators", Duration::from_secs(1), || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut worst: f64 = 0.0;
        for _ in 0..10_000 {
            let l = rng.random_range(1e-4..5e-2);
            let eps = rng.random_range(1.0..12.0);
            let f = cpw_f0(&CpwDesign::new(l, eps)).unwrap();
            worst = worst.max(rel(cpw_length(f, eps, SPEED_OF_LIGHT).unwrap(), l));
            let c_l = rng.random_range(1e-15..1e-12);
            let f_r = rng.random_range(1e9..1e10);
            let ratio = rng.random_range(1.01..10.0);
            let conv = if rng.random_bool(0.5) { FrequencyConvention::Literal } else { FrequencyConvention::Angular };
            let e = extract_lumped(c_l, ratio * f_r, f_r, conv).unwrap();
            worst = worst.max(rel(e.f0_hz, f_r)).max(rel(e.meander_frequency(), ratio * f_r));
        }
        let f0 = cpw_f0(&CpwDesign::new(4.55e-3, 5.5)).unwrap();
        let cc = coupling_capacitance(1e5, 5e9, 50.0).unwrap();
        let e = extract_lumped(100e-15, 12e9, 6e9, FrequencyConvention::Angular).unwrap();
        let examples_ok = (f0 - 7.03e9).abs() < 0.01e9
            && (cc - 1.78e-15).abs() < 0.01e-15
            && (e.c_s_f - 33.33e-15).abs() < 0.01e-15
            && (e.inductance_h - 5.28e-9).abs() < 0.01e-9
            && (e.z0_ohm - 199.0).abs() < 0.5;
        (
            worst <= 1e-12 && examples_ok,
            format!(
                "round-trip max relative error {worst:.1e}; f0 {:.3} GHz, C_c {:.3} fF, C_s {:.2} fF, L {:.3} nH, Z0 {:.1} Ω",
                f0 * 1e-9,
                cc * 1e15,
                e.c_s_f * 1e15,
                e.inductance_h * 1e9,
                e.z0_ohm
            ),
        )
    });
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn c10_end_to_end_determinism() {
    criterion(10, "end-to-end determinism", Duration::from_secs(300), || {
        let dir = tempfile::tempdir().unwrap();
        let spec = CampaignSpec {
            seed: 10,
            ..CampaignSpec::default()
        };
        let mut runs = Vec::new();
        let mut devices = 0;
        let mut status = RunStatus::Failed;
        for jobs in [0, 1] {
            let campaign = generate_campaign(&spec).unwrap();
            devices = campaign.devices.len();
            write_campaign(&campaign, dir.path(), spec.seed).unwrap();
            let mut cfg = RunConfig::from_file(&dir.path().join(CAMPAIGN_CONFIG_FILE)).unwrap();
            cfg.jobs = jobs;
            let out = run_pipeline(&cfg).unwrap();
            status = out.summary.status;
            write_outputs(&out, &cfg.output_dir).unwrap();
            runs.push(snapshot(&cfg.output_dir));
        }
        let identical = runs[0] == runs[1];
        let bytes: usize = runs[0].iter().map(|(_, b)| b.len()).sum();
        (
            identical && devices == 12 && status == RunStatus::Success,
            format!(
                "{devices} devices, status {status:?}, {} output files ({bytes} bytes) identical across two runs: {identical}",
                runs[0].len()
            ),
        )
    });
}
