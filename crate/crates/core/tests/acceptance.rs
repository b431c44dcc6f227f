//! End-to-end acceptance checks. Each test prints one PASS/FAIL line
//! straight to stderr (bypassing the test harness capture) and then asserts.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use neurorx::attention::{softmax_rows, twod_mha_backward, twod_mha_forward, twod_mha_forward_cached, TwoDMhaParams};
use neurorx::baselines::{ml_detect_bruteforce, sphere_decode, CsiSource, RadiusPolicy};
use neurorx::channel::{generate_taps, ChannelModel, ChannelProfile, PaConfig};
use neurorx::harness::{check_ordering, check_pa_trend, check_toy_a, check_toy_b, ABLATION_ORDER};
use neurorx::nn::{Mlp, ParamSet};
use neurorx::pipeline::{run_montecarlo, DetectorConfig, Scenario, Variant};
use neurorx::reservoir::{rls_step, train_ls, RlsState};
use neurorx::seed::{rng_from, SimRng};
use neurorx::structnet::{
    attention_weight, construct_binary_samples, loss_and_grad, mislabeled_count, posteriors, StructNetParams,
};
use neurorx::toylab::{
    binary_corruption, corrupt_labels, seed_range, toy_experiment_a, toy_experiment_b, ToyConfig, ToyMethod, PAM_LEVELS,
};
use neurorx::txchain::{map_bits_to_qam, Constellation, OfdmModem, SubframeSpec, C64};

const SEED: u64 = 1;

fn report(name: &str, pass: bool, detail: String) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[{tag}] {name}: {detail}");
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn cn(rng: &mut SimRng) -> C64 {
    let s = 0.5f64.sqrt();
    C64::new(rng.sample::<f64, _>(StandardNormal) * s, rng.sample::<f64, _>(StandardNormal) * s)
}

fn uniform(r: usize, c: usize, rng: &mut SimRng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

#[test]
fn toy_a_structnet_matches_genie_and_beats_lmmse() {
    let cfg = ToyConfig::default();
    let ebno = [3.0, 5.0, 7.0, 9.0];
    let rows = toy_experiment_a(&cfg, &ebno, &seed_range(SEED, 100)).unwrap();
    let pass = check_toy_a(&rows);
    let detail = rows
        .iter()
        .map(|r| {
            format!(
                "{} dB GT {:.4} LMMSE {:.4} StructNet {:.4}",
                r.ebno_db,
                r.median(ToyMethod::AdnnGt).unwrap(),
                r.median(ToyMethod::AdnnLmmse).unwrap(),
                r.median(ToyMethod::StructNet).unwrap()
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    report("toy A ordering over 100 channels", pass, detail);
    assert!(pass);
}

#[test]
fn toy_b_structnet_survives_label_corruption() {
    let cfg = ToyConfig::default();
    let rows = toy_experiment_b(&cfg, &[0.7], &seed_range(SEED, 20)).unwrap();
    // audit the corruption model over every fraction, not just the trained one
    let mut worst = rows[0].max_binary_corruption();
    let mut rng = rng_from(SEED, &[900]);
    for seed in 0..50 {
        let labels = DMatrix::from_fn(4, 1000, |_, _| PAM_LEVELS[rng.random_range(0..4)]);
        for step in 0..=20 {
            let f = step as f64 / 20.0;
            let bad = corrupt_labels(&labels, f, &mut rng_from(seed, &[step])).unwrap();
            worst = worst.max(binary_corruption(&labels, &bad).unwrap());
        }
    }
    let s = rows[0].median(ToyMethod::StructNet).unwrap();
    let m = rows[0].median(ToyMethod::FourClassMlp).unwrap();
    let pass = check_toy_b(&rows) && worst <= 0.5;
    report(
        "toy B at 70% corruption over 20 seeds",
        pass,
        format!("StructNet {s:.4} vs FourClassMlp {m:.4}, worst binary corruption {worst:.4}"),
    );
    assert!(pass);
}

#[test]
fn at_most_one_of_two_binary_samples_is_mislabeled() {
    let mut pairs = 0usize;
    let mut violations = 0usize;
    for m in [4usize, 16, 64] {
        let c = Constellation::new(m).unwrap();
        let levels = c.pam_levels();
        let points: Vec<(i32, i32)> = levels.iter().flat_map(|&i| levels.iter().map(move |&q| (i, q))).collect();
        let y = DVector::zeros(2);
        for &t in &points {
            for &a in &points {
                if t == a {
                    continue;
                }
                pairs += 1;
                for (dim, (tv, av)) in [(t.0, a.0), (t.1, a.1)].into_iter().enumerate() {
                    let (plus, minus) = construct_binary_samples(av, c.k(), &y, dim).unwrap();
                    // a sample is right when the shifted truth has the sign of its label
                    let wrong = [plus, minus]
                        .iter()
                        .filter(|s| (tv + s.shift).signum() != s.label as i32)
                        .count();
                    if wrong > 1 || mislabeled_count(tv, av, c.k()).unwrap() != wrong {
                        violations += 1;
                    }
                }
            }
        }
    }
    let pass = violations == 0;
    report(
        "incorrect-label bound, exhaustive over M in {4, 16, 64}",
        pass,
        format!("{pairs} ordered pairs, {violations} counterexamples"),
    );
    assert!(pass);
}

#[test]
fn rls_without_forgetting_reproduces_ridge_ls() {
    let delta = 1e-6;
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = rng_from(seed, &[901]);
        let dim = rng.random_range(4..24);
        let n = rng.random_range(2 * dim..8 * dim);
        let outs = rng.random_range(1..5);
        let z = DMatrix::from_fn(dim, n, |_, _| cn(&mut rng));
        let t = DMatrix::from_fn(outs, n, |_, _| cn(&mut rng));
        let (w_ls, _) = train_ls(&z, &t, delta).unwrap();
        let mut w = DMatrix::zeros(outs, dim);
        let mut rls = RlsState::scaled_identity(dim, delta, 1.0);
        for j in 0..n {
            rls_step(&mut w, &mut rls, &z.column(j).into_owned(), &t.column(j).into_owned()).unwrap();
        }
        worst = worst.max((&w - &w_ls).norm() / w_ls.norm());
    }
    let pass = worst < 1e-6;
    report("RLS with alpha = 1 equals ridge LS on 20 systems", pass, format!("max relative error {worst:.3e}"));
    assert!(pass);
}

fn mha_worst(seed: u64) -> f64 {
    let (n_p, n_sc, h) = (4, 8, 1e-5);
    let mut rng = rng_from(seed, &[902]);
    let p = TwoDMhaParams::random(n_p, n_sc, 6, 3, &mut rng);
    let i = uniform(n_p, 2 * n_sc, &mut rng);
    let r = uniform(n_p, 2 * n_sc, &mut rng);
    let loss = |p: &TwoDMhaParams, i: &DMatrix<f64>| twod_mha_forward(i, p).unwrap().dot(&r);
    let (g, d_in) = twod_mha_backward(&i, &p, &r).unwrap();
    let flat: Vec<f64> = g.slices().concat();
    let mut worst = 0.0f64;
    for k in 0..flat.len() {
        let bump = |delta: f64| {
            let mut q = p.clone();
            let mut idx = k;
            for s in q.slices_mut() {
                if idx < s.len() {
                    s[idx] += delta;
                    break;
                }
                idx -= s.len();
            }
            loss(&q, &i)
        };
        worst = worst.max(rel_err(flat[k], (bump(h) - bump(-h)) / (2.0 * h)));
    }
    for k in 0..i.len() {
        let mut a = i.clone();
        let mut b = i.clone();
        a[k] += h;
        b[k] -= h;
        worst = worst.max(rel_err(d_in[k], (loss(&p, &a) - loss(&p, &b)) / (2.0 * h)));
    }
    worst
}

fn structnet_worst(seed: u64) -> f64 {
    let h = 1e-5;
    let mut rng = rng_from(seed, &[903]);
    let (d, nd, hidden, cols) = (4, 4, 6, 5);
    let pe = uniform(d, nd, &mut rng);
    let clf = Mlp::random(d, hidden, 2 * nd, &mut rng);
    let params = StructNetParams::new(pe, clf).unwrap();
    let y = uniform(d, cols, &mut rng) * 2.0;
    let labels = DMatrix::from_fn(nd, cols, |_, _| PAM_LEVELS[rng.random_range(0..4)]);
    let weights = DMatrix::from_fn(nd, cols, |_, _| attention_weight(rng.random_range(0.0..1.0), 0.5));
    let loss = |p: &StructNetParams, y: &DMatrix<f64>| loss_and_grad(p, y, &labels, &weights).unwrap().loss;
    let g = loss_and_grad(&params, &y, &labels, &weights).unwrap();
    let mut worst = 0.0f64;
    let flat: Vec<f64> = g.clf.slices().concat();
    for k in 0..flat.len() {
        let bump = |delta: f64| {
            let mut q = params.clone();
            let mut idx = k;
            for s in q.clf.slices_mut() {
                if idx < s.len() {
                    s[idx] += delta;
                    break;
                }
                idx -= s.len();
            }
            loss(&q, &y)
        };
        worst = worst.max(rel_err(flat[k], (bump(h) - bump(-h)) / (2.0 * h)));
    }
    for k in 0..params.pe.len() {
        let mut a = params.clone();
        let mut b = params.clone();
        a.pe[k] += h;
        b.pe[k] -= h;
        worst = worst.max(rel_err(g.pe[k], (loss(&a, &y) - loss(&b, &y)) / (2.0 * h)));
    }
    for k in 0..y.len() {
        let mut a = y.clone();
        let mut b = y.clone();
        a[k] += h;
        b[k] -= h;
        worst = worst.max(rel_err(g.y[k], (loss(&params, &a) - loss(&params, &b)) / (2.0 * h)));
    }
    worst
}

#[test]
fn analytic_gradients_match_central_differences() {
    let mha = (0..20).map(mha_worst).fold(0.0, f64::max);
    let sn = (0..20).map(structnet_worst).fold(0.0, f64::max);
    let pass = mha < 1e-4 && sn < 1e-4;
    report(
        "gradient suite over 20 seeds",
        pass,
        format!("MHA max relative error {mha:.3e}, StructNet {sn:.3e}"),
    );
    assert!(pass);
}

#[test]
fn softmax_rows_and_posteriors_are_normalized() {
    let mut rng = rng_from(SEED, &[904]);
    let mut softmax_dev = 0.0f64;
    let mut rows = 0usize;
    while rows < 100_000 {
        let scale = [0.1, 1.0, 30.0, 700.0][rows / 1000 % 4];
        let a = uniform(50, rng.random_range(1..20), &mut rng) * scale;
        for r in softmax_rows(&a).row_iter() {
            softmax_dev = softmax_dev.max((r.sum() - 1.0).abs());
        }
        rows += 50;
    }
    for seed in 0..20 {
        let p = TwoDMhaParams::random(4, 8, 6, 3, &mut rng_from(seed, &[905]));
        let cache = twod_mha_forward_cached(&uniform(4, 16, &mut rng), &p).unwrap();
        for m in [cache.time_attention(), cache.freq_attention()] {
            for r in m.row_iter() {
                softmax_dev = softmax_dev.max((r.sum() - 1.0).abs());
            }
        }
    }
    let mut post_dev = 0.0f64;
    let mut detections = 0usize;
    let mut negative = false;
    let mut round = 0u64;
    while detections < 100_000 {
        let m = [4usize, 16, 64][round as usize % 3];
        let c = Constellation::new(m).unwrap();
        let d = 8;
        let mut r = rng_from(round, &[906]);
        let params = StructNetParams::new(uniform(d, d, &mut r) * 2.0, Mlp::random(d, 32, 2 * d, &mut r)).unwrap();
        let y = uniform(d, 250, &mut r) * (2 * c.k() + 1) as f64 * 2.0;
        for post in posteriors(&params, &y, c.k()).unwrap() {
            post_dev = post_dev.max((post.probs.iter().sum::<f64>() - 1.0).abs());
            negative |= post.probs.iter().any(|p| *p < 0.0);
            detections += 1;
        }
        round += 1;
    }
    let pass = softmax_dev <= 1e-12 && post_dev <= 1e-9 && !negative;
    report(
        "normalization",
        pass,
        format!("{rows} softmax rows off by <= {softmax_dev:.2e}; {detections} posteriors off by <= {post_dev:.2e}"),
    );
    assert!(pass);
}

fn sd_mismatches(n: usize, m: usize, trials: usize, path: u64) -> usize {
    let c = Constellation::new(m).unwrap();
    let mut rng = rng_from(SEED, &[path]);
    let mut mismatches = 0;
    for _ in 0..trials {
        let h = DMatrix::from_fn(n, n, |_, _| cn(&mut rng));
        let x = DVector::from_fn(n, |_, _| c.random_point(&mut rng));
        let sigma = 10f64.powf(-rng.random_range(0.0..30.0) / 20.0);
        let y = &h * x + DVector::from_fn(n, |_, _| cn(&mut rng) * sigma);
        let sd = sphere_decode(&y, &h, &c, RadiusPolicy::Infinite).unwrap();
        let ml = ml_detect_bruteforce(&y, &h, &c).unwrap();
        mismatches += (sd.symbols != ml) as usize;
    }
    mismatches
}

#[test]
fn sphere_decoder_is_exact_ml() {
    let a = sd_mismatches(2, 16, 1000, 907);
    let b = sd_mismatches(4, 4, 100, 908);
    let pass = a == 0 && b == 0;
    report(
        "sphere decoder vs brute-force ML",
        pass,
        format!("{a} mismatches on 1000 2x2 16-QAM, {b} on 100 4x4 QPSK"),
    );
    assert!(pass);
}

fn desk_spec(mod_order: usize) -> SubframeSpec {
    SubframeSpec {
        n_sc: 64,
        n_cp: 16,
        mod_order,
        ..SubframeSpec::default()
    }
}

#[test]
fn ablation_ordering_on_the_default_channel() {
    let scenario = Scenario::default_tdl(desk_spec(64));
    let cells: Vec<_> = ABLATION_ORDER
        .iter()
        .map(|&v| run_montecarlo(&DetectorConfig::new(v), &scenario, &[21.0], 50, SEED, 1, |_| {}).unwrap())
        .collect();
    let pass = check_ordering(&cells);
    let detail = cells
        .iter()
        .map(|c| format!("{} {:.5}", c[0].detector, c[0].median_ber()))
        .collect::<Vec<_>>()
        .join(" <= ");
    report("ablation ordering at 21 dB over 50 subframes (median BER)", pass, detail);
    assert!(pass);
}

#[test]
fn pa_backoff_hurts_the_baseline_more() {
    let ibo = [9.0, 7.0, 5.0, 3.0];
    let variants = [Variant::SphereDecoder(CsiSource::Interpolated), Variant::RcAttStructNetDf];
    let mut medians = [Vec::new(), Vec::new()];
    for &b in &ibo {
        let mut scenario = Scenario::default_tdl(desk_spec(16));
        scenario.pa = PaConfig {
            enabled: true,
            x_sat: 1.0,
            rho: 3.0,
            ibo_db: b,
            literal_exponent: false,
        };
        for (k, &v) in variants.iter().enumerate() {
            let cell = run_montecarlo(&DetectorConfig::new(v), &scenario, &[21.0], 30, SEED, 1, |_| {}).unwrap().remove(0);
            medians[k].push(cell.median_ber());
        }
    }
    let pass = check_pa_trend(&ibo, &medians[0], &medians[1]);
    let fmt = |v: &[f64]| v.iter().map(|b| format!("{b:.4}")).collect::<Vec<_>>().join(" ");
    report(
        "PA trend, IBO 9 to 3 dB over 30 subframes",
        pass,
        format!(
            "SphereDecoder{{Interpolated}} [{}] x{:.3}, RcAttStructNetDf [{}] x{:.3}",
            fmt(&medians[0]),
            medians[0][3] / medians[0][0],
            fmt(&medians[1]),
            medians[1][3] / medians[1][0]
        ),
    );
    assert!(pass);
}

/// `J0(x) = (1/pi) * integral_0^pi cos(x sin t) dt`, composite Simpson.
fn bessel_j0(x: f64) -> f64 {
    let n = 2000;
    let h = PI / n as f64;
    let f = |t: f64| (x * t.sin()).cos();
    let mut s = f(0.0) + f(PI);
    for k in 1..n {
        s += if k % 2 == 1 { 4.0 } else { 2.0 } * f(k as f64 * h);
    }
    s * h / 3.0 / PI
}

#[test]
fn conventional_baseline_and_channel_sanity() {
    // oracle LMMSE, static channel, 40 dB
    let spec = SubframeSpec::default();
    let mut scenario = Scenario::default_tdl(spec.clone());
    scenario.profile.model = ChannelModel::BlockStaticGaussian;
    let cell = run_montecarlo(
        &DetectorConfig::new(Variant::Lmmse(CsiSource::Oracle)),
        &scenario,
        &[40.0],
        8,
        SEED,
        1,
        |_| {},
    )
    .unwrap()
    .remove(0);
    let lmmse_ok = cell.bits >= 1_000_000 && cell.ber() < 1e-4;

    // OFDM round trip
    let mut rng = rng_from(SEED, &[909]);
    let mut round_trip = 0.0f64;
    for (n_sc, n_cp) in [(64, 16), (512, 32), (12, 3)] {
        let modem = OfdmModem::new(n_sc, n_cp);
        let x = DMatrix::from_fn(4, n_sc, |_, _| cn(&mut rng));
        let back = modem.demodulate(&modem.modulate(&x));
        round_trip = round_trip.max((&back - &x).norm() / x.norm());
    }
    let ofdm_ok = round_trip < 1e-10;

    // Gray adjacency, exhaustive
    let mut gray_bad = 0;
    for m in [4usize, 16, 64] {
        let c = Constellation::new(m).unwrap();
        let bits_per = c.bits_per_symbol();
        let words: Vec<Vec<u8>> = (0..m).map(|w| (0..bits_per).rev().map(|b| ((w >> b) & 1) as u8).collect()).collect();
        let pts: Vec<(i32, i32)> = words.iter().map(|w| c.lattice_of(map_bits_to_qam(w, m).unwrap()[0])).collect();
        for a in 0..m {
            for b in 0..m {
                let d2 = (pts[a].0 - pts[b].0).pow(2) + (pts[a].1 - pts[b].1).pow(2);
                let ham = words[a].iter().zip(&words[b]).filter(|(x, y)| x != y).count();
                if d2 == 4 && ham != 1 {
                    gray_bad += 1;
                }
            }
        }
    }

    // Jakes autocorrelation against J0 and tap powers against the profile
    let fd_norm = 0.01;
    let profile = ChannelProfile {
        power_delay_profile: vec![1.0],
        doppler_hz: fd_norm,
        sample_rate_hz: 1.0,
        model: ChannelModel::TdlJakes,
        n_sinusoids: 32,
    };
    let lags: Vec<usize> = (0..=10).map(|k| 10 * k).collect();
    let n_real = 10_000;
    let mut acc = vec![C64::new(0.0, 0.0); lags.len()];
    for r in 0..n_real {
        let ch = generate_taps(&profile, 1, 1, 101, 1_000_000 + r as u64);
        let s = ch.tap_series(0, 0, 0);
        for (a, &l) in acc.iter_mut().zip(&lags) {
            *a += s[l] * s[0].conj();
        }
    }
    let acf_err = lags
        .iter()
        .zip(&acc)
        .map(|(&l, a)| (a.re / n_real as f64 - bessel_j0(2.0 * PI * fd_norm * l as f64)).abs())
        .fold(0.0, f64::max);
    let tdl = Scenario::default_tdl(desk_spec(16)).profile;
    let mut power = vec![0.0; tdl.n_taps()];
    let n_pow = 10_000;
    for r in 0..n_pow {
        let ch = generate_taps(&tdl, 1, 1, 1, 2_000_000 + r as u64);
        for (l, p) in power.iter_mut().enumerate() {
            *p += ch.tap(0, 0, l, 0).norm_sqr() / n_pow as f64;
        }
    }
    let pow_err = power
        .iter()
        .zip(&tdl.power_delay_profile)
        .map(|(p, q)| (p - q).abs() / q)
        .fold(0.0, f64::max);
    let channel_ok = acf_err <= 0.05 && pow_err <= 0.03;

    let pass = lmmse_ok && ofdm_ok && gray_bad == 0 && channel_ok;
    report(
        "conventional baseline and channel sanity",
        pass,
        format!(
            "Lmmse{{Oracle}} BER {:.2e} over {} bits; OFDM round trip {round_trip:.1e}; {gray_bad} Gray violations; \
             J0 error {acf_err:.4}; tap power error {:.3}",
            cell.ber(),
            cell.bits,
            pow_err
        ),
    );
    assert!(pass);
}
