//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line.

mod common;

use std::time::Instant;

use num_complex::Complex64;
use rand::Rng;

use common::{fd_violations, micro_instance};
use vbinet::baselines::{oamp_detect, oampnet_forward};
use vbinet::channel::{complex_gaussian, draw_sample, gen_iid, noise_var_for_snr, ChannelSource};
use vbinet::constellation::Constellation;
use vbinet::detection::NetworkKind;
use vbinet::harness::{
    evaluate, run_experiment, Counts, Detector, DetectorImpl, DetectorSpec, EvalChannels, EvalSetup, ExperimentSpec,
    StoppingRule,
};
use vbinet::ifvb::{ifvb_detect, improved_ifvb_with_svd, relaxed_residual, t_diagonal, IfvbConfig, TChoice};
use vbinet::numerics::{norm_sqr, sub_vec, truncated_svd, ComplexMatrix, ComplexVector};
use vbinet::params::{DetectorParams, Dims, ImprovedVbinetParams, OampnetParams, VbinetParams};
use vbinet::rng::{stream, CHANNEL_FILE_DOMAIN, EVAL_DOMAIN};
use vbinet::training::{train_offline, train_online, ChannelModel, TrainConfig, TrainMode};
use vbinet::unrolled::{improved_vbinet_forward_with, vbinet_forward, VarianceTrace};

fn report(id: u32, ok: bool, details: &str) {
    println!("criterion {id:02} {}: {details}", if ok { "PASS" } else { "FAIL" });
}

fn sd(c: &Counts) -> f64 {
    let p = c.ser();
    (p * (1.0 - p) / c.symbols as f64).sqrt()
}

fn fmt_counts(name: &str, c: &Counts) -> String {
    format!("{name} {:.3e} ({}/{})", c.ser(), c.errors, c.symbols)
}

fn random_setup(source: ChannelSource, dims: Dims, seed: u64) -> EvalSetup {
    EvalSetup {
        channels: EvalChannels::Random(ChannelModel::new(source, dims).unwrap()),
        constellation: Constellation::qam(4).unwrap(),
        seed,
    }
}

fn ifvb(t_choice: TChoice) -> Detector {
    Detector::new(DetectorImpl::Ifvb(IfvbConfig { t_choice, ..IfvbConfig::default() }))
}

fn network(p: DetectorParams) -> Detector {
    Detector::new(DetectorImpl::Network(p))
}

fn train(cfg: &TrainConfig) -> DetectorParams {
    train_offline(cfg, None).unwrap().params
}

fn max_abs_diff(a: &[ComplexVector], b: &[ComplexVector]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(u, v)| sub_vec(u, v).into_iter().map(|d| d.norm()))
        .fold(0.0, f64::max)
}

#[test]
fn criterion_01_posterior_moments_match_closed_form() {
    let c = Constellation::qam(4).unwrap();
    let a = std::f64::consts::FRAC_1_SQRT_2;
    let mut rng = stream(1, EVAL_DOMAIN, 0);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let r = Complex64::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let phi = 10f64.powf(rng.random_range(-3.0..2.0));
        let m = c.posterior_moments(r, phi);

        let tanh_mean = Complex64::new(a * (2.0 * a * r.re / phi).tanh(), a * (2.0 * a * r.im / phi).tanh());
        let tanh_var = 1.0 - tanh_mean.norm_sqr();

        let logw: Vec<f64> = c.points().iter().map(|p| -(p - r).norm_sqr() / phi).collect();
        let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = w.iter().sum();
        let bf_mean: Complex64 = c.points().iter().zip(&w).map(|(p, wi)| p * *wi).sum::<Complex64>() / z;
        let bf_second: f64 = c.points().iter().zip(&w).map(|(p, wi)| p.norm_sqr() * wi).sum::<f64>() / z;
        let bf_var: f64 = c.points().iter().zip(&w).map(|(p, wi)| (p - bf_mean).norm_sqr() * wi).sum::<f64>() / z;

        for e in [
            (m.mean - tanh_mean).norm(),
            (m.mean - bf_mean).norm(),
            (m.variance - tanh_var).abs(),
            (m.variance - bf_var).abs(),
            (m.second_moment - bf_second).abs(),
            (m.second_moment - 1.0).abs(),
        ] {
            worst = worst.max(e);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = worst <= 1e-10 && secs < 1.0;
    report(1, ok, &format!("max abs error {worst:.2e} over 1e4 draws in {secs:.3} s"));
    assert!(ok);
}

#[test]
fn criterion_02_majorizer_bound() {
    let mut rng = stream(2, EVAL_DOMAIN, 0);
    let mut worst_gap = f64::INFINITY;
    let mut worst_eq: f64 = 0.0;
    for _ in 0..1000 {
        let nt = rng.random_range(1..=8usize);
        let nr = nt + rng.random_range(0..=8usize);
        let h = gen_iid(nr, nt, &mut rng).unwrap().h;
        let draw = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| -> ComplexVector {
            (0..n).map(|_| complex_gaussian(rng, 1.0)).collect()
        };
        let x = draw(nt, &mut rng);
        let z = draw(nt, &mut rng);
        let y = draw(nr, &mut rng);
        let resid = norm_sqr(&sub_vec(&y, &h.mul_vec(&x)));
        let t1 = ComplexMatrix::from_real_diag(&t_diagonal(&h, &TChoice::ScaledIdentity).unwrap());
        worst_gap = worst_gap.min(relaxed_residual(&y, &h, &t1, &x, &z) - resid);
        worst_eq = worst_eq.max((relaxed_residual(&y, &h, &h.gram(), &x, &z) - resid).abs());
    }
    let ok = worst_gap >= -1e-9 && worst_eq <= 1e-9;
    report(
        2,
        ok,
        &format!("min g - residual under T1 {worst_gap:.2e}, max |g - residual| at T = H^H H {worst_eq:.2e}"),
    );
    assert!(ok);
}

#[test]
fn criterion_03_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut failures = Vec::new();
    for kind in NetworkKind::ALL {
        for seed in 0..20 {
            let (p, s, c) = micro_instance(kind, seed);
            let bad = fd_violations(&p, &s, &c, 1e-4, 1e-8);
            if !bad.is_empty() {
                failures.push(format!("{} seed {seed}: {bad:?}", kind.name()));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = failures.is_empty() && secs < 120.0;
    report(3, ok, &format!("5 kinds x 20 instances, {} failing, {secs:.1} s {failures:?}", failures.len()));
    assert!(ok);
}

#[test]
fn criterion_04_reduction_identities() {
    let c4 = Constellation::qam(4).unwrap();
    let c16 = Constellation::qam(16).unwrap();
    let mut vb_err: f64 = 0.0;
    let mut oamp_bitwise = true;
    let mut imp_err: f64 = 0.0;
    for seed in 0..100 {
        let mut rng = stream(seed, EVAL_DOMAIN, 4);
        let nt = rng.random_range(1..=6usize);
        let nr = nt + rng.random_range(0..=6usize);
        let layers = rng.random_range(1..=10usize);
        let c = if seed % 2 == 0 { &c4 } else { &c16 };
        let h = gen_iid(nr, nt, &mut rng).unwrap().h;
        let nv = noise_var_for_snr(&h, rng.random_range(0.0..20.0)).unwrap();
        let s = draw_sample(&h, c, nv, &mut rng).unwrap();

        let psi: Vec<f64> = (0..nt).map(|_| rng.random_range(0.5..3.0)).collect();
        let p = VbinetParams { psi, c: vec![1.0; layers] };
        let net = vbinet_forward(&s.y, &h, c, &p).unwrap();
        let cfg = IfvbConfig { t_choice: TChoice::CustomDiag(p.t_diag()), max_iter: layers, ..IfvbConfig::default() };
        let alg = ifvb_detect(&s.y, &h, c, &cfg).unwrap();
        vb_err = vb_err.max(max_abs_diff(&net.xs, &alg.xs));

        let op = OampnetParams {
            gamma: vec![1.0; layers],
            theta: vec![1.0; layers],
            phi: vec![1.0; layers],
            xi: vec![0.0; layers],
        };
        let a = oampnet_forward(&s.y, &h, c, nv, &op).unwrap();
        let b = oamp_detect(&s.y, &h, c, nv, layers).unwrap();
        oamp_bitwise &= a.xs == b.xs;

        let svd = truncated_svd(&h).unwrap();
        let ip = ImprovedVbinetParams {
            psi: vec![0.0; nt],
            delta: vec![1.0; layers],
            c: vec![1.0; layers],
            kappa: vec![rng.random_range(0.1..2.0); layers],
        };
        let net = improved_vbinet_forward_with(&s.y, &svd, c, &ip, VarianceTrace::Exact).unwrap();
        let cfg = IfvbConfig { max_iter: layers, delta: 1.0, ..IfvbConfig::default() };
        let alg = improved_ifvb_with_svd(&s.y, &svd, c, &cfg).unwrap();
        imp_err = imp_err.max(max_abs_diff(&net.xs, &alg.xs)).max(max_abs_diff(&net.ss, &alg.ss));
    }
    let ok = vb_err <= 1e-12 && oamp_bitwise && imp_err <= 1e-9;
    report(
        4,
        ok,
        &format!(
            "VBINet c=1 vs IFVB {vb_err:.2e}; OAMPNet unit params bitwise {oamp_bitwise}; \
             Improved-VBINet Psi=0 c=1 vs Improved-IFVB {imp_err:.2e}"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_05_ml_is_best() {
    let dims = Dims::new(4, 2);
    let nets: Vec<Detector> = [NetworkKind::Vbinet, NetworkKind::ImprovedVbinet, NetworkKind::Oampnet, NetworkKind::MmnetIid]
        .into_iter()
        .map(|kind| network(train(&TrainConfig { kind, dims, iters: 500, seed: 5, ..TrainConfig::default() })))
        .collect();
    let mut dets = vec![
        Detector::new(DetectorImpl::Ml),
        Detector::new(DetectorImpl::Zf),
        Detector::new(DetectorImpl::Lmmse),
        ifvb(TChoice::ScaledIdentity),
        ifvb(TChoice::DiagGram),
        Detector::new(DetectorImpl::ImprovedIfvb(IfvbConfig::default())),
        Detector::new(DetectorImpl::Oamp(10)),
    ];
    dets.extend(nets);
    let rule = StoppingRule { min_errors: 100, ..StoppingRule::default() };
    let setup = random_setup(ChannelSource::Iid, dims, 5);
    let mut ok = true;
    let mut lines = Vec::new();
    for snr in [0.0, 4.0, 8.0, 12.0] {
        let counts = evaluate(&dets, &setup, snr, 0.0, &rule).unwrap();
        let ml = counts[0];
        let mut worst = f64::INFINITY;
        for (d, k) in dets.iter().zip(&counts).skip(1) {
            let slack = 2.0 * (sd(&ml).powi(2) + sd(k).powi(2)).sqrt();
            let margin = k.ser() + slack - ml.ser();
            if margin < 0.0 {
                ok = false;
                lines.push(format!("{} beats ml at {snr} dB", d.label));
            }
            worst = worst.min(k.ser());
            ok &= k.symbols >= 100_000;
        }
        ok &= ml.symbols >= 100_000;
        lines.push(format!("{snr} dB: {}, best other {worst:.3e}", fmt_counts("ml", &ml)));
    }
    report(5, ok, &lines.join("; "));
    assert!(ok);
}

#[test]
fn criterion_06_diagonal_gram_beats_scaled_identity() {
    let dims = Dims::new(32, 16);
    let dets = [ifvb(TChoice::DiagGram), ifvb(TChoice::ScaledIdentity)];
    let counts = evaluate(&dets, &random_setup(ChannelSource::Iid, dims, 6), 10.0, 0.0, &StoppingRule::default()).unwrap();
    let ok = counts[0].ser() < counts[1].ser() && counts.iter().all(|c| c.symbols >= 100_000);
    report(6, ok, &format!("{}, {}", fmt_counts("T2", &counts[0]), fmt_counts("T1", &counts[1])));
    assert!(ok);
}

#[test]
fn criterion_07_trained_vbinet_beats_ifvb_and_lmmse() {
    let dims = Dims::new(16, 8);
    let mut ok = true;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let cfg = TrainConfig { dims, layers: 10, batch: 128, iters: 3000, lr: 1e-2, seed, ..TrainConfig::default() };
        let dets = [network(train(&cfg)), ifvb(TChoice::DiagGram), Detector::new(DetectorImpl::Lmmse)];
        let counts =
            evaluate(&dets, &random_setup(ChannelSource::Iid, dims, 700 + seed), 10.0, 0.0, &StoppingRule::default()).unwrap();
        ok &= counts[0].ser() < counts[1].ser() && counts[0].ser() < counts[2].ser();
        ok &= counts.iter().all(|c| c.symbols >= 100_000);
        lines.push(format!(
            "seed {seed}: {}, {}, {}",
            fmt_counts("vbinet", &counts[0]),
            fmt_counts("ifvb_t2", &counts[1]),
            fmt_counts("lmmse", &counts[2])
        ));
    }
    report(7, ok, &lines.join("; "));
    assert!(ok);
}

#[test]
fn criterion_08_layer_convergence() {
    let dims = Dims::new(16, 8);
    let base = TrainConfig { dims, batch: 128, iters: 3000, lr: 1e-2, seed: 8, ..TrainConfig::default() };
    let dets = [
        network(train(&TrainConfig { layers: 10, ..base.clone() })),
        network(train(&TrainConfig { layers: 20, ..base })),
    ];
    let rule = StoppingRule { min_errors: 1000, ..StoppingRule::default() };
    let counts = evaluate(&dets, &random_setup(ChannelSource::Iid, dims, 800), 10.0, 0.0, &rule).unwrap();
    let rel = (counts[0].ser() - counts[1].ser()).abs() / counts[1].ser();
    let ok = rel <= 0.1;
    report(
        8,
        ok,
        &format!("{}, {}, relative gap {rel:.3}", fmt_counts("L=10", &counts[0]), fmt_counts("L=20", &counts[1])),
    );
    assert!(ok);
}

#[test]
fn criterion_09_noise_uncertainty() {
    let dims = Dims::new(32, 16);
    let setup = random_setup(ChannelSource::Iid, dims, 9);
    let rule = StoppingRule::default();

    let vb = [network(train(&TrainConfig { dims, iters: 300, seed: 9, ..TrainConfig::default() }))];
    let vb_counts: Vec<Counts> = [-3.0, 0.0, 3.0].iter().map(|&nuf| evaluate(&vb, &setup, 10.0, nuf, &rule).unwrap()[0]).collect();
    let vb_same = vb_counts.windows(2).all(|w| w[0] == w[1]);

    let aware = [
        network(train(&TrainConfig { kind: NetworkKind::Oampnet, dims, iters: 300, seed: 9, ..TrainConfig::default() })),
        network(train(&TrainConfig { kind: NetworkKind::MmnetIid, dims, iters: 1000, seed: 9, ..TrainConfig::default() })),
    ];
    let at0 = evaluate(&aware, &setup, 10.0, 0.0, &rule).unwrap();
    let at3 = evaluate(&aware, &setup, 10.0, 3.0, &rule).unwrap();
    let degrade = at0.iter().zip(&at3).all(|(a, b)| b.ser() > a.ser());
    let ok = vb_same && degrade;
    report(
        9,
        ok,
        &format!(
            "vbinet identical across NUF {vb_same} ({}); {} -> {}; {} -> {}",
            fmt_counts("nuf 0", &vb_counts[1]),
            fmt_counts("oampnet nuf 0", &at0[0]),
            fmt_counts("nuf 3", &at3[0]),
            fmt_counts("mmnet_iid nuf 0", &at0[1]),
            fmt_counts("nuf 3", &at3[1])
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_10_improved_vbinet_on_correlated_channels() {
    let dims = Dims::new(16, 8);
    let source = ChannelSource::Kronecker { rho: 0.8 };
    let base = TrainConfig { dims, layers: 10, iters: 3000, lr: 1e-2, seed: 10, channel: source, ..TrainConfig::default() };
    let dets = [
        network(train(&TrainConfig { kind: NetworkKind::ImprovedVbinet, ..base.clone() })),
        network(train(&base)),
    ];
    let counts = evaluate(&dets, &random_setup(source, dims, 1000), 12.0, 0.0, &StoppingRule::default()).unwrap();
    let ok = counts[0].ser() < counts[1].ser() && counts.iter().all(|c| c.symbols >= 100_000);
    report(
        10,
        ok,
        &format!("{}, {}", fmt_counts("improved_vbinet", &counts[0]), fmt_counts("vbinet", &counts[1])),
    );
    assert!(ok);
}

#[test]
fn criterion_11_mmnet_full_does_not_generalize() {
    let dims = Dims::new(16, 8);
    let model = ChannelModel::new(ChannelSource::Iid, dims).unwrap();
    let trained_on = model.sample(&mut stream(11, CHANNEL_FILE_DOMAIN, 0)).unwrap();
    let fresh = model.sample(&mut stream(11, CHANNEL_FILE_DOMAIN, 1)).unwrap();
    let cfg = TrainConfig {
        kind: NetworkKind::MmnetFull,
        dims,
        iters: 1000,
        seed: 11,
        mode: TrainMode::Online,
        ..TrainConfig::default()
    };
    let params = train_online(std::slice::from_ref(&trained_on), &cfg, None).unwrap().remove(0).params;
    let det = [network(params)];
    let on = |h: ComplexMatrix| EvalSetup {
        channels: EvalChannels::Fixed(vec![h]),
        constellation: Constellation::qam(4).unwrap(),
        seed: 11,
    };
    let rule = StoppingRule::default();
    let same = evaluate(&det, &on(trained_on), 10.0, 0.0, &rule).unwrap()[0];
    let other = evaluate(&det, &on(fresh), 10.0, 0.0, &rule).unwrap()[0];
    let floor = same.ser().max(1.0 / same.symbols as f64);
    let ok = other.ser() >= 5.0 * floor;
    report(
        11,
        ok,
        &format!("{}, {}, ratio {:.1}", fmt_counts("trained channel", &same), fmt_counts("fresh channel", &other), other.ser() / floor),
    );
    assert!(ok);
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn criterion_12_noise_precision_recovers_noise_variance() {
    let c = Constellation::qam(4).unwrap();
    let ratios = |choice: TChoice| -> Vec<f64> {
        (0..100u64)
            .map(|n| {
                let mut rng = stream(12, EVAL_DOMAIN, n);
                let h = gen_iid(32, 16, &mut rng).unwrap().h;
                let nv = noise_var_for_snr(&h, 10.0).unwrap();
                let s = draw_sample(&h, &c, nv, &mut rng).unwrap();
                let cfg = IfvbConfig { t_choice: choice.clone(), ..IfvbConfig::default() };
                let eps = *ifvb_detect(&s.y, &h, &c, &cfg).unwrap().eps.last().unwrap();
                (1.0 / eps) / nv
            })
            .collect()
    };
    let t1 = median(ratios(TChoice::ScaledIdentity));
    let t2 = median(ratios(TChoice::DiagGram));
    let ok = (0.5..=2.0).contains(&t1);
    report(12, ok, &format!("median (1/eps)/sigma^2 over 100 runs: T1 {t1:.3}, T2 {t2:.3}"));
    assert!(ok);
}

#[test]
fn criterion_13_rerun_gives_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = ExperimentSpec {
        detectors: vec![
            DetectorSpec::Zf,
            DetectorSpec::Lmmse,
            DetectorSpec::Ifvb { t_choice: TChoice::DiagGram, iterations: 20, label: None },
            DetectorSpec::Oamp { iterations: 5, label: None },
            DetectorSpec::Train { kind: NetworkKind::Vbinet, label: None },
        ],
        dims: Dims::new(8, 4),
        snr_db: vec![2.0, 8.0],
        stopping: StoppingRule { min_errors: 100, min_symbols: 4_000, max_symbols: 40_000, block_symbols: 2_000 },
        train: TrainConfig { iters: 30, batch: 16, layers: 5, ..TrainConfig::default() },
        seed: 13,
        ..ExperimentSpec::default()
    };
    spec.output = dir.path().join("first.csv");
    run_experiment(&spec).unwrap();
    spec.output = dir.path().join("second.csv");
    run_experiment(&spec).unwrap();
    let a = std::fs::read(dir.path().join("first.csv")).unwrap();
    let b = std::fs::read(dir.path().join("second.csv")).unwrap();
    let ok = a == b && !a.is_empty();
    report(13, ok, &format!("two runs, {} bytes each, identical {}", a.len(), a == b));
    assert!(ok);
}
