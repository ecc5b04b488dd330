use num_complex::Complex64;
use proptest::prelude::*;
use rand::Rng;

use vbinet::baselines::{oamp_detect, oampnet_forward};
use vbinet::channel::{complex_gaussian, draw_sample, gen_iid, noise_var_for_snr, ChannelSource, KroneckerModel};
use vbinet::classic::{detect_lmmse, detect_ml, detect_zf, lmmse_receive_form};
use vbinet::constellation::Constellation;
use vbinet::detection::NetworkKind;
use vbinet::harness::{evaluate, Detector, DetectorImpl, EvalChannels, EvalSetup, StoppingRule};
use vbinet::ifvb::{ifvb_detect, improved_ifvb_detect, relaxed_residual, t_diagonal, IfvbConfig, TChoice};
use vbinet::numerics::{norm_sqr, sub_vec, ComplexMatrix, ComplexVector};
use vbinet::params::{init_params, Dims, OampnetParams, VbinetParams};
use vbinet::rng::{stream, EVAL_DOMAIN};
use vbinet::training::{network_forward, ChannelModel};
use vbinet::unrolled::vbinet_forward;

fn random_vec<R: Rng>(n: usize, rng: &mut R) -> ComplexVector {
    (0..n).map(|_| complex_gaussian(rng, 1.0)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn majorizer_bounds_residual(seed in any::<u64>(), nt in 1usize..6, extra in 0usize..4) {
        let mut rng = stream(seed, EVAL_DOMAIN, 0);
        let nr = nt + extra;
        let h = gen_iid(nr, nt, &mut rng).unwrap().h;
        let (x, z, y) = (random_vec(nt, &mut rng), random_vec(nt, &mut rng), random_vec(nr, &mut rng));
        let t1 = ComplexMatrix::from_real_diag(&t_diagonal(&h, &TChoice::ScaledIdentity).unwrap());
        let resid = norm_sqr(&sub_vec(&y, &h.mul_vec(&x)));
        prop_assert!(relaxed_residual(&y, &h, &t1, &x, &z) >= resid - 1e-9);
        prop_assert!((relaxed_residual(&y, &h, &h.gram(), &x, &z) - resid).abs() <= 1e-9 * (1.0 + resid));
    }

    #[test]
    fn unit_damping_reduces_to_ifvb(seed in any::<u64>()) {
        let mut rng = stream(seed, EVAL_DOMAIN, 1);
        let c = Constellation::qam(4).unwrap();
        let h = gen_iid(6, 3, &mut rng).unwrap().h;
        let s = draw_sample(&h, &c, 0.2, &mut rng).unwrap();
        let p = VbinetParams { psi: vec![2.1, 2.7, 2.4], c: vec![1.0; 4] };
        let net = vbinet_forward(&s.y, &h, &c, &p).unwrap();
        let cfg = IfvbConfig { t_choice: TChoice::CustomDiag(p.t_diag()), max_iter: 4, ..IfvbConfig::default() };
        let alg = ifvb_detect(&s.y, &h, &c, &cfg).unwrap();
        for (a, b) in net.xs.iter().zip(&alg.xs) {
            prop_assert!(sub_vec(a, b).iter().all(|d| d.norm() <= 1e-12));
        }
    }

    #[test]
    fn oampnet_unit_params_bitwise(seed in any::<u64>()) {
        let mut rng = stream(seed, EVAL_DOMAIN, 2);
        let c = Constellation::qam(16).unwrap();
        let h = gen_iid(8, 4, &mut rng).unwrap().h;
        let s = draw_sample(&h, &c, 0.1, &mut rng).unwrap();
        let p = OampnetParams { gamma: vec![1.0; 3], theta: vec![1.0; 3], phi: vec![1.0; 3], xi: vec![0.0; 3] };
        prop_assert_eq!(oampnet_forward(&s.y, &h, &c, 0.1, &p).unwrap().xs, oamp_detect(&s.y, &h, &c, 0.1, 3).unwrap().xs);
    }
}

#[test]
fn ml_residual_is_minimal() {
    let c = Constellation::qam(4).unwrap();
    for seed in 0..300 {
        let mut rng = stream(seed, EVAL_DOMAIN, 3);
        let h = gen_iid(4, 2, &mut rng).unwrap().h;
        let nv = noise_var_for_snr(&h, 4.0).unwrap();
        let s = draw_sample(&h, &c, nv, &mut rng).unwrap();
        let resid = |hard: &[usize]| norm_sqr(&sub_vec(&s.y, &h.mul_vec(&c.symbols(hard))));
        let ml = resid(&detect_ml(&s.y, &h, &c).unwrap().hard);
        let others = [
            detect_zf(&s.y, &h, &c).unwrap().hard,
            detect_lmmse(&s.y, &h, nv, &c).unwrap().hard,
            ifvb_detect(&s.y, &h, &c, &IfvbConfig::default()).unwrap().result.hard,
            oamp_detect(&s.y, &h, &c, nv, 10).unwrap().result.hard,
        ];
        for o in &others {
            assert!(ml <= resid(o) + 1e-12);
        }
    }
}

#[test]
fn lmmse_mse_not_above_zf() {
    let c = Constellation::qam(4).unwrap();
    let (mut zf, mut lm) = (0.0, 0.0);
    let h = gen_iid(32, 16, &mut stream(4, EVAL_DOMAIN, 0)).unwrap().h;
    let mut rng = stream(4, EVAL_DOMAIN, 1);
    for _ in 0..10_000 {
        let nv = noise_var_for_snr(&h, 5.0).unwrap();
        let s = draw_sample(&h, &c, nv, &mut rng).unwrap();
        zf += norm_sqr(&sub_vec(&detect_zf(&s.y, &h, &c).unwrap().xhat, &s.x));
        lm += norm_sqr(&sub_vec(&lmmse_receive_form(&s.y, &h, nv).unwrap(), &s.x));
    }
    assert!(lm <= zf, "lmmse {lm} zf {zf}");
}

#[test]
fn ifvb_precisions_stay_positive() {
    let c = Constellation::qam(16).unwrap();
    for (k, choice) in [TChoice::ScaledIdentity, TChoice::DiagGram, TChoice::CustomDiag(vec![0.5; 4])]
        .into_iter()
        .enumerate()
    {
        for seed in 0..50 {
            let mut rng = stream(seed, EVAL_DOMAIN, 10 + k as u64);
            let h = gen_iid(8, 4, &mut rng).unwrap().h;
            let s = draw_sample(&h, &c, 0.05, &mut rng).unwrap();
            let cfg = IfvbConfig { t_choice: choice.clone(), max_iter: 30, ..IfvbConfig::default() };
            let tr = ifvb_detect(&s.y, &h, &c, &cfg).unwrap();
            assert_eq!(tr.xs.len(), 31);
            assert!(tr.eps.iter().all(|e| *e > 0.0 && e.is_finite()));
        }
    }
}

#[test]
fn untrained_networks_are_finite() {
    let c = Constellation::qam(4).unwrap();
    let dims = Dims::new(8, 4);
    let anchor = gen_iid(8, 4, &mut stream(0, EVAL_DOMAIN, 50)).unwrap().h;
    for kind in NetworkKind::ALL {
        let p = init_params(kind, dims, 5, Some(&anchor)).unwrap();
        for n in 0..1000u64 {
            let mut rng = stream(n, EVAL_DOMAIN, 51);
            let h = gen_iid(8, 4, &mut rng).unwrap().h;
            let nv = noise_var_for_snr(&h, (n % 16) as f64).unwrap();
            let s = draw_sample(&h, &c, nv, &mut rng).unwrap();
            let tr = network_forward(&p, &s.y, &h, None, &c, nv).unwrap();
            assert!(tr.xs.iter().flatten().all(|z| z.is_finite()), "{} sample {n}", kind.name());
        }
    }
}

#[test]
fn vbinet_family_ignores_presented_noise_variance() {
    let c = Constellation::qam(4).unwrap();
    let dims = Dims::new(6, 3);
    let mut rng = stream(8, EVAL_DOMAIN, 0);
    let h = gen_iid(6, 3, &mut rng).unwrap().h;
    let s = draw_sample(&h, &c, 0.3, &mut rng).unwrap();
    for kind in [NetworkKind::Vbinet, NetworkKind::ImprovedVbinet] {
        let p = init_params(kind, dims, 4, None).unwrap();
        let a = network_forward(&p, &s.y, &h, None, &c, 0.3).unwrap();
        let b = network_forward(&p, &s.y, &h, None, &c, 17.0).unwrap();
        assert_eq!(a, b);
    }
    let p = init_params(NetworkKind::Oampnet, dims, 4, None).unwrap();
    let a = network_forward(&p, &s.y, &h, None, &c, 0.3).unwrap();
    let b = network_forward(&p, &s.y, &h, None, &c, 17.0).unwrap();
    assert_ne!(a.xs, b.xs);
}

#[test]
fn improved_ifvb_beats_t1_on_correlated_channels() {
    let dims = Dims::new(32, 16);
    let setup = EvalSetup {
        channels: EvalChannels::Random(ChannelModel::new(ChannelSource::Kronecker { rho: 0.8 }, dims).unwrap()),
        constellation: Constellation::qam(4).unwrap(),
        seed: 11,
    };
    let dets = [
        Detector::new(DetectorImpl::ImprovedIfvb(IfvbConfig::default())),
        Detector::new(DetectorImpl::Ifvb(IfvbConfig { t_choice: TChoice::ScaledIdentity, ..IfvbConfig::default() })),
    ];
    let rule = StoppingRule { min_errors: 100, ..StoppingRule::default() };
    let counts = evaluate(&dets, &setup, 10.0, 0.0, &rule).unwrap();
    assert!(counts.iter().all(|c| c.symbols >= 100_000));
    assert!(counts[0].ser() < counts[1].ser(), "{counts:?}");
}

#[test]
fn improved_ifvb_runs_on_kronecker_samples() {
    let c = Constellation::qam(16).unwrap();
    let model = KroneckerModel::new(8, 4, 0.9).unwrap();
    for seed in 0..20 {
        let mut rng = stream(seed, EVAL_DOMAIN, 60);
        let h = model.sample(&mut rng).h;
        let s = draw_sample(&h, &c, 0.01, &mut rng).unwrap();
        let tr = improved_ifvb_detect(&s.y, &h, &c, &IfvbConfig::default()).unwrap();
        assert_eq!(tr.ss.len(), 101);
        assert!(tr.eps.iter().all(|e| *e > 0.0));
        let x: Vec<Complex64> = tr.result.xhat.clone();
        assert!(x.iter().all(|z| z.is_finite()));
    }
}
