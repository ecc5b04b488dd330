use num_complex::Complex64;
use vbinet::channel::{
    draw_sample, gen_iid, gen_kronecker, load_channels, noise_var_for_snr, parse_channels, save_channels, KroneckerModel,
};
use vbinet::constellation::Constellation;
use vbinet::numerics::{hermitian_eigen, norm_sqr, sub_vec, ComplexMatrix};
use vbinet::rng::{stream, EVAL_DOMAIN};
use vbinet::Error;

#[test]
fn iid_entry_moments() {
    let mut rng = stream(1, EVAL_DOMAIN, 0);
    let mut power = 0.0;
    let mut mean = Complex64::new(0.0, 0.0);
    let draws = 62_500;
    for _ in 0..draws {
        let h = gen_iid(4, 4, &mut rng).unwrap().h;
        for z in h.data() {
            power += z.norm_sqr();
            mean += z;
        }
    }
    let n = (draws * 16) as f64;
    assert!((power / n - 1.0).abs() < 0.01, "power {}", power / n);
    assert!((mean / n).norm() < 0.01);
}

#[test]
fn kronecker_receive_covariance() {
    let rho = 0.8;
    let model = KroneckerModel::new(16, 16, rho).unwrap();
    let mut rng = stream(2, EVAL_DOMAIN, 0);
    let draws = 100_000;
    // Column 0 of H has covariance R_H * (T_H)_00 = R_H.
    let mut cov = vec![Complex64::new(0.0, 0.0); 16 * 16];
    for _ in 0..draws {
        let h = model.sample(&mut rng).h;
        let col = h.column(0);
        for i in 0..16 {
            for j in 0..16 {
                cov[i * 16 + j] += col[i] * col[j].conj();
            }
        }
    }
    for i in 0..16 {
        for j in 0..16 {
            let est = cov[i * 16 + j] / draws as f64;
            let want = rho.powi((i as i32 - j as i32).abs());
            assert!((est.re - want).abs() < 0.02 && est.im.abs() < 0.02, "({i},{j}) {est} vs {want}");
        }
    }
}

fn condition_number(h: &ComplexMatrix) -> f64 {
    let ev = hermitian_eigen(&h.gram()).unwrap().values;
    (ev[0] / ev[ev.len() - 1]).sqrt()
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
fn correlation_raises_condition_number() {
    let conds = |rho: f64| -> f64 {
        median(
            (0..100)
                .map(|s| condition_number(&gen_kronecker(16, 16, rho, &mut stream(s, EVAL_DOMAIN, 7)).unwrap().h))
                .collect(),
        )
    };
    assert!(conds(0.8) > conds(0.0));
}

#[test]
fn rho_zero_frobenius_distribution_matches_iid() {
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
        (m, var)
    };
    let n = 5_000;
    let a: Vec<f64> = (0..n)
        .map(|s| gen_iid(8, 4, &mut stream(s, EVAL_DOMAIN, 1)).unwrap().h.frobenius_norm_sqr())
        .collect();
    let b: Vec<f64> = (0..n)
        .map(|s| gen_kronecker(8, 4, 0.0, &mut stream(s, EVAL_DOMAIN, 2)).unwrap().h.frobenius_norm_sqr())
        .collect();
    let (ma, va) = stats(&a);
    let (mb, vb) = stats(&b);
    // ||H||_F^2 is Gamma(32, 1): mean 32, variance 32.
    let se = ((va + vb) / n as f64).sqrt();
    assert!((ma - mb).abs() < 4.0 * se, "{ma} vs {mb}");
    assert!((va / vb - 1.0).abs() < 0.1, "{va} vs {vb}");
}

#[test]
fn noise_var_examples() {
    let h = ComplexMatrix::from_fn(4, 2, |_, _| Complex64::new(1.0, 0.0));
    assert!((noise_var_for_snr(&h, 0.0).unwrap() - 2.0).abs() < 1e-15);
    assert!(noise_var_for_snr(&h, 300.0).unwrap() < 1e-29);
    assert!(noise_var_for_snr(&ComplexMatrix::zeros(2, 2), 0.0).is_err());
}

fn snr_audit(make: impl Fn(u64) -> ComplexMatrix) {
    let c = Constellation::qam(4).unwrap();
    let snr_db = 7.0;
    let (mut sig, mut noise) = (0.0, 0.0);
    for s in 0..100_000u64 {
        let h = make(s);
        let mut rng = stream(s, EVAL_DOMAIN, 99);
        let nv = noise_var_for_snr(&h, snr_db).unwrap();
        let smp = draw_sample(&h, &c, nv, &mut rng).unwrap();
        let hx = h.mul_vec(&smp.x);
        sig += norm_sqr(&hx);
        noise += norm_sqr(&sub_vec(&smp.y, &hx));
    }
    let measured = 10.0 * (sig / noise).log10();
    assert!((measured - snr_db).abs() < 0.05, "measured {measured} dB");
}

#[test]
fn snr_audit_iid() {
    snr_audit(|s| gen_iid(4, 2, &mut stream(s, EVAL_DOMAIN, 5)).unwrap().h);
}

#[test]
fn snr_audit_kronecker() {
    let model = KroneckerModel::new(4, 2, 0.7).unwrap();
    snr_audit(|s| model.sample(&mut stream(s, EVAL_DOMAIN, 6)).h);
}

#[test]
fn noise_moment() {
    let c = Constellation::qam(16).unwrap();
    let h = gen_iid(100, 4, &mut stream(3, EVAL_DOMAIN, 0)).unwrap().h;
    let nv = 0.37;
    let mut rng = stream(3, EVAL_DOMAIN, 1);
    let mut acc = 0.0;
    let draws = 10_000;
    for _ in 0..draws {
        let s = draw_sample(&h, &c, nv, &mut rng).unwrap();
        acc += norm_sqr(&sub_vec(&s.y, &h.mul_vec(&s.x)));
    }
    let per_entry = acc / (draws * 100) as f64;
    assert!((per_entry / nv - 1.0).abs() < 0.01, "{per_entry}");
}

#[test]
fn channel_file_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ch.bin");
    let hs: Vec<ComplexMatrix> = (0..3).map(|s| gen_iid(5, 3, &mut stream(s, EVAL_DOMAIN, 0)).unwrap().h).collect();
    save_channels(&path, &hs).unwrap();
    let back = load_channels(&path).unwrap();
    assert_eq!(back.len(), 3);
    for (k, (a, b)) in hs.iter().zip(&back).enumerate() {
        assert_eq!(a.data(), b.h.data());
        assert_eq!(b.subcarrier, Some(k));
    }

    let bytes = std::fs::read(&path).unwrap();
    let header_len = bytes.iter().position(|&b| b == b'\n').unwrap() + 1;
    let record = 5 * 3 * 16;
    let cut = &bytes[..header_len + 2 * record + 7];
    match parse_channels(cut) {
        Err(Error::Parse { offset, .. }) => assert_eq!(offset, (header_len + 2 * record) as u64),
        other => panic!("expected parse error, got {other:?}"),
    }

    let many: Vec<ComplexMatrix> = (0..127).map(|_| ComplexMatrix::identity(1)).collect();
    save_channels(&path, &many).unwrap();
    let body = std::fs::read(&path).unwrap();
    let hl = body.iter().position(|&b| b == b'\n').unwrap() + 1;
    let mut forged = b"{\"n_channels\":128,\"n_r\":1,\"n_t\":1,\"dtype\":\"c128le\"}\n".to_vec();
    forged.extend_from_slice(&body[hl..]);
    assert!(matches!(parse_channels(&forged), Err(Error::Dimension(_))));
}
