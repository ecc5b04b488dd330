//! Learned comparison detectors that need the noise variance: OAMPNet (and
//! OAMP, its untrained special case), MMNet-iid and MMNet with full
//! trainable linear estimators.
//!
//! OAMPNet's linear step is evaluated in the `N_t x N_t` domain:
//! `v² H^H (v² H H^H + σ² I)^{-1} = v² (v² H^H H + σ² I)^{-1} H^H`, so every
//! layer needs one small Hermitian inverse. With `M = v G + σ² I`,
//! `G = H^H H` and `B = M^{-1} G` (Hermitian, since `M^{-1}` and `G`
//! commute), the normalized estimator is `W = α M^{-1} H^H` with
//! `α = N_t / tr B`, so `W H = α B`.

use num_complex::Complex64;

use crate::constellation::Constellation;
use crate::detection::DetectionTrace;
use crate::error::{Error, Result};
use crate::numerics::{hermitian_inverse, inner_re, norm_sqr, sub_vec, ComplexMatrix, ComplexVector};
use crate::params::{MmnetFullLayer, MmnetFullParams, MmnetIidParams, OampnetParams};
use crate::unrolled::{add_loss_adjoint, check_finite, trace_loss};

/// Lower clamp on OAMP's signal-error variance estimate.
pub const V_FLOOR: f64 = 1e-9;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

fn check_inputs(y: &[Complex64], h: &ComplexMatrix, noise_var: f64) -> Result<()> {
    if y.len() != h.rows() {
        return Err(Error::Dimension(format!("y has {} entries, H has {} rows", y.len(), h.rows())));
    }
    if !(noise_var > 0.0) || !noise_var.is_finite() {
        return Err(Error::InvalidArgument(format!("noise_var must be positive, got {noise_var}")));
    }
    Ok(())
}

/// Channel quantities shared by every layer.
struct OampChannel {
    gram: ComplexMatrix,
    tr_gram: f64,
}

impl OampChannel {
    fn new(h: &ComplexMatrix) -> Self {
        let gram = h.gram();
        let tr_gram = gram.trace().re;
        Self { gram, tr_gram }
    }
}

/// Per-layer linear-step quantities that do not depend on the learnable
/// parameters.
struct OampLinear {
    e: ComplexVector,
    grad: ComplexVector,
    v: f64,
    v_clamped: bool,
    minv: ComplexMatrix,
    b: ComplexMatrix,
    tr_b: f64,
    alpha: f64,
    u: ComplexVector,
    /// `Re tr(B M^{-1})`, i.e. `tr(W W^H) / α²`.
    s: f64,
}

fn oamp_linear(y: &[Complex64], h: &ComplexMatrix, ch: &OampChannel, x: &[Complex64], noise_var: f64) -> Result<OampLinear> {
    let nt = h.cols();
    let nr = h.rows();
    let e = sub_vec(y, &h.mul_vec(x));
    let grad = h.adjoint_mul_vec(&e);
    let raw = (norm_sqr(&e) - nr as f64 * noise_var) / ch.tr_gram;
    let v_clamped = !(raw > V_FLOOR);
    let v = if v_clamped { V_FLOOR } else { raw };
    let m = ch.gram.scale_real(v).add_identity(noise_var);
    let minv = hermitian_inverse(&m)?;
    let b = minv.matmul(&ch.gram);
    let tr_b = b.trace().re;
    let alpha = nt as f64 / tr_b;
    let u = minv.mul_vec(&grad);
    let s = b.matmul(&minv).trace().re;
    Ok(OampLinear {
        e,
        grad,
        v,
        v_clamped,
        minv,
        b,
        tr_b,
        alpha,
        u,
        s,
    })
}

struct OampnetLayer {
    lin: OampLinear,
    r: ComplexVector,
    sigma2: f64,
    mu: ComplexVector,
    /// `||I - θ α B||_F^2`.
    p: f64,
}

fn oampnet_run(
    y: &[Complex64],
    h: &ComplexMatrix,
    c: &Constellation,
    noise_var: f64,
    p: &OampnetParams,
) -> Result<(DetectionTrace, Vec<OampnetLayer>)> {
    check_inputs(y, h, noise_var)?;
    let nt = h.cols();
    let ch = OampChannel::new(h);
    let mut x: ComplexVector = vec![ZERO; nt];
    let mut xs = vec![x.clone()];
    let mut layers = Vec::with_capacity(p.gamma.len());
    for k in 0..p.gamma.len() {
        let (gamma, theta, phi, xi) = (p.gamma[k], p.theta[k], p.phi[k], p.xi[k]);
        let lin = oamp_linear(y, h, &ch, &x, noise_var)?;
        let step = gamma * lin.alpha;
        let r: ComplexVector = x.iter().zip(&lin.u).map(|(xi_, ui)| xi_ + ui * step).collect();
        let ta = theta * lin.alpha;
        let cmat = ComplexMatrix::identity(nt).sub(&lin.b.scale_real(ta));
        let pf = cmat.frobenius_norm_sqr();
        let q = lin.alpha * lin.alpha * lin.s;
        let sigma2 = (lin.v * pf + theta * theta * noise_var * q) / nt as f64;
        let mut mu = Vec::with_capacity(nt);
        let mut x_next = Vec::with_capacity(nt);
        for ri in &r {
            let m = c.posterior_moments(*ri, sigma2).mean;
            mu.push(m);
            x_next.push((m - ri * xi) * phi);
        }
        check_finite(k + 1, "x", &x_next)?;
        layers.push(OampnetLayer { lin, r, sigma2, mu, p: pf });
        x = x_next;
        xs.push(x.clone());
    }
    Ok((DetectionTrace::new(xs, Vec::new(), Vec::new(), c), layers))
}

/// OAMPNet forward pass.
pub fn oampnet_forward(
    y: &[Complex64],
    h: &ComplexMatrix,
    c: &Constellation,
    noise_var: f64,
    p: &OampnetParams,
) -> Result<DetectionTrace> {
    Ok(oampnet_run(y, h, c, noise_var, p)?.0)
}

/// Plain OAMP for `iterations` iterations, written without any learnable
/// parameters. Performs the same floating-point operations as OAMPNet at
/// `(γ, θ, φ, ξ) = (1, 1, 1, 0)`.
pub fn oamp_detect(
    y: &[Complex64],
    h: &ComplexMatrix,
    c: &Constellation,
    noise_var: f64,
    iterations: usize,
) -> Result<DetectionTrace> {
    check_inputs(y, h, noise_var)?;
    let nt = h.cols();
    let ch = OampChannel::new(h);
    let mut x: ComplexVector = vec![ZERO; nt];
    let mut xs = vec![x.clone()];
    for _ in 0..iterations {
        let lin = oamp_linear(y, h, &ch, &x, noise_var)?;
        let r: ComplexVector = x.iter().zip(&lin.u).map(|(xi, ui)| xi + ui * lin.alpha).collect();
        let cmat = ComplexMatrix::identity(nt).sub(&lin.b.scale_real(lin.alpha));
        let q = lin.alpha * lin.alpha * lin.s;
        let sigma2 = (lin.v * cmat.frobenius_norm_sqr() + noise_var * q) / nt as f64;
        x = r.iter().map(|ri| c.posterior_moments(*ri, sigma2).mean).collect();
        xs.push(x.clone());
    }
    Ok(DetectionTrace::new(xs, Vec::new(), Vec::new(), c))
}

/// Loss of one sample and its gradient in the OAMPNet flat ordering.
pub fn oampnet_loss_grad(
    y: &[Complex64],
    h: &ComplexMatrix,
    x_true: &[Complex64],
    c: &Constellation,
    noise_var: f64,
    p: &OampnetParams,
) -> Result<(f64, Vec<f64>)> {
    let (trace, layers) = oampnet_run(y, h, c, noise_var, p)?;
    let l = p.gamma.len();
    let nt = h.cols();
    let ntf = nt as f64;
    let tr_gram = h.frobenius_norm_sqr();
    let loss = trace_loss(trace.outputs(), x_true);
    let (mut gb, mut tb, mut pb, mut xb) = (vec![0.0; l], vec![0.0; l], vec![0.0; l], vec![0.0; l]);
    let mut x_bar_next: ComplexVector = vec![ZERO; nt];
    for k in (0..l).rev() {
        let cache = &layers[k];
        let lin = &cache.lin;
        let (gamma, theta, phi, xi) = (p.gamma[k], p.theta[k], p.phi[k], p.xi[k]);
        add_loss_adjoint(&mut x_bar_next, &trace.xs[k + 1], x_true, l);
        let big_x = &x_bar_next;

        // x_{t+1} = φ (μ - ξ r)
        let mut r_bar: ComplexVector = vec![ZERO; nt];
        let mut sigma2_bar = 0.0;
        for i in 0..nt {
            let inner = cache.mu[i] - cache.r[i] * xi;
            pb[k] += big_x[i].re * inner.re + big_x[i].im * inner.im;
            xb[k] -= phi * (big_x[i].re * cache.r[i].re + big_x[i].im * cache.r[i].im);
            let mu_bar = big_x[i] * phi;
            r_bar[i] = big_x[i] * (-phi * xi);
            let mg = c.moments_backward(cache.r[i], cache.sigma2, cache.sigma2, mu_bar, 0.0);
            r_bar[i] += mg.r;
            sigma2_bar += mg.phi();
        }

        // σ² = (v P + θ² σ_n² Q) / N_t with Q = α² S.
        let q = lin.alpha * lin.alpha * lin.s;
        let mut v_bar = sigma2_bar * cache.p / ntf;
        let p_bar = sigma2_bar * lin.v / ntf;
        tb[k] += sigma2_bar * 2.0 * theta * noise_var * q / ntf;
        let q_bar = sigma2_bar * theta * theta * noise_var / ntf;
        let mut alpha_bar = 2.0 * lin.alpha * lin.s * q_bar;
        let s_bar = lin.alpha * lin.alpha * q_bar;

        // P = ||C||_F^2, C = I - θ α B.
        let ta = theta * lin.alpha;
        let cmat = ComplexMatrix::identity(nt).sub(&lin.b.scale_real(ta));
        let k_mat = lin.b.scale_real(lin.alpha);
        tb[k] += p_bar * (-2.0 * cmat.inner_re(&k_mat));
        // dα/dv and dB/dv = -B², dM^{-1}/dv = -B M^{-1}.
        let b2 = lin.b.matmul(&lin.b);
        let tr_b2 = b2.trace().re;
        let dalpha = ntf * tr_b2 / (lin.tr_b * lin.tr_b);
        let dk = lin.b.scale_real(dalpha).sub(&b2.scale_real(lin.alpha));
        v_bar += p_bar * (-2.0 * theta * cmat.inner_re(&dk));
        let ds = -2.0 * b2.matmul(&lin.minv).trace().re;
        v_bar += s_bar * ds;

        // r = x + γ α u, u = M^{-1} h.
        let mut x_bar: ComplexVector = r_bar.clone();
        gb[k] += lin.alpha * inner_re(&r_bar, &lin.u);
        alpha_bar += gamma * inner_re(&r_bar, &lin.u);
        let u_bar: ComplexVector = r_bar.iter().map(|z| z * (gamma * lin.alpha)).collect();
        let bu = lin.b.mul_vec(&lin.u);
        v_bar -= inner_re(&u_bar, &bu);
        let h_bar = lin.minv.mul_vec(&u_bar);
        v_bar += alpha_bar * dalpha;

        let mut e_bar = h.mul_vec(&h_bar);
        if !lin.v_clamped {
            let w = 2.0 * v_bar / tr_gram;
            for (eb, ei) in e_bar.iter_mut().zip(&lin.e) {
                *eb += ei * w;
            }
        }
        let back = h.adjoint_mul_vec(&e_bar);
        for (xbi, v) in x_bar.iter_mut().zip(back) {
            *xbi -= v;
        }
        let _ = &lin.grad;
        x_bar_next = x_bar;
    }
    let mut grad = gb;
    grad.extend(tb);
    grad.extend(pb);
    grad.extend(xb);
    Ok((loss, grad))
}

struct MmnetIidLayer {
    e: ComplexVector,
    grad: ComplexVector,
    r: ComplexVector,
    w: f64,
    w_active: bool,
    p: f64,
    sigma2: f64,
}

fn mmnet_iid_run(
    y: &[Complex64],
    h: &ComplexMatrix,
    c: &Constellation,
    noise_var: f64,
    p: &MmnetIidParams,
) -> Result<(DetectionTrace, Vec<MmnetIidLayer>)> {
    check_inputs(y, h, noise_var)?;
    let nt = h.cols();
    let nr = h.rows() as f64;
    let ntf = nt as f64;
    let gram = h.gram();
    let f = gram.trace().re;
    let g_fro = gram.frobenius_norm_sqr();
    let mut x: ComplexVector = vec![ZERO; nt];
    let mut xs = vec![x.clone()];
    let mut layers = Vec::with_capacity(p.theta1.len());
    for k in 0..p.theta1.len() {
        let (t1, t2) = (p.theta1[k], p.theta2[k]);
        let e = sub_vec(y, &h.mul_vec(&x));
        let grad = h.adjoint_mul_vec(&e);
        let r: ComplexVector = x.iter().zip(&grad).map(|(xi, gi)| xi + gi * t1).collect();
        let pf = ntf - 2.0 * t1 * f + t1 * t1 * g_fro;
        let raw = norm_sqr(&e) - nr * noise_var;
        let w_active = raw > 0.0;
        let w = if w_active { raw } else { 0.0 };
        let sigma2 = t2 / ntf * (pf / f * w + t1 * t1 * f * noise_var);
        let x_next: ComplexVector = r.iter().map(|ri| c.posterior_moments(*ri, sigma2).mean).collect();
        check_finite(k + 1, "x", &x_next)?;
        layers.push(MmnetIidLayer {
            e,
            grad,
            r,
            w,
            w_active,
            p: pf,
            sigma2,
        });
        x = x_next;
        xs.push(x.clone());
    }
    Ok((DetectionTrace::new(xs, Vec::new(), Vec::new(), c), layers))
}

/// MMNet-iid forward pass (`A_t = θ1_t H^H`).
pub fn mmnet_iid_forward(
    y: &[Complex64],
    h: &ComplexMatrix,
    c: &Constellation,
    noise_var: f64,
    p: &MmnetIidParams,
) -> Result<DetectionTrace> {
    Ok(mmnet_iid_run(y, h, c, noise_var, p)?.0)
}

/// Loss of one sample and its gradient in the MMNet-iid flat ordering.
pub fn mmnet_iid_loss_grad(
    y: &[Complex64],
    h: &ComplexMatrix,
    x_true: &[Complex64],
    c: &Constellation,
    noise_var: f64,
    p: &MmnetIidParams,
) -> Result<(f64, Vec<f64>)> {
    let (trace, layers) = mmnet_iid_run(y, h, c, noise_var, p)?;
    let l = p.theta1.len();
    let nt = h.cols();
    let ntf = nt as f64;
    let gram = h.gram();
    let f = gram.trace().re;
    let g_fro = gram.frobenius_norm_sqr();
    let loss = trace_loss(trace.outputs(), x_true);
    let (mut t1b, mut t2b) = (vec![0.0; l], vec![0.0; l]);
    let mut x_bar_next: ComplexVector = vec![ZERO; nt];
    for k in (0..l).rev() {
        let cache = &layers[k];
        let (t1, t2) = (p.theta1[k], p.theta2[k]);
        add_loss_adjoint(&mut x_bar_next, &trace.xs[k + 1], x_true, l);
        let mut r_bar: ComplexVector = Vec::with_capacity(nt);
        let mut sigma2_bar = 0.0;
        for i in 0..nt {
            let mg = c.moments_backward(cache.r[i], cache.sigma2, cache.sigma2, x_bar_next[i], 0.0);
            r_bar.push(mg.r);
            sigma2_bar += mg.phi();
        }
        let inner = cache.p / f * cache.w + t1 * t1 * f * noise_var;
        t2b[k] += sigma2_bar * inner / ntf;
        let inner_bar = sigma2_bar * t2 / ntf;
        let p_bar = inner_bar * cache.w / f;
        let w_bar = inner_bar * cache.p / f;
        t1b[k] += inner_bar * 2.0 * t1 * f * noise_var;
        t1b[k] += p_bar * (-2.0 * f + 2.0 * t1 * g_fro);

        t1b[k] += inner_re(&r_bar, &cache.grad);
        let h_bar: ComplexVector = r_bar.iter().map(|z| z * t1).collect();
        let mut e_bar = h.mul_vec(&h_bar);
        if cache.w_active {
            for (eb, ei) in e_bar.iter_mut().zip(&cache.e) {
                *eb += ei * (2.0 * w_bar);
            }
        }
        let back = h.adjoint_mul_vec(&e_bar);
        x_bar_next = r_bar.iter().zip(back).map(|(rb, b)| rb - b).collect();
    }
    let mut grad = t1b;
    grad.extend(t2b);
    Ok((loss, grad))
}

struct MmnetFullCache {
    e: ComplexVector,
    r: ComplexVector,
    d: ComplexMatrix,
    w: f64,
    w_active: bool,
    p: f64,
    base: f64,
}

fn check_full_dims(h: &ComplexMatrix, p: &MmnetFullParams) -> Result<()> {
    for layer in &p.layers {
        if layer.a.rows() != h.cols() || layer.a.cols() != h.rows() {
            return Err(Error::Dimension(format!(
                "A is {}x{}, channel needs {}x{}",
                layer.a.rows(),
                layer.a.cols(),
                h.cols(),
                h.rows()
            )));
        }
        if layer.theta2_re.len() != h.cols() || layer.theta2_im.len() != h.cols() {
            return Err(Error::Dimension("theta2 length must equal N_t".into()));
        }
    }
    Ok(())
}

fn mmnet_full_run(
    y: &[Complex64],
    h: &ComplexMatrix,
    c: &Constellation,
    noise_var: f64,
    p: &MmnetFullParams,
) -> Result<(DetectionTrace, Vec<MmnetFullCache>)> {
    check_inputs(y, h, noise_var)?;
    check_full_dims(h, p)?;
    let nt = h.cols();
    let nr = h.rows() as f64;
    let ntf = nt as f64;
    let f = h.frobenius_norm_sqr();
    let eye = ComplexMatrix::identity(nt);
    let mut x: ComplexVector = vec![ZERO; nt];
    let mut xs = vec![x.clone()];
    let mut caches = Vec::with_capacity(p.layers.len());
    for (k, layer) in p.layers.iter().enumerate() {
        let MmnetFullLayer { a, theta2_re, theta2_im } = layer;
        let e = sub_vec(y, &h.mul_vec(&x));
        let ae = a.mul_vec(&e);
        let r: ComplexVector = x.iter().zip(&ae).map(|(xi, v)| xi + v).collect();
        let d = eye.sub(&a.matmul(h));
        let pf = d.frobenius_norm_sqr();
        let raw = norm_sqr(&e) - nr * noise_var;
        let w_active = raw > 0.0;
        let w = if w_active { raw } else { 0.0 };
        let base = (pf / f * w + a.frobenius_norm_sqr() * noise_var) / ntf;
        let x_next: ComplexVector = (0..nt)
            .map(|i| c.posterior_moments_aniso(r[i], theta2_re[i] * base, theta2_im[i] * base).mean)
            .collect();
        check_finite(k + 1, "x", &x_next)?;
        caches.push(MmnetFullCache {
            e,
            r,
            d,
            w,
            w_active,
            p: pf,
            base,
        });
        x = x_next;
        xs.push(x.clone());
    }
    Ok((DetectionTrace::new(xs, Vec::new(), Vec::new(), c), caches))
}

/// MMNet forward pass with a full trainable `A_t` per layer and a separate
/// variance scale per symbol axis.
pub fn mmnet_full_forward(
    y: &[Complex64],
    h: &ComplexMatrix,
    c: &Constellation,
    noise_var: f64,
    p: &MmnetFullParams,
) -> Result<DetectionTrace> {
    Ok(mmnet_full_run(y, h, c, noise_var, p)?.0)
}

/// Loss of one sample and its gradient in the MMNet-full flat ordering.
pub fn mmnet_full_loss_grad(
    y: &[Complex64],
    h: &ComplexMatrix,
    x_true: &[Complex64],
    c: &Constellation,
    noise_var: f64,
    p: &MmnetFullParams,
) -> Result<(f64, Vec<f64>)> {
    let (trace, caches) = mmnet_full_run(y, h, c, noise_var, p)?;
    let l = p.layers.len();
    let nt = h.cols();
    let ntf = nt as f64;
    let f = h.frobenius_norm_sqr();
    let loss = trace_loss(trace.outputs(), x_true);
    let mut layer_grads: Vec<Vec<f64>> = vec![Vec::new(); l];
    let mut x_bar_next: ComplexVector = vec![ZERO; nt];
    let h_adj = h.adjoint();
    for k in (0..l).rev() {
        let cache = &caches[k];
        let layer = &p.layers[k];
        add_loss_adjoint(&mut x_bar_next, &trace.xs[k + 1], x_true, l);
        let mut r_bar: ComplexVector = Vec::with_capacity(nt);
        let mut t2re_bar = vec![0.0; nt];
        let mut t2im_bar = vec![0.0; nt];
        let mut base_bar = 0.0;
        for i in 0..nt {
            let (pr, pi) = (layer.theta2_re[i] * cache.base, layer.theta2_im[i] * cache.base);
            let mg = c.moments_backward(cache.r[i], pr, pi, x_bar_next[i], 0.0);
            r_bar.push(mg.r);
            t2re_bar[i] = mg.phi_re * cache.base;
            t2im_bar[i] = mg.phi_im * cache.base;
            base_bar += mg.phi_re * layer.theta2_re[i] + mg.phi_im * layer.theta2_im[i];
        }
        let p_bar = base_bar * cache.w / (f * ntf);
        let w_bar = base_bar * cache.p / (f * ntf);
        let asq_bar = base_bar * noise_var / ntf;

        // A_bar = 2 asq_bar A - 2 p_bar D H^H + r_bar e^H
        let mut a_bar = layer.a.scale_real(2.0 * asq_bar);
        a_bar = a_bar.sub(&cache.d.matmul(&h_adj).scale_real(2.0 * p_bar));
        for i in 0..nt {
            for j in 0..h.rows() {
                a_bar[(i, j)] += r_bar[i] * cache.e[j].conj();
            }
        }

        let mut e_bar = layer.a.adjoint_mul_vec(&r_bar);
        if cache.w_active {
            for (eb, ei) in e_bar.iter_mut().zip(&cache.e) {
                *eb += ei * (2.0 * w_bar);
            }
        }
        let back = h.adjoint_mul_vec(&e_bar);
        x_bar_next = r_bar.iter().zip(back).map(|(rb, b)| rb - b).collect();

        let mut g = Vec::with_capacity(2 * a_bar.data().len() + 2 * nt);
        for z in a_bar.data() {
            g.push(z.re);
            g.push(z.im);
        }
        g.extend(t2re_bar);
        g.extend(t2im_bar);
        layer_grads[k] = g;
    }
    Ok((loss, layer_grads.concat()))
}
