//! VBINet and Improved-VBINet: the IFVB iterations unrolled into a fixed
//! number of layers with a handful of learnable parameters.
//!
//! Neither network takes the noise variance; both estimate the noise
//! precision internally through the Gamma update. Every forward pass can
//! record per-layer intermediates, and the matching `*_loss_grad` functions
//! run a hand-written reverse pass over them.
//!
//! Complex adjoints use the real-composite convention: for a complex
//! intermediate `z` the adjoint is `dL/dRe z + i dL/dIm z`.

use num_complex::Complex64;

use crate::constellation::Constellation;
use crate::detection::DetectionTrace;
use crate::error::{Error, Result};
use crate::ifvb::{gamma_epsilon_update, svd_domain_variance, SvdProjection};
use crate::numerics::{inner_re, norm_sqr, sub_vec, ComplexMatrix, ComplexVector, SvdFactors};
use crate::params::{ImprovedVbinetParams, VbinetParams};

/// Gamma prior shape used inside the networks.
pub const NET_A: f64 = 1e-10;
/// Gamma prior rate used inside the networks.
pub const NET_B: f64 = 1e-10;
/// Initial noise precision fed to the first layer.
pub const NET_EPS0: f64 = 1.0;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

pub(crate) fn check_finite(layer: usize, what: &str, v: &[Complex64]) -> Result<()> {
    if v.iter().all(|z| z.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteLayer {
            layer,
            what: what.into(),
        })
    }
}

pub(crate) fn check_finite_scalar(layer: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLayer {
            layer,
            what: what.into(),
        })
    }
}

/// Adds `2 (x_t - x_true) / L`, the per-layer loss adjoint, into `bar`.
pub(crate) fn add_loss_adjoint(bar: &mut [Complex64], x: &[Complex64], x_true: &[Complex64], layers: usize) {
    let w = 2.0 / layers as f64;
    for ((b, xi), ti) in bar.iter_mut().zip(x).zip(x_true) {
        *b += (xi - ti) * w;
    }
}

/// Layer-averaged squared error `(1/L) Σ_t ||x_t - x_true||^2`.
pub(crate) fn trace_loss(outputs: &[ComplexVector], x_true: &[Complex64]) -> f64 {
    let l = outputs.len() as f64;
    outputs.iter().map(|x| norm_sqr(&sub_vec(x, x_true))).sum::<f64>() / l
}

fn check_sample(y: &[Complex64], h: &ComplexMatrix) -> Result<()> {
    if y.len() != h.rows() {
        return Err(Error::Dimension(format!("y has {} entries, H has {} rows", y.len(), h.rows())));
    }
    Ok(())
}

struct VbinetLayer {
    eps: f64,
    e: ComplexVector,
    grad: ComplexVector,
    r: ComplexVector,
    phi: Vec<f64>,
    mu: ComplexVector,
    var: Vec<f64>,
    g: f64,
}

fn vbinet_run(
    y: &[Complex64],
    h: &ComplexMatrix,
    c: &Constellation,
    p: &VbinetParams,
) -> Result<(DetectionTrace, Vec<VbinetLayer>)> {
    check_sample(y, h)?;
    let nt = h.cols();
    if p.psi.len() != nt {
        return Err(Error::Dimension(format!("psi has {} entries, N_t = {nt}", p.psi.len())));
    }
    let t = p.t_diag();
    let mut x: ComplexVector = vec![ZERO; nt];
    let mut eps = NET_EPS0;
    let mut xs = vec![x.clone()];
    let mut epss = vec![eps];
    let mut layers = Vec::with_capacity(p.c.len());
    for (k, &ct) in p.c.iter().enumerate() {
        let e = sub_vec(y, &h.mul_vec(&x));
        let grad = h.adjoint_mul_vec(&e);
        let mut r = Vec::with_capacity(nt);
        let mut phi = Vec::with_capacity(nt);
        let mut mu = Vec::with_capacity(nt);
        let mut var = Vec::with_capacity(nt);
        let mut x_next = Vec::with_capacity(nt);
        let (mut cross, mut quad, mut trace_term) = (0.0, 0.0, 0.0);
        for i in 0..nt {
            let ri = x[i] + grad[i] / t[i];
            let phii = 1.0 / (eps * t[i]);
            let m = c.posterior_moments(ri, phii);
            let xi = m.mean * ct + x[i] * (1.0 - ct);
            let d = xi - x[i];
            quad += t[i] * d.norm_sqr();
            cross += d.re * grad[i].re + d.im * grad[i].im;
            trace_term += t[i] * ct * ct * m.variance;
            r.push(ri);
            phi.push(phii);
            mu.push(m.mean);
            var.push(m.variance);
            x_next.push(xi);
        }
        let g = norm_sqr(&e) - 2.0 * cross + quad + trace_term;
        let eps_next = gamma_epsilon_update(g, NET_A, NET_B, h.rows());
        check_finite(k + 1, "x", &x_next)?;
        check_finite_scalar(k + 1, "eps", eps_next)?;
        layers.push(VbinetLayer {
            eps,
            e,
            grad,
            r,
            phi,
            mu,
            var,
            g,
        });
        x = x_next;
        eps = eps_next;
        xs.push(x.clone());
        epss.push(eps);
    }
    Ok((DetectionTrace::new(xs, epss, Vec::new(), c), layers))
}

/// VBINet forward pass; `trace.xs[t]` is the output of layer `t`.
pub fn vbinet_forward(y: &[Complex64], h: &ComplexMatrix, c: &Constellation, p: &VbinetParams) -> Result<DetectionTrace> {
    Ok(vbinet_run(y, h, c, p)?.0)
}

/// Loss of one sample and its gradient in the VBINet flat ordering.
pub fn vbinet_loss_grad(
    y: &[Complex64],
    h: &ComplexMatrix,
    x_true: &[Complex64],
    c: &Constellation,
    p: &VbinetParams,
) -> Result<(f64, Vec<f64>)> {
    let (trace, layers) = vbinet_run(y, h, c, p)?;
    let l = p.c.len();
    let nt = h.cols();
    let shape = NET_A + h.rows() as f64 / 2.0;
    let t = p.t_diag();
    let loss = trace_loss(trace.outputs(), x_true);

    let mut t_bar = vec![0.0; nt];
    let mut c_bar = vec![0.0; l];
    let mut x_bar_next: ComplexVector = vec![ZERO; nt];
    let mut eps_bar_next = 0.0;
    for k in (0..l).rev() {
        let cache = &layers[k];
        let x = &trace.xs[k];
        let x_next = &trace.xs[k + 1];
        let ct = p.c[k];
        add_loss_adjoint(&mut x_bar_next, x_next, x_true, l);

        let g_bar = if cache.g > 0.0 {
            let eps_next = trace.eps[k + 1];
            -eps_bar_next * eps_next * eps_next / (2.0 * shape)
        } else {
            0.0
        };
        let mut e_bar: ComplexVector = cache.e.iter().map(|z| z * (2.0 * g_bar)).collect();
        let mut h_bar: ComplexVector = vec![ZERO; nt];
        let mut x_bar: ComplexVector = vec![ZERO; nt];
        let mut eps_bar = 0.0;
        let mut c_var = 0.0;
        for i in 0..nt {
            let d = x_next[i] - x[i];
            let d_bar = cache.grad[i] * (-2.0 * g_bar) + d * (2.0 * g_bar * t[i]);
            h_bar[i] = d * (-2.0 * g_bar);
            t_bar[i] += g_bar * (d.norm_sqr() + ct * ct * cache.var[i]);
            c_var += t[i] * cache.var[i];
            let v_bar = g_bar * ct * ct * t[i];

            let big_x = x_bar_next[i] + d_bar;
            x_bar[i] -= d_bar;
            let mut mu_bar = big_x * ct;
            x_bar[i] += big_x * (1.0 - ct);
            let step = cache.mu[i] - x[i];
            c_bar[k] += big_x.re * step.re + big_x.im * step.im;

            mu_bar -= cache.mu[i] * (2.0 * v_bar);
            let mg = c.moments_backward(cache.r[i], cache.phi[i], cache.phi[i], mu_bar, v_bar);
            let phi_bar = mg.phi();
            eps_bar -= phi_bar * cache.phi[i] / cache.eps;
            t_bar[i] -= phi_bar * cache.phi[i] / t[i];

            x_bar[i] += mg.r;
            h_bar[i] += mg.r / t[i];
            t_bar[i] -= (mg.r.re * cache.grad[i].re + mg.r.im * cache.grad[i].im) / (t[i] * t[i]);
        }
        c_bar[k] += 2.0 * ct * g_bar * c_var;
        let hh = h.mul_vec(&h_bar);
        for (eb, v) in e_bar.iter_mut().zip(hh) {
            *eb += v;
        }
        let back = h.adjoint_mul_vec(&e_bar);
        for (xb, v) in x_bar.iter_mut().zip(back) {
            *xb -= v;
        }
        x_bar_next = x_bar;
        eps_bar_next = eps_bar;
    }
    let mut grad: Vec<f64> = p.psi.iter().zip(&t_bar).map(|(ps, tb)| 2.0 * ps * tb).collect();
    grad.extend(c_bar);
    Ok((loss, grad))
}

/// How the Improved-VBINet variance trace enters the noise-precision update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarianceTrace {
    /// `c_t² κ_t² Σ_j T̄_j`, the learnable surrogate.
    Learned,
    /// `c_t² Σ_j T̄_j (V^H Σ_x V)_jj` from the actual posterior variances;
    /// with `Ψ = 0`, `c = 1` this reproduces the SVD-domain IFVB algorithm.
    Exact,
}

struct ImprovedLayer {
    eps: f64,
    es: ComplexVector,
    as_: ComplexVector,
    tau: Vec<f64>,
    phibar: Vec<f64>,
    r: ComplexVector,
    phi: Vec<f64>,
    vmu: ComplexVector,
    g: f64,
}

fn improved_run(
    y: &[Complex64],
    svd: &SvdFactors,
    c: &Constellation,
    p: &ImprovedVbinetParams,
    mode: VarianceTrace,
) -> Result<(DetectionTrace, Vec<ImprovedLayer>)> {
    let proj = SvdProjection::new(y, svd)?;
    let nt = svd.sigma.len();
    let nr = svd.u.rows();
    if p.psi.len() != nt {
        return Err(Error::Dimension(format!("Psi has {} entries, N_t = {nt}", p.psi.len())));
    }
    let v = &svd.v;
    let sigma = &svd.sigma;
    let tbar: Vec<f64> = sigma.iter().zip(&p.psi).map(|(s, ps)| s * s + ps * ps).collect();
    let tbar_sum: f64 = tbar.iter().sum();
    let mut s: ComplexVector = vec![ZERO; nt];
    let mut eps = NET_EPS0;
    let mut xs = vec![vec![ZERO; nt]];
    let mut ss = vec![s.clone()];
    let mut epss = vec![eps];
    let mut layers = Vec::with_capacity(p.c.len());
    for k in 0..p.c.len() {
        let (ct, dt, kt) = (p.c[k], p.delta[k], p.kappa[k]);
        let es: ComplexVector = (0..nt).map(|j| proj.y_tilde[j] - s[j] * sigma[j]).collect();
        let as_: ComplexVector = (0..nt).map(|j| es[j] * sigma[j]).collect();
        let tau: Vec<f64> = tbar.iter().map(|tb| tb + dt / eps).collect();
        let rbar: ComplexVector = (0..nt).map(|j| s[j] + as_[j] / tau[j]).collect();
        let phibar: Vec<f64> = tau.iter().map(|t| 1.0 / (eps * t)).collect();
        let r = v.mul_vec(&rbar);
        let phi = svd_domain_variance(v, &phibar);
        let mut mu = Vec::with_capacity(nt);
        let mut var = Vec::with_capacity(nt);
        for i in 0..nt {
            let m = c.posterior_moments(r[i], phi[i]);
            mu.push(m.mean);
            var.push(m.variance);
        }
        let vmu = v.adjoint_mul_vec(&mu);
        let s_next: ComplexVector = (0..nt).map(|j| vmu[j] * ct + s[j] * (1.0 - ct)).collect();
        let d = sub_vec(&s_next, &s);
        let quad: f64 = (0..nt).map(|j| tbar[j] * d[j].norm_sqr()).sum();
        let trace_term = match mode {
            VarianceTrace::Learned => ct * ct * kt * kt * tbar_sum,
            VarianceTrace::Exact => {
                ct * ct
                    * (0..nt)
                        .map(|j| tbar[j] * (0..nt).map(|i| v[(i, j)].norm_sqr() * var[i]).sum::<f64>())
                        .sum::<f64>()
            }
        };
        let g = proj.y_perp_sqr + norm_sqr(&es) - 2.0 * inner_re(&d, &as_) + quad + trace_term;
        let eps_next = gamma_epsilon_update(g, NET_A, NET_B, nr);
        let x_out = v.mul_vec(&s_next);
        check_finite(k + 1, "s", &s_next)?;
        check_finite_scalar(k + 1, "eps", eps_next)?;
        layers.push(ImprovedLayer {
            eps,
            es,
            as_,
            tau,
            phibar,
            r,
            phi,
            vmu,
            g,
        });
        s = s_next;
        eps = eps_next;
        xs.push(x_out);
        ss.push(s.clone());
        epss.push(eps);
    }
    Ok((DetectionTrace::new(xs, epss, ss, c), layers))
}

/// Improved-VBINet forward pass on precomputed SVD factors. Layer outputs
/// are `x_t = V s_t`.
pub fn improved_vbinet_forward(
    y: &[Complex64],
    svd: &SvdFactors,
    c: &Constellation,
    p: &ImprovedVbinetParams,
) -> Result<DetectionTrace> {
    Ok(improved_run(y, svd, c, p, VarianceTrace::Learned)?.0)
}

/// Forward pass with an explicit choice of variance trace.
pub fn improved_vbinet_forward_with(
    y: &[Complex64],
    svd: &SvdFactors,
    c: &Constellation,
    p: &ImprovedVbinetParams,
    mode: VarianceTrace,
) -> Result<DetectionTrace> {
    Ok(improved_run(y, svd, c, p, mode)?.0)
}

/// Relative reconstruction tolerance for [`check_svd_matches`].
pub const SVD_MATCH_TOL: f64 = 1e-8;

/// Rejects SVD factors that do not reconstruct `h`.
pub fn check_svd_matches(h: &ComplexMatrix, svd: &SvdFactors) -> Result<()> {
    if svd.u.rows() != h.rows() || svd.v.rows() != h.cols() {
        return Err(Error::Dimension("SVD factors do not match the channel shape".into()));
    }
    let resid = svd.reconstruct().sub(h).frobenius_norm();
    if resid > SVD_MATCH_TOL * h.frobenius_norm() {
        return Err(Error::InvalidArgument(format!(
            "SVD factors do not belong to this channel (residual {resid:e})"
        )));
    }
    Ok(())
}

/// Loss of one sample and its gradient in the Improved-VBINet flat ordering.
pub fn improved_vbinet_loss_grad(
    y: &[Complex64],
    svd: &SvdFactors,
    x_true: &[Complex64],
    c: &Constellation,
    p: &ImprovedVbinetParams,
) -> Result<(f64, Vec<f64>)> {
    let (trace, layers) = improved_run(y, svd, c, p, VarianceTrace::Learned)?;
    let l = p.c.len();
    let nt = svd.sigma.len();
    let shape = NET_A + svd.u.rows() as f64 / 2.0;
    let v = &svd.v;
    let sigma = &svd.sigma;
    let tbar: Vec<f64> = sigma.iter().zip(&p.psi).map(|(s, ps)| s * s + ps * ps).collect();
    let tbar_sum: f64 = tbar.iter().sum();
    let loss = trace_loss(trace.outputs(), x_true);

    let mut tbar_bar = vec![0.0; nt];
    let mut delta_bar = vec![0.0; l];
    let mut c_bar = vec![0.0; l];
    let mut kappa_bar = vec![0.0; l];
    let mut s_bar_next: ComplexVector = vec![ZERO; nt];
    let mut eps_bar_next = 0.0;
    for k in (0..l).rev() {
        let cache = &layers[k];
        let (ct, dt, kt) = (p.c[k], p.delta[k], p.kappa[k]);
        let s = &trace.ss[k];
        let s_next = &trace.ss[k + 1];

        let mut out_bar: ComplexVector = vec![ZERO; nt];
        add_loss_adjoint(&mut out_bar, &trace.xs[k + 1], x_true, l);
        for (sb, vb) in s_bar_next.iter_mut().zip(v.adjoint_mul_vec(&out_bar)) {
            *sb += vb;
        }

        let g_bar = if cache.g > 0.0 {
            let eps_next = trace.eps[k + 1];
            -eps_bar_next * eps_next * eps_next / (2.0 * shape)
        } else {
            0.0
        };
        let mut es_bar: ComplexVector = cache.es.iter().map(|z| z * (2.0 * g_bar)).collect();
        let mut as_bar: ComplexVector = vec![ZERO; nt];
        let mut s_bar: ComplexVector = vec![ZERO; nt];
        let mut big_s: ComplexVector = vec![ZERO; nt];
        for j in 0..nt {
            let d = s_next[j] - s[j];
            let d_bar = cache.as_[j] * (-2.0 * g_bar) + d * (2.0 * g_bar * tbar[j]);
            as_bar[j] += d * (-2.0 * g_bar);
            tbar_bar[j] += g_bar * (d.norm_sqr() + ct * ct * kt * kt);
            big_s[j] = s_bar_next[j] + d_bar;
            s_bar[j] -= d_bar;
            s_bar[j] += big_s[j] * (1.0 - ct);
            let step = cache.vmu[j] - s[j];
            c_bar[k] += big_s[j].re * step.re + big_s[j].im * step.im;
        }
        c_bar[k] += 2.0 * ct * kt * kt * g_bar * tbar_sum;
        kappa_bar[k] += 2.0 * ct * ct * kt * g_bar * tbar_sum;

        let mu_bar: ComplexVector = v.mul_vec(&big_s).into_iter().map(|z| z * ct).collect();
        let mut r_bar: ComplexVector = Vec::with_capacity(nt);
        let mut phi_bar = Vec::with_capacity(nt);
        for i in 0..nt {
            let mg = c.moments_backward(cache.r[i], cache.phi[i], cache.phi[i], mu_bar[i], 0.0);
            r_bar.push(mg.r);
            phi_bar.push(mg.phi());
        }
        let rbar_bar = v.adjoint_mul_vec(&r_bar);
        let mut eps_bar = 0.0;
        let mut delta_acc = 0.0;
        for j in 0..nt {
            let phibar_bar: f64 = (0..nt).map(|i| v[(i, j)].norm_sqr() * phi_bar[i]).sum();
            let pb = cache.phibar[j];
            let tau = cache.tau[j];
            eps_bar -= phibar_bar * pb / cache.eps;
            let mut tau_bar = -phibar_bar * pb / tau;

            s_bar[j] += rbar_bar[j];
            as_bar[j] += rbar_bar[j] / tau;
            tau_bar -= (rbar_bar[j].re * cache.as_[j].re + rbar_bar[j].im * cache.as_[j].im) / (tau * tau);

            tbar_bar[j] += tau_bar;
            delta_acc += tau_bar;
        }
        delta_bar[k] += delta_acc / cache.eps;
        eps_bar -= delta_acc * dt / (cache.eps * cache.eps);

        for j in 0..nt {
            es_bar[j] += as_bar[j] * sigma[j];
            s_bar[j] -= es_bar[j] * sigma[j];
        }
        s_bar_next = s_bar;
        eps_bar_next = eps_bar;
    }
    let mut grad: Vec<f64> = p.psi.iter().zip(&tbar_bar).map(|(ps, tb)| 2.0 * ps * tb).collect();
    grad.extend(delta_bar);
    grad.extend(c_bar);
    grad.extend(kappa_bar);
    Ok((loss, grad))
}
