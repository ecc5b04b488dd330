//! Square QAM constellations with uniform priors and the Gaussian-weighted
//! posterior moments used by every nonlinear estimation step.
//!
//! The posterior of a symbol observed as `r` under a Gaussian kernel is
//! `w_j ∝ exp(-|c_j - r|^2 / phi)`. For square QAM with a uniform prior the
//! weights factor into an in-phase and a quadrature part, so moments (and
//! their derivatives) are computed per axis over `sqrt(M)` levels. The
//! anisotropic variant uses separate variances for the two axes.

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Lower clamp applied to kernel variances before exponentiation.
pub const PHI_FLOOR: f64 = 1e-12;

/// Gray-labelled square QAM with unit average power.
///
/// Point `j` sits at in-phase level `j / m` and quadrature level `j % m`,
/// where `m = sqrt(M)` and levels run from most negative to most positive.
#[derive(Clone, Debug, PartialEq)]
pub struct Constellation {
    points: Vec<Complex64>,
    levels: Vec<f64>,
    labels: Vec<u32>,
}

/// Posterior mean and second moment of one symbol.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorMoments {
    pub mean: Complex64,
    pub second_moment: f64,
    /// `second_moment - |mean|^2`, accumulated as a centered sum so it never
    /// goes negative through cancellation.
    pub variance: f64,
}

/// Adjoints of the moment operator with respect to its inputs.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MomentsGrad {
    /// `dL/dRe r + i dL/dIm r`.
    pub r: Complex64,
    pub phi_re: f64,
    pub phi_im: f64,
}

impl MomentsGrad {
    /// Total adjoint of an isotropic variance feeding both axes.
    pub fn phi(&self) -> f64 {
        self.phi_re + self.phi_im
    }
}

#[derive(Clone, Copy, Debug)]
struct AxisMoments {
    mean: f64,
    second: f64,
    variance: f64,
}

fn gray(k: u32) -> u32 {
    k ^ (k >> 1)
}

/// Builds an `M`-point Gray-labelled square QAM; `M` must be 4, 16 or 64.
pub fn make_qam(m: usize) -> Result<Constellation> {
    Constellation::qam(m)
}

impl Constellation {
    pub fn qam(m: usize) -> Result<Self> {
        let side = match m {
            4 => 2usize,
            16 => 4,
            64 => 8,
            _ => return Err(Error::Unsupported(format!("{m}-QAM (use 4, 16 or 64)"))),
        };
        let scale = (3.0 / (2.0 * (m as f64 - 1.0))).sqrt();
        let levels: Vec<f64> = (0..side)
            .map(|k| (2.0 * k as f64 - (side as f64 - 1.0)) * scale)
            .collect();
        let half_bits = side.trailing_zeros();
        let mut points = Vec::with_capacity(m);
        let mut labels = Vec::with_capacity(m);
        for i in 0..side {
            for q in 0..side {
                points.push(Complex64::new(levels[i], levels[q]));
                labels.push((gray(i as u32) << half_bits) | gray(q as u32));
            }
        }
        Ok(Self {
            points,
            levels,
            labels,
        })
    }

    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    pub fn point(&self, index: usize) -> Complex64 {
        self.points[index]
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bits_per_symbol(&self) -> u32 {
        self.points.len().trailing_zeros()
    }

    /// Gray bit label of point `index`.
    pub fn label(&self, index: usize) -> u32 {
        self.labels[index]
    }

    /// Per-axis amplitude levels, ascending.
    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    fn axis_weights(&self, u: f64, phi: f64, out: &mut [f64]) {
        let phi = phi.max(PHI_FLOOR);
        let mut max = f64::NEG_INFINITY;
        for (o, a) in out.iter_mut().zip(&self.levels) {
            let d = a - u;
            *o = -d * d / phi;
            max = max.max(*o);
        }
        let mut total = 0.0;
        for o in out.iter_mut() {
            *o = (*o - max).exp();
            total += *o;
        }
        for o in out.iter_mut() {
            *o /= total;
        }
    }

    fn axis_moments(&self, u: f64, phi: f64) -> AxisMoments {
        let mut w = [0.0; 8];
        let w = &mut w[..self.levels.len()];
        self.axis_weights(u, phi, w);
        let mean: f64 = w.iter().zip(&self.levels).map(|(p, a)| p * a).sum();
        let second: f64 = w.iter().zip(&self.levels).map(|(p, a)| p * a * a).sum();
        let variance: f64 = w
            .iter()
            .zip(&self.levels)
            .map(|(p, a)| p * (a - mean) * (a - mean))
            .sum();
        AxisMoments {
            mean,
            second,
            variance,
        }
    }

    /// Adjoint of one axis: given `dL/dmean` and `dL/dsecond`, returns
    /// `(dL/du, dL/dphi)`.
    fn axis_backward(&self, u: f64, phi: f64, mean_bar: f64, second_bar: f64) -> (f64, f64) {
        let clamped = phi < PHI_FLOOR;
        let phi = phi.max(PHI_FLOOR);
        let mut w = [0.0; 8];
        let w = &mut w[..self.levels.len()];
        self.axis_weights(u, phi, w);
        let f = |a: f64| mean_bar * a + second_bar * a * a;
        let fbar: f64 = w.iter().zip(&self.levels).map(|(p, &a)| p * f(a)).sum();
        let (mut u_bar, mut phi_bar) = (0.0, 0.0);
        for (p, &a) in w.iter().zip(&self.levels) {
            let logit_bar = p * (f(a) - fbar);
            let d = a - u;
            u_bar += logit_bar * 2.0 * d / phi;
            phi_bar += logit_bar * d * d / (phi * phi);
        }
        (u_bar, if clamped { 0.0 } else { phi_bar })
    }

    /// Posterior moments under the isotropic kernel `exp(-|c - r|^2 / phi)`.
    pub fn posterior_moments(&self, r: Complex64, phi: f64) -> PosteriorMoments {
        self.posterior_moments_aniso(r, phi, phi)
    }

    /// Posterior moments under `exp(-(dRe^2 / phi_re) - (dIm^2 / phi_im))`.
    pub fn posterior_moments_aniso(&self, r: Complex64, phi_re: f64, phi_im: f64) -> PosteriorMoments {
        let re = self.axis_moments(r.re, phi_re);
        let im = self.axis_moments(r.im, phi_im);
        PosteriorMoments {
            mean: Complex64::new(re.mean, im.mean),
            second_moment: re.second + im.second,
            variance: re.variance + im.variance,
        }
    }

    /// Reverse-mode derivative of [`posterior_moments_aniso`].
    ///
    /// `mean_bar` carries `dL/dRe(mean) + i dL/dIm(mean)`; `second_bar` is
    /// `dL/d(second_moment)`. A variance adjoint `v_bar` can be folded in by
    /// the caller as `mean_bar -= 2 v_bar mean`, `second_bar += v_bar`.
    ///
    /// [`posterior_moments_aniso`]: Constellation::posterior_moments_aniso
    pub fn moments_backward(
        &self,
        r: Complex64,
        phi_re: f64,
        phi_im: f64,
        mean_bar: Complex64,
        second_bar: f64,
    ) -> MomentsGrad {
        let (ur, pr) = self.axis_backward(r.re, phi_re, mean_bar.re, second_bar);
        let (ui, pi) = self.axis_backward(r.im, phi_im, mean_bar.im, second_bar);
        MomentsGrad {
            r: Complex64::new(ur, ui),
            phi_re: pr,
            phi_im: pi,
        }
    }

    /// Normalized posterior weight of every point, in point order.
    pub fn posterior_weights(&self, r: Complex64, phi: f64) -> Vec<f64> {
        let m = self.levels.len();
        let mut wr = vec![0.0; m];
        let mut wi = vec![0.0; m];
        self.axis_weights(r.re, phi, &mut wr);
        self.axis_weights(r.im, phi, &mut wi);
        (0..self.points.len()).map(|j| wr[j / m] * wi[j % m]).collect()
    }

    /// Index of the nearest point; ties go to the lowest index.
    pub fn nearest(&self, z: Complex64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, c) in self.points.iter().enumerate() {
            let d = (c - z).norm_sqr();
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        best
    }

    pub fn hard_decision(&self, xhat: &[Complex64]) -> Vec<usize> {
        xhat.iter().map(|&z| self.nearest(z)).collect()
    }

    /// Constellation points for a vector of symbol indices.
    pub fn symbols(&self, indices: &[usize]) -> Vec<Complex64> {
        indices.iter().map(|&j| self.points[j]).collect()
    }
}

/// Free-function form of [`Constellation::posterior_moments`].
pub fn posterior_moments(r: Complex64, phi: f64, c: &Constellation) -> PosteriorMoments {
    c.posterior_moments(r, phi)
}

/// Free-function form of [`Constellation::hard_decision`].
pub fn hard_decision(xhat: &[Complex64], c: &Constellation) -> Vec<usize> {
    c.hard_decision(xhat)
}
