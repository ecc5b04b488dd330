//! Learnable parameter sets for the trainable detectors, their flat
//! orderings (the layout gradients and the optimizer work in) and their JSON
//! file format.
//!
//! Flat orderings:
//! - VBINet: `psi[0..N_t]`, then `c[0..L]`.
//! - Improved-VBINet: `psi[0..N_t]`, `delta[0..L]`, `c[0..L]`, `kappa[0..L]`.
//! - OAMPNet: `gamma[0..L]`, `theta[0..L]`, `phi[0..L]`, `xi[0..L]`.
//! - MMNet-iid: `theta1[0..L]`, `theta2[0..L]`.
//! - MMNet-full, per layer: `A` row-major as `(re, im)` pairs, then
//!   `theta2_re[0..N_t]`, `theta2_im[0..N_t]`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::detection::NetworkKind;
use crate::error::{Error, Result};
use crate::numerics::{largest_eigenvalue, ComplexMatrix, POWER_MAX_ITER, POWER_TOL};

/// Floor added to `psi^2` so the VBINet `T` stays positive.
pub const T_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n_r: usize,
    pub n_t: usize,
}

impl Dims {
    pub fn new(n_r: usize, n_t: usize) -> Self {
        Self { n_r, n_t }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VbinetParams {
    /// `T_ii = psi_i^2 + T_FLOOR`, shared by all layers.
    pub psi: Vec<f64>,
    /// Damping per layer, unconstrained.
    pub c: Vec<f64>,
}

impl VbinetParams {
    pub fn t_diag(&self) -> Vec<f64> {
        self.psi.iter().map(|p| p * p + T_FLOOR).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImprovedVbinetParams {
    /// Diagonal of `Ψ`; `T̄ = Σ² + Ψ²`.
    pub psi: Vec<f64>,
    pub delta: Vec<f64>,
    pub c: Vec<f64>,
    pub kappa: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OampnetParams {
    pub gamma: Vec<f64>,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub xi: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MmnetIidParams {
    pub theta1: Vec<f64>,
    pub theta2: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MmnetFullLayer {
    /// `N_t x N_r` linear estimator.
    pub a: ComplexMatrix,
    /// Variance scale for the in-phase axis of each symbol.
    pub theta2_re: Vec<f64>,
    /// Variance scale for the quadrature axis of each symbol.
    pub theta2_im: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MmnetFullParams {
    pub layers: Vec<MmnetFullLayer>,
}

/// Parameters of any trainable detector.
#[derive(Clone, Debug, PartialEq)]
pub enum DetectorParams {
    Vbinet(VbinetParams),
    ImprovedVbinet(ImprovedVbinetParams),
    Oampnet(OampnetParams),
    MmnetIid(MmnetIidParams),
    MmnetFull(MmnetFullParams),
}

/// Number of learnable reals for a kind.
pub fn param_count(kind: NetworkKind, dims: Dims, layers: usize) -> usize {
    match kind {
        NetworkKind::Vbinet => dims.n_t + layers,
        NetworkKind::ImprovedVbinet => dims.n_t + 3 * layers,
        NetworkKind::Oampnet => 4 * layers,
        NetworkKind::MmnetIid => 2 * layers,
        NetworkKind::MmnetFull => 2 * dims.n_t * (dims.n_r + 1) * layers,
    }
}

/// Step size `1 / (sqrt(N_r) + sqrt(N_t))^2`, the reciprocal of the
/// asymptotic largest eigenvalue of `H^H H` for unit-variance i.i.d. `H`.
pub fn gradient_step_init(dims: Dims) -> f64 {
    1.0 / ((dims.n_r as f64).sqrt() + (dims.n_t as f64).sqrt()).powi(2)
}

/// Deterministic initialization.
///
/// MMNet-full needs an anchor channel: every layer starts at
/// `A = H^H / λ_max(H^H H)` with unit variance scales.
pub fn init_params(
    kind: NetworkKind,
    dims: Dims,
    layers: usize,
    anchor: Option<&ComplexMatrix>,
) -> Result<DetectorParams> {
    if layers == 0 {
        return Err(Error::InvalidArgument("a network needs at least one layer".into()));
    }
    let ones = vec![1.0; layers];
    Ok(match kind {
        NetworkKind::Vbinet => DetectorParams::Vbinet(VbinetParams {
            psi: vec![(dims.n_r as f64).sqrt(); dims.n_t],
            c: ones,
        }),
        NetworkKind::ImprovedVbinet => DetectorParams::ImprovedVbinet(ImprovedVbinetParams {
            psi: vec![0.0; dims.n_t],
            delta: ones.clone(),
            c: ones,
            kappa: vec![0.5; layers],
        }),
        NetworkKind::Oampnet => DetectorParams::Oampnet(OampnetParams {
            gamma: ones.clone(),
            theta: ones.clone(),
            phi: ones,
            xi: vec![0.0; layers],
        }),
        NetworkKind::MmnetIid => DetectorParams::MmnetIid(MmnetIidParams {
            theta1: vec![gradient_step_init(dims); layers],
            theta2: ones,
        }),
        NetworkKind::MmnetFull => {
            let h = anchor.ok_or_else(|| Error::InvalidArgument("mmnet_full initialization needs an anchor channel".into()))?;
            if h.rows() != dims.n_r || h.cols() != dims.n_t {
                return Err(Error::Dimension("anchor channel does not match dims".into()));
            }
            let lambda = largest_eigenvalue(&h.gram(), POWER_TOL, POWER_MAX_ITER)
                .or_else(|e| match e {
                    Error::NotConverged { best, .. } => Ok(best),
                    other => Err(other),
                })?;
            let a = h.adjoint().scale_real(1.0 / lambda);
            DetectorParams::MmnetFull(MmnetFullParams {
                layers: (0..layers)
                    .map(|_| MmnetFullLayer {
                        a: a.clone(),
                        theta2_re: vec![1.0; dims.n_t],
                        theta2_im: vec![1.0; dims.n_t],
                    })
                    .collect(),
            })
        }
    })
}

impl DetectorParams {
    pub fn kind(&self) -> NetworkKind {
        match self {
            DetectorParams::Vbinet(_) => NetworkKind::Vbinet,
            DetectorParams::ImprovedVbinet(_) => NetworkKind::ImprovedVbinet,
            DetectorParams::Oampnet(_) => NetworkKind::Oampnet,
            DetectorParams::MmnetIid(_) => NetworkKind::MmnetIid,
            DetectorParams::MmnetFull(_) => NetworkKind::MmnetFull,
        }
    }

    pub fn layers(&self) -> usize {
        match self {
            DetectorParams::Vbinet(p) => p.c.len(),
            DetectorParams::ImprovedVbinet(p) => p.c.len(),
            DetectorParams::Oampnet(p) => p.gamma.len(),
            DetectorParams::MmnetIid(p) => p.theta1.len(),
            DetectorParams::MmnetFull(p) => p.layers.len(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        match self {
            DetectorParams::Vbinet(p) => {
                out.extend(&p.psi);
                out.extend(&p.c);
            }
            DetectorParams::ImprovedVbinet(p) => {
                out.extend(&p.psi);
                out.extend(&p.delta);
                out.extend(&p.c);
                out.extend(&p.kappa);
            }
            DetectorParams::Oampnet(p) => {
                out.extend(&p.gamma);
                out.extend(&p.theta);
                out.extend(&p.phi);
                out.extend(&p.xi);
            }
            DetectorParams::MmnetIid(p) => {
                out.extend(&p.theta1);
                out.extend(&p.theta2);
            }
            DetectorParams::MmnetFull(p) => {
                for layer in &p.layers {
                    for z in layer.a.data() {
                        out.push(z.re);
                        out.push(z.im);
                    }
                    out.extend(&layer.theta2_re);
                    out.extend(&layer.theta2_im);
                }
            }
        }
        out
    }

    /// Overwrites every parameter from a flat vector in this kind's order.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.len();
        if flat.len() != expected {
            return Err(Error::Dimension(format!("expected {expected} parameters, got {}", flat.len())));
        }
        let mut it = flat.iter().copied();
        let mut fill = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x = it.next().expect("length checked"));
        match self {
            DetectorParams::Vbinet(p) => {
                fill(&mut p.psi);
                fill(&mut p.c);
            }
            DetectorParams::ImprovedVbinet(p) => {
                fill(&mut p.psi);
                fill(&mut p.delta);
                fill(&mut p.c);
                fill(&mut p.kappa);
            }
            DetectorParams::Oampnet(p) => {
                fill(&mut p.gamma);
                fill(&mut p.theta);
                fill(&mut p.phi);
                fill(&mut p.xi);
            }
            DetectorParams::MmnetIid(p) => {
                fill(&mut p.theta1);
                fill(&mut p.theta2);
            }
            DetectorParams::MmnetFull(p) => {
                for layer in &mut p.layers {
                    let (rows, cols) = (layer.a.rows(), layer.a.cols());
                    let mut data = Vec::with_capacity(rows * cols);
                    let mut pairs = vec![0.0; 2 * rows * cols];
                    fill(&mut pairs);
                    for pair in pairs.chunks_exact(2) {
                        data.push(Complex64::new(pair[0], pair[1]));
                    }
                    layer.a = ComplexMatrix::new(rows, cols, data)?;
                    fill(&mut layer.theta2_re);
                    fill(&mut layer.theta2_im);
                }
            }
        }
        Ok(())
    }

    /// Number of learnable reals.
    pub fn len(&self) -> usize {
        match self {
            DetectorParams::Vbinet(p) => p.psi.len() + p.c.len(),
            DetectorParams::ImprovedVbinet(p) => p.psi.len() + 3 * p.c.len(),
            DetectorParams::Oampnet(p) => 4 * p.gamma.len(),
            DetectorParams::MmnetIid(p) => 2 * p.theta1.len(),
            DetectorParams::MmnetFull(p) => p
                .layers
                .iter()
                .map(|l| 2 * l.a.rows() * l.a.cols() + l.theta2_re.len() + l.theta2_im.len())
                .sum(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn vectors(&self) -> BTreeMap<String, Vec<f64>> {
        let mut m = BTreeMap::new();
        match self {
            DetectorParams::Vbinet(p) => {
                m.insert("psi".into(), p.psi.clone());
                m.insert("c".into(), p.c.clone());
            }
            DetectorParams::ImprovedVbinet(p) => {
                m.insert("psi".into(), p.psi.clone());
                m.insert("delta".into(), p.delta.clone());
                m.insert("c".into(), p.c.clone());
                m.insert("kappa".into(), p.kappa.clone());
            }
            DetectorParams::Oampnet(p) => {
                m.insert("gamma".into(), p.gamma.clone());
                m.insert("theta".into(), p.theta.clone());
                m.insert("phi".into(), p.phi.clone());
                m.insert("xi".into(), p.xi.clone());
            }
            DetectorParams::MmnetIid(p) => {
                m.insert("theta1".into(), p.theta1.clone());
                m.insert("theta2".into(), p.theta2.clone());
            }
            DetectorParams::MmnetFull(_) => {
                m.insert("flat".into(), self.to_flat());
            }
        }
        m
    }

    pub fn to_file(&self, dims: Dims) -> ParamFile {
        ParamFile {
            kind: self.kind(),
            dims,
            layers: self.layers(),
            vectors: self.vectors(),
        }
    }

    pub fn save(&self, dims: Dims, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(&self.to_file(dims))?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Dims)> {
        if !path.exists() {
            return Err(Error::MissingParams(path.to_path_buf()));
        }
        let file: ParamFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        let dims = file.dims;
        Ok((file.into_params()?, dims))
    }
}

/// On-disk form of a parameter set. Floats are written in shortest
/// round-trip decimal, so save/load is bitwise exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamFile {
    pub kind: NetworkKind,
    pub dims: Dims,
    pub layers: usize,
    pub vectors: BTreeMap<String, Vec<f64>>,
}

impl ParamFile {
    pub fn into_params(self) -> Result<DetectorParams> {
        let l = self.layers;
        let nt = self.dims.n_t;
        let take = |name: &str, len: usize| -> Result<Vec<f64>> {
            let v = self
                .vectors
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("parameter file lacks vector {name:?}")))?;
            if v.len() != len {
                return Err(Error::Dimension(format!("vector {name:?} has {} entries, need {len}", v.len())));
            }
            Ok(v.clone())
        };
        Ok(match self.kind {
            NetworkKind::Vbinet => DetectorParams::Vbinet(VbinetParams {
                psi: take("psi", nt)?,
                c: take("c", l)?,
            }),
            NetworkKind::ImprovedVbinet => DetectorParams::ImprovedVbinet(ImprovedVbinetParams {
                psi: take("psi", nt)?,
                delta: take("delta", l)?,
                c: take("c", l)?,
                kappa: take("kappa", l)?,
            }),
            NetworkKind::Oampnet => DetectorParams::Oampnet(OampnetParams {
                gamma: take("gamma", l)?,
                theta: take("theta", l)?,
                phi: take("phi", l)?,
                xi: take("xi", l)?,
            }),
            NetworkKind::MmnetIid => DetectorParams::MmnetIid(MmnetIidParams {
                theta1: take("theta1", l)?,
                theta2: take("theta2", l)?,
            }),
            NetworkKind::MmnetFull => {
                let flat = take("flat", param_count(NetworkKind::MmnetFull, self.dims, l))?;
                let mut p = DetectorParams::MmnetFull(MmnetFullParams {
                    layers: (0..l)
                        .map(|_| MmnetFullLayer {
                            a: ComplexMatrix::zeros(nt, self.dims.n_r),
                            theta2_re: vec![0.0; nt],
                            theta2_im: vec![0.0; nt],
                        })
                        .collect(),
                });
                p.set_flat(&flat)?;
                p
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::gen_iid;
    use crate::rng::{stream, INIT_DOMAIN};

    #[test]
    fn counts() {
        let d = Dims::new(32, 16);
        assert_eq!(param_count(NetworkKind::Vbinet, d, 10), 26);
        assert_eq!(param_count(NetworkKind::ImprovedVbinet, d, 10), 46);
        assert_eq!(param_count(NetworkKind::Oampnet, d, 10), 40);
        assert_eq!(param_count(NetworkKind::MmnetIid, d, 10), 20);
        assert_eq!(param_count(NetworkKind::MmnetFull, d, 10), 10560);
        let h = gen_iid(32, 16, &mut stream(0, INIT_DOMAIN, 0)).unwrap().h;
        for kind in NetworkKind::ALL {
            let p = init_params(kind, d, 10, Some(&h)).unwrap();
            assert_eq!(p.len(), param_count(kind, d, 10));
            assert_eq!(p.to_flat().len(), p.len());
        }
    }

    #[test]
    fn vbinet_init_values() {
        let p = init_params(NetworkKind::Vbinet, Dims::new(32, 16), 10, None).unwrap();
        let DetectorParams::Vbinet(v) = p else { unreachable!() };
        assert!(v.t_diag().iter().all(|&t| (t - (32.0 + 1e-8)).abs() < 1e-12));
        assert_eq!(v.c, vec![1.0; 10]);
    }

    #[test]
    fn flat_round_trip() {
        let d = Dims::new(5, 3);
        let h = gen_iid(5, 3, &mut stream(1, INIT_DOMAIN, 0)).unwrap().h;
        for kind in NetworkKind::ALL {
            let mut p = init_params(kind, d, 2, Some(&h)).unwrap();
            let flat: Vec<f64> = (0..p.len()).map(|i| i as f64 * 0.37 - 1.0).collect();
            p.set_flat(&flat).unwrap();
            assert_eq!(p.to_flat(), flat);
            assert!(p.set_flat(&flat[1..]).is_err());
        }
    }

    #[test]
    fn json_round_trip_is_bitwise() {
        let d = Dims::new(6, 4);
        let h = gen_iid(6, 4, &mut stream(2, INIT_DOMAIN, 0)).unwrap().h;
        let dir = tempfile::tempdir().unwrap();
        for kind in NetworkKind::ALL {
            let mut p = init_params(kind, d, 3, Some(&h)).unwrap();
            let flat: Vec<f64> = (0..p.len()).map(|i| (i as f64 + 0.1).sin() / 3.0).collect();
            p.set_flat(&flat).unwrap();
            let path = dir.path().join(format!("{}.json", kind.name()));
            p.save(d, &path).unwrap();
            let (q, dq) = DetectorParams::load(&path).unwrap();
            assert_eq!(dq, d);
            let a: Vec<u64> = p.to_flat().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u64> = q.to_flat().iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            DetectorParams::load(Path::new("/nonexistent/params.json")),
            Err(Error::MissingParams(_))
        ));
    }

    #[test]
    fn mmnet_full_needs_anchor() {
        assert!(init_params(NetworkKind::MmnetFull, Dims::new(4, 2), 1, None).is_err());
    }
}
