//! Output types shared by every detector.

use serde::{Deserialize, Serialize};

use crate::constellation::Constellation;
use crate::numerics::ComplexVector;

/// Final estimate of one detector on one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionResult {
    /// Soft estimate before rounding (for ML, the chosen points).
    pub xhat: ComplexVector,
    /// Symbol indices.
    pub hard: Vec<usize>,
}

impl DetectionResult {
    pub fn from_soft(xhat: ComplexVector, c: &Constellation) -> Self {
        let hard = c.hard_decision(&xhat);
        Self { xhat, hard }
    }

    /// Number of symbols whose index differs from `truth`.
    pub fn symbol_errors(&self, truth: &[usize]) -> usize {
        self.hard.iter().zip(truth).filter(|(a, b)| a != b).count()
    }
}

/// Per-iteration (or per-layer) history of an iterative detector.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionTrace {
    /// `x_0, x_1, ..., x_L`; `x_0` is the initialization.
    pub xs: Vec<ComplexVector>,
    /// Noise-precision estimates `eps_0, ..., eps_L`; empty for detectors
    /// that take the noise variance as an input.
    pub eps: Vec<f64>,
    /// SVD-domain iterates `s_0, ..., s_L` for the SVD-based detectors.
    pub ss: Vec<ComplexVector>,
    pub result: DetectionResult,
}

impl DetectionTrace {
    pub fn new(xs: Vec<ComplexVector>, eps: Vec<f64>, ss: Vec<ComplexVector>, c: &Constellation) -> Self {
        let last = xs.last().cloned().unwrap_or_default();
        Self {
            xs,
            eps,
            ss,
            result: DetectionResult::from_soft(last, c),
        }
    }

    /// Number of iterations or layers (the initialization is not counted).
    pub fn layers(&self) -> usize {
        self.xs.len().saturating_sub(1)
    }

    /// Layer outputs `x_1, ..., x_L`.
    pub fn outputs(&self) -> &[ComplexVector] {
        &self.xs[1..]
    }
}

/// Which end-to-end network family a parameter set belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    Vbinet,
    ImprovedVbinet,
    Oampnet,
    MmnetIid,
    MmnetFull,
}

impl NetworkKind {
    pub const ALL: [NetworkKind; 5] = [
        NetworkKind::Vbinet,
        NetworkKind::ImprovedVbinet,
        NetworkKind::Oampnet,
        NetworkKind::MmnetIid,
        NetworkKind::MmnetFull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NetworkKind::Vbinet => "vbinet",
            NetworkKind::ImprovedVbinet => "improved_vbinet",
            NetworkKind::Oampnet => "oampnet",
            NetworkKind::MmnetIid => "mmnet_iid",
            NetworkKind::MmnetFull => "mmnet_full",
        }
    }

    /// Whether the forward pass consumes the noise variance.
    pub fn needs_noise_var(self) -> bool {
        matches!(self, NetworkKind::Oampnet | NetworkKind::MmnetIid | NetworkKind::MmnetFull)
    }
}
