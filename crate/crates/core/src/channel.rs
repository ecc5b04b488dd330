//! Channel realizations, noisy samples and the binary channel-file format.
//!
//! Channel files start with a one-line JSON header
//! `{"n_channels":..,"n_r":..,"n_t":..,"dtype":"c128le"}` followed by raw
//! little-endian `f64` `(re, im)` pairs, row-major, channels back to back.

use std::fs;
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::constellation::Constellation;
use crate::error::{Error, Result};
use crate::numerics::{psd_sqrt, ComplexMatrix, ComplexVector};

/// Where a channel realization came from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChannelSource {
    Iid,
    Kronecker { rho: f64 },
    File,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    pub h: ComplexMatrix,
    pub source: ChannelSource,
    pub subcarrier: Option<usize>,
}

/// One transmission `y = H x + n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x_indices: Vec<usize>,
    pub x: ComplexVector,
    pub y: ComplexVector,
    pub noise_var: f64,
}

/// Circular complex Gaussian with total variance `var`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re * s, im * s)
}

fn iid_matrix<R: Rng + ?Sized>(nr: usize, nt: usize, rng: &mut R) -> ComplexMatrix {
    ComplexMatrix::from_fn(nr, nt, |_, _| complex_gaussian(rng, 1.0))
}

/// `N_r x N_t` channel with i.i.d. `CN(0, 1)` entries.
pub fn gen_iid<R: Rng + ?Sized>(nr: usize, nt: usize, rng: &mut R) -> Result<ChannelRealization> {
    check_dims(nr, nt)?;
    Ok(ChannelRealization {
        h: iid_matrix(nr, nt, rng),
        source: ChannelSource::Iid,
        subcarrier: None,
    })
}

fn check_dims(nr: usize, nt: usize) -> Result<()> {
    if nr == 0 || nt == 0 {
        return Err(Error::Dimension(format!("channel dims must be positive, got {nr}x{nt}")));
    }
    Ok(())
}

/// Kronecker-correlated Rayleigh model `H = R^{1/2} G T^{1/2}` with
/// exponential correlation `rho^{|i-j|}` on both ends. The square roots are
/// computed once and reused for every draw.
#[derive(Clone, Debug)]
pub struct KroneckerModel {
    rho: f64,
    rx_sqrt: ComplexMatrix,
    tx_sqrt: ComplexMatrix,
}

/// `n x n` exponential correlation matrix.
pub fn exponential_correlation(n: usize, rho: f64) -> ComplexMatrix {
    ComplexMatrix::from_fn(n, n, |i, j| {
        Complex64::new(rho.powi((i as i64 - j as i64).unsigned_abs() as i32), 0.0)
    })
}

impl KroneckerModel {
    pub fn new(nr: usize, nt: usize, rho: f64) -> Result<Self> {
        check_dims(nr, nt)?;
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::InvalidArgument(format!("rho must lie in [0, 1), got {rho}")));
        }
        Ok(Self {
            rho,
            rx_sqrt: psd_sqrt(&exponential_correlation(nr, rho))?,
            tx_sqrt: psd_sqrt(&exponential_correlation(nt, rho))?,
        })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn n_r(&self) -> usize {
        self.rx_sqrt.rows()
    }

    pub fn n_t(&self) -> usize {
        self.tx_sqrt.rows()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ChannelRealization {
        let g = iid_matrix(self.rx_sqrt.rows(), self.tx_sqrt.rows(), rng);
        ChannelRealization {
            h: self.rx_sqrt.matmul(&g).matmul(&self.tx_sqrt),
            source: ChannelSource::Kronecker { rho: self.rho },
            subcarrier: None,
        }
    }
}

pub fn gen_kronecker<R: Rng + ?Sized>(nr: usize, nt: usize, rho: f64, rng: &mut R) -> Result<ChannelRealization> {
    Ok(KroneckerModel::new(nr, nt, rho)?.sample(rng))
}

/// Per-realization noise variance `||H||_F^2 10^(-snr/10) / N_r` for
/// unit-power symbols.
pub fn noise_var_for_snr(h: &ComplexMatrix, snr_db: f64) -> Result<f64> {
    let energy = h.frobenius_norm_sqr();
    if energy == 0.0 {
        return Err(Error::InvalidArgument("zero channel has no defined SNR".into()));
    }
    if !snr_db.is_finite() {
        return Err(Error::NonFinite("snr_db".into()));
    }
    Ok(energy * 10f64.powf(-snr_db / 10.0) / h.rows() as f64)
}

/// Draws uniform symbols and circular Gaussian noise of variance
/// `noise_var` per entry. Symbols are drawn before noise.
pub fn draw_sample<R: Rng + ?Sized>(
    h: &ComplexMatrix,
    c: &Constellation,
    noise_var: f64,
    rng: &mut R,
) -> Result<Sample> {
    if !(noise_var >= 0.0) || !noise_var.is_finite() {
        return Err(Error::InvalidArgument(format!("noise_var must be finite and >= 0, got {noise_var}")));
    }
    let x_indices: Vec<usize> = (0..h.cols()).map(|_| rng.random_range(0..c.len())).collect();
    let x = c.symbols(&x_indices);
    let mut y = h.mul_vec(&x);
    for yi in y.iter_mut() {
        *yi += complex_gaussian(rng, noise_var);
    }
    Ok(Sample {
        x_indices,
        x,
        y,
        noise_var,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct FileHeader {
    n_channels: usize,
    n_r: usize,
    n_t: usize,
    dtype: String,
}

const DTYPE: &str = "c128le";

/// Writes channels in order; all must share one shape.
pub fn save_channels(path: &Path, channels: &[ComplexMatrix]) -> Result<()> {
    let first = channels
        .first()
        .ok_or_else(|| Error::InvalidArgument("no channels to save".into()))?;
    let (nr, nt) = (first.rows(), first.cols());
    if channels.iter().any(|h| h.rows() != nr || h.cols() != nt) {
        return Err(Error::Dimension("channels in one file must share a shape".into()));
    }
    let header = FileHeader {
        n_channels: channels.len(),
        n_r: nr,
        n_t: nt,
        dtype: DTYPE.into(),
    };
    let mut buf = serde_json::to_vec(&header)?;
    buf.push(b'\n');
    buf.reserve(channels.len() * nr * nt * 16);
    for h in channels {
        for z in h.data() {
            buf.extend_from_slice(&z.re.to_le_bytes());
            buf.extend_from_slice(&z.im.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Reads a channel file, preserving order; the position in the file is
/// recorded as the subcarrier index.
pub fn load_channels(path: &Path) -> Result<Vec<ChannelRealization>> {
    parse_channels(&fs::read(path)?)
}

pub fn parse_channels(bytes: &[u8]) -> Result<Vec<ChannelRealization>> {
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Parse {
        offset: bytes.len() as u64,
        message: "missing header line".into(),
    })?;
    let header: FileHeader = serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Parse {
        offset: e.column().saturating_sub(1) as u64,
        message: format!("malformed header: {e}"),
    })?;
    if header.dtype != DTYPE {
        return Err(Error::Parse {
            offset: 0,
            message: format!("unsupported dtype {:?}", header.dtype),
        });
    }
    check_dims(header.n_r, header.n_t)?;
    let start = nl + 1;
    let payload = &bytes[start..];
    let record = header.n_r * header.n_t * 16;
    let whole = payload.len() / record;
    if payload.len() % record != 0 {
        return Err(Error::Parse {
            offset: (start + whole * record) as u64,
            message: format!(
                "truncated record: {} trailing bytes, record size {record}",
                payload.len() % record
            ),
        });
    }
    if whole != header.n_channels {
        return Err(Error::Dimension(format!(
            "header declares {} channels, file holds {whole}",
            header.n_channels
        )));
    }
    let mut out = Vec::with_capacity(whole);
    for (k, chunk) in payload.chunks_exact(record).enumerate() {
        let data: Vec<Complex64> = chunk
            .chunks_exact(16)
            .map(|c| {
                let re = f64::from_le_bytes(c[..8].try_into().expect("8 bytes"));
                let im = f64::from_le_bytes(c[8..].try_into().expect("8 bytes"));
                Complex64::new(re, im)
            })
            .collect();
        let h = ComplexMatrix::new(header.n_r, header.n_t, data)
            .map_err(|_| Error::NonFinite(format!("channel {k}")))?;
        out.push(ChannelRealization {
            h,
            source: ChannelSource::File,
            subcarrier: Some(k),
        });
    }
    Ok(out)
}
