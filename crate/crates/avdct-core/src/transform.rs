//! Orthogonal cosine transform pair of length L and the weighted
//! multiply/convolve identity used to interpret the scaling layers as filters.
//!
//! The forward transform maps a time-domain block to coefficients
//!
//! ```text
//! X_i = sqrt(1/L) x_0 + sqrt(2/L) * sum_{l=1..L-1} x_l cos[(pi/L)(i + 1/2) l]
//! ```
//!
//! and the inverse is its transpose. Both are realized as precomputed L x L
//! matrix products: L is small and the matrix form doubles as the reference
//! for multiply-accumulate accounting.

use crate::error::{CodecError, Result};

/// Precomputed transform of a fixed length.
#[derive(Debug, Clone)]
pub struct Dct {
    len: usize,
    /// Row-major L x L forward matrix M with X = M x.
    fwd: Vec<f64>,
}

impl Dct {
    pub fn new(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(CodecError::InvalidInput(
                "transform length must be at least 1".into(),
            ));
        }
        let mut fwd = vec![0.0; len * len];
        let dc = (1.0 / len as f64).sqrt();
        let ac = (2.0 / len as f64).sqrt();
        for i in 0..len {
            fwd[i * len] = dc;
            for l in 1..len {
                let angle = std::f64::consts::PI / len as f64 * (i as f64 + 0.5) * l as f64;
                fwd[i * len + l] = ac * angle.cos();
            }
        }
        Ok(Dct { len, fwd })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.len {
            return Err(CodecError::InvalidInput(format!(
                "block length {} does not match transform length {}",
                x.len(),
                self.len
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(CodecError::InvalidInput(
                "block contains a non-finite sample".into(),
            ));
        }
        Ok(())
    }

    /// Forward transform X = M x.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.apply_fwd(x))
    }

    /// Inverse transform x = M^T X. The matrix is orthogonal, so the
    /// transpose is the exact inverse.
    pub fn inverse(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        self.check_input(coeffs)?;
        Ok(self.apply_inv(coeffs))
    }

    pub(crate) fn apply_fwd(&self, x: &[f64]) -> Vec<f64> {
        let l = self.len;
        let mut out = vec![0.0; l];
        for i in 0..l {
            let row = &self.fwd[i * l..(i + 1) * l];
            out[i] = row.iter().zip(x).map(|(m, v)| m * v).sum();
        }
        out
    }

    pub(crate) fn apply_inv(&self, x: &[f64]) -> Vec<f64> {
        let l = self.len;
        let mut out = vec![0.0; l];
        for (i, xi) in x.iter().enumerate() {
            let row = &self.fwd[i * l..(i + 1) * l];
            for (o, m) in out.iter_mut().zip(row) {
                *o += m * xi;
            }
        }
        out
    }
}

/// The constant weight vectors pairing elementwise multiplication in the
/// transform domain with symmetric convolution in the time domain.
///
/// `a[0] = 1/(2 sqrt(L))`, `a[i] = sqrt(1/(2L))` for `i > 0`, and
/// `k[i] = 1/a[i]`, so `a[i] * k[i] = 1` by construction.
#[derive(Debug, Clone)]
pub struct ConvWeightVectors {
    pub a: Vec<f64>,
    pub k: Vec<f64>,
}

impl ConvWeightVectors {
    pub fn new(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(CodecError::InvalidInput(
                "weight vector length must be at least 1".into(),
            ));
        }
        let lf = len as f64;
        let mut a = vec![(1.0 / (2.0 * lf)).sqrt(); len];
        a[0] = 1.0 / (2.0 * lf.sqrt());
        let k = a.iter().map(|v| 1.0 / v).collect();
        Ok(ConvWeightVectors { a, k })
    }
}

/// Symmetric convolution of `x` with the filter `w`, computed in the
/// transform domain: `IDCT(DCT(x . a) . DCT(w . a)) . k`.
///
/// Multiplying the a-weighted spectrum of `x` by `v = DCT(w . a)` and
/// applying the k-corrected inverse is exactly the time-domain symmetric
/// convolution of `x` with `w`, so each trainable scaling subband acts as a
/// learned filter.
pub fn symmetric_convolve(dct: &Dct, x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    if x.len() != w.len() {
        return Err(CodecError::InvalidInput(format!(
            "signal length {} does not match filter length {}",
            x.len(),
            w.len()
        )));
    }
    let weights = ConvWeightVectors::new(dct.len())?;
    let xa: Vec<f64> = x.iter().zip(&weights.a).map(|(v, a)| v * a).collect();
    let wa: Vec<f64> = w.iter().zip(&weights.a).map(|(v, a)| v * a).collect();
    let sx = dct.forward(&xa)?;
    let sw = dct.forward(&wa)?;
    let prod: Vec<f64> = sx.iter().zip(&sw).map(|(p, q)| p * q).collect();
    let back = dct.inverse(&prod)?;
    Ok(back.iter().zip(&weights.k).map(|(v, k)| v * k).collect())
}
