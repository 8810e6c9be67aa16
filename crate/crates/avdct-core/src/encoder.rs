//! Edge-side compressor: a shared per-channel linear filter followed by the
//! N-subband transform compression unit, plus the parameter/MAC accountant.

use crate::config::ModelConfig;
use crate::diffnet::{
    conv1x1, conv1x1_backward, hard_threshold, hard_threshold_backward, linear_backward,
    linear_forward, scale, scale_backward,
};
use crate::error::{CodecError, Result};
use crate::tensor::Tensor;
use crate::transform::Dct;

/// A C x L matrix of real samples: one block per channel, the codec's unit of
/// work.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    channels: usize,
    block_len: usize,
    data: Vec<f64>,
}

impl Frame {
    pub fn new(channels: usize, block_len: usize) -> Self {
        Frame {
            channels,
            block_len,
            data: vec![0.0; channels * block_len],
        }
    }

    pub fn from_vec(channels: usize, block_len: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * block_len {
            return Err(CodecError::InvalidInput(format!(
                "frame data length {} does not match {channels} x {block_len}",
                data.len()
            )));
        }
        Ok(Frame {
            channels,
            block_len,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn row(&self, channel: usize) -> &[f64] {
        &self.data[channel * self.block_len..(channel + 1) * self.block_len]
    }

    pub fn row_mut(&mut self, channel: usize) -> &mut [f64] {
        &mut self.data[channel * self.block_len..(channel + 1) * self.block_len]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// C x L latent coefficients produced by the encoder.
pub type LatentFrame = Frame;

/// All trainable tensors of the edge network; one set shared by every channel.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// Per-channel input filter, L x L.
    pub lin_w: Tensor,
    /// Filter bias, length L.
    pub lin_b: Tensor,
    /// Subband thresholds, N x L, elementwise >= 0.
    pub thresholds: Tensor,
    /// Subband scaling vectors, N x L.
    pub scales: Tensor,
    /// Fusion weights of the 1x1 convolution, length N, no bias.
    pub fuse_w: Tensor,
}

impl EncoderParams {
    /// Identity initialization: the encoder starts as an exact per-channel
    /// transform, so early training works purely on the rate term.
    pub fn identity(cfg: &ModelConfig) -> Self {
        let l = cfg.block_len;
        let n = cfg.subbands;
        let mut fuse = Tensor::zeros(&[n]);
        fuse.data_mut()[0] = 1.0;
        EncoderParams {
            lin_w: Tensor::identity(l),
            lin_b: Tensor::zeros(&[l]),
            thresholds: Tensor::zeros(&[n, l]),
            scales: Tensor::filled(&[n, l], 1.0),
            fuse_w: fuse,
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let l = cfg.block_len;
        let n = cfg.subbands;
        let check =
            |r: crate::error::Result<()>| r.map_err(|e| CodecError::Configuration(e.to_string()));
        check(self.lin_w.expect_shape(&[l, l], "encoder lin_w"))?;
        check(self.lin_b.expect_shape(&[l], "encoder lin_b"))?;
        check(self.thresholds.expect_shape(&[n, l], "encoder thresholds"))?;
        check(self.scales.expect_shape(&[n, l], "encoder scales"))?;
        check(self.fuse_w.expect_shape(&[n], "encoder fuse_w"))?;
        if self.thresholds.data().iter().any(|v| *v < 0.0) {
            return Err(CodecError::InvalidParameter(
                "encoder thresholds must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Clamp thresholds back into their legal domain after an optimizer step.
    pub fn clamp_thresholds(&mut self) {
        for v in self.thresholds.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("enc.lin_w", &self.lin_w),
            ("enc.lin_b", &self.lin_b),
            ("enc.thresholds", &self.thresholds),
            ("enc.scales", &self.scales),
            ("enc.fuse_w", &self.fuse_w),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("enc.lin_w", &mut self.lin_w),
            ("enc.lin_b", &mut self.lin_b),
            ("enc.thresholds", &mut self.thresholds),
            ("enc.scales", &mut self.scales),
            ("enc.fuse_w", &mut self.fuse_w),
        ]
    }

    pub fn trainable_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Gradients mirroring [`EncoderParams`].
#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub lin_w: Tensor,
    pub lin_b: Tensor,
    pub thresholds: Tensor,
    pub scales: Tensor,
    pub fuse_w: Tensor,
}

impl EncoderGrads {
    pub fn zeros_like(p: &EncoderParams) -> Self {
        EncoderGrads {
            lin_w: Tensor::zeros(p.lin_w.shape()),
            lin_b: Tensor::zeros(p.lin_b.shape()),
            thresholds: Tensor::zeros(p.thresholds.shape()),
            scales: Tensor::zeros(p.scales.shape()),
            fuse_w: Tensor::zeros(p.fuse_w.shape()),
        }
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("enc.lin_w", &self.lin_w),
            ("enc.lin_b", &self.lin_b),
            ("enc.thresholds", &self.thresholds),
            ("enc.scales", &self.scales),
            ("enc.fuse_w", &self.fuse_w),
        ]
    }

    pub fn accumulate(&mut self, other: &EncoderGrads) {
        for (dst, src) in [
            (&mut self.lin_w, &other.lin_w),
            (&mut self.lin_b, &other.lin_b),
            (&mut self.thresholds, &other.thresholds),
            (&mut self.scales, &other.scales),
            (&mut self.fuse_w, &other.fuse_w),
        ] {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d += s;
            }
        }
    }

    pub fn scale_by(&mut self, factor: f64) {
        for t in [
            &mut self.lin_w,
            &mut self.lin_b,
            &mut self.thresholds,
            &mut self.scales,
            &mut self.fuse_w,
        ] {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }
}

fn subband_row(t: &Tensor, n: usize) -> Tensor {
    Tensor::from_vec(&[t.shape()[1]], t.row(n).to_vec()).expect("row of a validated tensor")
}

/// The transform compression unit applied to one block: transform, N parallel
/// threshold + scale subbands, 1x1 fusion.
pub fn dcu(x: &[f64], p: &EncoderParams, dct: &Dct) -> Result<Vec<f64>> {
    let (z, _) = dcu_cached(x, p, dct)?;
    Ok(z)
}

pub(crate) struct DcuCache {
    /// Transform coefficients of the filtered block.
    pub coeffs: Tensor,
    /// Thresholded coefficients per subband, N x L.
    pub kept: Tensor,
}

pub(crate) fn dcu_cached(x: &[f64], p: &EncoderParams, dct: &Dct) -> Result<(Vec<f64>, DcuCache)> {
    let l = dct.len();
    if x.len() != l {
        return Err(CodecError::Configuration(format!(
            "block length {} does not match configured length {l}",
            x.len()
        )));
    }
    let n = p.fuse_w.len();
    let coeffs = Tensor::from_vec(&[l], dct.forward(x)?)?;
    let mut kept = Tensor::zeros(&[n, l]);
    let mut stack = Tensor::zeros(&[n, l]);
    for sub in 0..n {
        let t = subband_row(&p.thresholds, sub);
        let v = subband_row(&p.scales, sub);
        let e = hard_threshold(&coeffs, &t)?;
        let h = scale(&e, &v)?;
        kept.row_mut(sub).copy_from_slice(e.data());
        stack.row_mut(sub).copy_from_slice(h.data());
    }
    let z = conv1x1(&stack, &p.fuse_w)?;
    Ok((z.data().to_vec(), DcuCache { coeffs, kept }))
}

/// Backward through one compression unit. Returns the gradient with respect
/// to the filtered block and accumulates parameter gradients.
pub(crate) fn dcu_backward(
    cache: &DcuCache,
    p: &EncoderParams,
    dct: &Dct,
    grad_z: &[f64],
    grads: &mut EncoderGrads,
) -> Result<Vec<f64>> {
    let l = dct.len();
    let n = p.fuse_w.len();
    let grad_z = Tensor::from_vec(&[l], grad_z.to_vec())?;

    // reconstruct the scaled stack from the cache for the fusion backward
    let mut stack = Tensor::zeros(&[n, l]);
    for sub in 0..n {
        let kept = cache.kept.row(sub);
        let v = p.scales.row(sub);
        for ((dst, e), s) in stack.row_mut(sub).iter_mut().zip(kept).zip(v) {
            *dst = e * s;
        }
    }
    let fuse = conv1x1_backward(&stack, &p.fuse_w, &grad_z)?;
    for (d, s) in grads.fuse_w.data_mut().iter_mut().zip(fuse.grad_w.data()) {
        *d += s;
    }

    let mut grad_coeffs = Tensor::zeros(&[l]);
    for sub in 0..n {
        let t = subband_row(&p.thresholds, sub);
        let v = subband_row(&p.scales, sub);
        let e = Tensor::from_vec(&[l], cache.kept.row(sub).to_vec())?;
        let grad_h = Tensor::from_vec(&[l], fuse.grad_stack.row(sub).to_vec())?;
        let sc = scale_backward(&e, &v, &grad_h)?;
        for (d, s) in grads.scales.row_mut(sub).iter_mut().zip(sc.grad_v.data()) {
            *d += s;
        }
        let th = hard_threshold_backward(&cache.coeffs, &t, &sc.grad_x)?;
        for (d, s) in grads
            .thresholds
            .row_mut(sub)
            .iter_mut()
            .zip(th.grad_t.data())
        {
            *d += s;
        }
        for (d, s) in grad_coeffs.data_mut().iter_mut().zip(th.grad_x.data()) {
            *d += s;
        }
    }

    // transform backward: the matrix is orthogonal, so the adjoint is the
    // inverse transform
    Ok(dct.apply_inv(grad_coeffs.data()))
}

/// Encode one frame with a shared parameter set.
pub fn encode_frame(frame: &Frame, p: &EncoderParams, dct: &Dct) -> Result<LatentFrame> {
    let (latent, _) = encode_frame_cached(frame, p, dct)?;
    Ok(latent)
}

/// Extension point for per-channel parameter sets: `sets` must hold either a
/// single shared set or one set per channel.
pub fn encode_frame_per_channel(
    frame: &Frame,
    sets: &[EncoderParams],
    dct: &Dct,
) -> Result<LatentFrame> {
    if sets.len() != 1 && sets.len() != frame.channels() {
        return Err(CodecError::Configuration(format!(
            "{} parameter sets for {} channels",
            sets.len(),
            frame.channels()
        )));
    }
    let mut latent = Frame::new(frame.channels(), frame.block_len());
    for c in 0..frame.channels() {
        let p = if sets.len() == 1 { &sets[0] } else { &sets[c] };
        let filtered = channel_filter(frame.row(c), p)?;
        let z = dcu(filtered.data(), p, dct)?;
        latent.row_mut(c).copy_from_slice(&z);
    }
    Ok(latent)
}

fn channel_filter(x: &[f64], p: &EncoderParams) -> Result<Tensor> {
    let xt = Tensor::from_vec(&[x.len()], x.to_vec())?;
    linear_forward(&xt, &p.lin_w, &p.lin_b)
}

pub struct EncoderCache {
    /// Input rows, kept for the linear backward.
    inputs: Vec<Tensor>,
    /// Filtered rows entering each compression unit.
    filtered: Vec<Tensor>,
    units: Vec<DcuCache>,
}

pub fn encode_frame_cached(
    frame: &Frame,
    p: &EncoderParams,
    dct: &Dct,
) -> Result<(LatentFrame, EncoderCache)> {
    if frame.block_len() != dct.len() {
        return Err(CodecError::Configuration(format!(
            "frame block length {} does not match transform length {}",
            frame.block_len(),
            dct.len()
        )));
    }
    let mut latent = Frame::new(frame.channels(), frame.block_len());
    let mut cache = EncoderCache {
        inputs: Vec::with_capacity(frame.channels()),
        filtered: Vec::with_capacity(frame.channels()),
        units: Vec::with_capacity(frame.channels()),
    };
    for c in 0..frame.channels() {
        let x = Tensor::from_vec(&[frame.block_len()], frame.row(c).to_vec())?;
        let filtered = linear_forward(&x, &p.lin_w, &p.lin_b)?;
        let (z, unit) = dcu_cached(filtered.data(), p, dct)?;
        latent.row_mut(c).copy_from_slice(&z);
        cache.inputs.push(x);
        cache.filtered.push(filtered);
        cache.units.push(unit);
    }
    Ok((latent, cache))
}

/// Backward through a whole frame; channel gradients accumulate into the
/// shared parameter set.
pub fn encode_frame_backward(
    cache: &EncoderCache,
    p: &EncoderParams,
    dct: &Dct,
    grad_latent: &Frame,
) -> Result<EncoderGrads> {
    let mut grads = EncoderGrads::zeros_like(p);
    for c in 0..grad_latent.channels() {
        let grad_filtered = dcu_backward(&cache.units[c], p, dct, grad_latent.row(c), &mut grads)?;
        let gf = Tensor::from_vec(&[grad_filtered.len()], grad_filtered)?;
        let lin = linear_backward(&cache.inputs[c], &p.lin_w, &gf)?;
        for (d, s) in grads.lin_w.data_mut().iter_mut().zip(lin.grad_w.data()) {
            *d += s;
        }
        for (d, s) in grads.lin_b.data_mut().iter_mut().zip(lin.grad_b.data()) {
            *d += s;
        }
    }
    Ok(grads)
}

/// Trainable parameter and multiply-accumulate counts of the encoder.
///
/// Parameters: the L x L filter (plus bias), N threshold and N scaling
/// vectors of length L, and N fusion weights. MACs per frame: each of the C
/// channels runs the linear filter (L^2), the transform matrix product (L^2)
/// and three N x L elementwise stages (threshold, scale, fuse).
pub fn model_stats(block_len: usize, subbands: usize, channels: usize) -> (u64, u64) {
    let l = block_len as u64;
    let n = subbands as u64;
    let c = channels as u64;
    let params = l * l + l + 2 * n * l + n;
    let macs = c * (l * l + l * l + 3 * n * l);
    (params, macs)
}
