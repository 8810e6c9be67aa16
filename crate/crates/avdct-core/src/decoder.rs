//! Fog-side reconstructor: cross-channel adaptive filter bank, residual
//! multi-head attention with inverse-transform reconstruction, and shared
//! per-channel output linear layers.

use crate::config::ModelConfig;
use crate::diffnet::{
    hard_threshold, hard_threshold_backward, mha_backward, mha_forward, MhaCache, MhaParams,
};
use crate::encoder::{Frame, LatentFrame};
use crate::error::{CodecError, Result};
use crate::tensor::Tensor;
use crate::transform::Dct;
use rand::Rng;

/// L x C feature map: rows index transform bins, columns index channels.
pub type FeatureMap = Tensor;

/// All trainable tensors of the fog network.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    /// First-stage filter vectors f_c, (C-1) x L.
    pub fb_f: Tensor,
    /// Second-stage filter vectors g_c, (C-1) x L.
    pub fb_g: Tensor,
    pub mha: MhaParams,
    /// Channel-axis linear after the residual attention, C x C.
    pub post_w: Tensor,
    /// Bias of the channel-axis linear, length C.
    pub post_b: Tensor,
    /// Decoder threshold over transform bins, length L, >= 0.
    pub dec_t: Tensor,
    /// Output linear shared across channels, L x L.
    pub out_w: Tensor,
    /// Output bias, length L.
    pub out_b: Tensor,
}

impl DecoderParams {
    /// Identity-leaning initialization: zero filter banks, zero attention
    /// output projection, identity linears and zero thresholds, so a fresh
    /// decoder inverts an identity-configured encoder exactly.
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let c = cfg.channels;
        let l = cfg.block_len;
        let fb_rows = c.saturating_sub(1);
        Ok(DecoderParams {
            fb_f: Tensor::zeros(&[fb_rows, l]),
            fb_g: Tensor::zeros(&[fb_rows, l]),
            mha: MhaParams::init(c, cfg.heads, rng)?,
            post_w: Tensor::identity(c),
            post_b: Tensor::zeros(&[c]),
            dec_t: Tensor::zeros(&[l]),
            out_w: Tensor::identity(l),
            out_b: Tensor::zeros(&[l]),
        })
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let c = cfg.channels;
        let l = cfg.block_len;
        let fb_rows = c.saturating_sub(1);
        let check =
            |r: crate::error::Result<()>| r.map_err(|e| CodecError::Configuration(e.to_string()));
        check(self.fb_f.expect_shape(&[fb_rows, l], "decoder fb_f"))?;
        check(self.fb_g.expect_shape(&[fb_rows, l], "decoder fb_g"))?;
        self.mha.validate(c, cfg.heads)?;
        check(self.post_w.expect_shape(&[c, c], "decoder post_w"))?;
        check(self.post_b.expect_shape(&[c], "decoder post_b"))?;
        check(self.dec_t.expect_shape(&[l], "decoder dec_t"))?;
        check(self.out_w.expect_shape(&[l, l], "decoder out_w"))?;
        check(self.out_b.expect_shape(&[l], "decoder out_b"))?;
        if self.dec_t.data().iter().any(|v| *v < 0.0) {
            return Err(CodecError::InvalidParameter(
                "decoder threshold must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn clamp_thresholds(&mut self) {
        for v in self.dec_t.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("dec.fb_f", &self.fb_f),
            ("dec.fb_g", &self.fb_g),
            ("dec.mha.wq", &self.mha.wq),
            ("dec.mha.wk", &self.mha.wk),
            ("dec.mha.wv", &self.mha.wv),
            ("dec.mha.bq", &self.mha.bq),
            ("dec.mha.bk", &self.mha.bk),
            ("dec.mha.bv", &self.mha.bv),
            ("dec.mha.wo", &self.mha.wo),
            ("dec.post_w", &self.post_w),
            ("dec.post_b", &self.post_b),
            ("dec.dec_t", &self.dec_t),
            ("dec.out_w", &self.out_w),
            ("dec.out_b", &self.out_b),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("dec.fb_f", &mut self.fb_f),
            ("dec.fb_g", &mut self.fb_g),
            ("dec.mha.wq", &mut self.mha.wq),
            ("dec.mha.wk", &mut self.mha.wk),
            ("dec.mha.wv", &mut self.mha.wv),
            ("dec.mha.bq", &mut self.mha.bq),
            ("dec.mha.bk", &mut self.mha.bk),
            ("dec.mha.bv", &mut self.mha.bv),
            ("dec.mha.wo", &mut self.mha.wo),
            ("dec.post_w", &mut self.post_w),
            ("dec.post_b", &mut self.post_b),
            ("dec.dec_t", &mut self.dec_t),
            ("dec.out_w", &mut self.out_w),
            ("dec.out_b", &mut self.out_b),
        ]
    }
}

/// Gradients mirroring [`DecoderParams`].
#[derive(Debug, Clone)]
pub struct DecoderGrads {
    pub fb_f: Tensor,
    pub fb_g: Tensor,
    pub mha_wq: Tensor,
    pub mha_wk: Tensor,
    pub mha_wv: Tensor,
    pub mha_bq: Tensor,
    pub mha_bk: Tensor,
    pub mha_bv: Tensor,
    pub mha_wo: Tensor,
    pub post_w: Tensor,
    pub post_b: Tensor,
    pub dec_t: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

impl DecoderGrads {
    pub fn zeros_like(p: &DecoderParams) -> Self {
        DecoderGrads {
            fb_f: Tensor::zeros(p.fb_f.shape()),
            fb_g: Tensor::zeros(p.fb_g.shape()),
            mha_wq: Tensor::zeros(p.mha.wq.shape()),
            mha_wk: Tensor::zeros(p.mha.wk.shape()),
            mha_wv: Tensor::zeros(p.mha.wv.shape()),
            mha_bq: Tensor::zeros(p.mha.bq.shape()),
            mha_bk: Tensor::zeros(p.mha.bk.shape()),
            mha_bv: Tensor::zeros(p.mha.bv.shape()),
            mha_wo: Tensor::zeros(p.mha.wo.shape()),
            post_w: Tensor::zeros(p.post_w.shape()),
            post_b: Tensor::zeros(p.post_b.shape()),
            dec_t: Tensor::zeros(p.dec_t.shape()),
            out_w: Tensor::zeros(p.out_w.shape()),
            out_b: Tensor::zeros(p.out_b.shape()),
        }
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("dec.fb_f", &self.fb_f),
            ("dec.fb_g", &self.fb_g),
            ("dec.mha.wq", &self.mha_wq),
            ("dec.mha.wk", &self.mha_wk),
            ("dec.mha.wv", &self.mha_wv),
            ("dec.mha.bq", &self.mha_bq),
            ("dec.mha.bk", &self.mha_bk),
            ("dec.mha.bv", &self.mha_bv),
            ("dec.mha.wo", &self.mha_wo),
            ("dec.post_w", &self.post_w),
            ("dec.post_b", &self.post_b),
            ("dec.dec_t", &self.dec_t),
            ("dec.out_w", &self.out_w),
            ("dec.out_b", &self.out_b),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 14] {
        [
            &mut self.fb_f,
            &mut self.fb_g,
            &mut self.mha_wq,
            &mut self.mha_wk,
            &mut self.mha_wv,
            &mut self.mha_bq,
            &mut self.mha_bk,
            &mut self.mha_bv,
            &mut self.mha_wo,
            &mut self.post_w,
            &mut self.post_b,
            &mut self.dec_t,
            &mut self.out_w,
            &mut self.out_b,
        ]
    }

    pub fn accumulate(&mut self, other: &DecoderGrads) {
        let src = other.named_tensors();
        for (dst, (_, s)) in self.tensors_mut().into_iter().zip(src) {
            for (d, v) in dst.data_mut().iter_mut().zip(s.data()) {
                *d += v;
            }
        }
    }

    pub fn scale_by(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }
}

/// Two-stage cross-channel mixing. Stage one folds each channel's left
/// neighbour in; stage two folds the right neighbour of the intermediate.
/// Returns the L x C feature map whose column c is s_c.
pub fn filter_bank(latent: &LatentFrame, fb_f: &Tensor, fb_g: &Tensor) -> Result<FeatureMap> {
    let (map, _) = filter_bank_cached(latent, fb_f, fb_g)?;
    Ok(map)
}

pub(crate) struct FilterBankCache {
    /// Stage-one outputs u_c, C x L.
    pub mixed: Frame,
}

pub(crate) fn filter_bank_cached(
    latent: &LatentFrame,
    fb_f: &Tensor,
    fb_g: &Tensor,
) -> Result<(FeatureMap, FilterBankCache)> {
    let c = latent.channels();
    let l = latent.block_len();
    if c < 1 {
        return Err(CodecError::InvalidInput(
            "filter bank needs at least one channel".into(),
        ));
    }
    let fb_rows = c - 1;
    fb_f.expect_shape(&[fb_rows, l], "fb_f")?;
    fb_g.expect_shape(&[fb_rows, l], "fb_g")?;

    let mut mixed = Frame::new(c, l);
    mixed.row_mut(0).copy_from_slice(latent.row(0));
    for ch in 1..c {
        let prev = latent.row(ch - 1);
        let f = fb_f.row(ch - 1);
        let cur = latent.row(ch);
        let dst = mixed.row_mut(ch);
        for i in 0..l {
            dst[i] = cur[i] + prev[i] * f[i];
        }
    }

    let mut map = Tensor::zeros(&[l, c]);
    for ch in 0..c {
        let u = mixed.row(ch);
        if ch + 1 < c {
            let next = mixed.row(ch + 1);
            let g = fb_g.row(ch);
            for i in 0..l {
                *map.at_mut(i, ch) = u[i] + next[i] * g[i];
            }
        } else {
            for i in 0..l {
                *map.at_mut(i, ch) = u[i];
            }
        }
    }
    Ok((map, FilterBankCache { mixed }))
}

pub(crate) fn filter_bank_backward(
    latent: &LatentFrame,
    fb_f: &Tensor,
    fb_g: &Tensor,
    cache: &FilterBankCache,
    grad_map: &Tensor,
    grads: &mut DecoderGrads,
) -> Result<Frame> {
    let c = latent.channels();
    let l = latent.block_len();
    grad_map.expect_shape(&[l, c], "filter bank cotangent")?;

    // stage two: s_c = u_c + u_{c+1} . g_c
    let mut grad_mixed = Frame::new(c, l);
    for ch in 0..c {
        for i in 0..l {
            let gs = grad_map.at(i, ch);
            grad_mixed.row_mut(ch)[i] += gs;
            if ch + 1 < c {
                let u_next = cache.mixed.row(ch + 1)[i];
                grads.fb_g.row_mut(ch)[i] += gs * u_next;
                grad_mixed.row_mut(ch + 1)[i] += gs * fb_g.row(ch)[i];
            }
        }
    }

    // stage one: u_c = y_c + y_{c-1} . f_{c-1}
    let mut grad_latent = Frame::new(c, l);
    for ch in (0..c).rev() {
        let gu = grad_mixed.row(ch).to_vec();
        for i in 0..l {
            grad_latent.row_mut(ch)[i] += gu[i];
            if ch >= 1 {
                let y_prev = latent.row(ch - 1)[i];
                grads.fb_f.row_mut(ch - 1)[i] += gu[i] * y_prev;
                grad_latent.row_mut(ch - 1)[i] += gu[i] * fb_f.row(ch - 1)[i];
            }
        }
    }
    Ok(grad_latent)
}

/// Residual attention, channel linear, hard threshold, column-wise inverse
/// transform.
pub fn irmha(s: &FeatureMap, p: &DecoderParams, dct: &Dct) -> Result<FeatureMap> {
    let (out, _) = irmha_cached(s, p, dct)?;
    Ok(out)
}

pub(crate) struct IrmhaCache {
    pub mha: MhaCache,
    /// Residual sum r = s + mha(s).
    pub residual: Tensor,
    /// Channel-linear output before thresholding.
    pub pre_threshold: Tensor,
}

pub(crate) fn irmha_cached(
    s: &FeatureMap,
    p: &DecoderParams,
    dct: &Dct,
) -> Result<(FeatureMap, IrmhaCache)> {
    if s.shape().len() != 2 {
        return Err(CodecError::InvalidInput(
            "feature map must be rank 2".into(),
        ));
    }
    let (l, c) = (s.shape()[0], s.shape()[1]);
    if l != dct.len() {
        return Err(CodecError::Configuration(format!(
            "feature map has {l} rows but the transform length is {}",
            dct.len()
        )));
    }
    let (attn_out, mha_cache) = mha_forward(s, &p.mha)?;
    let mut residual = s.clone();
    for (r, a) in residual.data_mut().iter_mut().zip(attn_out.data()) {
        *r += a;
    }

    // channel-axis linear: m[l, :] = r[l, :] post_w + post_b
    let mut pre = Tensor::zeros(&[l, c]);
    for row in 0..l {
        let rrow = residual.row(row);
        let dst = pre.row_mut(row);
        dst.copy_from_slice(p.post_b.data());
        for (i, rv) in rrow.iter().enumerate() {
            let wrow = p.post_w.row(i);
            for (d, wv) in dst.iter_mut().zip(wrow) {
                *d += rv * wv;
            }
        }
    }

    let thresholded = hard_threshold(&pre, &p.dec_t)?;

    // inverse transform down each column
    let mut out = Tensor::zeros(&[l, c]);
    let mut col = vec![0.0; l];
    for ch in 0..c {
        for row in 0..l {
            col[row] = thresholded.at(row, ch);
        }
        let rec = dct.apply_inv(&col);
        for row in 0..l {
            *out.at_mut(row, ch) = rec[row];
        }
    }
    Ok((
        out,
        IrmhaCache {
            mha: mha_cache,
            residual,
            pre_threshold: pre,
        },
    ))
}

pub(crate) fn irmha_backward(
    s: &FeatureMap,
    p: &DecoderParams,
    dct: &Dct,
    cache: &IrmhaCache,
    grad_out: &Tensor,
    grads: &mut DecoderGrads,
) -> Result<Tensor> {
    let (l, c) = (s.shape()[0], s.shape()[1]);
    grad_out.expect_shape(&[l, c], "irmha cotangent")?;

    // adjoint of the column-wise inverse transform is the forward transform
    let mut grad_thresholded = Tensor::zeros(&[l, c]);
    let mut col = vec![0.0; l];
    for ch in 0..c {
        for row in 0..l {
            col[row] = grad_out.at(row, ch);
        }
        let g = dct.apply_fwd(&col);
        for row in 0..l {
            *grad_thresholded.at_mut(row, ch) = g[row];
        }
    }

    let th = hard_threshold_backward(&cache.pre_threshold, &p.dec_t, &grad_thresholded)?;
    for (d, s) in grads.dec_t.data_mut().iter_mut().zip(th.grad_t.data()) {
        *d += s;
    }

    // channel linear backward
    let mut grad_residual = Tensor::zeros(&[l, c]);
    for row in 0..l {
        let grow = th.grad_x.row(row);
        let rrow = cache.residual.row(row);
        for i in 0..c {
            let wrow = p.post_w.row(i);
            let mut acc = 0.0;
            for (j, g) in grow.iter().enumerate() {
                acc += g * wrow[j];
                *grads.post_w.at_mut(i, j) += rrow[i] * g;
            }
            *grad_residual.at_mut(row, i) = acc;
        }
        for (b, g) in grads.post_b.data_mut().iter_mut().zip(grow) {
            *b += g;
        }
    }

    // residual: gradient flows both through the attention and directly
    let mha_grads = mha_backward(s, &p.mha, &cache.mha, &grad_residual)?;
    for (dst, src) in [
        (&mut grads.mha_wq, &mha_grads.wq),
        (&mut grads.mha_wk, &mha_grads.wk),
        (&mut grads.mha_wv, &mha_grads.wv),
        (&mut grads.mha_bq, &mha_grads.bq),
        (&mut grads.mha_bk, &mha_grads.bk),
        (&mut grads.mha_bv, &mha_grads.bv),
        (&mut grads.mha_wo, &mha_grads.wo),
    ] {
        for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
            *d += s;
        }
    }

    let mut grad_s = grad_residual;
    for (g, m) in grad_s.data_mut().iter_mut().zip(mha_grads.grad_s.data()) {
        *g += m;
    }
    Ok(grad_s)
}

/// Decode a latent frame back into a C x L signal frame.
pub fn decode_frame(latent: &LatentFrame, p: &DecoderParams, dct: &Dct) -> Result<Frame> {
    let (frame, _) = decode_frame_cached(latent, p, dct)?;
    Ok(frame)
}

pub struct DecoderCache {
    fb: FilterBankCache,
    map: FeatureMap,
    irmha: IrmhaCache,
    /// Reconstructed columns entering the output linear, per channel.
    rec_rows: Vec<Vec<f64>>,
}

pub fn decode_frame_cached(
    latent: &LatentFrame,
    p: &DecoderParams,
    dct: &Dct,
) -> Result<(Frame, DecoderCache)> {
    let c = latent.channels();
    let l = latent.block_len();
    let (map, fb_cache) = filter_bank_cached(latent, &p.fb_f, &p.fb_g)?;
    let (rec, irmha_cache) = irmha_cached(&map, p, dct)?;

    let mut frame = Frame::new(c, l);
    let mut rec_rows = Vec::with_capacity(c);
    for ch in 0..c {
        let mut col = vec![0.0; l];
        for row in 0..l {
            col[row] = rec.at(row, ch);
        }
        let out = frame.row_mut(ch);
        out.copy_from_slice(p.out_b.data());
        for (i, sv) in col.iter().enumerate() {
            let wrow = p.out_w.row(i);
            for (o, wv) in out.iter_mut().zip(wrow) {
                *o += sv * wv;
            }
        }
        rec_rows.push(col);
    }
    Ok((
        frame,
        DecoderCache {
            fb: fb_cache,
            map,
            irmha: irmha_cache,
            rec_rows,
        },
    ))
}

/// Backward through the whole decoder. Returns parameter gradients and the
/// gradient with respect to the latent frame.
pub fn decode_frame_backward(
    latent: &LatentFrame,
    p: &DecoderParams,
    dct: &Dct,
    cache: &DecoderCache,
    grad_frame: &Frame,
) -> Result<(DecoderGrads, LatentFrame)> {
    let c = latent.channels();
    let l = latent.block_len();
    let mut grads = DecoderGrads::zeros_like(p);

    // output linear backward, shared across channels
    let mut grad_rec = Tensor::zeros(&[l, c]);
    for ch in 0..c {
        let g = grad_frame.row(ch);
        let col = &cache.rec_rows[ch];
        for i in 0..l {
            let wrow = p.out_w.row(i);
            let mut acc = 0.0;
            for (j, gv) in g.iter().enumerate() {
                acc += gv * wrow[j];
                *grads.out_w.at_mut(i, j) += col[i] * gv;
            }
            *grad_rec.at_mut(i, ch) = acc;
        }
        for (b, gv) in grads.out_b.data_mut().iter_mut().zip(g) {
            *b += gv;
        }
    }

    let grad_map = irmha_backward(&cache.map, p, dct, &cache.irmha, &grad_rec, &mut grads)?;
    let grad_latent =
        filter_bank_backward(latent, &p.fb_f, &p.fb_g, &cache.fb, &grad_map, &mut grads)?;
    Ok((grads, grad_latent))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{encode_frame, EncoderParams};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rand_latent(rng: &mut ChaCha20Rng, c: usize, l: usize) -> LatentFrame {
        let data = (0..c * l).map(|_| rng.random_range(-1.0..1.0)).collect();
        Frame::from_vec(c, l, data).unwrap()
    }

    #[test]
    fn zero_filters_pass_channels_through() {
        let mut rng = ChaCha20Rng::seed_from_u64(80);
        let latent = rand_latent(&mut rng, 3, 4);
        let f = Tensor::zeros(&[2, 4]);
        let g = Tensor::zeros(&[2, 4]);
        let map = filter_bank(&latent, &f, &g).unwrap();
        for ch in 0..3 {
            for i in 0..4 {
                assert_eq!(map.at(i, ch), latent.row(ch)[i]);
            }
        }
    }

    #[test]
    fn single_channel_ignores_filters() {
        let mut rng = ChaCha20Rng::seed_from_u64(81);
        let latent = rand_latent(&mut rng, 1, 4);
        let f = Tensor::zeros(&[0, 4]);
        let g = Tensor::zeros(&[0, 4]);
        let map = filter_bank(&latent, &f, &g).unwrap();
        for i in 0..4 {
            assert_eq!(map.at(i, 0), latent.row(0)[i]);
        }
    }

    #[test]
    fn hand_worked_three_channel_example() {
        let latent = Frame::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let f = Tensor::filled(&[2, 2], 1.0);
        let g = Tensor::filled(&[2, 2], 1.0);
        let (map, cache) = filter_bank_cached(&latent, &f, &g).unwrap();
        assert_eq!(cache.mixed.data(), &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        // columns are s_0, s_1, s_2
        assert_eq!(map.at(0, 0), 2.0);
        assert_eq!(map.at(1, 0), 1.0);
        assert_eq!(map.at(0, 1), 2.0);
        assert_eq!(map.at(1, 1), 3.0);
        assert_eq!(map.at(0, 2), 1.0);
        assert_eq!(map.at(1, 2), 2.0);
    }

    #[test]
    fn filter_bank_is_linear_in_the_latent() {
        let mut rng = ChaCha20Rng::seed_from_u64(82);
        let c = 4;
        let l = 8;
        let fill = |rng: &mut ChaCha20Rng| {
            let data = (0..(c - 1) * l)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            Tensor::from_vec(&[c - 1, l], data).unwrap()
        };
        let f = fill(&mut rng);
        let g = fill(&mut rng);
        let a = rand_latent(&mut rng, c, l);
        let b = rand_latent(&mut rng, c, l);
        let (alpha, beta) = (0.7, -1.3);
        let mut combo = Frame::new(c, l);
        for i in 0..c * l {
            combo.row_mut(i / l)[i % l] = alpha * a.data()[i] + beta * b.data()[i];
        }
        let lhs = filter_bank(&combo, &f, &g).unwrap();
        let ma = filter_bank(&a, &f, &g).unwrap();
        let mb = filter_bank(&b, &f, &g).unwrap();
        for i in 0..l * c {
            let expect = alpha * ma.data()[i] + beta * mb.data()[i];
            assert!((lhs.data()[i] - expect).abs() <= 1e-12);
        }
    }

    fn identity_decoder(cfg: &ModelConfig, rng: &mut ChaCha20Rng) -> DecoderParams {
        DecoderParams::init(cfg, rng).unwrap()
    }

    #[test]
    fn irmha_reduces_to_column_transform_when_attention_is_off() {
        let cfg = ModelConfig::new(4, 8, 3, 2).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(83);
        let p = identity_decoder(&cfg, &mut rng);
        let dct = Dct::new(8).unwrap();
        let latent = rand_latent(&mut rng, 4, 8);
        let map = filter_bank(&latent, &p.fb_f, &p.fb_g).unwrap();
        let out = irmha(&map, &p, &dct).unwrap();
        for ch in 0..4 {
            let col: Vec<f64> = (0..8).map(|r| map.at(r, ch)).collect();
            let expect = dct.inverse(&col).unwrap();
            for (r, e) in expect.iter().enumerate() {
                assert!((out.at(r, ch) - e).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn irmha_matches_stage_by_stage_composition() {
        let cfg = ModelConfig::new(4, 2, 3, 2).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(84);
        let mut p = identity_decoder(&cfg, &mut rng);
        for (_, t) in p.named_tensors_mut() {
            for v in t.data_mut() {
                *v = rng.random_range(-0.6..0.6);
            }
        }
        p.dec_t = Tensor::from_vec(&[2], vec![0.1, 0.05]).unwrap();
        let dct = Dct::new(2).unwrap();
        let s = Tensor::from_vec(
            &[2, 4],
            (0..8).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();

        let out = irmha(&s, &p, &dct).unwrap();

        // independent straight-line composition of the four stages
        let (attn, _) = mha_forward(&s, &p.mha).unwrap();
        let mut r = s.clone();
        for (a, b) in r.data_mut().iter_mut().zip(attn.data()) {
            *a += b;
        }
        let mut m = Tensor::zeros(&[2, 4]);
        for row in 0..2 {
            for j in 0..4 {
                let mut acc = p.post_b.data()[j];
                for i in 0..4 {
                    acc += r.at(row, i) * p.post_w.at(i, j);
                }
                *m.at_mut(row, j) = acc;
            }
        }
        let ht = hard_threshold(&m, &p.dec_t).unwrap();
        for ch in 0..4 {
            let col: Vec<f64> = (0..2).map(|r| ht.at(r, ch)).collect();
            let rec = dct.inverse(&col).unwrap();
            for (r, e) in rec.iter().enumerate() {
                assert!((out.at(r, ch) - e).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn identity_pipeline_reconstructs_frames() {
        let cfg = ModelConfig::new(4, 8, 3, 2).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(85);
        let enc = EncoderParams::identity(&cfg);
        let dec = identity_decoder(&cfg, &mut rng);
        let dct = Dct::new(8).unwrap();
        let frame = rand_latent(&mut rng, 4, 8);
        let latent = encode_frame(&frame, &enc, &dct).unwrap();
        let rec = decode_frame(&latent, &dec, &dct).unwrap();
        for (a, b) in rec.data().iter().zip(frame.data()) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn decode_matches_manual_pipeline_composition() {
        let cfg = ModelConfig::new(4, 8, 3, 2).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(86);
        let mut p = identity_decoder(&cfg, &mut rng);
        for (_, t) in p.named_tensors_mut() {
            for v in t.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        p.clamp_thresholds();
        let dct = Dct::new(8).unwrap();
        let latent = rand_latent(&mut rng, 4, 8);

        let frame = decode_frame(&latent, &p, &dct).unwrap();

        let map = filter_bank(&latent, &p.fb_f, &p.fb_g).unwrap();
        let rec = irmha(&map, &p, &dct).unwrap();
        for ch in 0..4 {
            for j in 0..8 {
                let mut acc = p.out_b.data()[j];
                for i in 0..8 {
                    acc += rec.at(i, ch) * p.out_w.at(i, j);
                }
                assert!((frame.row(ch)[j] - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_latent_with_zero_biases_decodes_to_zero() {
        let cfg = ModelConfig::new(4, 8, 3, 2).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(87);
        let p = identity_decoder(&cfg, &mut rng);
        let dct = Dct::new(8).unwrap();
        let latent = Frame::new(4, 8);
        let frame = decode_frame(&latent, &p, &dct).unwrap();
        assert!(frame.data().iter().all(|v| *v == 0.0));
    }
}
