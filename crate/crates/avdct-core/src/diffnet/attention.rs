//! Multi-head scaled dot-product attention over an L x C feature map, with an
//! explicit backward pass.
//!
//! Rows index transform bins (sequence positions), columns index channels.
//! Each head projects the map with its own C x D matrices; the projection
//! biases are shared across heads.

use super::{softmax_row, softmax_row_backward};
use crate::error::{CodecError, Result};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct MhaParams {
    /// Query projections, shape [h, C, D].
    pub wq: Tensor,
    /// Key projections, shape [h, C, D].
    pub wk: Tensor,
    /// Value projections, shape [h, C, D].
    pub wv: Tensor,
    /// Query bias, shape [D], shared across heads.
    pub bq: Tensor,
    /// Key bias, shape [D], shared across heads.
    pub bk: Tensor,
    /// Value bias, shape [D], shared across heads.
    pub bv: Tensor,
    /// Output projection, shape [C, C].
    pub wo: Tensor,
}

impl MhaParams {
    /// Fan-in uniform projections with a zero output matrix, so the residual
    /// path dominates at the start of training.
    pub fn init<R: Rng>(channels: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(CodecError::Configuration(format!(
                "channel count {channels} is not divisible by head count {heads}"
            )));
        }
        let d = channels / heads;
        let bound = 1.0 / (channels as f64).sqrt();
        let mut proj = || -> Tensor {
            let data = (0..heads * channels * d)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            Tensor::from_vec(&[heads, channels, d], data).expect("shape matches data")
        };
        Ok(MhaParams {
            wq: proj(),
            wk: proj(),
            wv: proj(),
            bq: Tensor::zeros(&[d]),
            bk: Tensor::zeros(&[d]),
            bv: Tensor::zeros(&[d]),
            wo: Tensor::zeros(&[channels, channels]),
        })
    }

    pub fn heads(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.wq.shape()[1]
    }

    pub fn head_dim(&self) -> usize {
        self.wq.shape()[2]
    }

    pub fn validate(&self, channels: usize, heads: usize) -> Result<()> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(CodecError::Configuration(format!(
                "channel count {channels} is not divisible by head count {heads}"
            )));
        }
        let d = channels / heads;
        for (name, t) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv)] {
            t.expect_shape(&[heads, channels, d], name)
                .map_err(|e| CodecError::Configuration(e.to_string()))?;
        }
        for (name, t) in [("bq", &self.bq), ("bk", &self.bk), ("bv", &self.bv)] {
            t.expect_shape(&[d], name)
                .map_err(|e| CodecError::Configuration(e.to_string()))?;
        }
        self.wo
            .expect_shape(&[channels, channels], "wo")
            .map_err(|e| CodecError::Configuration(e.to_string()))?;
        Ok(())
    }
}

/// Intermediate activations kept for the backward pass.
pub struct MhaCache {
    /// Per-head Q, K, V projections, each [h][L * D].
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Per-head attention weights, each [h][L * L] row-softmaxed.
    attn: Vec<Vec<f64>>,
    /// Concatenated head outputs, [L * C].
    concat: Vec<f64>,
}

pub struct MhaGrads {
    pub grad_s: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub bq: Tensor,
    pub bk: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
}

// project one head: out[l, :] = s[l, :] * w_head + bias
fn project(s: &Tensor, w_head: &[f64], bias: &[f64], rows: usize, c: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * d];
    for l in 0..rows {
        let srow = s.row(l);
        let orow = &mut out[l * d..(l + 1) * d];
        orow.copy_from_slice(bias);
        for (i, sv) in srow.iter().enumerate().take(c) {
            let wrow = &w_head[i * d..(i + 1) * d];
            for (o, wv) in orow.iter_mut().zip(wrow) {
                *o += sv * wv;
            }
        }
    }
    out
}

/// Forward pass; `s` must be [L, C] with C = heads * head_dim.
pub fn mha_forward(s: &Tensor, p: &MhaParams) -> Result<(Tensor, MhaCache)> {
    if s.shape().len() != 2 {
        return Err(CodecError::InvalidInput(
            "attention input must be a rank-2 feature map".into(),
        ));
    }
    let (rows, c) = (s.shape()[0], s.shape()[1]);
    let heads = p.heads();
    p.validate(c, heads)?;
    let d = p.head_dim();
    let scale = 1.0 / (d as f64).sqrt();

    let mut q = Vec::with_capacity(heads);
    let mut k = Vec::with_capacity(heads);
    let mut v = Vec::with_capacity(heads);
    let mut attn = Vec::with_capacity(heads);
    let mut concat = vec![0.0; rows * c];

    for h in 0..heads {
        let qh = project(s, p.wq.row(h), p.bq.data(), rows, c, d);
        let kh = project(s, p.wk.row(h), p.bk.data(), rows, c, d);
        let vh = project(s, p.wv.row(h), p.bv.data(), rows, c, d);

        let mut ah = vec![0.0; rows * rows];
        for i in 0..rows {
            let qrow = &qh[i * d..(i + 1) * d];
            for j in 0..rows {
                let krow = &kh[j * d..(j + 1) * d];
                ah[i * rows + j] = scale * qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
            }
            softmax_row(&mut ah[i * rows..(i + 1) * rows]);
        }

        // head output goes into its slice of the concatenation
        for i in 0..rows {
            let arow = &ah[i * rows..(i + 1) * rows];
            let orow = &mut concat[i * c + h * d..i * c + (h + 1) * d];
            for (j, a) in arow.iter().enumerate() {
                let vrow = &vh[j * d..(j + 1) * d];
                for (o, vv) in orow.iter_mut().zip(vrow) {
                    *o += a * vv;
                }
            }
        }

        q.push(qh);
        k.push(kh);
        v.push(vh);
        attn.push(ah);
    }

    // output projection: out[l, :] = concat[l, :] * wo
    let mut out = vec![0.0; rows * c];
    for l in 0..rows {
        let crow = &concat[l * c..(l + 1) * c];
        let orow = &mut out[l * c..(l + 1) * c];
        for (i, cv) in crow.iter().enumerate() {
            let wrow = p.wo.row(i);
            for (o, wv) in orow.iter_mut().zip(wrow) {
                *o += cv * wv;
            }
        }
    }

    Ok((
        Tensor::from_vec(&[rows, c], out)?,
        MhaCache {
            q,
            k,
            v,
            attn,
            concat,
        },
    ))
}

/// Backward pass; bias gradients accumulate across heads since the biases are
/// shared.
pub fn mha_backward(
    s: &Tensor,
    p: &MhaParams,
    cache: &MhaCache,
    grad_out: &Tensor,
) -> Result<MhaGrads> {
    let (rows, c) = (s.shape()[0], s.shape()[1]);
    grad_out.expect_shape(&[rows, c], "attention cotangent")?;
    let heads = p.heads();
    let d = p.head_dim();
    let scale = 1.0 / (d as f64).sqrt();

    // through the output projection
    let mut grad_wo = Tensor::zeros(&[c, c]);
    let mut grad_concat = vec![0.0; rows * c];
    for l in 0..rows {
        let crow = &cache.concat[l * c..(l + 1) * c];
        let grow = grad_out.row(l);
        for i in 0..c {
            let wrow = p.wo.row(i);
            let mut acc = 0.0;
            for (j, g) in grow.iter().enumerate() {
                acc += g * wrow[j];
                *grad_wo.at_mut(i, j) += crow[i] * g;
            }
            grad_concat[l * c + i] = acc;
        }
    }

    let mut grad_s = Tensor::zeros(&[rows, c]);
    let mut grad_wq = Tensor::zeros(p.wq.shape());
    let mut grad_wk = Tensor::zeros(p.wk.shape());
    let mut grad_wv = Tensor::zeros(p.wv.shape());
    let mut grad_bq = Tensor::zeros(&[d]);
    let mut grad_bk = Tensor::zeros(&[d]);
    let mut grad_bv = Tensor::zeros(&[d]);

    for h in 0..heads {
        let qh = &cache.q[h];
        let kh = &cache.k[h];
        let vh = &cache.v[h];
        let ah = &cache.attn[h];

        // head output cotangent = slice of grad_concat
        // dA = dH V^T, dV = A^T dH
        let mut grad_a = vec![0.0; rows * rows];
        let mut grad_v = vec![0.0; rows * d];
        for i in 0..rows {
            let ghrow = &grad_concat[i * c + h * d..i * c + (h + 1) * d];
            for j in 0..rows {
                let vrow = &vh[j * d..(j + 1) * d];
                grad_a[i * rows + j] = ghrow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                let a = ah[i * rows + j];
                let gv = &mut grad_v[j * d..(j + 1) * d];
                for (g, gh) in gv.iter_mut().zip(ghrow) {
                    *g += a * gh;
                }
            }
        }

        // softmax rows, then the scaled dot products
        let mut grad_raw = vec![0.0; rows * rows];
        for i in 0..rows {
            softmax_row_backward(
                &ah[i * rows..(i + 1) * rows],
                &grad_a[i * rows..(i + 1) * rows],
                &mut grad_raw[i * rows..(i + 1) * rows],
            );
        }
        let mut grad_q = vec![0.0; rows * d];
        let mut grad_k = vec![0.0; rows * d];
        for i in 0..rows {
            for j in 0..rows {
                let g = grad_raw[i * rows + j] * scale;
                let krow = &kh[j * d..(j + 1) * d];
                let qrow = &qh[i * d..(i + 1) * d];
                let gq = &mut grad_q[i * d..(i + 1) * d];
                for (o, kv) in gq.iter_mut().zip(krow) {
                    *o += g * kv;
                }
                let gk = &mut grad_k[j * d..(j + 1) * d];
                for (o, qv) in gk.iter_mut().zip(qrow) {
                    *o += g * qv;
                }
            }
        }

        // through the projections back to s and the per-head weights
        for (grad_proj, w, grad_w, grad_b) in [
            (&grad_q, &p.wq, &mut grad_wq, &mut grad_bq),
            (&grad_k, &p.wk, &mut grad_wk, &mut grad_bk),
            (&grad_v, &p.wv, &mut grad_wv, &mut grad_bv),
        ] {
            let w_head = w.row(h);
            let gw_head = grad_w.row_mut(h);
            for l in 0..rows {
                let gp = &grad_proj[l * d..(l + 1) * d];
                let srow = s.row(l);
                let gs = grad_s.row_mut(l);
                for i in 0..c {
                    let wrow = &w_head[i * d..(i + 1) * d];
                    let gwrow = &mut gw_head[i * d..(i + 1) * d];
                    let mut acc = 0.0;
                    for (j, g) in gp.iter().enumerate() {
                        acc += g * wrow[j];
                        gwrow[j] += srow[i] * g;
                    }
                    gs[i] += acc;
                }
                for (b, g) in grad_b.data_mut().iter_mut().zip(gp) {
                    *b += g;
                }
            }
        }
    }

    Ok(MhaGrads {
        grad_s,
        wq: grad_wq,
        wk: grad_wk,
        wv: grad_wv,
        bq: grad_bq,
        bk: grad_bk,
        bv: grad_bv,
        wo: grad_wo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rand_params(rng: &mut ChaCha20Rng, c: usize, h: usize) -> MhaParams {
        let d = c / h;
        let mut fill = |shape: &[usize]| -> Tensor {
            let len: usize = shape.iter().product();
            let data = (0..len).map(|_| rng.random_range(-0.8..0.8)).collect();
            Tensor::from_vec(shape, data).unwrap()
        };
        MhaParams {
            wq: fill(&[h, c, d]),
            wk: fill(&[h, c, d]),
            wv: fill(&[h, c, d]),
            bq: fill(&[d]),
            bk: fill(&[d]),
            bv: fill(&[d]),
            wo: fill(&[c, c]),
        }
    }

    fn rand_map(rng: &mut ChaCha20Rng, rows: usize, c: usize) -> Tensor {
        let data = (0..rows * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[rows, c], data).unwrap()
    }

    #[test]
    fn zero_output_projection_gives_zero() {
        let mut rng = ChaCha20Rng::seed_from_u64(50);
        let mut p = rand_params(&mut rng, 4, 2);
        p.wo = Tensor::zeros(&[4, 4]);
        let s = rand_map(&mut rng, 3, 4);
        let (out, _) = mha_forward(&s, &p).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_row_softmax_is_identity_on_values() {
        // With one row the attention weight is exactly 1, so the output is
        // Concat(V) * wo.
        let mut rng = ChaCha20Rng::seed_from_u64(51);
        let c = 4;
        let h = 2;
        let d = c / h;
        let p = rand_params(&mut rng, c, h);
        let s = rand_map(&mut rng, 1, c);
        let (out, _) = mha_forward(&s, &p).unwrap();

        let mut concat = vec![0.0; c];
        for head in 0..h {
            let w = p.wv.row(head);
            for j in 0..d {
                let mut acc = p.bv.data()[j];
                for i in 0..c {
                    acc += s.data()[i] * w[i * d + j];
                }
                concat[head * d + j] = acc;
            }
        }
        for j in 0..c {
            let mut acc = 0.0;
            for i in 0..c {
                acc += concat[i] * p.wo.at(i, j);
            }
            assert!((out.data()[j] - acc).abs() <= 1e-12);
        }
    }

    /// Scalar-by-scalar brute-force evaluation of the attention definition.
    fn brute_force(s: &Tensor, p: &MhaParams) -> Vec<f64> {
        let (rows, c) = (s.shape()[0], s.shape()[1]);
        let h = p.heads();
        let d = p.head_dim();
        let mut concat = vec![0.0; rows * c];
        for head in 0..h {
            let wq = p.wq.row(head);
            let wk = p.wk.row(head);
            let wv = p.wv.row(head);
            let proj = |w: &[f64], b: &Tensor, l: usize, j: usize| -> f64 {
                let mut acc = b.data()[j];
                for i in 0..c {
                    acc += s.at(l, i) * w[i * d + j];
                }
                acc
            };
            for i in 0..rows {
                // raw scores against every position
                let mut scores = vec![0.0; rows];
                for (j, score) in scores.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for t in 0..d {
                        acc += proj(wq, &p.bq, i, t) * proj(wk, &p.bk, j, t);
                    }
                    *score = acc / (d as f64).sqrt();
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = scores.iter().map(|v| (v - max).exp()).sum();
                for t in 0..d {
                    let mut acc = 0.0;
                    for (j, score) in scores.iter().enumerate() {
                        acc += (score - max).exp() / denom * proj(wv, &p.bv, j, t);
                    }
                    concat[i * c + head * d + t] = acc;
                }
            }
        }
        let mut out = vec![0.0; rows * c];
        for l in 0..rows {
            for j in 0..c {
                let mut acc = 0.0;
                for i in 0..c {
                    acc += concat[l * c + i] * p.wo.at(i, j);
                }
                out[l * c + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matches_brute_force_evaluation() {
        let mut rng = ChaCha20Rng::seed_from_u64(52);
        let p = rand_params(&mut rng, 4, 2);
        let s = rand_map(&mut rng, 2, 4);
        let (out, _) = mha_forward(&s, &p).unwrap();
        let expect = brute_force(&s, &p);
        for (a, b) in out.data().iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(53);
        let p = rand_params(&mut rng, 4, 2);
        let s = rand_map(&mut rng, 2, 4);
        let cot = rand_map(&mut rng, 2, 4);
        let (_, cache) = mha_forward(&s, &p).unwrap();
        let grads = mha_backward(&s, &p, &cache, &cot).unwrap();

        let loss = |s: &Tensor, p: &MhaParams| -> f64 {
            let (out, _) = mha_forward(s, p).unwrap();
            out.data().iter().zip(cot.data()).map(|(a, b)| a * b).sum()
        };

        let step = 1e-6;
        type Eval<'a> = Box<dyn FnMut(&[f64]) -> f64 + 'a>;
        let check = |point: &[f64], analytic: &[f64], mut eval: Eval| {
            for i in 0..point.len() {
                let mut buf = point.to_vec();
                buf[i] = point[i] + step;
                let hi = eval(&buf);
                buf[i] = point[i] - step;
                let lo = eval(&buf);
                let num = (hi - lo) / (2.0 * step);
                let scale = num.abs().max(analytic[i].abs());
                if scale < 1e-7 {
                    continue; // below finite-difference resolution
                }
                assert!(
                    (num - analytic[i]).abs() / scale <= 1e-5,
                    "coord {i}: numeric {num} vs analytic {}",
                    analytic[i]
                );
            }
        };

        let sp = s.clone();
        let pp = p.clone();
        check(
            s.data(),
            grads.grad_s.data(),
            Box::new(move |vals| {
                let st = Tensor::from_vec(sp.shape(), vals.to_vec()).unwrap();
                loss(&st, &pp)
            }),
        );
        macro_rules! check_param {
            ($field:ident, $grad:expr) => {{
                let sp = s.clone();
                let pp = p.clone();
                let shape = p.$field.shape().to_vec();
                check(
                    p.$field.data(),
                    $grad.data(),
                    Box::new(move |vals| {
                        let mut pm = pp.clone();
                        pm.$field = Tensor::from_vec(&shape, vals.to_vec()).unwrap();
                        loss(&sp, &pm)
                    }),
                );
            }};
        }
        check_param!(wq, grads.wq);
        check_param!(wk, grads.wk);
        check_param!(wv, grads.wv);
        check_param!(bq, grads.bq);
        check_param!(bk, grads.bk);
        check_param!(bv, grads.bv);
        check_param!(wo, grads.wo);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut rng = ChaCha20Rng::seed_from_u64(54);
        assert!(MhaParams::init(5, 2, &mut rng).is_err());
        let p = rand_params(&mut rng, 4, 2);
        let s = rand_map(&mut rng, 2, 6);
        assert!(matches!(
            mha_forward(&s, &p),
            Err(CodecError::Configuration(_))
        ));
    }
}
