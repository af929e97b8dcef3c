//! Three-way cross attention fusing the directional maps.
//!
//! The axial map supplies queries, the coronal map keys, the sagittal map
//! values. Keys and values are embedded to C/2 channels and max-pooled once
//! (kernel 2, stride 2); queries are embedded without pooling. Attention rows
//! are softmax-normalized over key positions with no scale factor, and the
//! attended values are projected back to C channels and added to the mean of
//! the three input maps. The grouped variant splits the embedded maps along
//! depth after pooling and attends within matching groups only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{uniform_param, zero_param};
use crate::parallel::maybe_par_map;
use crate::tape::Param;
use crate::tensor::Tensor;

#[derive(Clone)]
pub struct CrossAttnWeights {
    /// Query embedding, (C/2) x C.
    pub w_theta: Param,
    /// Key embedding, (C/2) x C.
    pub w_phi: Param,
    /// Value embedding, (C/2) x C.
    pub w_g: Param,
    /// Output projection restoring C channels, C x (C/2).
    pub w_ca: Param,
}

impl CrossAttnWeights {
    pub fn zeros(channels: usize) -> Result<Self> {
        let c2 = half(channels)?;
        Ok(CrossAttnWeights {
            w_theta: zero_param(&[c2, channels]),
            w_phi: zero_param(&[c2, channels]),
            w_g: zero_param(&[c2, channels]),
            w_ca: zero_param(&[channels, c2]),
        })
    }

    pub fn init(channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let c2 = half(channels)?;
        Ok(CrossAttnWeights {
            w_theta: uniform_param(&[c2, channels], channels, rng),
            w_phi: uniform_param(&[c2, channels], channels, rng),
            w_g: uniform_param(&[c2, channels], channels, rng),
            w_ca: uniform_param(&[channels, c2], c2, rng),
        })
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        let c2 = half(channels)?;
        for (name, p, want) in [
            ("theta", &self.w_theta, [c2, channels]),
            ("phi", &self.w_phi, [c2, channels]),
            ("g", &self.w_g, [c2, channels]),
            ("out", &self.w_ca, [channels, c2]),
        ] {
            if p.shape() != want {
                return Err(Error::config(format!(
                    "cross-attention weight `{name}` shape {:?}, expected {want:?}",
                    p.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<(String, Param)> {
        vec![
            ("theta".to_string(), self.w_theta.clone()),
            ("phi".to_string(), self.w_phi.clone()),
            ("g".to_string(), self.w_g.clone()),
            ("out".to_string(), self.w_ca.clone()),
        ]
    }
}

fn half(channels: usize) -> Result<usize> {
    if channels == 0 || channels % 2 != 0 {
        return Err(Error::config(format!(
            "cross attention needs an even channel count, got {channels}"
        )));
    }
    Ok(channels / 2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossAttnConfig {
    /// Depth groups G_ca; 1 recovers the ungrouped computation.
    pub groups: usize,
}

fn check_inputs(xa: &Tensor, xc: &Tensor, xs: &Tensor, w: &CrossAttnWeights) -> Result<()> {
    if xa.shape().len() != 4 {
        return Err(Error::shape(format!(
            "cross attention expects (C,D,H,W) maps, got {:?}",
            xa.shape()
        )));
    }
    if xa.shape() != xc.shape() || xa.shape() != xs.shape() {
        return Err(Error::shape(format!(
            "directional map shapes differ: {:?} / {:?} / {:?}",
            xa.shape(),
            xc.shape(),
            xs.shape()
        )));
    }
    let (d, h, wd) = (xa.shape()[1], xa.shape()[2], xa.shape()[3]);
    if d % 2 != 0 || h % 2 != 0 || wd % 2 != 0 {
        return Err(Error::config(format!(
            "cross attention needs even spatial extents for pooling, got {d}x{h}x{wd}"
        )));
    }
    w.validate(xa.shape()[0])
}

/// Ungrouped three-way cross attention.
pub fn cross_attend(
    xa: &Tensor,
    xc: &Tensor,
    xs: &Tensor,
    w: &CrossAttnWeights,
) -> Result<Tensor> {
    check_inputs(xa, xc, xs, w)?;
    let shape = xa.shape().to_vec();
    let c2 = shape[0] / 2;
    let s_full: usize = shape[1..].iter().product();

    let q = xa.conv1x1x1(&w.w_theta.value())?.reshape(&[c2, s_full])?;
    let k_map = xc.conv1x1x1(&w.w_phi.value())?.max_pool3d()?;
    let v_map = xs.conv1x1x1(&w.w_g.value())?.max_pool3d()?;
    let s_pooled: usize = k_map.shape()[1..].iter().product();
    let k = k_map.reshape(&[c2, s_pooled])?;
    let v = v_map.reshape(&[c2, s_pooled])?;

    let attn = q.transpose2d()?.matmul(&k)?.softmax_axis(1)?;
    let y = attn.matmul(&v.transpose2d()?)?;

    let mixed = w.w_ca.value().matmul(&y.transpose2d()?)?.reshape(&shape)?;
    let mean = xa.add(xc)?.add(xs)?.scale(1.0 / 3.0);
    mean.add(&mixed)
}

/// Depth-grouped cross attention; groups are split after embedding and
/// pooling, attended independently, and re-concatenated along depth.
pub fn cross_attend_grouped(
    xa: &Tensor,
    xc: &Tensor,
    xs: &Tensor,
    w: &CrossAttnWeights,
    cfg: &CrossAttnConfig,
) -> Result<Tensor> {
    check_inputs(xa, xc, xs, w)?;
    let g = cfg.groups;
    let shape = xa.shape().to_vec();
    let (d, h, wd) = (shape[1], shape[2], shape[3]);
    if g == 0 || d % g != 0 {
        return Err(Error::config(format!(
            "depth {d} is not divisible into {g} attention groups"
        )));
    }
    if (d / 2) % g != 0 {
        return Err(Error::config(format!(
            "pooled depth {} is not divisible into {g} attention groups",
            d / 2
        )));
    }
    let c2 = shape[0] / 2;

    let q_map = xa.conv1x1x1(&w.w_theta.value())?;
    let k_map = xc.conv1x1x1(&w.w_phi.value())?.max_pool3d()?;
    let v_map = xs.conv1x1x1(&w.w_g.value())?.max_pool3d()?;

    let q_groups = q_map.split(1, g)?;
    let k_groups = k_map.split(1, g)?;
    let v_groups = v_map.split(1, g)?;

    let triples: Vec<(Tensor, Tensor, Tensor)> = q_groups
        .into_iter()
        .zip(k_groups)
        .zip(v_groups)
        .map(|((q, k), v)| (q, k, v))
        .collect();
    let attended: Vec<Result<Tensor>> = maybe_par_map(triples, |(qg, kg, vg)| {
        let qshape = qg.shape().to_vec();
        let sq: usize = qshape[1..].iter().product();
        let sk: usize = kg.shape()[1..].iter().product();
        let q = qg.reshape(&[c2, sq])?;
        let k = kg.reshape(&[c2, sk])?;
        let v = vg.reshape(&[c2, sk])?;
        let attn = q.transpose2d()?.matmul(&k)?.softmax_axis(1)?;
        let y = attn.matmul(&v.transpose2d()?)?;
        y.transpose2d()?.reshape(&[c2, qshape[1], h, wd])
    });
    let attended: Vec<Tensor> = attended.into_iter().collect::<Result<_>>()?;
    let y_full = Tensor::concat(&attended, 1)?;

    let s_full: usize = shape[1..].iter().product();
    let mixed = w
        .w_ca
        .value()
        .matmul(&y_full.reshape(&[c2, s_full])?)?
        .reshape(&shape)?;
    let mean = xa.add(xc)?.add(xs)?.scale(1.0 / 3.0);
    mean.add(&mixed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Attention computed entirely with scalar loops, sharing nothing with
    /// the tensor-op implementation. Groups are realized as depth ranges.
    fn loop_oracle(
        xa: &Tensor,
        xc: &Tensor,
        xs: &Tensor,
        w: &CrossAttnWeights,
        groups: usize,
    ) -> Tensor {
        let (c, d, h, wd) = (
            xa.shape()[0],
            xa.shape()[1],
            xa.shape()[2],
            xa.shape()[3],
        );
        let c2 = c / 2;
        let (pd, ph, pw) = (d / 2, h / 2, wd / 2);
        let embed = |x: &Tensor, m: &Tensor| -> Vec<f64> {
            let spatial = d * h * wd;
            let mut out = vec![0.0; c2 * spatial];
            for ch in 0..c2 {
                for v in 0..spatial {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        acc += m.data()[ch * c + ci] * x.data()[ci * spatial + v];
                    }
                    out[ch * spatial + v] = acc;
                }
            }
            out
        };
        let pool = |e: &[f64]| -> Vec<f64> {
            let mut out = vec![f64::NEG_INFINITY; c2 * pd * ph * pw];
            for ch in 0..c2 {
                for z in 0..pd {
                    for y in 0..ph {
                        for x in 0..pw {
                            let mut m = f64::NEG_INFINITY;
                            for dz in 0..2 {
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        let idx = ((ch * d + 2 * z + dz) * h + 2 * y + dy) * wd
                                            + 2 * x + dx;
                                        m = m.max(e[idx]);
                                    }
                                }
                            }
                            out[((ch * pd + z) * ph + y) * pw + x] = m;
                        }
                    }
                }
            }
            out
        };
        let q = embed(xa, &w.w_theta.value());
        let k = pool(&embed(xc, &w.w_phi.value()));
        let v = pool(&embed(xs, &w.w_g.value()));

        // y_full[ch][voxel] accumulated group by group over depth ranges
        let spatial = d * h * wd;
        let mut y_full = vec![0.0; c2 * spatial];
        let (dq, dk) = (d / groups, pd / groups);
        for g in 0..groups {
            let q_pos: Vec<usize> = (g * dq..(g + 1) * dq)
                .flat_map(|z| (0..h).flat_map(move |y| (0..wd).map(move |x| (z * h + y) * wd + x)))
                .collect();
            let k_pos: Vec<usize> = (g * dk..(g + 1) * dk)
                .flat_map(|z| (0..ph).flat_map(move |y| (0..pw).map(move |x| (z * ph + y) * pw + x)))
                .collect();
            for &p in &q_pos {
                let mut logits = Vec::with_capacity(k_pos.len());
                for &kp in &k_pos {
                    let mut acc = 0.0;
                    for ch in 0..c2 {
                        acc += q[ch * spatial + p] * k[ch * pd * ph * pw + kp];
                    }
                    logits.push(acc);
                }
                let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let norm: f64 = exps.iter().sum();
                for ch in 0..c2 {
                    let mut acc = 0.0;
                    for (i, &kp) in k_pos.iter().enumerate() {
                        acc += exps[i] / norm * v[ch * pd * ph * pw + kp];
                    }
                    y_full[ch * spatial + p] = acc;
                }
            }
        }
        let wca = w.w_ca.value();
        let mut out = vec![0.0; c * spatial];
        for ch in 0..c {
            for p in 0..spatial {
                let mut acc = 0.0;
                for j in 0..c2 {
                    acc += wca.data()[ch * c2 + j] * y_full[j * spatial + p];
                }
                out[ch * spatial + p] = (xa.data()[ch * spatial + p]
                    + xc.data()[ch * spatial + p]
                    + xs.data()[ch * spatial + p])
                    / 3.0
                    + acc;
            }
        }
        Tensor::new(xa.shape().to_vec(), out).unwrap()
    }

    #[test]
    fn zero_embeddings_reduce_to_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let w = CrossAttnWeights::zeros(4).unwrap();
        let xa = rand_tensor(&[4, 4, 4, 4], &mut rng);
        let xc = rand_tensor(&[4, 4, 4, 4], &mut rng);
        let xs = rand_tensor(&[4, 4, 4, 4], &mut rng);
        let out = cross_attend(&xa, &xc, &xs, &w).unwrap();
        let mean = xa.add(&xc).unwrap().add(&xs).unwrap().scale(1.0 / 3.0);
        assert_eq!(out, mean);
    }

    #[test]
    fn zero_output_projection_reduces_to_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let w = CrossAttnWeights::init(4, &mut rng).unwrap();
        w.w_ca.set_value(Tensor::zeros(&[4, 2])).unwrap();
        let xa = rand_tensor(&[4, 4, 4, 4], &mut rng);
        let xc = rand_tensor(&[4, 4, 4, 4], &mut rng);
        let xs = rand_tensor(&[4, 4, 4, 4], &mut rng);
        let out = cross_attend(&xa, &xc, &xs, &w).unwrap();
        let mean = xa.add(&xc).unwrap().add(&xs).unwrap().scale(1.0 / 3.0);
        assert_eq!(out, mean);
    }

    #[test]
    fn matches_loop_oracle_ungrouped() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let w = CrossAttnWeights::init(2, &mut rng).unwrap();
        let xa = rand_tensor(&[2, 4, 4, 4], &mut rng);
        let xc = rand_tensor(&[2, 4, 4, 4], &mut rng);
        let xs = rand_tensor(&[2, 4, 4, 4], &mut rng);
        let out = cross_attend(&xa, &xc, &xs, &w).unwrap();
        let want = loop_oracle(&xa, &xc, &xs, &w, 1);
        assert!(out.max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn grouped_single_group_is_bit_identical_to_ungrouped() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let w = CrossAttnWeights::init(4, &mut rng).unwrap();
        let xa = rand_tensor(&[4, 4, 4, 4], &mut rng);
        let xc = rand_tensor(&[4, 4, 4, 4], &mut rng);
        let xs = rand_tensor(&[4, 4, 4, 4], &mut rng);
        let grouped =
            cross_attend_grouped(&xa, &xc, &xs, &w, &CrossAttnConfig { groups: 1 }).unwrap();
        let plain = cross_attend(&xa, &xc, &xs, &w).unwrap();
        assert_eq!(grouped, plain);
    }

    #[test]
    fn grouped_matches_per_group_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let w = CrossAttnWeights::init(2, &mut rng).unwrap();
        let xa = rand_tensor(&[2, 8, 4, 4], &mut rng);
        let xc = rand_tensor(&[2, 8, 4, 4], &mut rng);
        let xs = rand_tensor(&[2, 8, 4, 4], &mut rng);
        let out =
            cross_attend_grouped(&xa, &xc, &xs, &w, &CrossAttnConfig { groups: 2 }).unwrap();
        let want = loop_oracle(&xa, &xc, &xs, &w, 2);
        assert!(out.max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        // force V = 1 everywhere; then the attended value at each query
        // position is its attention row sum, surfaced through an all-ones
        // output projection as c2 * rowsum.
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let c = 4;
        let c2 = 2;
        let w = CrossAttnWeights::init(c, &mut rng).unwrap();
        let mut pick_first = Tensor::zeros(&[c2, c]);
        for ch in 0..c2 {
            pick_first.data_mut()[ch * c] = 1.0;
        }
        w.w_g.set_value(pick_first).unwrap();
        w.w_ca.set_value(Tensor::filled(&[c, c2], 1.0)).unwrap();
        let xa = rand_tensor(&[c, 4, 4, 4], &mut rng);
        let xc = rand_tensor(&[c, 4, 4, 4], &mut rng);
        // channel 0 of the value map is constant 1
        let mut xs = rand_tensor(&[c, 4, 4, 4], &mut rng);
        for v in xs.data_mut()[..64].iter_mut() {
            *v = 1.0;
        }
        let out = cross_attend(&xa, &xc, &xs, &w).unwrap();
        let mean = xa.add(&xc).unwrap().add(&xs).unwrap().scale(1.0 / 3.0);
        let attn_term = out.sub(&mean).unwrap();
        for v in attn_term.data() {
            assert!((v - c2 as f64).abs() < 1e-9, "row sum deviates: {v}");
        }
    }

    #[test]
    fn per_channel_key_shift_leaves_attention_unchanged() {
        // shifting the key map by a per-channel constant adds a per-row
        // constant to the logits, which softmax cancels
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let w = CrossAttnWeights::init(4, &mut rng).unwrap();
        let xa = rand_tensor(&[4, 4, 4, 4], &mut rng);
        let xc = rand_tensor(&[4, 4, 4, 4], &mut rng);
        let xs = rand_tensor(&[4, 4, 4, 4], &mut rng);
        let mut xc_shifted = xc.clone();
        for c in 0..4 {
            let delta = 0.5 + c as f64;
            for v in xc_shifted.data_mut()[c * 64..(c + 1) * 64].iter_mut() {
                *v += delta;
            }
        }
        let attn = |xc_use: &Tensor| {
            let out = cross_attend(&xa, xc_use, &xs, &w).unwrap();
            let mean = xa.add(xc_use).unwrap().add(&xs).unwrap().scale(1.0 / 3.0);
            out.sub(&mean).unwrap()
        };
        assert!(attn(&xc).max_abs_diff(&attn(&xc_shifted)) < 1e-9);
    }

    #[test]
    fn output_shape_matches_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let w = CrossAttnWeights::init(4, &mut rng).unwrap();
        let xa = rand_tensor(&[4, 8, 4, 6], &mut rng);
        let xc = rand_tensor(&[4, 8, 4, 6], &mut rng);
        let xs = rand_tensor(&[4, 8, 4, 6], &mut rng);
        let out = cross_attend(&xa, &xc, &xs, &w).unwrap();
        assert_eq!(out.shape(), &[4, 8, 4, 6]);
        let grouped =
            cross_attend_grouped(&xa, &xc, &xs, &w, &CrossAttnConfig { groups: 2 }).unwrap();
        assert_eq!(grouped.shape(), &[4, 8, 4, 6]);
    }

    #[test]
    fn odd_extent_is_config_error() {
        let w = CrossAttnWeights::zeros(4).unwrap();
        let x = Tensor::zeros(&[4, 3, 4, 4]);
        assert!(matches!(
            cross_attend(&x, &x, &x, &w),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn indivisible_group_count_is_config_error() {
        let w = CrossAttnWeights::zeros(4).unwrap();
        let x = Tensor::zeros(&[4, 4, 4, 4]);
        // pooled depth 2 cannot hold 4 groups
        assert!(matches!(
            cross_attend_grouped(&x, &x, &x, &w, &CrossAttnConfig { groups: 4 }),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn odd_channel_count_is_config_error() {
        assert!(CrossAttnWeights::zeros(3).is_err());
    }
}
