//! Bias-free 3x3x3 convolutions (stride 1 or 2, zero padding 1) and nearest
//! neighbor upsampling, with taped variants for training.
//!
//! Forward and both backward kernels fan out over output channels (forward,
//! weight grad) or input channels (input grad); the slabs are disjoint, so
//! parallel and sequential execution produce identical bytes.

use crate::error::{Error, Result};
use crate::parallel::{maybe_par_slabs, seq_slabs};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn out_extent(e: usize, stride: usize) -> usize {
    (e - 1) / stride + 1
}

fn check_conv(x: &Tensor, w: &Tensor, stride: usize) -> Result<()> {
    if x.shape().len() != 4 {
        return Err(Error::shape(format!(
            "conv3d expects a (C,D,H,W) input, got {:?}",
            x.shape()
        )));
    }
    if w.shape().len() != 5 || w.shape()[2..] != [3, 3, 3] {
        return Err(Error::shape(format!(
            "conv3d expects (Co,Ci,3,3,3) weights, got {:?}",
            w.shape()
        )));
    }
    if w.shape()[1] != x.shape()[0] {
        return Err(Error::shape(format!(
            "conv3d weight expects {} input channels, got {}",
            w.shape()[1],
            x.shape()[0]
        )));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::config(format!("conv3d stride must be 1 or 2, got {stride}")));
    }
    Ok(())
}

fn conv3d_into(x: &Tensor, w: &Tensor, stride: usize, out: &mut [f64], parallel: bool) {
    let (ci, d, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (od, oh, ow) = (out_extent(d, stride), out_extent(h, stride), out_extent(wd, stride));
    let slab = od * oh * ow;
    let fill = |co: usize, chunk: &mut [f64]| {
        let wbase = co * ci * 27;
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        let wc = wbase + c * 27;
                        for kz in 0..3 {
                            let iz = (z * stride + kz).wrapping_sub(1);
                            if iz >= d {
                                continue;
                            }
                            for ky in 0..3 {
                                let iy = (y * stride + ky).wrapping_sub(1);
                                if iy >= h {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let ix = (xx * stride + kx).wrapping_sub(1);
                                    if ix >= wd {
                                        continue;
                                    }
                                    acc += w.data()[wc + (kz * 3 + ky) * 3 + kx]
                                        * x.data()[((c * d + iz) * h + iy) * wd + ix];
                                }
                            }
                        }
                    }
                    chunk[(z * oh + y) * ow + xx] = acc;
                }
            }
        }
    };
    if parallel {
        maybe_par_slabs(out, slab, fill);
    } else {
        seq_slabs(out, slab, fill);
    }
}

/// Convolution using the parallel pool when the `parallel` feature is on.
pub fn conv3d(x: &Tensor, w: &Tensor, stride: usize) -> Result<Tensor> {
    check_conv(x, w, stride)?;
    let shape = vec![
        w.shape()[0],
        out_extent(x.shape()[1], stride),
        out_extent(x.shape()[2], stride),
        out_extent(x.shape()[3], stride),
    ];
    let mut out = vec![0.0; shape.iter().product()];
    conv3d_into(x, w, stride, &mut out, true);
    Tensor::new(shape, out)
}

/// Always-sequential twin of [`conv3d`], kept for benchmarks.
pub fn conv3d_seq(x: &Tensor, w: &Tensor, stride: usize) -> Result<Tensor> {
    check_conv(x, w, stride)?;
    let shape = vec![
        w.shape()[0],
        out_extent(x.shape()[1], stride),
        out_extent(x.shape()[2], stride),
        out_extent(x.shape()[3], stride),
    ];
    let mut out = vec![0.0; shape.iter().product()];
    conv3d_into(x, w, stride, &mut out, false);
    Tensor::new(shape, out)
}

/// d(loss)/d(weights) for [`conv3d`].
pub fn conv3d_grad_w(x: &Tensor, g: &Tensor, wshape: &[usize], stride: usize) -> Result<Tensor> {
    let (ci, d, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (od, oh, ow) = (g.shape()[1], g.shape()[2], g.shape()[3]);
    let mut dw = vec![0.0; wshape.iter().product()];
    let slab = ci * 27;
    maybe_par_slabs(&mut dw, slab, |co, chunk| {
        let gbase = co * od * oh * ow;
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let gv = g.data()[gbase + (z * oh + y) * ow + xx];
                    if gv == 0.0 {
                        continue;
                    }
                    for c in 0..ci {
                        for kz in 0..3 {
                            let iz = (z * stride + kz).wrapping_sub(1);
                            if iz >= d {
                                continue;
                            }
                            for ky in 0..3 {
                                let iy = (y * stride + ky).wrapping_sub(1);
                                if iy >= h {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let ix = (xx * stride + kx).wrapping_sub(1);
                                    if ix >= wd {
                                        continue;
                                    }
                                    chunk[c * 27 + (kz * 3 + ky) * 3 + kx] +=
                                        gv * x.data()[((c * d + iz) * h + iy) * wd + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(wshape.to_vec(), dw)
}

/// d(loss)/d(input) for [`conv3d`], gathered per input voxel.
pub fn conv3d_grad_x(g: &Tensor, w: &Tensor, xshape: &[usize], stride: usize) -> Result<Tensor> {
    let (co_n, od, oh, ow) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
    let (ci, d, h, wd) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let mut dx = vec![0.0; xshape.iter().product()];
    let slab = d * h * wd;
    maybe_par_slabs(&mut dx, slab, |c, chunk| {
        for qz in 0..d {
            for qy in 0..h {
                for qx in 0..wd {
                    let mut acc = 0.0;
                    for kz in 0..3 {
                        let num_z = qz + 1;
                        if num_z < kz || (num_z - kz) % stride != 0 {
                            continue;
                        }
                        let pz = (num_z - kz) / stride;
                        if pz >= od {
                            continue;
                        }
                        for ky in 0..3 {
                            let num_y = qy + 1;
                            if num_y < ky || (num_y - ky) % stride != 0 {
                                continue;
                            }
                            let py = (num_y - ky) / stride;
                            if py >= oh {
                                continue;
                            }
                            for kx in 0..3 {
                                let num_x = qx + 1;
                                if num_x < kx || (num_x - kx) % stride != 0 {
                                    continue;
                                }
                                let px = (num_x - kx) / stride;
                                if px >= ow {
                                    continue;
                                }
                                for co in 0..co_n {
                                    acc += g.data()[((co * od + pz) * oh + py) * ow + px]
                                        * w.data()[(co * ci + c) * 27 + (kz * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                    }
                    chunk[(qz * h + qy) * wd + qx] = acc;
                }
            }
        }
    });
    Tensor::new(xshape.to_vec(), dx)
}

/// Taped convolution; `w` should be a watched parameter var.
pub fn conv3d_taped(tape: &mut Tape, x: Var, w: Var, stride: usize) -> Result<Var> {
    let xv = tape.value(x).clone();
    let wv = tape.value(w).clone();
    let out = conv3d(&xv, &wv, stride)?;
    Ok(tape.custom(out, move |g| {
        let dw = conv3d_grad_w(&xv, g, wv.shape(), stride)?;
        let dx = conv3d_grad_x(g, &wv, xv.shape(), stride)?;
        Ok(vec![(x, dx), (w, dw)])
    }))
}

/// Nearest-neighbor x2 upsampling along every spatial axis.
pub fn upsample_nearest2(x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 4 {
        return Err(Error::shape(format!(
            "upsample expects a (C,D,H,W) input, got {:?}",
            x.shape()
        )));
    }
    let (c, d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let mut out = vec![0.0; c * od * oh * ow];
    let mut i = 0;
    for ch in 0..c {
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    out[i] = x.at4(ch, z / 2, y / 2, xx / 2);
                    i += 1;
                }
            }
        }
    }
    Tensor::new(vec![c, od, oh, ow], out)
}

pub fn upsample_taped(tape: &mut Tape, x: Var) -> Result<Var> {
    let xv = tape.value(x).clone();
    let out = upsample_nearest2(&xv)?;
    let xshape = xv.shape().to_vec();
    Ok(tape.custom(out, move |g| {
        // each input voxel owns a 2x2x2 block of outputs
        let (c, d, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3]);
        let mut dx = vec![0.0; c * d * h * w];
        for ch in 0..c {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = 0.0;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dxo in 0..2 {
                                    acc += g.at4(ch, 2 * z + dz, 2 * y + dy, 2 * xx + dxo);
                                }
                            }
                        }
                        dx[((ch * d + z) * h + y) * w + xx] = acc;
                    }
                }
            }
        }
        let dx = Tensor::new(xshape.clone(), dx)?;
        Ok(vec![(x, dx)])
    }))
}
