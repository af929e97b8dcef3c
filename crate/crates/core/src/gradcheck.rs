//! Central-difference gradient verification.
//!
//! Every check rebuilds the loss on a fresh tape from the parameters'
//! current values, so the numeric probe and the analytic sweep see exactly
//! the same computation. Errors are relative with a unit floor:
//! |a - b| / max(1, |a|, |b|), which reads as absolute error near zero and
//! relative error for large magnitudes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;

use crate::conv::{conv3d_taped, upsample_taped};
use crate::error::Result;
use crate::sgda::{sgda_forward_taped, SgdaConfig, SgdaParams};
use crate::sgse::Direction;
use crate::tape::{Param, Tape, Var};
use crate::tensor::Tensor;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1.0, f64::max(a.abs(), b.abs()))
}

#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checks: Vec<OpCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(OpCheck::passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{:<24} {:>4} coords  max rel err {:.3e}  (tol {:.0e})  {}",
                c.name,
                c.coords,
                c.max_rel_err,
                c.tolerance,
                if c.passed() { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

fn eval_loss(build: &mut dyn FnMut(&mut Tape) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = build(&mut tape)?;
    tape.value(loss).scalar_value()
}

/// Checks the analytic gradient of every coordinate of every parameter
/// against a central difference of the rebuilt loss.
pub fn finite_diff_check(
    name: &str,
    params: &[Param],
    build: &mut dyn FnMut(&mut Tape) -> Result<Var>,
    h: f64,
    tolerance: f64,
) -> Result<OpCheck> {
    for p in params {
        p.zero_grad();
    }
    let mut tape = Tape::new();
    let loss = build(&mut tape)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = params.iter().map(Param::grad).collect();

    let mut max_rel = 0.0f64;
    let mut coords = 0usize;
    for (pi, p) in params.iter().enumerate() {
        let base = p.value();
        for i in 0..base.numel() {
            let mut bumped = base.clone();
            bumped.data_mut()[i] += h;
            p.set_value(bumped)?;
            let plus = eval_loss(build)?;

            let mut bumped = base.clone();
            bumped.data_mut()[i] -= h;
            p.set_value(bumped)?;
            let minus = eval_loss(build)?;

            p.set_value(base.clone())?;
            let numeric = (plus - minus) / (2.0 * h);
            max_rel = max_rel.max(rel_err(analytic[pi].data()[i], numeric));
            coords += 1;
        }
    }
    Ok(OpCheck {
        name: name.to_string(),
        coords,
        max_rel_err: max_rel,
        tolerance,
    })
}

/// Uniform values bounded away from zero so kinked ops (relu, abs, max)
/// cannot change branch inside the probe step.
fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.2..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn smooth(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Low-amplitude noise plus a cancelling pair of unit spikes in every
/// 2x2x2 pooling window. Finite differences through a hard max are only
/// meaningful where the selection is locally constant; whatever sign a
/// downstream 1x1x1 projection gives the spikes, one of the pair dominates
/// its window by a wide margin, so pooled argmaxes cannot flip inside the
/// probe step. The pair sums to zero, leaving channel means (and with them
/// the routing softmax and excitations) in their generic regime.
fn pool_stable(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let mut t = smooth(shape, rng).scale(0.02);
    let [c, d, h, w] = [shape[0], shape[1], shape[2], shape[3]];
    for ch in 0..c {
        for z in (0..d).step_by(2) {
            for y in (0..h).step_by(2) {
                for x in (0..w).step_by(2) {
                    t.data_mut()[((ch * d + z) * h + y) * w + x] += 1.0;
                    t.data_mut()[((ch * d + z + 1) * h + y + 1) * w + x + 1] -= 1.0;
                }
            }
        }
    }
    t
}

/// Dot the op output with a fixed random weighting so the scalar loss is
/// sensitive to every output coordinate.
fn weighted_sum(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    Ok(tape.sum_all(prod))
}

const OP_H: f64 = 1e-5;
const OP_TOL: f64 = 1e-6;

/// The fixed verification suite: one finite-difference check per primitive
/// op, then the composed domain-attention module as a whole.
pub fn standard_suite(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    // matmul (covers matvec's kernel as well, but matvec has its own entry)
    {
        let a = Param::new(smooth(&[3, 4], &mut rng));
        let b = Param::new(smooth(&[4, 2], &mut rng));
        let w = smooth(&[3, 2], &mut rng);
        checks.push(finite_diff_check(
            "matmul",
            &[a.clone(), b.clone()],
            &mut |tape| {
                let av = tape.watch(&a);
                let bv = tape.watch(&b);
                let out = tape.matmul(av, bv)?;
                weighted_sum(tape, out, &w)
            },
            OP_H,
            OP_TOL,
        )?);
    }
    {
        let a = Param::new(smooth(&[3, 4], &mut rng));
        let x = Param::new(smooth(&[4], &mut rng));
        let w = smooth(&[3], &mut rng);
        checks.push(finite_diff_check(
            "matvec",
            &[a.clone(), x.clone()],
            &mut |tape| {
                let av = tape.watch(&a);
                let xv = tape.watch(&x);
                let out = tape.matvec(av, xv)?;
                weighted_sum(tape, out, &w)
            },
            OP_H,
            OP_TOL,
        )?);
    }
    {
        let a = Param::new(smooth(&[3, 5], &mut rng));
        let w = smooth(&[5, 3], &mut rng);
        checks.push(finite_diff_check(
            "transpose2d",
            &[a.clone()],
            &mut |tape| {
                let av = tape.watch(&a);
                let out = tape.transpose2d(av)?;
                weighted_sum(tape, out, &w)
            },
            OP_H,
            OP_TOL,
        )?);
    }
    {
        let a = Param::new(smooth(&[2, 3, 4], &mut rng));
        let w = smooth(&[6, 4], &mut rng);
        checks.push(finite_diff_check(
            "reshape",
            &[a.clone()],
            &mut |tape| {
                let av = tape.watch(&a);
                let out = tape.reshape(av, &[6, 4])?;
                weighted_sum(tape, out, &w)
            },
            OP_H,
            OP_TOL,
        )?);
    }
    {
        let a = Param::new(smooth(&[3, 2, 2, 2], &mut rng));
        let w = smooth(&[3], &mut rng);
        checks.push(finite_diff_check(
            "global_avg_pool3d",
            &[a.clone()],
            &mut |tape| {
                let av = tape.watch(&a);
                let out = tape.global_avg_pool3d(av)?;
                weighted_sum(tape, out, &w)
            },
            OP_H,
            OP_TOL,
        )?);
    }
    {
        let a = Param::new(away_from_zero(&[4, 5], &mut rng));
        let w = smooth(&[4, 5], &mut rng);
        checks.push(finite_diff_check(
            "relu",
            &[a.clone()],
            &mut |tape| {
                let av = tape.watch(&a);
                let out = tape.relu(av);
                weighted_sum(tape, out, &w)
            },
            OP_H,
            OP_TOL,
        )?);
    }
    {
        let a = Param::new(smooth(&[4, 5], &mut rng));
        let w = smooth(&[4, 5], &mut rng);
        checks.push(finite_diff_check(
            "sigmoid",
            &[a.clone()],
            &mut |tape| {
                let av = tape.watch(&a);
                let out = tape.sigmoid(av);
                weighted_sum(tape, out, &w)
            },
            OP_H,
            OP_TOL,
        )?);
    }
    {
        let a = Param::new(smooth(&[3, 4], &mut rng));
        let w = smooth(&[3, 4], &mut rng);
        checks.push(finite_diff_check(
            "softmax_axis",
            &[a.clone()],
            &mut |tape| {
                let av = tape.watch(&a);
                let out = tape.softmax_axis(av, 1)?;
                weighted_sum(tape, out, &w)
            },
            OP_H,
            OP_TOL,
        )?);
    }
    {
        let a = Param::new(smooth(&[2, 4, 2, 2], &mut rng));
        let w0 = smooth(&[2, 2, 2, 2], &mut rng);
        let w1 = smooth(&[2, 4, 2, 2], &mut rng);
        checks.push(finite_diff_check(
            "split_concat",
            &[a.clone()],
            &mut |tape| {
                let av = tape.watch(&a);
                let parts = tape.split(av, 1, 2)?;
                let scaled = tape.scale(parts[0], 2.0);
                let probe = weighted_sum(tape, scaled, &w0)?;
                let joined = tape.concat(&[parts[0], parts[1]], 1)?;
                let whole = weighted_sum(tape, joined, &w1)?;
                tape.add(probe, whole)
            },
            OP_H,
            OP_TOL,
        )?);
    }
    {
        let x = Param::new(smooth(&[3, 2, 2, 2], &mut rng));
        let s = Param::new(smooth(&[3], &mut rng));
        let w = smooth(&[3, 2, 2, 2], &mut rng);
        checks.push(finite_diff_check(
            "channel_scale",
            &[x.clone(), s.clone()],
            &mut |tape| {
                let xv = tape.watch(&x);
                let sv = tape.watch(&s);
                let out = tape.channel_scale(xv, sv)?;
                weighted_sum(tape, out, &w)
            },
            OP_H,
            OP_TOL,
        )?);
    }
    {
        let x = Param::new(smooth(&[3, 2, 2, 2], &mut rng));
        let b = Param::new(smooth(&[3], &mut rng));
        let w = smooth(&[3, 2, 2, 2], &mut rng);
        checks.push(finite_diff_check(
            "channel_add",
            &[x.clone(), b.clone()],
            &mut |tape| {
                let xv = tape.watch(&x);
                let bv = tape.watch(&b);
                let out = tape.channel_add(xv, bv)?;
                weighted_sum(tape, out, &w)
            },
            OP_H,
            OP_TOL,
        )?);
    }
    {
        let x = Param::new(smooth(&[3, 2, 2, 2], &mut rng));
        let m = Param::new(smooth(&[2, 3], &mut rng));
        let w = smooth(&[2, 2, 2, 2], &mut rng);
        checks.push(finite_diff_check(
            "conv1x1x1",
            &[x.clone(), m.clone()],
            &mut |tape| {
                let xv = tape.watch(&x);
                let mv = tape.watch(&m);
                let out = tape.conv1x1x1(xv, mv)?;
                weighted_sum(tape, out, &w)
            },
            OP_H,
            OP_TOL,
        )?);
    }
    {
        let x = Param::new(away_from_zero(&[2, 4, 4, 4], &mut rng));
        let w = smooth(&[2, 2, 2, 2], &mut rng);
        checks.push(finite_diff_check(
            "max_pool3d",
            &[x.clone()],
            &mut |tape| {
                let xv = tape.watch(&x);
                let out = tape.max_pool3d(xv)?;
                weighted_sum(tape, out, &w)
            },
            OP_H,
            OP_TOL,
        )?);
    }
    {
        let a = Param::new(smooth(&[2, 3], &mut rng));
        let b = Param::new(smooth(&[2, 3], &mut rng));
        let w = smooth(&[2, 3], &mut rng);
        checks.push(finite_diff_check(
            "add_sub_mul_scale",
            &[a.clone(), b.clone()],
            &mut |tape| {
                let av = tape.watch(&a);
                let bv = tape.watch(&b);
                let sum = tape.add(av, bv)?;
                let diff = tape.sub(sum, bv)?;
                let prod = tape.mul(diff, av)?;
                let scaled = tape.scale(prod, 1.5);
                let shifted = tape.add_scalar(scaled, 0.25);
                weighted_sum(tape, shifted, &w)
            },
            OP_H,
            OP_TOL,
        )?);
    }
    {
        let a = Param::new(Tensor::new(
            vec![6],
            (0..6).map(|_| rng.gen_range(0.5..1.5)).collect(),
        )?);
        let w = smooth(&[6], &mut rng);
        checks.push(finite_diff_check(
            "ln",
            &[a.clone()],
            &mut |tape| {
                let av = tape.watch(&a);
                let out = tape.ln(av)?;
                weighted_sum(tape, out, &w)
            },
            OP_H,
            OP_TOL,
        )?);
    }
    {
        let a = Param::new(away_from_zero(&[6], &mut rng));
        let w = smooth(&[6], &mut rng);
        checks.push(finite_diff_check(
            "abs",
            &[a.clone()],
            &mut |tape| {
                let av = tape.watch(&a);
                let out = tape.abs(av);
                weighted_sum(tape, out, &w)
            },
            OP_H,
            OP_TOL,
        )?);
    }
    {
        let a = Param::new(smooth(&[3, 4], &mut rng));
        checks.push(finite_diff_check(
            "sum_mean",
            &[a.clone()],
            &mut |tape| {
                let av = tape.watch(&a);
                let s = tape.sum_all(av);
                let m = tape.mean_all(av);
                tape.add(s, m)
            },
            OP_H,
            OP_TOL,
        )?);
    }
    for stride in [1usize, 2] {
        let x = Param::new(smooth(&[2, 5, 5, 5], &mut rng));
        let k = Param::new(smooth(&[2, 2, 3, 3, 3], &mut rng));
        let e = (5 - 1) / stride + 1;
        let w = smooth(&[2, e, e, e], &mut rng);
        checks.push(finite_diff_check(
            &format!("conv3d_stride{stride}"),
            &[x.clone(), k.clone()],
            &mut |tape| {
                let xv = tape.watch(&x);
                let kv = tape.watch(&k);
                let out = conv3d_taped(tape, xv, kv, stride)?;
                weighted_sum(tape, out, &w)
            },
            OP_H,
            OP_TOL,
        )?);
    }
    {
        let x = Param::new(smooth(&[2, 2, 2, 2], &mut rng));
        let w = smooth(&[2, 4, 4, 4], &mut rng);
        checks.push(finite_diff_check(
            "upsample_nearest2",
            &[x.clone()],
            &mut |tape| {
                let xv = tape.watch(&x);
                let out = upsample_taped(tape, xv)?;
                weighted_sum(tape, out, &w)
            },
            OP_H,
            OP_TOL,
        )?);
    }

    // the composed module, every learnable scalar, looser step and bound
    {
        let cfg = SgdaConfig {
            channels: 4,
            groups: 2,
            adapters: 2,
            reduction: 2,
            directions: Direction::ALL.to_vec(),
            fuse: crate::sgda::Fuse::CrossAttention,
            grouped_ca: true,
        };
        let p = SgdaParams::init_with(&cfg, &mut rng)?;
        // give assignment matrices structure so softmax routing is non-trivial
        for d in Direction::ALL {
            p.bank.assign_for(d).set_value(smooth(&[2, 4], &mut rng))?;
        }
        let x = pool_stable(&[4, 8, 8, 8], &mut rng);
        let w = smooth(&[4, 8, 8, 8], &mut rng);
        let params: Vec<Param> = p.params(&cfg).into_iter().map(|(_, v)| v).collect();
        checks.push(finite_diff_check(
            "sgda_module",
            &params,
            &mut |tape| {
                let xv = tape.constant(x.clone());
                let out = sgda_forward_taped(tape, xv, &p, &cfg, None)?;
                weighted_sum(tape, out, &w)
            },
            1e-3,
            1e-4,
        )?);
    }

    Ok(GradCheckReport { checks })
}
