//! Slice-grouped domain attention assembled end to end, plus the residual
//! block that hosts it.
//!
//! A forward pass runs the adapter bank over every enabled direction and then
//! fuses the directional maps, either by plain averaging or by three-way
//! cross attention (which requires all three directions; configs with fewer
//! fall back to averaging and carry no attention weights). The same
//! computation exists twice: a pure tensor path for oracles and evaluation,
//! and a taped path for training; both compose the same primitive ops in the
//! same order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::conv3d_taped;
use crate::cross_attention::{cross_attend_grouped, CrossAttnConfig, CrossAttnWeights};
use crate::domain_attention::{domain_direction, AssignmentRecord, BankConfig, BankWeights};
use crate::error::{Error, Result};
use crate::init::uniform_param;
use crate::sgse::Direction;
use crate::tape::{Param, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fuse {
    MeanOnly,
    #[default]
    CrossAttention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdaConfig {
    pub channels: usize,
    #[serde(default = "default_groups")]
    pub groups: usize,
    #[serde(default = "default_adapters")]
    pub adapters: usize,
    #[serde(default = "default_reduction")]
    pub reduction: usize,
    #[serde(default = "all_directions")]
    pub directions: Vec<Direction>,
    #[serde(default)]
    pub fuse: Fuse,
    /// Run cross attention per depth group (G_ca = groups) instead of on the
    /// whole volume.
    #[serde(default = "default_true")]
    pub grouped_ca: bool,
}

fn default_groups() -> usize {
    4
}
fn default_adapters() -> usize {
    3
}
fn default_reduction() -> usize {
    16
}
fn all_directions() -> Vec<Direction> {
    Direction::ALL.to_vec()
}
fn default_true() -> bool {
    true
}

impl SgdaConfig {
    /// Paper-default knobs for a given channel width.
    pub fn new(channels: usize) -> Self {
        SgdaConfig {
            channels,
            groups: default_groups(),
            adapters: default_adapters(),
            reduction: default_reduction(),
            directions: all_directions(),
            fuse: Fuse::default(),
            grouped_ca: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bank_config().validate()?;
        if self.directions.is_empty() {
            return Err(Error::config("at least one direction must be enabled"));
        }
        let mut seen = self.directions.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.directions.len() {
            return Err(Error::config(format!(
                "duplicate directions in {:?}",
                self.directions
            )));
        }
        if self.effective_fuse() == Fuse::CrossAttention && self.channels % 2 != 0 {
            return Err(Error::config(format!(
                "cross attention needs an even channel count, got {}",
                self.channels
            )));
        }
        Ok(())
    }

    pub fn bank_config(&self) -> BankConfig {
        BankConfig {
            channels: self.channels,
            groups: self.groups,
            reduction: self.reduction,
            adapters: self.adapters,
        }
    }

    /// Cross attention needs all three directional maps; with fewer enabled
    /// directions the module fuses by averaging and owns no attention weights.
    pub fn effective_fuse(&self) -> Fuse {
        if self.fuse == Fuse::CrossAttention && self.directions.len() == 3 {
            Fuse::CrossAttention
        } else {
            Fuse::MeanOnly
        }
    }

    pub fn ca_groups(&self) -> usize {
        if self.grouped_ca {
            self.groups
        } else {
            1
        }
    }
}

/// Closed-form learnable-scalar count:
/// |directions|*N*2C^2/r (bank) + |directions|*N*C (assignment)
/// + 2C^2 when cross attention is in effect.
pub fn parameter_count(cfg: &SgdaConfig) -> usize {
    let dirs = cfg.directions.len();
    let (c, n) = (cfg.channels, cfg.adapters);
    let bank = dirs * n * 2 * c * c / cfg.reduction;
    let assignment = dirs * n * c;
    let ca = if cfg.effective_fuse() == Fuse::CrossAttention {
        2 * c * c
    } else {
        0
    };
    bank + assignment + ca
}

#[derive(Clone)]
pub struct SgdaParams {
    pub bank: BankWeights,
    /// Present exactly when the effective fuse is cross attention.
    pub ca: Option<CrossAttnWeights>,
}

impl SgdaParams {
    pub fn zeros(cfg: &SgdaConfig) -> Result<Self> {
        cfg.validate()?;
        let ca = match cfg.effective_fuse() {
            Fuse::CrossAttention => Some(CrossAttnWeights::zeros(cfg.channels)?),
            Fuse::MeanOnly => None,
        };
        Ok(SgdaParams {
            bank: BankWeights::zeros(&cfg.bank_config()),
            ca,
        })
    }

    pub fn init_with(cfg: &SgdaConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let bank = BankWeights::init(&cfg.bank_config(), rng);
        let ca = match cfg.effective_fuse() {
            Fuse::CrossAttention => Some(CrossAttnWeights::init(cfg.channels, rng)?),
            Fuse::MeanOnly => None,
        };
        Ok(SgdaParams { bank, ca })
    }

    pub fn validate(&self, cfg: &SgdaConfig) -> Result<()> {
        self.bank.validate(&cfg.bank_config())?;
        match (cfg.effective_fuse(), &self.ca) {
            (Fuse::CrossAttention, Some(ca)) => ca.validate(cfg.channels),
            (Fuse::MeanOnly, None) => Ok(()),
            (Fuse::CrossAttention, None) => {
                Err(Error::config("cross attention weights missing"))
            }
            (Fuse::MeanOnly, Some(_)) => {
                Err(Error::config("cross attention weights present but unused"))
            }
        }
    }

    /// Named parameters reachable for this config: enabled directions only,
    /// attention weights only when fused by attention.
    pub fn params(&self, cfg: &SgdaConfig) -> Vec<(String, Param)> {
        let mut out: Vec<(String, Param)> = self
            .bank
            .params_for(&cfg.directions)
            .into_iter()
            .map(|(name, p)| (format!("bank.{name}"), p))
            .collect();
        if let Some(ca) = &self.ca {
            for (name, p) in ca.params() {
                out.push((format!("ca.{name}"), p));
            }
        }
        out
    }

    /// Total scalars across [`SgdaParams::params`]; must equal
    /// [`parameter_count`].
    pub fn scalar_count(&self, cfg: &SgdaConfig) -> usize {
        self.params(cfg).iter().map(|(_, p)| p.numel()).sum()
    }
}

/// Deterministic initialization: uniform adapters and attention weights,
/// zeroed assignment matrices (initial routing is uniform).
pub fn init_params(cfg: &SgdaConfig, seed: u64) -> Result<SgdaParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SgdaParams::init_with(cfg, &mut rng)
}

fn check_input(x: &[usize], cfg: &SgdaConfig) -> Result<()> {
    if x.len() != 4 || x[0] != cfg.channels {
        return Err(Error::shape(format!(
            "input shape {x:?} does not match {} channels",
            cfg.channels
        )));
    }
    Ok(())
}

/// Pure forward pass.
pub fn sgda_forward(
    x: &Tensor,
    p: &SgdaParams,
    cfg: &SgdaConfig,
    mut recorder: Option<&mut AssignmentRecord>,
) -> Result<Tensor> {
    cfg.validate()?;
    p.validate(cfg)?;
    check_input(x.shape(), cfg)?;
    let bank_cfg = cfg.bank_config();
    let mut maps = Vec::with_capacity(cfg.directions.len());
    for &d in &cfg.directions {
        maps.push((
            d,
            domain_direction(x, &p.bank, &bank_cfg, d, recorder.as_deref_mut())?,
        ));
    }
    if maps.len() == 1 {
        return Ok(maps.pop().unwrap().1);
    }
    match cfg.effective_fuse() {
        Fuse::MeanOnly => {
            let k = maps.len() as f64;
            let mut acc = maps[0].1.clone();
            for (_, m) in &maps[1..] {
                acc = acc.add(m)?;
            }
            Ok(acc.scale(1.0 / k))
        }
        Fuse::CrossAttention => {
            let by = |d: Direction| maps.iter().find(|(md, _)| *md == d).map(|(_, m)| m).unwrap();
            let ca = p.ca.as_ref().expect("validated");
            cross_attend_grouped(
                by(Direction::Axial),
                by(Direction::Coronal),
                by(Direction::Sagittal),
                ca,
                &CrossAttnConfig {
                    groups: cfg.ca_groups(),
                },
            )
        }
    }
}

fn taped_domain_group(
    tape: &mut Tape,
    g: Var,
    bank: &BankWeights,
    direction: Direction,
) -> Result<(Var, Tensor)> {
    let pooled = tape.global_avg_pool3d(g)?;
    let mut cols = Vec::with_capacity(bank.adapters.len());
    for adapter in &bank.adapters {
        let dw = adapter.get(direction);
        let w1 = tape.watch(&dw.w1);
        let w2 = tape.watch(&dw.w2);
        let hidden = tape.matvec(w1, pooled)?;
        let hidden = tape.relu(hidden);
        let y = tape.matvec(w2, hidden)?;
        let c = tape.value(y).shape()[0];
        cols.push(tape.reshape(y, &[c, 1])?);
    }
    let y_uni = tape.concat(&cols, 1)?;
    let w_da = tape.watch(bank.assign_for(direction));
    let logits = tape.matvec(w_da, pooled)?;
    let y_da = tape.softmax_axis(logits, 0)?;
    let y = tape.matvec(y_uni, y_da)?;
    let gate = tape.sigmoid(y);
    let modulated = tape.channel_scale(g, gate)?;
    let y_da_value = tape.value(y_da).clone();
    Ok((modulated, y_da_value))
}

fn taped_domain_direction(
    tape: &mut Tape,
    x: Var,
    bank: &BankWeights,
    groups: usize,
    direction: Direction,
    recorder: &mut Option<&mut AssignmentRecord>,
) -> Result<Var> {
    let extent = tape.value(x).shape()[direction.axis()];
    if extent % groups != 0 {
        return Err(Error::config(format!(
            "{} axis ({}) extent {extent} is not divisible into {groups} groups",
            direction.label(),
            direction.axis_name()
        )));
    }
    let parts = tape.split(x, direction.axis(), groups)?;
    let mut modulated = Vec::with_capacity(parts.len());
    for (gi, part) in parts.into_iter().enumerate() {
        let (m, y_da) = taped_domain_group(tape, part, bank, direction)?;
        if let Some(rec) = recorder.as_deref_mut() {
            rec.record(direction, gi, &y_da)?;
        }
        modulated.push(m);
    }
    tape.concat(&modulated, direction.axis())
}

fn taped_cross_attend_grouped(
    tape: &mut Tape,
    xa: Var,
    xc: Var,
    xs: Var,
    w: &CrossAttnWeights,
    groups: usize,
) -> Result<Var> {
    let shape = tape.value(xa).shape().to_vec();
    let (c, d, h, wd) = (shape[0], shape[1], shape[2], shape[3]);
    if d % 2 != 0 || h % 2 != 0 || wd % 2 != 0 {
        return Err(Error::config(format!(
            "cross attention needs even spatial extents for pooling, got {d}x{h}x{wd}"
        )));
    }
    if d % groups != 0 || (d / 2) % groups != 0 {
        return Err(Error::config(format!(
            "depth {d} (pooled {}) is not divisible into {groups} attention groups",
            d / 2
        )));
    }
    let c2 = c / 2;

    let theta = tape.watch(&w.w_theta);
    let phi = tape.watch(&w.w_phi);
    let wg = tape.watch(&w.w_g);
    let wca = tape.watch(&w.w_ca);

    let q_map = tape.conv1x1x1(xa, theta)?;
    let k_map = tape.conv1x1x1(xc, phi)?;
    let k_map = tape.max_pool3d(k_map)?;
    let v_map = tape.conv1x1x1(xs, wg)?;
    let v_map = tape.max_pool3d(v_map)?;

    let q_groups = tape.split(q_map, 1, groups)?;
    let k_groups = tape.split(k_map, 1, groups)?;
    let v_groups = tape.split(v_map, 1, groups)?;

    let mut attended = Vec::with_capacity(groups);
    for ((qg, kg), vg) in q_groups.into_iter().zip(k_groups).zip(v_groups) {
        let dq = tape.value(qg).shape()[1];
        let sq: usize = tape.value(qg).shape()[1..].iter().product();
        let sk: usize = tape.value(kg).shape()[1..].iter().product();
        let q = tape.reshape(qg, &[c2, sq])?;
        let k = tape.reshape(kg, &[c2, sk])?;
        let v = tape.reshape(vg, &[c2, sk])?;
        let qt = tape.transpose2d(q)?;
        let logits = tape.matmul(qt, k)?;
        let attn = tape.softmax_axis(logits, 1)?;
        let vt = tape.transpose2d(v)?;
        let y = tape.matmul(attn, vt)?;
        let yt = tape.transpose2d(y)?;
        attended.push(tape.reshape(yt, &[c2, dq, h, wd])?);
    }
    let y_full = tape.concat(&attended, 1)?;
    let s_full = d * h * wd;
    let y_flat = tape.reshape(y_full, &[c2, s_full])?;
    let mixed = tape.matmul(wca, y_flat)?;
    let mixed = tape.reshape(mixed, &shape)?;

    let sum = tape.add(xa, xc)?;
    let sum = tape.add(sum, xs)?;
    let mean = tape.scale(sum, 1.0 / 3.0);
    tape.add(mean, mixed)
}

/// Taped forward pass; composes the same ops as [`sgda_forward`].
pub fn sgda_forward_taped(
    tape: &mut Tape,
    x: Var,
    p: &SgdaParams,
    cfg: &SgdaConfig,
    mut recorder: Option<&mut AssignmentRecord>,
) -> Result<Var> {
    cfg.validate()?;
    p.validate(cfg)?;
    check_input(tape.value(x).shape(), cfg)?;
    let mut maps = Vec::with_capacity(cfg.directions.len());
    for &d in &cfg.directions {
        maps.push((
            d,
            taped_domain_direction(tape, x, &p.bank, cfg.groups, d, &mut recorder)?,
        ));
    }
    if maps.len() == 1 {
        return Ok(maps.pop().unwrap().1);
    }
    match cfg.effective_fuse() {
        Fuse::MeanOnly => {
            let k = maps.len() as f64;
            let mut acc = maps[0].1;
            for &(_, m) in &maps[1..] {
                acc = tape.add(acc, m)?;
            }
            Ok(tape.scale(acc, 1.0 / k))
        }
        Fuse::CrossAttention => {
            let by = |d: Direction| maps.iter().find(|(md, _)| *md == d).map(|&(_, m)| m).unwrap();
            let ca = p.ca.as_ref().expect("validated");
            taped_cross_attend_grouped(
                tape,
                by(Direction::Axial),
                by(Direction::Coronal),
                by(Direction::Sagittal),
                ca,
                cfg.ca_groups(),
            )
        }
    }
}

/// Pre-activation residual block with an optional domain-attention stage on
/// the residual branch, applied before the shortcut addition.
pub struct ResidualBlock3D {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub conv1: Param,
    pub conv2: Param,
    /// Projection shortcut, present when channels or resolution change.
    pub proj: Option<Param>,
    pub sgda: Option<(SgdaConfig, SgdaParams)>,
}

impl ResidualBlock3D {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        sgda_cfg: Option<SgdaConfig>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan1 = in_channels * 27;
        let fan2 = out_channels * 27;
        let proj = (in_channels != out_channels || stride != 1)
            .then(|| uniform_param(&[out_channels, in_channels, 3, 3, 3], fan1, rng));
        let sgda = match sgda_cfg {
            Some(cfg) => {
                if cfg.channels != out_channels {
                    return Err(Error::config(format!(
                        "block `{name}` has {out_channels} channels but its attention config says {}",
                        cfg.channels
                    )));
                }
                let params = SgdaParams::init_with(&cfg, rng)?;
                Some((cfg, params))
            }
            None => None,
        };
        Ok(ResidualBlock3D {
            name: name.to_string(),
            in_channels,
            out_channels,
            stride,
            conv1: uniform_param(&[out_channels, in_channels, 3, 3, 3], fan1, rng),
            conv2: uniform_param(&[out_channels, out_channels, 3, 3, 3], fan2, rng),
            proj,
            sgda,
        })
    }

    pub fn params(&self) -> Vec<(String, Param)> {
        let mut out = vec![
            (format!("{}.conv1", self.name), self.conv1.clone()),
            (format!("{}.conv2", self.name), self.conv2.clone()),
        ];
        if let Some(p) = &self.proj {
            out.push((format!("{}.proj", self.name), p.clone()));
        }
        if let Some((cfg, params)) = &self.sgda {
            for (name, p) in params.params(cfg) {
                out.push((format!("{}.sgda.{name}", self.name), p));
            }
        }
        out
    }
}

/// Taped pre-activation residual computation.
pub fn residual_forward(
    tape: &mut Tape,
    x: Var,
    block: &ResidualBlock3D,
    recorder: Option<&mut AssignmentRecord>,
) -> Result<Var> {
    if tape.value(x).shape()[0] != block.in_channels {
        return Err(Error::shape(format!(
            "block `{}` expects {} input channels, got {}",
            block.name,
            block.in_channels,
            tape.value(x).shape()[0]
        )));
    }
    let pre = tape.relu(x);
    let c1 = tape.watch(&block.conv1);
    let t1 = conv3d_taped(tape, pre, c1, block.stride)?;
    let t1 = tape.relu(t1);
    let c2 = tape.watch(&block.conv2);
    let t2 = conv3d_taped(tape, t1, c2, 1)?;
    let branch = match &block.sgda {
        Some((cfg, params)) => sgda_forward_taped(tape, t2, params, cfg, recorder)?,
        None => t2,
    };
    let shortcut = match &block.proj {
        Some(proj) => {
            let pv = tape.watch(proj);
            conv3d_taped(tape, pre, pv, block.stride)?
        }
        None => x,
    };
    tape.add(branch, shortcut)
}
