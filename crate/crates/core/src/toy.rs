//! Desk-scale detection network and trainer: a residual 3D encoder-decoder
//! with optional domain attention in every block, a shared backbone, and one
//! detection head per dataset emitting a center-probability heatmap plus a
//! radius map.
//!
//! Training follows the single-dataset batch rule: every batch draws all its
//! patches from one randomly sampled dataset, so only that dataset's head
//! receives gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::checkpoint::{apply_tensors, load_tensors, read_manifest, save_checkpoint};
use crate::conv::{conv3d_taped, upsample_taped};
use crate::ct::{Annotation, Volume};
use crate::domain_attention::AssignmentRecord;
use crate::error::{Error, Result};
use crate::froc::Candidate;
use crate::init::{uniform_param, zero_param};
use crate::sgda::{residual_forward, Fuse, ResidualBlock3D, SgdaConfig};
use crate::sgse::Direction;
use crate::tape::{Param, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyNetConfig {
    /// Channel widths of the three encoder stages.
    #[serde(default = "default_channels")]
    pub channels: [usize; 3],
    pub datasets: Vec<String>,
    /// Enables domain attention on every residual block.
    #[serde(default = "default_true")]
    pub sgda: bool,
    /// Adapter count for the attention blocks.
    #[serde(default = "default_adapters")]
    pub adapters: usize,
}

fn default_channels() -> [usize; 3] {
    [8, 16, 32]
}
fn default_true() -> bool {
    true
}
fn default_adapters() -> usize {
    3
}

impl ToyNetConfig {
    pub fn new(datasets: &[&str]) -> Self {
        ToyNetConfig {
            channels: default_channels(),
            datasets: datasets.iter().map(|s| s.to_string()).collect(),
            sgda: true,
            adapters: default_adapters(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(Error::config("at least one dataset head is required"));
        }
        let mut names = self.datasets.clone();
        names.sort();
        names.dedup();
        if names.len() != self.datasets.len() {
            return Err(Error::config("duplicate dataset names"));
        }
        for &c in &self.channels {
            if c < 2 || c % 2 != 0 {
                return Err(Error::config(format!(
                    "stage channels must be even and >= 2, got {c}"
                )));
            }
        }
        if self.adapters == 0 {
            return Err(Error::config("adapter count must be >= 1"));
        }
        Ok(())
    }

    /// Per-stage attention config. Group counts shrink with resolution;
    /// the deepest stage runs ungrouped cross attention because its pooled
    /// depth is too short to split.
    fn stage_sgda(&self, stage: usize) -> SgdaConfig {
        SgdaConfig {
            channels: self.channels[stage],
            groups: if stage == 0 { 4 } else { 2 },
            adapters: self.adapters,
            reduction: 2,
            directions: Direction::ALL.to_vec(),
            fuse: Fuse::CrossAttention,
            grouped_ca: stage < 2,
        }
    }
}

pub struct Head {
    pub heat_w: Param,
    pub heat_b: Param,
    pub rad_w: Param,
    pub rad_b: Param,
}

pub struct ToyNet {
    pub cfg: ToyNetConfig,
    pub stem_w: Param,
    pub stem_b: Param,
    pub enc1: ResidualBlock3D,
    pub enc2: ResidualBlock3D,
    pub enc3: ResidualBlock3D,
    pub dec1_w: Param,
    pub dec1_b: Param,
    pub dec2_w: Param,
    pub dec2_b: Param,
    pub heads: BTreeMap<String, Head>,
}

impl ToyNet {
    pub fn new(cfg: &ToyNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c0, c1, c2] = cfg.channels;
        let sgda = |stage: usize| cfg.sgda.then(|| cfg.stage_sgda(stage));
        let enc1 = ResidualBlock3D::new("enc1", c0, c0, 1, sgda(0), &mut rng)?;
        let enc2 = ResidualBlock3D::new("enc2", c0, c1, 2, sgda(1), &mut rng)?;
        let enc3 = ResidualBlock3D::new("enc3", c1, c2, 2, sgda(2), &mut rng)?;
        let mut heads = BTreeMap::new();
        for ds in &cfg.datasets {
            heads.insert(
                ds.clone(),
                Head {
                    heat_w: uniform_param(&[1, c0], c0, &mut rng),
                    heat_b: zero_param(&[1]),
                    rad_w: uniform_param(&[1, c0], c0, &mut rng),
                    rad_b: zero_param(&[1]),
                },
            );
        }
        Ok(ToyNet {
            cfg: cfg.clone(),
            stem_w: uniform_param(&[c0, 1, 3, 3, 3], 27, &mut rng),
            stem_b: zero_param(&[c0]),
            enc1,
            enc2,
            enc3,
            dec1_w: uniform_param(&[c1, c2, 3, 3, 3], c2 * 27, &mut rng),
            dec1_b: zero_param(&[c1]),
            dec2_w: uniform_param(&[c0, c1, 3, 3, 3], c1 * 27, &mut rng),
            dec2_b: zero_param(&[c0]),
            heads,
        })
    }

    pub fn params(&self) -> Vec<(String, Param)> {
        let mut out = vec![
            ("stem.w".to_string(), self.stem_w.clone()),
            ("stem.b".to_string(), self.stem_b.clone()),
        ];
        out.extend(self.enc1.params());
        out.extend(self.enc2.params());
        out.extend(self.enc3.params());
        out.push(("dec1.w".to_string(), self.dec1_w.clone()));
        out.push(("dec1.b".to_string(), self.dec1_b.clone()));
        out.push(("dec2.w".to_string(), self.dec2_w.clone()));
        out.push(("dec2.b".to_string(), self.dec2_b.clone()));
        for (ds, head) in &self.heads {
            out.push((format!("head.{ds}.heat.w"), head.heat_w.clone()));
            out.push((format!("head.{ds}.heat.b"), head.heat_b.clone()));
            out.push((format!("head.{ds}.rad.w"), head.rad_w.clone()));
            out.push((format!("head.{ds}.rad.b"), head.rad_b.clone()));
        }
        out
    }

    /// Parameters of one dataset's head.
    pub fn head_params(&self, dataset: &str) -> Vec<Param> {
        self.heads
            .get(dataset)
            .map(|h| {
                vec![
                    h.heat_w.clone(),
                    h.heat_b.clone(),
                    h.rad_w.clone(),
                    h.rad_b.clone(),
                ]
            })
            .unwrap_or_default()
    }
}

fn forward_features(
    tape: &mut Tape,
    net: &ToyNet,
    x: Var,
    dataset: &str,
    mut recorder: Option<&mut AssignmentRecord>,
) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 4 || shape[0] != 1 {
        return Err(Error::shape(format!(
            "network input must be [1, D, H, W], got {shape:?}"
        )));
    }
    for &e in &shape[1..] {
        if e % 4 != 0 {
            return Err(Error::config(format!(
                "input extents must be divisible by 4 (two stride-2 stages), got {shape:?}"
            )));
        }
    }
    let sw = tape.watch(&net.stem_w);
    let sb = tape.watch(&net.stem_b);
    let f0 = conv3d_taped(tape, x, sw, 1)?;
    let f0 = tape.channel_add(f0, sb)?;
    let f0 = tape.relu(f0);

    if let Some(rec) = recorder.as_deref_mut() {
        rec.set_context("enc1", dataset);
    }
    let f1 = residual_forward(tape, f0, &net.enc1, recorder.as_deref_mut())?;
    if let Some(rec) = recorder.as_deref_mut() {
        rec.set_context("enc2", dataset);
    }
    let f2 = residual_forward(tape, f1, &net.enc2, recorder.as_deref_mut())?;
    if let Some(rec) = recorder.as_deref_mut() {
        rec.set_context("enc3", dataset);
    }
    let f3 = residual_forward(tape, f2, &net.enc3, recorder.as_deref_mut())?;

    let u = upsample_taped(tape, f3)?;
    let dw = tape.watch(&net.dec1_w);
    let dbv = tape.watch(&net.dec1_b);
    let u = conv3d_taped(tape, u, dw, 1)?;
    let u = tape.channel_add(u, dbv)?;
    let u = tape.relu(u);
    let u1 = tape.add(u, f2)?;

    let u = upsample_taped(tape, u1)?;
    let dw2 = tape.watch(&net.dec2_w);
    let db2 = tape.watch(&net.dec2_b);
    let u = conv3d_taped(tape, u, dw2, 1)?;
    let u = tape.channel_add(u, db2)?;
    let u = tape.relu(u);
    tape.add(u, f1)
}

/// Runs the shared backbone and the requested dataset's head.
/// Heatmap values lie in (0, 1), radius values are non-negative.
pub fn forward_detect(
    tape: &mut Tape,
    net: &ToyNet,
    x: Var,
    dataset: &str,
    recorder: Option<&mut AssignmentRecord>,
) -> Result<(Var, Var)> {
    let head = net.heads.get(dataset).ok_or_else(|| {
        Error::usage(format!("no detection head registered for dataset `{dataset}`"))
    })?;
    let f = forward_features(tape, net, x, dataset, recorder)?;
    let hw = tape.watch(&head.heat_w);
    let hb = tape.watch(&head.heat_b);
    let logits = tape.conv1x1x1(f, hw)?;
    let logits = tape.channel_add(logits, hb)?;
    let heat = tape.sigmoid(logits);
    let rw = tape.watch(&head.rad_w);
    let rb = tape.watch(&head.rad_b);
    let rad = tape.conv1x1x1(f, rw)?;
    let rad = tape.channel_add(rad, rb)?;
    let rad = tape.relu(rad);
    Ok((heat, rad))
}

/// A nodule in the voxel frame of one training volume or patch.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelNodule {
    /// Fractional voxel center (z, y, x).
    pub center: [f64; 3],
    /// Radius in voxels.
    pub radius: f64,
}

/// Training target: a Gaussian splat per nodule (sigma = radius / 2,
/// overlaps resolved by max), the radius value on in-sphere voxels, and the
/// in-sphere indicator.
pub struct SplatTarget {
    pub heat: Tensor,
    pub radius: Tensor,
    pub pos_mask: Tensor,
    pub positives: usize,
}

pub fn build_target(shape: [usize; 3], nodules: &[VoxelNodule]) -> Result<SplatTarget> {
    let [d, h, w] = shape;
    let n = d * h * w;
    let mut heat = vec![0.0f64; n];
    let mut radius = vec![0.0f64; n];
    let mut mask = vec![0.0f64; n];
    for nod in nodules {
        if !(nod.radius > 0.0) {
            return Err(Error::data(format!(
                "nodule radius must be positive, got {}",
                nod.radius
            )));
        }
        let sigma = nod.radius / 2.0;
        // beyond ~4 sigma the splat is < 4e-4 and irrelevant to the loss
        let reach = (4.0 * sigma).ceil() as i64;
        let lo = |c: f64| ((c.floor() as i64) - reach).max(0);
        let hi = |c: f64, e: usize| ((c.ceil() as i64) + reach).min(e as i64 - 1);
        for z in lo(nod.center[0])..=hi(nod.center[0], d) {
            for y in lo(nod.center[1])..=hi(nod.center[1], h) {
                for x in lo(nod.center[2])..=hi(nod.center[2], w) {
                    let d2 = (z as f64 - nod.center[0]).powi(2)
                        + (y as f64 - nod.center[1]).powi(2)
                        + (x as f64 - nod.center[2]).powi(2);
                    let i = ((z as usize) * h + y as usize) * w + x as usize;
                    let t = (-d2 / (2.0 * sigma * sigma)).exp();
                    heat[i] = heat[i].max(t);
                    if d2 <= nod.radius * nod.radius {
                        mask[i] = 1.0;
                        radius[i] = radius[i].max(nod.radius);
                    }
                }
            }
        }
    }
    let positives = mask.iter().filter(|&&m| m != 0.0).count();
    let shape4 = vec![1, d, h, w];
    Ok(SplatTarget {
        heat: Tensor::new(shape4.clone(), heat)?,
        radius: Tensor::new(shape4.clone(), radius)?,
        pos_mask: Tensor::new(shape4, mask)?,
        positives,
    })
}

const BCE_EPS: f64 = 1e-7;

/// Mean binary cross-entropy against the splatted heatmap plus mean L1 on
/// the radius over in-sphere voxels, weighted 1:1.
pub fn detection_loss(
    tape: &mut Tape,
    heat: Var,
    rad: Var,
    target: &SplatTarget,
) -> Result<Var> {
    if tape.value(heat).shape() != target.heat.shape() {
        return Err(Error::shape(format!(
            "heatmap shape {:?} does not match target {:?}",
            tape.value(heat).shape(),
            target.heat.shape()
        )));
    }
    let n = target.heat.numel() as f64;
    // affine squeeze into [eps, 1-eps] keeps ln finite at saturated outputs
    let p = tape.scale(heat, 1.0 - 2.0 * BCE_EPS);
    let p = tape.add_scalar(p, BCE_EPS);
    let t = tape.constant(target.heat.clone());
    let ln_p = tape.ln(p)?;
    let pos_term = tape.mul(t, ln_p)?;
    let q = tape.scale(p, -1.0);
    let q = tape.add_scalar(q, 1.0);
    let ln_q = tape.ln(q)?;
    let t_inv = tape.constant(target.heat.map(|v| 1.0 - v));
    let neg_term = tape.mul(t_inv, ln_q)?;
    let both = tape.add(pos_term, neg_term)?;
    let total = tape.sum_all(both);
    let bce = tape.scale(total, -1.0 / n);

    let rt = tape.constant(target.radius.clone());
    let diff = tape.sub(rad, rt)?;
    let mask = tape.constant(target.pos_mask.clone());
    let masked = tape.mul(diff, mask)?;
    let l1_abs = tape.abs(masked);
    let l1_sum = tape.sum_all(l1_abs);
    let l1 = tape.scale(l1_sum, 1.0 / target.positives.max(1) as f64);

    tape.add(bce, l1)
}

/// One decoded peak, in the voxel frame of the map it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// Voxel position (z, y, x).
    pub center_voxel: [usize; 3],
    pub probability: f64,
    pub radius: f64,
}

/// Strict 26-neighborhood local maxima with probability at or above the
/// floor, in scan order.
pub fn decode_candidates(heat: &Tensor, rad: &Tensor, prob_floor: f64) -> Result<Vec<Detection>> {
    let shape = heat.shape();
    if shape.len() != 4 || shape[0] != 1 || rad.shape() != shape {
        return Err(Error::shape(format!(
            "decode expects matching [1, D, H, W] maps, got {:?} and {:?}",
            shape,
            rad.shape()
        )));
    }
    let (d, h, w) = (shape[1], shape[2], shape[3]);
    let at = |z: usize, y: usize, x: usize| heat.data()[(z * h + y) * w + x];
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = at(z, y, x);
                if p < prob_floor {
                    continue;
                }
                let mut strict_max = true;
                'scan: for dz in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            if dz == 0 && dy == 0 && dx == 0 {
                                continue;
                            }
                            let (nz, ny, nx) = (z as i64 + dz, y as i64 + dy, x as i64 + dx);
                            if nz < 0 || ny < 0 || nx < 0
                                || nz >= d as i64 || ny >= h as i64 || nx >= w as i64
                            {
                                continue;
                            }
                            if at(nz as usize, ny as usize, nx as usize) >= p {
                                strict_max = false;
                                break 'scan;
                            }
                        }
                    }
                }
                if strict_max {
                    out.push(Detection {
                        center_voxel: [z, y, x],
                        probability: p,
                        radius: rad.data()[(z * h + y) * w + x],
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Windowed volume to network input: intensities scaled from [0, 255] to
/// [-1, 1], shaped [1, D, H, W].
pub fn volume_to_input(v: &Volume) -> Result<Tensor> {
    let data = v
        .windowed()?
        .iter()
        .map(|&b| f64::from(b) / 255.0 * 2.0 - 1.0)
        .collect();
    Tensor::new(vec![1, v.shape[0], v.shape[1], v.shape[2]], data)
}

/// World annotations into the voxel frame of an isotropic volume.
pub fn to_voxel_nodules(anns: &[Annotation], v: &Volume) -> Result<Vec<VoxelNodule>> {
    let s = v.spacing_mm;
    if (s[0] - s[1]).abs() > 1e-9 || (s[0] - s[2]).abs() > 1e-9 {
        return Err(Error::usage(format!(
            "voxel-frame nodules need isotropic spacing, got {s:?}"
        )));
    }
    Ok(anns
        .iter()
        .map(|a| {
            let p = crate::ct::world_to_voxel(a.center_world_mm, v);
            VoxelNodule {
                center: [p[2], p[1], p[0]],
                radius: a.radius() / s[0],
            }
        })
        .collect())
}

/// Copies a patch out of an input tensor, keeping nodules whose center lies
/// inside, re-expressed relative to the patch corner (z, y, x).
pub fn slice_patch(
    input: &Tensor,
    nodules: &[VoxelNodule],
    corner: [usize; 3],
    extent: usize,
) -> Result<(Tensor, Vec<VoxelNodule>)> {
    let shape = input.shape();
    if shape.len() != 4 || shape[0] != 1 {
        return Err(Error::shape(format!("expected [1, D, H, W], got {shape:?}")));
    }
    for a in 0..3 {
        if corner[a] + extent > shape[a + 1] {
            return Err(Error::usage(format!(
                "patch at {corner:?} extent {extent} leaves volume {shape:?}"
            )));
        }
    }
    let (h, w) = (shape[2], shape[3]);
    let mut data = Vec::with_capacity(extent * extent * extent);
    for z in 0..extent {
        for y in 0..extent {
            let base = ((corner[0] + z) * h + corner[1] + y) * w + corner[2];
            data.extend_from_slice(&input.data()[base..base + extent]);
        }
    }
    let kept = nodules
        .iter()
        .filter_map(|nod| {
            let c: [f64; 3] = std::array::from_fn(|a| nod.center[a] - corner[a] as f64);
            let inside = c.iter().all(|&v| v >= 0.0 && v < extent as f64);
            inside.then(|| VoxelNodule {
                center: c,
                radius: nod.radius,
            })
        })
        .collect();
    Ok((Tensor::new(vec![1, extent, extent, extent], data)?, kept))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "d_steps")]
    pub steps_per_epoch: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_patch")]
    pub patch_extent: usize,
    #[serde(default = "d_lr")]
    pub base_lr: f64,
    /// Epochs at which the learning rate is multiplied by 0.1.
    #[serde(default)]
    pub lr_stage_epochs: Vec<usize>,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
}

fn d_steps() -> usize {
    5
}
fn d_batch() -> usize {
    2
}
fn d_patch() -> usize {
    16
}
fn d_lr() -> f64 {
    0.01
}
fn d_momentum() -> f64 {
    0.9
}
fn d_wd() -> f64 {
    1e-4
}

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            epochs,
            steps_per_epoch: d_steps(),
            batch_size: d_batch(),
            patch_extent: d_patch(),
            base_lr: d_lr(),
            lr_stage_epochs: Vec::new(),
            momentum: d_momentum(),
            weight_decay: d_wd(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs, steps and batch size must be >= 1"));
        }
        if self.patch_extent % 4 != 0 {
            return Err(Error::config(format!(
                "patch extent must be divisible by 4, got {}",
                self.patch_extent
            )));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::config("base_lr must be positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self
            .lr_stage_epochs
            .iter()
            .filter(|&&bound| epoch >= bound)
            .count();
        self.base_lr * 0.1f64.powi(drops as i32)
    }
}

pub struct TrainVolume {
    pub input: Tensor,
    pub nodules: Vec<VoxelNodule>,
}

pub struct DomainData {
    pub domain_id: String,
    pub volumes: Vec<TrainVolume>,
}

/// SGD with momentum and decoupled-from-nothing weight decay folded into
/// the gradient: v = mu*v + (g + wd*w); w -= lr*v.
pub struct SgdOptimizer {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<usize, Tensor>,
}

impl SgdOptimizer {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        SgdOptimizer {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    pub fn step(&mut self, params: &[(String, Param)], lr: f64) {
        for (_, p) in params {
            let g = p.grad();
            let key = p.key();
            let v = self
                .velocity
                .entry(key)
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let (mu, wd) = (self.momentum, self.weight_decay);
            p.update(|w, _| {
                for i in 0..w.numel() {
                    let vel = mu * v.data()[i] + g.data()[i] + wd * w.data()[i];
                    v.data_mut()[i] = vel;
                    w.data_mut()[i] -= lr * vel;
                }
            });
            p.zero_grad();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub log: Vec<LossRow>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.log.first().map(|r| r.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.log.last().map(|r| r.loss)
    }

    pub fn epoch_mean_loss(&self, epoch: usize) -> Option<f64> {
        let rows: Vec<f64> = self
            .log
            .iter()
            .filter(|r| r.epoch == epoch)
            .map(|r| r.loss)
            .collect();
        if rows.is_empty() {
            None
        } else {
            Some(rows.iter().sum::<f64>() / rows.len() as f64)
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,step,lr,loss\n");
        for r in &self.log {
            writeln!(s, "{},{},{},{}", r.epoch, r.step, r.lr, r.loss).unwrap();
        }
        s
    }
}

fn with_step_context(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::numeric(format!("epoch {epoch} step {step}: {m}")),
        other => other,
    }
}

/// Trains in place. Deterministic given the seed; aborts with the offending
/// step on non-finite loss.
pub fn train(net: &ToyNet, data: &[DomainData], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::usage("training needs at least one domain"));
    }
    for domain in data {
        if !net.heads.contains_key(&domain.domain_id) {
            return Err(Error::usage(format!(
                "no detection head registered for dataset `{}`",
                domain.domain_id
            )));
        }
        if domain.volumes.is_empty() {
            return Err(Error::data(format!(
                "domain `{}` has no volumes",
                domain.domain_id
            )));
        }
        for v in &domain.volumes {
            for (a, &e) in v.input.shape()[1..].iter().enumerate() {
                if e < cfg.patch_extent {
                    return Err(Error::data(format!(
                        "domain `{}` volume axis {a} extent {e} is below the {}-voxel patch",
                        domain.domain_id, cfg.patch_extent
                    )));
                }
            }
        }
    }

    let params = net.params();
    let mut opt = SgdOptimizer::new(cfg.momentum, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        for step in 0..cfg.steps_per_epoch {
            // the whole batch comes from one randomly sampled dataset
            let domain = &data[rng.gen_range(0..data.len())];
            let mut batch_loss = 0.0;
            for _ in 0..cfg.batch_size {
                let vol = &domain.volumes[rng.gen_range(0..domain.volumes.len())];
                let corner: [usize; 3] = std::array::from_fn(|a| {
                    rng.gen_range(0..=vol.input.shape()[a + 1] - cfg.patch_extent)
                });
                let (patch, nodules) =
                    slice_patch(&vol.input, &vol.nodules, corner, cfg.patch_extent)?;
                let target = build_target([cfg.patch_extent; 3], &nodules)?;
                let mut tape = Tape::new();
                let xv = tape.constant(patch);
                let (heat, rad) = forward_detect(&mut tape, net, xv, &domain.domain_id, None)
                    .map_err(|e| with_step_context(e, epoch, step))?;
                let loss = detection_loss(&mut tape, heat, rad, &target)
                    .map_err(|e| with_step_context(e, epoch, step))?;
                let sample_loss = tape.value(loss).scalar_value()?;
                let scaled = tape.scale(loss, 1.0 / cfg.batch_size as f64);
                tape.backward(scaled)
                    .map_err(|e| with_step_context(e, epoch, step))?;
                batch_loss += sample_loss / cfg.batch_size as f64;
            }
            if !batch_loss.is_finite() {
                return Err(Error::numeric(format!(
                    "loss diverged to {batch_loss} at epoch {epoch} step {step}"
                )));
            }
            opt.step(&params, lr);
            report.log.push(LossRow {
                epoch,
                step,
                lr,
                loss: batch_loss,
            });
        }
    }
    Ok(report)
}

/// Tiled whole-volume inference: the volume is split into non-overlapping
/// cubes, each forwarded independently, and the maps stitched back.
pub fn infer_volume(
    net: &ToyNet,
    input: &Tensor,
    dataset: &str,
    tile: usize,
    mut recorder: Option<&mut AssignmentRecord>,
) -> Result<(Tensor, Tensor)> {
    let shape = input.shape();
    if shape.len() != 4 || shape[0] != 1 {
        return Err(Error::shape(format!("expected [1, D, H, W], got {shape:?}")));
    }
    for &e in &shape[1..] {
        if e % tile != 0 {
            return Err(Error::config(format!(
                "volume extents {shape:?} are not tileable by {tile}"
            )));
        }
    }
    let mut heat = Tensor::zeros(shape);
    let mut rad = Tensor::zeros(shape);
    let (dh, hh, wh) = (shape[1] / tile, shape[2] / tile, shape[3] / tile);
    for tz in 0..dh {
        for ty in 0..hh {
            for tx in 0..wh {
                let corner = [tz * tile, ty * tile, tx * tile];
                let (patch, _) = slice_patch(input, &[], corner, tile)?;
                let mut tape = Tape::new();
                let xv = tape.constant(patch);
                let (hv, rv) =
                    forward_detect(&mut tape, net, xv, dataset, recorder.as_deref_mut())?;
                let ht = tape.value(hv).clone();
                let rt = tape.value(rv).clone();
                for z in 0..tile {
                    for y in 0..tile {
                        let src = (z * tile + y) * tile;
                        let dst = ((corner[0] + z) * shape[2] + corner[1] + y) * shape[3]
                            + corner[2];
                        heat.data_mut()[dst..dst + tile]
                            .copy_from_slice(&ht.data()[src..src + tile]);
                        rad.data_mut()[dst..dst + tile]
                            .copy_from_slice(&rt.data()[src..src + tile]);
                    }
                }
            }
        }
    }
    Ok((heat, rad))
}

/// Decoded peaks mapped into candidates in the volume's world frame.
pub fn detections_to_candidates(
    dets: &[Detection],
    series_id: &str,
    v: &Volume,
) -> Vec<Candidate> {
    dets.iter()
        .map(|det| {
            let p = crate::ct::voxel_to_world(
                [
                    det.center_voxel[2] as f64,
                    det.center_voxel[1] as f64,
                    det.center_voxel[0] as f64,
                ],
                v,
            );
            Candidate {
                series_id: series_id.to_string(),
                center: p,
                probability: det.probability,
            }
        })
        .collect()
}

pub fn save_toy(dir: &Path, net: &ToyNet) -> Result<()> {
    save_checkpoint(dir, "toy", serde_json::to_value(&net.cfg)?, &net.params())
}

pub fn load_toy(dir: &Path) -> Result<ToyNet> {
    let manifest = read_manifest(dir)?;
    if manifest.kind != "toy" {
        return Err(Error::data(format!(
            "expected a toy checkpoint, found kind `{}`",
            manifest.kind
        )));
    }
    let cfg: ToyNetConfig = serde_json::from_value(manifest.config.clone())?;
    let net = ToyNet::new(&cfg, 0)?;
    let tensors = load_tensors(dir, &manifest)?;
    apply_tensors(&net.params(), &tensors)?;
    Ok(net)
}
