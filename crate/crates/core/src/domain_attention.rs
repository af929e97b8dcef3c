//! Universal adapter bank with per-direction, per-group domain assignment.
//!
//! Each directional group is projected through N squeeze-excitation adapters
//! into a C x N universal representation, a softmax over pooled features picks
//! a soft adapter mixture, and the mixed excitation modulates the group. An
//! [`AssignmentRecord`] can collect the soft mixtures per (module, direction,
//! group, dataset) for later inspection.
//!
//! Reductions over the adapter axis (the softmax normalizer and the mixture
//! sum) accumulate in value-sorted order, so relabeling adapters permutes no
//! output bits.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::zero_param;
use crate::sgse::{excitation, group_split, modulate, Direction, SgseConfig, SgseWeights};
use crate::tape::Param;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankConfig {
    pub channels: usize,
    pub groups: usize,
    pub reduction: usize,
    /// Adapter count N; independent of how many datasets exist.
    pub adapters: usize,
}

impl BankConfig {
    pub fn new(channels: usize, groups: usize, reduction: usize, adapters: usize) -> Result<Self> {
        let cfg = BankConfig {
            channels,
            groups,
            reduction,
            adapters,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.sgse().validate()?;
        if self.adapters == 0 {
            return Err(Error::config("adapter count must be at least 1"));
        }
        Ok(())
    }

    pub fn sgse(&self) -> SgseConfig {
        SgseConfig {
            channels: self.channels,
            groups: self.groups,
            reduction: self.reduction,
        }
    }
}

/// N adapters plus one assignment matrix per direction (shared across that
/// direction's groups).
#[derive(Clone)]
pub struct BankWeights {
    pub adapters: Vec<SgseWeights>,
    pub assign_axial: Param,
    pub assign_coronal: Param,
    pub assign_sagittal: Param,
}

impl BankWeights {
    pub fn zeros(cfg: &BankConfig) -> Self {
        let sgse = cfg.sgse();
        BankWeights {
            adapters: (0..cfg.adapters).map(|_| SgseWeights::zeros(&sgse)).collect(),
            assign_axial: zero_param(&[cfg.adapters, cfg.channels]),
            assign_coronal: zero_param(&[cfg.adapters, cfg.channels]),
            assign_sagittal: zero_param(&[cfg.adapters, cfg.channels]),
        }
    }

    /// Random adapters; assignment matrices start at zero so the initial
    /// routing is uniform.
    pub fn init(cfg: &BankConfig, rng: &mut impl Rng) -> Self {
        let sgse = cfg.sgse();
        BankWeights {
            adapters: (0..cfg.adapters).map(|_| SgseWeights::init(&sgse, rng)).collect(),
            assign_axial: zero_param(&[cfg.adapters, cfg.channels]),
            assign_coronal: zero_param(&[cfg.adapters, cfg.channels]),
            assign_sagittal: zero_param(&[cfg.adapters, cfg.channels]),
        }
    }

    pub fn assign_for(&self, d: Direction) -> &Param {
        match d {
            Direction::Axial => &self.assign_axial,
            Direction::Coronal => &self.assign_coronal,
            Direction::Sagittal => &self.assign_sagittal,
        }
    }

    pub fn validate(&self, cfg: &BankConfig) -> Result<()> {
        if self.adapters.len() != cfg.adapters {
            return Err(Error::config(format!(
                "bank holds {} adapters, config says {}",
                self.adapters.len(),
                cfg.adapters
            )));
        }
        let sgse = cfg.sgse();
        for a in &self.adapters {
            a.validate(&sgse)?;
        }
        for d in Direction::ALL {
            if self.assign_for(d).shape() != [cfg.adapters, cfg.channels] {
                return Err(Error::config(format!(
                    "{} assignment matrix shape {:?}, expected [{}, {}]",
                    d.label(),
                    self.assign_for(d).shape(),
                    cfg.adapters,
                    cfg.channels
                )));
            }
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<(String, Param)> {
        self.params_for(&Direction::ALL)
    }

    /// Parameters of the listed directions only; disabled directions carry
    /// no trainable (or serialized) weights.
    pub fn params_for(&self, directions: &[Direction]) -> Vec<(String, Param)> {
        let mut out = Vec::new();
        for (i, adapter) in self.adapters.iter().enumerate() {
            for &d in directions {
                let w = adapter.get(d);
                out.push((format!("adapter{i}.{}.w1", d.label()), w.w1.clone()));
                out.push((format!("adapter{i}.{}.w2", d.label()), w.w2.clone()));
            }
        }
        for &d in directions {
            out.push((format!("assign.{}", d.label()), self.assign_for(d).clone()));
        }
        out
    }
}

/// Sum in value-sorted order; the result depends only on the multiset of
/// terms, never on their labeling.
fn stable_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(|a, b| a.total_cmp(b));
    terms.iter().sum()
}

/// Project one group through every adapter: column j holds adapter j's
/// excitation vector; output is C x N.
pub fn bank_project(xg: &Tensor, w: &BankWeights, direction: Direction) -> Result<Tensor> {
    let cols: Vec<Tensor> = w
        .adapters
        .iter()
        .map(|a| {
            let y = excitation(xg, a.get(direction))?;
            let c = y.shape()[0];
            y.reshape(&[c, 1])
        })
        .collect::<Result<_>>()?;
    Tensor::concat(&cols, 1)
}

/// Soft adapter assignment: softmax(W_DA · avgpool(xg)), a length-N
/// probability vector.
pub fn assign(xg: &Tensor, w_da: &Tensor) -> Result<Tensor> {
    let pooled = xg.global_avg_pool3d()?;
    let logits = w_da.matvec(&pooled)?;
    let max = logits
        .data()
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = logits.data().iter().map(|&l| (l - max).exp()).collect();
    let norm = stable_sum(exps.clone());
    Tensor::new(vec![exps.len()], exps.into_iter().map(|e| e / norm).collect())
}

/// Modulate one group by the assignment-weighted mixture of adapter
/// excitations; also returns the assignment vector.
pub fn domain_modulate_group(
    xg: &Tensor,
    w: &BankWeights,
    direction: Direction,
) -> Result<(Tensor, Tensor)> {
    let y_uni = bank_project(xg, w, direction)?;
    let y_da = assign(xg, &w.assign_for(direction).value())?;
    let (c, n) = (y_uni.shape()[0], y_uni.shape()[1]);
    let mut y = vec![0.0; c];
    for (ch, slot) in y.iter_mut().enumerate() {
        let terms: Vec<f64> = (0..n)
            .map(|j| y_da.data()[j] * y_uni.data()[ch * n + j])
            .collect();
        *slot = stable_sum(terms);
    }
    let modulated = modulate(xg, &Tensor::new(vec![c], y)?)?;
    Ok((modulated, y_da))
}

/// One direction's pass: split into groups, domain-modulate each, concat.
pub fn domain_direction(
    x: &Tensor,
    w: &BankWeights,
    cfg: &BankConfig,
    direction: Direction,
    mut recorder: Option<&mut AssignmentRecord>,
) -> Result<Tensor> {
    let parts = group_split(x, direction, cfg.groups)?;
    let mut modulated = Vec::with_capacity(parts.len());
    for (g, part) in parts.iter().enumerate() {
        let (m, y_da) = domain_modulate_group(part, w, direction)?;
        if let Some(rec) = recorder.as_deref_mut() {
            rec.record(direction, g, &y_da)?;
        }
        modulated.push(m);
    }
    Tensor::concat(&modulated, direction.axis())
}

/// All three directional maps (axial, coronal, sagittal order).
pub fn directional_forward(
    x: &Tensor,
    w: &BankWeights,
    cfg: &BankConfig,
    mut recorder: Option<&mut AssignmentRecord>,
) -> Result<(Tensor, Tensor, Tensor)> {
    cfg.validate()?;
    w.validate(cfg)?;
    if x.shape().len() != 4 || x.shape()[0] != cfg.channels {
        return Err(Error::shape(format!(
            "input shape {:?} does not match {} channels",
            x.shape(),
            cfg.channels
        )));
    }
    let a = domain_direction(x, w, cfg, Direction::Axial, recorder.as_deref_mut())?;
    let c = domain_direction(x, w, cfg, Direction::Coronal, recorder.as_deref_mut())?;
    let s = domain_direction(x, w, cfg, Direction::Sagittal, recorder)?;
    Ok((a, c, s))
}

/// Running mean of soft assignments keyed by (module, direction, group,
/// dataset). Single-threaded accumulation; parallel workers keep their own
/// record and [`AssignmentRecord::merge`] afterwards.
#[derive(Debug, Clone, Default)]
pub struct AssignmentRecord {
    module: String,
    dataset: String,
    entries: BTreeMap<(String, String, usize, String), AssignStat>,
}

#[derive(Debug, Clone)]
struct AssignStat {
    sum: Vec<f64>,
    samples: u64,
}

/// One exported histogram row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentExport {
    pub module: String,
    pub direction: String,
    pub group: usize,
    pub dataset: String,
    pub mean_weights: Vec<f64>,
    pub samples: u64,
}

impl AssignmentRecord {
    pub fn new() -> Self {
        Self::default()
    }

    /// Set the labels applied to subsequent [`AssignmentRecord::record`] calls.
    pub fn set_context(&mut self, module: &str, dataset: &str) {
        self.module = module.to_string();
        self.dataset = dataset.to_string();
    }

    pub fn record(&mut self, direction: Direction, group: usize, weights: &Tensor) -> Result<()> {
        let total: f64 = weights.data().iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::numeric(format!(
                "assignment vector sums to {total}, expected 1"
            )));
        }
        let key = (
            self.module.clone(),
            direction.label().to_string(),
            group,
            self.dataset.clone(),
        );
        let stat = self.entries.entry(key).or_insert_with(|| AssignStat {
            sum: vec![0.0; weights.numel()],
            samples: 0,
        });
        if stat.sum.len() != weights.numel() {
            return Err(Error::usage(format!(
                "assignment length changed from {} to {}",
                stat.sum.len(),
                weights.numel()
            )));
        }
        for (s, w) in stat.sum.iter_mut().zip(weights.data()) {
            *s += w;
        }
        stat.samples += 1;
        Ok(())
    }

    /// Fold another record (e.g. from a worker thread) into this one.
    pub fn merge(&mut self, other: AssignmentRecord) {
        for (key, stat) in other.entries {
            match self.entries.get_mut(&key) {
                Some(mine) => {
                    for (a, b) in mine.sum.iter_mut().zip(&stat.sum) {
                        *a += b;
                    }
                    mine.samples += stat.samples;
                }
                None => {
                    self.entries.insert(key, stat);
                }
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Deterministically ordered mean-weight rows.
    pub fn export(&self) -> Vec<AssignmentExport> {
        self.entries
            .iter()
            .map(|((module, direction, group, dataset), stat)| AssignmentExport {
                module: module.clone(),
                direction: direction.clone(),
                group: *group,
                dataset: dataset.clone(),
                mean_weights: stat.sum.iter().map(|s| s / stat.samples as f64).collect(),
                samples: stat.samples,
            })
            .collect()
    }
}
