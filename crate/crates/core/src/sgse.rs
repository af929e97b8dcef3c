//! Slice-grouped squeeze-excitation.
//!
//! The input feature map is split into G groups along one anatomical
//! direction (axial = depth, coronal = height, sagittal = width). Each group
//! is squeezed to a per-channel descriptor, pushed through a two-layer
//! bottleneck whose weights are shared by every group of that direction, and
//! rescaled channel-wise through a sigmoid gate. The three directional maps
//! are averaged into the output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{uniform_param, zero_param};
use crate::tape::Param;
use crate::tensor::Tensor;

/// Anatomical grouping direction over the (C, D, H, W) layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Axial,
    Coronal,
    Sagittal,
}

impl Direction {
    pub const ALL: [Direction; 3] = [Direction::Axial, Direction::Coronal, Direction::Sagittal];

    /// Spatial axis this direction slices along.
    pub fn axis(self) -> usize {
        match self {
            Direction::Axial => 1,
            Direction::Coronal => 2,
            Direction::Sagittal => 3,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Direction::Axial => "axial",
            Direction::Coronal => "coronal",
            Direction::Sagittal => "sagittal",
        }
    }

    pub fn axis_name(self) -> &'static str {
        match self {
            Direction::Axial => "depth",
            Direction::Coronal => "height",
            Direction::Sagittal => "width",
        }
    }

    pub fn from_label(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(Direction::Axial),
            "coronal" => Ok(Direction::Coronal),
            "sagittal" => Ok(Direction::Sagittal),
            other => Err(Error::usage(format!("unknown direction `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SgseConfig {
    pub channels: usize,
    pub groups: usize,
    pub reduction: usize,
}

impl SgseConfig {
    pub fn new(channels: usize, groups: usize, reduction: usize) -> Result<Self> {
        let cfg = SgseConfig {
            channels,
            groups,
            reduction,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.groups == 0 || self.reduction == 0 {
            return Err(Error::config(format!(
                "channels/groups/reduction must be positive, got {}/{}/{}",
                self.channels, self.groups, self.reduction
            )));
        }
        if self.channels % self.reduction != 0 {
            return Err(Error::config(format!(
                "channels {} not divisible by reduction {}",
                self.channels, self.reduction
            )));
        }
        Ok(())
    }

    /// Bottleneck width C/r.
    pub fn reduced(&self) -> usize {
        self.channels / self.reduction
    }
}

/// One direction's excitation bottleneck: w1 is (C/r)x(C), w2 is (C)x(C/r).
#[derive(Clone)]
pub struct DirectionWeights {
    pub w1: Param,
    pub w2: Param,
}

impl DirectionWeights {
    pub fn zeros(cfg: &SgseConfig) -> Self {
        DirectionWeights {
            w1: zero_param(&[cfg.reduced(), cfg.channels]),
            w2: zero_param(&[cfg.channels, cfg.reduced()]),
        }
    }

    pub fn init(cfg: &SgseConfig, rng: &mut impl Rng) -> Self {
        DirectionWeights {
            w1: uniform_param(&[cfg.reduced(), cfg.channels], cfg.channels, rng),
            w2: uniform_param(&[cfg.channels, cfg.reduced()], cfg.reduced(), rng),
        }
    }

    pub fn validate(&self, cfg: &SgseConfig) -> Result<()> {
        let (c, cr) = (cfg.channels, cfg.reduced());
        if self.w1.shape() != [cr, c] {
            return Err(Error::config(format!(
                "w1 shape {:?}, expected [{cr}, {c}]",
                self.w1.shape()
            )));
        }
        if self.w2.shape() != [c, cr] {
            return Err(Error::config(format!(
                "w2 shape {:?}, expected [{c}, {cr}]",
                self.w2.shape()
            )));
        }
        Ok(())
    }
}

/// Excitation weights for all three directions; each direction's pair is
/// shared by its G groups.
#[derive(Clone)]
pub struct SgseWeights {
    pub axial: DirectionWeights,
    pub coronal: DirectionWeights,
    pub sagittal: DirectionWeights,
}

impl SgseWeights {
    pub fn zeros(cfg: &SgseConfig) -> Self {
        SgseWeights {
            axial: DirectionWeights::zeros(cfg),
            coronal: DirectionWeights::zeros(cfg),
            sagittal: DirectionWeights::zeros(cfg),
        }
    }

    pub fn init(cfg: &SgseConfig, rng: &mut impl Rng) -> Self {
        SgseWeights {
            axial: DirectionWeights::init(cfg, rng),
            coronal: DirectionWeights::init(cfg, rng),
            sagittal: DirectionWeights::init(cfg, rng),
        }
    }

    pub fn get(&self, d: Direction) -> &DirectionWeights {
        match d {
            Direction::Axial => &self.axial,
            Direction::Coronal => &self.coronal,
            Direction::Sagittal => &self.sagittal,
        }
    }

    pub fn validate(&self, cfg: &SgseConfig) -> Result<()> {
        for d in Direction::ALL {
            self.get(d).validate(cfg)?;
        }
        Ok(())
    }

    /// Named parameters in a fixed order, for serialization and optimizers.
    pub fn params(&self) -> Vec<(String, Param)> {
        let mut out = Vec::with_capacity(6);
        for d in Direction::ALL {
            let w = self.get(d);
            out.push((format!("{}.w1", d.label()), w.w1.clone()));
            out.push((format!("{}.w2", d.label()), w.w2.clone()));
        }
        out
    }
}

/// Split a feature map into equal groups along the direction's axis.
pub fn group_split(x: &Tensor, direction: Direction, groups: usize) -> Result<Vec<Tensor>> {
    if x.shape().len() != 4 {
        return Err(Error::shape(format!(
            "group_split expects a (C,D,H,W) map, got {:?}",
            x.shape()
        )));
    }
    let extent = x.shape()[direction.axis()];
    if groups == 0 || extent % groups != 0 {
        return Err(Error::config(format!(
            "{} axis ({}) extent {extent} is not divisible into {groups} groups",
            direction.label(),
            direction.axis_name()
        )));
    }
    x.split(direction.axis(), groups)
}

/// Pre-gate excitation vector of one group: w2 · relu(w1 · avgpool(xg)).
pub fn excitation(xg: &Tensor, w: &DirectionWeights) -> Result<Tensor> {
    let pooled = xg.global_avg_pool3d()?;
    let hidden = w.w1.value().matvec(&pooled)?.relu();
    w.w2.value().matvec(&hidden)
}

/// Channel-wise rescaling of a group by the sigmoid of its excitation.
pub fn modulate(xg: &Tensor, y: &Tensor) -> Result<Tensor> {
    xg.channel_scale(&y.sigmoid())
}

/// One direction's full pass: split, excite and modulate each group, concat.
pub fn sgse_direction(
    x: &Tensor,
    w: &DirectionWeights,
    direction: Direction,
    groups: usize,
) -> Result<Tensor> {
    let parts = group_split(x, direction, groups)?;
    let modulated: Vec<Tensor> = parts
        .iter()
        .map(|g| modulate(g, &excitation(g, w)?))
        .collect::<Result<_>>()?;
    Tensor::concat(&modulated, direction.axis())
}

/// Full adapter: mean of the three directional passes.
pub fn sgse_forward(x: &Tensor, w: &SgseWeights, cfg: &SgseConfig) -> Result<Tensor> {
    cfg.validate()?;
    w.validate(cfg)?;
    if x.shape().len() != 4 || x.shape()[0] != cfg.channels {
        return Err(Error::shape(format!(
            "input shape {:?} does not match {} channels",
            x.shape(),
            cfg.channels
        )));
    }
    let a = sgse_direction(x, &w.axial, Direction::Axial, cfg.groups)?;
    let c = sgse_direction(x, &w.coronal, Direction::Coronal, cfg.groups)?;
    let s = sgse_direction(x, &w.sagittal, Direction::Sagittal, cfg.groups)?;
    Ok(a.add(&c)?.add(&s)?.scale(1.0 / 3.0))
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

    /// Plain (ungrouped) squeeze-excitation over the whole volume, written
    /// with raw loops so it shares nothing with the adapter implementation.
    fn plain_se_oracle(x: &Tensor, w1: &Tensor, w2: &Tensor) -> Tensor {
        let c = x.shape()[0];
        let spatial: usize = x.shape()[1..].iter().product();
        let cr = w1.shape()[0];
        let mut pooled = vec![0.0; c];
        for ch in 0..c {
            for v in 0..spatial {
                pooled[ch] += x.data()[ch * spatial + v];
            }
            pooled[ch] /= spatial as f64;
        }
        let mut hidden = vec![0.0; cr];
        for i in 0..cr {
            for j in 0..c {
                hidden[i] += w1.data()[i * c + j] * pooled[j];
            }
            if hidden[i] < 0.0 {
                hidden[i] = 0.0;
            }
        }
        let mut gate = vec![0.0; c];
        for i in 0..c {
            let mut y = 0.0;
            for j in 0..cr {
                y += w2.data()[i * cr + j] * hidden[j];
            }
            gate[i] = 1.0 / (1.0 + (-y).exp());
        }
        let mut out = x.data().to_vec();
        for ch in 0..c {
            for v in &mut out[ch * spatial..(ch + 1) * spatial] {
                *v *= gate[ch];
            }
        }
        Tensor::new(x.shape().to_vec(), out).unwrap()
    }

    #[test]
    fn group_split_single_group_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&[2, 4, 4, 4], &mut rng);
        let parts = group_split(&x, Direction::Axial, 1).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0], x);
    }

    #[test]
    fn group_split_axial_halves_depth() {
        let x = Tensor::zeros(&[3, 4, 6, 8]);
        let parts = group_split(&x, Direction::Axial, 2).unwrap();
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[0].shape(), &[3, 2, 6, 8]);
    }

    #[test]
    fn group_split_membership_follows_index_arithmetic() {
        // value == linear index, so each group's origin is directly checkable
        let n = 2 * 4 * 4 * 4;
        let x = Tensor::new(vec![2, 4, 4, 4], (0..n).map(|i| i as f64).collect()).unwrap();
        for direction in Direction::ALL {
            let axis = direction.axis();
            let parts = group_split(&x, direction, 2).unwrap();
            for (g, part) in parts.iter().enumerate() {
                let s = part.shape();
                for c in 0..s[0] {
                    for d in 0..s[1] {
                        for h in 0..s[2] {
                            for w in 0..s[3] {
                                let mut src = [c, d, h, w];
                                src[axis] += g * s[axis];
                                let expect = ((src[0] * 4 + src[1]) * 4 + src[2]) * 4 + src[3];
                                assert_eq!(part.at4(c, d, h, w), expect as f64);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn group_split_error_names_the_axis() {
        let x = Tensor::zeros(&[2, 4, 6, 8]);
        let err = group_split(&x, Direction::Coronal, 4).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("coronal") && msg.contains("height"), "{msg}");
    }

    #[test]
    fn excitation_zero_weights_gives_zero_vector() {
        let cfg = SgseConfig::new(4, 1, 2).unwrap();
        let w = DirectionWeights::zeros(&cfg);
        let x = Tensor::filled(&[4, 2, 2, 2], 1.7);
        let y = excitation(&x, &w).unwrap();
        assert_eq!(y.data(), &[0.0; 4]);
    }

    #[test]
    fn excitation_identity_slices_reproduce_closed_form() {
        // C=4, r=2. w1 = first two rows of I4, w2 = first two columns of I4.
        // Constant input v pools to (v,v,v,v), so Y = (relu(v), relu(v), 0, 0).
        let w1 = Tensor::new(vec![2, 4], vec![1., 0., 0., 0., 0., 1., 0., 0.]).unwrap();
        let w2 = Tensor::new(vec![4, 2], vec![1., 0., 0., 1., 0., 0., 0., 0.]).unwrap();
        let w = DirectionWeights {
            w1: Param::new(w1),
            w2: Param::new(w2),
        };
        for v in [1.5, -2.0] {
            let x = Tensor::filled(&[4, 2, 2, 2], v);
            let y = excitation(&x, &w).unwrap();
            let r = v.max(0.0);
            assert_eq!(y.data(), &[r, r, 0.0, 0.0]);
        }
    }

    #[test]
    fn excitation_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = SgseConfig::new(6, 1, 2).unwrap();
        let w = DirectionWeights::init(&cfg, &mut rng);
        let x = rand_tensor(&[6, 3, 3, 3], &mut rng);
        let y = excitation(&x, &w).unwrap();
        // oracle computes gate = sigmoid(y); invert to compare the pre-gate y
        let oracle = plain_se_oracle(&x, &w.w1.value(), &w.w2.value());
        let spatial = 27;
        for c in 0..6 {
            // recover the oracle's gate from any voxel with x != 0
            let v = (0..spatial).find(|&v| x.data()[c * spatial + v] != 0.0).unwrap();
            let gate = oracle.data()[c * spatial + v] / x.data()[c * spatial + v];
            let ours = 1.0 / (1.0 + (-y.data()[c]).exp());
            assert!((gate - ours).abs() < 1e-12);
        }
    }

    #[test]
    fn modulate_zero_excitation_halves_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&[3, 2, 2, 2], &mut rng);
        let y = Tensor::zeros(&[3]);
        let out = modulate(&x, &y).unwrap();
        assert_eq!(out, x.scale(0.5));
    }

    #[test]
    fn modulate_large_excitation_approaches_identity() {
        let x = Tensor::filled(&[2, 2, 2, 2], 3.0);
        let y = Tensor::filled(&[2], 40.0);
        let out = modulate(&x, &y).unwrap();
        assert!(out.max_abs_diff(&x) < 1e-12);
        // monotone approach from below
        let nearer = modulate(&x, &Tensor::filled(&[2], 20.0)).unwrap();
        assert!(out.data()[0] > nearer.data()[0]);
    }

    #[test]
    fn modulate_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&[3, 2, 2, 2], &mut rng);
        let y = rand_tensor(&[3], &mut rng);
        let out = modulate(&x, &y).unwrap();
        for c in 0..3 {
            let gate = 1.0 / (1.0 + (-y.data()[c]).exp());
            for d in 0..2 {
                for h in 0..2 {
                    for w in 0..2 {
                        let want = x.at4(c, d, h, w) * gate;
                        assert!((out.at4(c, d, h, w) - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn forward_zero_weights_halves_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = SgseConfig::new(4, 2, 2).unwrap();
        let w = SgseWeights::zeros(&cfg);
        let x = rand_tensor(&[4, 4, 4, 4], &mut rng);
        let out = sgse_forward(&x, &w, &cfg).unwrap();
        assert!(out.max_abs_diff(&x.scale(0.5)) < 1e-15);
    }

    #[test]
    fn forward_single_group_tied_directions_equals_plain_se() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = SgseConfig::new(4, 1, 2).unwrap();
        let shared = DirectionWeights::init(&cfg, &mut rng);
        let w = SgseWeights {
            axial: shared.clone(),
            coronal: shared.clone(),
            sagittal: shared.clone(),
        };
        let x = rand_tensor(&[4, 4, 4, 4], &mut rng);
        let out = sgse_forward(&x, &w, &cfg).unwrap();
        let oracle = plain_se_oracle(&x, &shared.w1.value(), &shared.w2.value());
        assert!(out.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn forward_single_group_equals_mean_of_plain_se_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = SgseConfig::new(4, 1, 2).unwrap();
        let w = SgseWeights::init(&cfg, &mut rng);
        let x = rand_tensor(&[4, 4, 4, 4], &mut rng);
        let out = sgse_forward(&x, &w, &cfg).unwrap();
        let mut mean = Tensor::zeros(x.shape());
        for d in Direction::ALL {
            let dw = w.get(d);
            mean.add_assign(&plain_se_oracle(&x, &dw.w1.value(), &dw.w2.value())).unwrap();
        }
        let mean = mean.scale(1.0 / 3.0);
        assert!(out.max_abs_diff(&mean) < 1e-12);
    }

    #[test]
    fn forward_preserves_shape_and_attenuates() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = SgseConfig::new(4, 2, 2).unwrap();
        let w = SgseWeights::init(&cfg, &mut rng);
        let x = rand_tensor(&[4, 4, 4, 4], &mut rng);
        let out = sgse_forward(&x, &w, &cfg).unwrap();
        assert_eq!(out.shape(), x.shape());
        // every directional gate lies in (0,1), so nonzero voxels shrink
        for (o, v) in out.data().iter().zip(x.data()) {
            if *v != 0.0 {
                assert!(o.abs() < v.abs());
                assert!(o.signum() == v.signum());
            }
        }
    }

    #[test]
    fn group_processing_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = SgseConfig::new(4, 4, 2).unwrap();
        let w = DirectionWeights::init(&cfg, &mut rng);
        let x = rand_tensor(&[4, 8, 4, 4], &mut rng);
        let forward = sgse_direction(&x, &w, Direction::Axial, 4).unwrap();
        // process groups in reverse, then restore positions before concat
        let parts = group_split(&x, Direction::Axial, 4).unwrap();
        let mut modulated: Vec<Option<Tensor>> = vec![None; 4];
        for g in (0..4).rev() {
            modulated[g] = Some(modulate(&parts[g], &excitation(&parts[g], &w).unwrap()).unwrap());
        }
        let reordered: Vec<Tensor> = modulated.into_iter().map(Option::unwrap).collect();
        let alt = Tensor::concat(&reordered, 1).unwrap();
        assert_eq!(forward, alt);
    }

    #[test]
    fn config_rejects_indivisible_reduction() {
        assert!(SgseConfig::new(6, 2, 4).is_err());
        assert!(SgseConfig::new(0, 1, 1).is_err());
    }
}
