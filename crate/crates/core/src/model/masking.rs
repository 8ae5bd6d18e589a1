//! Per-sample random masking of patch positions.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which patches each sample keeps, and how to put the sequence back in order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub len_keep: usize,
    /// Kept positions per sample, in shuffle order.
    pub visible_idx: Vec<Vec<usize>>,
    /// Hidden positions per sample, in shuffle order.
    pub masked_idx: Vec<Vec<usize>>,
    /// `restore_perm[b][p]` = rank of position `p` in the shuffle.
    pub restore_perm: Vec<Vec<usize>>,
}

pub fn len_keep(num_patches: usize, ratio: f64) -> usize {
    (num_patches as f64 * (1.0 - ratio)).floor() as usize
}

impl MaskPlan {
    /// Keep every position in natural order. Used for inference paths.
    pub fn identity(batch: usize, num_patches: usize) -> Self {
        let order: Vec<usize> = (0..num_patches).collect();
        Self {
            len_keep: num_patches,
            visible_idx: vec![order.clone(); batch],
            masked_idx: vec![Vec::new(); batch],
            restore_perm: vec![order; batch],
        }
    }

    pub fn batch(&self) -> usize {
        self.visible_idx.len()
    }

    pub fn num_patches(&self) -> usize {
        self.restore_perm.first().map_or(0, |r| r.len())
    }

    /// Rows of this plan picked by sample index (repeats allowed).
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            len_keep: self.len_keep,
            visible_idx: idx.iter().map(|&i| self.visible_idx[i].clone()).collect(),
            masked_idx: idx.iter().map(|&i| self.masked_idx[i].clone()).collect(),
            restore_perm: idx.iter().map(|&i| self.restore_perm[i].clone()).collect(),
        }
    }

    /// Gather the kept patch tokens `[B, len_keep, P]` from a `[B, L, P]` grid.
    pub fn gather_visible(&self, tokens: &Tensor) -> Tensor {
        let (b, l, p) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
        debug_assert_eq!(b, self.batch());
        let mut out = Vec::with_capacity(b * self.len_keep * p);
        for (n, vis) in self.visible_idx.iter().enumerate() {
            for &q in vis {
                out.extend_from_slice(&tokens.data()[(n * l + q) * p..(n * l + q + 1) * p]);
            }
        }
        Tensor::from_parts(vec![b, self.len_keep, p], out)
    }
}

/// Shuffle patch positions by per-sample uniform noise and keep the lowest-ranked
/// `floor(L * (1 - ratio))`.
pub fn random_masking<R: Rng + ?Sized>(tokens: &Tensor, ratio: f64, rng: &mut R) -> Result<(Tensor, MaskPlan)> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::config(format!("mask ratio {ratio} outside [0, 1)")));
    }
    if tokens.shape().len() != 3 {
        return Err(Error::shape("random_masking expects [B, L, P] tokens"));
    }
    let (b, l) = (tokens.shape()[0], tokens.shape()[1]);
    let keep = len_keep(l, ratio);
    let mut visible_idx = Vec::with_capacity(b);
    let mut masked_idx = Vec::with_capacity(b);
    let mut restore_perm = Vec::with_capacity(b);
    for _ in 0..b {
        let noise: Vec<f64> = (0..l).map(|_| rng.random::<f64>()).collect();
        let mut shuffle: Vec<usize> = (0..l).collect();
        shuffle.sort_by(|&a, &c| noise[a].total_cmp(&noise[c]).then(a.cmp(&c)));
        let mut restore = vec![0; l];
        for (rank, &pos) in shuffle.iter().enumerate() {
            restore[pos] = rank;
        }
        visible_idx.push(shuffle[..keep].to_vec());
        masked_idx.push(shuffle[keep..].to_vec());
        restore_perm.push(restore);
    }
    let plan = MaskPlan {
        len_keep: keep,
        visible_idx,
        masked_idx,
        restore_perm,
    };
    let visible = plan.gather_visible(tokens);
    Ok((visible, plan))
}
