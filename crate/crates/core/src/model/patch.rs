//! Patchification of `[B, S, S, C]` pixel batches into `[B, L, P]` token grids.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

/// Patch tokens plus the grid layout they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    /// `[B, L, P]`, patches in row-major patch order, pixels `(row, col, channel)` within a patch.
    pub tokens: Tensor,
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn batch(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn num_patches(&self) -> usize {
        self.rows * self.cols
    }

    pub fn patch_dim(&self) -> usize {
        self.tokens.shape()[2]
    }
}

pub fn patchify(images: &Tensor, cfg: &ModelConfig) -> Result<PatchGrid> {
    let shape = images.shape();
    if shape.len() != 4 {
        return Err(Error::config(format!(
            "images must be [batch, height, width, channels], got rank {}",
            shape.len()
        )));
    }
    let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    if h != cfg.image_size {
        return Err(Error::config(format!("image height {h} != image_size {}", cfg.image_size)));
    }
    if w != cfg.image_size {
        return Err(Error::config(format!("image width {w} != image_size {}", cfg.image_size)));
    }
    if c != cfg.channels {
        return Err(Error::config(format!("image channels {c} != channels {}", cfg.channels)));
    }
    let ps = cfg.patch_size;
    let g = cfg.image_size / ps;
    let p = ps * ps * c;
    let mut out = Vec::with_capacity(images.len());
    let src = images.data();
    for n in 0..b {
        for gy in 0..g {
            for gx in 0..g {
                for py in 0..ps {
                    let y = gy * ps + py;
                    let start = ((n * h + y) * w + gx * ps) * c;
                    out.extend_from_slice(&src[start..start + ps * c]);
                }
            }
        }
    }
    Ok(PatchGrid {
        tokens: Tensor::from_parts(vec![b, g * g, p], out),
        rows: g,
        cols: g,
    })
}

pub fn unpatchify(grid: &PatchGrid, cfg: &ModelConfig) -> Result<Tensor> {
    let shape = grid.tokens.shape();
    let ps = cfg.patch_size;
    let c = cfg.channels;
    let g = cfg.image_size / ps;
    if shape.len() != 3 || grid.rows != g || grid.cols != g || shape[1] != g * g || shape[2] != ps * ps * c {
        return Err(Error::config(format!(
            "patch grid {:?} ({}x{}) inconsistent with image_size {}, patch_size {ps}, channels {c}",
            shape, grid.rows, grid.cols, cfg.image_size
        )));
    }
    let b = shape[0];
    let s = cfg.image_size;
    let mut out = vec![0.0; b * s * s * c];
    let src = grid.tokens.data();
    let p = ps * ps * c;
    for n in 0..b {
        for gy in 0..g {
            for gx in 0..g {
                let patch = &src[((n * g + gy) * g + gx) * p..((n * g + gy) * g + gx + 1) * p];
                for py in 0..ps {
                    let y = gy * ps + py;
                    let start = ((n * s + y) * s + gx * ps) * c;
                    out[start..start + ps * c].copy_from_slice(&patch[py * ps * c..(py + 1) * ps * c]);
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, s, s, c], out))
}
