//! Visual and tabular diagnostics: variation-swap grids, propensity-score
//! series, embedding exports, and a PCA projection.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use nalgebra::{DMatrix, SymmetricEigen};

use crate::datasets::{encode_png, MultiDomainDataset};
use crate::error::{Error, Result};
use crate::model::{patchify, random_masking, unpatchify, DisMae, MaskPlan, ParamStore, PatchGrid};
use crate::seeding::rng_for;
use crate::tensor::Tensor;
use crate::trainer::read_scalars;

/// Resolve item references: dataset ids (`red/3/0007.png`) or positional indices.
pub fn resolve_ids(ds: &MultiDomainDataset, refs: &[String]) -> Result<Vec<usize>> {
    refs.iter()
        .map(|r| {
            if let Some(i) = ds.items.iter().position(|it| it.id == *r) {
                return Ok(i);
            }
            match r.parse::<usize>() {
                Ok(i) if i < ds.len() => Ok(i),
                _ => Err(Error::data(format!("unknown item id {r:?}"))),
            }
        })
        .collect()
}

/// Mask plan of one dataset item, fixed by `(seed, item index)`.
fn item_plan(model: &DisMae, grid: &PatchGrid, seed: u64, item: usize) -> Result<MaskPlan> {
    let mut rng = rng_for(seed, "swap-mask", item as u64);
    Ok(random_masking(&grid.tokens, model.config().mask_ratio, &mut rng)?.1)
}

/// Reconstruction of item `i` decoded with the variation summary of item `j`,
/// shown MAE-style: predictions at masked positions, originals elsewhere.
/// Returns `[S, S, C]` pixels.
pub fn swap_reconstruction(
    model: &DisMae,
    params: &ParamStore,
    ds: &MultiDomainDataset,
    i: usize,
    j: usize,
    seed: u64,
) -> Result<Tensor> {
    let cfg = model.config();
    let gi = patchify(&ds.batch(&[i]).pixels, cfg)?;
    let gj = patchify(&ds.batch(&[j]).pixels, cfg)?;
    let pi = item_plan(model, &gi, seed, i)?;
    let pj = item_plan(model, &gj, seed, j)?;
    let li = model.latents(params, &gi, &pi)?;
    let cond = if cfg.use_variation {
        Some(
            model
                .latents(params, &gj, &pj)?
                .variation_cls
                .expect("variation branch enabled"),
        )
    } else {
        None
    };
    let pred = model.decode_tensors(params, &li.semantic_tokens, cond.as_ref(), &pi)?;
    let p = gi.patch_dim();
    let mut tokens = gi.tokens.clone();
    for &m in &pi.masked_idx[0] {
        tokens.data_mut()[m * p..(m + 1) * p].copy_from_slice(&pred.data()[m * p..(m + 1) * p]);
    }
    let img = unpatchify(
        &PatchGrid {
            tokens,
            rows: gi.rows,
            cols: gi.cols,
        },
        cfg,
    )?;
    img.reshape(vec![cfg.image_size, cfg.image_size, cfg.channels])
}

pub struct SwapGrid {
    /// `cells[r][c]` for row item `r` and column item `c`, `[S, S, C]`.
    pub cells: Vec<Vec<Tensor>>,
    pub image: RgbImage,
}

const GAP: u32 = 1;
const GAP_COLOR: Rgb<u8> = Rgb([128, 128, 128]);

fn blit(img: &mut RgbImage, pixels: &[f64], size: usize, channels: usize, x0: u32, y0: u32, scale: u32) {
    for y in 0..size {
        for x in 0..size {
            let base = (y * size + x) * channels;
            let px = |c: usize| {
                let v = pixels[base + if channels == 1 { 0 } else { c }];
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            };
            let color = Rgb([px(0), px(1), px(2)]);
            for dy in 0..scale {
                for dx in 0..scale {
                    img.put_pixel(x0 + x as u32 * scale + dx, y0 + y as u32 * scale + dy, color);
                }
            }
        }
    }
}

/// A `(rows + 1) x (cols + 1)` grid: column headers show the items that
/// donate `v0`, row headers the items that donate `s`.
pub fn swap_grid(
    model: &DisMae,
    params: &ParamStore,
    ds: &MultiDomainDataset,
    rows: &[usize],
    cols: &[usize],
    seed: u64,
    scale: u32,
) -> Result<SwapGrid> {
    if rows.is_empty() || cols.is_empty() {
        return Err(Error::config("swap grid needs at least one row and one column item"));
    }
    let s = ds.image_size;
    let ch = ds.channels;
    let cell = s as u32 * scale;
    let w = (cols.len() as u32 + 1) * (cell + GAP) + GAP;
    let h = (rows.len() as u32 + 1) * (cell + GAP) + GAP;
    let mut image = RgbImage::from_pixel(w, h, GAP_COLOR);
    let origin = |r: usize, c: usize| (GAP + c as u32 * (cell + GAP), GAP + r as u32 * (cell + GAP));
    // The corner stays blank.
    let blank = vec![1.0; s * s * ch];
    let (x, y) = origin(0, 0);
    blit(&mut image, &blank, s, ch, x, y, scale);
    for (c, &j) in cols.iter().enumerate() {
        let (x, y) = origin(0, c + 1);
        blit(&mut image, &ds.items[j].pixels, s, ch, x, y, scale);
    }
    let mut cells = Vec::with_capacity(rows.len());
    for (r, &i) in rows.iter().enumerate() {
        let (x, y) = origin(r + 1, 0);
        blit(&mut image, &ds.items[i].pixels, s, ch, x, y, scale);
        let mut row = Vec::with_capacity(cols.len());
        for (c, &j) in cols.iter().enumerate() {
            let px = swap_reconstruction(model, params, ds, i, j, seed)?;
            let (x, y) = origin(r + 1, c + 1);
            blit(&mut image, px.data(), s, ch, x, y, scale);
            row.push(px);
        }
        cells.push(row);
    }
    Ok(SwapGrid { cells, image })
}

pub fn write_png(img: &RgbImage, path: &Path) -> Result<()> {
    let bytes = encode_png(img.as_raw(), img.width() as usize, img.height() as usize)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Per-domain mean propensity series keyed by domain name.
pub fn score_series(run_dir: &Path) -> Result<BTreeMap<String, Vec<(usize, f64)>>> {
    let scalars = read_scalars(run_dir)?;
    let series: BTreeMap<String, Vec<(usize, f64)>> = scalars
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix("mean_p/").map(|d| (d.to_string(), v)))
        .collect();
    if series.is_empty() {
        return Err(Error::data(format!(
            "{} has no mean_p series in logs/scalars.csv",
            run_dir.display()
        )));
    }
    Ok(series)
}

pub fn scores_csv(series: &BTreeMap<String, Vec<(usize, f64)>>) -> String {
    let mut rows: Vec<(usize, &str, f64)> = series
        .iter()
        .flat_map(|(d, v)| v.iter().map(move |&(e, p)| (e, d.as_str(), p)))
        .collect();
    rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(b.1)));
    let mut out = String::from("epoch,domain,mean_p\n");
    for (e, d, p) in rows {
        let _ = writeln!(out, "{e},{d},{p}");
    }
    out
}

const PLOT_W: u32 = 640;
const PLOT_H: u32 = 400;
const MARGIN: u32 = 40;
const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [23, 190, 207],
];

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>, dash: Option<i64>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    let mut step = 0i64;
    loop {
        let on = dash.is_none_or(|d| (step / d) % 2 == 0);
        if on && x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
        step += 1;
    }
}

/// Line plot of the series on [0, 1] with a dashed reference at `reference`.
pub fn scores_plot(series: &BTreeMap<String, Vec<(usize, f64)>>, reference: f64) -> RgbImage {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let max_epoch = series.values().flatten().map(|p| p.0).max().unwrap_or(1).max(1);
    let (x_min, x_max) = (MARGIN as f64, (PLOT_W - MARGIN) as f64);
    let (y_top, y_bot) = (MARGIN as f64, (PLOT_H - MARGIN) as f64);
    let px = |e: usize, v: f64| {
        let x = x_min + (x_max - x_min) * e as f64 / max_epoch as f64;
        let y = y_bot - (y_bot - y_top) * v.clamp(0.0, 1.0);
        (x.round() as i64, y.round() as i64)
    };
    let axis = Rgb([0, 0, 0]);
    draw_line(&mut img, px(0, 0.0), px(max_epoch, 0.0), axis, None);
    draw_line(&mut img, px(0, 0.0), px(0, 1.0), axis, None);
    draw_line(&mut img, px(0, reference), px(max_epoch, reference), Rgb([100, 100, 100]), Some(6));
    for (k, points) in series.values().enumerate() {
        let color = Rgb(PALETTE[k % PALETTE.len()]);
        for w in points.windows(2) {
            draw_line(&mut img, px(w[0].0, w[0].1), px(w[1].0, w[1].1), color, None);
        }
        if let [only] = points.as_slice() {
            let (x, y) = px(only.0, only.1);
            draw_line(&mut img, (x - 2, y), (x + 2, y), color, None);
        }
    }
    img
}

/// CSV with header `id,domain,label,dim0,...`.
pub fn embeddings_csv(ds: &MultiDomainDataset, emb: &Tensor) -> Result<String> {
    if emb.rows() != ds.len() {
        return Err(Error::shape("embedding rows differ from dataset size"));
    }
    let mut out = String::from("id,domain,label");
    for d in 0..emb.last_dim() {
        let _ = write!(out, ",dim{d}");
    }
    out.push('\n');
    for (r, it) in ds.items.iter().enumerate() {
        let label = it.label.map(|l| ds.classes[l].clone()).unwrap_or_default();
        let _ = write!(out, "{},{},{}", it.id, ds.domains[it.domain], label);
        for v in emb.row(r) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `[N, dims]`
    pub coords: Tensor,
    /// `[dims, D]`, unit rows.
    pub components: Tensor,
    pub mean: Vec<f64>,
    /// Fraction of total variance captured by each component.
    pub explained: Vec<f64>,
}

/// Top principal components of the centered rows of `x`. Each component's
/// largest-magnitude entry is made positive.
pub fn pca_project(x: &Tensor, dims: usize) -> Result<Projection> {
    if x.shape().len() != 2 {
        return Err(Error::shape("pca expects a 2-D matrix"));
    }
    let (n, d) = (x.rows(), x.last_dim());
    if dims == 0 || dims > d {
        return Err(Error::config(format!("cannot project {d}-D data to {dims} dimensions")));
    }
    if n < dims {
        return Err(Error::data(format!("{n} samples are fewer than the {dims} requested dimensions")));
    }
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mean: Vec<f64> = (0..d).map(|j| m.column(j).mean()).collect();
    let mut c = m.clone();
    for j in 0..d {
        c.column_mut(j).add_scalar_mut(-mean[j]);
    }
    let cov = c.transpose() * &c / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut components = Vec::with_capacity(dims * d);
    let mut explained = Vec::with_capacity(dims);
    for &k in order.iter().take(dims) {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let pivot = v
            .iter()
            .copied()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map_or(1.0, |(_, x)| x);
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.extend(v);
        explained.push(if total > 0.0 { eig.eigenvalues[k].max(0.0) / total } else { 0.0 });
    }
    let comp = DMatrix::from_row_slice(dims, d, &components);
    let coords = &c * comp.transpose();
    let mut flat = Vec::with_capacity(n * dims);
    for r in 0..n {
        flat.extend(coords.row(r).iter());
    }
    Ok(Projection {
        coords: Tensor::new(vec![n, dims], flat)?,
        components: Tensor::new(vec![dims, d], components)?,
        mean,
        explained,
    })
}
