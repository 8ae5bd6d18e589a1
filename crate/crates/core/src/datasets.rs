//! Multi-domain image datasets: the procedural colored-glyph generator,
//! folder ingestion, stratified splits, and domain-balanced batching.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{ImageEncoder, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seeding::rng_for;
use crate::tensor::Tensor;

/// 5x7 bitmaps for the digit glyphs, top row first.
const GLYPHS: [[&str; 7]; 10] = [
    ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
];

/// Minimum channel-wise (Chebyshev) distance between colors of different domains.
pub const MIN_PALETTE_DISTANCE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Palette {
    pub name: String,
    pub foreground: Vec<[f64; 3]>,
    pub background: Vec<[f64; 3]>,
    #[serde(default)]
    pub texture: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FactorSpec {
    pub num_classes: usize,
    pub domains: Vec<Palette>,
    pub samples_per_class_per_domain: usize,
    pub image_size: usize,
    pub noise_std: f64,
    pub seed: u64,
}

fn palette(name: &str, fg: [[f64; 3]; 2], bg: [[f64; 3]; 2]) -> Palette {
    Palette {
        name: name.to_string(),
        foreground: fg.to_vec(),
        background: bg.to_vec(),
        texture: false,
    }
}

impl Default for FactorSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            domains: vec![
                palette("red", [[0.95, 0.25, 0.20], [0.85, 0.40, 0.35]], [[0.40, 0.05, 0.05], [0.30, 0.10, 0.15]]),
                palette("green", [[0.25, 0.95, 0.30], [0.45, 0.85, 0.35]], [[0.05, 0.40, 0.10], [0.10, 0.30, 0.05]]),
                palette("blue", [[0.30, 0.45, 0.95], [0.45, 0.35, 0.90]], [[0.05, 0.10, 0.40], [0.08, 0.05, 0.32]]),
                palette("yellow", [[0.95, 0.90, 0.20], [0.90, 0.80, 0.35]], [[0.40, 0.35, 0.05], [0.32, 0.32, 0.08]]),
            ],
            samples_per_class_per_domain: 20,
            image_size: 16,
            noise_std: 0.0,
            seed: 0,
        }
    }
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl FactorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.domains.len() < 2 {
            return Err(Error::config("at least 2 domains are required"));
        }
        if self.num_classes == 0 || self.num_classes > GLYPHS.len() {
            return Err(Error::config(format!(
                "num_classes {} must be in 1..={}",
                self.num_classes,
                GLYPHS.len()
            )));
        }
        if self.image_size < 7 {
            return Err(Error::config("image_size must be >= 7 to render a glyph"));
        }
        if self.samples_per_class_per_domain == 0 {
            return Err(Error::config("samples_per_class_per_domain must be >= 1"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("noise_std must be >= 0"));
        }
        let mut names: Vec<&str> = self.domains.iter().map(|d| d.name.as_str()).collect();
        for n in &names {
            if !valid_name(n) {
                return Err(Error::config(format!("domain name {n:?} must be [A-Za-z0-9_-]+")));
            }
        }
        names.sort_unstable();
        names.dedup();
        if names.len() != self.domains.len() {
            return Err(Error::config("domain names must be unique"));
        }
        for d in &self.domains {
            if d.foreground.is_empty() || d.background.is_empty() {
                return Err(Error::config(format!("palette {} needs foreground and background colors", d.name)));
            }
            if d.foreground.iter().chain(&d.background).flatten().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::config(format!("palette {} has a channel outside [0, 1]", d.name)));
            }
        }
        for (i, a) in self.domains.iter().enumerate() {
            for b in &self.domains[i + 1..] {
                for ca in a.foreground.iter().chain(&a.background) {
                    for cb in b.foreground.iter().chain(&b.background) {
                        let dist = (0..3).map(|k| (ca[k] - cb[k]).abs()).fold(0.0, f64::max);
                        if dist < MIN_PALETTE_DISTANCE - 1e-12 {
                            return Err(Error::config(format!(
                                "palettes {} and {} are not disjoint: colors {:?} and {:?} differ by at most {:.3} per channel (need >= {})",
                                a.name, b.name, ca, cb, dist, MIN_PALETTE_DISTANCE
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    /// Path relative to the dataset root, e.g. `red/3/0007.png`.
    pub id: String,
    pub domain: usize,
    pub label: Option<usize>,
    /// `[S, S, C]` values in `[0, 1]`.
    pub pixels: Arc<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiDomainDataset {
    pub items: Vec<Item>,
    pub domains: Vec<String>,
    pub classes: Vec<String>,
    pub image_size: usize,
    pub channels: usize,
}

/// A stacked batch of dataset items.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    /// `[B, S, S, C]`
    pub pixels: Tensor,
    pub domains: Vec<usize>,
    pub labels: Option<Vec<usize>>,
    /// Positions of the batch items in the source dataset.
    pub indices: Vec<usize>,
}

impl MultiDomainDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn is_labeled(&self) -> bool {
        !self.items.is_empty() && self.items.iter().all(|i| i.label.is_some())
    }

    pub fn domain_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.domains.len()];
        for it in &self.items {
            counts[it.domain] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
            domains: self.domains.clone(),
            classes: self.classes.clone(),
            image_size: self.image_size,
            channels: self.channels,
        }
    }

    /// Keep only the named domains, re-indexed in lexicographic order.
    pub fn filter_domains(&self, names: &[String]) -> Result<Self> {
        let mut keep: Vec<String> = names.to_vec();
        keep.sort();
        keep.dedup();
        let mut remap = BTreeMap::new();
        for (new, name) in keep.iter().enumerate() {
            let old = self
                .domains
                .iter()
                .position(|d| d == name)
                .ok_or_else(|| Error::config(format!("unknown domain {name:?} (have {:?})", self.domains)))?;
            remap.insert(old, new);
        }
        let items = self
            .items
            .iter()
            .filter_map(|it| {
                remap.get(&it.domain).map(|&d| Item {
                    domain: d,
                    ..it.clone()
                })
            })
            .collect();
        Ok(Self {
            items,
            domains: keep,
            classes: self.classes.clone(),
            image_size: self.image_size,
            channels: self.channels,
        })
    }

    /// Everything except the named domains.
    pub fn without_domains(&self, names: &[String]) -> Result<Self> {
        for n in names {
            if !self.domains.contains(n) {
                return Err(Error::config(format!("unknown domain {n:?} (have {:?})", self.domains)));
            }
        }
        let rest: Vec<String> = self.domains.iter().filter(|d| !names.contains(d)).cloned().collect();
        self.filter_domains(&rest)
    }

    pub fn batch(&self, indices: &[usize]) -> ImageBatch {
        let per = self.image_size * self.image_size * self.channels;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.items[i].pixels);
        }
        let labels = indices
            .iter()
            .map(|&i| self.items[i].label)
            .collect::<Option<Vec<_>>>();
        ImageBatch {
            pixels: Tensor::from_parts(
                vec![indices.len(), self.image_size, self.image_size, self.channels],
                data,
            ),
            domains: indices.iter().map(|&i| self.items[i].domain).collect(),
            labels,
            indices: indices.to_vec(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub path: String,
    pub domain: String,
    pub class: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub spec: FactorSpec,
    pub files: Vec<ManifestEntry>,
}

fn render(spec: &FactorSpec, pal: &Palette, class: usize, rng: &mut impl Rng) -> Vec<u8> {
    let s = spec.image_size;
    let fg = pal.foreground[rng.random_range(0..pal.foreground.len())];
    let bg = pal.background[rng.random_range(0..pal.background.len())];
    let jitter = (s as f64 * 0.1).floor() as i64;
    let dx = rng.random_range(-jitter..=jitter);
    let dy = rng.random_range(-jitter..=jitter);
    let gw = ((s as f64) * 0.5).round() as i64;
    let gh = ((s as f64) * 0.7).round() as i64;
    let x0 = (s as i64 - gw) / 2 + dx;
    let y0 = (s as i64 - gh) / 2 + dy;
    let glyph = &GLYPHS[class];
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("finite noise");
    let mut out = Vec::with_capacity(s * s * 3);
    for y in 0..s as i64 {
        for x in 0..s as i64 {
            let u = ((x - x0) as f64 + 0.5) / gw as f64 * 5.0;
            let v = ((y - y0) as f64 + 0.5) / gh as f64 * 7.0;
            let on = (0.0..5.0).contains(&u)
                && (0.0..7.0).contains(&v)
                && glyph[v as usize].as_bytes()[u as usize] == b'1';
            let mut color = if on { fg } else { bg };
            if !on && pal.texture && ((x + y) / 2) % 2 == 0 {
                color = [color[0] * 0.75, color[1] * 0.75, color[2] * 0.75];
            }
            for c in color {
                let mut val = c;
                if spec.noise_std > 0.0 {
                    val += noise.sample(rng);
                }
                out.push((val.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

pub fn encode_png(rgb: &[u8], width: usize, height: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    image::codecs::png::PngEncoder::new(&mut buf)
        .write_image(rgb, width as u32, height as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Image {
            path: PathBuf::from("<memory>"),
            source: e,
        })?;
    Ok(buf)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn u8_to_unit(bytes: &[u8]) -> Vec<f64> {
    bytes.iter().map(|&b| f64::from(b) / 255.0).collect()
}

/// Render the dataset in memory; when `out` is given, also write
/// `out/<domain>/<class>/NNNN.png` and `out/manifest.json`.
pub fn generate_factored_dataset(spec: &FactorSpec, out: Option<&Path>) -> Result<MultiDomainDataset> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, "generate", 0);
    let s = spec.image_size;
    let mut rendered: Vec<(String, usize, usize, Vec<u8>)> = Vec::new();
    for pal in &spec.domains {
        for class in 0..spec.num_classes {
            for k in 0..spec.samples_per_class_per_domain {
                rendered.push((pal.name.clone(), class, k, render(spec, pal, class, &mut rng)));
            }
        }
    }
    rendered.sort_by(|a, b| (&a.0, a.1, a.2).cmp(&(&b.0, b.1, b.2)));

    let mut domains: Vec<String> = spec.domains.iter().map(|d| d.name.clone()).collect();
    domains.sort();
    let classes: Vec<String> = (0..spec.num_classes).map(|c| c.to_string()).collect();
    let mut items = Vec::with_capacity(rendered.len());
    let mut files = Vec::with_capacity(rendered.len());
    for (name, class, k, rgb) in &rendered {
        let id = format!("{name}/{class}/{k:04}.png");
        if let Some(root) = out {
            let png = encode_png(rgb, s, s)?;
            let path = root.join(&id);
            let dir = path.parent().expect("file has a parent");
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            fs::write(&path, &png).map_err(|e| Error::io(&path, e))?;
            files.push(ManifestEntry {
                path: id.clone(),
                domain: name.clone(),
                class: class.to_string(),
                sha256: sha256_hex(&png),
            });
        }
        items.push(Item {
            id,
            domain: domains.iter().position(|d| d == name).expect("known domain"),
            label: Some(*class),
            pixels: Arc::new(u8_to_unit(rgb)),
        });
    }
    if let Some(root) = out {
        let manifest = DatasetManifest {
            spec: spec.clone(),
            files,
        };
        let path = root.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(MultiDomainDataset {
        items,
        domains,
        classes,
        image_size: s,
        channels: 3,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    /// Non-PNG files that were ignored.
    pub skipped_files: usize,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(e.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn is_png(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Load `root/<domain>/[<class>/]*.png`. Domain and class indices are the
/// lexicographic ranks of their directory names.
pub fn load_image_folders(root: &Path, labeled: bool) -> Result<(MultiDomainDataset, LoadReport)> {
    let mut report = LoadReport::default();
    let domain_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if domain_dirs.is_empty() {
        return Err(Error::data(format!("no domain directories under {}", root.display())));
    }
    let domains: Vec<String> = domain_dirs.iter().map(|p| file_name(p)).collect();

    // (domain index, class name, file path)
    let mut found: Vec<(usize, Option<String>, PathBuf)> = Vec::new();
    for (d, dir) in domain_dirs.iter().enumerate() {
        let entries = sorted_entries(dir)?;
        let subdirs: Vec<&PathBuf> = entries.iter().filter(|p| p.is_dir()).collect();
        let loose_pngs = entries.iter().filter(|p| p.is_file() && is_png(p)).count();
        if labeled {
            if loose_pngs > 0 {
                return Err(Error::data(format!(
                    "mixed layout: labeled mode expects class subdirectories, but {} has {loose_pngs} images directly inside",
                    dir.display()
                )));
            }
            report.skipped_files += entries.iter().filter(|p| p.is_file()).count();
            for class_dir in subdirs {
                for f in sorted_entries(class_dir)? {
                    if f.is_file() && is_png(&f) {
                        found.push((d, Some(file_name(class_dir)), f));
                    } else {
                        report.skipped_files += 1;
                    }
                }
            }
        } else {
            if !subdirs.is_empty() {
                return Err(Error::data(format!(
                    "mixed layout: unlabeled mode expects images directly in {}, found subdirectories",
                    dir.display()
                )));
            }
            for f in entries {
                if is_png(&f) {
                    found.push((d, None, f));
                } else {
                    report.skipped_files += 1;
                }
            }
        }
        if !found.iter().any(|(dd, _, _)| *dd == d) {
            return Err(Error::data(format!("domain directory {} contains no images", dir.display())));
        }
    }
    let mut classes: Vec<String> = found.iter().filter_map(|(_, c, _)| c.clone()).collect();
    classes.sort();
    classes.dedup();

    let mut items = Vec::with_capacity(found.len());
    let mut size = None;
    for (d, class, path) in found {
        let img = image::open(&path)
            .map_err(|e| Error::Image {
                path: path.clone(),
                source: e,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        if w != h {
            return Err(Error::data(format!("{} is not square ({w}x{h})", path.display())));
        }
        match size {
            None => size = Some(w as usize),
            Some(s) if s != w as usize => {
                return Err(Error::data(format!(
                    "{} is {w}px but earlier images are {s}px",
                    path.display()
                )))
            }
            _ => {}
        }
        let id = path
            .strip_prefix(root)
            .unwrap_or(&path)
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/");
        items.push(Item {
            id,
            domain: d,
            label: class.map(|c| classes.iter().position(|x| *x == c).expect("class listed")),
            pixels: Arc::new(u8_to_unit(img.as_raw())),
        });
    }
    if report.skipped_files > 0 {
        log::warn!("skipped {} non-image files under {}", report.skipped_files, root.display());
    }
    Ok((
        MultiDomainDataset {
            items,
            domains,
            classes,
            image_size: size.unwrap_or(0),
            channels: 3,
        },
        report,
    ))
}

/// Quantize `[S, S, 3]` unit values to an RGB image.
pub fn to_rgb_image(pixels: &[f64], width: usize, height: usize) -> RgbImage {
    let bytes = pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    RgbImage::from_raw(width as u32, height as u32, bytes).expect("buffer matches dimensions")
}

fn strata(ds: &MultiDomainDataset) -> BTreeMap<(usize, Option<usize>), Vec<usize>> {
    let mut map: BTreeMap<(usize, Option<usize>), Vec<usize>> = BTreeMap::new();
    for (i, it) in ds.items.iter().enumerate() {
        map.entry((it.domain, it.label)).or_default().push(i);
    }
    map
}

fn stratum_name(ds: &MultiDomainDataset, key: &(usize, Option<usize>)) -> String {
    match key.1 {
        Some(c) => format!("{}/{}", ds.domains[key.0], ds.classes.get(c).map_or("?", String::as_str)),
        None => ds.domains[key.0].clone(),
    }
}

/// Stratified (domain, class) split; returns `(train, val)`.
pub fn split_train_val(
    ds: &MultiDomainDataset,
    val_fraction: f64,
    seed: u64,
) -> Result<(MultiDomainDataset, MultiDomainDataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::config(format!("val_fraction {val_fraction} must be in (0, 1)")));
    }
    let mut rng = rng_for(seed, "split", 0);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (key, mut members) in strata(ds) {
        if members.len() < 2 {
            return Err(Error::data(format!(
                "stratum {} has {} item(s); splitting needs at least 2",
                stratum_name(ds, &key),
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let n_val = ((members.len() as f64 * val_fraction).round() as usize).clamp(1, members.len() - 1);
        val.extend_from_slice(&members[..n_val]);
        train.extend_from_slice(&members[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((ds.subset(&train), ds.subset(&val)))
}

/// Stratified subset with `round(fraction * N)` items, at least one per
/// (domain, class) stratum, remainder apportioned by largest fractional quota.
pub fn stratified_subset(ds: &MultiDomainDataset, fraction: f64, seed: u64) -> Result<MultiDomainDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("label fraction {fraction} must be in (0, 1]")));
    }
    let groups = strata(ds);
    let target = (fraction * ds.len() as f64).round() as usize;
    if target < groups.len() {
        return Err(Error::data(format!(
            "label fraction {fraction} selects {target} items, fewer than the {} (domain, class) strata; some stratum would be empty",
            groups.len()
        )));
    }
    let mut alloc: Vec<(usize, f64)> = groups
        .values()
        .map(|m| {
            let q = fraction * m.len() as f64;
            let base = (q.floor() as usize).clamp(1, m.len());
            (base, q - q.floor())
        })
        .collect();
    let mut total: usize = alloc.iter().map(|a| a.0).sum();
    let sizes: Vec<usize> = groups.values().map(Vec::len).collect();
    let mut order: Vec<usize> = (0..alloc.len()).collect();
    order.sort_by(|&a, &b| alloc[b].1.total_cmp(&alloc[a].1).then(a.cmp(&b)));
    let mut k = 0;
    while total < target && k < order.len() * 2 {
        let g = order[k % order.len()];
        if alloc[g].0 < sizes[g] {
            alloc[g].0 += 1;
            total += 1;
        }
        k += 1;
    }
    let mut rng = rng_for(seed, "label-subset", 0);
    let mut picked = Vec::with_capacity(total);
    for ((_, mut members), (n, _)) in groups.into_iter().zip(alloc) {
        members.shuffle(&mut rng);
        picked.extend_from_slice(&members[..n]);
    }
    picked.sort_unstable();
    Ok(ds.subset(&picked))
}

/// Batches holding exactly `per_domain` items from every domain; shuffling is
/// a pure function of `(seed, epoch)` and trailing remainders are dropped.
pub fn domain_balanced_batches(
    ds: &MultiDomainDataset,
    per_domain: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    if per_domain == 0 {
        return Err(Error::config("per-domain batch size must be >= 1"));
    }
    let mut by_domain: Vec<Vec<usize>> = vec![Vec::new(); ds.num_domains()];
    for (i, it) in ds.items.iter().enumerate() {
        by_domain[it.domain].push(i);
    }
    for (d, members) in by_domain.iter().enumerate() {
        if members.len() < per_domain {
            return Err(Error::data(format!(
                "domain {} has {} items, fewer than the per-domain batch of {per_domain}",
                ds.domains[d],
                members.len()
            )));
        }
    }
    let mut rng = rng_for(seed, "batches", epoch as u64);
    for members in by_domain.iter_mut() {
        members.shuffle(&mut rng);
    }
    let n_batches = by_domain.iter().map(|m| m.len() / per_domain).min().unwrap_or(0);
    Ok((0..n_batches)
        .map(|b| {
            by_domain
                .iter()
                .flat_map(|m| m[b * per_domain..(b + 1) * per_domain].iter().copied())
                .collect()
        })
        .collect())
}
