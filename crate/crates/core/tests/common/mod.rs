#![allow(dead_code)]

use std::fs;
use std::path::Path;

use dismae::datasets::{generate_factored_dataset, FactorSpec, MultiDomainDataset};
use dismae::model::{DisMae, ModelConfig, ParamStore};
use dismae::seeding::rng_for;
use dismae::tensor::Tensor;
use rand::Rng;

/// Plain-loop reference implementations. Nothing here calls into the
/// library's loss code.
pub mod oracle {
    pub fn rmse(diffs: &[f64]) -> f64 {
        let mut s = 0.0;
        for d in diffs {
            s += d * d;
        }
        (s / diffs.len() as f64).sqrt()
    }

    pub fn gamma_loss(dists: &[f64], gamma: f64) -> f64 {
        let mut s = 0.0;
        for &d in dists {
            if d > gamma {
                s += d - gamma;
            }
        }
        s / dists.len() as f64
    }

    pub fn sim(dist: f64, gamma: f64) -> f64 {
        if dist > gamma {
            gamma - dist
        } else {
            0.0
        }
    }

    /// Direct `-ln(e^{a/τ} / Σ e^{·/τ})` without any stabilisation.
    pub fn contrastive(pos: f64, negs: &[f64], tau: f64) -> f64 {
        if negs.is_empty() {
            return 0.0;
        }
        let num = (pos / tau).exp();
        let mut den = num;
        for n in negs {
            den += (n / tau).exp();
        }
        -(num / den).ln()
    }

    pub fn propensity(row: &[f64], d: usize, clamp: f64) -> f64 {
        if row[d] < clamp {
            clamp
        } else {
            row[d]
        }
    }

    pub fn weighted_mean(terms: &[f64], weights: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..terms.len() {
            s += terms[i] * weights[i];
        }
        s / terms.len() as f64
    }

    pub fn cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
        let mut s = 0.0;
        for (row, &y) in logits.iter().zip(labels) {
            let mut z = 0.0;
            for v in row {
                z += v.exp();
            }
            s += z.ln() - row[y];
        }
        s / labels.len() as f64
    }

    pub fn softmax(row: &[f64]) -> Vec<f64> {
        let mut z = 0.0;
        for v in row {
            z += v.exp();
        }
        row.iter().map(|v| v.exp() / z).collect()
    }
}

/// Every parameter jittered so no tensor sits at an init-time special value
/// (zero heads, unit norms).
pub fn jittered_params(model: &DisMae, seed: u64, std: f64) -> ParamStore {
    let mut rng = rng_for(seed, "test-init", 0);
    let mut p = model.init_params(&mut rng);
    let names: Vec<String> = p.names().cloned().collect();
    for n in names {
        for v in p.get_mut(&n).unwrap().data_mut() {
            *v += std * (rng.random::<f64>() * 2.0 - 1.0);
        }
    }
    p
}

pub fn random_images(b: usize, size: usize, channels: usize, seed: u64) -> Tensor {
    let mut rng = rng_for(seed, "test-images", 0);
    let data = (0..b * size * size * channels).map(|_| rng.random::<f64>()).collect();
    Tensor::new(vec![b, size, size, channels], data).unwrap()
}

/// Three small colour domains (red, green, blue), 8px glyphs.
pub fn small_spec(classes: usize, per_class: usize) -> FactorSpec {
    let mut spec = FactorSpec {
        num_classes: classes,
        samples_per_class_per_domain: per_class,
        image_size: 8,
        ..Default::default()
    };
    spec.domains.retain(|d| d.name != "yellow");
    spec
}

pub fn small_dataset(classes: usize, per_class: usize) -> MultiDomainDataset {
    generate_factored_dataset(&small_spec(classes, per_class), None).unwrap()
}

/// A small model for 8px images with 4 patches.
pub fn small_model(num_domains: usize, num_classes: usize) -> ModelConfig {
    ModelConfig {
        image_size: 8,
        channels: 3,
        patch_size: 4,
        embed_dim: 8,
        semantic_depth: 1,
        variation_depth: 1,
        decoder_depth: 1,
        decoder_dim: 8,
        num_heads: 2,
        mlp_ratio: 2,
        mask_ratio: 0.5,
        num_domains,
        num_classes,
        use_variation: true,
    }
}

/// Relative `(file name, bytes)` listing of a directory tree.
pub fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
