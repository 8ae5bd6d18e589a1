//! Label-efficient adaptation (linear probe or full finetune), accuracy
//! metrics, the domain-decodability probe, and the ablation grid runner.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::TrainedState;
use crate::datasets::{stratified_subset, MultiDomainDataset};
use crate::error::{Error, Result};
use crate::model::{patchify, random_masking, Binder, DisMae, MaskPlan, ModelConfig, ParamGroup, ParamStore};
use crate::objectives::{LossConfig, NegativesScope, WeightMode};
use crate::optim::{clip_global_norm, AdamWConfig, AdamWState, SgdConfig, SgdState};
use crate::seeding::rng_for;
use crate::tensor::{argmax, Tensor};
use crate::trainer::{TrainConfig, Trainer};

/// Rows per forward pass when embedding whole datasets.
const EMBED_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub overall: f64,
    pub average: f64,
    pub per_domain: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl Metrics {
    /// Build from per-domain `(name, correct, total)` counts.
    ///
    /// The average is formed as a single integer ratio when it fits, so that
    /// round-number cases come out exactly.
    pub fn from_counts(rows: &[(String, usize, usize)]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::data("metrics over zero test domains"));
        }
        let mut per_domain = BTreeMap::new();
        let mut counts = BTreeMap::new();
        for (name, c, n) in rows {
            if *n == 0 || c > n {
                return Err(Error::data(format!("domain {name}: {c} correct of {n}")));
            }
            per_domain.insert(name.clone(), *c as f64 / *n as f64);
            counts.insert(name.clone(), *n);
        }
        let correct: usize = rows.iter().map(|r| r.1).sum();
        let total: usize = rows.iter().map(|r| r.2).sum();
        let k = rows.len() as u128;
        let lcm = rows
            .iter()
            .try_fold(1u128, |l, r| {
                let n = r.2 as u128;
                (l / gcd(l, n)).checked_mul(n)
            });
        let average = match lcm {
            Some(l) if l.checked_mul(k).is_some_and(|d| d < (1 << 53)) => {
                let num: u128 = rows.iter().map(|r| r.1 as u128 * (l / r.2 as u128)).sum();
                num as f64 / (l * k) as f64
            }
            _ => per_domain.values().sum::<f64>() / k as f64,
        };
        Ok(Self {
            overall: correct as f64 / total as f64,
            average,
            per_domain,
            counts,
        })
    }

    pub fn from_predictions(pred: &[usize], truth: &[usize], domains: &[usize], names: &[String]) -> Result<Self> {
        if pred.len() != truth.len() || pred.len() != domains.len() {
            return Err(Error::shape("predictions, labels and domains differ in length"));
        }
        let mut tally = vec![(0usize, 0usize); names.len()];
        for ((p, t), &d) in pred.iter().zip(truth).zip(domains) {
            let slot = tally
                .get_mut(d)
                .ok_or_else(|| Error::data(format!("domain index {d} out of range")))?;
            slot.1 += 1;
            if p == t {
                slot.0 += 1;
            }
        }
        let rows: Vec<_> = names
            .iter()
            .zip(tally)
            .filter(|(_, (_, n))| *n > 0)
            .map(|(name, (c, n))| (name.clone(), c, n))
            .collect();
        Self::from_counts(&rows)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adaptation {
    LinearProbe,
    FullFinetune,
}

impl Adaptation {
    /// Fractions strictly below the threshold probe; the threshold itself finetunes.
    pub fn for_fraction(fraction: f64, threshold: f64) -> Self {
        if fraction < threshold {
            Adaptation::LinearProbe
        } else {
            Adaptation::FullFinetune
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub label_fraction: f64,
    pub probe_threshold: f64,
    pub epochs: usize,
    pub seed: u64,
    pub batch_size: usize,
    /// Overrides the table-derived learning rate when set.
    pub lr: Option<f64>,
    pub probe_momentum: f64,
    pub probe_weight_decay: f64,
    pub finetune: AdamWConfig,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            label_fraction: 0.05,
            probe_threshold: 0.10,
            epochs: 50,
            seed: 0,
            batch_size: 32,
            lr: None,
            probe_momentum: 0.9,
            probe_weight_decay: 0.0,
            finetune: AdamWConfig::default(),
        }
    }
}

/// Reference (label fraction, learning rate, batch size) rows.
pub const REFERENCE_RATES: [(f64, f64, usize); 4] = [(0.01, 0.025, 96), (0.05, 0.05, 192), (0.10, 5e-5, 36), (1.0, 5e-5, 36)];

/// How the adaptation learning rate was chosen; written to `logs/protocol.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrMapping {
    pub adaptation: Adaptation,
    pub label_fraction: f64,
    pub reference_fraction: f64,
    pub reference_lr: f64,
    pub reference_batch: usize,
    pub batch: usize,
    pub lr: f64,
    pub overridden: bool,
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::config(format!(
                "eval.label_fraction {} must be in (0, 1]",
                self.label_fraction
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("eval.epochs and eval.batch_size must be >= 1"));
        }
        if self.lr.is_some_and(|lr| !(lr > 0.0)) {
            return Err(Error::config("eval.lr must be > 0"));
        }
        Ok(())
    }

    pub fn adaptation(&self) -> Adaptation {
        Adaptation::for_fraction(self.label_fraction, self.probe_threshold)
    }

    /// Reference row of the same adaptation kind nearest in log-fraction,
    /// lr scaled by batch ratio.
    pub fn lr_mapping(&self) -> LrMapping {
        let kind = self.adaptation();
        let (rf, rlr, rb) = REFERENCE_RATES
            .iter()
            .copied()
            .filter(|r| Adaptation::for_fraction(r.0, self.probe_threshold) == kind)
            .min_by(|a, b| {
                let da = (a.0.ln() - self.label_fraction.ln()).abs();
                let db = (b.0.ln() - self.label_fraction.ln()).abs();
                da.total_cmp(&db)
            })
            .unwrap_or(REFERENCE_RATES[0]);
        let scaled = if self.batch_size == rb { rlr } else { rlr * self.batch_size as f64 / rb as f64 };
        LrMapping {
            adaptation: self.adaptation(),
            label_fraction: self.label_fraction,
            reference_fraction: rf,
            reference_lr: rlr,
            reference_batch: rb,
            batch: self.batch_size,
            lr: self.lr.unwrap_or(scaled),
            overridden: self.lr.is_some(),
        }
    }
}

pub fn select_labeled_subset(ds: &MultiDomainDataset, fraction: f64, seed: u64) -> Result<MultiDomainDataset> {
    if !ds.is_labeled() {
        return Err(Error::data("label selection needs a labeled dataset"));
    }
    stratified_subset(ds, fraction, seed)
}

/// `s0` (or `v0`) for every item, computed over full unmasked images.
pub fn embed_dataset(model: &DisMae, params: &ParamStore, ds: &MultiDomainDataset, variation: bool) -> Result<Tensor> {
    let h = model.config().embed_dim;
    let mut data = Vec::with_capacity(ds.len() * h);
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(EMBED_CHUNK) {
        let batch = ds.batch(chunk);
        let grid = patchify(&batch.pixels, model.config())?;
        let lat = model.embed_full(params, &grid)?;
        let t = if variation {
            lat.variation_cls
                .ok_or_else(|| Error::config("the variation branch is disabled in this model"))?
        } else {
            lat.semantic_cls
        };
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![ds.len(), h], data)
}

fn labels_of(ds: &MultiDomainDataset) -> Result<Vec<usize>> {
    ds.items
        .iter()
        .map(|it| it.label)
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::data("adaptation needs labels on every item"))
}

fn gather(features: &Tensor, idx: &[usize]) -> Tensor {
    let w = features.last_dim();
    let mut data = Vec::with_capacity(idx.len() * w);
    for &i in idx {
        data.extend_from_slice(features.row(i));
    }
    Tensor::from_parts(vec![idx.len(), w], data)
}

/// Per-dimension standardization fitted on one set of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Constant dimensions get a unit scale.
    pub fn fit(features: &Tensor) -> Self {
        let (n, f) = (features.rows(), features.last_dim());
        let mut mean = vec![0.0; f];
        for r in 0..n {
            for (m, x) in mean.iter_mut().zip(features.row(r)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
        let mut std = vec![0.0; f];
        for r in 0..n {
            for ((s, m), x) in std.iter_mut().zip(&mean).zip(features.row(r)) {
                *s += (x - m).powi(2);
            }
        }
        for s in std.iter_mut() {
            *s = (*s / n.max(1) as f64).sqrt();
            if *s < 1e-12 {
                *s = 1.0;
            }
        }
        Self { mean, std }
    }

    pub fn apply(&self, features: &Tensor) -> Tensor {
        let mut t = features.clone();
        let f = self.mean.len();
        for row in t.data_mut().chunks_mut(f) {
            for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - m) / s;
            }
        }
        t
    }

    /// Rewrite an affine head trained on standardized inputs so it acts on raw inputs.
    pub fn fold_into(&self, w: &mut Tensor, b: &mut Tensor) {
        let c = b.len();
        let wd = w.data_mut();
        let bd = b.data_mut();
        for (j, (m, s)) in self.mean.iter().zip(&self.std).enumerate() {
            for k in 0..c {
                wd[j * c + k] /= s;
                bd[k] -= m * wd[j * c + k];
            }
        }
    }
}

/// Result of adapting a pretrained state on labeled data.
#[derive(Clone, Debug)]
pub struct Adapted {
    pub params: ParamStore,
    pub mapping: LrMapping,
    /// Mean training cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
}

fn check_labels(model: &DisMae, labels: &[usize]) -> Result<()> {
    let c = model.config().num_classes;
    if c == 0 {
        return Err(Error::config(
            "model.num_classes is 0 (unlabeled mode); set it to the class count before adaptation",
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::data(format!("class index {bad} is outside the head's {c} classes")));
    }
    Ok(())
}

/// Train a fresh label head on frozen `s0` features.
pub fn linear_probe(
    model: &DisMae,
    state: &TrainedState,
    labeled: &MultiDomainDataset,
    cfg: &ProtocolConfig,
) -> Result<Adapted> {
    cfg.validate()?;
    if cfg.adaptation() != Adaptation::LinearProbe {
        return Err(Error::config(format!(
            "label fraction {} is at or above the probe threshold {}; use full finetuning",
            cfg.label_fraction, cfg.probe_threshold
        )));
    }
    let labels = labels_of(labeled)?;
    check_labels(model, &labels)?;
    let mapping = cfg.lr_mapping();
    let raw = embed_dataset(model, &state.params, labeled, false)?;
    let norm = Standardizer::fit(&raw);
    let features = norm.apply(&raw);
    let mut params = state.params.clone();
    model.reset_label_head(&mut params, model.config().num_classes);
    let sgd_cfg = SgdConfig {
        lr: mapping.lr,
        momentum: cfg.probe_momentum,
        weight_decay: cfg.probe_weight_decay,
    };
    let mut sgd = SgdState::default();
    let mut rng = rng_for(cfg.seed, "probe", 0);
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = gather(&features, chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let mut binder = Binder::new(&params, &[ParamGroup::LabelHead]);
            let xv = tape.constant(x);
            let logits = model.label_logits(&mut tape, &mut binder, xv)?;
            let ce = tape.softmax_cross_entropy(logits, &y);
            sum += tape.value(ce).item();
            steps += 1;
            let mut raw = tape.backward(ce);
            let grads = binder.collect_grads(&mut raw);
            drop(binder);
            sgd.update(&sgd_cfg, &mut params, &grads);
        }
        epoch_losses.push(sum / steps as f64);
    }
    let mut w = params.remove("label_head.w").expect("label head");
    let mut b = params.remove("label_head.b").expect("label head");
    norm.fold_into(&mut w, &mut b);
    params.insert("label_head.w", w);
    params.insert("label_head.b", b);
    Ok(Adapted {
        params,
        mapping,
        epoch_losses,
    })
}

/// Supervised training of the semantic encoder and label head on full images.
pub fn full_finetune(
    model: &DisMae,
    state: &TrainedState,
    labeled: &MultiDomainDataset,
    cfg: &ProtocolConfig,
) -> Result<Adapted> {
    cfg.validate()?;
    if cfg.adaptation() != Adaptation::FullFinetune {
        return Err(Error::config(format!(
            "label fraction {} is below the probe threshold {}; use the linear probe",
            cfg.label_fraction, cfg.probe_threshold
        )));
    }
    let labels = labels_of(labeled)?;
    check_labels(model, &labels)?;
    let mapping = cfg.lr_mapping();
    let mut params = state.params.clone();
    model.reset_label_head(&mut params, model.config().num_classes);
    let mut adam = AdamWState::default();
    let mut rng = rng_for(cfg.seed, "finetune", 0);
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let groups = [ParamGroup::Semantic, ParamGroup::LabelHead];
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = labeled.batch(chunk);
            let grid = patchify(&batch.pixels, model.config())?;
            let plan = MaskPlan::identity(grid.batch(), grid.num_patches());
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let mut binder = Binder::new(&params, &groups);
            let sem = model.encode_semantic(&mut tape, &mut binder, &grid.tokens, &plan)?;
            let logits = model.label_logits(&mut tape, &mut binder, sem.cls)?;
            let ce = tape.softmax_cross_entropy(logits, &y);
            let loss = tape.value(ce).item();
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    epoch: epoch_losses.len() + 1,
                    detail: format!("finetune cross-entropy {loss}"),
                });
            }
            sum += loss;
            steps += 1;
            let mut raw = tape.backward(ce);
            let mut grads = binder.collect_grads(&mut raw);
            drop(binder);
            clip_global_norm(&mut grads, 1.0);
            adam.update(&cfg.finetune, mapping.lr, &mut params, &grads);
        }
        epoch_losses.push(sum / steps as f64);
    }
    Ok(Adapted {
        params,
        mapping,
        epoch_losses,
    })
}

/// Dispatch on the label fraction.
pub fn adapt(model: &DisMae, state: &TrainedState, labeled: &MultiDomainDataset, cfg: &ProtocolConfig) -> Result<Adapted> {
    match cfg.adaptation() {
        Adaptation::LinearProbe => linear_probe(model, state, labeled, cfg),
        Adaptation::FullFinetune => full_finetune(model, state, labeled, cfg),
    }
}

/// Accuracy of the label head over `s0` of full test images.
pub fn evaluate(model: &DisMae, params: &ParamStore, test: &MultiDomainDataset) -> Result<Metrics> {
    let labels = labels_of(test)?;
    let c = model.config().num_classes;
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::data(format!(
            "test set contains class index {bad}, unseen by the {c}-way head"
        )));
    }
    let features = embed_dataset(model, params, test, false)?;
    let logits = model.classify_label(params, &features)?;
    let pred: Vec<usize> = (0..test.len()).map(|i| argmax(logits.row(i))).collect();
    let domains: Vec<usize> = test.items.iter().map(|it| it.domain).collect();
    Metrics::from_predictions(&pred, &labels, &domains, &test.domains)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainProbeConfig {
    pub hidden: usize,
    pub steps: usize,
    pub lr: f64,
    pub test_fraction: f64,
}

impl Default for DomainProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            steps: 300,
            lr: 0.01,
            test_fraction: 0.2,
        }
    }
}

/// Held-out accuracy of a fresh two-layer MLP predicting domain from
/// standardized representations (seeded, domain-stratified 80/20 split).
pub fn domain_probe(features: &Tensor, domains: &[usize], cfg: &DomainProbeConfig, seed: u64) -> Result<f64> {
    let n = domains.len();
    if features.shape().len() != 2 || features.rows() != n {
        return Err(Error::shape(format!(
            "features {:?} do not match {n} domain labels",
            features.shape()
        )));
    }
    let k = domains.iter().max().map_or(0, |m| m + 1);
    let mut by_domain: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &d) in domains.iter().enumerate() {
        by_domain[d].push(i);
    }
    let present = by_domain.iter().filter(|v| !v.is_empty()).count();
    if present < 2 {
        return Err(Error::data("domain probe needs at least 2 domains"));
    }
    let mut rng = rng_for(seed, "domain-probe", 0);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for members in by_domain.iter_mut().filter(|v| !v.is_empty()) {
        if members.len() < 2 {
            return Err(Error::data("every domain needs at least 2 samples for the probe split"));
        }
        members.shuffle(&mut rng);
        let n_test = ((members.len() as f64 * cfg.test_fraction).round() as usize).clamp(1, members.len() - 1);
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();

    let f = features.last_dim();
    let norm = Standardizer::fit(&gather(features, &train));
    let (xtr, xte) = (norm.apply(&gather(features, &train)), norm.apply(&gather(features, &test)));
    let ytr: Vec<usize> = train.iter().map(|&i| domains[i]).collect();

    let mut params = ParamStore::new();
    params.insert("w1", crate::model::trunc_normal(&mut rng, &[f, cfg.hidden], (1.0 / f as f64).sqrt()));
    params.insert("b1", Tensor::zeros(&[cfg.hidden]));
    params.insert("w2", Tensor::zeros(&[cfg.hidden, k]));
    params.insert("b2", Tensor::zeros(&[k]));
    let forward = |tape: &mut Tape, params: &ParamStore, x: Tensor, train: bool| -> (Var, [Var; 4]) {
        let vars = ["w1", "b1", "w2", "b2"].map(|n| tape.leaf(params.get(n).expect("probe param").clone(), train));
        let x = tape.constant(x);
        let h = tape.linear(x, vars[0], Some(vars[1]));
        let h = tape.gelu(h);
        (tape.linear(h, vars[2], Some(vars[3])), vars)
    };
    let adam_cfg = AdamWConfig {
        lr: cfg.lr,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut adam = AdamWState::default();
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let (logits, vars) = forward(&mut tape, &params, xtr.clone(), true);
        let ce = tape.softmax_cross_entropy(logits, &ytr);
        let mut g = tape.backward(ce);
        let grads: BTreeMap<String, Tensor> = ["w1", "b1", "w2", "b2"]
            .iter()
            .zip(vars)
            .map(|(n, v)| (n.to_string(), g.take(v).expect("probe gradient")))
            .collect();
        adam.update(&adam_cfg, cfg.lr, &mut params, &grads);
    }
    let mut tape = Tape::new();
    let (logits, _) = forward(&mut tape, &params, xte, false);
    let logits = tape.value(logits);
    let correct = test
        .iter()
        .enumerate()
        .filter(|(r, &i)| argmax(logits.row(*r)) == domains[i])
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Mean p(true domain | s0) per domain under the current classifier, with
/// training-style masking drawn from `seed`.
pub fn mean_propensity(model: &DisMae, params: &ParamStore, ds: &MultiDomainDataset, seed: u64) -> Result<Vec<f64>> {
    let mut rng = rng_for(seed, "propensity", 0);
    let mut sum = vec![0.0; ds.num_domains()];
    let mut n = vec![0usize; ds.num_domains()];
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(EMBED_CHUNK) {
        let batch = ds.batch(chunk);
        let grid = patchify(&batch.pixels, model.config())?;
        let (_, plan) = random_masking(&grid.tokens, model.config().mask_ratio, &mut rng)?;
        let s0 = model.latents(params, &grid, &plan)?.semantic_cls;
        let probs = model.classify_domain(params, &s0)?;
        for (r, &d) in batch.domains.iter().enumerate() {
            sum[d] += probs.row(r)[d];
            n[d] += 1;
        }
    }
    Ok(sum.iter().zip(&n).map(|(s, &c)| s / c.max(1) as f64).collect())
}

/// Everything needed for one pretrain → adapt → evaluate run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: ProtocolConfig,
}

#[derive(Clone, Debug)]
pub struct PipelineResult {
    pub state: TrainedState,
    pub adapted: Adapted,
    pub metrics: Metrics,
}

pub fn run_pipeline(
    cfg: &PipelineConfig,
    train: &MultiDomainDataset,
    test: &MultiDomainDataset,
    run_dir: Option<&Path>,
) -> Result<PipelineResult> {
    let trainer = Trainer::new(cfg.model.clone(), cfg.loss.clone(), cfg.train.clone())?;
    let (state, _) = trainer.train(train, trainer.init_state(), run_dir)?;
    let labeled = select_labeled_subset(train, cfg.eval.label_fraction, cfg.eval.seed)?;
    let adapted = adapt(&trainer.model, &state, &labeled, &cfg.eval)?;
    let metrics = evaluate(&trainer.model, &adapted.params, test)?;
    Ok(PipelineResult { state, adapted, metrics })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub weight_modes: Vec<WeightMode>,
    pub negatives_scopes: Vec<NegativesScope>,
    pub decoder_depths: Vec<usize>,
    pub mask_ratios: Vec<f64>,
    /// Seeds shared by every cell; empty means the base train seed only.
    pub seeds: Vec<u64>,
}

impl AblationGrid {
    /// The adaptive-loss, decoder-depth and mask-ratio sweeps.
    pub fn standard() -> Self {
        Self {
            weight_modes: WeightMode::ALL.to_vec(),
            negatives_scopes: vec![NegativesScope::InterDomain],
            decoder_depths: vec![1, 2, 4, 8],
            mask_ratios: vec![0.5, 0.6, 0.7, 0.8, 0.9],
            seeds: Vec::new(),
        }
    }
}

/// One cell of the grid: a single factor changed from the base config.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub id: String,
    pub row: Option<String>,
    pub config: PipelineConfig,
}

fn weight_row(mode: WeightMode) -> &'static str {
    match mode {
        WeightMode::Ipw => "DisMAE",
        WeightMode::None => "w/o weights",
        WeightMode::Random => "Random weights",
        WeightMode::Reverse => "Reverse weights",
    }
}

pub fn expand_grid(base: &PipelineConfig, grid: &AblationGrid) -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for &m in &grid.weight_modes {
        let mut c = base.clone();
        c.loss.weight_mode = m;
        cells.push(AblationCell {
            id: format!("weight_mode={}", m.token()),
            row: Some(weight_row(m).into()),
            config: c,
        });
    }
    for &s in &grid.negatives_scopes {
        let mut c = base.clone();
        c.loss.negatives_scope = s;
        cells.push(AblationCell {
            id: format!("negatives_scope={}", s.token()),
            row: (s == NegativesScope::InterDomain).then(|| "Inter-domain neg.".into()),
            config: c,
        });
    }
    for &d in &grid.decoder_depths {
        let mut c = base.clone();
        c.model.decoder_depth = d;
        cells.push(AblationCell {
            id: format!("decoder_depth={d}"),
            row: None,
            config: c,
        });
    }
    for &r in &grid.mask_ratios {
        let mut c = base.clone();
        c.model.mask_ratio = r;
        cells.push(AblationCell {
            id: format!("mask_ratio={r}"),
            row: None,
            config: c,
        });
    }
    cells
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub row: Option<String>,
    pub status: String,
    pub runs: Vec<SeedOutcome>,
    pub mean_overall: Option<f64>,
    pub mean_average: Option<f64>,
    pub errors: Vec<String>,
}

pub type AblationTable = BTreeMap<String, CellResult>;

/// Run every cell for every seed; failures are recorded and the grid continues.
pub fn run_ablation(
    base: &PipelineConfig,
    grid: &AblationGrid,
    train: &MultiDomainDataset,
    test: &MultiDomainDataset,
) -> AblationTable {
    let seeds = if grid.seeds.is_empty() {
        vec![base.train.seed]
    } else {
        grid.seeds.clone()
    };
    let mut table = AblationTable::new();
    for cell in expand_grid(base, grid) {
        let mut runs = Vec::new();
        let mut errors = Vec::new();
        for &seed in &seeds {
            let mut cfg = cell.config.clone();
            cfg.train.seed = seed;
            cfg.eval.seed = seed;
            match run_pipeline(&cfg, train, test, None) {
                Ok(r) => runs.push(SeedOutcome { seed, metrics: r.metrics }),
                Err(e) => {
                    log::warn!("ablation cell {} seed {seed} failed: {e}", cell.id);
                    errors.push(format!("seed {seed}: {e}"));
                }
            }
        }
        let mean = |f: fn(&Metrics) -> f64| {
            (!runs.is_empty()).then(|| runs.iter().map(|r| f(&r.metrics)).sum::<f64>() / runs.len() as f64)
        };
        let status = match (runs.is_empty(), errors.is_empty()) {
            (_, true) => "ok",
            (true, false) => "failed",
            (false, false) => "partial",
        };
        table.insert(
            cell.id.clone(),
            CellResult {
                row: cell.row.clone(),
                status: status.into(),
                mean_overall: mean(|m| m.overall),
                mean_average: mean(|m| m.average),
                runs,
                errors,
            },
        );
    }
    table
}
