//! Reconstruction, swap-contrastive, and propensity-weighted objectives.
//!
//! The free functions operate on plain values and mirror the formulas one to
//! one; [`build_objective`] assembles the same quantities on a [`Tape`] for
//! training.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ContrastGroup, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Binder, DisMae, DomainProbs, LatentPair, MaskPlan, ParamStore, PatchGrid};
use crate::tensor::{log_sum_exp, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `w = 1 / p`
    Ipw,
    /// `w = 1`
    None,
    /// `w ~ U[1, K]`
    Random,
    /// `w = p`
    Reverse,
}

impl WeightMode {
    pub const ALL: [WeightMode; 4] = [WeightMode::Ipw, WeightMode::None, WeightMode::Random, WeightMode::Reverse];

    pub fn token(self) -> &'static str {
        match self {
            WeightMode::Ipw => "ipw",
            WeightMode::None => "none",
            WeightMode::Random => "random",
            WeightMode::Reverse => "reverse",
        }
    }
}

impl std::str::FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.token() == s)
            .ok_or_else(|| Error::config(format!("unknown weight_mode {s:?} (ipw|none|random|reverse)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativesScope {
    IntraDomain,
    /// Negatives drawn from other domains only.
    InterDomain,
}

impl NegativesScope {
    pub fn token(self) -> &'static str {
        match self {
            NegativesScope::IntraDomain => "intra_domain",
            NegativesScope::InterDomain => "inter_domain",
        }
    }
}

impl std::str::FromStr for NegativesScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intra_domain" => Ok(NegativesScope::IntraDomain),
            "inter_domain" => Ok(NegativesScope::InterDomain),
            _ => Err(Error::config(format!(
                "unknown negatives_scope {s:?} (intra_domain|inter_domain)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub gamma: f64,
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub weight_mode: WeightMode,
    pub p_clamp_min: f64,
    /// Cap on negatives per anchor; 0 means every eligible in-batch sample.
    pub max_negatives: usize,
    pub negatives_scope: NegativesScope,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.008,
            tau: 0.4,
            lambda1: 1e-3,
            lambda2: 0.0,
            weight_mode: WeightMode::Ipw,
            p_clamp_min: 0.05,
            max_negatives: 8,
            negatives_scope: NegativesScope::IntraDomain,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, num_domains: usize) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::config(format!("gamma {} must be > 0", self.gamma)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config(format!("tau {} must be > 0", self.tau)));
        }
        if !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            return Err(Error::config("lambda1 and lambda2 must be >= 0"));
        }
        let max_clamp = 1.0 / num_domains as f64;
        if !(self.p_clamp_min > 0.0 && self.p_clamp_min <= max_clamp) {
            return Err(Error::config(format!(
                "p_clamp_min {} must lie in (0, 1/K = {max_clamp}]",
                self.p_clamp_min
            )));
        }
        Ok(())
    }
}

/// Per-sample RMSE over the masked patch pixels.
pub fn per_sample_recon_error(pred: &Tensor, target: &Tensor, plan: &MaskPlan) -> Result<Vec<f64>> {
    if pred.shape() != target.shape() || pred.shape().len() != 3 {
        return Err(Error::shape(format!(
            "prediction {:?} and target {:?} must be equal [N, L, P]",
            pred.shape(),
            target.shape()
        )));
    }
    let (n, l, p) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
    if plan.batch() != n {
        return Err(Error::shape("mask plan batch differs from prediction batch"));
    }
    let mut out = Vec::with_capacity(n);
    for (i, masked) in plan.masked_idx.iter().enumerate() {
        if masked.is_empty() {
            return Err(Error::config(
                "no masked patches (mask ratio 0): training requires mask_ratio > 0",
            ));
        }
        let mut acc = 0.0;
        for &q in masked {
            let off = (i * l + q) * p;
            for c in 0..p {
                let d = pred.data()[off + c] - target.data()[off + c];
                acc += d * d;
            }
        }
        out.push((acc / (masked.len() * p) as f64).sqrt());
    }
    Ok(out)
}

/// Mean over the batch of `max(d − γ, 0)`.
pub fn gamma_recon_loss(distances: &[f64], gamma: f64) -> f64 {
    if distances.is_empty() {
        return 0.0;
    }
    distances.iter().map(|d| (d - gamma).max(0.0)).sum::<f64>() / distances.len() as f64
}

/// Negative γ-margin reconstruction error for one distance.
pub fn similarity_from_distance(distance: f64, gamma: f64) -> f64 {
    -(distance - gamma).max(0.0)
}

/// Per-row similarity between originals and reconstructions on masked patches.
pub fn similarity(x_patches: &Tensor, recon: &Tensor, plan: &MaskPlan, gamma: f64) -> Result<Vec<f64>> {
    Ok(per_sample_recon_error(recon, x_patches, plan)?
        .into_iter()
        .map(|d| similarity_from_distance(d, gamma))
        .collect())
}

/// `−log( e^{s⁺/τ} / (e^{s⁺/τ} + Σ_j e^{s_j/τ}) )`; zero when there are no negatives.
pub fn contrastive_term(s_pos: f64, s_neg: &[f64], tau: f64) -> f64 {
    if s_neg.is_empty() {
        return 0.0;
    }
    let mut logits = Vec::with_capacity(1 + s_neg.len());
    logits.push(s_pos / tau);
    logits.extend(s_neg.iter().map(|s| s / tau));
    log_sum_exp(&logits) - logits[0]
}

/// Probability assigned to each sample's true domain, clamped below.
pub fn domain_propensity(probs: &DomainProbs, domains: &[usize], clamp_min: f64) -> Result<Vec<f64>> {
    if domains.len() != probs.batch() {
        return Err(Error::shape("domain count differs from probability rows"));
    }
    domains
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let row = probs.row(i);
            row.get(d)
                .map(|&p| p.max(clamp_min))
                .ok_or_else(|| Error::data(format!("domain index {d} out of range for K = {}", row.len())))
        })
        .collect()
}

pub fn adaptive_weights<R: Rng + ?Sized>(p: &[f64], mode: WeightMode, num_domains: usize, rng: &mut R) -> Vec<f64> {
    match mode {
        WeightMode::Ipw => p.iter().map(|p| 1.0 / p).collect(),
        WeightMode::None => vec![1.0; p.len()],
        WeightMode::Random => p
            .iter()
            .map(|_| rng.random_range(1.0..=num_domains as f64))
            .collect(),
        WeightMode::Reverse => p.to_vec(),
    }
}

/// Batch mean of `w_i · l_i`.
pub fn adaptive_contrastive_loss(terms: &[f64], weights: &[f64]) -> Result<f64> {
    if terms.is_empty() {
        return Err(Error::data("adaptive contrastive loss over an empty batch"));
    }
    if terms.len() != weights.len() {
        return Err(Error::shape("terms and weights differ in length"));
    }
    Ok(terms.iter().zip(weights).map(|(l, w)| l * w).sum::<f64>() / terms.len() as f64)
}

pub fn udg_objective(l_rec: f64, l_con: f64, lambda1: f64) -> f64 {
    l_rec + lambda1 * l_con
}

/// Mean softmax cross-entropy of `[B, C]` logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let c = logits.last_dim();
    if logits.rows() != labels.len() || labels.is_empty() {
        return Err(Error::shape("logit rows differ from label count"));
    }
    let mut acc = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::data(format!("label {y} out of range for {c} classes")));
        }
        let row = logits.row(i);
        acc += log_sum_exp(row) - row[y];
    }
    Ok(acc / labels.len() as f64)
}

pub fn dg_objective(
    l_rec: f64,
    l_con: f64,
    labels: Option<&[usize]>,
    logits: &Tensor,
    lambda1: f64,
    lambda2: f64,
) -> Result<f64> {
    let labels = labels.ok_or_else(|| {
        Error::config("DG objective needs class labels; use the UDG objective for unlabeled data")
    })?;
    Ok(l_rec + lambda1 * l_con + lambda2 * cross_entropy(logits, labels)?)
}

/// An anchor and the in-batch samples whose variation summaries it borrows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SwapPairing {
    pub anchor: usize,
    pub partners: Vec<usize>,
}

/// Negative partners for every anchor in a batch.
pub fn build_pairings<R: Rng + ?Sized>(
    domains: &[usize],
    scope: NegativesScope,
    max_negatives: usize,
    rng: &mut R,
) -> Vec<SwapPairing> {
    (0..domains.len())
        .map(|i| {
            let candidates: Vec<usize> = (0..domains.len())
                .filter(|&j| {
                    j != i
                        && match scope {
                            NegativesScope::IntraDomain => domains[j] == domains[i],
                            NegativesScope::InterDomain => domains[j] != domains[i],
                        }
                })
                .collect();
            let partners = if max_negatives > 0 && candidates.len() > max_negatives {
                let mut picked: Vec<usize> = sample(rng, candidates.len(), max_negatives)
                    .into_iter()
                    .map(|k| candidates[k])
                    .collect();
                picked.sort_unstable();
                picked
            } else {
                candidates
            };
            SwapPairing { anchor: i, partners }
        })
        .collect()
}

/// `g(s_i, v_j^0)` for every partner `j` of each pairing, decoded under the
/// anchor's mask. Returns one `[|J|, L, P]` tensor per pairing.
pub fn swap_reconstructions(
    model: &DisMae,
    params: &ParamStore,
    latents: &LatentPair,
    pairings: &[SwapPairing],
    plan: &MaskPlan,
) -> Result<Vec<Tensor>> {
    let v = latents
        .variation_cls
        .as_ref()
        .ok_or_else(|| Error::config("swap reconstructions need the variation branch"))?;
    let b = latents.semantic_cls.shape()[0];
    let mut anchors = Vec::new();
    let mut partners = Vec::new();
    for pr in pairings {
        for &j in &pr.partners {
            if pr.anchor >= b || j >= b {
                return Err(Error::data(format!(
                    "pairing ({}, {j}) out of range for batch {b}",
                    pr.anchor
                )));
            }
            anchors.push(pr.anchor);
            partners.push(j);
        }
    }
    let l = plan.num_patches();
    let p = model.config().patch_dim();
    if anchors.is_empty() {
        return Ok(pairings.iter().map(|_| Tensor::zeros(&[0, l, p])).collect());
    }
    let mut tape = Tape::new();
    let tokens = tape.constant(latents.semantic_tokens.clone());
    let tokens = tape.gather_rows(tokens, &anchors);
    let cond = tape.constant(v.clone());
    let cond = tape.gather_rows(cond, &partners);
    let mut binder = Binder::frozen(params);
    let rec = model.decode(&mut tape, &mut binder, tokens, Some(cond), &plan.select(&anchors))?;
    let rec = tape.value(rec);
    let mut out = Vec::with_capacity(pairings.len());
    let mut offset = 0;
    for pr in pairings {
        let k = pr.partners.len();
        let data = rec.data()[offset * l * p..(offset + k) * l * p].to_vec();
        out.push(Tensor::from_parts(vec![k, l, p], data));
        offset += k;
    }
    Ok(out)
}

/// Objective assembled on a tape together with its logged components.
pub struct ObjectiveOutput {
    pub total: Var,
    pub l_rec: f64,
    pub l_con: f64,
    pub ce: Option<f64>,
    /// Clamped propensity of each sample's true domain under the frozen classifier.
    pub propensity: Vec<f64>,
    /// Same, before clamping; this is what score tracking reports.
    pub raw_propensity: Vec<f64>,
    pub weights: Vec<f64>,
    /// Anchors that had no eligible negatives.
    pub empty_negative_sets: usize,
}

/// Whether the supervised cross-entropy term participates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectiveKind {
    Udg,
    Dg,
}

#[allow(clippy::too_many_arguments)]
pub fn build_objective<R: Rng + ?Sized>(
    model: &DisMae,
    tape: &mut Tape,
    binder: &mut Binder<'_>,
    grid: &PatchGrid,
    plan: &MaskPlan,
    domains: &[usize],
    labels: Option<&[usize]>,
    loss: &LossConfig,
    kind: ObjectiveKind,
    rng: &mut R,
) -> Result<ObjectiveOutput> {
    let b = grid.batch();
    if domains.len() != b {
        return Err(Error::shape("domain count differs from batch size"));
    }
    if plan.masked_idx.iter().any(Vec::is_empty) {
        return Err(Error::config(
            "no masked patches (mask ratio 0): training requires mask_ratio > 0",
        ));
    }
    let cfg = model.config();
    let visible = plan.gather_visible(&grid.tokens);
    let sem = model.encode_semantic(tape, binder, &visible, plan)?;
    let v0 = if cfg.use_variation {
        Some(model.encode_variation(tape, binder, &visible, plan)?)
    } else {
        None
    };

    let probs = model.classify_domain(binder.store(), tape.value(sem.cls))?;
    let propensity = domain_propensity(&probs, domains, loss.p_clamp_min)?;
    let raw_propensity = domain_propensity(&probs, domains, 0.0)?;

    let use_contrast = loss.lambda1 > 0.0 && cfg.use_variation;
    let mut anchor_rows: Vec<usize> = (0..b).collect();
    let mut cond_rows: Vec<usize> = (0..b).collect();
    let mut groups = Vec::new();
    let mut empty_negative_sets = 0;
    if use_contrast {
        let pairings = build_pairings(domains, loss.negatives_scope, loss.max_negatives, rng);
        for pr in &pairings {
            if pr.partners.is_empty() {
                empty_negative_sets += 1;
            }
            let start = anchor_rows.len();
            for &j in &pr.partners {
                anchor_rows.push(pr.anchor);
                cond_rows.push(j);
            }
            groups.push(ContrastGroup {
                positive: pr.anchor,
                negatives: (start..anchor_rows.len()).collect(),
            });
        }
    }

    let (tokens, cond, dec_plan, target) = if anchor_rows.len() == b {
        (sem.tokens, v0, plan.clone(), grid.tokens.clone())
    } else {
        let tokens = tape.gather_rows(sem.tokens, &anchor_rows);
        let cond = v0.map(|v| tape.gather_rows(v, &cond_rows));
        let mut tt = Tape::new();
        let t = tt.constant(grid.tokens.clone());
        let t = tt.gather_rows(t, &anchor_rows);
        (tokens, cond, plan.select(&anchor_rows), tt.value(t).clone())
    };
    let rec = model.decode(tape, binder, tokens, cond, &dec_plan)?;
    let dist = tape.masked_rmse(rec, &target, &dec_plan.masked_idx);
    let excess = tape.hinge(dist, loss.gamma);
    let primary: Vec<usize> = (0..b).collect();
    let excess_main = if anchor_rows.len() == b {
        excess
    } else {
        tape.gather_rows(excess, &primary)
    };
    let l_rec = tape.mean(excess_main);
    let mut total = l_rec;

    let mut weights = vec![1.0; b];
    let mut l_con_value = 0.0;
    if use_contrast {
        weights = adaptive_weights(&propensity, loss.weight_mode, cfg.num_domains, rng);
        let sims = tape.scale(excess, -1.0);
        let terms = tape.contrastive(sims, &groups, loss.tau);
        let l_con = tape.weighted_mean(terms, &weights);
        l_con_value = tape.value(l_con).item();
        let scaled = tape.scale(l_con, loss.lambda1);
        total = tape.add(total, scaled);
    }

    let mut ce = None;
    if kind == ObjectiveKind::Dg {
        let labels = labels.ok_or_else(|| {
            Error::config("DG training needs class labels on every sample; use udg mode for unlabeled data")
        })?;
        let logits = model.label_logits(tape, binder, sem.cls)?;
        let ce_var = tape.softmax_cross_entropy(logits, labels);
        ce = Some(tape.value(ce_var).item());
        if loss.lambda2 > 0.0 {
            let scaled = tape.scale(ce_var, loss.lambda2);
            total = tape.add(total, scaled);
        }
    }

    Ok(ObjectiveOutput {
        total,
        l_rec: tape.value(l_rec).item(),
        l_con: l_con_value,
        ce,
        propensity,
        raw_propensity,
        weights,
        empty_negative_sets,
    })
}
