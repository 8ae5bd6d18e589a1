//! Alternating optimization of the backbones and the domain classifier.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Tape;
use crate::checkpoint::{self, TrainedState};
use crate::datasets::{domain_balanced_batches, ImageBatch, MultiDomainDataset};
use crate::error::{Error, Result};
use crate::model::{patchify, random_masking, Binder, DisMae, ModelConfig, ParamGroup};
use crate::objectives::{build_objective, LossConfig, ObjectiveKind};
use crate::optim::{clip_global_norm, AdamWConfig, AdamWState, SgdConfig, SgdState};
use crate::seeding::{derive_seed, rng_for};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Udg,
    Dg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierPass {
    /// One SGD epoch over the whole training set.
    Full,
    /// A single SGD step on the first batch.
    SingleBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub adaptive_max_epoch: usize,
    pub adaptive_interval: usize,
    pub backbone: AdamWConfig,
    pub classifier: SgdConfig,
    pub per_domain_batch: usize,
    pub seed: u64,
    /// Save `checkpoints/epoch-NNNN/` every this many epochs; 0 disables.
    pub checkpoint_interval: usize,
    pub mode: TrainMode,
    pub lr_schedule: LrSchedule,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    pub classifier_pass: ClassifierPass,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            adaptive_max_epoch: 100,
            adaptive_interval: 15,
            backbone: AdamWConfig::default(),
            classifier: SgdConfig::default(),
            per_domain_batch: 16,
            seed: 0,
            checkpoint_interval: 0,
            mode: TrainMode::Udg,
            lr_schedule: LrSchedule::Constant,
            grad_clip: 1.0,
            classifier_pass: ClassifierPass::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::config("train.epochs must be >= 1"));
        }
        if self.adaptive_interval < 1 {
            return Err(Error::config("train.adaptive_interval must be >= 1"));
        }
        if self.per_domain_batch < 2 {
            return Err(Error::config(
                "train.per_domain_batch must be >= 2 so every anchor has an intra-domain partner",
            ));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::config("train.grad_clip must be >= 0"));
        }
        if !(self.backbone.lr > 0.0) || !(self.classifier.lr > 0.0) {
            return Err(Error::config("learning rates must be > 0"));
        }
        Ok(())
    }

    /// Whether the classifier trains at the end of epoch `e` (1-based).
    pub fn classifier_scheduled(&self, epoch: usize) -> bool {
        epoch >= 1 && epoch % self.adaptive_interval == 0 && epoch <= self.adaptive_max_epoch
    }

    pub fn classifier_epochs(&self) -> Vec<usize> {
        (1..=self.epochs).filter(|&e| self.classifier_scheduled(e)).collect()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.backbone.lr,
            LrSchedule::Cosine => {
                let t = (epoch.saturating_sub(1)) as f64 / self.epochs as f64;
                0.5 * self.backbone.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Hex SHA-256 over the canonical JSON of the three sections.
pub fn config_fingerprint(model: &ModelConfig, loss: &LossConfig, train: &TrainConfig) -> String {
    let doc = serde_json::json!({ "model": model, "loss": loss, "train": train });
    hex::encode(Sha256::digest(doc.to_string().as_bytes()))
}

/// Components logged for one backbone step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub total: f64,
    pub l_rec: f64,
    pub l_con: f64,
    pub ce: Option<f64>,
    pub raw_propensity: Vec<f64>,
    pub grad_norm: f64,
}

/// Per-epoch means written to `logs/scalars.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_rec: f64,
    pub l_con: f64,
    pub ce: Option<f64>,
    /// Mean unclamped p(true domain | s0), indexed by domain.
    pub mean_p: Vec<f64>,
    pub classifier_loss: Option<f64>,
}

pub struct Trainer {
    pub model: DisMae,
    pub loss: LossConfig,
    pub cfg: TrainConfig,
    fingerprint: String,
}

impl Trainer {
    pub fn new(model: ModelConfig, loss: LossConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        loss.validate(model.num_domains)?;
        if model.mask_ratio <= 0.0 {
            return Err(Error::config("model.mask_ratio must be > 0 for pretraining"));
        }
        if cfg.mode == TrainMode::Dg && model.num_classes == 0 {
            return Err(Error::config("dg mode needs model.num_classes >= 1"));
        }
        let fingerprint = config_fingerprint(&model, &loss, &cfg);
        Ok(Self {
            model: DisMae::new(model)?,
            loss,
            cfg,
            fingerprint,
        })
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn init_state(&self) -> TrainedState {
        let mut init_rng = rng_for(self.cfg.seed, "init", 0);
        TrainedState {
            params: self.model.init_params(&mut init_rng),
            adamw: AdamWState::default(),
            sgd: SgdState::default(),
            epoch: 0,
            rng: rng_for(self.cfg.seed, "train", 0),
            fingerprint: self.fingerprint.clone(),
        }
    }

    /// Load a checkpoint written under this exact configuration.
    pub fn load_state(&self, dir: &Path) -> Result<TrainedState> {
        let state = checkpoint::load(dir, Some(&self.fingerprint))?;
        let expected = self.init_state();
        for name in expected.params.names() {
            if state.params.get(name).is_none() {
                return Err(Error::Checkpoint {
                    name: format!("param/{name}"),
                    reason: "missing array".into(),
                });
            }
        }
        Ok(state)
    }

    fn backbone_groups(&self) -> Vec<ParamGroup> {
        let mut g = vec![ParamGroup::Semantic, ParamGroup::Variation, ParamGroup::Decoder];
        if self.cfg.mode == TrainMode::Dg {
            g.push(ParamGroup::LabelHead);
        }
        g
    }

    fn kind(&self) -> ObjectiveKind {
        match self.cfg.mode {
            TrainMode::Udg => ObjectiveKind::Udg,
            TrainMode::Dg => ObjectiveKind::Dg,
        }
    }

    /// One AdamW step on the backbones with the domain classifier frozen.
    pub fn backbone_step(&self, state: &mut TrainedState, batch: &ImageBatch, epoch: usize) -> Result<StepStats> {
        let grid = patchify(&batch.pixels, self.model.config())?;
        let (_, plan) = random_masking(&grid.tokens, self.model.config().mask_ratio, &mut state.rng)?;
        let groups = self.backbone_groups();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&state.params, &groups);
        let out = build_objective(
            &self.model,
            &mut tape,
            &mut binder,
            &grid,
            &plan,
            &batch.domains,
            batch.labels.as_deref(),
            &self.loss,
            self.kind(),
            &mut state.rng,
        )?;
        let total = tape.value(out.total).item();
        let components_finite = [total, out.l_rec, out.l_con, out.ce.unwrap_or(0.0)]
            .iter()
            .all(|v| v.is_finite());
        let mut grads_raw = tape.backward(out.total);
        let mut grads = binder.collect_grads(&mut grads_raw);
        let grads_finite = grads.values().all(Tensor::all_finite);
        if !components_finite || !grads_finite {
            return Err(Error::NonFinite {
                epoch,
                detail: format!(
                    "total={total} l_rec={} l_con={} ce={:?} gradients_finite={grads_finite} batch indices {:?}",
                    out.l_rec, out.l_con, out.ce, batch.indices
                ),
            });
        }
        let grad_norm = clip_global_norm(&mut grads, self.cfg.grad_clip);
        let lr = self.cfg.lr_at(epoch);
        state.adamw.update(&self.cfg.backbone, lr, &mut state.params, &grads);
        Ok(StepStats {
            total,
            l_rec: out.l_rec,
            l_con: out.l_con,
            ce: out.ce,
            raw_propensity: out.raw_propensity,
            grad_norm,
        })
    }

    /// One SGD step on the domain classifier over `batch`, backbones frozen.
    fn classifier_batch_step(&self, state: &mut TrainedState, batch: &ImageBatch) -> Result<f64> {
        let grid = patchify(&batch.pixels, self.model.config())?;
        let (_, plan) = random_masking(&grid.tokens, self.model.config().mask_ratio, &mut state.rng)?;
        let s0 = self.model.latents(&state.params, &grid, &plan)?.semantic_cls;
        let mut tape = Tape::new();
        let mut binder = Binder::new(&state.params, &[ParamGroup::DomainClassifier]);
        let x = tape.constant(s0);
        let logits = self.model.domain_logits(&mut tape, &mut binder, x);
        let ce = tape.softmax_cross_entropy(logits, &batch.domains);
        let loss = tape.value(ce).item();
        let mut raw = tape.backward(ce);
        let mut grads = binder.collect_grads(&mut raw);
        if !loss.is_finite() || !grads.values().all(Tensor::all_finite) {
            return Err(Error::NonFinite {
                epoch: state.epoch,
                detail: format!("domain classifier loss {loss}, batch indices {:?}", batch.indices),
            });
        }
        clip_global_norm(&mut grads, self.cfg.grad_clip);
        state.sgd.update(&self.cfg.classifier, &mut state.params, &grads);
        Ok(loss)
    }

    /// The scheduled classifier update at the end of `epoch`; returns the mean
    /// domain cross-entropy over the pass.
    pub fn adaptive_classifier_step(
        &self,
        state: &mut TrainedState,
        ds: &MultiDomainDataset,
        epoch: usize,
    ) -> Result<f64> {
        if !self.cfg.classifier_scheduled(epoch) {
            return Err(Error::Contract(format!(
                "classifier update requested at epoch {epoch}, which is not in the schedule (T_ad = {}, E_ad = {})",
                self.cfg.adaptive_interval, self.cfg.adaptive_max_epoch
            )));
        }
        let seed = derive_seed(self.cfg.seed, "classifier-pass", 0);
        let mut batches = domain_balanced_batches(ds, self.cfg.per_domain_batch, seed, epoch)?;
        if self.cfg.classifier_pass == ClassifierPass::SingleBatch {
            batches.truncate(1);
        }
        let mut sum = 0.0;
        for idx in &batches {
            sum += self.classifier_batch_step(state, &ds.batch(idx))?;
        }
        Ok(sum / batches.len().max(1) as f64)
    }

    /// Run one epoch of backbone steps followed, when scheduled, by the
    /// classifier pass.
    pub fn run_epoch(&self, state: &mut TrainedState, ds: &MultiDomainDataset) -> Result<EpochLog> {
        let epoch = state.epoch + 1;
        let batches = domain_balanced_batches(ds, self.cfg.per_domain_batch, self.cfg.seed, epoch)?;
        let k = ds.num_domains();
        let mut p_sum = vec![0.0; k];
        let mut p_n = vec![0usize; k];
        let (mut rec, mut con, mut ce) = (0.0, 0.0, 0.0);
        for idx in &batches {
            let batch = ds.batch(idx);
            let st = self.backbone_step(state, &batch, epoch)?;
            rec += st.l_rec;
            con += st.l_con;
            ce += st.ce.unwrap_or(0.0);
            for (&d, &p) in batch.domains.iter().zip(&st.raw_propensity) {
                p_sum[d] += p;
                p_n[d] += 1;
            }
        }
        let n = batches.len() as f64;
        let classifier_loss = if self.cfg.classifier_scheduled(epoch) {
            Some(self.adaptive_classifier_step(state, ds, epoch)?)
        } else {
            None
        };
        state.epoch = epoch;
        Ok(EpochLog {
            epoch,
            l_rec: rec / n,
            l_con: con / n,
            ce: (self.cfg.mode == TrainMode::Dg).then_some(ce / n),
            mean_p: p_sum.iter().zip(&p_n).map(|(s, &c)| s / c.max(1) as f64).collect(),
            classifier_loss,
        })
    }

    fn check_dataset(&self, ds: &MultiDomainDataset) -> Result<()> {
        if ds.num_domains() < 2 {
            return Err(Error::data(
                "training needs at least 2 domains; the intra-domain contrastive setup is degenerate with one",
            ));
        }
        if ds.num_domains() != self.model.config().num_domains {
            return Err(Error::config(format!(
                "model.num_domains is {} but the training data has {} domains {:?}",
                self.model.config().num_domains,
                ds.num_domains(),
                ds.domains
            )));
        }
        if ds.image_size != self.model.config().image_size {
            return Err(Error::config(format!(
                "model.image_size is {} but the images are {}px",
                self.model.config().image_size,
                ds.image_size
            )));
        }
        if self.cfg.mode == TrainMode::Dg && !ds.is_labeled() {
            return Err(Error::data("dg mode needs labels on every training sample"));
        }
        Ok(())
    }

    /// Train from `state` (fresh or resumed) up to `cfg.epochs`. With a run
    /// directory, logs, periodic checkpoints and `final/` are written there.
    pub fn train(
        &self,
        ds: &MultiDomainDataset,
        mut state: TrainedState,
        run_dir: Option<&Path>,
    ) -> Result<(TrainedState, Vec<EpochLog>)> {
        self.check_dataset(ds)?;
        if state.fingerprint != self.fingerprint {
            return Err(Error::Checkpoint {
                name: "config_fingerprint".into(),
                reason: "state was produced under a different configuration".into(),
            });
        }
        let mut logger = match run_dir {
            Some(dir) => Some(RunLogger::open(dir, &ds.domains, state.epoch)?),
            None => None,
        };
        let mut logs = Vec::new();
        while state.epoch < self.cfg.epochs {
            let log = self.run_epoch(&mut state, ds)?;
            log::info!(
                "epoch {} l_rec {:.6} l_con {:.6} mean_p {:?}",
                log.epoch,
                log.l_rec,
                log.l_con,
                log.mean_p
            );
            if let (Some(lg), Some(dir)) = (logger.as_mut(), run_dir) {
                lg.append(&log)?;
                if self.cfg.checkpoint_interval > 0 && log.epoch % self.cfg.checkpoint_interval == 0 {
                    checkpoint::save(&state, &dir.join("checkpoints").join(format!("epoch-{:04}", log.epoch)))?;
                }
            }
            logs.push(log);
        }
        if let Some(dir) = run_dir {
            checkpoint::save(&state, &dir.join("final"))?;
        }
        Ok((state, logs))
    }
}

/// Append-only CSV writers for a run directory.
struct RunLogger {
    scalars: std::path::PathBuf,
    classifier: std::path::PathBuf,
    domains: Vec<String>,
}

const SCALARS_HEADER: &str = "epoch,series,value\n";
const CLASSIFIER_HEADER: &str = "epoch,loss\n";

/// Keep the header and every row whose epoch is <= `keep`.
fn truncate_log(path: &Path, header: &str, keep: usize) -> Result<()> {
    let mut out = String::from(header);
    if keep > 0 {
        if let Ok(text) = fs::read_to_string(path) {
            for line in text.lines().skip(1) {
                let e: usize = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(usize::MAX);
                if e <= keep {
                    out.push_str(line);
                    out.push('\n');
                }
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

impl RunLogger {
    fn open(dir: &Path, domains: &[String], resume_epoch: usize) -> Result<Self> {
        let logs = dir.join("logs");
        fs::create_dir_all(&logs).map_err(|e| Error::io(&logs, e))?;
        let lg = Self {
            scalars: logs.join("scalars.csv"),
            classifier: logs.join("classifier.csv"),
            domains: domains.to_vec(),
        };
        truncate_log(&lg.scalars, SCALARS_HEADER, resume_epoch)?;
        truncate_log(&lg.classifier, CLASSIFIER_HEADER, resume_epoch)?;
        Ok(lg)
    }

    fn append(&mut self, log: &EpochLog) -> Result<()> {
        let mut rows = String::new();
        let e = log.epoch;
        let _ = writeln!(rows, "{e},l_rec,{}", log.l_rec);
        let _ = writeln!(rows, "{e},l_con,{}", log.l_con);
        if let Some(ce) = log.ce {
            let _ = writeln!(rows, "{e},ce,{ce}");
        }
        for (name, p) in self.domains.iter().zip(&log.mean_p) {
            let _ = writeln!(rows, "{e},mean_p/{name},{p}");
        }
        append(&self.scalars, &rows)?;
        if let Some(l) = log.classifier_loss {
            append(&self.classifier, &format!("{e},{l}\n"))?;
        }
        Ok(())
    }
}

fn append(path: &Path, text: &str) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Parse `logs/scalars.csv` into series name -> [(epoch, value)].
pub fn read_scalars(run_dir: &Path) -> Result<BTreeMap<String, Vec<(usize, f64)>>> {
    let path = run_dir.join("logs").join("scalars.csv");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let mut parts = line.splitn(3, ',');
        let parsed = (|| {
            let e = parts.next()?.parse().ok()?;
            let s = parts.next()?.to_string();
            let v = parts.next()?.parse().ok()?;
            Some((e, s, v))
        })();
        let (e, s, v) = parsed.ok_or_else(|| Error::data(format!("{}:{}: malformed row {line:?}", path.display(), n + 1)))?;
        out.entry(s).or_default().push((e, v));
    }
    Ok(out)
}
