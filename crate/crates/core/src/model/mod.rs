//! The dual-branch masked autoencoder: a semantic encoder, a lightweight
//! variation encoder, a decoder conditioned on the variation summary, and the
//! two small heads (domain classifier, label head).

mod masking;
mod params;
mod patch;
mod pos;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use masking::{len_keep, random_masking, MaskPlan};
pub use params::{trunc_normal, Binder, ParamGroup, ParamStore};
pub use patch::{patchify, unpatchify, PatchGrid};
pub use pos::sincos_2d;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, Tensor};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub semantic_depth: usize,
    pub variation_depth: usize,
    pub decoder_depth: usize,
    pub decoder_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub mask_ratio: f64,
    pub num_domains: usize,
    /// 0 means unlabeled; no label head is allocated.
    pub num_classes: usize,
    /// When false the variation branch is absent and the decoder is unconditioned
    /// (plain single-encoder masked autoencoder).
    pub use_variation: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            channels: 3,
            patch_size: 4,
            embed_dim: 32,
            semantic_depth: 4,
            variation_depth: 2,
            decoder_depth: 1,
            decoder_dim: 32,
            num_heads: 4,
            mlp_ratio: 4,
            mask_ratio: 0.8,
            num_domains: 3,
            num_classes: 10,
            use_variation: true,
        }
    }
}

impl ModelConfig {
    /// The gradient-check model: H=8, 2/1/1 blocks, 4x4 images, patch 2.
    pub fn tiny() -> Self {
        Self {
            image_size: 4,
            channels: 3,
            patch_size: 2,
            embed_dim: 8,
            semantic_depth: 2,
            variation_depth: 1,
            decoder_depth: 1,
            decoder_dim: 8,
            num_heads: 2,
            mlp_ratio: 2,
            mask_ratio: 0.5,
            num_domains: 2,
            num_classes: 0,
            use_variation: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.channels == 0 {
            return Err(Error::config("channels must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::config(format!("mask_ratio {} outside [0, 1)", self.mask_ratio)));
        }
        if self.num_heads == 0 {
            return Err(Error::config("num_heads must be >= 1"));
        }
        for (name, dim) in [("embed_dim", self.embed_dim), ("decoder_dim", self.decoder_dim)] {
            if dim == 0 || dim % self.num_heads != 0 {
                return Err(Error::config(format!(
                    "{name} {dim} must be divisible by num_heads {}",
                    self.num_heads
                )));
            }
            if dim % 4 != 0 {
                return Err(Error::config(format!(
                    "{name} {dim} must be divisible by 4 for 2-D sine-cosine positions"
                )));
            }
        }
        for (name, depth) in [
            ("semantic_depth", self.semantic_depth),
            ("variation_depth", self.variation_depth),
            ("decoder_depth", self.decoder_depth),
        ] {
            if depth == 0 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("mlp_ratio must be >= 1"));
        }
        if self.num_domains < 2 {
            return Err(Error::config(format!(
                "num_domains {} must be >= 2",
                self.num_domains
            )));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn len_keep(&self) -> usize {
        len_keep(self.num_patches(), self.mask_ratio)
    }
}

/// Output of the semantic encoder.
#[derive(Clone, Copy, Debug)]
pub struct SemanticOut {
    /// `[B, 1 + K, H]`, row 0 is the [cls] token.
    pub tokens: Var,
    /// `[B, H]`
    pub cls: Var,
}

/// Tensor-valued latents for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPair {
    pub semantic_tokens: Tensor,
    pub semantic_cls: Tensor,
    pub variation_cls: Option<Tensor>,
}

/// Per-row probability vectors over domains.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainProbs {
    /// `[B, K]`
    pub probs: Tensor,
}

impl DomainProbs {
    pub fn row(&self, i: usize) -> &[f64] {
        self.probs.row(i)
    }

    pub fn batch(&self) -> usize {
        self.probs.rows()
    }

    pub fn from_logits(logits: &Tensor) -> Self {
        let mut probs = logits.clone();
        let k = probs.last_dim();
        for row in probs.data_mut().chunks_mut(k) {
            softmax_in_place(row);
        }
        Self { probs }
    }
}

#[derive(Clone, Debug)]
pub struct DisMae {
    cfg: ModelConfig,
    enc_pos: Vec<f64>,
    dec_pos: Vec<f64>,
}

impl DisMae {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let g = cfg.grid_side();
        let enc_pos = sincos_2d(g, g, cfg.embed_dim);
        let dec_pos = sincos_2d(g, g, cfg.decoder_dim);
        Ok(Self {
            cfg,
            enc_pos,
            dec_pos,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let c = &self.cfg;
        let (h, dd, p) = (c.embed_dim, c.decoder_dim, c.patch_dim());
        let mut store = ParamStore::new();
        let encoder = |store: &mut ParamStore, rng: &mut R, prefix: &str, depth: usize| {
            store.insert(format!("{prefix}patch.w"), trunc_normal(rng, &[p, h], INIT_STD));
            store.insert(format!("{prefix}patch.b"), Tensor::zeros(&[h]));
            store.insert(format!("{prefix}cls"), trunc_normal(rng, &[h], INIT_STD));
            for i in 0..depth {
                init_block(store, rng, &format!("{prefix}blocks.{i}."), h, c.mlp_ratio);
            }
            init_norm(store, &format!("{prefix}norm."), h);
        };
        encoder(&mut store, rng, "semantic.", c.semantic_depth);
        if c.use_variation {
            encoder(&mut store, rng, "variation.", c.variation_depth);
        }

        store.insert("decoder.embed.w", trunc_normal(rng, &[h, dd], INIT_STD));
        store.insert("decoder.embed.b", Tensor::zeros(&[dd]));
        store.insert("decoder.mask_token", trunc_normal(rng, &[dd], INIT_STD));
        if c.use_variation {
            store.insert("decoder.cond.w", trunc_normal(rng, &[h, dd], INIT_STD));
            store.insert("decoder.cond.b", Tensor::zeros(&[dd]));
        }
        for i in 0..c.decoder_depth {
            init_block(&mut store, rng, &format!("decoder.blocks.{i}."), dd, c.mlp_ratio);
        }
        init_norm(&mut store, "decoder.norm.", dd);
        store.insert("decoder.pred.w", trunc_normal(rng, &[dd, p], INIT_STD));
        store.insert("decoder.pred.b", Tensor::zeros(&[p]));

        // zero final layer: uniform propensity 1/K at step 0
        store.insert("domain_cls.fc1.w", trunc_normal(rng, &[h, h], INIT_STD));
        store.insert("domain_cls.fc1.b", Tensor::zeros(&[h]));
        store.insert("domain_cls.fc2.w", Tensor::zeros(&[h, c.num_domains]));
        store.insert("domain_cls.fc2.b", Tensor::zeros(&[c.num_domains]));

        if c.num_classes > 0 {
            store.insert("label_head.w", trunc_normal(rng, &[h, c.num_classes], INIT_STD));
            store.insert("label_head.b", Tensor::zeros(&[c.num_classes]));
        }
        store
    }

    /// Fresh zero-initialized label head with `classes` outputs.
    pub fn reset_label_head(&self, store: &mut ParamStore, classes: usize) {
        store.insert("label_head.w", Tensor::zeros(&[self.cfg.embed_dim, classes]));
        store.insert("label_head.b", Tensor::zeros(&[classes]));
    }

    fn block(&self, tape: &mut Tape, binder: &mut Binder<'_>, x: Var, prefix: &str) -> Var {
        let heads = self.cfg.num_heads;
        let p = |s: &str| format!("{prefix}{s}");
        let (g1, b1) = (binder.var(tape, &p("ln1.g")), binder.var(tape, &p("ln1.b")));
        let h = tape.layer_norm(x, g1, b1);
        let (wq, bq) = (binder.var(tape, &p("qkv.w")), binder.var(tape, &p("qkv.b")));
        let qkv = tape.linear(h, wq, Some(bq));
        let a = tape.attention(qkv, heads);
        let (wo, bo) = (binder.var(tape, &p("proj.w")), binder.var(tape, &p("proj.b")));
        let a = tape.linear(a, wo, Some(bo));
        let x = tape.add(x, a);
        let (g2, b2) = (binder.var(tape, &p("ln2.g")), binder.var(tape, &p("ln2.b")));
        let h = tape.layer_norm(x, g2, b2);
        let (w1, c1) = (binder.var(tape, &p("fc1.w")), binder.var(tape, &p("fc1.b")));
        let h = tape.linear(h, w1, Some(c1));
        let h = tape.gelu(h);
        let (w2, c2) = (binder.var(tape, &p("fc2.w")), binder.var(tape, &p("fc2.b")));
        let h = tape.linear(h, w2, Some(c2));
        tape.add(x, h)
    }

    fn norm(&self, tape: &mut Tape, binder: &mut Binder<'_>, x: Var, prefix: &str) -> Var {
        let g = binder.var(tape, &format!("{prefix}g"));
        let b = binder.var(tape, &format!("{prefix}b"));
        tape.layer_norm(x, g, b)
    }

    fn check_visible(&self, visible: &Tensor, plan: &MaskPlan) -> Result<()> {
        let s = visible.shape();
        if s.len() != 3 || s[0] != plan.batch() || s[1] != plan.len_keep || s[2] != self.cfg.patch_dim() {
            return Err(Error::shape(format!(
                "visible tokens {:?} do not match plan (batch {}, keep {}) and patch dim {}",
                s,
                plan.batch(),
                plan.len_keep,
                self.cfg.patch_dim()
            )));
        }
        Ok(())
    }

    /// Shared encoder body; returns `[B, 1 + K, H]` normalized tokens.
    fn encode(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        visible: &Tensor,
        plan: &MaskPlan,
        prefix: &str,
        depth: usize,
    ) -> Result<Var> {
        self.check_visible(visible, plan)?;
        if !binder.has(&format!("{prefix}cls")) {
            return Err(Error::shape(format!("parameters for {prefix} branch are missing")));
        }
        let h = self.cfg.embed_dim;
        let b = plan.batch();
        let x = tape.constant(visible.clone());
        let (w, bias) = (
            binder.var(tape, &format!("{prefix}patch.w")),
            binder.var(tape, &format!("{prefix}patch.b")),
        );
        let x = tape.linear(x, w, Some(bias));
        let mut pos = Vec::with_capacity(b * plan.len_keep * h);
        for vis in &plan.visible_idx {
            for &q in vis {
                pos.extend_from_slice(&self.enc_pos[q * h..(q + 1) * h]);
            }
        }
        let pos = tape.constant(Tensor::from_parts(vec![b, plan.len_keep, h], pos));
        let x = tape.add(x, pos);
        let cls = binder.var(tape, &format!("{prefix}cls"));
        let cls = tape.broadcast_token(cls, b);
        let mut x = tape.concat_tokens(cls, x);
        for i in 0..depth {
            x = self.block(tape, binder, x, &format!("{prefix}blocks.{i}."));
        }
        Ok(self.norm(tape, binder, x, &format!("{prefix}norm.")))
    }

    fn cls_row(&self, tape: &mut Tape, tokens: Var) -> Var {
        let b = tape.value(tokens).shape()[0];
        let c = tape.slice_tokens(tokens, 0, 1);
        tape.reshape(c, vec![b, self.cfg.embed_dim])
    }

    pub fn encode_semantic(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        visible: &Tensor,
        plan: &MaskPlan,
    ) -> Result<SemanticOut> {
        let tokens = self.encode(tape, binder, visible, plan, "semantic.", self.cfg.semantic_depth)?;
        let cls = self.cls_row(tape, tokens);
        Ok(SemanticOut { tokens, cls })
    }

    /// Variation summary `v^0` as `[B, H]`.
    pub fn encode_variation(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        visible: &Tensor,
        plan: &MaskPlan,
    ) -> Result<Var> {
        if !self.cfg.use_variation {
            return Err(Error::config("variation branch is disabled in this model"));
        }
        let tokens = self.encode(tape, binder, visible, plan, "variation.", self.cfg.variation_depth)?;
        Ok(self.cls_row(tape, tokens))
    }

    /// Reconstruct all `L` patch positions, `[N, L, P]`.
    ///
    /// `cond` is the per-row variation summary; it is projected into one extra
    /// decoder token that is dropped from the output.
    pub fn decode(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        tokens: Var,
        cond: Option<Var>,
        plan: &MaskPlan,
    ) -> Result<Var> {
        let ts = tape.value(tokens).shape().to_vec();
        let n = ts[0];
        if ts.len() != 3 || ts[1] != 1 + plan.len_keep || ts[2] != self.cfg.embed_dim || plan.batch() != n {
            return Err(Error::shape(format!(
                "semantic tokens {:?} inconsistent with plan (batch {}, keep {})",
                ts,
                plan.batch(),
                plan.len_keep
            )));
        }
        if let Some(c) = cond {
            let cs = tape.value(c).shape();
            if cs[0] != n {
                return Err(Error::shape(format!(
                    "semantic batch {n} != conditioning batch {}",
                    cs[0]
                )));
            }
        }
        if cond.is_some() != self.cfg.use_variation {
            return Err(Error::shape(if self.cfg.use_variation {
                "decoder requires a variation conditioning vector".to_string()
            } else {
                "decoder has no conditioning path (variation branch disabled)".to_string()
            }));
        }
        let l = plan.num_patches();
        let dd = self.cfg.decoder_dim;
        let (w, b) = (binder.var(tape, "decoder.embed.w"), binder.var(tape, "decoder.embed.b"));
        let x = tape.linear(tokens, w, Some(b));
        let mt = binder.var(tape, "decoder.mask_token");
        let x = tape.scatter_with_mask_token(x, mt, &plan.restore_perm, plan.len_keep);
        let mut pos = Vec::with_capacity(n * (1 + l) * dd);
        for _ in 0..n {
            pos.extend(std::iter::repeat_n(0.0, dd));
            pos.extend_from_slice(&self.dec_pos);
        }
        let pos = tape.constant(Tensor::from_parts(vec![n, 1 + l, dd], pos));
        let mut x = tape.add(x, pos);
        if let Some(c) = cond {
            let (w, b) = (binder.var(tape, "decoder.cond.w"), binder.var(tape, "decoder.cond.b"));
            let c = tape.linear(c, w, Some(b));
            let c = tape.reshape(c, vec![n, 1, dd]);
            x = tape.concat_tokens(x, c);
        }
        for i in 0..self.cfg.decoder_depth {
            x = self.block(tape, binder, x, &format!("decoder.blocks.{i}."));
        }
        let x = self.norm(tape, binder, x, "decoder.norm.");
        let (w, b) = (binder.var(tape, "decoder.pred.w"), binder.var(tape, "decoder.pred.b"));
        let y = tape.linear(x, w, Some(b));
        Ok(tape.slice_tokens(y, 1, l))
    }

    /// Two-layer MLP domain logits `[B, K]`.
    pub fn domain_logits(&self, tape: &mut Tape, binder: &mut Binder<'_>, s0: Var) -> Var {
        let (w1, b1) = (binder.var(tape, "domain_cls.fc1.w"), binder.var(tape, "domain_cls.fc1.b"));
        let h = tape.linear(s0, w1, Some(b1));
        let h = tape.gelu(h);
        let (w2, b2) = (binder.var(tape, "domain_cls.fc2.w"), binder.var(tape, "domain_cls.fc2.b"));
        tape.linear(h, w2, Some(b2))
    }

    pub fn label_logits(&self, tape: &mut Tape, binder: &mut Binder<'_>, s0: Var) -> Result<Var> {
        if !binder.has("label_head.w") {
            return Err(Error::config(
                "no label head: model is in unlabeled mode (num_classes = 0)",
            ));
        }
        let (w, b) = (binder.var(tape, "label_head.w"), binder.var(tape, "label_head.b"));
        Ok(tape.linear(s0, w, Some(b)))
    }

    // ---- tape-free helpers -------------------------------------------------

    /// Latents for a batch of patch grids under `plan`.
    pub fn latents(&self, params: &ParamStore, grid: &PatchGrid, plan: &MaskPlan) -> Result<LatentPair> {
        let mut tape = Tape::new();
        let mut binder = Binder::frozen(params);
        let visible = plan.gather_visible(&grid.tokens);
        let sem = self.encode_semantic(&mut tape, &mut binder, &visible, plan)?;
        let var = if self.cfg.use_variation {
            Some(self.encode_variation(&mut tape, &mut binder, &visible, plan)?)
        } else {
            None
        };
        Ok(LatentPair {
            semantic_tokens: tape.value(sem.tokens).clone(),
            semantic_cls: tape.value(sem.cls).clone(),
            variation_cls: var.map(|v| tape.value(v).clone()),
        })
    }

    /// `s^0` and (when present) `v^0` over full, unmasked images.
    pub fn embed_full(&self, params: &ParamStore, grid: &PatchGrid) -> Result<LatentPair> {
        let plan = MaskPlan::identity(grid.batch(), grid.num_patches());
        self.latents(params, grid, &plan)
    }

    pub fn classify_domain(&self, params: &ParamStore, s0: &Tensor) -> Result<DomainProbs> {
        if s0.shape().len() != 2 || s0.shape()[1] != self.cfg.embed_dim {
            return Err(Error::shape(format!("s0 {:?} is not [B, H]", s0.shape())));
        }
        let mut tape = Tape::new();
        let mut binder = Binder::frozen(params);
        let x = tape.constant(s0.clone());
        let logits = self.domain_logits(&mut tape, &mut binder, x);
        Ok(DomainProbs::from_logits(tape.value(logits)))
    }

    pub fn classify_label(&self, params: &ParamStore, s0: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = Binder::frozen(params);
        let x = tape.constant(s0.clone());
        let logits = self.label_logits(&mut tape, &mut binder, x)?;
        Ok(tape.value(logits).clone())
    }

    /// Decode tensor latents (rows of `tokens` paired with rows of `cond`).
    pub fn decode_tensors(
        &self,
        params: &ParamStore,
        tokens: &Tensor,
        cond: Option<&Tensor>,
        plan: &MaskPlan,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = Binder::frozen(params);
        let t = tape.constant(tokens.clone());
        let c = cond.map(|c| tape.constant(c.clone()));
        let y = self.decode(&mut tape, &mut binder, t, c, plan)?;
        Ok(tape.value(y).clone())
    }
}

fn init_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert(format!("{prefix}g"), Tensor::full(&[d], 1.0));
    store.insert(format!("{prefix}b"), Tensor::zeros(&[d]));
}

fn init_block<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, prefix: &str, d: usize, ratio: usize) {
    init_norm(store, &format!("{prefix}ln1."), d);
    store.insert(format!("{prefix}qkv.w"), trunc_normal(rng, &[d, 3 * d], INIT_STD));
    store.insert(format!("{prefix}qkv.b"), Tensor::zeros(&[3 * d]));
    store.insert(format!("{prefix}proj.w"), trunc_normal(rng, &[d, d], INIT_STD));
    store.insert(format!("{prefix}proj.b"), Tensor::zeros(&[d]));
    init_norm(store, &format!("{prefix}ln2."), d);
    store.insert(format!("{prefix}fc1.w"), trunc_normal(rng, &[d, ratio * d], INIT_STD));
    store.insert(format!("{prefix}fc1.b"), Tensor::zeros(&[ratio * d]));
    store.insert(format!("{prefix}fc2.w"), trunc_normal(rng, &[ratio * d, d], INIT_STD));
    store.insert(format!("{prefix}fc2.b"), Tensor::zeros(&[d]));
}
