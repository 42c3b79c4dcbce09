//! The assembled video classifier: frozen backbone, adapters, flow,
//! temporal heads, frozen-branch probe and logit fusion.
//!
//! Frames `0..T-1` run through the adapted backbone; adapter `t` of a
//! placed block consumes the flow of frames `(t, t+1)`. The last frame runs
//! through the untouched backbone and feeds the linear probe. Blocks are
//! processed one at a time across all frames, since a block's flow needs
//! the attention of two frames.

use rand::Rng;

use crate::adapters::{adapter_param_count, flow_norm_param_count, Adapter, AdapterStyle, PlacementPolicy};
use crate::autodiff::{concat, Graph, Var};
use crate::backbone::{frozen_branch_logits, Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport, Leaf};
use crate::flow::{am_flow_static_vars, AligningEncoder, FlowVariant};
use crate::params::{init_uniform, Component, ParamId, ParamStore, Session};
use crate::rng::seeded_stream;
use crate::temporal::{fuse_logits, tpu_param_count, FusionMode, FusionRule, TemporalUnit, TpmKind, DEFAULT_HIDDEN};
use crate::tensor::Tensor;
use crate::weights::WeightTable;

pub const ALIGN_WIDTH: usize = 16;
pub const ALIGN_HEADS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Placement policy text, `all` or comma-separated block indices.
    pub blocks: String,
    pub flow: FlowVariant,
    pub tpm: TpmKind,
    pub tpm_hidden: usize,
    pub fusion: FusionMode,
    pub r: usize,
    pub frames: usize,
    pub categories: usize,
    pub style: AdapterStyle,
    pub align_width: usize,
    pub align_heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::default();
        Self {
            r: backbone.d_model / 4,
            backbone,
            blocks: "all".into(),
            flow: FlowVariant::Static,
            tpm: TpmKind::Lstm,
            tpm_hidden: DEFAULT_HIDDEN,
            fusion: FusionMode::Mean,
            frames: 8,
            categories: 4,
            style: AdapterStyle::Parallel,
            align_width: ALIGN_WIDTH,
            align_heads: ALIGN_HEADS,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration used for end-to-end gradient checks: 4 patches,
    /// width 8, 2 heads, 2 blocks, 3 frames.
    pub fn micro() -> Self {
        Self {
            backbone: BackboneConfig {
                image_px: 8,
                patch_px: 4,
                channels: 1,
                d_model: 8,
                heads: 2,
                blocks: 2,
                mlp_ratio: 2.0,
            },
            blocks: "all".into(),
            flow: FlowVariant::Static,
            tpm: TpmKind::Lstm,
            tpm_hidden: 4,
            fusion: FusionMode::Mean,
            r: 2,
            frames: 3,
            categories: 3,
            style: AdapterStyle::Parallel,
            align_width: 4,
            align_heads: 2,
        }
    }

    pub fn placement(&self) -> Result<PlacementPolicy> {
        PlacementPolicy::parse(&self.blocks, self.backbone.blocks)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.placement()?;
        let d = self.backbone.d_model;
        if self.r == 0 || self.r >= d {
            return Err(Error::Validation(format!("r must be in 1..{d}, got {}", self.r)));
        }
        if self.frames < 2 {
            return Err(Error::Validation(format!("frames must be at least 2, got {}", self.frames)));
        }
        if self.categories < 2 {
            return Err(Error::Validation(format!("categories must be at least 2, got {}", self.categories)));
        }
        if self.tpm_hidden == 0 {
            return Err(Error::Validation("tpm_hidden must be positive".into()));
        }
        if self.tpm == TpmKind::Tenc && self.tpm_hidden % crate::temporal::TENC_HEADS != 0 {
            return Err(Error::Validation(format!(
                "tpm_hidden {} must be divisible by {} for tpm = tenc",
                self.tpm_hidden,
                crate::temporal::TENC_HEADS
            )));
        }
        if self.flow == FlowVariant::Aligned
            && (self.align_width == 0 || self.align_heads == 0 || self.align_width % self.align_heads != 0)
        {
            return Err(Error::Validation(format!(
                "align_width {} must be a positive multiple of align_heads {}",
                self.align_width, self.align_heads
            )));
        }
        Ok(())
    }

    /// Flow channels seen by flow adapters.
    pub fn flow_channels(&self) -> usize {
        match self.flow {
            FlowVariant::Aligned => self.align_width,
            FlowVariant::Static | FlowVariant::Off => self.backbone.heads,
        }
    }

    /// Closed-form parameter counts per component.
    pub fn param_counts(&self) -> Result<ParamCounts> {
        self.validate()?;
        let placement = self.placement()?;
        let d = self.backbone.d_model;
        let k = self.categories;
        let p = placement.len();
        let l = self.backbone.blocks;
        let mut adapters = 0;
        for block in 0..l {
            adapters += if placement.contains(block) {
                adapter_param_count(d, self.r, self.flow_channels(), self.style) + flow_norm_param_count(d)
            } else {
                adapter_param_count(d, self.r, 0, self.style)
            };
            adapters += adapter_param_count(d, self.r, 0, self.style);
        }
        let probe = d * k + k;
        let fusion = match self.fusion {
            FusionMode::Mean => 0,
            FusionMode::FrozenLinear => placement.stream_count() * k * k,
        };
        let aligning = match self.flow {
            FlowVariant::Aligned => p * AligningEncoder::param_count(self.backbone.heads, self.align_width),
            _ => 0,
        };
        let temporal = 2 * p * tpu_param_count(self.tpm, self.r, self.tpm_hidden, k, self.frames - 1);
        Ok(ParamCounts {
            backbone: self.backbone.param_count(),
            adapters_linear: adapters + probe + fusion,
            aligning,
            temporal,
            frozen: self.backbone.param_count() + fusion,
        })
    }
}

/// Scalar parameter counts in the four-way component split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub backbone: usize,
    pub adapters_linear: usize,
    pub aligning: usize,
    pub temporal: usize,
    pub frozen: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.backbone + self.adapters_linear + self.aligning + self.temporal
    }

    pub fn trainable(&self) -> usize {
        self.total() - self.frozen
    }

    pub fn component(&self, c: Component) -> usize {
        match c {
            Component::Backbone => self.backbone,
            Component::AdapterLinear => self.adapters_linear,
            Component::Aligning => self.aligning,
            Component::Temporal => self.temporal,
        }
    }

    /// Counts enumerated from the tensors of a store.
    pub fn enumerate(store: &ParamStore) -> Self {
        Self {
            backbone: store.component_count(Component::Backbone),
            adapters_linear: store.component_count(Component::AdapterLinear),
            aligning: store.component_count(Component::Aligning),
            temporal: store.component_count(Component::Temporal),
            frozen: store.counts().1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockAdapters {
    pub attn: Adapter,
    pub mlp: Adapter,
    pub placed: bool,
    pub aligner: Option<AligningEncoder>,
    pub tpu_attn: Option<TemporalUnit>,
    pub tpu_mlp: Option<TemporalUnit>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub placement: PlacementPolicy,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub blocks: Vec<BlockAdapters>,
    pub probe_w: ParamId,
    pub probe_b: ParamId,
    pub fusion: FusionRule,
}

/// Graph-level outputs of one forward pass.
pub struct ForwardVars<'g> {
    /// `1×K` fused logits.
    pub logits: Var<'g>,
    /// Stream logits: per placed block the attention-side then MLP-side
    /// temporal head, then the frozen-branch probe.
    pub streams: Vec<Var<'g>>,
    /// Per placed block, flow of every frame pair.
    pub flows: Vec<(usize, Vec<Var<'g>>)>,
    /// Per placed block, `(T-1)×r` pooled embeddings of both adapters.
    pub embeddings: Vec<(usize, Var<'g>, Var<'g>)>,
    /// Final token states of every frame.
    pub tokens: Vec<Var<'g>>,
}

/// Tensor copy of [`ForwardVars`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub streams: Vec<Tensor>,
    pub flows: Vec<(usize, Vec<Tensor>)>,
    pub embeddings: Vec<(usize, Tensor, Tensor)>,
    pub tokens: Vec<Tensor>,
}

impl ForwardVars<'_> {
    pub fn to_output(&self) -> ForwardOutput {
        let t = |v: &Var<'_>| (*v.value()).clone();
        ForwardOutput {
            logits: t(&self.logits),
            streams: self.streams.iter().map(t).collect(),
            flows: self.flows.iter().map(|(b, f)| (*b, f.iter().map(t).collect())).collect(),
            embeddings: self.embeddings.iter().map(|(b, a, m)| (*b, t(a), t(m))).collect(),
            tokens: self.tokens.iter().map(t).collect(),
        }
    }
}

impl Model {
    /// Fresh model with a randomly initialized frozen backbone.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let backbone = Backbone::init(config.backbone.clone(), &mut store, &mut seeded_stream(seed, 0))?;
        Self::assemble(config, store, backbone, seed)
    }

    /// Model whose frozen backbone comes from a weight table.
    pub fn with_backbone(config: ModelConfig, table: &WeightTable, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let backbone = Backbone::from_table(config.backbone.clone(), table, &mut store)?;
        Self::assemble(config, store, backbone, seed)
    }

    fn assemble(config: ModelConfig, mut store: ParamStore, backbone: Backbone, seed: u64) -> Result<Self> {
        let placement = config.placement()?;
        let rng = &mut seeded_stream(seed, 1);
        let d = config.backbone.d_model;
        let k = config.categories;
        let mut blocks = Vec::with_capacity(config.backbone.blocks);
        for l in 0..config.backbone.blocks {
            let placed = placement.contains(l);
            let flow_channels = if placed { config.flow_channels() } else { 0 };
            let attn = Adapter::init(&format!("adapter.block{l}.attn"), d, config.r, flow_channels, config.style, &mut store, rng);
            let mlp = Adapter::init(&format!("adapter.block{l}.mlp"), d, config.r, 0, config.style, &mut store, rng);
            let aligner = (placed && config.flow == FlowVariant::Aligned).then(|| {
                AligningEncoder::init(
                    &format!("align.block{l}"),
                    config.backbone.heads,
                    config.align_width,
                    config.align_heads,
                    &mut store,
                    rng,
                )
            });
            let tpu = |side: &str, store: &mut ParamStore, rng: &mut _| {
                TemporalUnit::init(
                    &format!("tpu.block{l}.{side}"),
                    config.tpm,
                    config.r,
                    config.tpm_hidden,
                    k,
                    config.frames - 1,
                    store,
                    rng,
                )
            };
            let (tpu_attn, tpu_mlp) = if placed {
                (Some(tpu("attn", &mut store, rng)), Some(tpu("mlp", &mut store, rng)))
            } else {
                (None, None)
            };
            blocks.push(BlockAdapters {
                attn,
                mlp,
                placed,
                aligner,
                tpu_attn,
                tpu_mlp,
            });
        }
        let probe_w = store.add("probe.w", init_uniform(vec![d, k], d, rng), true, Component::AdapterLinear);
        let probe_b = store.add("probe.b", Tensor::zeros(vec![k]), true, Component::AdapterLinear);
        let fusion = FusionRule::init(config.fusion, placement.stream_count(), k, &mut store, rng);
        Ok(Self {
            config,
            placement,
            store,
            backbone,
            blocks,
            probe_w,
            probe_b,
            fusion,
        })
    }

    pub fn param_counts(&self) -> ParamCounts {
        ParamCounts::enumerate(&self.store)
    }

    /// Sets every adapter scale to `value`.
    pub fn set_scales(&mut self, value: f64) {
        let ids: Vec<ParamId> = self
            .blocks
            .iter()
            .flat_map(|b| [b.attn.s, b.mlp.s])
            .flatten()
            .collect();
        for id in ids {
            *self.store.value_mut(id) = Tensor::scalar(value);
        }
    }

    fn check_frames(&self, frames: &[Tensor]) -> Result<()> {
        if frames.len() < 2 {
            return Err(Error::Validation(format!("clip needs at least 2 frames, got {}", frames.len())));
        }
        if frames.len() != self.config.frames {
            return Err(Error::Validation(format!(
                "model expects {} frames, clip has {}",
                self.config.frames,
                frames.len()
            )));
        }
        Ok(())
    }

    /// Flow of one frame pair at a placed block.
    fn pair_flow<'g>(
        &self,
        sess: &Session<'g, '_>,
        block: &BlockAdapters,
        heads_t: &[Var<'g>],
        heads_t1: &[Var<'g>],
    ) -> Result<Var<'g>> {
        match self.config.flow {
            FlowVariant::Static => am_flow_static_vars(heads_t, heads_t1),
            FlowVariant::Aligned => block
                .aligner
                .as_ref()
                .ok_or_else(|| Error::Validation("aligned flow needs aligning-encoder weights".into()))?
                .flow(sess, heads_t, heads_t1),
            FlowVariant::Off => {
                let n = self.config.backbone.n_patches();
                Ok(sess.constant(Tensor::zeros(vec![n, self.config.backbone.heads])))
            }
        }
    }

    /// Builds the full forward graph for one clip.
    pub fn forward_vars<'g>(&self, sess: &Session<'g, '_>, frames: &[Tensor]) -> Result<ForwardVars<'g>> {
        self.check_frames(frames)?;
        let t_count = frames.len();
        let last = t_count - 1;
        let mut x: Vec<Var<'g>> = frames
            .iter()
            .map(|f| self.backbone.patchify(sess, f))
            .collect::<Result<_>>()?;
        let mut flows = Vec::new();
        let mut embeddings = Vec::new();
        let mut streams = Vec::new();
        for (l, block) in self.blocks.iter().enumerate() {
            let mut attn = Vec::with_capacity(t_count);
            let mut logits = Vec::with_capacity(t_count);
            for xt in &x {
                let (a, trace) = self.backbone.block_attention(sess, l, xt)?;
                attn.push(a);
                logits.push(trace.logits);
            }
            let block_flows: Option<Vec<Var<'g>>> = if block.placed {
                Some(
                    (0..last)
                        .map(|t| self.pair_flow(sess, block, &logits[t], &logits[t + 1]))
                        .collect::<Result<_>>()?,
                )
            } else {
                None
            };
            let mut e_attn = Vec::with_capacity(last);
            let mut e_mlp = Vec::with_capacity(last);
            let mut next = Vec::with_capacity(t_count);
            for t in 0..t_count {
                let xt = x[t];
                if t == last {
                    let h = xt.add(&attn[t])?;
                    next.push(h.add(&self.backbone.block_mlp(sess, l, &h)?)?);
                    continue;
                }
                let flow = block_flows.as_ref().map(|f| &f[t]);
                let out = match self.config.style {
                    AdapterStyle::Parallel => {
                        let (d1, e1) = block.attn.branch(sess, &xt, flow)?;
                        let h = xt.add(&attn[t])?.add(&d1)?;
                        let (d2, e2) = block.mlp.branch(sess, &h, None)?;
                        e_attn.push(e1);
                        e_mlp.push(e2);
                        h.add(&self.backbone.block_mlp(sess, l, &h)?)?.add(&d2)?
                    }
                    AdapterStyle::Serial => {
                        let h0 = xt.add(&attn[t])?;
                        let (h, e1) = block.attn.forward(sess, &h0, flow)?;
                        let o0 = h.add(&self.backbone.block_mlp(sess, l, &h)?)?;
                        let (o, e2) = block.mlp.forward(sess, &o0, None)?;
                        e_attn.push(e1);
                        e_mlp.push(e2);
                        o
                    }
                };
                next.push(out);
            }
            x = next;
            if let Some(f) = block_flows {
                let pool = |es: &[Var<'g>]| -> Result<Var<'g>> {
                    let rows: Vec<Var<'g>> = es
                        .iter()
                        .map(|e| e.mean(0)?.reshape(vec![1, self.config.r]))
                        .collect::<Result<_>>()?;
                    concat(&rows, 0)
                };
                let seq_attn = pool(&e_attn)?;
                let seq_mlp = pool(&e_mlp)?;
                let (ta, tm) = (block.tpu_attn.as_ref(), block.tpu_mlp.as_ref());
                let (ta, tm) = ta.zip(tm).expect("placed blocks carry temporal units");
                streams.push(ta.forward(sess, &seq_attn)?);
                streams.push(tm.forward(sess, &seq_mlp)?);
                flows.push((l, f));
                embeddings.push((l, seq_attn, seq_mlp));
            }
        }
        streams.push(frozen_branch_logits(&x[last], &sess.p(self.probe_w), &sess.p(self.probe_b))?);
        let logits = fuse_logits(sess, &streams, &self.fusion)?;
        Ok(ForwardVars {
            logits,
            streams,
            flows,
            embeddings,
            tokens: x,
        })
    }

    /// Forward pass without gradient bookkeeping beyond one throwaway graph.
    pub fn forward(&self, frames: &[Tensor]) -> Result<ForwardOutput> {
        let g = Graph::new();
        let sess = Session::new(&g, &self.store);
        Ok(self.forward_vars(&sess, frames)?.to_output())
    }

    /// Parameters of the trainable parts, in store order.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }
}

/// Finite-difference check of the cross-entropy loss of one clip with
/// respect to every trainable parameter.
pub fn model_grad_check(model: &Model, frames: &[Tensor], label: usize, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let ids = model.trainable_ids();
    let leaves: Vec<Leaf> = ids
        .iter()
        .map(|&id| Leaf::new(model.store.param(id).name.clone(), model.store.value(id).clone()))
        .collect();
    grad_check(&leaves, opts, |g, vars| {
        let bindings: Vec<_> = ids.iter().copied().zip(vars.iter().copied()).collect();
        let sess = Session::with_bindings(g, &model.store, &bindings)?;
        model.forward_vars(&sess, frames)?.logits.cross_entropy(&[label])
    })
}

/// Random clip of the model's frame geometry, for tests and gradient checks.
pub fn random_frames<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Vec<Tensor> {
    let b = &config.backbone;
    (0..config.frames)
        .map(|_| Tensor::uniform(vec![b.channels, b.image_px, b.image_px], 1.0, rng).map(|v| 0.5 + 0.5 * v))
        .collect()
}
