//! A small pre-norm vision transformer that exposes its attention logits.
//!
//! Frames are cut into non-overlapping square patches, linearly projected
//! and summed with a learned positional embedding. There is no class token:
//! classification pools token means, so every row of an attention matrix
//! corresponds to an image patch.
//!
//! A block is split into [`Backbone::block_attention`] and
//! [`Backbone::block_mlp`] so that callers can inject adapters between the
//! two residual branches and read every frame's logits before continuing.

use rand::Rng;

use crate::autodiff::{concat, Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::params::{init_bounded, init_uniform, Component, ParamId, ParamStore, Session};
use crate::tensor::Tensor;
use crate::weights::WeightTable;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub image_px: usize,
    pub patch_px: usize,
    pub channels: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_px: 32,
            patch_px: 8,
            channels: 3,
            d_model: 64,
            heads: 4,
            blocks: 4,
            mlp_ratio: 4.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_px == 0 || self.image_px % self.patch_px != 0 {
            return Err(Error::Validation(format!(
                "image_px {} is not divisible by patch_px {}",
                self.image_px, self.patch_px
            )));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Validation(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.n_patches() < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 patches, config gives {}",
                self.n_patches()
            )));
        }
        if self.blocks == 0 || self.channels == 0 || self.mlp_hidden() == 0 {
            return Err(Error::Validation("blocks, channels and mlp width must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_px / self.patch_px
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.d_model as f64 * self.mlp_ratio).round() as usize
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_px * self.patch_px
    }

    /// Every backbone tensor name with its shape, in creation order.
    pub fn expected_tensors(&self) -> Vec<(String, Vec<usize>)> {
        let (d, h) = (self.d_model, self.mlp_hidden());
        let mut out = vec![
            ("backbone.patch.w".to_string(), vec![self.patch_dim(), d]),
            ("backbone.patch.b".to_string(), vec![d]),
            ("backbone.pos".to_string(), vec![self.n_patches(), d]),
        ];
        for l in 0..self.blocks {
            let p = format!("backbone.block{l}");
            out.extend([
                (format!("{p}.ln1.g"), vec![d]),
                (format!("{p}.ln1.b"), vec![d]),
                (format!("{p}.attn.wq"), vec![d, d]),
                (format!("{p}.attn.wk"), vec![d, d]),
                (format!("{p}.attn.wv"), vec![d, d]),
                (format!("{p}.attn.wo"), vec![d, d]),
                (format!("{p}.ln2.g"), vec![d]),
                (format!("{p}.ln2.b"), vec![d]),
                (format!("{p}.mlp.w1"), vec![d, h]),
                (format!("{p}.mlp.b1"), vec![h]),
                (format!("{p}.mlp.w2"), vec![h, d]),
                (format!("{p}.mlp.b2"), vec![d]),
            ]);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.expected_tensors()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Weights of one transformer block. Per-head projections are column
/// slices of `wq`, `wk` and `wv`.
#[derive(Clone, Debug)]
pub struct BlockWeights {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockWeights>,
}

/// Graph-side attention trace of one block for one frame.
#[derive(Clone, Debug)]
pub struct BlockAttention<'g> {
    /// Pre-softmax logits `QKᵀ/√d_K`, one `N×N` matrix per head.
    pub logits: Vec<Var<'g>>,
    pub queries: Vec<Var<'g>>,
    pub keys: Vec<Var<'g>>,
}

/// Tensor-valued attention logits of one block for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    pub block: usize,
    pub frame: usize,
    pub heads: Vec<Tensor>,
}

/// Per-frame output of [`backbone_forward`].
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub maps: Vec<AttentionMaps>,
    pub queries: Vec<Vec<Tensor>>,
    pub keys: Vec<Vec<Tensor>>,
}

impl AttentionRecord {
    pub fn block(&self, block: usize) -> Option<&AttentionMaps> {
        self.maps.iter().find(|m| m.block == block)
    }

    /// Number of recorded `N×N` matrices (blocks × heads).
    pub fn matrix_count(&self) -> usize {
        self.maps.iter().map(|m| m.heads.len()).sum()
    }
}

/// Graph-side trace of a full backbone pass over one frame.
pub struct FrameTrace<'g> {
    /// Token states after every block.
    pub states: Vec<Var<'g>>,
    pub attention: Vec<BlockAttention<'g>>,
}

impl Backbone {
    /// Registers freshly initialized (frozen) backbone weights in `store`.
    pub fn init<R: Rng + ?Sized>(config: BackboneConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut ids = Vec::new();
        for (name, shape) in config.expected_tensors() {
            let value = init_for(&name, shape, &config, rng);
            ids.push(store.add(name, value, false, Component::Backbone));
        }
        Ok(Self::from_ids(config, &ids))
    }

    /// Registers backbone weights read from `table`, after checking every
    /// expected name and shape. All offending names are reported at once.
    pub fn from_table(config: BackboneConfig, table: &WeightTable, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = config.expected_tensors();
        let mut offending = Vec::new();
        for (name, shape) in &expected {
            match table.get(name) {
                Ok(t) if t.shape() == shape.as_slice() => {}
                Ok(t) => offending.push(format!("{name} (shape {:?}, expected {:?})", t.shape(), shape)),
                Err(_) => offending.push(format!("{name} (missing)")),
            }
        }
        if !offending.is_empty() {
            return Err(Error::Validation(format!(
                "weights do not match backbone config: {}",
                offending.join(", ")
            )));
        }
        for (name, _) in table.iter() {
            if name.starts_with("backbone.") && !expected.iter().any(|(n, _)| n == name) {
                log::warn!("ignoring unused backbone tensor `{name}`");
            }
        }
        let ids: Vec<ParamId> = expected
            .into_iter()
            .map(|(name, _)| {
                let t = table.get(&name).expect("checked above").clone();
                store.add(name, t, false, Component::Backbone)
            })
            .collect();
        Ok(Self::from_ids(config, &ids))
    }

    fn from_ids(config: BackboneConfig, ids: &[ParamId]) -> Self {
        let blocks = ids[3..]
            .chunks_exact(12)
            .map(|c| BlockWeights {
                ln1_g: c[0],
                ln1_b: c[1],
                wq: c[2],
                wk: c[3],
                wv: c[4],
                wo: c[5],
                ln2_g: c[6],
                ln2_b: c[7],
                w1: c[8],
                b1: c[9],
                w2: c[10],
                b2: c[11],
            })
            .collect();
        Self {
            config,
            patch_w: ids[0],
            patch_b: ids[1],
            pos: ids[2],
            blocks,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.patch_w, self.patch_b, self.pos];
        for b in &self.blocks {
            ids.extend([b.ln1_g, b.ln1_b, b.wq, b.wk, b.wv, b.wo, b.ln2_g, b.ln2_b, b.w1, b.b1, b.w2, b.b2]);
        }
        ids
    }

    /// Rearranges a `C×H×W` frame into an `N×(C·p·p)` patch matrix,
    /// patches in row-major grid order.
    pub fn patch_matrix(&self, frame: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        if frame.shape() != [c.channels, c.image_px, c.image_px] {
            return Err(Error::Validation(format!(
                "frame shape {:?} does not match {}×{}×{}",
                frame.shape(),
                c.channels,
                c.image_px,
                c.image_px
            )));
        }
        let (g, p, img) = (c.grid(), c.patch_px, c.image_px);
        let mut out = Vec::with_capacity(c.n_patches() * c.patch_dim());
        for gy in 0..g {
            for gx in 0..g {
                for ch in 0..c.channels {
                    for y in 0..p {
                        let row = (ch * img + gy * p + y) * img + gx * p;
                        out.extend_from_slice(&frame.data()[row..row + p]);
                    }
                }
            }
        }
        Tensor::new(vec![c.n_patches(), c.patch_dim()], out)
    }

    /// Patch tokens `N×d_model`.
    pub fn patchify<'g>(&self, sess: &Session<'g, '_>, frame: &Tensor) -> Result<Var<'g>> {
        let patches = sess.constant(self.patch_matrix(frame)?);
        patches
            .matmul(&sess.p(self.patch_w))?
            .add_bias(&sess.p(self.patch_b))?
            .add(&sess.p(self.pos))
    }

    /// Multi-head self-attention on already-normalized tokens.
    pub fn mhsa<'g>(&self, sess: &Session<'g, '_>, block: usize, x: &Var<'g>) -> Result<(Var<'g>, BlockAttention<'g>)> {
        let w = &self.blocks[block];
        let dk = self.config.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let q = x.matmul(&sess.p(w.wq))?;
        let k = x.matmul(&sess.p(w.wk))?;
        let v = x.matmul(&sess.p(w.wv))?;
        let mut trace = BlockAttention {
            logits: Vec::new(),
            queries: Vec::new(),
            keys: Vec::new(),
        };
        let mut outs = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = q.narrow(1, h * dk, dk)?;
            let kh = k.narrow(1, h * dk, dk)?;
            let vh = v.narrow(1, h * dk, dk)?;
            let logits = qh.matmul(&kh.transpose()?)?.scale(scale);
            let attn = logits.softmax(1)?;
            outs.push(attn.matmul(&vh)?);
            trace.logits.push(logits);
            trace.queries.push(qh);
            trace.keys.push(kh);
        }
        let out = concat(&outs, 1)?.matmul(&sess.p(w.wo))?;
        Ok((out, trace))
    }

    /// `MHSA(LN1(x))`, the attention branch of the block (without the
    /// residual add).
    pub fn block_attention<'g>(
        &self,
        sess: &Session<'g, '_>,
        block: usize,
        x: &Var<'g>,
    ) -> Result<(Var<'g>, BlockAttention<'g>)> {
        let w = &self.blocks[block];
        let normed = x.layer_norm(&sess.p(w.ln1_g), &sess.p(w.ln1_b), LN_EPS)?;
        self.mhsa(sess, block, &normed)
    }

    /// `MLP(LN2(h))`, the feed-forward branch (without the residual add).
    pub fn block_mlp<'g>(&self, sess: &Session<'g, '_>, block: usize, h: &Var<'g>) -> Result<Var<'g>> {
        let w = &self.blocks[block];
        h.layer_norm(&sess.p(w.ln2_g), &sess.p(w.ln2_b), LN_EPS)?
            .matmul(&sess.p(w.w1))?
            .add_bias(&sess.p(w.b1))?
            .relu()
            .matmul(&sess.p(w.w2))?
            .add_bias(&sess.p(w.b2))
    }

    /// Full pre-norm residual block.
    pub fn block_forward<'g>(
        &self,
        sess: &Session<'g, '_>,
        block: usize,
        x: &Var<'g>,
    ) -> Result<(Var<'g>, BlockAttention<'g>)> {
        let (attn, trace) = self.block_attention(sess, block, x)?;
        let h = x.add(&attn)?;
        let out = h.add(&self.block_mlp(sess, block, &h)?)?;
        Ok((out, trace))
    }

    pub fn forward_frame<'g>(&self, sess: &Session<'g, '_>, frame: &Tensor) -> Result<FrameTrace<'g>> {
        let mut x = self.patchify(sess, frame)?;
        let mut trace = FrameTrace {
            states: Vec::with_capacity(self.blocks.len()),
            attention: Vec::with_capacity(self.blocks.len()),
        };
        for l in 0..self.blocks.len() {
            let (out, att) = self.block_forward(sess, l, &x)?;
            trace.states.push(out);
            trace.attention.push(att);
            x = out;
        }
        Ok(trace)
    }
}

fn init_for<R: Rng + ?Sized>(name: &str, shape: Vec<usize>, c: &BackboneConfig, rng: &mut R) -> Tensor {
    let leaf = name.rsplit('.').next().unwrap_or("");
    let kind = name.rsplit('.').nth(1).unwrap_or("");
    match (kind, leaf) {
        (_, "pos") => init_bounded(shape, 0.5, rng),
        ("ln1" | "ln2", "g") => Tensor::ones(shape),
        ("ln1" | "ln2", "b") | ("patch", "b") | ("mlp", "b1") | ("mlp", "b2") => Tensor::zeros(shape),
        ("patch", "w") => init_uniform(shape, c.patch_dim(), rng),
        ("mlp", "w2") => init_uniform(shape, c.mlp_hidden(), rng),
        _ => init_uniform(shape, c.d_model, rng),
    }
}

/// Runs the backbone on one frame with no gradient tracking and returns
/// token states after every block (`L×N×d_model`) plus the attention
/// record (`L·H` matrices).
pub fn backbone_forward(
    backbone: &Backbone,
    store: &ParamStore,
    frame: &Tensor,
    frame_index: usize,
) -> Result<(Tensor, AttentionRecord)> {
    let g = Graph::new();
    let sess = Session::new(&g, store);
    let trace = backbone.forward_frame(&sess, frame)?;
    let c = &backbone.config;
    let mut states = Vec::with_capacity(c.blocks * c.n_patches() * c.d_model);
    for s in &trace.states {
        states.extend_from_slice(s.value().data());
    }
    let record = AttentionRecord {
        maps: trace
            .attention
            .iter()
            .enumerate()
            .map(|(block, a)| AttentionMaps {
                block,
                frame: frame_index,
                heads: a.logits.iter().map(|v| (*v.value()).clone()).collect(),
            })
            .collect(),
        queries: trace
            .attention
            .iter()
            .map(|a| a.queries.iter().map(|v| (*v.value()).clone()).collect())
            .collect(),
        keys: trace
            .attention
            .iter()
            .map(|a| a.keys.iter().map(|v| (*v.value()).clone()).collect())
            .collect(),
    };
    let states = Tensor::new(vec![c.blocks, c.n_patches(), c.d_model], states)?;
    Ok((states, record))
}

/// Mean-pools final-frame tokens and applies the linear probe `w`
/// (`d_model×K`) and bias `b` (`K`), giving a `1×K` logit row.
pub fn frozen_branch_logits<'g>(tokens: &Var<'g>, w: &Var<'g>, b: &Var<'g>) -> Result<Var<'g>> {
    let (_, d) = tokens.value().dims2()?;
    if w.shape()[0] != d {
        return Err(dim_err(format!("probe expects width {}, tokens have {d}", w.shape()[0])));
    }
    tokens.mean(0)?.reshape(vec![1, d])?.matmul(w)?.add_bias(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            image_px: 8,
            patch_px: 4,
            channels: 1,
            d_model: 8,
            heads: 2,
            blocks: 2,
            mlp_ratio: 2.0,
        }
    }

    fn build(config: BackboneConfig, seed: u64) -> (ParamStore, Backbone) {
        let mut store = ParamStore::new();
        let bb = Backbone::init(config, &mut store, &mut seeded(seed)).unwrap();
        (store, bb)
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig::default().validate().is_ok());
        assert_eq!(BackboneConfig::default().n_patches(), 16);
        let mut c = tiny();
        c.patch_px = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.patch_px = 8;
        assert!(c.validate().is_err(), "single patch must be rejected");
    }

    #[test]
    fn patchify_zero_frame_gives_positional_embedding() {
        let (mut store, bb) = build(tiny(), 1);
        store.set_value(bb.patch_w, Tensor::zeros(vec![16, 8])).unwrap();
        let frame = Tensor::zeros(vec![1, 8, 8]);
        let g = Graph::new();
        let sess = Session::new(&g, &store);
        let tokens = bb.patchify(&sess, &frame).unwrap();
        assert_eq!(*tokens.value(), *store.value(bb.pos));
    }

    #[test]
    fn patchify_rejects_wrong_extent() {
        let (store, bb) = build(tiny(), 1);
        let g = Graph::new();
        let sess = Session::new(&g, &store);
        assert!(matches!(
            bb.patchify(&sess, &Tensor::zeros(vec![1, 8, 7])),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn patch_matrix_layout() {
        let (_, bb) = build(tiny(), 1);
        let frame = Tensor::new(vec![1, 8, 8], (0..64).map(|v| v as f64).collect()).unwrap();
        let p = bb.patch_matrix(&frame).unwrap();
        assert_eq!(p.shape(), &[4, 16]);
        // second patch of the first grid row starts at column 4
        assert_eq!(&p.row(1)[..4], &[4.0, 5.0, 6.0, 7.0]);
        assert_eq!(&p.row(2)[..4], &[32.0, 33.0, 34.0, 35.0]);
    }

    #[test]
    fn single_token_attention_is_value_path() {
        let (store, bb) = build(tiny(), 2);
        let g = Graph::new();
        let sess = Session::new(&g, &store);
        let mut rng = seeded(9);
        let x = g.constant(Tensor::uniform(vec![1, 8], 1.0, &mut rng));
        let (out, trace) = bb.mhsa(&sess, 0, &x).unwrap();
        for l in &trace.logits {
            assert_eq!(l.value().shape(), &[1, 1]);
            assert_eq!(l.softmax(1).unwrap().value().data(), &[1.0]);
        }
        let w = &bb.blocks[0];
        let expect = x.matmul(&sess.p(w.wv)).unwrap().matmul(&sess.p(w.wo)).unwrap();
        assert!(out.value().max_abs_diff(&expect.value()) < 1e-12);
    }

    #[test]
    fn identical_tokens_get_identical_attention_rows() {
        let (store, bb) = build(tiny(), 3);
        let g = Graph::new();
        let sess = Session::new(&g, &store);
        let mut rng = seeded(4);
        let row = Tensor::uniform(vec![1, 8], 1.0, &mut rng);
        let other = Tensor::uniform(vec![1, 8], 1.0, &mut rng);
        let mut data = row.data().to_vec();
        data.extend_from_slice(other.data());
        data.extend_from_slice(row.data());
        let x = g.constant(Tensor::new(vec![3, 8], data).unwrap());
        let (_, trace) = bb.mhsa(&sess, 0, &x).unwrap();
        for l in &trace.logits {
            let a = l.softmax(1).unwrap().value();
            let mut r0 = a.row(0).to_vec();
            r0.sort_by(f64::total_cmp);
            let mut r2 = a.row(2).to_vec();
            r2.sort_by(f64::total_cmp);
            assert_eq!(r0, r2);
        }
    }

    #[test]
    fn recorded_logits_match_recomputation() {
        let (store, bb) = build(BackboneConfig::default(), 5);
        let mut rng = seeded(6);
        let frame = Tensor::uniform(vec![3, 32, 32], 1.0, &mut rng);
        let (states, record) = backbone_forward(&bb, &store, &frame, 0).unwrap();
        assert_eq!(states.shape(), &[4, 16, 64]);
        assert_eq!(record.matrix_count(), 16);
        let dk = 16.0f64;
        for (l, maps) in record.maps.iter().enumerate() {
            for h in 0..4 {
                let q = &record.queries[l][h];
                let k = &record.keys[l][h];
                for i in 0..16 {
                    for j in 0..16 {
                        let dot: f64 = q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum();
                        assert!((maps.heads[h].at2(i, j) - dot / dk.sqrt()).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_output_projections_make_block_identity() {
        let (mut store, bb) = build(tiny(), 7);
        store.set_value(bb.blocks[0].wo, Tensor::zeros(vec![8, 8])).unwrap();
        store.set_value(bb.blocks[0].w2, Tensor::zeros(vec![16, 8])).unwrap();
        let g = Graph::new();
        let sess = Session::new(&g, &store);
        let x = g.constant(Tensor::uniform(vec![4, 8], 1.0, &mut seeded(1)));
        let (y, _) = bb.block_forward(&sess, 0, &x).unwrap();
        assert_eq!(*y.value(), *x.value());
    }

    #[test]
    fn forward_is_deterministic_and_frames_independent() {
        let (store, bb) = build(BackboneConfig::default(), 8);
        let frame = Tensor::uniform(vec![3, 32, 32], 1.0, &mut seeded(2));
        let (s1, r1) = backbone_forward(&bb, &store, &frame, 0).unwrap();
        let (s2, r2) = backbone_forward(&bb, &store, &frame, 0).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(r1.maps, r2.maps);
    }

    #[test]
    fn from_table_lists_offending_names() {
        let (store, _) = build(tiny(), 1);
        let mut table = store.to_table();
        table.insert("backbone.block0.attn.wq", Tensor::zeros(vec![3, 3]));
        let mut other = WeightTable::new();
        for (n, t) in table.iter() {
            if n != "backbone.pos" {
                other.insert(n, t.clone());
            }
        }
        let err = Backbone::from_table(tiny(), &other, &mut ParamStore::new()).unwrap_err().to_string();
        assert!(err.contains("backbone.pos (missing)"), "{err}");
        assert!(err.contains("backbone.block0.attn.wq"), "{err}");
    }

    #[test]
    fn probe_examples() {
        let g = Graph::new();
        let tokens = g.constant(Tensor::uniform(vec![4, 8], 1.0, &mut seeded(1)));
        let w = g.param(Tensor::zeros(vec![8, 3]));
        let b = g.param(Tensor::zeros(vec![3]));
        let logits = frozen_branch_logits(&tokens, &w, &b).unwrap();
        assert_eq!(logits.value().data(), &[0.0; 3]);

        let w = g.constant(Tensor::uniform(vec![8, 3], 1.0, &mut seeded(2)));
        let row = Tensor::uniform(vec![1, 8], 1.0, &mut seeded(3));
        let many: Vec<f64> = (0..5).flat_map(|_| row.data().to_vec()).collect();
        let few = frozen_branch_logits(&g.constant(row.clone()), &w, &b).unwrap().value();
        let lots = frozen_branch_logits(&g.constant(Tensor::new(vec![5, 8], many).unwrap()), &w, &b)
            .unwrap()
            .value();
        assert!(few.max_abs_diff(&lots) < 1e-14);
    }
}
