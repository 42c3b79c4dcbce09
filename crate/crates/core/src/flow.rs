//! Attention-map flow: per-patch motion features from the attention logits
//! of two consecutive frames.
//!
//! Two variants are provided:
//!
//! * **static** (fixed camera): per head, `softmax_rows(|X_t - X_{t+1}|)`
//!   is column-summed, i.e. multiplied from the left by an all-ones vector
//!   after transposition. Each entry is the total attention mass the
//!   differenced map assigns to one patch, so per head the entries sum to
//!   `N` and identical frames give exactly `1` everywhere.
//! * **aligned** (moving camera): each frame's attention is first reduced
//!   to a per-patch summary (column sums of the row-softmaxed logits),
//!   passed through a shared [`AligningEncoder`], and the two encodings are
//!   differenced in absolute value. Identical frames give exactly `0`.
//!
//! Heads are kept as separate channels, so the static variant has `F = H`
//! and the aligned variant `F = d_a`.

use rand::Rng;

use crate::autodiff::{concat, Graph, Var};
use crate::backbone::AttentionMaps;
use crate::encoder::EncoderLayer;
use crate::error::{dim_err, Error, Result};
use crate::params::{init_uniform, Component, ParamId, ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowVariant {
    /// No flow: adapters receive all-zero flow features.
    Off,
    Static,
    Aligned,
}

impl FlowVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Self::Off),
            "static" => Ok(Self::Static),
            "aligned" => Ok(Self::Aligned),
            other => Err(Error::Validation(format!(
                "flow must be off, static or aligned, got `{other}`"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Off => "off",
            Self::Static => "static",
            Self::Aligned => "aligned",
        }
    }
}

fn check_heads(a: &[Var<'_>], b: &[Var<'_>]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(dim_err(format!("head counts differ: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// Static-camera flow `N×H` from per-head logits of frames `t` and `t+1`.
pub fn am_flow_static_vars<'g>(heads_t: &[Var<'g>], heads_t1: &[Var<'g>]) -> Result<Var<'g>> {
    check_heads(heads_t, heads_t1)?;
    let mut cols = Vec::with_capacity(heads_t.len());
    for (a, b) in heads_t.iter().zip(heads_t1) {
        let n = a.shape()[0];
        let col = a.sub(b)?.abs().softmax(1)?.sum(0)?.reshape(vec![n, 1])?;
        cols.push(col);
    }
    concat(&cols, 1)
}

/// Per-patch attention significance `N×H`: column sums of the row-softmaxed
/// logits of every head.
pub fn attention_summary_vars<'g>(heads: &[Var<'g>]) -> Result<Var<'g>> {
    let mut cols = Vec::with_capacity(heads.len());
    for x in heads {
        let n = x.shape()[0];
        cols.push(x.softmax(1)?.sum(0)?.reshape(vec![n, 1])?);
    }
    concat(&cols, 1)
}

/// Aligned flow: `|a_t - a_{t+1}|`.
pub fn am_flow_aligned<'g>(a_t: &Var<'g>, a_t1: &Var<'g>) -> Result<Var<'g>> {
    if a_t.shape() != a_t1.shape() {
        return Err(dim_err(format!(
            "aligned flow operands differ: {:?} vs {:?}",
            a_t.shape(),
            a_t1.shape()
        )));
    }
    Ok(a_t.sub(a_t1)?.abs())
}

fn check_pair(t: &AttentionMaps, t1: &AttentionMaps) -> Result<()> {
    if t.block != t1.block {
        return Err(Error::Validation(format!(
            "attention maps come from different blocks ({} and {})",
            t.block, t1.block
        )));
    }
    if t1.frame != t.frame + 1 {
        return Err(Error::Validation(format!(
            "frames {} and {} are not consecutive",
            t.frame, t1.frame
        )));
    }
    if t.heads.len() != t1.heads.len() {
        return Err(dim_err("head counts differ"));
    }
    Ok(())
}

/// Tensor-level static flow with frame/block metadata checks.
pub fn am_flow_static(t: &AttentionMaps, t1: &AttentionMaps) -> Result<Tensor> {
    check_pair(t, t1)?;
    let g = Graph::new();
    let a: Vec<_> = t.heads.iter().map(|h| g.constant(h.clone())).collect();
    let b: Vec<_> = t1.heads.iter().map(|h| g.constant(h.clone())).collect();
    Ok((*am_flow_static_vars(&a, &b)?.value()).clone())
}

pub fn attention_summary(maps: &AttentionMaps) -> Result<Tensor> {
    let g = Graph::new();
    let heads: Vec<_> = maps.heads.iter().map(|h| g.constant(h.clone())).collect();
    Ok((*attention_summary_vars(&heads)?.value()).clone())
}

/// Input projection `H → d_a` followed by one encoder layer over the `N`
/// patch positions. One instance serves both frames of every pair.
#[derive(Clone, Debug)]
pub struct AligningEncoder {
    pub in_channels: usize,
    pub width: usize,
    proj_w: ParamId,
    proj_b: ParamId,
    pub layer: EncoderLayer,
}

impl AligningEncoder {
    pub fn param_count(in_channels: usize, width: usize) -> usize {
        in_channels * width + width + EncoderLayer::param_count(width, 2 * width)
    }

    pub fn init<R: Rng + ?Sized>(
        prefix: &str,
        in_channels: usize,
        width: usize,
        heads: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let proj_w = store.add(
            format!("{prefix}.proj.w"),
            init_uniform(vec![in_channels, width], in_channels, rng),
            true,
            Component::Aligning,
        );
        let proj_b = store.add(format!("{prefix}.proj.b"), Tensor::zeros(vec![width]), true, Component::Aligning);
        let layer = EncoderLayer::init(prefix, width, heads, 2 * width, Component::Aligning, store, rng);
        Self {
            in_channels,
            width,
            proj_w,
            proj_b,
            layer,
        }
    }

    /// Projection of a summary, before the encoder layer.
    pub fn project<'g>(&self, sess: &Session<'g, '_>, summary: &Var<'g>) -> Result<Var<'g>> {
        summary.matmul(&sess.p(self.proj_w))?.add_bias(&sess.p(self.proj_b))
    }

    pub fn align<'g>(&self, sess: &Session<'g, '_>, summary: &Var<'g>) -> Result<Var<'g>> {
        let x = self.project(sess, summary)?;
        self.layer.forward(sess, &x)
    }

    /// Aligned flow `N×d_a` for one frame pair.
    pub fn flow<'g>(&self, sess: &Session<'g, '_>, heads_t: &[Var<'g>], heads_t1: &[Var<'g>]) -> Result<Var<'g>> {
        check_heads(heads_t, heads_t1)?;
        let a = self.align(sess, &attention_summary_vars(heads_t)?)?;
        let b = self.align(sess, &attention_summary_vars(heads_t1)?)?;
        am_flow_aligned(&a, &b)
    }
}

/// Flow for every consecutive pair of one block's attention maps, in frame
/// order; entry `i` pairs frames `i` and `i+1`.
pub fn flow_sequence(
    maps: &[AttentionMaps],
    variant: FlowVariant,
    aligner: Option<(&AligningEncoder, &ParamStore)>,
) -> Result<Vec<Tensor>> {
    if maps.len() < 2 {
        return Err(Error::Validation(format!(
            "flow needs at least 2 frames, got {}",
            maps.len()
        )));
    }
    let mut out = Vec::with_capacity(maps.len() - 1);
    for pair in maps.windows(2) {
        check_pair(&pair[0], &pair[1])?;
        let flow = match variant {
            FlowVariant::Static => am_flow_static(&pair[0], &pair[1])?,
            FlowVariant::Off => {
                let n = pair[0].heads[0].shape()[0];
                Tensor::zeros(vec![n, pair[0].heads.len()])
            }
            FlowVariant::Aligned => {
                let (enc, store) = aligner
                    .ok_or_else(|| Error::Validation("aligned flow needs aligning-encoder weights".into()))?;
                let g = Graph::new();
                let sess = Session::new(&g, store);
                let a: Vec<_> = pair[0].heads.iter().map(|h| g.constant(h.clone())).collect();
                let b: Vec<_> = pair[1].heads.iter().map(|h| g.constant(h.clone())).collect();
                let v = enc.flow(&sess, &a, &b)?.value();
                (*v).clone()
            }
        };
        out.push(flow);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;

    fn maps(block: usize, frame: usize, heads: Vec<Tensor>) -> AttentionMaps {
        AttentionMaps { block, frame, heads }
    }

    fn random_heads(h: usize, n: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = seeded(seed);
        (0..h).map(|_| Tensor::uniform(vec![n, n], 3.0, &mut rng)).collect()
    }

    #[test]
    fn identical_logits_give_unit_flow() {
        let heads = random_heads(3, 5, 1);
        let f = am_flow_static(&maps(0, 0, heads.clone()), &maps(0, 1, heads)).unwrap();
        assert_eq!(f.shape(), &[5, 3]);
        for v in f.data() {
            assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn two_patch_hand_example() {
        let d = Tensor::from_rows(&[&[0.0, 3f64.ln()], &[0.0, 0.0]]).unwrap();
        let f = am_flow_static(&maps(0, 0, vec![d]), &maps(0, 1, vec![Tensor::zeros(vec![2, 2])])).unwrap();
        assert_abs_diff_eq!(f.data()[0], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(f.data()[1], 1.25, epsilon = 1e-15);
    }

    #[test]
    fn static_flow_conserves_mass_and_is_symmetric() {
        let a = random_heads(4, 6, 2);
        let b = random_heads(4, 6, 3);
        let f = am_flow_static(&maps(1, 2, a.clone()), &maps(1, 3, b.clone())).unwrap();
        for h in 0..4 {
            let s: f64 = (0..6).map(|i| f.at2(i, h)).sum();
            assert_abs_diff_eq!(s, 6.0, epsilon = 1e-9);
        }
        let r = am_flow_static(&maps(1, 2, b), &maps(1, 3, a)).unwrap();
        assert_eq!(f, r);
    }

    #[test]
    fn metadata_mismatch_is_rejected() {
        let a = random_heads(2, 3, 1);
        assert!(matches!(
            am_flow_static(&maps(0, 0, a.clone()), &maps(1, 1, a.clone())),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            am_flow_static(&maps(0, 0, a.clone()), &maps(0, 2, a)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn summary_examples() {
        let s = attention_summary(&maps(0, 0, vec![Tensor::zeros(vec![4, 4])])).unwrap();
        assert_eq!(s.data(), &[1.0; 4]);

        let mut dominant = Tensor::zeros(vec![4, 4]);
        for i in 0..4 {
            dominant.data_mut()[i * 4 + 2] = 20.0;
        }
        let s = attention_summary(&maps(0, 0, vec![dominant])).unwrap();
        // softmax saturation: each row puts 1/(1+3e^-20) on column 2
        let p = 1.0 / (1.0 + 3.0 * (-20f64).exp());
        assert_abs_diff_eq!(s.data()[2], 4.0 * p, epsilon = 1e-12);
        assert!(s.data()[0] < 1e-7);

        let r = attention_summary(&maps(0, 0, random_heads(3, 7, 9))).unwrap();
        for h in 0..3 {
            let total: f64 = (0..7).map(|i| r.at2(i, h)).sum();
            assert_abs_diff_eq!(total, 7.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn aligned_flow_properties() {
        let g = Graph::new();
        let mut rng = seeded(4);
        let a = g.constant(Tensor::uniform(vec![5, 3], 1.0, &mut rng));
        let b = g.constant(Tensor::uniform(vec![5, 3], 1.0, &mut rng));
        assert_eq!(am_flow_aligned(&a, &a).unwrap().value().data(), &[0.0; 15]);
        let ab = am_flow_aligned(&a, &b).unwrap().value();
        let ba = am_flow_aligned(&b, &a).unwrap().value();
        assert_eq!(ab, ba);
        let scaled = am_flow_aligned(&a.scale(-2.5), &b.scale(-2.5)).unwrap().value();
        assert!(scaled.max_abs_diff(&ab.map(|v| v * 2.5)) < 1e-12);
        let c = g.constant(Tensor::zeros(vec![5, 2]));
        assert!(am_flow_aligned(&a, &c).is_err());
    }

    #[test]
    fn aligner_with_zero_output_projections_is_projection() {
        let mut store = ParamStore::new();
        let enc = AligningEncoder::init("align", 4, 16, 4, &mut store, &mut seeded(1));
        for id in enc.layer.output_projections() {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::zeros(shape)).unwrap();
        }
        let g = Graph::new();
        let sess = Session::new(&g, &store);
        let s = g.constant(Tensor::uniform(vec![6, 4], 2.0, &mut seeded(2)));
        let aligned = enc.align(&sess, &s).unwrap().value();
        let projected = enc.project(&sess, &s).unwrap().value();
        assert_eq!(aligned, projected);
    }

    #[test]
    fn aligner_gradients_reach_weights() {
        let mut store = ParamStore::new();
        let enc = AligningEncoder::init("align", 2, 8, 2, &mut store, &mut seeded(3));
        let g = Graph::new();
        let sess = Session::new(&g, &store);
        let a = random_heads(2, 4, 5);
        let b = random_heads(2, 4, 6);
        let av: Vec<_> = a.into_iter().map(|t| g.constant(t)).collect();
        let bv: Vec<_> = b.into_iter().map(|t| g.constant(t)).collect();
        let loss = enc.flow(&sess, &av, &bv).unwrap().sum_all();
        let mut grads = g.backward(loss).unwrap();
        let pg = sess.param_grads(&mut grads);
        let nonzero = pg
            .iter()
            .flatten()
            .filter(|t| t.data().iter().any(|v| *v != 0.0))
            .count();
        assert!(nonzero >= 10, "only {nonzero} aligning tensors received gradient");
    }

    #[test]
    fn sequence_pairs_consecutive_frames() {
        let frames: Vec<_> = (0..5).map(|t| maps(0, t, random_heads(2, 4, 100))).collect();
        let mut changed = frames.clone();
        changed[4] = maps(0, 4, random_heads(2, 4, 7));
        // frames 0..=3 identical, frame 4 differs: only the last pair moves
        let flows = flow_sequence(&changed, FlowVariant::Static, None).unwrap();
        assert_eq!(flows.len(), 4);
        for f in &flows[..3] {
            assert!(f.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        }
        assert!(flows[3].data().iter().any(|v| (v - 1.0).abs() > 1e-3));

        assert!(flow_sequence(&frames[..1], FlowVariant::Static, None).is_err());
        let off = flow_sequence(&frames[..2], FlowVariant::Off, None).unwrap();
        assert_eq!(off[0].data(), &[0.0; 8]);
        assert!(flow_sequence(&frames[..2], FlowVariant::Aligned, None).is_err());
    }

    #[test]
    fn aligned_sequence_zero_motion() {
        let mut store = ParamStore::new();
        let enc = AligningEncoder::init("align", 2, 8, 2, &mut store, &mut seeded(3));
        let frames: Vec<_> = (0..3).map(|t| maps(0, t, random_heads(2, 4, 11))).collect();
        let flows = flow_sequence(&frames, FlowVariant::Aligned, Some((&enc, &store))).unwrap();
        for f in flows {
            assert_eq!(f.shape(), &[4, 8]);
            assert!(f.data().iter().all(|v| *v == 0.0));
        }
    }
}
