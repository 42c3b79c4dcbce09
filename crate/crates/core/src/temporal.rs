//! Temporal processing units (sequence model, temporal squeeze, linear
//! head) and logit fusion.
//!
//! Every unit consumes a `T×r` sequence (one patch-mean-pooled adapter
//! embedding per frame) and returns a `1×K` logit row.

use rand::Rng;

use crate::autodiff::{concat, Var};
use crate::encoder::EncoderLayer;
use crate::error::{dim_err, Error, Result};
use crate::params::{init_bounded, init_uniform, Component, ParamId, ParamStore, Session};
use crate::tensor::Tensor;

pub const DEFAULT_HIDDEN: usize = 32;
pub const TCN_DILATIONS: [usize; 3] = [1, 2, 4];
pub const TCN_KERNEL: usize = 3;
pub const TENC_HEADS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TpmKind {
    Lstm,
    Tcn,
    Tenc,
}

impl TpmKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(Self::Lstm),
            "tcn" => Ok(Self::Tcn),
            "tenc" => Ok(Self::Tenc),
            other => Err(Error::Validation(format!("tpm must be lstm, tcn or tenc, got `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Lstm => "lstm",
            Self::Tcn => "tcn",
            Self::Tenc => "tenc",
        }
    }
}

/// Closed-form scalar count of one unit including its `hidden×K + K` head.
///
/// * lstm: input and recurrent weights for four gates plus one bias per
///   gate unit, `4(r·h + h·h + h)`.
/// * tcn: input projection `r·c + c`, then per dilation a kernel-3 causal
///   convolution `3c·c + c`.
/// * tenc: input projection `r·w + w`, positional table `max_len·w`, one
///   encoder layer with feed-forward width `2w`.
pub fn tpu_param_count(kind: TpmKind, r: usize, hidden: usize, k: usize, max_len: usize) -> usize {
    let head = hidden * k + k;
    let body = match kind {
        TpmKind::Lstm => 4 * (r * hidden + hidden * hidden + hidden),
        TpmKind::Tcn => r * hidden + hidden + TCN_DILATIONS.len() * (TCN_KERNEL * hidden * hidden + hidden),
        TpmKind::Tenc => r * hidden + hidden + max_len * hidden + EncoderLayer::param_count(hidden, 2 * hidden),
    };
    body + head
}

#[derive(Clone, Debug)]
enum Body {
    Lstm {
        wx: ParamId,
        wh: ParamId,
        b: ParamId,
    },
    Tcn {
        w_in: ParamId,
        b_in: ParamId,
        convs: Vec<(ParamId, ParamId)>,
    },
    Tenc {
        w_in: ParamId,
        b_in: ParamId,
        pos: ParamId,
        layer: EncoderLayer,
    },
}

#[derive(Clone, Debug)]
pub struct TemporalUnit {
    pub kind: TpmKind,
    pub r: usize,
    pub hidden: usize,
    pub k: usize,
    pub max_len: usize,
    body: Body,
    head_w: ParamId,
    head_b: ParamId,
}

impl TemporalUnit {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        prefix: &str,
        kind: TpmKind,
        r: usize,
        hidden: usize,
        k: usize,
        max_len: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let c = Component::Temporal;
        let add = |store: &mut ParamStore, name: &str, t: Tensor| store.add(format!("{prefix}.{name}"), t, true, c);
        let body = match kind {
            TpmKind::Lstm => Body::Lstm {
                wx: add(store, "lstm.wx", init_uniform(vec![r, 4 * hidden], hidden, rng)),
                wh: add(store, "lstm.wh", init_uniform(vec![hidden, 4 * hidden], hidden, rng)),
                b: add(store, "lstm.b", Tensor::zeros(vec![4 * hidden])),
            },
            TpmKind::Tcn => {
                let w_in = add(store, "tcn.in.w", init_uniform(vec![r, hidden], r, rng));
                let b_in = add(store, "tcn.in.b", Tensor::zeros(vec![hidden]));
                let convs = TCN_DILATIONS
                    .iter()
                    .map(|d| {
                        let w = init_uniform(vec![TCN_KERNEL * hidden, hidden], TCN_KERNEL * hidden, rng);
                        (
                            add(store, &format!("tcn.conv{d}.w"), w),
                            add(store, &format!("tcn.conv{d}.b"), Tensor::zeros(vec![hidden])),
                        )
                    })
                    .collect();
                Body::Tcn { w_in, b_in, convs }
            }
            TpmKind::Tenc => {
                let w_in = add(store, "tenc.in.w", init_uniform(vec![r, hidden], r, rng));
                let b_in = add(store, "tenc.in.b", Tensor::zeros(vec![hidden]));
                let pos = add(store, "tenc.pos", init_bounded(vec![max_len, hidden], 0.5, rng));
                let layer = EncoderLayer::init(&format!("{prefix}.tenc"), hidden, TENC_HEADS, 2 * hidden, c, store, rng);
                Body::Tenc { w_in, b_in, pos, layer }
            }
        };
        let head_w = add(store, "head.w", init_uniform(vec![hidden, k], hidden, rng));
        let head_b = add(store, "head.b", Tensor::zeros(vec![k]));
        Self {
            kind,
            r,
            hidden,
            k,
            max_len,
            body,
            head_w,
            head_b,
        }
    }

    pub fn param_count(&self) -> usize {
        tpu_param_count(self.kind, self.r, self.hidden, self.k, self.max_len)
    }

    pub fn head_ids(&self) -> (ParamId, ParamId) {
        (self.head_w, self.head_b)
    }

    /// Temporal features before the head: `1×hidden`.
    pub fn features<'g>(&self, sess: &Session<'g, '_>, seq: &Var<'g>) -> Result<Var<'g>> {
        let shape = seq.shape();
        if shape.len() != 2 || shape[1] != self.r {
            return Err(dim_err(format!("temporal unit expects T×{} input, got {:?}", self.r, shape)));
        }
        let t = shape[0];
        if t == 0 {
            return Err(Error::Validation("temporal unit needs a sequence of length at least 1".into()));
        }
        let h = self.hidden;
        match &self.body {
            Body::Lstm { wx, wh, b } => {
                let xg = seq.matmul(&sess.p(*wx))?.add_bias(&sess.p(*b))?;
                let wh = sess.p(*wh);
                let mut hid: Option<Var<'g>> = None;
                let mut cell: Option<Var<'g>> = None;
                for step in 0..t {
                    let mut gates = xg.narrow(0, step, 1)?;
                    if let Some(hp) = hid {
                        gates = gates.add(&hp.matmul(&wh)?)?;
                    }
                    let i = gates.narrow(1, 0, h)?.sigmoid();
                    let f = gates.narrow(1, h, h)?.sigmoid();
                    let g = gates.narrow(1, 2 * h, h)?.tanh();
                    let o = gates.narrow(1, 3 * h, h)?.sigmoid();
                    let mut c = i.mul(&g)?;
                    if let Some(cp) = cell {
                        c = c.add(&f.mul(&cp)?)?;
                    }
                    hid = Some(o.mul(&c.tanh())?);
                    cell = Some(c);
                }
                Ok(hid.expect("sequence is nonempty"))
            }
            Body::Tcn { w_in, b_in, convs } => {
                let mut x = seq.matmul(&sess.p(*w_in))?.add_bias(&sess.p(*b_in))?;
                for (&d, &(w, b)) in TCN_DILATIONS.iter().zip(convs) {
                    let taps: Vec<Var<'g>> = (0..TCN_KERNEL).map(|j| x.shift_rows(j * d)).collect::<Result<_>>()?;
                    let y = concat(&taps, 1)?.matmul(&sess.p(w))?.add_bias(&sess.p(b))?.relu();
                    x = x.add(&y)?;
                }
                x.mean(0)?.reshape(vec![1, h])
            }
            Body::Tenc { w_in, b_in, pos, layer } => {
                if t > self.max_len {
                    return Err(Error::Validation(format!(
                        "sequence length {t} exceeds the positional table ({})",
                        self.max_len
                    )));
                }
                let x = seq
                    .matmul(&sess.p(*w_in))?
                    .add_bias(&sess.p(*b_in))?
                    .add(&sess.p(*pos).narrow(0, 0, t)?)?;
                layer.forward(sess, &x)?.mean(0)?.reshape(vec![1, h])
            }
        }
    }

    /// `1×K` logits for a `T×r` sequence.
    pub fn forward<'g>(&self, sess: &Session<'g, '_>, seq: &Var<'g>) -> Result<Var<'g>> {
        self.features(sess, seq)?
            .matmul(&sess.p(self.head_w))?
            .add_bias(&sess.p(self.head_b))
    }
}

#[derive(Clone, Debug)]
pub enum FusionRule {
    Mean,
    /// Fixed random `streams·K × K` map, never trained.
    FrozenLinear(ParamId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    Mean,
    FrozenLinear,
}

impl FusionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "frozen-linear" => Ok(Self::FrozenLinear),
            other => Err(Error::Validation(format!(
                "fusion must be mean or frozen-linear, got `{other}`"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mean => "mean",
            Self::FrozenLinear => "frozen-linear",
        }
    }
}

impl FusionRule {
    pub fn init<R: Rng + ?Sized>(mode: FusionMode, streams: usize, k: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        match mode {
            FusionMode::Mean => Self::Mean,
            FusionMode::FrozenLinear => Self::FrozenLinear(store.add(
                "fusion.w",
                init_uniform(vec![streams * k, k], streams * k, rng),
                false,
                Component::AdapterLinear,
            )),
        }
    }
}

/// Fuses `1×K` stream logits into one `1×K` row.
pub fn fuse_logits<'g>(sess: &Session<'g, '_>, streams: &[Var<'g>], rule: &FusionRule) -> Result<Var<'g>> {
    let first = streams
        .first()
        .ok_or_else(|| Error::Validation("fusion needs at least one logit stream".into()))?;
    let k = first.shape().last().copied().unwrap_or(0);
    if let Some(bad) = streams.iter().find(|s| s.shape() != vec![1, k]) {
        return Err(dim_err(format!(
            "logit streams must all be 1×{k}, found {:?}",
            bad.shape()
        )));
    }
    match rule {
        FusionRule::Mean => {
            let mut acc = *first;
            for s in &streams[1..] {
                acc = acc.add(s)?;
            }
            Ok(acc.scale(1.0 / streams.len() as f64))
        }
        FusionRule::FrozenLinear(w) => {
            let w = sess.p(*w);
            if w.shape()[0] != streams.len() * k {
                return Err(dim_err(format!(
                    "fusion matrix expects {} inputs, got {} streams of {k}",
                    w.shape()[0],
                    streams.len()
                )));
            }
            concat(streams, 1)?.matmul(&w)
        }
    }
}
