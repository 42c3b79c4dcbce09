//! Bottleneck adapters beside the frozen sublayers and the block placement
//! policy.
//!
//! A parallel adapter adds `s · ReLU(x W_down) W_up` beside a sublayer; the
//! bottleneck activation `E = ReLU(x W_down)` is exposed for the temporal
//! heads. The flow-conditioned variant replaces the input by
//! `LN(x) ‖ flow` with its own trainable norm. A serial adapter instead
//! follows the sublayer output, unscaled.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;

use crate::autodiff::{concat, Var};
use crate::backbone::LN_EPS;
use crate::error::{dim_err, Error, Result};
use crate::params::{init_uniform, Component, ParamId, ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdapterStyle {
    Parallel,
    Serial,
}

impl AdapterStyle {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(Self::Parallel),
            "serial" => Ok(Self::Serial),
            other => Err(Error::Validation(format!(
                "adapter style must be parallel or serial, got `{other}`"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Parallel => "parallel",
            Self::Serial => "serial",
        }
    }
}

/// Scalar count of one adapter's projections and scale. `flow_channels` is
/// `0` for a plain adapter. Serial adapters carry no scale.
///
/// The trainable norm of a flow adapter (`2·d_model`) is counted separately
/// by [`flow_norm_param_count`].
pub fn adapter_param_count(d_model: usize, r: usize, flow_channels: usize, style: AdapterStyle) -> usize {
    let scale = match style {
        AdapterStyle::Parallel => 1,
        AdapterStyle::Serial => 0,
    };
    (d_model + flow_channels) * r + r * d_model + scale
}

pub fn flow_norm_param_count(d_model: usize) -> usize {
    2 * d_model
}

#[derive(Clone, Debug)]
pub struct Adapter {
    pub d_model: usize,
    pub r: usize,
    pub flow_channels: usize,
    pub style: AdapterStyle,
    pub w_down: ParamId,
    pub w_up: ParamId,
    pub s: Option<ParamId>,
    /// `(γ, β)` of the flow adapter's own norm.
    pub norm: Option<(ParamId, ParamId)>,
}

impl Adapter {
    /// Trainable adapter. `s` starts at zero so a parallel adapter
    /// initially leaves its sublayer unchanged.
    pub fn init<R: Rng + ?Sized>(
        prefix: &str,
        d_model: usize,
        r: usize,
        flow_channels: usize,
        style: AdapterStyle,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let c = Component::AdapterLinear;
        let d_in = d_model + flow_channels;
        let w_down = store.add(format!("{prefix}.w_down"), init_uniform(vec![d_in, r], d_in, rng), true, c);
        let w_up = store.add(format!("{prefix}.w_up"), init_uniform(vec![r, d_model], r, rng), true, c);
        let s = match style {
            AdapterStyle::Parallel => Some(store.add(format!("{prefix}.s"), Tensor::scalar(0.0), true, c)),
            AdapterStyle::Serial => None,
        };
        let norm = (flow_channels > 0).then(|| {
            (
                store.add(format!("{prefix}.ln.g"), Tensor::ones(vec![d_model]), true, c),
                store.add(format!("{prefix}.ln.b"), Tensor::zeros(vec![d_model]), true, c),
            )
        });
        Self {
            d_model,
            r,
            flow_channels,
            style,
            w_down,
            w_up,
            s,
            norm,
        }
    }

    pub fn param_count(&self) -> usize {
        adapter_param_count(self.d_model, self.r, self.flow_channels, self.style)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w_down, self.w_up];
        ids.extend(self.s);
        if let Some((g, b)) = self.norm {
            ids.extend([g, b]);
        }
        ids
    }

    fn check_width(&self, x: &Var<'_>) -> Result<()> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.d_model {
            return Err(dim_err(format!(
                "adapter expects N×{} input, got {:?}",
                self.d_model, shape
            )));
        }
        Ok(())
    }

    /// Bottleneck embedding `E` (`N×r`).
    pub fn embed<'g>(&self, sess: &Session<'g, '_>, x: &Var<'g>, flow: Option<&Var<'g>>) -> Result<Var<'g>> {
        self.check_width(x)?;
        let input = match (self.norm, flow) {
            (Some((g, b)), Some(flow)) => {
                let fs = flow.shape();
                if fs.len() != 2 || fs[1] != self.flow_channels || fs[0] != x.shape()[0] {
                    return Err(dim_err(format!(
                        "flow adapter expects {}×{} flow, got {:?}",
                        x.shape()[0],
                        self.flow_channels,
                        fs
                    )));
                }
                let normed = x.layer_norm(&sess.p(g), &sess.p(b), LN_EPS)?;
                concat(&[normed, *flow], 1)?
            }
            (None, None) => *x,
            (Some(_), None) => return Err(dim_err("flow adapter called without flow features")),
            (None, Some(_)) => return Err(dim_err("plain adapter called with flow features")),
        };
        Ok(input.matmul(&sess.p(self.w_down))?.relu())
    }

    /// The adapter's additive branch and `E`. Parallel: `s·E·W_up`;
    /// serial: `E·W_up`.
    pub fn branch<'g>(&self, sess: &Session<'g, '_>, x: &Var<'g>, flow: Option<&Var<'g>>) -> Result<(Var<'g>, Var<'g>)> {
        let e = self.embed(sess, x, flow)?;
        let up = e.matmul(&sess.p(self.w_up))?;
        let delta = match self.s {
            Some(s) => up.mul(&sess.p(s))?,
            None => up,
        };
        Ok((delta, e))
    }

    /// `x + branch(x)`, with `E`. For a flow adapter the residual is the
    /// raw `x`, not its normalization.
    pub fn forward<'g>(&self, sess: &Session<'g, '_>, x: &Var<'g>, flow: Option<&Var<'g>>) -> Result<(Var<'g>, Var<'g>)> {
        let (delta, e) = self.branch(sess, x, flow)?;
        Ok((x.add(&delta)?, e))
    }
}

/// Blocks that receive flow-conditioned adapters and temporal heads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlacementPolicy {
    blocks: BTreeSet<usize>,
    spec: String,
}

impl PlacementPolicy {
    /// Parses `all` or a comma-separated list of block indices.
    pub fn parse(spec: &str, n_blocks: usize) -> Result<Self> {
        let spec = spec.trim();
        let blocks: BTreeSet<usize> = if spec == "all" {
            (0..n_blocks).collect()
        } else {
            spec.split(',')
                .map(|p| {
                    let p = p.trim();
                    p.parse::<usize>()
                        .map_err(|_| Error::Validation(format!("blocks: `{p}` is not a block index")))
                })
                .collect::<Result<_>>()?
        };
        if blocks.is_empty() {
            return Err(Error::Validation("blocks: placement must name at least one block".into()));
        }
        if let Some(&bad) = blocks.iter().find(|&&b| b >= n_blocks) {
            return Err(Error::Validation(format!(
                "blocks: index {bad} out of range for a {n_blocks}-block backbone"
            )));
        }
        Ok(Self {
            blocks,
            spec: spec.to_string(),
        })
    }

    pub fn all(n_blocks: usize) -> Self {
        Self::parse("all", n_blocks).expect("backbone has at least one block")
    }

    pub fn contains(&self, block: usize) -> bool {
        self.blocks.contains(&block)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.blocks.iter().copied()
    }

    /// Logit streams fed to fusion: two temporal heads per placed block
    /// plus the frozen branch.
    pub fn stream_count(&self) -> usize {
        2 * self.blocks.len() + 1
    }
}

impl fmt::Display for PlacementPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.spec)
    }
}
