//! A single pre-norm transformer-encoder layer, shared by the aligning
//! encoder and the transformer temporal head.

use rand::Rng;

use crate::autodiff::{concat, Var};
use crate::backbone::LN_EPS;
use crate::error::Result;
use crate::params::{init_uniform, Component, ParamId, ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub width: usize,
    pub heads: usize,
    pub ff: usize,
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl EncoderLayer {
    /// Scalar parameter count: two norms, four square projections and a
    /// two-layer feed-forward with biases.
    pub fn param_count(width: usize, ff: usize) -> usize {
        2 * 2 * width + 4 * width * width + (width * ff + ff) + (ff * width + width)
    }

    pub fn init<R: Rng + ?Sized>(
        prefix: &str,
        width: usize,
        heads: usize,
        ff: usize,
        component: Component,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && width % heads == 0, "encoder width {width} not divisible by {heads} heads");
        let mut add = |name: &str, t: Tensor| store.add(format!("{prefix}.{name}"), t, true, component);
        Self {
            width,
            heads,
            ff,
            ln1_g: add("ln1.g", Tensor::ones(vec![width])),
            ln1_b: add("ln1.b", Tensor::zeros(vec![width])),
            wq: add("wq", init_uniform(vec![width, width], width, rng)),
            wk: add("wk", init_uniform(vec![width, width], width, rng)),
            wv: add("wv", init_uniform(vec![width, width], width, rng)),
            wo: add("wo", init_uniform(vec![width, width], width, rng)),
            ln2_g: add("ln2.g", Tensor::ones(vec![width])),
            ln2_b: add("ln2.b", Tensor::zeros(vec![width])),
            w1: add("ff.w1", init_uniform(vec![width, ff], width, rng)),
            b1: add("ff.b1", Tensor::zeros(vec![ff])),
            w2: add("ff.w2", init_uniform(vec![ff, width], ff, rng)),
            b2: add("ff.b2", Tensor::zeros(vec![width])),
        }
    }

    /// Output projections of both residual branches, for tests that need
    /// the layer to reduce to the identity.
    pub fn output_projections(&self) -> [ParamId; 2] {
        [self.wo, self.w2]
    }

    /// `x + MHSA(LN(x))` followed by `h + FF(LN(h))` over the rows of `x`.
    pub fn forward<'g>(&self, sess: &Session<'g, '_>, x: &Var<'g>) -> Result<Var<'g>> {
        let dk = self.width / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let n = x.layer_norm(&sess.p(self.ln1_g), &sess.p(self.ln1_b), LN_EPS)?;
        let q = n.matmul(&sess.p(self.wq))?;
        let k = n.matmul(&sess.p(self.wk))?;
        let v = n.matmul(&sess.p(self.wv))?;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.narrow(1, h * dk, dk)?;
            let kh = k.narrow(1, h * dk, dk)?;
            let vh = v.narrow(1, h * dk, dk)?;
            let a = qh.matmul(&kh.transpose()?)?.scale(scale).softmax(1)?;
            outs.push(a.matmul(&vh)?);
        }
        let h = x.add(&concat(&outs, 1)?.matmul(&sess.p(self.wo))?)?;
        let f = h
            .layer_norm(&sess.p(self.ln2_g), &sess.p(self.ln2_b), LN_EPS)?
            .matmul(&sess.p(self.w1))?
            .add_bias(&sess.p(self.b1))?
            .relu()
            .matmul(&sess.p(self.w2))?
            .add_bias(&sess.p(self.b2))?;
        h.add(&f)
    }
}
