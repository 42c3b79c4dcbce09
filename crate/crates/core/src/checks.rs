//! Gradient-check suites: every differentiable operation and component on
//! small random inputs, and the assembled micro model end to end.

use rand::Rng;

use crate::adapters::{Adapter, AdapterStyle};
use crate::autodiff::{concat, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::encoder::EncoderLayer;
use crate::error::Result;
use crate::flow::{am_flow_static_vars, AligningEncoder, FlowVariant};
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport, Leaf};
use crate::model::{model_grad_check, random_frames, Model, ModelConfig};
use crate::params::{Component, ParamId, ParamStore, Session};
use crate::rng::{seeded, seeded_stream};
use crate::temporal::{fuse_logits, FusionMode, FusionRule, TemporalUnit, TpmKind};
use crate::tensor::Tensor;

/// Result of checking one named operation or component.
#[derive(Clone, Debug)]
pub struct ComponentCheck {
    pub name: String,
    pub report: GradCheckReport,
}

impl ComponentCheck {
    pub fn line(&self) -> String {
        let worst = self.report.worst_leaf().map(|l| l.name.as_str()).unwrap_or("-");
        format!(
            "{:<42} max_rel_err {:.3e}  worst leaf {:<14} {}",
            self.name,
            self.report.max_rel_err(),
            worst,
            if self.report.passed() { "ok" } else { "FAIL" }
        )
    }
}

/// Reduces any output to a scalar with fixed random weights so that
/// outputs with constant sums (softmax rows) still give informative
/// gradients.
fn probe<'g>(out: &Var<'g>) -> Result<Var<'g>> {
    let w = Tensor::uniform(out.shape(), 1.0, &mut seeded(0x9e37));
    Ok(out.mul(&out.graph().constant(w))?.sum_all())
}

fn rand(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(shape.to_vec(), 1.0, rng)
}

/// Checks a program whose leaves are `inputs` followed by the store's
/// parameters `ids`, bound through a [`Session`].
fn check_with_params<F>(store: &ParamStore, ids: &[ParamId], inputs: Vec<Leaf>, program: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&Session<'g, '_>, &[Var<'g>]) -> Result<Var<'g>>,
{
    let n_in = inputs.len();
    let mut leaves = inputs;
    for &id in ids {
        leaves.push(Leaf::new(store.param(id).name.clone(), store.value(id).clone()));
    }
    grad_check(&leaves, GradCheckOptions::default(), |g, v| {
        let bindings: Vec<_> = ids.iter().copied().zip(v[n_in..].iter().copied()).collect();
        let sess = Session::with_bindings(g, store, &bindings)?;
        program(&sess, &v[..n_in])
    })
}

fn all_ids(store: &ParamStore) -> Vec<ParamId> {
    store.iter().map(|(id, _)| id).collect()
}

fn op<F>(out: &mut Vec<ComponentCheck>, name: &str, leaves: Vec<Leaf>, program: F) -> Result<()>
where
    F: for<'g> Fn(&[Var<'g>]) -> Result<Var<'g>>,
{
    let report = grad_check(&leaves, GradCheckOptions::default(), |_, v| probe(&program(v)?))?;
    out.push(ComponentCheck {
        name: name.to_string(),
        report,
    });
    Ok(())
}

/// Every primitive operation plus every model component.
pub fn op_suite(seed: u64) -> Result<Vec<ComponentCheck>> {
    let mut rng = seeded_stream(seed, 7);
    let rng = &mut rng;
    let mut out = Vec::new();
    let l = |name: &str, t: Tensor| Leaf::new(name, t);

    op(&mut out, "matmul", vec![l("a", rand(&[3, 4], rng)), l("b", rand(&[4, 2], rng))], |v| v[0].matmul(&v[1]))?;
    op(&mut out, "add", vec![l("a", rand(&[2, 3], rng)), l("b", rand(&[2, 3], rng))], |v| v[0].add(&v[1]))?;
    op(&mut out, "add scalar operand", vec![l("a", rand(&[2, 3], rng)), l("s", rand(&[1], rng))], |v| {
        v[0].add(&v[1])
    })?;
    op(&mut out, "sub", vec![l("a", rand(&[2, 3], rng)), l("b", rand(&[2, 3], rng))], |v| v[0].sub(&v[1]))?;
    op(&mut out, "mul", vec![l("a", rand(&[2, 3], rng)), l("b", rand(&[2, 3], rng))], |v| v[0].mul(&v[1]))?;
    op(&mut out, "mul scalar operand", vec![l("a", rand(&[2, 3], rng)), l("s", rand(&[1], rng))], |v| {
        v[0].mul(&v[1])
    })?;
    op(&mut out, "scale", vec![l("a", rand(&[2, 3], rng))], |v| Ok(v[0].scale(-1.7)))?;
    op(&mut out, "add_scalar", vec![l("a", rand(&[2, 3], rng))], |v| Ok(v[0].add_scalar(0.3)))?;
    op(&mut out, "abs", vec![l("a", rand(&[3, 3], rng))], |v| Ok(v[0].abs()))?;
    op(&mut out, "relu", vec![l("a", rand(&[3, 3], rng))], |v| Ok(v[0].relu()))?;
    op(&mut out, "sigmoid", vec![l("a", rand(&[3, 3], rng))], |v| Ok(v[0].sigmoid()))?;
    op(&mut out, "tanh", vec![l("a", rand(&[3, 3], rng))], |v| Ok(v[0].tanh()))?;
    op(&mut out, "softmax rows", vec![l("a", rand(&[3, 4], rng))], |v| v[0].softmax(1))?;
    op(&mut out, "softmax columns", vec![l("a", rand(&[3, 4], rng))], |v| v[0].softmax(0))?;
    op(
        &mut out,
        "layer_norm",
        vec![
            l("x", rand(&[3, 5], rng)),
            l("gamma", rand(&[5], rng)),
            l("beta", rand(&[5], rng)),
        ],
        |v| v[0].layer_norm(&v[1], &v[2], 1e-5),
    )?;
    op(&mut out, "sum axis 0", vec![l("a", rand(&[3, 4], rng))], |v| v[0].sum(0))?;
    op(&mut out, "mean axis 1", vec![l("a", rand(&[3, 4], rng))], |v| v[0].mean(1))?;
    op(&mut out, "transpose", vec![l("a", rand(&[3, 4], rng))], |v| v[0].transpose())?;
    op(&mut out, "narrow", vec![l("a", rand(&[3, 5], rng))], |v| v[0].narrow(1, 1, 3))?;
    op(&mut out, "add_bias", vec![l("a", rand(&[3, 4], rng)), l("b", rand(&[4], rng))], |v| {
        v[0].add_bias(&v[1])
    })?;
    op(&mut out, "shift_rows", vec![l("a", rand(&[5, 2], rng))], |v| v[0].shift_rows(2))?;
    op(&mut out, "reshape", vec![l("a", rand(&[2, 6], rng))], |v| v[0].reshape(vec![3, 4]))?;
    op(&mut out, "concat", vec![l("a", rand(&[2, 3], rng)), l("b", rand(&[2, 2], rng))], |v| {
        concat(&[v[0], v[1]], 1)
    })?;
    let ce = grad_check(&[l("logits", rand(&[2, 4], rng))], GradCheckOptions::default(), |_, v| {
        v[0].cross_entropy(&[1, 3])
    })?;
    out.push(ComponentCheck {
        name: "cross_entropy".into(),
        report: ce,
    });

    // components
    let bcfg = BackboneConfig {
        image_px: 8,
        patch_px: 4,
        channels: 1,
        d_model: 8,
        heads: 2,
        blocks: 1,
        mlp_ratio: 2.0,
    };
    let mut store = ParamStore::new();
    let bb = Backbone::init(bcfg, &mut store, rng)?;
    let x = rand(&[4, 8], rng);
    let report = check_with_params(&store, &all_ids(&store), vec![l("tokens", x)], |sess, v| {
        probe(&bb.block_forward(sess, 0, &v[0])?.0)
    })?;
    out.push(ComponentCheck {
        name: "backbone block".into(),
        report,
    });

    let frames = [rand(&[1, 8, 8], rng), rand(&[1, 8, 8], rng)];
    let report = check_with_params(&store, &all_ids(&store), vec![], |sess, _| {
        let a = bb.forward_frame(sess, &frames[0])?;
        let b = bb.forward_frame(sess, &frames[1])?;
        probe(&am_flow_static_vars(&a.attention[0].logits, &b.attention[0].logits)?)
    })?;
    out.push(ComponentCheck {
        name: "static flow (via backbone)".into(),
        report,
    });

    let heads: Vec<Leaf> = (0..4).map(|i| l(&format!("logits{i}"), rand(&[4, 4], rng))).collect();
    let report = grad_check(&heads, GradCheckOptions::default(), |_, v| {
        probe(&am_flow_static_vars(&v[..2], &v[2..])?)
    })?;
    out.push(ComponentCheck {
        name: "static flow".into(),
        report,
    });

    let mut store = ParamStore::new();
    let enc = AligningEncoder::init("align", 2, 4, 2, &mut store, rng);
    let report = check_with_params(&store, &all_ids(&store), heads.clone(), |sess, v| {
        probe(&enc.flow(sess, &v[..2], &v[2..])?)
    })?;
    out.push(ComponentCheck {
        name: "aligned flow".into(),
        report,
    });

    let mut store = ParamStore::new();
    let layer = EncoderLayer::init("enc", 4, 2, 8, Component::Aligning, &mut store, rng);
    let report = check_with_params(&store, &all_ids(&store), vec![l("x", rand(&[3, 4], rng))], |sess, v| {
        probe(&layer.forward(sess, &v[0])?)
    })?;
    out.push(ComponentCheck {
        name: "encoder layer".into(),
        report,
    });

    for (name, style, flow_channels) in [
        ("parallel flow adapter", AdapterStyle::Parallel, 2),
        ("parallel plain adapter", AdapterStyle::Parallel, 0),
        ("serial flow adapter", AdapterStyle::Serial, 2),
    ] {
        let mut store = ParamStore::new();
        let a = Adapter::init("adapter", 4, 2, flow_channels, style, &mut store, rng);
        for (id, p) in store.iter().map(|(id, p)| (id, p.name.clone())).collect::<Vec<_>>() {
            if p.ends_with(".s") {
                store.set_value(id, Tensor::scalar(0.7))?;
            }
        }
        let mut inputs = vec![l("x", rand(&[3, 4], rng))];
        if flow_channels > 0 {
            inputs.push(l("flow", rand(&[3, flow_channels], rng)));
        }
        let report = check_with_params(&store, &all_ids(&store), inputs, |sess, v| {
            let (y, e) = a.forward(sess, &v[0], v.get(1))?;
            Ok(probe(&y)?.add(&probe(&e)?)?)
        })?;
        out.push(ComponentCheck {
            name: name.into(),
            report,
        });
    }

    for kind in [TpmKind::Lstm, TpmKind::Tcn, TpmKind::Tenc] {
        let mut store = ParamStore::new();
        let u = TemporalUnit::init("tpu", kind, 3, 4, 3, 4, &mut store, rng);
        let report = check_with_params(&store, &all_ids(&store), vec![l("sequence", rand(&[4, 3], rng))], |sess, v| {
            u.forward(sess, &v[0])?.cross_entropy(&[2])
        })?;
        out.push(ComponentCheck {
            name: format!("temporal unit {}", kind.as_str()),
            report,
        });
    }

    let mut store = ParamStore::new();
    let rule = FusionRule::init(FusionMode::FrozenLinear, 3, 3, &mut store, rng);
    let streams: Vec<Leaf> = (0..3).map(|i| l(&format!("stream{i}"), rand(&[1, 3], rng))).collect();
    for (name, rule) in [("fusion mean", FusionRule::Mean), ("fusion frozen-linear", rule)] {
        let report = check_with_params(&store, &[], streams.clone(), |sess, v| {
            fuse_logits(sess, v, &rule)?.cross_entropy(&[0])
        })?;
        out.push(ComponentCheck {
            name: name.into(),
            report,
        });
    }
    Ok(out)
}

/// Micro-model variants checked end to end.
pub fn micro_variants() -> Vec<(String, ModelConfig)> {
    let base = ModelConfig::micro();
    let mut v = vec![];
    for (flow, tpm, style, fusion) in [
        (FlowVariant::Static, TpmKind::Lstm, AdapterStyle::Parallel, FusionMode::Mean),
        (FlowVariant::Aligned, TpmKind::Tcn, AdapterStyle::Parallel, FusionMode::FrozenLinear),
        (FlowVariant::Off, TpmKind::Tenc, AdapterStyle::Serial, FusionMode::Mean),
    ] {
        let name = format!(
            "model {}/{}/{}/{}",
            flow.as_str(),
            tpm.as_str(),
            style.as_str(),
            fusion.as_str()
        );
        v.push((
            name,
            ModelConfig {
                flow,
                tpm,
                style,
                fusion,
                ..base.clone()
            },
        ));
    }
    v
}

/// End-to-end cross-entropy check of every trainable parameter of the micro
/// model, with adapter scales moved off zero so every path carries
/// gradient.
pub fn model_suite(seed: u64) -> Result<Vec<ComponentCheck>> {
    let mut out = Vec::new();
    for (i, (name, config)) in micro_variants().into_iter().enumerate() {
        let mut model = Model::new(config.clone(), seed.wrapping_add(i as u64))?;
        model.set_scales(0.5);
        let mut rng = seeded_stream(seed, 8 + i as u64);
        let frames = random_frames(&config, &mut rng);
        let label = rng.gen_range(0..config.categories);
        let report = model_grad_check(&model, &frames, label, GradCheckOptions::default())?;
        out.push(ComponentCheck { name, report });
    }
    Ok(out)
}
