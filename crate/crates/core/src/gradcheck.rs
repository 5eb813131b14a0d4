//! Finite-difference checks of every graph op and of a composed
//! encoder + contrastive-loss graph.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::contrastive::{self, build_positive_index, ContrastiveConfig, ViewRecord};
use crate::encoders::{ConvStage, Encoder, EncoderBundle, EncoderSpec, ModalitySpec};
use crate::error::{Error, Result};
use crate::graph::{Bound, Graph, OpKind, Var};
use crate::rng::{self, StreamRng};
use crate::tensor::Tensor;

pub const EPSILON: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;

/// `|analytic − numeric| / max(1, |analytic|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub name: String,
    pub max_relative_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub cases: Vec<CaseResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.cases.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }
}

/// Builds a scalar loss from input leaves.
pub type Builder<'a> = &'a dyn Fn(&mut Graph, &[Var]) -> Result<Var>;
type BoxedBuilder = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// Largest relative error between backward and central differences over all
/// input elements. `fault` corrupts one op's backward pass.
pub fn max_relative_error(build: Builder<'_>, inputs: &[Tensor], fault: Option<OpKind>) -> Result<f64> {
    let mut g = Graph::new();
    if let Some(k) = fault {
        g.inject_fault(k);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> =
        vars.iter().map(|&v| g.grad(v).map_or_else(|| vec![0.0; g.value(v).len()], <[f64]>::to_vec)).collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t)).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss)[0])
    };
    let mut work = inputs.to_vec();
    let mut worst = 0.0f64;
    for (k, t) in inputs.iter().enumerate() {
        for (i, &x) in t.values().iter().enumerate() {
            work[k].values_mut()[i] = x + EPSILON;
            let up = eval(&work)?;
            work[k].values_mut()[i] = x - EPSILON;
            let down = eval(&work)?;
            work[k].values_mut()[i] = x;
            let numeric = (up - down) / (2.0 * EPSILON);
            worst = worst.max(relative_error(analytic[k][i], numeric));
        }
    }
    Ok(worst)
}

fn randn(r: &mut StreamRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), v).expect("valid shape")
}

/// Random values kept away from zero so ReLU kinks stay out of reach.
fn randn_off_zero(r: &mut StreamRng, shape: &[usize]) -> Tensor {
    let mut t = randn(r, shape);
    t.values_mut().iter_mut().for_each(|v| *v += 0.1f64.copysign(*v));
    t
}

/// Reduce any tensor to a scalar with fixed random weights so every output
/// element gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let mut r = rng::stream(seed, "gradcheck/weights", &[]);
    let w = randn(&mut r, g.shape(x));
    let w = g.constant(&w);
    let p = g.mul(x, w)?;
    g.sum(p)
}

struct Case {
    name: &'static str,
    inputs: Vec<Tensor>,
    build: BoxedBuilder,
}

fn op_cases(seed: u64) -> Vec<Case> {
    let mut r = rng::stream(seed, "gradcheck/inputs", &[]);
    let s = seed;
    let mut cases: Vec<Case> = Vec::new();
    let mut add = |name, inputs, build: BoxedBuilder| {
        cases.push(Case { name, inputs, build })
    };
    add("matmul", vec![randn(&mut r, &[3, 4]), randn(&mut r, &[4, 2])], Box::new(move |g, v| {
        let y = g.matmul(v[0], v[1])?;
        weighted_sum(g, y, s)
    }));
    add("transpose", vec![randn(&mut r, &[3, 5])], Box::new(move |g, v| {
        let y = g.transpose(v[0])?;
        weighted_sum(g, y, s)
    }));
    add("conv2d", vec![randn(&mut r, &[2, 5, 5]), randn(&mut r, &[3, 2, 3, 3])], Box::new(move |g, v| {
        let y = g.conv2d(v[0], v[1], 1)?;
        weighted_sum(g, y, s)
    }));
    add(
        "conv2d (batched, stride 2)",
        vec![randn(&mut r, &[2, 2, 7, 7]), randn(&mut r, &[3, 2, 3, 3])],
        Box::new(move |g, v| {
            let y = g.conv2d(v[0], v[1], 2)?;
            weighted_sum(g, y, s)
        }),
    );
    add("avgpool2", vec![randn(&mut r, &[3, 4, 4])], Box::new(move |g, v| {
        let y = g.avgpool2(v[0])?;
        weighted_sum(g, y, s)
    }));
    add("relu", vec![randn_off_zero(&mut r, &[4, 5])], Box::new(move |g, v| {
        let y = g.relu(v[0])?;
        weighted_sum(g, y, s)
    }));
    add(
        "dense",
        vec![randn(&mut r, &[2, 4]), randn(&mut r, &[4, 3]), randn(&mut r, &[3])],
        Box::new(move |g, v| {
            let y = g.dense(v[0], v[1], v[2])?;
            weighted_sum(g, y, s)
        }),
    );
    add("add", vec![randn(&mut r, &[2, 3]), randn(&mut r, &[2, 3])], Box::new(move |g, v| {
        let y = g.add(v[0], v[1])?;
        weighted_sum(g, y, s)
    }));
    add("mul", vec![randn(&mut r, &[2, 3]), randn(&mut r, &[2, 3])], Box::new(move |g, v| {
        let y = g.mul(v[0], v[1])?;
        weighted_sum(g, y, s)
    }));
    add("scale", vec![randn(&mut r, &[5])], Box::new(move |g, v| {
        let y = g.scale(v[0], -1.7)?;
        weighted_sum(g, y, s)
    }));
    add("sum", vec![randn(&mut r, &[2, 3])], Box::new(|g, v| g.sum(v[0])));
    add("mean", vec![randn(&mut r, &[2, 3])], Box::new(|g, v| g.mean(v[0])));
    add("l2_normalize", vec![randn(&mut r, &[3, 4])], Box::new(move |g, v| {
        let y = g.l2_normalize(v[0])?;
        weighted_sum(g, y, s)
    }));
    add("softmax_cross_entropy", vec![randn(&mut r, &[4, 6])], Box::new(|g, v| {
        g.softmax_cross_entropy(v[0], &[0, 5, 2, 2])
    }));
    add("concat_cols", vec![randn(&mut r, &[2, 3]), randn(&mut r, &[2, 2])], Box::new(move |g, v| {
        let y = g.concat_cols(&[v[0], v[1]])?;
        weighted_sum(g, y, s)
    }));
    add("concat_rows", vec![randn(&mut r, &[2, 3]), randn(&mut r, &[1, 3])], Box::new(move |g, v| {
        let y = g.concat_rows(&[v[0], v[1]])?;
        weighted_sum(g, y, s)
    }));
    add("reshape", vec![randn(&mut r, &[2, 6])], Box::new(move |g, v| {
        let y = g.reshape(v[0], vec![3, 4])?;
        weighted_sum(g, y, s)
    }));
    for (name, cfg) in [
        ("info_nce", ContrastiveConfig::default()),
        ("info_nce (literal)", ContrastiveConfig { literal_eq1: true, ..ContrastiveConfig::default() }),
        ("info_nce (no log)", ContrastiveConfig { use_log: false, ..ContrastiveConfig::default() }),
    ] {
        let records = small_batch_records();
        add(name, vec![randn(&mut r, &[records.len(), 4])], Box::new(move |g, v| {
            let idx = build_positive_index(&records)?;
            let e = g.l2_normalize(v[0])?;
            contrastive::batch_loss(g, e, &idx, &cfg)
        }));
    }
    cases
}

/// Two labeled samples and one negative, two modalities, augmented.
fn small_batch_records() -> Vec<ViewRecord> {
    let mut out = Vec::new();
    for sample in 0..3 {
        for modality in 0..2 {
            for _ in 0..2 {
                out.push(ViewRecord {
                    view_id: out.len(),
                    sample_id: sample,
                    modality_id: modality,
                    augmented: true,
                    is_negative_class: sample == 2,
                });
            }
        }
    }
    out
}

/// Tiny three-modality bundle: two MLPs and a CNN.
pub fn composed_bundle(seed: u64) -> Result<EncoderBundle> {
    let encoders = vec![
        Encoder::new(ModalitySpec::new(0, "S1", 1, 4, 4), EncoderSpec::mlp(&[5], 4))?,
        Encoder::new(ModalitySpec::new(1, "S2", 2, 4, 4), EncoderSpec::mlp(&[4], 4))?,
        Encoder::new(
            ModalitySpec::new(2, "NAIP", 2, 8, 8),
            EncoderSpec::small_cnn(&[ConvStage { out_channels: 3, kernel: 3, stride: 1 }], 4),
        )?,
    ];
    EncoderBundle::init(encoders, seed)
}

/// Max relative error over all parameters of a three-modality encoder
/// bundle feeding the batch contrastive loss.
pub fn composed_error(seed: u64, fault: Option<OpKind>) -> Result<f64> {
    let bundle = composed_bundle(seed)?;
    let mut r = rng::stream(seed, "gradcheck/composed", &[]);
    let samples = 3;
    let mut images: Vec<Vec<Tensor>> = Vec::new();
    let mut records = Vec::new();
    for enc in bundle.encoders() {
        let [c, h, w] = enc.modality.image_shape();
        let mut imgs = Vec::new();
        for s in 0..samples {
            for _ in 0..2 {
                imgs.push(randn(&mut r, &[c, h, w]));
                records.push(ViewRecord {
                    view_id: records.len(),
                    sample_id: s,
                    modality_id: enc.modality.id,
                    augmented: true,
                    is_negative_class: s == samples - 1,
                });
            }
        }
        images.push(imgs);
    }
    let names: Vec<String> = bundle.params.names().cloned().collect();
    let inputs: Vec<Tensor> = bundle.params.iter().map(|(_, t)| Tensor::new(t.shape().to_vec(), t.values().to_vec())).collect::<Result<_>>()?;
    let idx = build_positive_index(&records)?;
    let cfg = ContrastiveConfig::default();
    let build = |g: &mut Graph, vars: &[Var]| -> Result<Var> {
        let mut bound = Bound::default();
        for (n, &v) in names.iter().zip(vars) {
            bound.insert(n, v);
        }
        let mut parts = Vec::new();
        for (enc, imgs) in bundle.encoders().zip(&images) {
            let refs: Vec<&Tensor> = imgs.iter().collect();
            let x = g.constant(&enc.stack(&refs)?);
            let e = enc.forward(g, &bound, x)?.embedding();
            parts.push(g.l2_normalize(e)?);
        }
        let emb = g.concat_rows(&parts)?;
        contrastive::batch_loss(g, emb, &idx, &cfg)
    };
    max_relative_error(&build, &inputs, fault)
}

/// Run every case. A `fault` makes the named op's backward wrong, which the
/// report must flag.
pub fn run_suite(seed: u64, fault: Option<OpKind>) -> Result<GradCheckReport> {
    let mut cases = Vec::new();
    for case in op_cases(seed) {
        let err = max_relative_error(case.build.as_ref(), &case.inputs, fault)?;
        cases.push(CaseResult { name: case.name.into(), max_relative_error: err, passed: err <= TOLERANCE });
    }
    let err = composed_error(seed, fault)?;
    cases.push(CaseResult {
        name: "composed 3-modality encoder + info_nce".into(),
        max_relative_error: err,
        passed: err <= TOLERANCE,
    });
    Ok(GradCheckReport { epsilon: EPSILON, tolerance: TOLERANCE, cases })
}

/// Parse an op name for fault injection.
pub fn parse_fault(name: &str) -> Result<OpKind> {
    OpKind::from_name(name).ok_or_else(|| Error::Config(format!("unknown op {name}")))
}
