//! The gradient oracle suite: every primitive, the softmax + cross-entropy
//! pairing, and a full micro FPN graph, each checked against central finite
//! differences in 64-bit precision.

use rand::Rng;

use crate::autodiff::{grad_check, Bindings, Graph, Init, Mode, NodeId, Padding, ParamTable};
use crate::backbone::BackboneConfig;
use crate::error::Result;
use crate::model::{FpnModel, ModelConfig};
use crate::nn::{loss_mask, weighted_cce_node};
use crate::rng::Stream;
use crate::tensor::Tensor;

/// Finite-difference step used by the suite.
pub const STEP: f64 = 1e-5;
/// Acceptance threshold on the max relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct OracleCase {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

impl OracleCase {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

struct Case {
    graph: Graph,
    params: ParamTable<f64>,
    inputs: Bindings<f64>,
    loss: NodeId,
    mode: Mode,
}

fn uniform(stream: Stream, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = stream.rng();
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Case builder: parameters are random, the loss is a random linear
/// functional of the output so no coordinate cancels by symmetry.
struct Builder {
    graph: Graph,
    params: ParamTable<f64>,
    inputs: Bindings<f64>,
    stream: Stream,
}

impl Builder {
    fn new(stream: Stream) -> Self {
        Builder {
            graph: Graph::new(),
            params: ParamTable::new(),
            inputs: Bindings::new(),
            stream,
        }
    }

    fn param(&mut self, name: &str, shape: &[usize], lo: f64, hi: f64) -> NodeId {
        let id = self.graph.param(name, shape.to_vec(), Init::Zeros).expect("fresh name");
        self.params.insert(name, uniform(self.stream.named(name), shape, lo, hi), true);
        id
    }

    fn finish(mut self, out: NodeId, mode: Mode) -> Case {
        let n: usize = self.graph.shape(out).iter().product();
        let flat = self.graph.reshape(out, [1, n]).expect("reshape");
        let probe = self.graph.input("probe", [n, 1]).expect("input");
        self.inputs
            .insert("probe".into(), uniform(self.stream.named("probe"), &[n, 1], -1.0, 1.0));
        let loss = self.graph.matmul(flat, probe).expect("matmul");
        Case {
            graph: self.graph,
            params: self.params,
            inputs: self.inputs,
            loss,
            mode,
        }
    }
}

fn primitive_cases(stream: Stream) -> Vec<(&'static str, Case)> {
    let train = Mode::Train(stream.named("dropout"));
    let mut cases = Vec::new();
    let mut mk = |name: &'static str, f: &dyn Fn(&mut Builder) -> NodeId, mode: Mode| {
        let mut b = Builder::new(stream.named(name));
        let out = f(&mut b);
        cases.push((name, b.finish(out, mode)));
    };

    mk("add", &|b| {
        let x = b.param("x", &[3, 4], -1.0, 1.0);
        let y = b.param("y", &[3, 4], -1.0, 1.0);
        b.graph.add(x, y).unwrap()
    }, Mode::Infer);
    mk("add (row broadcast)", &|b| {
        let x = b.param("x", &[3, 4], -1.0, 1.0);
        let y = b.param("y", &[4], -1.0, 1.0);
        b.graph.add(x, y).unwrap()
    }, Mode::Infer);
    mk("subtract", &|b| {
        let x = b.param("x", &[3, 4], -1.0, 1.0);
        let y = b.param("y", &[4], -1.0, 1.0);
        b.graph.sub(x, y).unwrap()
    }, Mode::Infer);
    mk("multiply", &|b| {
        let x = b.param("x", &[2, 5], -1.0, 1.0);
        let y = b.param("y", &[2, 5], -1.0, 1.0);
        b.graph.mul(x, y).unwrap()
    }, Mode::Infer);
    mk("matmul", &|b| {
        let x = b.param("x", &[3, 4], -1.0, 1.0);
        let w = b.param("w", &[4, 2], -1.0, 1.0);
        b.graph.matmul(x, w).unwrap()
    }, Mode::Infer);
    mk("conv2d 3x3 same", &|b| {
        let x = b.param("x", &[2, 5, 4, 3], -1.0, 1.0);
        let k = b.param("k", &[3, 3, 3, 2], -1.0, 1.0);
        let bias = b.param("bias", &[2], -1.0, 1.0);
        b.graph.conv2d(x, k, bias, Padding::Same).unwrap()
    }, Mode::Infer);
    mk("conv2d 3x3 valid", &|b| {
        let x = b.param("x", &[1, 5, 5, 2], -1.0, 1.0);
        let k = b.param("k", &[3, 3, 2, 3], -1.0, 1.0);
        let bias = b.param("bias", &[3], -1.0, 1.0);
        b.graph.conv2d(x, k, bias, Padding::Valid).unwrap()
    }, Mode::Infer);
    mk("conv2d 1x1", &|b| {
        let x = b.param("x", &[2, 3, 3, 4], -1.0, 1.0);
        let k = b.param("k", &[1, 1, 4, 3], -1.0, 1.0);
        let bias = b.param("bias", &[3], -1.0, 1.0);
        b.graph.conv2d(x, k, bias, Padding::Same).unwrap()
    }, Mode::Infer);
    mk("max_pool2x2", &|b| {
        let x = b.param("x", &[2, 4, 6, 2], -1.0, 1.0);
        b.graph.max_pool2x2(x).unwrap()
    }, Mode::Infer);
    mk("upsample_nearest2x", &|b| {
        let x = b.param("x", &[1, 3, 3, 2], -1.0, 1.0);
        b.graph.upsample2x(x).unwrap()
    }, Mode::Infer);
    mk("relu", &|b| {
        let x = b.param("x", &[4, 5], -1.0, 1.0);
        b.graph.relu(x).unwrap()
    }, Mode::Infer);
    mk("concat", &|b| {
        let x = b.param("x", &[2, 2, 2, 3], -1.0, 1.0);
        let y = b.param("y", &[2, 2, 2, 1], -1.0, 1.0);
        b.graph.concat(&[x, y]).unwrap()
    }, Mode::Infer);
    mk("global_avg_pool", &|b| {
        let x = b.param("x", &[2, 3, 3, 4], -1.0, 1.0);
        b.graph.global_avg_pool(x).unwrap()
    }, Mode::Infer);
    mk("dropout (train)", &|b| {
        let x = b.param("x", &[4, 8], -1.0, 1.0);
        b.graph.dropout(x, 0.5).unwrap()
    }, train);
    mk("dropout (inference)", &|b| {
        let x = b.param("x", &[4, 8], -1.0, 1.0);
        b.graph.dropout(x, 0.5).unwrap()
    }, Mode::Infer);
    mk("softmax", &|b| {
        let x = b.param("x", &[3, 4], -2.0, 2.0);
        b.graph.softmax(x).unwrap()
    }, Mode::Infer);
    mk("log", &|b| {
        let x = b.param("x", &[3, 4], 0.5, 2.0);
        b.graph.log(x, 1e-12).unwrap()
    }, Mode::Infer);
    mk("reshape", &|b| {
        let x = b.param("x", &[2, 6], -1.0, 1.0);
        b.graph.reshape(x, [3, 4]).unwrap()
    }, Mode::Infer);
    mk("scale", &|b| {
        let x = b.param("x", &[2, 3], -1.0, 1.0);
        b.graph.scale(x, -0.7).unwrap()
    }, Mode::Infer);
    cases
}

fn cce_case(stream: Stream) -> Case {
    let mut b = Builder::new(stream);
    let z = b.param("logits", &[4, 3], -2.0, 2.0);
    let p = b.graph.softmax(z).unwrap();
    let (_, loss) = weighted_cce_node(&mut b.graph, p, "mask").unwrap();
    b.inputs
        .insert("mask".into(), loss_mask(&[0, 2, 1, 2], &[0.26, 0.29, 0.45]).unwrap());
    Case {
        graph: b.graph,
        params: b.params,
        inputs: b.inputs,
        loss,
        mode: Mode::Infer,
    }
}

/// The canonical micro FPN (top-3 fusion) at 16×16 input, batch 2, with
/// dropout active.
pub fn micro_fpn_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            input: [16, 16, 1],
            ..BackboneConfig::micro()
        },
        ..ModelConfig::micro(3, 3)
    }
}

fn micro_fpn_case(stream: Stream) -> Result<Case> {
    let model = FpnModel::build(&micro_fpn_config(), 2)?;
    let mut params = model.init_params::<f64>(stream.key());
    // non-zero biases so no unit sits exactly at a ReLU kink
    let mut rng = stream.named("bias").rng();
    for (name, p) in params.iter_mut() {
        if name.ends_with(".bias") {
            for v in p.value.data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    let image = uniform(stream.named("image"), &[2, 16, 16, 1], -1.0, 1.0);
    let inputs = model.bindings(image, Some(&[1, 2]), &[0.26, 0.29, 0.45])?;
    Ok(Case {
        loss: model.loss,
        graph: model.graph,
        params,
        inputs,
        mode: Mode::Train(stream.named("dropout")),
    })
}

fn check(name: &str, case: &Case) -> Result<OracleCase> {
    let r = grad_check(&case.graph, &case.params, &case.inputs, case.loss, STEP, case.mode)?;
    Ok(OracleCase {
        name: name.to_string(),
        max_rel_error: r.max_rel_error,
        coordinates: r.coordinates,
    })
}

/// Runs every case of the suite.
pub fn run_gradient_suite(seed: u64) -> Result<Vec<OracleCase>> {
    let stream = Stream::root(seed).named("gradcheck");
    let mut out = Vec::new();
    for (name, case) in primitive_cases(stream) {
        out.push(check(name, &case)?);
    }
    out.push(check("softmax + weighted CCE", &cce_case(stream.named("cce")))?);
    out.push(check("micro FPN graph (top-3)", &micro_fpn_case(stream.named("fpn"))?)?);
    Ok(out)
}
