//! Helpers shared by the integration-test targets.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sinreq_core::config::ExperimentConfig;
use sinreq_core::model::{ForwardMode, LayerSpec, Model, ModelSpec};
use sinreq_core::quantize::{QuantizerSpec, Scheme};
use sinreq_core::sinreq::{self, LayerRegularizer, RegularizerConfig};
use sinreq_core::tensor::{Graph, Tensor};

pub fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// A shipped config with its output redirected to `out`.
pub fn shipped_config(name: &str, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(&configs_dir().join(name)).expect("shipped config parses");
    cfg.output_dir = out.to_path_buf();
    cfg
}

pub fn q(scheme: Scheme, bits: u32) -> Option<QuantizerSpec> {
    Some(QuantizerSpec::new(scheme, bits).unwrap())
}

/// conv(1->2, 3x3) -> relu -> conv(2->3, 3x3) -> relu ->
/// flatten -> dense(12->5) -> relu -> dense(5->3), on 1x6x6 inputs.
pub fn small_convnet() -> ModelSpec {
    ModelSpec {
        input_shape: vec![1, 6, 6],
        layers: vec![
            LayerSpec::conv2d("conv1", 1, 2, 3, 1, 0, q(Scheme::Dorefa, 2)),
            LayerSpec::relu("relu1"),
            LayerSpec::conv2d("conv2", 2, 3, 3, 1, 0, q(Scheme::Wrpn, 3)),
            LayerSpec::relu("relu2"),
            LayerSpec::flatten("flat"),
            LayerSpec::dense("fc1", 12, 5, q(Scheme::UniformMidTread, 2)),
            LayerSpec::relu("relu3"),
            LayerSpec::dense("fc2", 5, 3, q(Scheme::UniformMidRise, 3)),
        ],
    }
}

pub fn small_mlp() -> ModelSpec {
    ModelSpec {
        input_shape: vec![3],
        layers: vec![
            LayerSpec::dense("fc1", 3, 6, q(Scheme::Wrpn, 3)),
            LayerSpec::relu("relu1"),
            LayerSpec::dense("fc2", 6, 4, q(Scheme::Dorefa, 3)),
        ],
    }
}

pub fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Random batch of `n` samples for `spec`, labels below `classes`.
pub fn random_batch(spec: &ModelSpec, n: usize, classes: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = vec![n];
    shape.extend(&spec.input_shape);
    let x = random_tensor(shape, &mut rng, 1.0);
    let y = (0..n).map(|_| rng.random_range(0..classes)).collect();
    (x, y)
}

/// Initialized model with random (non-zero) biases. Zero biases put
/// pre-activations exactly on the ReLU kink whenever a layer's input is all
/// zeros, where finite differences are meaningless.
pub fn model_with_random_biases(spec: &ModelSpec, seed: u64) -> Model {
    let mut model = Model::init(spec.clone(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for p in model.params_mut().values_mut() {
        p.bias = random_tensor(p.bias.shape().to_vec(), &mut rng, 0.5);
    }
    model
}

pub fn regularizer(model: &Model, lambda_wd: f64, lambda_q: f64) -> RegularizerConfig {
    let layers = model
        .geometries()
        .unwrap()
        .into_iter()
        .map(|(n, geometry)| (n, LayerRegularizer { lambda_q, geometry }))
        .collect();
    RegularizerConfig::new(lambda_wd, layers).unwrap()
}

/// Parameter gradients of an objective, keyed `<layer>.weight` / `<layer>.bias`.
pub type Grads = IndexMap<String, Vec<f64>>;

/// Total objective (task + weight decay + regularizer) and its gradients.
pub fn objective(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    reg: &RegularizerConfig,
    mode: ForwardMode,
) -> (f64, Grads) {
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, x, mode).unwrap();
    let task = g.softmax_cross_entropy(fwd.logits, y).unwrap();
    let loss = sinreq::total_loss(&mut g, task, &fwd.weights, reg).unwrap();
    let value = g.value(loss.total).item().unwrap();
    g.backward(loss.total).unwrap();
    (value, collect_grads(&g, &fwd))
}

/// Cross-entropy only.
pub fn task_objective(model: &Model, x: &Tensor, y: &[usize], mode: ForwardMode) -> (f64, Grads) {
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, x, mode).unwrap();
    let task = g.softmax_cross_entropy(fwd.logits, y).unwrap();
    let value = g.value(task).item().unwrap();
    g.backward(task).unwrap();
    (value, collect_grads(&g, &fwd))
}

fn collect_grads(g: &Graph, fwd: &sinreq_core::model::Forward) -> Grads {
    let mut out = IndexMap::new();
    for (name, id) in &fwd.weights {
        out.insert(format!("{name}.weight"), g.grad(*id).unwrap().to_vec());
        out.insert(format!("{name}.bias"), g.grad(fwd.biases[name]).unwrap().to_vec());
    }
    out
}

pub fn param_mut<'a>(model: &'a mut Model, key: &str) -> &'a mut Tensor {
    let (layer, which) = key.rsplit_once('.').unwrap();
    let p = model.params_mut().get_mut(layer).unwrap();
    if which == "weight" {
        &mut p.weight
    } else {
        &mut p.bias
    }
}

/// A gradient component passes if either the absolute or the relative error
/// is within tolerance.
pub const GRAD_REL_TOL: f64 = 1e-5;
pub const GRAD_ABS_TOL: f64 = 1e-8;

#[derive(Debug)]
pub struct GradMismatch {
    pub key: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares analytic gradients with central differences of `f` over every
/// parameter; returns the components outside tolerance.
pub fn check_gradients(
    model: &Model,
    analytic: &Grads,
    h: f64,
    f: impl Fn(&Model) -> f64,
) -> (usize, Vec<GradMismatch>) {
    let mut probe = model.clone();
    let mut bad = Vec::new();
    let mut checked = 0;
    for (key, grad) in analytic {
        for (i, &a) in grad.iter().enumerate() {
            let orig = param_mut(&mut probe, key).data()[i];
            param_mut(&mut probe, key).data_mut()[i] = orig + h;
            let up = f(&probe);
            param_mut(&mut probe, key).data_mut()[i] = orig - h;
            let down = f(&probe);
            param_mut(&mut probe, key).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
            checked += 1;
            if abs > GRAD_ABS_TOL && rel > GRAD_REL_TOL {
                bad.push(GradMismatch {
                    key: key.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    (checked, bad)
}
