//! Layer stacks with per-layer quantizer assignment.
//!
//! A [`Model`] owns the full-precision ("shadow") weights. Quantized weights
//! are derived on every [`ForwardMode::QuantizedSte`] forward pass and never
//! stored.

pub mod checkpoint;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantize::{self, LevelGeometry, QuantizerSpec};
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Relu,
    Flatten,
}

fn one() -> usize {
    1
}

impl LayerKind {
    pub fn is_trainable(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv2d { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub name: String,
    pub layer: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantizerSpec>,
}

impl LayerSpec {
    pub fn dense(name: &str, in_features: usize, out_features: usize, quant: Option<QuantizerSpec>) -> Self {
        LayerSpec {
            name: name.to_string(),
            layer: LayerKind::Dense {
                in_features,
                out_features,
            },
            quant,
        }
    }

    pub fn conv2d(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        quant: Option<QuantizerSpec>,
    ) -> Self {
        LayerSpec {
            name: name.to_string(),
            layer: LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_size,
                stride,
                padding,
            },
            quant,
        }
    }

    pub fn relu(name: &str) -> Self {
        LayerSpec {
            name: name.to_string(),
            layer: LayerKind::Relu,
            quant: None,
        }
    }

    pub fn flatten(name: &str) -> Self {
        LayerSpec {
            name: name.to_string(),
            layer: LayerKind::Flatten,
            quant: None,
        }
    }
}

/// Input shape is per sample (no batch axis): `[features]` for dense stacks,
/// `[channels, height, width]` for convolutional ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Checks names, quantizer placement and shape composition. Returns the
    /// per-sample output shape of the final layer.
    pub fn validate(&self) -> Result<Vec<usize>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Spec(format!("invalid input shape {:?}", self.input_shape)));
        }
        let mut seen = std::collections::HashSet::new();
        let mut shape = self.input_shape.clone();
        for layer in &self.layers {
            if layer.name.is_empty() || !seen.insert(layer.name.as_str()) {
                return Err(Error::Spec(format!("layer name {:?} is empty or repeated", layer.name)));
            }
            if let Some(q) = &layer.quant {
                if !layer.layer.is_trainable() {
                    return Err(Error::Spec(format!(
                        "layer {} has a quantizer but no weights",
                        layer.name
                    )));
                }
                q.validate()
                    .map_err(|e| Error::Spec(format!("layer {}: {e}", layer.name)))?;
            }
            shape = output_shape(&layer.name, &layer.layer, &shape)?;
        }
        if shape.len() != 1 {
            return Err(Error::Spec(format!(
                "final layer must produce a flat logit vector, got per-sample shape {shape:?}"
            )));
        }
        Ok(shape)
    }

    pub fn trainable(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.layer.is_trainable())
    }

    pub fn num_classes(&self) -> Result<usize> {
        Ok(self.validate()?[0])
    }
}

fn output_shape(name: &str, kind: &LayerKind, input: &[usize]) -> Result<Vec<usize>> {
    let mismatch = |expected: String| {
        Err(Error::Spec(format!(
            "layer {name} expects input {expected}, got {input:?}"
        )))
    };
    match *kind {
        LayerKind::Dense {
            in_features,
            out_features,
        } => {
            if in_features == 0 || out_features == 0 {
                return Err(Error::Spec(format!("layer {name} has a zero-sized dimension")));
            }
            if input != [in_features] {
                return mismatch(format!("[{in_features}]"));
            }
            Ok(vec![out_features])
        }
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel_size,
            stride,
            padding,
        } => {
            if in_channels == 0 || out_channels == 0 || kernel_size == 0 || stride == 0 {
                return Err(Error::Spec(format!("layer {name} has a zero-sized parameter")));
            }
            let [c, h, w] = input else {
                return mismatch(format!("[{in_channels}, H, W]"));
            };
            if *c != in_channels {
                return mismatch(format!("[{in_channels}, H, W]"));
            }
            let extent = |x: usize| {
                let padded = x + 2 * padding;
                (padded >= kernel_size && (padded - kernel_size).is_multiple_of(stride))
                    .then(|| (padded - kernel_size) / stride + 1)
            };
            match (extent(*h), extent(*w)) {
                (Some(oh), Some(ow)) => Ok(vec![out_channels, oh, ow]),
                _ => Err(Error::Spec(format!(
                    "layer {name}: output size not integral for input {h}x{w}"
                ))),
            }
        }
        LayerKind::Relu => Ok(input.to_vec()),
        LayerKind::Flatten => Ok(vec![input.iter().product()]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ForwardMode {
    FullPrecision,
    QuantizedSte,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: IndexMap<String, LayerParams>,
}

/// Graph handles produced by [`Model::forward`].
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: NodeId,
    /// Leaf nodes holding the shadow weights, by layer name. Their gradients
    /// are the gradients to apply to the shadow copy.
    pub weights: IndexMap<String, NodeId>,
    pub biases: IndexMap<String, NodeId>,
}

fn weight_shape(kind: &LayerKind) -> Option<(Vec<usize>, usize, usize, usize)> {
    // (weight shape, bias length, fan_in, fan_out)
    match *kind {
        LayerKind::Dense {
            in_features,
            out_features,
        } => Some((vec![in_features, out_features], out_features, in_features, out_features)),
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel_size,
            ..
        } => {
            let area = kernel_size * kernel_size;
            Some((
                vec![out_channels, in_channels, kernel_size, kernel_size],
                out_channels,
                in_channels * area,
                out_channels * area,
            ))
        }
        LayerKind::Relu | LayerKind::Flatten => None,
    }
}

impl Model {
    /// Glorot-uniform weights `U(-b, b)`, `b = sqrt(6 / (fan_in + fan_out))`,
    /// zero biases.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = IndexMap::new();
        for layer in &spec.layers {
            let Some((shape, bias_len, fan_in, fan_out)) = weight_shape(&layer.layer) else {
                continue;
            };
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            params.insert(
                layer.name.clone(),
                LayerParams {
                    weight: Tensor::new(shape, data)?,
                    bias: Tensor::zeros(vec![bias_len])?,
                },
            );
        }
        Ok(Model { spec, params })
    }

    /// Builds a model from explicit parameters, checking them against `spec`.
    pub fn from_params(spec: ModelSpec, params: IndexMap<String, LayerParams>) -> Result<Self> {
        spec.validate()?;
        let expected: Vec<_> = spec
            .layers
            .iter()
            .filter_map(|l| weight_shape(&l.layer).map(|s| (l.name.clone(), s)))
            .collect();
        if expected.len() != params.len() {
            return Err(Error::Spec(format!(
                "model has {} trainable layers but {} parameter sets were given",
                expected.len(),
                params.len()
            )));
        }
        let mut ordered = IndexMap::new();
        for (name, (shape, bias_len, _, _)) in expected {
            let p = params
                .get(&name)
                .ok_or_else(|| Error::Spec(format!("missing parameters for layer {name}")))?;
            if p.weight.shape() != shape.as_slice() || p.bias.shape() != [bias_len] {
                return Err(Error::Spec(format!(
                    "layer {name}: parameter shapes {:?}/{:?} do not match {shape:?}/[{bias_len}]",
                    p.weight.shape(),
                    p.bias.shape()
                )));
            }
            ordered.insert(name, p.clone());
        }
        Ok(Model {
            spec,
            params: ordered,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &IndexMap<String, LayerParams> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut IndexMap<String, LayerParams> {
        &mut self.params
    }

    pub fn weight(&self, layer: &str) -> Option<&Tensor> {
        self.params.get(layer).map(|p| &p.weight)
    }

    /// Level geometry of every trainable layer; fails if one has no quantizer.
    pub fn geometries(&self) -> Result<IndexMap<String, LevelGeometry>> {
        self.spec
            .trainable()
            .map(|l| {
                let q = l.quant.ok_or_else(|| {
                    Error::Config(format!("layer {} has no quantizer spec", l.name))
                })?;
                Ok((l.name.clone(), q.geometry()?))
            })
            .collect()
    }

    /// Records the forward computation of `input` (`[N, ...input_shape]`) in
    /// `graph`.
    pub fn forward(&self, graph: &mut Graph, input: &Tensor, mode: ForwardMode) -> Result<Forward> {
        let shape = input.shape();
        if shape.len() != self.spec.input_shape.len() + 1 || shape[1..] != self.spec.input_shape[..] {
            return Err(Error::Dimension(format!(
                "input batch {shape:?} does not match model input {:?}",
                self.spec.input_shape
            )));
        }
        let batch = shape[0];
        let mut x = graph.leaf(input.clone());
        let mut weights = IndexMap::new();
        let mut biases = IndexMap::new();
        for layer in &self.spec.layers {
            match layer.layer {
                LayerKind::Dense { .. } | LayerKind::Conv2d { .. } => {
                    let p = &self.params[&layer.name];
                    let shadow = graph.leaf(p.weight.clone());
                    let used = match mode {
                        ForwardMode::FullPrecision => shadow,
                        ForwardMode::QuantizedSte => {
                            let spec = layer.quant.ok_or_else(|| {
                                Error::Config(format!(
                                    "quantized forward needs a quantizer on layer {}",
                                    layer.name
                                ))
                            })?;
                            let q = quantize::quantize(&p.weight, spec)?;
                            graph.straight_through(shadow, q)?
                        }
                    };
                    let bias = graph.leaf(p.bias.clone());
                    let pre = match layer.layer {
                        LayerKind::Conv2d { stride, padding, .. } => graph.conv2d(x, used, stride, padding)?,
                        _ => graph.matmul(x, used)?,
                    };
                    x = graph.add(pre, bias)?;
                    weights.insert(layer.name.clone(), shadow);
                    biases.insert(layer.name.clone(), bias);
                }
                LayerKind::Relu => x = graph.relu(x)?,
                LayerKind::Flatten => {
                    let per_sample = graph.value(x).len() / batch;
                    x = graph.reshape(x, vec![batch, per_sample])?;
                }
            }
        }
        Ok(Forward {
            logits: x,
            weights,
            biases,
        })
    }

    pub fn logits(&self, input: &Tensor, mode: ForwardMode) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, input, mode)?;
        Ok(g.value(f.logits).clone())
    }

    /// Arg-max class per sample; the first maximum wins ties.
    pub fn predict(&self, input: &Tensor, mode: ForwardMode) -> Result<Vec<usize>> {
        let logits = self.logits(input, mode)?;
        let classes = logits.shape()[1];
        Ok(logits
            .data()
            .chunks_exact(classes)
            .map(|row| {
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }

    /// Clone with every trainable layer's weights snapped to its levels.
    pub fn snapped(&self, geometries: &IndexMap<String, LevelGeometry>) -> Result<Model> {
        let mut out = self.clone();
        for (name, p) in out.params.iter_mut() {
            let g = geometries
                .get(name)
                .ok_or_else(|| Error::Config(format!("no level geometry for layer {name}")))?;
            p.weight = quantize::snap_to_levels(&p.weight, g)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantize::Scheme;

    fn wrpn(bits: u32) -> Option<QuantizerSpec> {
        Some(QuantizerSpec::new(Scheme::Wrpn, bits).unwrap())
    }

    fn mlp() -> ModelSpec {
        ModelSpec {
            input_shape: vec![2],
            layers: vec![
                LayerSpec::dense("fc1", 2, 8, wrpn(3)),
                LayerSpec::relu("relu1"),
                LayerSpec::dense("fc2", 8, 3, wrpn(3)),
            ],
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::init(mlp(), 42).unwrap();
        let b = Model::init(mlp(), 42).unwrap();
        let c = Model::init(mlp(), 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn dense_shapes() {
        let spec = ModelSpec {
            input_shape: vec![4],
            layers: vec![LayerSpec::dense("fc", 4, 3, None)],
        };
        let m = Model::init(spec, 0).unwrap();
        assert_eq!(m.params()["fc"].weight.shape(), &[4, 3]);
        assert_eq!(m.params()["fc"].bias.shape(), &[3]);
        assert!(m.params()["fc"].bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn init_mean_is_within_three_standard_errors() {
        let spec = ModelSpec {
            input_shape: vec![100],
            layers: vec![LayerSpec::dense("fc", 100, 100, None)],
        };
        let m = Model::init(spec, 7).unwrap();
        let w = m.params()["fc"].weight.data();
        let b = (6.0f64 / 200.0).sqrt();
        assert!(w.iter().all(|v| v.abs() < b));
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let stderr = (b * b / 3.0).sqrt() / (w.len() as f64).sqrt();
        assert!(mean.abs() < 3.0 * stderr, "mean {mean}, stderr {stderr}");
    }

    #[test]
    fn shape_errors_caught_at_validation() {
        let bad = ModelSpec {
            input_shape: vec![2],
            layers: vec![
                LayerSpec::dense("fc1", 2, 8, None),
                LayerSpec::dense("fc2", 7, 3, None),
            ],
        };
        assert!(matches!(Model::init(bad, 0), Err(Error::Spec(_))));

        let dup = ModelSpec {
            input_shape: vec![2],
            layers: vec![LayerSpec::dense("fc", 2, 2, None), LayerSpec::dense("fc", 2, 2, None)],
        };
        assert!(dup.validate().is_err());

        let quant_on_relu = ModelSpec {
            input_shape: vec![2],
            layers: vec![
                LayerSpec::dense("fc", 2, 2, None),
                LayerSpec {
                    quant: wrpn(2),
                    ..LayerSpec::relu("r")
                },
            ],
        };
        assert!(quant_on_relu.validate().is_err());

        let conv_bad = ModelSpec {
            input_shape: vec![1, 4, 4],
            layers: vec![
                LayerSpec::conv2d("c", 1, 2, 3, 2, 0, None),
                LayerSpec::flatten("f"),
            ],
        };
        assert!(conv_bad.validate().is_err());
    }

    #[test]
    fn conv_stack_shapes_compose() {
        let spec = ModelSpec {
            input_shape: vec![1, 6, 6],
            layers: vec![
                LayerSpec::conv2d("conv1", 1, 2, 3, 1, 1, None),
                LayerSpec::relu("r1"),
                LayerSpec::conv2d("conv2", 2, 3, 3, 1, 0, None),
                LayerSpec::flatten("flat"),
                LayerSpec::dense("fc", 48, 4, None),
            ],
        };
        assert_eq!(spec.validate().unwrap(), vec![4]);
        let m = Model::init(spec, 1).unwrap();
        let x = Tensor::zeros(vec![2, 1, 6, 6]).unwrap();
        assert_eq!(m.logits(&x, ForwardMode::FullPrecision).unwrap().shape(), &[2, 4]);
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let spec = ModelSpec {
            input_shape: vec![3],
            layers: vec![LayerSpec::dense("fc", 3, 3, None)],
        };
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let params = IndexMap::from([(
            "fc".to_string(),
            LayerParams {
                weight: Tensor::new(vec![3, 3], eye).unwrap(),
                bias: Tensor::zeros(vec![3]).unwrap(),
            },
        )]);
        let m = Model::from_params(spec, params).unwrap();
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 0.25, -1.0]).unwrap();
        assert_eq!(m.logits(&x, ForwardMode::FullPrecision).unwrap().data(), x.data());
    }

    #[test]
    fn quantized_forward_matches_full_precision_on_levels() {
        let m = Model::init(mlp(), 3).unwrap();
        let snapped = m.snapped(&m.geometries().unwrap()).unwrap();
        let x = Tensor::new(vec![2, 2], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let fp = snapped.logits(&x, ForwardMode::FullPrecision).unwrap();
        let q = snapped.logits(&x, ForwardMode::QuantizedSte).unwrap();
        for (a, b) in fp.data().iter().zip(q.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn quantized_forward_requires_quantizers() {
        let spec = ModelSpec {
            input_shape: vec![2],
            layers: vec![LayerSpec::dense("fc", 2, 2, None)],
        };
        let m = Model::init(spec, 0).unwrap();
        let x = Tensor::zeros(vec![1, 2]).unwrap();
        assert!(matches!(m.logits(&x, ForwardMode::QuantizedSte), Err(Error::Config(_))));
        assert!(m.logits(&x, ForwardMode::FullPrecision).is_ok());
    }

    #[test]
    fn forward_does_not_touch_shadow_weights() {
        let m = Model::init(mlp(), 5).unwrap();
        let before = m.clone();
        let x = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let mut g = Graph::new();
        let f = m.forward(&mut g, &x, ForwardMode::QuantizedSte).unwrap();
        let l = g.softmax_cross_entropy(f.logits, &[1]).unwrap();
        g.backward(l).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn layer_spec_json_shape() {
        let json = r#"{"name":"fc1","layer":{"dense":{"in_features":2,"out_features":4}},"quant":{"scheme":"wrpn","bits":3}}"#;
        let l: LayerSpec = serde_json::from_str(json).unwrap();
        assert_eq!(l, LayerSpec::dense("fc1", 2, 4, wrpn(3)));
        let relu: LayerSpec = serde_json::from_str(r#"{"name":"r","layer":"relu"}"#).unwrap();
        assert_eq!(relu, LayerSpec::relu("r"));
        assert!(serde_json::from_str::<LayerSpec>(r#"{"name":"r","layer":"relu","extra":1}"#).is_err());
    }
}
