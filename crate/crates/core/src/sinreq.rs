//! Weight decay, the sinusoidal quantization regularizer, and the combined
//! training objective, all built as graph nodes so gradients come from
//! [`Graph::backward`].
//!
//! The per-layer regularizer is the mean of `sin²(π (w + Δ) / step)` over the
//! layer's weights; it is zero exactly when every weight sits on a
//! quantization level of the layer's [`LevelGeometry`].

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::quantize::LevelGeometry;
use crate::tensor::{Graph, NodeId, Tensor};

/// Used when a layer's strength is not given explicitly.
pub const DEFAULT_LAMBDA_Q: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRegularizer {
    pub lambda_q: f64,
    pub geometry: LevelGeometry,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerConfig {
    lambda_wd: f64,
    per_layer: IndexMap<String, LayerRegularizer>,
}

fn check_strength(what: &str, value: f64) -> Result<()> {
    if !(value.is_finite() && value >= 0.0) {
        return Err(Error::Config(format!(
            "{what} must be finite and non-negative, got {value}"
        )));
    }
    Ok(())
}

impl RegularizerConfig {
    pub fn new(lambda_wd: f64, per_layer: IndexMap<String, LayerRegularizer>) -> Result<Self> {
        check_strength("weight decay", lambda_wd)?;
        for (name, layer) in &per_layer {
            check_strength(&format!("lambda_q of layer {name}"), layer.lambda_q)?;
        }
        Ok(RegularizerConfig {
            lambda_wd,
            per_layer,
        })
    }

    pub fn lambda_wd(&self) -> f64 {
        self.lambda_wd
    }

    pub fn layers(&self) -> &IndexMap<String, LayerRegularizer> {
        &self.per_layer
    }

    pub fn layer(&self, name: &str) -> Result<&LayerRegularizer> {
        self.per_layer
            .get(name)
            .ok_or_else(|| Error::Config(format!("no regularizer entry for layer {name}")))
    }

    /// Copy with every layer's `lambda_q` replaced by `f(name, lambda_q)`.
    pub fn with_lambdas(&self, mut f: impl FnMut(&str, f64) -> f64) -> Result<Self> {
        let per_layer = self
            .per_layer
            .iter()
            .map(|(name, layer)| {
                let lambda_q = f(name, layer.lambda_q);
                (
                    name.clone(),
                    LayerRegularizer {
                        lambda_q,
                        geometry: layer.geometry.clone(),
                    },
                )
            })
            .collect();
        RegularizerConfig::new(self.lambda_wd, per_layer)
    }

    pub fn with_weight_decay(&self, lambda_wd: f64) -> Result<Self> {
        RegularizerConfig::new(lambda_wd, self.per_layer.clone())
    }
}

/// `(λ/2) Σ_layers Σ_elements w²`.
pub fn weight_decay_loss(graph: &mut Graph, weights: &[NodeId], lambda_wd: f64) -> Result<NodeId> {
    check_strength("weight decay", lambda_wd)?;
    let mut acc: Option<NodeId> = None;
    for &w in weights {
        let n = graph.value(w).len() as f64;
        let sq = graph.square(w)?;
        let mean = graph.reduce_mean(sq)?;
        let term = graph.scale(mean, 0.5 * lambda_wd * n)?;
        acc = Some(match acc {
            Some(prev) => graph.add(prev, term)?,
            None => term,
        });
    }
    match acc {
        Some(node) => Ok(node),
        None => Ok(graph.leaf(Tensor::scalar(0.0)?)),
    }
}

/// Mean of `sin²(π (w + Δ) / step)` over the elements of `weights`.
pub fn sinreq_loss(graph: &mut Graph, weights: NodeId, geometry: &LevelGeometry) -> Result<NodeId> {
    let s = graph.sin_sq_affine(weights, geometry.period(), geometry.delta())?;
    graph.reduce_mean(s)
}

/// Evaluates [`sinreq_loss`] on a plain tensor.
pub fn sinreq_value(weights: &Tensor, geometry: &LevelGeometry) -> Result<f64> {
    let mut g = Graph::new();
    let w = g.leaf(weights.clone());
    let l = sinreq_loss(&mut g, w, geometry)?;
    g.value(l).item()
}

/// Node ids of the pieces of a combined objective.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub total: NodeId,
    pub task: NodeId,
    pub weight_decay: NodeId,
    /// Unscaled per-layer regularizer values, in configuration order.
    pub sinreq: IndexMap<String, NodeId>,
}

/// `task + weight_decay + Σ_layers λ_q · sinreq(layer)`.
///
/// `weights` maps every regularized layer to the node holding its
/// full-precision weights. Each layer must appear in `cfg` and vice versa.
pub fn total_loss(
    graph: &mut Graph,
    task: NodeId,
    weights: &IndexMap<String, NodeId>,
    cfg: &RegularizerConfig,
) -> Result<TotalLoss> {
    for name in cfg.layers().keys() {
        if !weights.contains_key(name) {
            return Err(Error::Config(format!(
                "regularizer configured for unknown layer {name}"
            )));
        }
    }
    let ids: Vec<NodeId> = weights.values().copied().collect();
    let weight_decay = weight_decay_loss(graph, &ids, cfg.lambda_wd())?;
    let mut total = graph.add(task, weight_decay)?;
    let mut sinreq = IndexMap::with_capacity(weights.len());
    for (name, &w) in weights {
        let layer = cfg.layer(name)?;
        let loss = sinreq_loss(graph, w, &layer.geometry)?;
        let scaled = graph.scale(loss, layer.lambda_q)?;
        total = graph.add(total, scaled)?;
        sinreq.insert(name.clone(), loss);
    }
    Ok(TotalLoss {
        total,
        task,
        weight_decay,
        sinreq,
    })
}
