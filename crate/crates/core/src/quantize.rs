//! Quantization level sets and the periodic geometry derived from them.
//!
//! For every supported scheme the level set is uniform, so it is fully
//! described by its spacing (`period`) and an offset `delta` chosen so that
//! `sin²(π (v + delta) / period)` vanishes at every level `v`. That geometry is
//! what the regularizer in [`crate::sinreq`] consumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest supported bitwidth. Level sets are materialized, so this bounds
/// their length at 2^16.
pub const MAX_BITS: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Dorefa,
    Wrpn,
    UniformMidTread,
    UniformMidRise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerSpec {
    pub scheme: Scheme,
    pub bits: u32,
}

impl QuantizerSpec {
    pub fn new(scheme: Scheme, bits: u32) -> Result<Self> {
        let spec = QuantizerSpec { scheme, bits };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let min = match self.scheme {
            Scheme::Dorefa | Scheme::Wrpn => 2,
            Scheme::UniformMidTread | Scheme::UniformMidRise => 1,
        };
        if self.bits < min || self.bits > MAX_BITS {
            return Err(Error::Parameter(format!(
                "{:?} needs a bitwidth in {min}..={MAX_BITS}, got {}",
                self.scheme, self.bits
            )));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<LevelGeometry> {
        level_geometry(*self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelGeometry {
    levels: Vec<f64>,
    period: f64,
    delta: f64,
}

impl LevelGeometry {
    /// Strictly increasing quantization levels in `[-1, 1]`.
    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// Spacing between adjacent levels; the period of the regularizer.
    pub fn period(&self) -> f64 {
        self.period
    }

    /// Offset in `[0, period)` that moves the sine zeros onto the levels.
    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Nearest level to `x`; an exact midpoint goes to the larger level.
    pub fn nearest(&self, x: f64) -> f64 {
        let levels = &self.levels;
        let upper = levels.partition_point(|&v| v < x);
        if upper == 0 {
            return levels[0];
        }
        if upper == levels.len() {
            return levels[levels.len() - 1];
        }
        let (lo, hi) = (levels[upper - 1], levels[upper]);
        if hi - x <= x - lo {
            hi
        } else {
            lo
        }
    }

    /// Distance from `x` to its nearest level.
    pub fn distance(&self, x: f64) -> f64 {
        (x - self.nearest(x)).abs()
    }
}

/// Symmetric `k`-bit sign-magnitude lattice `{m / n : |m| <= n}`.
fn symmetric_lattice(n: u64) -> LevelGeometry {
    let nf = n as f64;
    let levels = (-(n as i64)..=n as i64).map(|m| m as f64 / nf).collect();
    LevelGeometry {
        levels,
        period: 1.0 / nf,
        delta: 0.0,
    }
}

/// `n + 1` levels `{2m / n - 1}` spanning `[-1, 1]` with `n` odd, so zero is
/// never a level.
fn shifted_lattice(n: u64) -> LevelGeometry {
    let nf = n as f64;
    let levels = (0..=n).map(|m| 2.0 * m as f64 / nf - 1.0).collect();
    let period = 2.0 / nf;
    LevelGeometry {
        levels,
        period,
        delta: period / 2.0,
    }
}

pub fn level_geometry(spec: QuantizerSpec) -> Result<LevelGeometry> {
    spec.validate()?;
    let k = spec.bits;
    Ok(match spec.scheme {
        Scheme::Dorefa | Scheme::UniformMidRise => shifted_lattice((1u64 << k) - 1),
        Scheme::Wrpn => symmetric_lattice((1u64 << (k - 1)) - 1),
        // a single-level lattice has no period; one bit is promoted to ternary
        Scheme::UniformMidTread => symmetric_lattice(((1u64 << (k - 1)) - 1).max(1)),
    })
}

/// DoReFa weight quantizer: `2 · quantize_k(tanh(w) / (2 max|tanh(w)|) + 1/2) - 1`,
/// with the maximum taken over the whole tensor.
pub fn dorefa_quantize(w: &Tensor, bits: u32) -> Result<Tensor> {
    QuantizerSpec::new(Scheme::Dorefa, bits)?;
    let n = ((1u64 << bits) - 1) as f64;
    let squashed: Vec<f64> = w.data().iter().map(|v| v.tanh()).collect();
    let max = squashed.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return Err(Error::DegenerateScale(
            "DoReFa normalization needs max|tanh(w)| > 0".into(),
        ));
    }
    let out = squashed
        .iter()
        .map(|t| {
            let unit = t / (2.0 * max) + 0.5;
            let m = (n * unit).round();
            2.0 * m / n - 1.0
        })
        .collect();
    Tensor::new(w.shape().to_vec(), out)
}

/// WRPN weight quantizer: clip to `[-1, 1]`, then
/// `round((2^(k-1) - 1) w) / (2^(k-1) - 1)`.
pub fn wrpn_quantize(w: &Tensor, bits: u32) -> Result<Tensor> {
    QuantizerSpec::new(Scheme::Wrpn, bits)?;
    let n = ((1u64 << (bits - 1)) - 1) as f64;
    w.map(|v| (n * v.clamp(-1.0, 1.0)).round() / n)
}

pub fn snap_to_levels(w: &Tensor, geometry: &LevelGeometry) -> Result<Tensor> {
    w.map(|v| geometry.nearest(v))
}

/// Applies the quantizer that `spec` names: the DoReFa and WRPN formulas for
/// those schemes, a nearest-level snap for the plain uniform ones.
pub fn quantize(w: &Tensor, spec: QuantizerSpec) -> Result<Tensor> {
    match spec.scheme {
        Scheme::Dorefa => dorefa_quantize(w, spec.bits),
        Scheme::Wrpn => wrpn_quantize(w, spec.bits),
        Scheme::UniformMidTread | Scheme::UniformMidRise => snap_to_levels(w, &spec.geometry()?),
    }
}
