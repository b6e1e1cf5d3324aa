//! Per-epoch metrics, weight histograms, weight trajectories and their CSV
//! exports.

use std::fmt::Write as _;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::quantize::LevelGeometry;
use crate::tensor::Tensor;

/// A weight counts as "near" a level within this fraction of the period.
pub const NEAR_LEVEL_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMetrics {
    pub sinreq_loss: f64,
    pub lambda_q: f64,
    pub quant_error: f64,
    pub frac_near_level: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub epoch: usize,
    pub train_acc: f64,
    pub val_acc: f64,
    pub task_loss: f64,
    pub total_loss: f64,
    pub per_layer: IndexMap<String, LayerMetrics>,
    /// `(flat weight index, value)` for each tracked weight, by layer.
    pub trajectories: IndexMap<String, Vec<(usize, f64)>>,
}

/// Mean absolute distance from each weight to its nearest level.
pub fn quant_error(w: &Tensor, geometry: &LevelGeometry) -> Result<f64> {
    if w.is_empty() {
        return Err(Error::Dimension("quantization error of an empty tensor".into()));
    }
    let total: f64 = w.data().iter().map(|&v| geometry.distance(v)).sum();
    Ok(total / w.len() as f64)
}

/// Fraction of weights within `NEAR_LEVEL_FRACTION * period` of a level.
pub fn frac_near_level(w: &Tensor, geometry: &LevelGeometry) -> f64 {
    let eps = NEAR_LEVEL_FRACTION * geometry.period();
    let near = w.data().iter().filter(|&&v| geometry.distance(v) <= eps).count();
    near as f64 / w.len().max(1) as f64
}

/// Equal-width bin counts over `[lo, hi]`; values outside fall into the edge
/// bins.
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Vec<usize>> {
    if bins == 0 {
        return Err(Error::Parameter("histogram needs at least one bin".into()));
    }
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::Parameter(format!("invalid histogram range [{lo}, {hi}]")));
    }
    let mut counts = vec![0; bins];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        let b = ((v - lo) / width).floor();
        let b = if b < 0.0 { 0 } else { (b as usize).min(bins - 1) };
        counts[b] += 1;
    }
    Ok(counts)
}

/// Fixed set of weight positions per layer whose values are recorded every
/// epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySampler {
    indices: IndexMap<String, Vec<usize>>,
}

impl TrajectorySampler {
    /// Picks `per_layer` distinct weight indices in every trainable layer.
    pub fn new(model: &Model, per_layer: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut indices = IndexMap::new();
        for (name, p) in model.params() {
            let len = p.weight.len();
            if per_layer > len {
                return Err(Error::Parameter(format!(
                    "cannot track {per_layer} weights in layer {name} with {len}"
                )));
            }
            let mut chosen = rand::seq::index::sample(&mut rng, len, per_layer).into_vec();
            chosen.sort_unstable();
            indices.insert(name.clone(), chosen);
        }
        Ok(TrajectorySampler { indices })
    }

    pub fn indices(&self) -> &IndexMap<String, Vec<usize>> {
        &self.indices
    }

    pub fn sample(&self, model: &Model) -> IndexMap<String, Vec<(usize, f64)>> {
        self.indices
            .iter()
            .map(|(name, idx)| {
                let w = model.params()[name].weight.data();
                (name.clone(), idx.iter().map(|&i| (i, w[i])).collect())
            })
            .collect()
    }
}

/// Formats like C's `%.9g`: nine significant digits, trailing zeros dropped.
pub fn fmt_sig(v: f64) -> String {
    const DIGITS: i32 = 9;
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{:.*e}", (DIGITS - 1) as usize, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..DIGITS).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        trim_zeros(&format!("{:.*}", (DIGITS - 1 - exp) as usize, v)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub const METRIC_COLUMNS: [&str; 5] = ["epoch", "train_acc", "val_acc", "task_loss", "total_loss"];
pub const LAYER_COLUMNS: [&str; 4] = ["sinreq_loss", "lambda_q", "quant_error", "frac_near_level"];

/// `metrics.csv`: one row per epoch; per-layer columns follow the layer order
/// of the first record.
pub fn metrics_csv(layers: &[String], records: &[RunRecord]) -> String {
    let mut out = METRIC_COLUMNS.join(",");
    for layer in layers {
        for col in LAYER_COLUMNS {
            let _ = write!(out, ",{layer}_{col}");
        }
    }
    out.push('\n');
    for r in records {
        let _ = write!(
            out,
            "{},{},{},{},{}",
            r.epoch,
            fmt_sig(r.train_acc),
            fmt_sig(r.val_acc),
            fmt_sig(r.task_loss),
            fmt_sig(r.total_loss)
        );
        for layer in layers {
            match r.per_layer.get(layer) {
                Some(m) => {
                    for v in [m.sinreq_loss, m.lambda_q, m.quant_error, m.frac_near_level] {
                        let _ = write!(out, ",{}", fmt_sig(v));
                    }
                }
                None => out.push_str(",,,,"),
            }
        }
        out.push('\n');
    }
    out
}

pub fn histogram_csv(counts: &[usize], lo: f64, hi: f64) -> String {
    let width = (hi - lo) / counts.len() as f64;
    let mut out = String::from("bin_lo,bin_hi,count\n");
    for (i, c) in counts.iter().enumerate() {
        let a = lo + width * i as f64;
        let b = if i + 1 == counts.len() { hi } else { lo + width * (i + 1) as f64 };
        let _ = writeln!(out, "{},{},{c}", fmt_sig(a), fmt_sig(b));
    }
    out
}

/// `traj_<layer>.csv`: epoch, then one column per tracked weight index.
pub fn trajectory_csv(layer: &str, indices: &[usize], records: &[RunRecord]) -> String {
    let mut out = String::from("epoch");
    for i in indices {
        let _ = write!(out, ",w{i}");
    }
    out.push('\n');
    for r in records {
        let _ = write!(out, "{}", r.epoch);
        if let Some(points) = r.trajectories.get(layer) {
            for (_, v) in points {
                let _ = write!(out, ",{}", fmt_sig(*v));
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerSpec, ModelSpec};
    use crate::quantize::{QuantizerSpec, Scheme};
    use proptest::prelude::*;
    use rand::Rng;

    fn wrpn3() -> LevelGeometry {
        QuantizerSpec::new(Scheme::Wrpn, 3).unwrap().geometry().unwrap()
    }

    #[test]
    fn quant_error_cases() {
        let g = wrpn3();
        let on = Tensor::from_vec(g.levels().to_vec()).unwrap();
        assert_eq!(quant_error(&on, &g).unwrap(), 0.0);
        assert_eq!(frac_near_level(&on, &g), 1.0);
        let mid = Tensor::from_vec(vec![0.5]).unwrap();
        assert!((quant_error(&mid, &g).unwrap() - g.period() / 2.0).abs() < 1e-15);
        assert_eq!(frac_near_level(&mid, &g), 0.0);
    }

    #[test]
    fn quant_error_matches_linear_scan() {
        let g = wrpn3();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let values: Vec<f64> = (0..500).map(|_| rng.random_range(-1.5..1.5)).collect();
        let expected = values
            .iter()
            .map(|v| g.levels().iter().map(|l| (v - l).abs()).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / values.len() as f64;
        let got = quant_error(&Tensor::from_vec(values).unwrap(), &g).unwrap();
        assert!((got - expected).abs() < 1e-14);
    }

    #[test]
    fn histogram_cases() {
        assert_eq!(histogram(&[0.3; 7], 5, -1.0, 1.0).unwrap(), vec![0, 0, 0, 7, 0]);
        let grid: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        assert_eq!(histogram(&grid, 10, 0.0, 1.0).unwrap(), vec![10; 10]);
        assert_eq!(histogram(&[-5.0, 5.0, 1.0], 4, 0.0, 1.0).unwrap(), vec![1, 0, 0, 2]);
        assert!(histogram(&[0.0], 0, 0.0, 1.0).is_err());
        assert!(histogram(&[0.0], 3, 1.0, 1.0).is_err());
    }

    #[test]
    fn histogram_matches_per_element_binning() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let values: Vec<f64> = (0..300).map(|_| rng.random_range(-1.2..1.2)).collect();
        let (bins, lo, hi) = (8usize, -1.0, 1.0);
        let mut expected = vec![0usize; bins];
        for v in &values {
            let mut placed = false;
            for b in 0..bins {
                let a = lo + (hi - lo) * b as f64 / bins as f64;
                let z = lo + (hi - lo) * (b + 1) as f64 / bins as f64;
                if *v >= a && *v < z {
                    expected[b] += 1;
                    placed = true;
                }
            }
            if !placed {
                expected[if *v < lo { 0 } else { bins - 1 }] += 1;
            }
        }
        assert_eq!(histogram(&values, bins, lo, hi).unwrap(), expected);
    }

    fn model() -> Model {
        let spec = ModelSpec {
            input_shape: vec![3],
            layers: vec![
                LayerSpec::dense("fc1", 3, 4, None),
                LayerSpec::relu("r"),
                LayerSpec::dense("fc2", 4, 2, None),
            ],
        };
        Model::init(spec, 2).unwrap()
    }

    #[test]
    fn sampler_cases() {
        let m = model();
        let a = TrajectorySampler::new(&m, 5, 1).unwrap();
        let b = TrajectorySampler::new(&m, 5, 1).unwrap();
        assert_eq!(a, b);
        let full = TrajectorySampler::new(&m, 8, 1).unwrap();
        assert_eq!(full.indices()["fc2"], (0..8).collect::<Vec<_>>());
        assert!(TrajectorySampler::new(&m, 9, 1).is_err());
        let s = a.sample(&m);
        for (i, v) in &s["fc1"] {
            assert_eq!(m.params()["fc1"].weight.data()[*i], *v);
        }
    }

    #[test]
    fn sig_digits_formatting() {
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(1.0), "1");
        assert_eq!(fmt_sig(0.5), "0.5");
        assert_eq!(fmt_sig(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_sig(-2.0 / 3.0), "-0.666666667");
        assert_eq!(fmt_sig(123456.789123), "123456.789");
        assert_eq!(fmt_sig(1.5e-7), "1.5e-07");
        assert_eq!(fmt_sig(2.0e12), "2e+12");
        assert_eq!(fmt_sig(9.9999999999), "10");
    }

    #[test]
    fn metrics_csv_layout() {
        let rec = RunRecord {
            epoch: 1,
            train_acc: 0.5,
            val_acc: 0.25,
            task_loss: 0.693147182,
            total_loss: 1.0,
            per_layer: IndexMap::from([(
                "fc1".to_string(),
                LayerMetrics {
                    sinreq_loss: 0.1,
                    lambda_q: 2.0,
                    quant_error: 0.05,
                    frac_near_level: 0.75,
                },
            )]),
            trajectories: IndexMap::new(),
        };
        let csv = metrics_csv(&["fc1".to_string()], &[rec]);
        assert_eq!(
            csv,
            "epoch,train_acc,val_acc,task_loss,total_loss,fc1_sinreq_loss,fc1_lambda_q,fc1_quant_error,fc1_frac_near_level\n\
             1,0.5,0.25,0.693147182,1,0.1,2,0.05,0.75\n"
        );
    }

    proptest! {
        #[test]
        fn histogram_conserves_count(values in prop::collection::vec(-3.0f64..3.0, 0..200), bins in 1usize..30) {
            let counts = histogram(&values, bins, -1.0, 1.0).unwrap();
            prop_assert_eq!(counts.iter().sum::<usize>(), values.len());
        }

        #[test]
        fn zero_error_iff_zero_regularizer(idx in prop::collection::vec(0usize..7, 1..12), bump in prop::option::of(1e-6f64..0.1)) {
            let g = wrpn3();
            let mut values: Vec<f64> = idx.iter().map(|&i| g.levels()[i]).collect();
            if let Some(b) = bump { values[0] += b; }
            let w = Tensor::from_vec(values).unwrap();
            let err = quant_error(&w, &g).unwrap();
            let reg = crate::sinreq::sinreq_value(&w, &g).unwrap();
            prop_assert_eq!(err == 0.0, reg < 1e-22);
        }
    }
}
