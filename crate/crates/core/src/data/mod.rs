//! Datasets: in-memory sample storage, seeded synthetic generators and
//! train/validation splitting.

pub mod idx;

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    sample_shape: Vec<usize>,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(sample_shape: Vec<usize>, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if per == 0 || features.len() != per * labels.len() {
            return Err(Error::Spec(format!(
                "{} feature values do not form {} samples of shape {sample_shape:?}",
                features.len(),
                labels.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Spec("dataset contains non-finite features".into()));
        }
        Ok(Dataset {
            sample_shape,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let per = self.sample_size();
        &self.features[i * per..(i + 1) * per]
    }

    fn sample_size(&self) -> usize {
        self.sample_shape.iter().product()
    }

    /// Number of classes implied by the largest label.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Gathers the given samples into a `[len, ...sample_shape]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per = self.sample_size();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index(format!("sample {i} out of {}", self.len())));
            }
            data.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        Ok((Tensor::new(shape, data)?, labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (t, labels) = self.batch(indices)?;
        Dataset::new(self.sample_shape.clone(), t.into_data(), labels)
    }

    /// Shuffles with `seed` and cuts into train/validation parts.
    pub fn split(&self, fractions: &SplitFractions, seed: u64) -> Result<Splits> {
        fractions.validate()?;
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = (fractions.train * self.len() as f64).round() as usize;
        if n_train == 0 || n_train >= self.len() {
            return Err(Error::Spec(format!(
                "split of {} samples at {} leaves an empty part",
                self.len(),
                fractions.train
            )));
        }
        Ok(Splits {
            train: self.subset(&order[..n_train])?,
            val: self.subset(&order[n_train..])?,
        })
    }

    /// Rescales every feature dimension to zero mean and unit variance. A
    /// constant dimension is only centered.
    pub fn standardize(&mut self) {
        let per = self.sample_size();
        let n = self.len() as f64;
        for d in 0..per {
            let mean = self.features.iter().skip(d).step_by(per).sum::<f64>() / n;
            let var = self
                .features
                .iter()
                .skip(d)
                .step_by(per)
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>()
                / n;
            let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
            for v in self.features.iter_mut().skip(d).step_by(per) {
                *v = (*v - mean) * scale;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.8, val: 0.2 }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let ok = |f: f64| f.is_finite() && f > 0.0 && f < 1.0;
        if !ok(self.train) || !ok(self.val) || (self.train + self.val - 1.0).abs() > 1e-9 {
            return Err(Error::Spec(format!(
                "split fractions {} + {} must be positive and sum to 1",
                self.train, self.val
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Gaussian clusters around seeded centers drawn uniformly from
    /// `[-center_range, center_range]^dim`.
    Blobs {
        classes: usize,
        samples_per_class: usize,
        noise: f64,
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_center_range")]
        center_range: f64,
    },
    /// Two interleaved spiral arms, one per class.
    Spirals {
        samples_per_class: usize,
        noise: f64,
        #[serde(default = "default_turns")]
        turns: f64,
    },
    IdxDigits {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit: Option<usize>,
    },
}

fn default_dim() -> usize {
    2
}

fn default_center_range() -> f64 {
    5.0
}

fn default_turns() -> f64 {
    1.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    #[serde(default)]
    pub split: SplitFractions,
    /// Seeds generation and the split shuffle.
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        match &self.source {
            DataSource::Blobs {
                classes,
                samples_per_class,
                noise,
                dim,
                center_range,
            } => {
                if *classes == 0 || *samples_per_class == 0 || *dim == 0 {
                    return Err(Error::Spec("blobs need positive classes, samples and dim".into()));
                }
                if !(noise.is_finite() && *noise >= 0.0) || !(center_range.is_finite() && *center_range > 0.0) {
                    return Err(Error::Spec("blobs noise must be >= 0 and center range > 0".into()));
                }
            }
            DataSource::Spirals {
                samples_per_class,
                noise,
                turns,
            } => {
                if *samples_per_class == 0 {
                    return Err(Error::Spec("spirals need positive samples per class".into()));
                }
                if !(noise.is_finite() && *noise >= 0.0) || !(turns.is_finite() && *turns > 0.0) {
                    return Err(Error::Spec("spirals noise must be >= 0 and turns > 0".into()));
                }
            }
            DataSource::IdxDigits { limit, .. } => {
                if *limit == Some(0) {
                    return Err(Error::Spec("idx limit must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// Loads or generates the data and splits it. Relative IDX paths are
    /// resolved against `base_dir`.
    pub fn load(&self, base_dir: &Path) -> Result<Splits> {
        self.validate()?;
        let data = match &self.source {
            DataSource::IdxDigits { images, labels, limit } => {
                let raw = idx::load_idx(&base_dir.join(images), &base_dir.join(labels))?;
                let ds = raw.to_dataset()?;
                match limit {
                    Some(n) if *n < ds.len() => ds.subset(&(0..*n).collect::<Vec<_>>())?,
                    _ => ds,
                }
            }
            source => generate_synthetic(source, self.seed)?,
        };
        data.split(&self.split, self.seed.wrapping_add(1))
    }
}

/// Seeded synthetic data with standardized features.
pub fn generate_synthetic(source: &DataSource, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = match *source {
        DataSource::Blobs {
            classes,
            samples_per_class,
            noise,
            dim,
            center_range,
        } => {
            let centers = blob_centers(classes, dim, center_range, &mut rng);
            let mut features = Vec::with_capacity(classes * samples_per_class * dim);
            let mut labels = Vec::with_capacity(classes * samples_per_class);
            for (class, center) in centers.iter().enumerate() {
                for _ in 0..samples_per_class {
                    for c in center {
                        let z: f64 = rng.sample(StandardNormal);
                        features.push(c + noise * z);
                    }
                    labels.push(class);
                }
            }
            Dataset::new(vec![dim], features, labels)?
        }
        DataSource::Spirals {
            samples_per_class,
            noise,
            turns,
        } => {
            let mut features = Vec::with_capacity(4 * samples_per_class);
            let mut labels = Vec::with_capacity(2 * samples_per_class);
            for class in 0..2 {
                for i in 0..samples_per_class {
                    let t = (i as f64 + 0.5) / samples_per_class as f64;
                    let z: f64 = rng.sample(StandardNormal);
                    let angle = 2.0 * PI * turns * t + PI * class as f64 + noise * z;
                    let radius = t;
                    features.push(radius * angle.cos());
                    features.push(radius * angle.sin());
                    labels.push(class);
                }
            }
            Dataset::new(vec![2], features, labels)?
        }
        DataSource::IdxDigits { .. } => {
            return Err(Error::Spec("IDX digits are loaded from files, not generated".into()))
        }
    };
    ds.standardize();
    Ok(ds)
}

fn blob_centers(classes: usize, dim: usize, range: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|_| (0..dim).map(|_| rng.random_range(-range..range)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(noise: f64) -> DataSource {
        DataSource::Blobs {
            classes: 3,
            samples_per_class: 40,
            noise,
            dim: 2,
            center_range: 5.0,
        }
    }

    #[test]
    fn zero_noise_blobs_sit_on_centers() {
        let ds = generate_synthetic(&blobs(0.0), 4).unwrap();
        for class in 0..3 {
            let members: Vec<&[f64]> = (0..ds.len())
                .filter(|&i| ds.labels()[i] == class)
                .map(|i| ds.sample(i))
                .collect();
            assert_eq!(members.len(), 40);
            assert!(members.iter().all(|m| *m == members[0]));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spiral = DataSource::Spirals {
            samples_per_class: 50,
            noise: 0.1,
            turns: 1.5,
        };
        assert_eq!(
            generate_synthetic(&spiral, 8).unwrap(),
            generate_synthetic(&spiral, 8).unwrap()
        );
        assert_ne!(
            generate_synthetic(&spiral, 8).unwrap(),
            generate_synthetic(&spiral, 9).unwrap()
        );
    }

    #[test]
    fn features_are_standardized() {
        let ds = generate_synthetic(&blobs(0.7), 2).unwrap();
        for d in 0..2 {
            let col: Vec<f64> = (0..ds.len()).map(|i| ds.sample(i)[d]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn separated_blobs_are_nearest_centroid_separable() {
        let noise = 0.05;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let centers = blob_centers(3, 2, 5.0, &mut rng);
        let min_dist = (0..3)
            .flat_map(|a| (a + 1..3).map(move |b| (a, b)))
            .map(|(a, b)| {
                centers[a]
                    .iter()
                    .zip(&centers[b])
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(f64::INFINITY, f64::min);
        assert!(min_dist > 10.0 * noise);

        let ds = generate_synthetic(&blobs(noise), 12).unwrap();
        let mut centroids = vec![[0.0f64; 2]; 3];
        let mut counts = [0usize; 3];
        for i in 0..ds.len() {
            let c = ds.labels()[i];
            counts[c] += 1;
            for d in 0..2 {
                centroids[c][d] += ds.sample(i)[d];
            }
        }
        for (c, n) in centroids.iter_mut().zip(counts) {
            c.iter_mut().for_each(|v| *v /= n as f64);
        }
        let correct = (0..ds.len())
            .filter(|&i| {
                let s = ds.sample(i);
                let best = (0..3)
                    .min_by(|&a, &b| {
                        let da: f64 = (0..2).map(|d| (s[d] - centroids[a][d]).powi(2)).sum();
                        let db: f64 = (0..2).map(|d| (s[d] - centroids[b][d]).powi(2)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                best == ds.labels()[i]
            })
            .count();
        assert_eq!(correct, ds.len());
    }

    #[test]
    fn split_partitions_all_samples() {
        let ds = generate_synthetic(&blobs(1.0), 3).unwrap();
        let s = ds.split(&SplitFractions { train: 0.75, val: 0.25 }, 1).unwrap();
        assert_eq!(s.train.len(), 90);
        assert_eq!(s.val.len(), 30);
        let bad = SplitFractions { train: 0.7, val: 0.2 };
        assert!(ds.split(&bad, 1).is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        let spec = DatasetSpec {
            source: DataSource::Spirals {
                samples_per_class: 0,
                noise: 0.1,
                turns: 1.0,
            },
            split: SplitFractions::default(),
            seed: 0,
        };
        assert!(spec.validate().is_err());
        let spec = DatasetSpec {
            source: blobs(-1.0),
            split: SplitFractions::default(),
            seed: 0,
        };
        assert!(spec.validate().is_err());
    }
}
