//! Labelled mixture datasets and the synthetic 2D toy task.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, MixtureBatch};
use crate::input::{fit_image_mixture, load_mnist, normalize_dataset, MnistSplit, Normalization};
use crate::serialize::{load_mixtures, save_mixtures};
use crate::train::config::DataConfig;

/// Samples of shape `(B, 1, N)` with one label each.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: MixtureBatch,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: MixtureBatch, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.batch() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.batch(),
                got: labels.len(),
            });
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {l} outside {classes} classes")));
        }
        Ok(Dataset {
            inputs,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let samples = indices.iter().map(|&i| self.inputs.sample(i)).collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            inputs: MixtureBatch::stack(&samples)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        })
    }

    pub fn head(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// Batches of at most `batch_size` consecutive indices of `order`.
    pub fn batches(&self, order: &[usize], batch_size: usize) -> Result<Vec<Dataset>> {
        order.chunks(batch_size.max(1)).map(|c| self.select(c)).collect()
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

/// Permutation of `0..n` for one epoch; depends only on `seed` and `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

pub const TOY_CLASSES: usize = 3;
pub const TOY_COMPONENTS: usize = 16;

fn jitter(rng: &mut ChaCha8Rng, s: f64) -> f64 {
    rng.gen_range(-s..s)
}

fn toy_sample(rng: &mut ChaCha8Rng, class: usize) -> Result<Vec<Gaussian>> {
    let count = rng.gen_range(8..=TOY_COMPONENTS);
    let angle = rng.gen_range(0.0..2.0 * PI);
    let (sa, ca) = angle.sin_cos();
    let centre = [jitter(rng, 2.0), jitter(rng, 2.0)];
    let mut out = Vec::with_capacity(TOY_COMPONENTS);
    for i in 0..count {
        let t = i as f64 / count as f64;
        let local = match class {
            // ring
            0 => {
                let r = 3.0 + jitter(rng, 0.3);
                let a = 2.0 * PI * t;
                [r * a.cos(), r * a.sin()]
            }
            // bar
            1 => [-4.0 + 8.0 * t + jitter(rng, 0.2), jitter(rng, 0.3)],
            // two blobs
            _ => {
                let side = if i % 2 == 0 { -2.5 } else { 2.5 };
                [side + jitter(rng, 0.8), jitter(rng, 0.8)]
            }
        };
        let p = [
            centre[0] + ca * local[0] - sa * local[1],
            centre[1] + sa * local[0] + ca * local[1],
        ];
        let v = rng.gen_range(0.3..0.7);
        let c = jitter(rng, 0.1);
        out.push(Gaussian::new(rng.gen_range(0.5..1.5), &p, &[v, c, v])?);
    }
    out.resize(TOY_COMPONENTS, Gaussian::padding(2));
    Ok(out)
}

/// `n` samples of the three-class ring/bar/two-blob task, each a mixture of
/// 8 to 16 randomly rotated and translated Gaussians padded to 16 components.
pub fn toy_dataset(n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gs = Vec::with_capacity(n * TOY_COMPONENTS);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % TOY_CLASSES;
        gs.extend(toy_sample(&mut rng, class)?);
        labels.push(class);
    }
    Dataset::new(MixtureBatch::new(2, n, 1, TOY_COMPONENTS, gs)?, labels, TOY_CLASSES)
}

/// Toy train and test splits drawn from independent streams.
pub fn toy_splits(train: usize, test: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    Ok((toy_dataset(train, seed)?, toy_dataset(test, seed.wrapping_add(0x5eed))?))
}

/// Fits `components` Gaussians to each of the first `limit` images of an
/// MNIST split, in parallel. The fitted mixtures are cached in `cache` when
/// given and read back on later calls.
pub fn mnist_dataset(
    dir: &Path,
    split: MnistSplit,
    limit: Option<usize>,
    components: usize,
    seed: u64,
    cache: Option<&Path>,
) -> Result<Dataset> {
    let (images, labels) = load_mnist(dir, split, limit)?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    if let Some(path) = cache {
        if path.exists() {
            let m = load_mixtures(path)?;
            if m.shape() == (labels.len(), 1, components) && m.dims() == 2 {
                return Dataset::new(m, labels, 10);
            }
            log::warn!("ignoring stale mixture cache {}", path.display());
        }
    }
    let fitted: Vec<Vec<Gaussian>> = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| fit_image_mixture(img, components, seed.wrapping_add(i as u64)))
        .collect::<Result<_>>()?;
    let m = MixtureBatch::new(2, labels.len(), 1, components, fitted.concat())?;
    if let Some(path) = cache {
        save_mixtures(path, &m)?;
    }
    Dataset::new(m, labels, 10)
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

/// Raw train and test splits described by `config`. MNIST fits are cached
/// under `cache_dir` when given.
pub fn load_splits(config: &DataConfig, seed: u64, cache_dir: Option<&Path>) -> Result<(Dataset, Dataset)> {
    match config {
        DataConfig::Toy { train, test } => toy_splits(*train, *test, seed),
        DataConfig::Mnist {
            dir,
            train_limit,
            test_limit,
            components,
        } => {
            let cache = |name: &str, limit: &Option<usize>| {
                cache_dir.map(|d| d.join(format!("mnist-{name}-{}-{components}.gm", limit.map_or("all".to_string(), |l| l.to_string()))))
            };
            let tr_cache = cache("train", train_limit);
            let te_cache = cache("test", test_limit);
            let tr = mnist_dataset(dir, MnistSplit::Train, *train_limit, *components, seed, tr_cache.as_deref())?;
            let te = mnist_dataset(dir, MnistSplit::Test, *test_limit, *components, seed, te_cache.as_deref())?;
            Ok((tr, te))
        }
        DataConfig::Mixtures {
            train,
            train_labels,
            test,
            test_labels,
            classes,
        } => Ok((
            Dataset::new(load_mixtures(train)?, read_labels(train_labels)?, *classes)?,
            Dataset::new(load_mixtures(test)?, read_labels(test_labels)?, *classes)?,
        )),
    }
}

/// Normalizes `train` in place and applies the same constants to `others`.
pub fn normalize_splits(train: &mut Dataset, others: &mut [&mut Dataset]) -> Result<Normalization> {
    let (m, norm) = normalize_dataset(&train.inputs)?;
    train.inputs = m;
    for d in others.iter_mut() {
        d.inputs = norm.apply(&d.inputs)?;
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::mixture_integral;

    #[test]
    fn toy_dataset_shape_and_balance() {
        let d = toy_dataset(30, 1).unwrap();
        assert_eq!(d.inputs.shape(), (30, 1, TOY_COMPONENTS));
        assert_eq!(d.class_counts(), vec![10, 10, 10]);
        for b in 0..30 {
            let live = d.inputs.channel(b, 0).unwrap().iter().filter(|g| g.weight > 0.0).count();
            assert!((8..=16).contains(&live));
        }
        assert_eq!(toy_dataset(30, 1).unwrap(), d);
        assert_ne!(toy_dataset(30, 2).unwrap(), d);
    }

    #[test]
    fn epoch_orders_are_permutations() {
        let a = epoch_order(50, 3, 0);
        let mut s = a.clone();
        s.sort_unstable();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(50, 3, 0));
        assert_ne!(a, epoch_order(50, 3, 1));
    }

    #[test]
    fn batches_cover_the_order() {
        let d = toy_dataset(10, 0).unwrap();
        let order = epoch_order(10, 0, 0);
        let bs = d.batches(&order, 4).unwrap();
        assert_eq!(bs.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(bs[0].labels[1], d.labels[order[1]]);
        assert_eq!(bs[2].inputs.sample(0).unwrap(), d.inputs.sample(order[8]).unwrap());
    }

    #[test]
    fn normalization_uses_training_constants() {
        let (mut tr, mut te) = toy_splits(12, 6, 4).unwrap();
        let norm = normalize_splits(&mut tr, &mut [&mut te]).unwrap();
        let mean = mixture_integral(&tr.inputs).iter().sum::<f64>() / 12.0;
        assert!((mean - 1.0).abs() < 1e-9);
        assert!(norm.weight_scale > 0.0);
    }

    #[test]
    fn rejects_bad_labels() {
        let d = toy_dataset(3, 0).unwrap();
        assert!(Dataset::new(d.inputs.clone(), vec![0, 1, 3], 3).is_err());
        assert!(Dataset::new(d.inputs, vec![0, 1], 3).is_err());
    }
}
