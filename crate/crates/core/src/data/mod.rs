//! Datasets, synthetic generators, domain shifts, splitting and batching,
//! plus the IDX and checkpoint file formats.

pub mod checkpoint;
pub mod export;
pub mod idx;
mod shift;
mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::objectives::OneHotLabels;
use crate::tensor::Tensor;

pub use shift::{apply_shift, ShiftKind, ShiftSpec};
pub use synth::{gen_glyph_digits, gen_two_moons, GLYPH_FONT};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DomainTag {
    Source,
    Target,
}

/// Stacked samples (leading axis is the sample index) with optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub inputs: Tensor<f32>,
    pub labels: Option<OneHotLabels>,
    pub domain: DomainTag,
    /// Human-readable description of the generator chain and seeds.
    pub provenance: String,
}

impl DomainDataset {
    pub fn new(inputs: Tensor<f32>, labels: Option<OneHotLabels>, domain: DomainTag, provenance: String) -> Result<Self> {
        if inputs.dims().len() < 2 {
            return Err(Error::contract(format!("dataset inputs must be batch×…, got {}", inputs.shape())));
        }
        if let Some(l) = &labels {
            if l.len() != inputs.dims()[0] {
                return Err(Error::contract(format!(
                    "{} labels for {} samples",
                    l.len(),
                    inputs.dims()[0]
                )));
            }
        }
        inputs.check_finite("dataset")?;
        Ok(DomainDataset {
            inputs,
            labels,
            domain,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.dims()[1..]
    }

    pub fn is_image(&self) -> bool {
        self.sample_shape().len() == 3
    }

    pub fn labels(&self) -> Result<&OneHotLabels> {
        self.labels
            .as_ref()
            .ok_or_else(|| Error::contract(format!("dataset '{}' has no labels", self.provenance)))
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Ok(DomainDataset {
            inputs: self.inputs.select_rows(indices)?,
            labels: self.labels.as_ref().map(|l| l.select(indices)),
            domain: self.domain,
            provenance: self.provenance.clone(),
        })
    }

    /// Drops the labels, as seen by the learner for a target domain.
    pub fn unlabeled(&self) -> Self {
        DomainDataset {
            labels: None,
            ..self.clone()
        }
    }

    pub fn with_domain(mut self, domain: DomainTag) -> Self {
        self.domain = domain;
        self
    }

    /// Repeats a single-channel image set across three channels.
    pub fn to_rgb(&self) -> Result<Self> {
        let &[n, h, w, 1] = self.inputs.dims() else {
            return Err(Error::contract(format!("to_rgb needs a grayscale image set, got {}", self.inputs.shape())));
        };
        let data = self.inputs.data().iter().flat_map(|&v| [v, v, v]).collect();
        Ok(DomainDataset {
            inputs: Tensor::new(vec![n, h, w, 3], data)?,
            labels: self.labels.clone(),
            domain: self.domain,
            provenance: format!("{} | rgb", self.provenance),
        })
    }
}

/// Stratified partition of sample indices into train / validation / test.
///
/// Each class is divided separately by largest remainder, so every split's
/// per-class count is within one sample of its exact share.
pub fn split_indices(labels: &OneHotLabels, fractions: (f64, f64, f64), seed: u64) -> Result<[Vec<usize>; 3]> {
    let f = [fractions.0, fractions.1, fractions.2];
    if f.iter().any(|&x| !(x > 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!(
            "split fractions {f:?} must be positive and sum to 1"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: [Vec<usize>; 3] = Default::default();
    for class in 0..labels.num_classes() {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels.classes()[i] == class).collect();
        members.shuffle(&mut rng);
        let n = members.len();
        let exact: Vec<f64> = f.iter().map(|x| x * n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - counts[a] as f64;
            let rb = exact[b] - counts[b] as f64;
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        let short = n - counts.iter().sum::<usize>();
        for &k in order.iter().take(short) {
            counts[k] += 1;
        }
        let mut rest = members.as_slice();
        for (k, &c) in counts.iter().enumerate() {
            out[k].extend_from_slice(&rest[..c]);
            rest = &rest[c..];
        }
    }
    for part in &mut out {
        part.sort_unstable();
    }
    Ok(out)
}

/// Stratified train / validation / test split of a labeled dataset.
pub fn split(ds: &DomainDataset, fractions: (f64, f64, f64), seed: u64) -> Result<[DomainDataset; 3]> {
    let [a, b, c] = split_indices(ds.labels()?, fractions, seed)?;
    for (name, part) in [("train", &a), ("validation", &b), ("test", &c)] {
        if part.is_empty() {
            return Err(Error::contract(format!("{name} split of {} samples is empty", ds.len())));
        }
    }
    Ok([ds.select(&a)?, ds.select(&b)?, ds.select(&c)?])
}

/// One minibatch, with the dataset rows it was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub inputs: Tensor<f32>,
    pub labels: Option<OneHotLabels>,
}

/// Sample order for one epoch, a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_add(1).wrapping_mul(0xa076_1d64_78bd_642f));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Shuffled minibatches for one epoch; the final short batch is kept.
pub fn batches(ds: &DomainDataset, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::contract("batch_size must be ≥ 1"));
    }
    epoch_order(ds.len(), seed, epoch)
        .chunks(batch_size)
        .map(|idx| {
            Ok(Batch {
                indices: idx.to_vec(),
                inputs: ds.inputs.select_rows(idx)?,
                labels: ds.labels.as_ref().map(|l| l.select(idx)),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labeled(classes: Vec<usize>, n_classes: usize) -> DomainDataset {
        let n = classes.len();
        let inputs = Tensor::from_fn(vec![n, 1], |i| i as f32).unwrap();
        let labels = OneHotLabels::from_indices(classes, n_classes).unwrap();
        DomainDataset::new(inputs, Some(labels), DomainTag::Source, "test".into()).unwrap()
    }

    #[test]
    fn sixty_twenty_twenty() {
        let ds = labeled((0..100).map(|i| i % 2).collect(), 2);
        let [a, b, c] = split(&ds, (0.6, 0.2, 0.2), 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (60, 20, 20));
    }

    #[test]
    fn split_is_a_stratified_partition() {
        let classes: Vec<usize> = (0..97).map(|i| (i * 7) % 3).collect();
        let labels = OneHotLabels::from_indices(classes.clone(), 3).unwrap();
        let parts = split_indices(&labels, (0.5, 0.3, 0.2), 9).unwrap();
        let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..97).collect::<Vec<_>>());
        for (k, frac) in [0.5, 0.3, 0.2].into_iter().enumerate() {
            for c in 0..3 {
                let total = classes.iter().filter(|&&x| x == c).count() as f64;
                let got = parts[k].iter().filter(|&&i| classes[i] == c).count() as f64;
                assert!((got - frac * total).abs() <= 1.0, "split {k} class {c}");
            }
        }
    }

    #[test]
    fn split_fractions_must_sum_to_one() {
        let ds = labeled(vec![0, 1, 0, 1], 2);
        let err = split(&ds, (0.6, 0.2, 0.3), 0).unwrap_err();
        assert!(err.to_string().contains("sum to 1"));
    }

    #[test]
    fn batches_cover_the_dataset_once() {
        let ds = labeled((0..23).map(|i| i % 2).collect(), 2);
        let b1 = batches(&ds, 5, 3, 1).unwrap();
        let b2 = batches(&ds, 5, 3, 2).unwrap();
        assert_eq!(b1.iter().map(|b| b.indices.len()).sum::<usize>(), 23);
        assert_eq!(b1.last().unwrap().indices.len(), 3);
        let flat = |bs: &[Batch]| bs.iter().flat_map(|b| b.indices.clone()).collect::<Vec<_>>();
        let (o1, o2) = (flat(&b1), flat(&b2));
        assert_ne!(o1, o2);
        let (mut s1, mut s2) = (o1.clone(), o2);
        s1.sort_unstable();
        s2.sort_unstable();
        assert_eq!(s1, s2);
        assert_eq!(flat(&batches(&ds, 5, 3, 1).unwrap()), o1);
        assert_eq!(b1[0].inputs.data()[0], b1[0].indices[0] as f32);
    }

    #[test]
    fn label_count_must_match() {
        let inputs = Tensor::<f32>::zeros(vec![3, 2]).unwrap();
        let labels = OneHotLabels::from_indices(vec![0, 1], 2).unwrap();
        assert!(DomainDataset::new(inputs, Some(labels), DomainTag::Source, String::new()).is_err());
    }
}
