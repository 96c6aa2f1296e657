//! Dataset assembly for a run and the train-on-target reference model.

use crate::config::{RunConfig, Task};
use crate::data::idx::load_idx_dataset;
use crate::data::{apply_shift, gen_glyph_digits, gen_two_moons, split, DomainDataset, DomainTag};
use crate::error::{Error, Result};
use crate::pipeline::{compose_and_evaluate_par, pretrain, TrainConfig};

/// Train / validation / test partitions of both domains.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub source_train: DomainDataset,
    pub source_val: DomainDataset,
    pub source_test: DomainDataset,
    /// Labeled; the adaptation phase only ever sees `unlabeled()` copies.
    pub target_train: DomainDataset,
    pub target_test: DomainDataset,
}

fn derive(seed: u64, tag: u64) -> u64 {
    seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn synth_pair(cfg: &RunConfig) -> Result<(DomainDataset, Option<DomainDataset>)> {
    let seed = cfg.data_seed();
    let n = cfg.data.samples;
    let classes = cfg.train.preset.num_classes;
    let fresh_target = !cfg.data.same_domain;
    match &cfg.data.task {
        Task::TwoMoons { noise_sigma } => {
            if classes != 2 {
                return Err(Error::contract(format!("two_moons has 2 classes, model has {classes}")));
            }
            let source = gen_two_moons(n, *noise_sigma, derive(seed, 1))?;
            let target = fresh_target
                .then(|| gen_two_moons(n, *noise_sigma, derive(seed, 2)))
                .transpose()?;
            Ok((source, target))
        }
        Task::Glyphs { image_size, channels } => {
            let source = gen_glyph_digits(n, classes, *image_size, derive(seed, 1))?;
            let source = if *channels == 3 { source.to_rgb()? } else { source };
            let target = fresh_target
                .then(|| gen_glyph_digits(n, classes, *image_size, derive(seed, 2)))
                .transpose()?;
            Ok((source, target))
        }
        Task::Idx {
            source_images,
            source_labels,
            target_images,
            target_labels,
        } => {
            let source = load_idx_dataset(source_images, source_labels, classes)?;
            let target = fresh_target
                .then(|| load_idx_dataset(target_images, target_labels, classes))
                .transpose()?;
            Ok((source, target))
        }
    }
}

/// Builds both domains and splits them. The target is a fresh draw from the
/// source generator with the configured shifts applied in order, or the
/// source itself for the no-shift control.
pub fn build_datasets(cfg: &RunConfig) -> Result<Datasets> {
    let (source, target) = synth_pair(cfg)?;
    let fractions = cfg.data.split;
    let seed = cfg.data_seed();
    let [source_train, source_val, source_test] = split(&source, fractions, derive(seed, 3))?;

    let (target_train, target_test) = match target {
        None => (
            source_train.clone().with_domain(DomainTag::Target),
            source_test.clone().with_domain(DomainTag::Target),
        ),
        Some(mut t) => {
            for spec in cfg.shift_specs() {
                t = apply_shift(&t, &spec)?;
            }
            // grayscale targets meet an rgb model unchanged in content
            if t.is_image() && t.sample_shape()[2] == 1 && source.sample_shape()[2] == 3 {
                t = t.to_rgb()?;
            }
            let t = t.with_domain(DomainTag::Target);
            let [train, _, test] = split(&t, fractions, derive(seed, 4))?;
            (train, test)
        }
    };

    let want = &cfg.train.preset.input_shape;
    for (name, ds) in [("source", &source_train), ("target", &target_train)] {
        if ds.sample_shape() != want.as_slice() {
            return Err(Error::contract(format!(
                "{name} samples have shape {:?} but the model expects {want:?}",
                ds.sample_shape()
            )));
        }
    }
    Ok(Datasets {
        source_train,
        source_val,
        source_test,
        target_train,
        target_test,
    })
}

/// Upper-bound reference: the source pipeline trained on labeled target data.
pub fn train_on_target(data: &Datasets, cfg: &TrainConfig, threads: usize) -> Result<f64> {
    let (enc, cls, _) = pretrain(&data.target_train, cfg)?;
    compose_and_evaluate_par(&cfg.preset, &enc, &cls, &data.target_test, threads)
}
