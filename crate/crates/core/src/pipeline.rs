//! Pre-training, adversarial adaptation and evaluation.

use std::path::PathBuf;

use crate::data::{epoch_order, DomainDataset};
use crate::error::{Error, Result};
use crate::networks::{
    classifier, classifier_forward, clone_params, discriminator_logits, discriminator_supervised,
    discriminator_unsupervised, encoder, encoder_forward, init_params, ArchitecturePreset, NetworkRole,
    ParameterSet,
};
use crate::objectives::{
    adam_step, cross_entropy, disc_adversarial_loss, encoder_adversarial_loss, AdamConfig, AdamState, OneHotLabels,
};
use crate::tensor::{Graph, Tensor};

/// Rows per forward pass when evaluating whole datasets.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub preset: ArchitecturePreset,
    /// Master seed; initialization and batch order derive from it.
    pub seed: u64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub adapt_max_epochs: usize,
    pub pretrain_lr: f64,
    pub adapt_lr: f64,
    /// Discriminator learning rate in the adaptation phase; `adapt_lr` if unset.
    pub adapt_disc_lr: Option<f64>,
    pub beta1: f64,
    pub disc_steps_per_encoder_step: usize,
    /// Leading adaptation epochs in which only the discriminator is updated.
    pub disc_warmup_epochs: usize,
    pub early_stop_window: usize,
    pub early_stop_rel_change: f64,
    pub failure_loss_floor: f64,
    /// Weight of the supervised discriminator loss in the discriminator step.
    pub sup_weight: f64,
    /// Weight of the source/target discriminator loss in the same step.
    pub unsup_weight: f64,
}

impl TrainConfig {
    pub fn new(preset: ArchitecturePreset) -> Self {
        TrainConfig {
            preset,
            seed: 0,
            batch_size: 32,
            pretrain_epochs: 10,
            adapt_max_epochs: 20,
            pretrain_lr: 0.001,
            adapt_lr: 0.0002,
            adapt_disc_lr: None,
            beta1: 0.5,
            disc_steps_per_encoder_step: 1,
            disc_warmup_epochs: 0,
            early_stop_window: 5,
            early_stop_rel_change: 0.01,
            failure_loss_floor: 1e-4,
            sup_weight: 1.0,
            unsup_weight: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.preset.validate()?;
        let bad = |m: String| Err(Error::contract(format!("invalid training config: {m}")));
        for (name, v) in [
            ("pretrain_lr", self.pretrain_lr),
            ("adapt_lr", self.adapt_lr),
            ("adapt_disc_lr", self.adapt_disc_lr.unwrap_or(self.adapt_lr)),
            ("early_stop_rel_change", self.early_stop_rel_change),
            ("failure_loss_floor", self.failure_loss_floor),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad(format!("beta1 = {} outside [0, 1)", self.beta1));
        }
        if self.early_stop_window < 2 {
            return bad(format!("early_stop_window = {} (need ≥ 2)", self.early_stop_window));
        }
        if self.disc_steps_per_encoder_step < 1 || self.batch_size < 1 {
            return bad("disc_steps_per_encoder_step and batch_size must be ≥ 1".into());
        }
        if !(self.sup_weight >= 0.0 && self.unsup_weight >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        Ok(())
    }

    fn stream_seed(&self, tag: u64) -> u64 {
        self.seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    MaxEpochs,
    FailureMode,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::Converged => "converged",
            StopReason::MaxEpochs => "max_epochs",
            StopReason::FailureMode => "failure_mode",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UpdateCounts {
    pub encoder: u64,
    pub classifier: u64,
    pub discriminator: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport<M> {
    pub phase: &'static str,
    pub history: Vec<M>,
    pub stop_reason: StopReason,
    pub updates: UpdateCounts,
    /// Where the trained parameters were written, filled in by the caller.
    pub checkpoints: Vec<PathBuf>,
    /// Description of the fault that ended a failed run, if any.
    pub fault: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainMetrics {
    pub epoch: usize,
    /// Mean classification loss over the epoch's batches.
    pub loss: f64,
    /// Fraction of training samples classified correctly while training.
    pub source_accuracy: f64,
}

impl RunReport<PretrainMetrics> {
    /// Drop in loss from the first to the last epoch; `None` without history.
    pub fn loss_improvement(&self) -> Option<f64> {
        Some(self.history.first()?.loss - self.history.last()?.loss)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub disc_loss: f64,
    pub adv_loss: f64,
    pub sup_disc_loss: f64,
    /// Accuracy of the supervised discriminator head on the source batches.
    pub source_accuracy: f64,
    /// Accuracy of `M_t ∘ C_s` on held-out labeled target data; reporting only.
    pub target_accuracy: Option<f64>,
}

fn argmax_rows(probs: &Tensor<f32>) -> Vec<usize> {
    let n = probs.dims()[1];
    probs
        .data()
        .chunks(n)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

fn correct(probs: &Tensor<f32>, labels: &OneHotLabels) -> usize {
    argmax_rows(probs).iter().zip(labels.classes()).filter(|(a, b)| a == b).count()
}

fn require_all_classes(ds: &DomainDataset, n: usize) -> Result<()> {
    let labels = ds.labels()?;
    if labels.num_classes() != n {
        return Err(Error::contract(format!(
            "dataset has {} classes, preset expects {n}",
            labels.num_classes()
        )));
    }
    let mut seen = vec![false; n];
    for &c in labels.classes() {
        seen[c] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::contract(format!("class {missing} has no training samples")));
    }
    Ok(())
}

fn adam(cfg: &TrainConfig, lr: f64, params: &ParameterSet<f32>) -> AdamState<f32> {
    AdamState::new(AdamConfig::new(lr, cfg.beta1), params)
}

/// Jointly trains `M_s` and `C_s` on labeled source data with cross-entropy.
pub fn pretrain(
    source: &DomainDataset,
    cfg: &TrainConfig,
) -> Result<(ParameterSet<f32>, ParameterSet<f32>, RunReport<PretrainMetrics>)> {
    cfg.validate()?;
    require_all_classes(source, cfg.preset.num_classes)?;
    let preset = &cfg.preset;
    let mut enc = init_params::<f32>(preset, NetworkRole::Encoder, cfg.seed)?;
    let mut cls = init_params::<f32>(preset, NetworkRole::Classifier, cfg.seed)?;
    let mut enc_opt = adam(cfg, cfg.pretrain_lr, &enc);
    let mut cls_opt = adam(cfg, cfg.pretrain_lr, &cls);
    let labels = source.labels()?;
    let order_seed = cfg.stream_seed(1);
    let mut history = Vec::new();
    let mut updates = UpdateCounts::default();

    for epoch in 0..cfg.pretrain_epochs {
        let (mut loss_sum, mut hits) = (0.0, 0);
        for idx in epoch_order(source.len(), order_seed, epoch as u64).chunks(cfg.batch_size) {
            let x = source.inputs.select_rows(idx)?;
            let y = labels.select(idx);
            let mut g = Graph::new();
            let pe = enc.bind(&mut g, true);
            let pc = cls.bind(&mut g, true);
            let xi = g.constant(x);
            let f = encoder(&mut g, preset, &pe, xi)?;
            let p = classifier(&mut g, preset, &pc, f)?;
            let loss = cross_entropy(&mut g, p, &y)?;
            let mut wrt = pe.nodes();
            wrt.extend(pc.nodes());
            let grads = g.backward(loss, &wrt)?;
            adam_step(&mut enc_opt, &mut enc, &pe.named(&grads)?)?;
            adam_step(&mut cls_opt, &mut cls, &pc.named(&grads)?)?;
            updates.encoder += 1;
            updates.classifier += 1;
            loss_sum += g.value(loss).item()? as f64 * idx.len() as f64;
            hits += correct(g.value(p), &y);
        }
        history.push(PretrainMetrics {
            epoch,
            loss: loss_sum / source.len() as f64,
            source_accuracy: hits as f64 / source.len() as f64,
        });
    }
    let report = RunReport {
        phase: "pretrain",
        history,
        stop_reason: StopReason::MaxEpochs,
        updates,
        checkpoints: Vec::new(),
        fault: None,
    };
    Ok((enc, cls, report))
}

/// Value-only encoder pass over a whole dataset, in chunks.
pub fn encode_dataset(preset: &ArchitecturePreset, enc: &ParameterSet<f32>, inputs: &Tensor<f32>) -> Result<Tensor<f32>> {
    let n = inputs.dims()[0];
    let mut data = Vec::new();
    let mut dims = Vec::new();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let f = encoder_forward(preset, enc, &inputs.rows(start, (start + EVAL_CHUNK).min(n))?)?;
        dims = f.dims().to_vec();
        data.extend_from_slice(f.data());
    }
    dims[0] = n;
    Tensor::new(dims, data)
}

/// Source and target minibatch indices for one epoch. The longer stream
/// is visited once; the shorter one is reshuffled and recycled.
pub fn paired_batches(n_source: usize, n_target: usize, batch: usize, seed: u64, epoch: u64) -> Vec<(Vec<usize>, Vec<usize>)> {
    let steps = n_source.max(n_target).div_ceil(batch);
    let stream = |n: usize, salt: u64| -> Vec<Vec<usize>> {
        let mut out = Vec::with_capacity(steps);
        let mut round = 0u64;
        while out.len() < steps {
            let order = epoch_order(n, seed ^ salt, epoch.wrapping_mul(1 << 20) + round);
            out.extend(order.chunks(batch).map(<[usize]>::to_vec));
            round += 1;
        }
        out.truncate(steps);
        out
    };
    stream(n_source, 0x5).into_iter().zip(stream(n_target, 0x7)).collect()
}

/// Losses and accuracy of one discriminator step.
struct DiscStep {
    unsup: f64,
    sup: f64,
    /// Target-encoder loss under the discriminator before its update.
    adv: f64,
    hits: usize,
}

fn discriminator_step(
    cfg: &TrainConfig,
    disc: &mut ParameterSet<f32>,
    opt: &mut AdamState<f32>,
    fs: Tensor<f32>,
    ys: &OneHotLabels,
    ft: Tensor<f32>,
) -> Result<DiscStep> {
    let preset = &cfg.preset;
    let mut g = Graph::new();
    let pd = disc.bind(&mut g, true);
    let fs = g.constant(fs);
    let ft = g.constant(ft);
    let ls = discriminator_logits(&mut g, preset, &pd, fs)?;
    let lt = discriminator_logits(&mut g, preset, &pd, ft)?;
    let ps = discriminator_supervised(&mut g, ls)?;
    let sup = cross_entropy(&mut g, ps, ys)?;
    let ds = discriminator_unsupervised(&mut g, ls)?;
    let dt = discriminator_unsupervised(&mut g, lt)?;
    let unsup = disc_adversarial_loss(&mut g, ds, dt)?;
    let adv = encoder_adversarial_loss(&mut g, dt)?;
    let a = g.affine(sup, cfg.sup_weight, 0.0)?;
    let b = g.affine(unsup, cfg.unsup_weight, 0.0)?;
    let total = g.add(a, b)?;
    let grads = g.backward(total, &pd.nodes())?;
    adam_step(opt, disc, &pd.named(&grads)?)?;
    Ok(DiscStep {
        unsup: g.value(unsup).item()? as f64,
        sup: g.value(sup).item()? as f64,
        adv: g.value(adv).item()? as f64,
        hits: correct(g.value(ps), ys),
    })
}

fn encoder_step(
    cfg: &TrainConfig,
    target_enc: &mut ParameterSet<f32>,
    opt: &mut AdamState<f32>,
    disc: &ParameterSet<f32>,
    xt: Tensor<f32>,
) -> Result<f64> {
    let preset = &cfg.preset;
    let mut g = Graph::new();
    let pe = target_enc.bind(&mut g, true);
    let pd = disc.bind(&mut g, false);
    let x = g.constant(xt);
    let ft = encoder(&mut g, preset, &pe, x)?;
    let lt = discriminator_logits(&mut g, preset, &pd, ft)?;
    let dt = discriminator_unsupervised(&mut g, lt)?;
    let loss = encoder_adversarial_loss(&mut g, dt)?;
    let grads = g.backward(loss, &pe.nodes())?;
    adam_step(opt, target_enc, &pe.named(&grads)?)?;
    Ok(g.value(loss).item()? as f64)
}

/// Everything `adapt` reads besides the configuration.
pub struct AdaptInputs<'a> {
    pub source_encoder: &'a ParameterSet<f32>,
    pub source_classifier: &'a ParameterSet<f32>,
    /// Labeled source data.
    pub source: &'a DomainDataset,
    /// Target inputs; labels, if present, are ignored.
    pub target: &'a DomainDataset,
    /// Optional labeled target data, used only for the reported accuracy.
    pub target_eval: Option<&'a DomainDataset>,
}

/// Adversarially trains `M_t` (initialized from `M_s`) against a fresh
/// dual-head discriminator. Returns `(M_t, D, report)`.
pub fn adapt(inputs: &AdaptInputs<'_>, cfg: &TrainConfig) -> Result<(ParameterSet<f32>, ParameterSet<f32>, RunReport<EpochMetrics>)> {
    cfg.validate()?;
    let preset = &cfg.preset;
    if inputs.target.is_empty() {
        return Err(Error::contract("target dataset is empty"));
    }
    let source_labels = inputs.source.labels()?;
    let source_features = encode_dataset(preset, inputs.source_encoder, &inputs.source.inputs)?;
    if source_features.dims()[1..] != preset.feature_shape()[..] {
        return Err(Error::contract(format!(
            "encoder features {} do not match discriminator input {:?}",
            source_features.shape(),
            preset.feature_shape()
        )));
    }

    let mut target_enc = clone_params(inputs.source_encoder);
    let mut disc = init_params::<f32>(preset, NetworkRole::Discriminator, cfg.stream_seed(2))?;
    let mut enc_opt = adam(cfg, cfg.adapt_lr, &target_enc);
    let mut disc_opt = adam(cfg, cfg.adapt_disc_lr.unwrap_or(cfg.adapt_lr), &disc);
    let pair_seed = cfg.stream_seed(3);

    let mut history = Vec::new();
    let mut updates = UpdateCounts::default();
    let mut stop = StopReason::MaxEpochs;
    let mut fault = None;

    'epochs: for epoch in 0..cfg.adapt_max_epochs {
        let pairs = paired_batches(inputs.source.len(), inputs.target.len(), cfg.batch_size, pair_seed, epoch as u64);
        let warmup = epoch < cfg.disc_warmup_epochs;
        let (mut unsup, mut sup, mut adv) = (0.0, 0.0, 0.0);
        let (mut disc_steps, mut enc_steps, mut hits, mut seen) = (0usize, 0usize, 0usize, 0usize);
        for (si, ti) in &pairs {
            let step = (|| -> Result<()> {
                let ys = source_labels.select(si);
                let xt = inputs.target.inputs.select_rows(ti)?;
                for _ in 0..cfg.disc_steps_per_encoder_step {
                    let fs = source_features.select_rows(si)?;
                    let ft = encoder_forward(preset, &target_enc, &xt)?;
                    let d = discriminator_step(cfg, &mut disc, &mut disc_opt, fs, &ys, ft)?;
                    updates.discriminator += 1;
                    disc_steps += 1;
                    unsup += d.unsup;
                    sup += d.sup;
                    hits += d.hits;
                    seen += si.len();
                    if warmup {
                        adv += d.adv;
                        enc_steps += 1;
                    }
                }
                if warmup {
                    return Ok(());
                }
                adv += encoder_step(cfg, &mut target_enc, &mut enc_opt, &disc, xt)?;
                updates.encoder += 1;
                enc_steps += 1;
                Ok(())
            })();
            match step {
                Ok(()) => {}
                Err(e @ Error::Numeric { .. }) => {
                    fault = Some(e.to_string());
                    stop = StopReason::FailureMode;
                    if enc_steps > 0 {
                        history.push(epoch_metrics(epoch, unsup, sup, adv, disc_steps, enc_steps, hits, seen, None));
                    }
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let target_accuracy = match inputs.target_eval {
            Some(ds) => Some(compose_and_evaluate(preset, &target_enc, inputs.source_classifier, ds)?),
            None => None,
        };
        history.push(epoch_metrics(epoch, unsup, sup, adv, disc_steps, enc_steps, hits, seen, target_accuracy));
        if detect_failure(&history, cfg) {
            stop = StopReason::FailureMode;
            break;
        }
        if detect_convergence(&history, cfg) {
            stop = StopReason::Converged;
            break;
        }
    }
    let report = RunReport {
        phase: "adapt",
        history,
        stop_reason: stop,
        updates,
        checkpoints: Vec::new(),
        fault,
    };
    Ok((target_enc, disc, report))
}

#[allow(clippy::too_many_arguments)]
fn epoch_metrics(
    epoch: usize,
    unsup: f64,
    sup: f64,
    adv: f64,
    disc_steps: usize,
    enc_steps: usize,
    hits: usize,
    seen: usize,
    target_accuracy: Option<f64>,
) -> EpochMetrics {
    EpochMetrics {
        epoch,
        disc_loss: unsup / disc_steps as f64,
        adv_loss: adv / enc_steps as f64,
        sup_disc_loss: sup / disc_steps as f64,
        source_accuracy: hits as f64 / seen as f64,
        target_accuracy,
    }
}

fn count_correct(
    preset: &ArchitecturePreset,
    enc: &ParameterSet<f32>,
    cls: &ParameterSet<f32>,
    ds: &DomainDataset,
    rows: std::ops::Range<usize>,
) -> Result<usize> {
    let labels = ds.labels()?;
    let mut hits = 0;
    for start in rows.clone().step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(rows.end);
        let f = encoder_forward(preset, enc, &ds.inputs.rows(start, end)?)?;
        let p = classifier_forward(preset, cls, &f)?;
        let idx: Vec<usize> = (start..end).collect();
        hits += correct(&p, &labels.select(&idx));
    }
    Ok(hits)
}

/// Accuracy of `cls ∘ enc` on a labeled dataset.
pub fn compose_and_evaluate(
    preset: &ArchitecturePreset,
    enc: &ParameterSet<f32>,
    cls: &ParameterSet<f32>,
    ds: &DomainDataset,
) -> Result<f64> {
    compose_and_evaluate_par(preset, enc, cls, ds, 1)
}

/// As [`compose_and_evaluate`], sharding rows over up to `threads` threads.
/// Integer hit counts are summed, so the result does not depend on the
/// thread count.
pub fn compose_and_evaluate_par(
    preset: &ArchitecturePreset,
    enc: &ParameterSet<f32>,
    cls: &ParameterSet<f32>,
    ds: &DomainDataset,
    threads: usize,
) -> Result<f64> {
    let n = ds.len();
    let shards = threads.clamp(1, n.div_ceil(EVAL_CHUNK).max(1));
    let per = n.div_ceil(shards);
    let hits: usize = if shards == 1 {
        count_correct(preset, enc, cls, ds, 0..n)?
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..shards)
                .map(|k| {
                    let rows = k * per..((k + 1) * per).min(n);
                    s.spawn(move || count_correct(preset, enc, cls, ds, rows))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation thread panicked"))
                .sum::<Result<usize>>()
        })?
    };
    Ok(hits as f64 / n as f64)
}

fn flat(values: impl Iterator<Item = f64>, rel: f64) -> bool {
    let v: Vec<f64> = values.collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (max - min) / mean.max(1e-8) < rel
}

/// Both adversarial losses have stopped moving over the last window.
pub fn detect_convergence(history: &[EpochMetrics], cfg: &TrainConfig) -> bool {
    let w = cfg.early_stop_window;
    if history.len() < w {
        return false;
    }
    let tail = &history[history.len() - w..];
    flat(tail.iter().map(|m| m.disc_loss), cfg.early_stop_rel_change)
        && flat(tail.iter().map(|m| m.adv_loss), cfg.early_stop_rel_change)
}

/// One side has overpowered the other: a loss collapsed below the floor.
pub fn detect_failure(history: &[EpochMetrics], cfg: &TrainConfig) -> bool {
    history
        .last()
        .is_some_and(|m| m.disc_loss < cfg.failure_loss_floor || m.adv_loss < cfg.failure_loss_floor)
}

/// Source-only, adapted and target-trained accuracies on one test set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Comparison {
    pub source_only: f64,
    pub sadda: f64,
    pub train_on_target: f64,
}
