//! Gradient verification suite behind the `gradcheck` command.

use crate::error::Result;
use crate::networks::{
    discriminator_logits, discriminator_unsupervised, encoder, init_params, ArchitecturePreset, Bound,
    NetworkRole, ParameterSet,
};
use crate::objectives::disc_adversarial_loss;
use rand_chacha::ChaCha8Rng;

use crate::tensor::gradcheck::{op_checks, run_trials, uniform, GraphFn, TrialSettings};
use crate::tensor::{Graph, NodeId, OpKind, Real};

/// Worst relative error allowed for a check to pass.
pub const TOLERANCE: f64 = 1e-5;

pub const COMPOSITE_NAME: &str = "encoder_discriminator_loss";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub worst: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.worst < TOLERANCE
    }
}

/// Small conv encoder/discriminator pair used for the end-to-end check.
pub fn composite_preset() -> ArchitecturePreset {
    ArchitecturePreset::conv_image(4, 1, 3).with_encoder_widths(&[3])
}

fn param_layout(preset: &ArchitecturePreset) -> Result<Vec<(String, Vec<usize>)>> {
    let enc: ParameterSet<f64> = init_params(preset, NetworkRole::Encoder, 0)?;
    let disc: ParameterSet<f64> = init_params(preset, NetworkRole::Discriminator, 0)?;
    Ok(enc
        .iter()
        .chain(disc.iter())
        .map(|(n, t)| (n.to_string(), t.dims().to_vec()))
        .collect())
}

/// Differentiates the discriminator's adversarial loss with respect to both
/// input batches and every encoder and discriminator parameter.
pub fn composite_check(settings: &TrialSettings) -> Result<f64> {
    composite_check_with(settings, composite_preset(), 2)
}

pub fn composite_check_with(settings: &TrialSettings, preset: ArchitecturePreset, batch: usize) -> Result<f64> {
    let layout = param_layout(&preset)?;
    let mut image = vec![batch];
    image.extend_from_slice(&preset.input_shape);
    let gen = |r: &mut ChaCha8Rng| {
        let mut v = vec![uniform(r, &image, 0.0, 1.0), uniform(r, &image, 0.0, 1.0)];
        v.extend(layout.iter().map(|(_, dims)| uniform(r, dims, -1.0, 1.0)));
        v
    };
    let names = layout.iter().map(|(n, _)| n.clone()).collect();
    run_trials(settings, gen, &Composite { preset: preset.clone(), names })
}

/// Inputs: source batch, target batch, then parameters in `names` order.
struct Composite {
    preset: ArchitecturePreset,
    names: Vec<String>,
}

impl GraphFn for Composite {
    fn build<T: Real>(&self, g: &mut Graph<T>, ids: &[NodeId]) -> Result<NodeId> {
        let params = Bound::from_ids(self.names.iter().cloned().zip(ids[2..].iter().copied()));
        let fs = encoder(g, &self.preset, &params, ids[0])?;
        let ft = encoder(g, &self.preset, &params, ids[1])?;
        let ls = discriminator_logits(g, &self.preset, &params, fs)?;
        let lt = discriminator_logits(g, &self.preset, &params, ft)?;
        let ds = discriminator_unsupervised(g, ls)?;
        let dt = discriminator_unsupervised(g, lt)?;
        disc_adversarial_loss(g, ds, dt)
    }
}

/// Runs every op check and the composite check. A fault, if given, is
/// injected into the check of that op and into the composite check.
pub fn run_suite(trials: usize, seed: u64, fault: Option<OpKind>) -> Result<Vec<CheckOutcome>> {
    let base = TrialSettings {
        trials,
        seed,
        ..TrialSettings::default()
    };
    let with_fault = |on: bool| {
        let mut s = base;
        s.checker.fault = if on { fault } else { None };
        s
    };
    let mut out = Vec::new();
    for check in op_checks() {
        let s = with_fault(fault == Some(check.kind));
        out.push(CheckOutcome {
            name: check.name,
            worst: (check.run)(&s)?,
        });
    }
    out.push(CheckOutcome {
        name: COMPOSITE_NAME,
        worst: composite_check(&with_fault(true))?,
    });
    Ok(out)
}
