//! Training loops that replay demonstrations uniformly at random.

use rand::Rng;

use crate::attention::{AttentionLosses, AttentionModel, AttentionTrainMethod};
use crate::error::{invalid, Result};
use crate::nets::Optimizer;
use crate::scene::Demonstration;
use crate::transport::{TransportModel, TransportTrainMethod};

fn draw<'a>(data: &'a [Demonstration], rng: &mut impl Rng) -> Result<&'a Demonstration> {
    if data.is_empty() {
        return Err(invalid!("cannot train on an empty dataset"));
    }
    Ok(&data[rng.random_range(0..data.len())])
}

/// Runs `steps` augmented updates, each on a uniformly drawn sample.
/// `progress` sees the optimiser's running step count and the losses.
pub fn train_attention(
    model: &mut AttentionModel,
    opt: &mut Optimizer,
    data: &[Demonstration],
    method: &AttentionTrainMethod,
    steps: u64,
    rng: &mut impl Rng,
    mut progress: impl FnMut(u64, &AttentionLosses),
) -> Result<()> {
    for _ in 0..steps {
        let sample = draw(data, rng)?;
        let losses = model.train_step(opt, sample, method, rng)?;
        progress(opt.steps(), &losses);
    }
    Ok(())
}

/// Transport counterpart of [`train_attention`].
pub fn train_transport(
    model: &mut TransportModel,
    opt: &mut Optimizer,
    data: &[Demonstration],
    method: &TransportTrainMethod,
    steps: u64,
    rng: &mut impl Rng,
    mut progress: impl FnMut(u64, f64),
) -> Result<()> {
    for _ in 0..steps {
        let sample = draw(data, rng)?;
        let loss = model.train_step(opt, sample, method, rng)?;
        progress(opt.steps(), loss);
    }
    Ok(())
}
