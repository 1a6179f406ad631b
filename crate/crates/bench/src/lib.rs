//! Shared fixtures for the criterion benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rectdiff::diffusion::forward_noise;
use rectdiff::rectifier::{RectifiedModel, RectifierConfig};
use rectdiff::{DenoiserConfig, DenoiserParams, NoiseSchedule, RectifierParams, Result, Tape, Tensor};

pub struct Fixture {
    pub denoiser: DenoiserParams,
    pub rectifier: RectifierParams,
    pub schedule: NoiseSchedule,
    pub x0: Tensor,
    pub x_t: Tensor,
    pub t: usize,
}

/// Default-sized models on one 16×16 toy image, noised to the middle of a
/// 100-step schedule.
pub fn fixture() -> Fixture {
    let denoiser = DenoiserParams::build(&DenoiserConfig::default()).expect("default config");
    let rectifier =
        RectifierParams::build(&denoiser, &RectifierConfig::default()).expect("default config");
    let schedule = NoiseSchedule::scaled_linear_default(100).expect("valid schedule");
    let x0 = rectdiff::toyset::images(&rectdiff::toyset::generate(0, 1).expect("one sample"))
        .remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = 50;
    let eps = Tensor::randn(x0.shape(), &mut rng);
    let x_t = forward_noise(&x0, t, &eps, &schedule).expect("matching shapes");
    Fixture {
        denoiser,
        rectifier,
        schedule,
        x0,
        x_t,
        t,
    }
}

/// One rectifier training sample: frozen pass, offsets, modulated pass and
/// backward through the rectifier. Returns the loss.
pub fn rectified_train_step(f: &Fixture, eps: &Tensor) -> Result<f64> {
    let model = RectifiedModel {
        denoiser: &f.denoiser,
        rectifier: &f.rectifier,
        schedule: &f.schedule,
    };
    let tape = Tape::new();
    let den = f.denoiser.params.bind(&tape, false);
    let rect = f.rectifier.params.bind(&tape, true);
    let (pred, _) = model.predict_sample_var(&den, &rect, &f.x0, tape.constant(f.x_t.clone()), f.t)?;
    let loss = pred.sub(tape.constant(eps.clone()))?.square().mean();
    tape.backward(loss)?;
    Ok(loss.item())
}
