//! Reverse-mode gradients against central finite differences, shared by the
//! gradient-check and acceptance targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rectdiff::denoiser::OffsetVars;
use rectdiff::probe::{self, AttributeDirection};
use rectdiff::rectifier::{RectifiedModel, RectifierConfig};
use rectdiff::train::edit_loss;
use rectdiff::{
    DenoiserConfig, DenoiserParams, NoiseSchedule, RectifierParams, Result, Tape, Tensor, Var,
};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
/// Gradients whose norm is below this are compared absolutely.
const FLOOR: f64 = 1e-7;
pub const SEEDS: u64 = 20;
const COORDS_PER_INPUT: usize = 6;

type Loss<'t> = (Var<'t>, Vec<Var<'t>>);

/// Worst normwise relative error over all inputs. `f` builds a scalar loss
/// from the inputs and returns the vars whose gradients correspond to them.
fn gradcheck<F>(inputs: &[Tensor], rng: &mut ChaCha8Rng, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Tensor]) -> Result<Loss<'t>>,
{
    let tape = Tape::new();
    let (loss, vars) = f(&tape, inputs).unwrap();
    assert_eq!(vars.len(), inputs.len());
    tape.backward(loss).unwrap();
    let value = |ts: &[Tensor]| {
        let tape = Tape::new();
        f(&tape, ts).unwrap().0.item()
    };
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let g = tape
            .grad(*v)
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let n = inputs[k].numel();
        let coords: Vec<usize> = if n <= COORDS_PER_INPUT {
            (0..n).collect()
        } else {
            (0..COORDS_PER_INPUT).map(|_| rng.gen_range(0..n)).collect()
        };
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for i in coords {
            let mut ts = inputs.to_vec();
            ts[k].data_mut()[i] += H;
            let up = value(&ts);
            ts[k].data_mut()[i] -= 2.0 * H;
            let down = value(&ts);
            let num = (up - down) / (2.0 * H);
            let ana = g.data()[i];
            diff += (ana - num).powi(2);
            na += ana * ana;
            nn += num * num;
        }
        let rel = diff.sqrt() / na.sqrt().max(nn.sqrt()).max(FLOOR);
        worst = worst.max(rel);
    }
    worst
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, rng)
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    randn(shape, rng).map(|v| v.abs() + 0.5)
}

/// Weighted sum so every output element gets a distinct cotangent.
fn project<'t>(tape: &'t Tape, out: Var<'t>, rng_seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = Tensor::randn(&out.shape(), &mut rng);
    Ok(out.mul(tape.constant(w))?.sum())
}

pub type Case = (&'static str, fn(&mut ChaCha8Rng, u64) -> f64);

/// Worst relative error of `case` over all seeds.
pub fn over_seeds(case: fn(&mut ChaCha8Rng, u64) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + 13);
        worst = worst.max(case(&mut rng, seed));
    }
    worst
}

macro_rules! unary {
    ($name:ident, $shape:expr, $gen:ident, |$x:ident| $body:expr) => {
        (stringify!($name), |rng: &mut ChaCha8Rng, seed: u64| {
            let inputs = vec![$gen(&$shape, rng)];
            gradcheck(&inputs, rng, |tape, ts| {
                let $x = tape.param(ts[0].clone());
                let out: Var = $body;
                Ok((project(tape, out, seed)?, vec![$x]))
            })
        })
    };
}

macro_rules! binary {
    ($name:ident, $sa:expr, $sb:expr, $gb:ident, |$a:ident, $b:ident| $body:expr) => {
        (stringify!($name), |rng: &mut ChaCha8Rng, seed: u64| {
            let inputs = vec![randn(&$sa, rng), $gb(&$sb, rng)];
            gradcheck(&inputs, rng, |tape, ts| {
                let $a = tape.param(ts[0].clone());
                let $b = tape.param(ts[1].clone());
                let out: Var = $body;
                Ok((project(tape, out, seed)?, vec![$a, $b]))
            })
        })
    };
}

pub fn op_cases() -> Vec<Case> {
    vec![
        binary!(op_add, [2, 3], [2, 3], randn, |a, b| a.add(b)?),
        binary!(op_sub, [2, 3], [2, 3], randn, |a, b| a.sub(b)?),
        binary!(op_mul, [2, 3], [2, 3], randn, |a, b| a.mul(b)?),
        binary!(op_div, [2, 3], [2, 3], positive, |a, b| a.div(b)?),
        binary!(op_matmul, [3, 4], [4, 2], randn, |a, b| a.matmul(b)?),
        binary!(op_conv2d_same, [2, 2, 5, 5], [3, 2, 3, 3], randn, |a, b| a
            .conv2d(b, 1, 1)?),
        binary!(
            op_conv2d_stride2,
            [1, 2, 6, 6],
            [2, 2, 3, 3],
            randn,
            |a, b| a.conv2d(b, 2, 1)?
        ),
        binary!(op_add_channel, [2, 3, 2, 2], [3], randn, |a, b| a
            .add_channel(b)?),
        binary!(op_mul_channel, [2, 3, 2, 2], [3], randn, |a, b| a
            .mul_channel(b)?),
        binary!(
            op_concat_channels,
            [1, 2, 3, 3],
            [1, 1, 3, 3],
            randn,
            |a, b| a.concat_channels(b)?
        ),
        binary!(
            op_separable_product,
            [3, 3, 2, 1],
            [3, 3, 1, 4],
            randn,
            |a, b| a.separable_product(b)?
        ),
        binary!(
            op_concat_batch,
            [1, 2, 2, 2],
            [2, 2, 2, 2],
            randn,
            |a, b| a.tape().concat_batch(&[a, b])?
        ),
        unary!(op_scale, [4], randn, |x| x.scale(-1.7)),
        unary!(op_add_scalar, [4], randn, |x| x.add_scalar(0.3)),
        unary!(op_div_scalar, [4], randn, |x| x.div_scalar(2.5)),
        unary!(op_neg, [4], randn, |x| x.neg()),
        unary!(op_square, [4], randn, |x| x.square()),
        unary!(op_abs, [5], positive, |x| x.neg().abs()),
        unary!(op_sqrt, [5], positive, |x| x.sqrt()),
        unary!(op_silu, [2, 5], randn, |x| x.silu()),
        unary!(op_sum, [3, 2], randn, |x| x.sum().square()),
        unary!(op_mean, [3, 2], randn, |x| x.mean().square()),
        unary!(op_group_norm, [2, 4, 3, 3], randn, |x| x
            .group_norm(2, 1e-5)?),
        unary!(op_upsample, [1, 2, 2, 3], randn, |x| x
            .upsample_nearest2x()?),
        unary!(op_downsample, [1, 2, 4, 4], randn, |x| x
            .downsample_avg2x()?),
        unary!(op_global_avg_pool, [2, 3, 4, 4], randn, |x| x
            .global_avg_pool()?),
        unary!(op_select, [3, 2, 2], randn, |x| x.select(1)?),
        unary!(op_reshape, [2, 6], randn, |x| x.reshape(&[3, 4])?),
        unary!(op_stack, [3], randn, |x| x
            .tape()
            .stack(&[x.select(2)?, x.select(0)?.square()])?),
    ]
}

fn tiny_models(seed: u64) -> (DenoiserParams, RectifierParams, NoiseSchedule) {
    let den = DenoiserParams::build(&DenoiserConfig {
        seed,
        ..DenoiserConfig::tiny()
    })
    .unwrap();
    let mut rect = RectifierParams::build(
        &den,
        &RectifierConfig {
            seed: seed + 1,
            ..RectifierConfig::tiny()
        },
    )
    .unwrap();
    // Move away from the zero-offset initialisation so every path carries
    // gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    for t in rect.params.tensors_mut() {
        *t = t
            .zip_map(&Tensor::randn(t.shape(), &mut rng), |a, b| a + 0.1 * b)
            .unwrap();
    }
    (den, rect, NoiseSchedule::scaled_linear_default(50).unwrap())
}

fn with_tensors(base: &rectdiff::nn::ParamSet, ts: &[Tensor]) -> rectdiff::nn::ParamSet {
    let mut p = base.clone();
    p.tensors_mut().clone_from_slice(ts);
    p
}

fn denoiser_full_with_offsets(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let (den, rect, _) = tiny_models(seed);
    let n = den.params.len();
    let mut inputs = den.params.tensors().to_vec();
    inputs.push(randn(&[1, 1, 8, 8], rng));
    let layers = rect.targets.clone();
    for l in &layers {
        inputs.push(randn(&l.weight_shape(), rng).map(|v| 0.2 * v));
    }
    let t = rng.gen_range(1..=50);
    gradcheck(&inputs, rng, |tape, ts| {
        let p = with_tensors(&den.params, &ts[..n]);
        let b = p.bind(tape, true);
        let x = tape.param(ts[n].clone());
        let mut offsets = OffsetVars::new();
        let mut vars: Vec<Var> = b.vars().to_vec();
        vars.push(x);
        for (l, d) in layers.iter().zip(&ts[n + 1..]) {
            let v = tape.param(d.clone());
            offsets.insert(l.id.clone(), v);
            vars.push(v);
        }
        let out = den.forward_sample(&b, x, t, Some(&offsets))?;
        Ok((project(tape, out, seed)?, vars))
    })
}

fn rectified_noise_fitting_loss(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let (den, rect, s) = tiny_models(seed);
    let model = RectifiedModel {
        denoiser: &den,
        rectifier: &rect,
        schedule: &s,
    };
    let x0 = randn(&[1, 1, 8, 8], rng).map(|v| v.tanh());
    let eps = randn(&[1, 1, 8, 8], rng);
    let t = rng.gen_range(1..=50);
    let x_t = rectdiff::diffusion::forward_noise(&x0, t, &eps, &s).unwrap();
    let inputs = rect.params.tensors().to_vec();
    gradcheck(&inputs, rng, |tape, ts| {
        let p = with_tensors(&rect.params, ts);
        let rb = p.bind(tape, true);
        let db = den.params.bind(tape, false);
        let (pred, _) = model.predict_sample_var(&db, &rb, &x0, tape.constant(x_t.clone()), t)?;
        let loss = pred.sub(tape.constant(eps.clone()))?.square().mean();
        Ok((loss, rb.vars().to_vec()))
    })
}

fn probe_embedding(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let inputs = vec![randn(&[1, 1, 8, 8], rng).map(|v| v.tanh())];
    gradcheck(&inputs, rng, |tape, ts| {
        let x = tape.param(ts[0].clone());
        Ok((project(tape, probe::embed_var(x)?, seed)?, vec![x]))
    })
}

fn edit_loss_both_terms(rng: &mut ChaCha8Rng, _: u64) -> f64 {
    let x0 = randn(&[1, 1, 8, 8], rng).map(|v| v.tanh());
    let edit = x0
        .zip_map(&randn(&[1, 1, 8, 8], rng), |a, b| a + 0.3 * b)
        .unwrap();
    let dir = if rng.gen_bool(0.5) {
        AttributeDirection::brighter()
    } else {
        AttributeDirection::larger()
    };
    let (lc, lr) = (rng.gen_range(0.25..4.0), rng.gen_range(0.25..4.0));
    gradcheck(&[x0, edit], rng, |tape, ts| {
        let a = tape.param(ts[0].clone());
        let b = tape.param(ts[1].clone());
        let (total, _, _) = edit_loss(a, b, &dir, lc, lr)?;
        Ok((total, vec![a, b]))
    })
}

fn rectified_edit_loss_through_model(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let (den, rect, s) = tiny_models(seed);
    let model = RectifiedModel {
        denoiser: &den,
        rectifier: &rect,
        schedule: &s,
    };
    let x0 = randn(&[1, 1, 8, 8], rng).map(|v| v.tanh());
    let eps = randn(&[1, 1, 8, 8], rng);
    let t = rng.gen_range(1..=50);
    let x_t = rectdiff::diffusion::forward_noise(&x0, t, &eps, &s).unwrap();
    let dir = AttributeDirection::brighter();
    let inputs = rect.params.tensors().to_vec();
    gradcheck(&inputs, rng, |tape, ts| {
        let p = with_tensors(&rect.params, ts);
        let rb = p.bind(tape, true);
        let db = den.params.bind(tape, false);
        let xt = tape.constant(x_t.clone());
        let (pred, _) = model.predict_sample_var(&db, &rb, &x0, xt, t)?;
        let est = rectdiff::diffusion::estimate_x0_var(xt, pred, t, &s)?;
        let (total, _, _) = edit_loss(tape.constant(x0.clone()), est, &dir, 1.0, 1.0)?;
        Ok((total, rb.vars().to_vec()))
    })
}

pub fn model_cases() -> Vec<Case> {
    vec![
        ("denoiser_full_with_offsets", denoiser_full_with_offsets),
        ("rectified_noise_fitting_loss", rectified_noise_fitting_loss),
        ("probe_embedding", probe_embedding),
        ("edit_loss_both_terms", edit_loss_both_terms),
        (
            "rectified_edit_loss_through_model",
            rectified_edit_loss_through_model,
        ),
    ]
}
