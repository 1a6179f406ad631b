use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rectdiff::diffusion::{ddim_invert, estimate_x0_var, forward_noise, uniform_steps};
use rectdiff::probe::{self, AttributeDirection};
use rectdiff::rectifier::{RectifiedModel, RectifierConfig};
use rectdiff::train::{self, edit_loss, edit_sample, reconstruct, TrainConfig, TrainMode};
use rectdiff::{DenoiserConfig, DenoiserParams, NoiseSchedule, RectifierParams, Tape, Tensor};

fn small_denoiser() -> DenoiserParams {
    DenoiserParams::build(&DenoiserConfig {
        widths: vec![4, 8],
        time_dim: 8,
        ..DenoiserConfig::default()
    })
    .unwrap()
}

fn small_rectifier(den: &DenoiserParams) -> RectifierParams {
    RectifierParams::build(
        den,
        &RectifierConfig {
            encoder_widths: vec![4, 6],
            hidden: 6,
            time_dim: 8,
            seed: 3,
        },
    )
    .unwrap()
}

fn data(n: usize) -> Vec<Tensor> {
    rectdiff::toyset::images(&rectdiff::toyset::generate(21, n).unwrap())
}

fn quick(mode: TrainMode, steps: usize) -> TrainConfig {
    let mut c = TrainConfig::for_mode(mode);
    c.steps = steps;
    c.batch_size = 2;
    c.markov_steps = 3;
    c.markov_grad_steps = 2;
    c
}

fn schedule() -> NoiseSchedule {
    NoiseSchedule::scaled_linear_default(50).unwrap()
}

#[test]
fn trainers_never_touch_the_denoiser_and_are_deterministic() {
    let s = schedule();
    let xs = data(6);
    let (den, _) = train::pretrain_denoiser(
        &quick(TrainMode::Pretrain, 3),
        &DenoiserConfig {
            widths: vec![4, 8],
            time_dim: 8,
            ..DenoiserConfig::default()
        },
        &xs,
        &s,
    )
    .unwrap();
    let (again, _) =
        train::pretrain_denoiser(&quick(TrainMode::Pretrain, 3), &den.config, &xs, &s).unwrap();
    assert!(den.params.bits_eq(&again.params));

    let before = den.params.checksum();
    let init = small_rectifier(&den);
    for mode in [
        TrainMode::Recon,
        TrainMode::ReconL1,
        TrainMode::ReconL1Dw,
        TrainMode::EditSm,
        TrainMode::EditMarkov,
    ] {
        let cfg = quick(mode, 2);
        let (a, log_a) = train::train_rectifier(&cfg, &den, &init, &xs, &s).unwrap();
        let (b, log_b) = train::train_rectifier(&cfg, &den, &init, &xs, &s).unwrap();
        assert_eq!(
            den.params.checksum(),
            before,
            "{mode:?} changed the denoiser"
        );
        assert!(a.params.bits_eq(&b.params), "{mode:?} not reproducible");
        assert!(!a.params.bits_eq(&init.params), "{mode:?} did not update");
        let strip = |csv: String| -> Vec<String> {
            csv.lines()
                .map(|l| l.rsplit_once(',').unwrap().0.to_string())
                .collect()
        };
        assert_eq!(strip(log_a.to_csv()), strip(log_b.to_csv()));
    }
}

#[test]
fn fresh_rectifier_loss_equals_frozen_loss() {
    let den = small_denoiser();
    let rect = small_rectifier(&den);
    let s = schedule();
    let model = RectifiedModel {
        denoiser: &den,
        rectifier: &rect,
        schedule: &s,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (i, x0) in data(4).iter().enumerate() {
        let t = 1 + 12 * i;
        let eps = Tensor::randn(x0.shape(), &mut rng);
        let x_t = forward_noise(x0, t, &eps, &s).unwrap();
        let tape = Tape::new();
        let db = den.params.bind(&tape, false);
        let rb = rect.params.bind(&tape, true);
        let xv = tape.constant(x_t.clone());
        let (pred, offsets) = model.predict_sample_var(&db, &rb, x0, xv, t).unwrap();
        let frozen = den.forward_sample(&db, xv, t, None).unwrap();
        let e = tape.constant(eps);
        let l_mod = pred.sub(e).unwrap().square().mean().item();
        let l_frozen = frozen.sub(e).unwrap().square().mean().item();
        assert_eq!(l_mod.to_bits(), l_frozen.to_bits());
        // The dw regulariser is zero at initialisation.
        assert!(offsets.values().all(|d| d.value().max_abs() == 0.0));
    }
    let cfg = quick(TrainMode::ReconL1Dw, 1);
    let (_, log) = train::train_rectifier_recon(&cfg, &den, rect.clone(), &data(4), &s).unwrap();
    assert_eq!(log.term_names, vec!["l1", "dw"]);
    assert_eq!(log.rows[0].terms[1], 0.0);
}

#[test]
fn edit_loss_is_the_weighted_sum_of_its_terms() {
    let xs = data(2);
    let (x0, x1) = (&xs[0], &xs[1]);
    let dir = AttributeDirection::larger();
    for (lc, lr) in [(1.0, 1.0), (0.25, 4.0), (0.0, 1.0), (3.0, 0.0)] {
        let tape = Tape::new();
        let (total, ld, l1) = edit_loss(
            tape.constant(x0.clone()),
            tape.constant(x1.clone()),
            &dir,
            lc,
            lr,
        )
        .unwrap();
        assert_eq!(total.item(), lc * ld.item() + lr * l1.item());
        assert_eq!(ld.item(), probe::directional_loss(x0, x1, &dir).unwrap());
        assert_eq!(l1.item(), probe::l1_reg(x1, x0).unwrap());
    }
}

#[test]
fn markov_chain_of_one_is_a_score_matching_step_on_the_inverted_latent() {
    let den = small_denoiser();
    let rect = small_rectifier(&den);
    let s = schedule();
    let x0 = data(1).remove(0);
    let mut cfg = quick(TrainMode::EditMarkov, 1);
    cfg.batch_size = 1;
    cfg.markov_steps = 1;
    cfg.markov_grad_steps = 1;
    cfg.attribute = Some("brighter".into());
    let (_, log) =
        train::train_edit_markov_baseline(&cfg, &den, &rect, std::slice::from_ref(&x0), &s)
            .unwrap();

    let steps = uniform_steps(s.steps(), 1).unwrap();
    let t = *steps.last().unwrap();
    let inv = ddim_invert(&x0, &den, &steps, &s, None).unwrap();
    let model = RectifiedModel {
        denoiser: &den,
        rectifier: &rect,
        schedule: &s,
    };
    let tape = Tape::new();
    let db = den.params.bind(&tape, false);
    let rb = rect.params.bind(&tape, true);
    let xt = tape.constant(inv.last().clone());
    let (pred, _) = model.predict_sample_var(&db, &rb, &x0, xt, t).unwrap();
    let est = estimate_x0_var(xt, pred, t, &s).unwrap();
    let (loss, _, _) = edit_loss(
        tape.constant(x0.clone()),
        est,
        &AttributeDirection::brighter(),
        1.0,
        1.0,
    )
    .unwrap();
    assert_eq!(log.rows[0].loss.to_bits(), loss.item().to_bits());
}

#[test]
fn zero_offset_editor_reproduces_reconstruction() {
    let den = small_denoiser();
    let rect = small_rectifier(&den);
    let s = schedule();
    let steps = uniform_steps(s.steps(), 10).unwrap();
    for x0 in data(3) {
        let (edited, er) = edit_sample(&den, &rect, &x0, &steps, &s).unwrap();
        let (plain, pr) = reconstruct(&den, &x0, &steps, &s).unwrap();
        assert!(edited.bits_eq(&plain));
        assert!(er.last().bits_eq(pr.last()));
    }
}

#[test]
fn edit_trainers_require_an_attribute() {
    let den = small_denoiser();
    let rect = small_rectifier(&den);
    let mut cfg = quick(TrainMode::EditSm, 1);
    cfg.attribute = Some("bluer".into());
    let err = train::train_rectifier(&cfg, &den, &rect, &data(2), &schedule()).unwrap_err();
    assert_eq!(err.category(), "config");
    cfg.attribute = None;
    assert!(train::train_rectifier(&cfg, &den, &rect, &data(2), &schedule()).is_err());
    let empty: Vec<Tensor> = vec![];
    let cfg = quick(TrainMode::Recon, 1);
    assert!(train::train_rectifier(&cfg, &den, &rect, &empty, &schedule()).is_err());
}
