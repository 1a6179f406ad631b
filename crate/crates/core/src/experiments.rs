//! Metrics, experiment configuration, sweeps and the file-level pipeline
//! driven by the command-line front end.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, StudentsT};

use crate::autodiff::Tensor;
use crate::denoiser::{DenoiserConfig, DenoiserParams};
use crate::diffusion::{
    ddim_invert, ddim_sample, estimate_x0, forward_noise, posterior_gap_per_image, uniform_steps, EpsModel,
    NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::pgm;
use crate::probe::{self, AttributeDirection};
use crate::rectifier::{RectifiedModel, RectifierConfig, RectifierParams};
use crate::toyset;
use crate::train::{
    self, clamp_image, edit_sample, reconstruct, TrainConfig, TrainLog, TrainMode,
};

// ---------------------------------------------------------------- metrics

pub fn metric_l1(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(a.zip_map(b, |x, y| (x - y).abs())?.mean())
}

pub fn metric_l2(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(a.zip_map(b, |x, y| (x - y) * (x - y))?.mean())
}

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            w.push(a * b / (s * s));
        }
    }
    w
}

/// Mean SSIM over all valid 7×7 Gaussian windows, on images remapped from
/// `[-1, 1]` to `[0, 1]`, with `C1 = 0.01²` and `C2 = 0.03²`.
pub fn metric_ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let sh = a.shape();
    let n = sh.len();
    if n < 2 || sh[n - 2] < SSIM_WINDOW || sh[n - 1] < SSIM_WINDOW {
        return Err(Error::InvalidShape {
            op: "ssim",
            shape: sh.to_vec(),
            reason: format!("needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels"),
        });
    }
    let (h, w) = (sh[n - 2], sh[n - 1]);
    let planes = a.numel() / (h * w);
    let win = gaussian_window();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let map = |v: f64| (v + 1.0) / 2.0;
    let mut total = 0.0;
    let mut count = 0;
    for p in 0..planes {
        let (pa, pb) = (
            &a.data()[p * h * w..(p + 1) * h * w],
            &b.data()[p * h * w..(p + 1) * h * w],
        );
        for r in 0..=h - SSIM_WINDOW {
            for c in 0..=w - SSIM_WINDOW {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let k = (r + i) * w + c + j;
                        let g = win[i * SSIM_WINDOW + j];
                        let (x, y) = (map(pa[k]), map(pb[k]));
                        mx += g * x;
                        my += g * y;
                        xx += g * x * x;
                        yy += g * y * y;
                        xy += g * x * y;
                    }
                }
                let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

// ---------------------------------------------------------------- statistics

/// One-sided sign test: probability of at least `k` positives out of the
/// non-zero differences under a fair coin.
pub fn sign_test_greater(diffs: &[f64]) -> f64 {
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    let n = nonzero.len() as u64;
    if n == 0 {
        return 1.0;
    }
    let k = nonzero.iter().filter(|d| **d > 0.0).count() as u64;
    if k == 0 {
        return 1.0;
    }
    let b = Binomial::new(0.5, n).expect("valid binomial");
    1.0 - b.cdf(k - 1)
}

/// One-sided paired t-test of `mean(a - b) < 0`.
pub fn paired_t_test_less(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n < 2 {
        return 1.0;
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return if mean < 0.0 { 0.0 } else { 1.0 };
    }
    let t = mean / (var / n as f64).sqrt();
    StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("valid t distribution")
        .cdf(t)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

pub fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len().max(1) as f64).sqrt()
}

/// Stable per-image generator so results do not depend on evaluation order.
pub fn image_rng(seed: u64, image: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, image as u64 + 1000))
}

/// Mixes a sub-stream index into a seed (splitmix64 finaliser).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mean noise-fitting error per image over `samples` draws of `(t, ε)`.
pub fn noise_fit_per_image<M: EpsModel + ?Sized>(
    model: &M,
    images: &[Tensor],
    s: &NoiseSchedule,
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    images
        .iter()
        .enumerate()
        .map(|(i, x0)| {
            let mut rng = image_rng(seed, i);
            let mut acc = 0.0;
            for _ in 0..samples {
                let t = rng.gen_range(1..=s.steps());
                let eps = Tensor::randn(x0.shape(), &mut rng);
                let x_t = forward_noise(x0, t, &eps, s)?;
                acc += metric_l2(&model.predict_eps(&x_t, t, Some(x0))?, &eps)?;
            }
            Ok(acc / samples as f64)
        })
        .collect()
}

/// Mean pixel-L1 between `x0` and the one-shot estimate `P_t` from the
/// model's noise prediction, over `samples` random `(t, eps)` per image. This
/// is the held-out value of the l1 reconstruction objective.
pub fn x0_fit_per_image<M: EpsModel + ?Sized>(
    model: &M,
    images: &[Tensor],
    s: &NoiseSchedule,
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    images
        .iter()
        .enumerate()
        .map(|(i, x0)| {
            let mut rng = image_rng(seed, i);
            let mut acc = 0.0;
            for _ in 0..samples {
                let t = rng.gen_range(1..=s.steps());
                let eps = Tensor::randn(x0.shape(), &mut rng);
                let x_t = forward_noise(x0, t, &eps, s)?;
                let est = estimate_x0(&x_t, &model.predict_eps(&x_t, t, Some(x0))?, t, s)?;
                acc += metric_l1(&est, x0)?;
            }
            Ok(acc / samples as f64)
        })
        .collect()
}

/// Posterior-mean gap per image with per-image generators.
pub fn posterior_gap_images<M: EpsModel + ?Sized>(
    model: &M,
    images: &[Tensor],
    s: &NoiseSchedule,
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    images
        .iter()
        .enumerate()
        .map(|(i, x0)| {
            let mut rng = image_rng(seed, i);
            Ok(posterior_gap_per_image(model, std::slice::from_ref(x0), s, samples, &mut rng)?[0])
        })
        .collect()
}

// ---------------------------------------------------------------- rows & CSV

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    L1,
    L2,
    Ssim,
    PosteriorGap,
    ProbeShift,
    OffAttrDrift,
}

impl Metric {
    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::L1 => "L1",
            Metric::L2 => "L2",
            Metric::Ssim => "SSIM",
            Metric::PosteriorGap => "posterior_gap",
            Metric::ProbeShift => "probe_shift",
            Metric::OffAttrDrift => "off_attr_drift",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "L1" => Metric::L1,
            "L2" => Metric::L2,
            "SSIM" => Metric::Ssim,
            "posterior_gap" => Metric::PosteriorGap,
            "probe_shift" => Metric::ProbeShift,
            "off_attr_drift" => Metric::OffAttrDrift,
            other => return Err(Error::InvalidConfig(format!("unknown metric `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub experiment: String,
    pub image: usize,
    pub step_count: usize,
    pub metric: Metric,
    pub value: f64,
}

impl MetricRow {
    fn key(&self) -> (&str, usize, usize, &'static str) {
        (&self.experiment, self.image, self.step_count, self.metric.as_str())
    }
}

pub const CSV_NOTE: &str = "# perceptual metrics (LPIPS, identity similarity) are not computed; \
probe_shift and off_attr_drift are measured in the analytic probe space instead";

/// Sorts rows by `(experiment, image, step_count, metric)` and checks that
/// keys are unique and values finite.
pub fn sort_rows(rows: &mut [MetricRow]) -> Result<()> {
    rows.sort_by(|a, b| a.key().cmp(&b.key()));
    for w in rows.windows(2) {
        if w[0].key() == w[1].key() {
            return Err(Error::InvalidConfig(format!("duplicate metric row {:?}", w[0].key())));
        }
    }
    if let Some(r) = rows.iter().find(|r| !r.value.is_finite()) {
        return Err(Error::InvalidConfig(format!("non-finite metric {:?}", r.key())));
    }
    Ok(())
}

pub fn rows_to_csv(rows: &[MetricRow]) -> Result<String> {
    let mut rows = rows.to_vec();
    sort_rows(&mut rows)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(["experiment", "image", "step_count", "metric", "value"])
        .map_err(io)?;
    for r in &rows {
        w.write_record([
            r.experiment.clone(),
            r.image.to_string(),
            r.step_count.to_string(),
            r.metric.as_str().to_string(),
            format!("{:?}", r.value),
        ])
        .map_err(io)?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
        .expect("csv output is UTF-8");
    Ok(format!("{CSV_NOTE}\n{body}"))
}

pub fn rows_from_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let bad = |m: String| Error::Corrupt(m);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let field = |i: usize| rec.get(i).ok_or_else(|| bad("short CSV record".into()));
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad integer `{s}`")));
        out.push(MetricRow {
            experiment: field(0)?.to_string(),
            image: num(field(1)?)?,
            step_count: num(field(2)?)?,
            metric: Metric::parse(field(3)?)?,
            value: field(4)?
                .parse()
                .map_err(|_| bad(format!("bad value `{}`", &rec[4])))?,
        });
    }
    Ok(out)
}

pub fn write_rows(rows: &[MetricRow], path: &Path) -> Result<()> {
    fs::write(path, rows_to_csv(rows)?)?;
    Ok(())
}

/// Values of one `(experiment, step_count, metric)` series in image order.
pub fn series(rows: &[MetricRow], experiment: &str, step_count: usize, metric: Metric) -> Vec<f64> {
    let mut v: Vec<(usize, f64)> = rows
        .iter()
        .filter(|r| r.experiment == experiment && r.step_count == step_count && r.metric == metric)
        .map(|r| (r.image, r.value))
        .collect();
    v.sort_by_key(|p| p.0);
    v.into_iter().map(|p| p.1).collect()
}

// ---------------------------------------------------------------- experiments

/// Models taking part in a step sweep; absent rectifiers skip their rows.
pub struct SweepModels<'a> {
    pub denoiser: &'a DenoiserParams,
    pub recon: Option<&'a RectifierParams>,
    pub edit_sm: Option<&'a RectifierParams>,
    pub edit_markov: Option<&'a RectifierParams>,
}

fn dump(dir: Option<&Path>, name: &str, img: &Tensor) -> Result<()> {
    if let Some(d) = dir {
        pgm::write(img, d.join(format!("{name}.pgm")))?;
    }
    Ok(())
}

fn recon_rows(
    exp: &str,
    i: usize,
    n: usize,
    x: &Tensor,
    y: &Tensor,
    rows: &mut Vec<MetricRow>,
) -> Result<()> {
    for (metric, value) in [
        (Metric::L1, metric_l1(y, x)?),
        (Metric::L2, metric_l2(y, x)?),
        (Metric::Ssim, metric_ssim(y, x)?),
    ] {
        rows.push(MetricRow {
            experiment: exp.into(),
            image: i,
            step_count: n,
            metric,
            value,
        });
    }
    Ok(())
}

fn edit_rows(
    exp: &str,
    i: usize,
    n: usize,
    x: &Tensor,
    y: &Tensor,
    dir: &AttributeDirection,
    rows: &mut Vec<MetricRow>,
) -> Result<()> {
    for (metric, value) in [
        (Metric::L1, metric_l1(y, x)?),
        (Metric::ProbeShift, probe::probe_shift(x, y, dir)?),
        (Metric::OffAttrDrift, probe::off_attribute_drift(x, y, dir)?),
    ] {
        rows.push(MetricRow {
            experiment: exp.into(),
            image: i,
            step_count: n,
            metric,
            value,
        });
    }
    Ok(())
}

/// Reconstruction (frozen and rectified) and editing (score-matching and
/// Markov-trained) per held-out image, at each step count. The first
/// `dump_count` images are written as PGM when `dump_dir` is set.
#[allow(clippy::too_many_arguments)]
pub fn run_step_sweep(
    models: &SweepModels<'_>,
    images: &[Tensor],
    s: &NoiseSchedule,
    step_counts: &[usize],
    dir: &AttributeDirection,
    dump_dir: Option<&Path>,
    dump_count: usize,
) -> Result<Vec<MetricRow>> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let den = models.denoiser;
    let mut rows = Vec::new();
    for &n in step_counts {
        let steps = uniform_steps(s.steps(), n)?;
        for (i, x) in images.iter().enumerate() {
            let d = if i < dump_count { dump_dir } else { None };
            // One inversion serves every sampler.
            let inv = ddim_invert(x, den, &steps, s, None)?;
            let x_t = inv.last();
            let frozen = clamp_image(ddim_sample(x_t, den, &steps, s, None)?.last());
            recon_rows("recon_frozen", i, n, x, &frozen, &mut rows)?;
            dump(d, &format!("recon_frozen_n{n}_img{i:03}"), &frozen)?;
            let rectified = |r: &RectifierParams| -> Result<Tensor> {
                let m = RectifiedModel {
                    denoiser: den,
                    rectifier: r,
                    schedule: s,
                };
                Ok(clamp_image(ddim_sample(x_t, &m, &steps, s, Some(x))?.last()))
            };
            if let Some(r) = models.recon {
                let y = rectified(r)?;
                recon_rows("recon_rectified", i, n, x, &y, &mut rows)?;
                dump(d, &format!("recon_rectified_n{n}_img{i:03}"), &y)?;
            }
            for (exp, r) in [("edit_sm", models.edit_sm), ("edit_markov", models.edit_markov)] {
                if let Some(r) = r {
                    let y = rectified(r)?;
                    edit_rows(exp, i, n, x, &y, dir, &mut rows)?;
                    dump(d, &format!("{exp}_n{n}_img{i:03}"), &y)?;
                }
            }
        }
    }
    sort_rows(&mut rows)?;
    Ok(rows)
}

pub fn lambda_experiment_id(lambda_clip: f64, lambda_recon: f64) -> String {
    format!("lambda_clip={lambda_clip}_recon={lambda_recon}")
}

/// Trains one score-matching editor per `(λ_CLIP, λ_recon)` cell of
/// `grid × grid` (plus a `λ_CLIP = 0, λ_recon = 1` control cell when
/// `control` is set) and reports probe shift and L1 drift per image.
#[allow(clippy::too_many_arguments)]
pub fn run_lambda_sweep(
    den: &DenoiserParams,
    rect_init: &RectifierParams,
    edit_data: &[Tensor],
    images: &[Tensor],
    s: &NoiseSchedule,
    base: &TrainConfig,
    grid: &[f64],
    control: bool,
    eval_steps: usize,
) -> Result<Vec<MetricRow>> {
    if base.mode != TrainMode::EditSm {
        return Err(Error::InvalidConfig("lambda sweep trains edit_sm".into()));
    }
    let dir = AttributeDirection::by_name(base.attribute.as_deref().unwrap_or(""))?;
    let steps = uniform_steps(s.steps(), eval_steps)?;
    let mut cells: Vec<(f64, f64)> = grid
        .iter()
        .flat_map(|&c| grid.iter().map(move |&r| (c, r)))
        .collect();
    if control {
        cells.push((0.0, 1.0));
    }
    let mut rows = Vec::new();
    for (lc, lr) in cells {
        let cfg = TrainConfig {
            lambda_clip: lc,
            lambda_recon: lr,
            ..base.clone()
        };
        let (r, _) = train::train_edit_score_matching(&cfg, den, rect_init, edit_data, s)?;
        let exp = lambda_experiment_id(lc, lr);
        for (i, x) in images.iter().enumerate() {
            let (y, _) = edit_sample(den, &r, x, &steps, s)?;
            for (metric, value) in [
                (Metric::ProbeShift, probe::probe_shift(x, &y, &dir)?),
                (Metric::L1, metric_l1(&y, x)?),
            ] {
                rows.push(MetricRow {
                    experiment: exp.clone(),
                    image: i,
                    step_count: eval_steps,
                    metric,
                    value,
                });
            }
        }
    }
    sort_rows(&mut rows)?;
    Ok(rows)
}

pub const LOSS_VARIANTS: [(&str, TrainMode); 3] = [
    ("loss_e", TrainMode::Recon),
    ("loss_l1", TrainMode::ReconL1),
    ("loss_l1_dw", TrainMode::ReconL1Dw),
];

pub struct AblationOutcome {
    pub rows: Vec<MetricRow>,
    pub final_losses: Vec<(String, f64)>,
    pub rectifiers: Vec<(String, RectifierParams)>,
    /// Soft-check messages; never fatal.
    pub warnings: Vec<String>,
}

/// Trains the three reconstruction losses from the same fresh rectifier and
/// evaluates each on the held-out images.
#[allow(clippy::too_many_arguments)]
pub fn run_loss_ablation(
    den: &DenoiserParams,
    rect_config: &RectifierConfig,
    train_data: &[Tensor],
    images: &[Tensor],
    s: &NoiseSchedule,
    base: &TrainConfig,
    eval_steps: usize,
    gap_samples: usize,
    seed: u64,
    dump_dir: Option<&Path>,
    dump_count: usize,
) -> Result<AblationOutcome> {
    let steps = uniform_steps(s.steps(), eval_steps)?;
    let fresh = RectifierParams::build(den, rect_config)?;
    let mut rows = Vec::new();
    let mut final_losses = Vec::new();
    let mut rectifiers = Vec::new();
    for (exp, mode) in LOSS_VARIANTS {
        let cfg = TrainConfig {
            mode,
            ..base.clone()
        };
        let (r, log) = train::train_rectifier_recon(&cfg, den, fresh.clone(), train_data, s)?;
        final_losses.push((exp.to_string(), log.final_loss().unwrap_or(f64::NAN)));
        let m = RectifiedModel {
            denoiser: den,
            rectifier: &r,
            schedule: s,
        };
        let gaps = posterior_gap_images(&m, images, s, gap_samples, seed)?;
        for (i, x) in images.iter().enumerate() {
            let (y, _) = edit_sample(den, &r, x, &steps, s)?;
            recon_rows(exp, i, eval_steps, x, &y, &mut rows)?;
            rows.push(MetricRow {
                experiment: exp.into(),
                image: i,
                step_count: eval_steps,
                metric: Metric::PosteriorGap,
                value: gaps[i],
            });
            if i < dump_count {
                dump(dump_dir, &format!("{exp}_n{eval_steps}_img{i:03}"), &y)?;
            }
        }
        rectifiers.push((exp.to_string(), r));
    }
    let gap = |e: &str| mean(&series(&rows, e, eval_steps, Metric::PosteriorGap));
    let mut warnings = Vec::new();
    for other in ["loss_l1", "loss_l1_dw"] {
        if gap("loss_e") > gap(other) {
            warnings.push(format!(
                "noise-fitting loss has a larger posterior gap than {other} ({:.3e} > {:.3e})",
                gap("loss_e"),
                gap(other)
            ));
        }
    }
    sort_rows(&mut rows)?;
    Ok(AblationOutcome {
        rows,
        final_losses,
        rectifiers,
        warnings,
    })
}

/// Held-out reconstruction metrics for the frozen and (optionally) rectified
/// model, plus the posterior gap (reported with `step_count = 0`).
pub fn run_eval(
    den: &DenoiserParams,
    rect: Option<&RectifierParams>,
    images: &[Tensor],
    s: &NoiseSchedule,
    step_counts: &[usize],
    gap_samples: usize,
    seed: u64,
) -> Result<Vec<MetricRow>> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rows = Vec::new();
    for &n in step_counts {
        let steps = uniform_steps(s.steps(), n)?;
        for (i, x) in images.iter().enumerate() {
            let (y, _) = reconstruct(den, x, &steps, s)?;
            recon_rows("recon_frozen", i, n, x, &y, &mut rows)?;
            if let Some(r) = rect {
                let (y, _) = edit_sample(den, r, x, &steps, s)?;
                recon_rows("recon_rectified", i, n, x, &y, &mut rows)?;
            }
        }
    }
    let mut push_gaps = |exp: &str, g: Vec<f64>| {
        for (i, value) in g.into_iter().enumerate() {
            rows.push(MetricRow {
                experiment: exp.into(),
                image: i,
                step_count: 0,
                metric: Metric::PosteriorGap,
                value,
            });
        }
    };
    push_gaps("recon_frozen", posterior_gap_images(den, images, s, gap_samples, seed)?);
    if let Some(r) = rect {
        let m = RectifiedModel {
            denoiser: den,
            rectifier: r,
            schedule: s,
        };
        push_gaps("recon_rectified", posterior_gap_images(&m, images, s, gap_samples, seed)?);
    }
    sort_rows(&mut rows)?;
    Ok(rows)
}

// ---------------------------------------------------------------- config

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepKind {
    Step,
    Lambda,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditStrategy {
    ScoreMatching,
    Markov,
}

/// Plain-text `key = value` experiment configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub train_data: Option<PathBuf>,
    pub heldout_data: Option<PathBuf>,
    pub edit_data: Option<PathBuf>,
    pub denoiser: Option<PathBuf>,
    pub rectifier: Option<PathBuf>,
    pub edit_rectifier: Option<PathBuf>,
    pub markov_rectifier: Option<PathBuf>,
    /// Rectifier used by `sample` and `invert`; none means the frozen model.
    pub sample_rectifier: Option<PathBuf>,

    pub schedule_steps: usize,
    pub beta_start: Option<f64>,
    pub beta_end: Option<f64>,

    pub train_size: usize,
    pub heldout_size: usize,
    pub edit_size: usize,

    pub denoiser_widths: Vec<usize>,
    pub rectifier_widths: Vec<usize>,
    pub rectifier_hidden: usize,

    pub pretrain_steps: usize,
    pub recon_steps: usize,
    pub edit_steps: usize,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub decay_factor: Option<f64>,
    pub decay_interval: Option<usize>,
    pub recon_loss: TrainMode,
    pub edit_strategy: EditStrategy,
    pub lambda_clip: f64,
    pub lambda_recon: f64,
    pub dw_weight: f64,
    pub markov_steps: usize,
    pub markov_grad_steps: usize,
    pub attribute: String,

    pub sweep: SweepKind,
    pub step_counts: Vec<usize>,
    pub lambda_grid: Vec<f64>,
    pub lambda_control: bool,
    pub eval_steps: usize,
    pub eval_images: usize,
    pub gap_samples: usize,
    pub metrics: Vec<Metric>,
    pub dump_images: usize,
    pub num_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            train_data: None,
            heldout_data: None,
            edit_data: None,
            denoiser: None,
            rectifier: None,
            edit_rectifier: None,
            markov_rectifier: None,
            sample_rectifier: None,
            schedule_steps: 100,
            beta_start: None,
            beta_end: None,
            train_size: 1000,
            heldout_size: 200,
            edit_size: 100,
            denoiser_widths: DenoiserConfig::default().widths,
            rectifier_widths: RectifierConfig::default().encoder_widths,
            rectifier_hidden: RectifierConfig::default().hidden,
            pretrain_steps: 3000,
            recon_steps: 3000,
            edit_steps: 150,
            batch_size: None,
            lr: None,
            weight_decay: None,
            decay_factor: None,
            decay_interval: None,
            recon_loss: TrainMode::Recon,
            edit_strategy: EditStrategy::ScoreMatching,
            lambda_clip: 1.0,
            lambda_recon: 1.0,
            dw_weight: 1e-2,
            markov_steps: 10,
            markov_grad_steps: 3,
            attribute: "brighter".into(),
            sweep: SweepKind::Step,
            step_counts: vec![5, 10, 25, 50, 100],
            lambda_grid: vec![0.25, 1.0, 4.0],
            lambda_control: true,
            eval_steps: 25,
            eval_images: 200,
            gap_samples: 4,
            metrics: vec![
                Metric::L1,
                Metric::L2,
                Metric::Ssim,
                Metric::PosteriorGap,
                Metric::ProbeShift,
                Metric::OffAttrDrift,
            ],
            dump_images: 8,
            num_samples: 16,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidConfig(format!("bad value `{v}` for `{key}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|p| parse_num(key, p.trim()))
        .collect()
}

impl ExperimentConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are
    /// rejected with [`Error::UnknownKey`].
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn set(&mut self, k: &str, v: &str) -> Result<()> {
        let path = || Some(PathBuf::from(v));
        match k {
            "seed" => self.seed = parse_num(k, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "train_data" => self.train_data = path(),
            "heldout_data" => self.heldout_data = path(),
            "edit_data" => self.edit_data = path(),
            "denoiser" => self.denoiser = path(),
            "rectifier" => self.rectifier = path(),
            "edit_rectifier" => self.edit_rectifier = path(),
            "markov_rectifier" => self.markov_rectifier = path(),
            "sample_rectifier" => self.sample_rectifier = path(),
            "schedule_steps" => self.schedule_steps = parse_num(k, v)?,
            "beta_start" => self.beta_start = Some(parse_num(k, v)?),
            "beta_end" => self.beta_end = Some(parse_num(k, v)?),
            "train_size" => self.train_size = parse_num(k, v)?,
            "heldout_size" => self.heldout_size = parse_num(k, v)?,
            "edit_size" => self.edit_size = parse_num(k, v)?,
            "denoiser_widths" => self.denoiser_widths = parse_list(k, v)?,
            "rectifier_widths" => self.rectifier_widths = parse_list(k, v)?,
            "rectifier_hidden" => self.rectifier_hidden = parse_num(k, v)?,
            "pretrain_steps" => self.pretrain_steps = parse_num(k, v)?,
            "recon_steps" => self.recon_steps = parse_num(k, v)?,
            "edit_steps" => self.edit_steps = parse_num(k, v)?,
            "batch_size" => self.batch_size = Some(parse_num(k, v)?),
            "lr" => self.lr = Some(parse_num(k, v)?),
            "weight_decay" => self.weight_decay = Some(parse_num(k, v)?),
            "decay_factor" => self.decay_factor = Some(parse_num(k, v)?),
            "decay_interval" => self.decay_interval = Some(parse_num(k, v)?),
            "recon_loss" => {
                self.recon_loss = match v {
                    "e" => TrainMode::Recon,
                    "l1" => TrainMode::ReconL1,
                    "l1_dw" => TrainMode::ReconL1Dw,
                    _ => return Err(Error::InvalidConfig(format!("bad recon_loss `{v}`"))),
                }
            }
            "edit_strategy" => {
                self.edit_strategy = match v {
                    "sm" | "score_matching" => EditStrategy::ScoreMatching,
                    "markov" => EditStrategy::Markov,
                    _ => return Err(Error::InvalidConfig(format!("bad edit_strategy `{v}`"))),
                }
            }
            "lambda_clip" => self.lambda_clip = parse_num(k, v)?,
            "lambda_recon" => self.lambda_recon = parse_num(k, v)?,
            "dw_weight" => self.dw_weight = parse_num(k, v)?,
            "markov_steps" => self.markov_steps = parse_num(k, v)?,
            "markov_grad_steps" => self.markov_grad_steps = parse_num(k, v)?,
            "attribute" => self.attribute = v.to_string(),
            "sweep" => {
                self.sweep = match v {
                    "step" => SweepKind::Step,
                    "lambda" => SweepKind::Lambda,
                    _ => return Err(Error::InvalidConfig(format!("bad sweep `{v}`"))),
                }
            }
            "step_counts" => self.step_counts = parse_list(k, v)?,
            "lambda_grid" => self.lambda_grid = parse_list(k, v)?,
            "lambda_control" => self.lambda_control = parse_num(k, v)?,
            "eval_steps" => self.eval_steps = parse_num(k, v)?,
            "eval_images" => self.eval_images = parse_num(k, v)?,
            "gap_samples" => self.gap_samples = parse_num(k, v)?,
            "metrics" => {
                self.metrics = v
                    .split(',')
                    .map(|m| Metric::parse(m.trim()))
                    .collect::<Result<_>>()?
            }
            "dump_images" => self.dump_images = parse_num(k, v)?,
            "num_samples" => self.num_samples = parse_num(k, v)?,
            other => return Err(Error::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        AttributeDirection::by_name(&self.attribute)?;
        self.schedule()?;
        for &n in self.step_counts.iter().chain([&self.eval_steps]) {
            if n == 0 || n > self.schedule_steps {
                return Err(Error::InvalidConfig(format!(
                    "step count {n} outside 1..={}",
                    self.schedule_steps
                )));
            }
        }
        if self.train_size == 0 || self.heldout_size == 0 || self.edit_size == 0 {
            return Err(Error::InvalidConfig("dataset sizes must be positive".into()));
        }
        if self.lambda_grid.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::InvalidConfig("lambda grid must be non-negative".into()));
        }
        Ok(())
    }

    /// Reads a config file and resolves relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.display().to_string()),
            _ => Error::Io(e),
        })?;
        let mut c = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        c.resolve(base);
        Ok(c)
    }

    /// Makes every relative path absolute against `base`, filling unset
    /// artifact paths with their default names inside `out_dir`.
    pub fn resolve(&mut self, base: &Path) {
        if self.out_dir.is_relative() {
            self.out_dir = base.join(&self.out_dir);
        }
        let out = self.out_dir.clone();
        let fix = |p: &mut Option<PathBuf>, default: Option<&str>| {
            match p {
                Some(q) if q.is_relative() => *q = base.join(&*q),
                None => *p = default.map(|d| out.join(d)),
                _ => {}
            }
        };
        fix(&mut self.train_data, Some("train.rdts"));
        fix(&mut self.heldout_data, Some("heldout.rdts"));
        fix(&mut self.edit_data, Some("edit.rdts"));
        fix(&mut self.denoiser, Some("denoiser.rdck"));
        fix(&mut self.rectifier, Some("rectifier_recon.rdck"));
        fix(&mut self.edit_rectifier, Some("rectifier_edit_sm.rdck"));
        fix(&mut self.markov_rectifier, Some("rectifier_edit_markov.rdck"));
        fix(&mut self.sample_rectifier, None);
    }

    /// Re-targets every default artifact path at a new output directory.
    pub fn with_out_dir(&self, out: &Path) -> Self {
        let mut c = self.clone();
        c.out_dir = out.to_path_buf();
        let old = &self.out_dir;
        for p in [
            &mut c.train_data,
            &mut c.heldout_data,
            &mut c.edit_data,
            &mut c.denoiser,
            &mut c.rectifier,
            &mut c.edit_rectifier,
            &mut c.markov_rectifier,
        ]
        .into_iter()
        .flatten()
        {
            if let Ok(rest) = p.strip_prefix(old) {
                *p = out.join(rest);
            }
        }
        c
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        match (self.beta_start, self.beta_end) {
            (None, None) => NoiseSchedule::scaled_linear_default(self.schedule_steps),
            (a, b) => {
                let d = 1000.0 / self.schedule_steps as f64;
                NoiseSchedule::linear(
                    self.schedule_steps,
                    a.unwrap_or(1e-4 * d),
                    b.unwrap_or(0.02 * d),
                )
            }
        }
    }

    pub fn direction(&self) -> Result<AttributeDirection> {
        AttributeDirection::by_name(&self.attribute)
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            widths: self.denoiser_widths.clone(),
            seed: derive_seed(self.seed, 9),
            ..DenoiserConfig::default()
        }
    }

    pub fn rectifier_config(&self) -> RectifierConfig {
        RectifierConfig {
            encoder_widths: self.rectifier_widths.clone(),
            hidden: self.rectifier_hidden,
            seed: derive_seed(self.seed, 10),
            ..RectifierConfig::default()
        }
    }

    /// Trainer configuration: mode defaults, then any explicit overrides.
    pub fn train_config(&self, mode: TrainMode) -> TrainConfig {
        let mut t = TrainConfig::for_mode(mode);
        t.steps = match mode {
            TrainMode::Pretrain => self.pretrain_steps,
            m if m.is_recon() => self.recon_steps,
            _ => self.edit_steps,
        };
        t.seed = derive_seed(
            self.seed,
            match mode {
                TrainMode::Pretrain => 4,
                TrainMode::Recon | TrainMode::ReconL1 | TrainMode::ReconL1Dw => 5,
                TrainMode::EditSm => 6,
                TrainMode::EditMarkov => 7,
            },
        );
        if let Some(b) = self.batch_size {
            t.batch_size = b;
        }
        let o = &mut t.optimizer;
        if let Some(v) = self.lr {
            o.lr = v;
        }
        if let Some(v) = self.weight_decay {
            o.weight_decay = v;
        }
        if let Some(v) = self.decay_factor {
            o.decay_factor = v;
        }
        if let Some(v) = self.decay_interval {
            o.decay_interval = v;
        }
        t.lambda_clip = self.lambda_clip;
        t.lambda_recon = self.lambda_recon;
        t.dw_weight = self.dw_weight;
        t.markov_steps = self.markov_steps;
        t.markov_grad_steps = self.markov_grad_steps;
        if mode.is_edit() {
            t.attribute = Some(self.attribute.clone());
        }
        t
    }
}

// ---------------------------------------------------------------- pipeline

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    Pretrain,
    TrainRecon,
    TrainEdit,
    Sample,
    Invert,
    Sweep,
    Ablate,
    Eval,
}

impl Command {
    pub fn as_str(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Pretrain => "pretrain",
            Command::TrainRecon => "train-recon",
            Command::TrainEdit => "train-edit",
            Command::Sample => "sample",
            Command::Invert => "invert",
            Command::Sweep => "sweep",
            Command::Ablate => "ablate",
            Command::Eval => "eval",
        }
    }
}

fn required<'p>(p: &'p Option<PathBuf>, what: &str) -> Result<&'p Path> {
    p.as_deref()
        .ok_or_else(|| Error::InvalidConfig(format!("no path configured for {what}")))
}

fn must_exist(p: &Path) -> Result<()> {
    if !p.exists() {
        return Err(Error::MissingFile(p.display().to_string()));
    }
    Ok(())
}

fn load_images(p: &Option<PathBuf>, what: &str, limit: usize) -> Result<Vec<Tensor>> {
    let p = required(p, what)?;
    let samples = toyset::load(p)?;
    let mut imgs = toyset::images(&samples);
    imgs.truncate(limit);
    Ok(imgs)
}

fn write_log(log: &TrainLog, path: &Path) -> Result<()> {
    fs::write(path, log.to_csv())?;
    Ok(())
}

/// Runs one pipeline stage. Returns the files it wrote.
pub fn run_command(cmd: Command, cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let s = cfg.schedule()?;
    let out = &cfg.out_dir;
    let mut written = Vec::new();
    match cmd {
        Command::GenData => {
            for (p, what, n, stream) in [
                (&cfg.train_data, "train_data", cfg.train_size, 1),
                (&cfg.heldout_data, "heldout_data", cfg.heldout_size, 2),
                (&cfg.edit_data, "edit_data", cfg.edit_size, 3),
            ] {
                let p = required(p, what)?;
                let samples = toyset::generate(derive_seed(cfg.seed, stream), n)?;
                toyset::save(&samples, p)?;
                written.push(p.to_path_buf());
            }
            let held = load_images(&cfg.heldout_data, "heldout_data", cfg.dump_images)?;
            for (i, x) in held.iter().enumerate() {
                let p = out.join(format!("heldout_img{i:03}.pgm"));
                pgm::write(x, &p)?;
                written.push(p);
            }
        }
        Command::Pretrain => {
            let data = load_images(&cfg.train_data, "train_data", usize::MAX)?;
            let tc = cfg.train_config(TrainMode::Pretrain);
            let (den, log) = train::pretrain_denoiser(&tc, &cfg.denoiser_config(), &data, &s)?;
            let p = required(&cfg.denoiser, "denoiser")?;
            den.save(p)?;
            let l = out.join("log_pretrain.csv");
            write_log(&log, &l)?;
            written.extend([p.to_path_buf(), l]);
        }
        Command::TrainRecon => {
            let dp = required(&cfg.denoiser, "denoiser")?;
            must_exist(dp)?;
            let den = DenoiserParams::load(dp)?;
            let data = load_images(&cfg.train_data, "train_data", usize::MAX)?;
            let tc = cfg.train_config(cfg.recon_loss);
            let fresh = RectifierParams::build(&den, &cfg.rectifier_config())?;
            let (r, log) = train::train_rectifier_recon(&tc, &den, fresh, &data, &s)?;
            let p = required(&cfg.rectifier, "rectifier")?;
            r.save(p)?;
            let l = out.join(format!("log_{}.csv", cfg.recon_loss.as_str()));
            write_log(&log, &l)?;
            written.extend([p.to_path_buf(), l]);
        }
        Command::TrainEdit => {
            let den = DenoiserParams::load(required(&cfg.denoiser, "denoiser")?)?;
            let init = RectifierParams::load(required(&cfg.rectifier, "rectifier")?)?;
            let data = load_images(&cfg.edit_data, "edit_data", usize::MAX)?;
            let (mode, target) = match cfg.edit_strategy {
                EditStrategy::ScoreMatching => (TrainMode::EditSm, &cfg.edit_rectifier),
                EditStrategy::Markov => (TrainMode::EditMarkov, &cfg.markov_rectifier),
            };
            let tc = cfg.train_config(mode);
            let (r, log) = train::train_rectifier(&tc, &den, &init, &data, &s)?;
            let p = required(target, "edit rectifier")?;
            r.save(p)?;
            let l = out.join(format!("log_{}.csv", mode.as_str()));
            write_log(&log, &l)?;
            written.extend([p.to_path_buf(), l]);
        }
        Command::Sample => {
            let den = DenoiserParams::load(required(&cfg.denoiser, "denoiser")?)?;
            let rect = cfg
                .sample_rectifier
                .as_ref()
                .map(RectifierParams::load)
                .transpose()?;
            let refs = match rect {
                Some(_) => load_images(&cfg.heldout_data, "heldout_data", cfg.num_samples)?,
                None => vec![],
            };
            let steps = uniform_steps(s.steps(), cfg.eval_steps)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 8));
            let c = &cfg.denoiser_config();
            for i in 0..cfg.num_samples {
                let x_t = Tensor::randn(&[1, c.in_channels, c.image_size, c.image_size], &mut rng);
                let rec = match &rect {
                    Some(r) => {
                        let reference = refs.get(i % refs.len().max(1)).ok_or(Error::EmptyDataset)?;
                        let m = RectifiedModel {
                            denoiser: &den,
                            rectifier: r,
                            schedule: &s,
                        };
                        ddim_sample(&x_t, &m, &steps, &s, Some(reference))?
                    }
                    None => ddim_sample(&x_t, &den, &steps, &s, None)?,
                };
                let p = out.join(format!("sample_{i:03}.pgm"));
                pgm::write(&clamp_image(rec.last()), &p)?;
                written.push(p);
            }
        }
        Command::Invert => {
            let den = DenoiserParams::load(required(&cfg.denoiser, "denoiser")?)?;
            let rect = cfg
                .sample_rectifier
                .as_ref()
                .map(RectifierParams::load)
                .transpose()?;
            let imgs = load_images(&cfg.heldout_data, "heldout_data", cfg.num_samples)?;
            let steps = uniform_steps(s.steps(), cfg.eval_steps)?;
            let mut latents = crate::container::Container::new("latents");
            latents
                .metadata
                .push(("step_count".into(), cfg.eval_steps.to_string()));
            for (i, x) in imgs.iter().enumerate() {
                let inv = ddim_invert(x, &den, &steps, &s, None)?;
                latents
                    .tensors
                    .push((format!("latent{i:03}"), "latent".into(), inv.last().clone()));
                let y = match &rect {
                    Some(r) => edit_sample(&den, r, x, &steps, &s)?.0,
                    None => reconstruct(&den, x, &steps, &s)?.0,
                };
                let p = out.join(format!("invert_img{i:03}.pgm"));
                pgm::write(&y, &p)?;
                written.push(p);
            }
            let p = out.join("latents.rdck");
            latents.save(&p)?;
            written.push(p);
        }
        Command::Sweep => {
            let den = DenoiserParams::load(required(&cfg.denoiser, "denoiser")?)?;
            let imgs = load_images(&cfg.heldout_data, "heldout_data", cfg.eval_images)?;
            let dumps = out.join("pgm");
            fs::create_dir_all(&dumps)?;
            let rows = match cfg.sweep {
                SweepKind::Step => {
                    let load = |p: &Option<PathBuf>, what| -> Result<RectifierParams> {
                        RectifierParams::load(required(p, what)?)
                    };
                    let (r, sm, mk) = (
                        load(&cfg.rectifier, "rectifier")?,
                        load(&cfg.edit_rectifier, "edit_rectifier")?,
                        load(&cfg.markov_rectifier, "markov_rectifier")?,
                    );
                    let models = SweepModels {
                        denoiser: &den,
                        recon: Some(&r),
                        edit_sm: Some(&sm),
                        edit_markov: Some(&mk),
                    };
                    run_step_sweep(
                        &models,
                        &imgs,
                        &s,
                        &cfg.step_counts,
                        &cfg.direction()?,
                        Some(&dumps),
                        cfg.dump_images,
                    )?
                }
                SweepKind::Lambda => {
                    let init = RectifierParams::load(required(&cfg.rectifier, "rectifier")?)?;
                    let data = load_images(&cfg.edit_data, "edit_data", usize::MAX)?;
                    run_lambda_sweep(
                        &den,
                        &init,
                        &data,
                        &imgs,
                        &s,
                        &cfg.train_config(TrainMode::EditSm),
                        &cfg.lambda_grid,
                        cfg.lambda_control,
                        cfg.eval_steps,
                    )?
                }
            };
            let rows: Vec<MetricRow> = rows
                .into_iter()
                .filter(|r| cfg.metrics.contains(&r.metric))
                .collect();
            let name = match cfg.sweep {
                SweepKind::Step => "sweep_steps.csv",
                SweepKind::Lambda => "sweep_lambda.csv",
            };
            let p = out.join(name);
            write_rows(&rows, &p)?;
            written.push(p);
        }
        Command::Ablate => {
            let den = DenoiserParams::load(required(&cfg.denoiser, "denoiser")?)?;
            let data = load_images(&cfg.train_data, "train_data", usize::MAX)?;
            let imgs = load_images(&cfg.heldout_data, "heldout_data", cfg.eval_images)?;
            let dumps = out.join("pgm");
            fs::create_dir_all(&dumps)?;
            let outcome = run_loss_ablation(
                &den,
                &cfg.rectifier_config(),
                &data,
                &imgs,
                &s,
                &cfg.train_config(TrainMode::Recon),
                cfg.eval_steps,
                cfg.gap_samples,
                derive_seed(cfg.seed, 8),
                Some(&dumps),
                cfg.dump_images,
            )?;
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            let p = out.join("ablation_loss.csv");
            write_rows(&outcome.rows, &p)?;
            written.push(p);
        }
        Command::Eval => {
            let dp = required(&cfg.denoiser, "denoiser")?;
            must_exist(dp)?;
            let den = DenoiserParams::load(dp)?;
            let rect = match &cfg.rectifier {
                Some(p) if p.exists() => Some(RectifierParams::load(p)?),
                _ => None,
            };
            let imgs = load_images(&cfg.heldout_data, "heldout_data", cfg.eval_images)?;
            let rows = run_eval(
                &den,
                rect.as_ref(),
                &imgs,
                &s,
                &cfg.step_counts,
                cfg.gap_samples,
                derive_seed(cfg.seed, 8),
            )?;
            let rows: Vec<MetricRow> = rows
                .into_iter()
                .filter(|r| cfg.metrics.contains(&r.metric))
                .collect();
            let p = out.join("eval.csv");
            write_rows(&rows, &p)?;
            written.push(p);
        }
    }
    Ok(written)
}

/// Distinct experiment ids in `rows`.
pub fn experiments(rows: &[MetricRow]) -> BTreeSet<String> {
    rows.iter().map(|r| r.experiment.clone()).collect()
}
