//! The rectifier hypernetwork.
//!
//! A stride-2 convolutional encoder reads the channel concatenation of the
//! original image and the current clean-image estimate and pools it to a
//! feature vector. One subnet per modulated denoiser layer mixes that vector
//! with a time embedding and emits the two separable factors of the layer's
//! kernel offset.
//!
//! The `factor_out` heads start at exactly zero, so a freshly built rectifier
//! produces `Δ = 0` and leaves the frozen denoiser untouched. The `factor_in`
//! heads start near one so the first gradient step is not stuck at the
//! symmetric zero point.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{separable_product, Tape, Tensor, Var};
use crate::denoiser::{ConvLayerMeta, DenoiserParams, OffsetVars};
use crate::diffusion::{estimate_x0, EpsModel, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{self, Bound, ParamSet};

/// Rank-1-per-tap kernel offset of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparableOffset {
    pub layer_id: String,
    /// `[kh, kw, Cin, 1]`
    pub factor_in: Tensor,
    /// `[kh, kw, 1, Cout]`
    pub factor_out: Tensor,
}

impl SeparableOffset {
    pub fn zeros(layer: &ConvLayerMeta) -> Self {
        Self {
            layer_id: layer.id.clone(),
            factor_in: Tensor::zeros(&[layer.kh, layer.kw, layer.cin, 1]),
            factor_out: Tensor::zeros(&[layer.kh, layer.kw, 1, layer.cout]),
        }
    }

    /// `Δ[co, ci, i, j] = factor_in[i, j, ci] · factor_out[i, j, co]`.
    pub fn materialize(&self) -> Result<Tensor> {
        separable_product(&self.factor_in, &self.factor_out)
    }

    pub fn param_count(&self) -> usize {
        self.factor_in.numel() + self.factor_out.numel()
    }
}

/// Generated scalars for one layer: `kh·kw·Cin + kh·kw·Cout`.
pub fn separable_param_count(layer: &ConvLayerMeta) -> usize {
    layer.kh * layer.kw * (layer.cin + layer.cout)
}

/// Scalars a dense offset would need: `kh·kw·Cin·Cout`.
pub fn dense_param_count(layer: &ConvLayerMeta) -> usize {
    layer.kh * layer.kw * layer.cin * layer.cout
}

#[derive(Clone, Debug, PartialEq)]
pub struct RectifierConfig {
    pub encoder_widths: Vec<usize>,
    pub hidden: usize,
    pub time_dim: usize,
    pub seed: u64,
}

impl Default for RectifierConfig {
    fn default() -> Self {
        Self {
            encoder_widths: vec![8, 16, 32, 64],
            hidden: 64,
            time_dim: 32,
            seed: 1,
        }
    }
}

impl RectifierConfig {
    pub fn tiny() -> Self {
        Self {
            encoder_widths: vec![4, 6, 8],
            hidden: 6,
            time_dim: 8,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RectifierParams {
    pub config: RectifierConfig,
    /// Image channels of the denoiser; the encoder sees twice as many.
    pub image_channels: usize,
    /// Target layer of each subnet, in subnet order.
    pub targets: Vec<ConvLayerMeta>,
    pub params: ParamSet,
}

impl RectifierParams {
    pub fn build(denoiser: &DenoiserParams, config: &RectifierConfig) -> Result<Self> {
        let targets = denoiser.modulated_layers();
        Self::build_for(&targets, denoiser.config.in_channels, config)
    }

    pub fn build_for(
        targets: &[ConvLayerMeta],
        image_channels: usize,
        config: &RectifierConfig,
    ) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::InvalidConfig("rectifier needs target layers".into()));
        }
        if let Some(t) = targets.iter().find(|t| !t.kind.modulatable()) {
            return Err(Error::InvalidConfig(format!(
                "layer `{}` is not in a middle or up block",
                t.id
            )));
        }
        if config.encoder_widths.is_empty() || config.hidden == 0 || config.time_dim % 2 != 0 {
            return Err(Error::InvalidConfig("invalid rectifier dimensions".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let mut c = 2 * image_channels;
        for (i, &w) in config.encoder_widths.iter().enumerate() {
            params.insert(
                format!("enc{i}.weight"),
                nn::init_uniform(&[w, c, 3, 3], c * 9, &mut rng),
            );
            params.insert(format!("enc{i}.bias"), Tensor::zeros(&[w]));
            c = w;
        }
        let feat = c;
        let (td, hid) = (config.time_dim, config.hidden);
        params.insert("time.weight", nn::init_uniform(&[td, td], td, &mut rng));
        params.insert("time.bias", Tensor::zeros(&[td]));
        for (i, t) in targets.iter().enumerate() {
            let taps = t.kh * t.kw;
            params.insert(
                format!("sub{i}.fc.weight"),
                nn::init_uniform(&[feat, hid], feat, &mut rng),
            );
            params.insert(format!("sub{i}.fc.bias"), Tensor::zeros(&[hid]));
            params.insert(
                format!("sub{i}.temb.weight"),
                nn::init_uniform(&[td, hid], td, &mut rng),
            );
            params.insert(format!("sub{i}.temb.bias"), Tensor::zeros(&[hid]));
            params.insert(
                format!("sub{i}.head_in.weight"),
                nn::init_uniform(&[hid, taps * t.cin], hid, &mut rng).map(|v| 0.1 * v),
            );
            params.insert(
                format!("sub{i}.head_in.bias"),
                Tensor::ones(&[taps * t.cin]),
            );
            params.insert(
                format!("sub{i}.head_out.weight"),
                Tensor::zeros(&[hid, taps * t.cout]),
            );
            params.insert(
                format!("sub{i}.head_out.bias"),
                Tensor::zeros(&[taps * t.cout]),
            );
        }
        Ok(Self {
            config: config.clone(),
            image_channels,
            targets: targets.to_vec(),
            params,
        })
    }

    pub fn subnet_count(&self) -> usize {
        self.targets.len()
    }

    /// Total generated offset scalars per `(image, t)`.
    pub fn generated_param_count(&self) -> usize {
        self.targets.iter().map(separable_param_count).sum()
    }

    /// Taped factors for one sample: `x0`, `x0_est` are `[1,C,H,W]`.
    pub fn factors<'t>(
        &self,
        bound: &Bound<'_, 't>,
        x0: Var<'t>,
        x0_est: Var<'t>,
        t: usize,
    ) -> Result<Vec<(String, Var<'t>, Var<'t>)>> {
        let (s0, s1) = (x0.shape(), x0_est.shape());
        if s0 != s1 || s0.len() != 4 || s0[0] != 1 || s0[1] != self.image_channels {
            return Err(Error::ShapeMismatch {
                op: "predict_offsets",
                lhs: s0,
                rhs: s1,
            });
        }
        let tape = x0.tape();
        let mut h = x0.concat_channels(x0_est)?;
        for i in 0..self.config.encoder_widths.len() {
            h = h
                .conv2d(bound.get(&format!("enc{i}.weight"))?, 2, 1)?
                .add_channel(bound.get(&format!("enc{i}.bias"))?)?
                .silu();
        }
        let feat = h.global_avg_pool()?;
        let emb = tape.constant(nn::sinusoidal_batch(&[t], self.config.time_dim));
        let temb = nn::linear(emb, bound, "time")?.silu();
        let mut out = Vec::with_capacity(self.targets.len());
        for (i, layer) in self.targets.iter().enumerate() {
            let hsub = nn::linear(feat, bound, &format!("sub{i}.fc"))?
                .add(nn::linear(temb, bound, &format!("sub{i}.temb"))?)?
                .silu();
            let fin = nn::linear(hsub, bound, &format!("sub{i}.head_in"))?
                .reshape(&[layer.kh, layer.kw, layer.cin, 1])?;
            let fout = nn::linear(hsub, bound, &format!("sub{i}.head_out"))?
                .reshape(&[layer.kh, layer.kw, 1, layer.cout])?;
            out.push((layer.id.clone(), fin, fout));
        }
        Ok(out)
    }

    /// Taped materialized offsets for one sample, keyed by layer id.
    pub fn offsets_var<'t>(
        &self,
        bound: &Bound<'_, 't>,
        x0: Var<'t>,
        x0_est: Var<'t>,
        t: usize,
    ) -> Result<OffsetVars<'t>> {
        self.factors(bound, x0, x0_est, t)?
            .into_iter()
            .map(|(id, fin, fout)| Ok((id, fin.separable_product(fout)?)))
            .collect()
    }

    /// Offsets for one `(x0, x0_est, t)`; both images are `[1,C,H,W]`.
    pub fn predict_offsets(
        &self,
        x0: &Tensor,
        x0_est: &Tensor,
        t: usize,
    ) -> Result<HashMap<String, SeparableOffset>> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let f = self.factors(&bound, tape.constant(x0.clone()), tape.constant(x0_est.clone()), t)?;
        Ok(f.into_iter()
            .map(|(id, fin, fout)| {
                (
                    id.clone(),
                    SeparableOffset {
                        layer_id: id,
                        factor_in: fin.value(),
                        factor_out: fout.value(),
                    },
                )
            })
            .collect())
    }
}

/// Clean-image estimate fed to the rectifier, clamped to the image range.
pub fn conditioning_estimate(
    x_t: &Tensor,
    eps_frozen: &Tensor,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    Ok(estimate_x0(x_t, eps_frozen, t, s)?.map(|v| v.clamp(-1.0, 1.0)))
}

/// Frozen denoiser modulated by a rectifier, as an [`EpsModel`].
///
/// For each sample: predict with the frozen weights, form the clean-image
/// estimate, ask the rectifier for offsets given the reference image, and
/// predict again with the modulated weights.
pub struct RectifiedModel<'a> {
    pub denoiser: &'a DenoiserParams,
    pub rectifier: &'a RectifierParams,
    pub schedule: &'a NoiseSchedule,
}

impl RectifiedModel<'_> {
    /// Modulated prediction on a tape, for one sample. Returns the taped
    /// modulated prediction; frozen quantities enter as constants.
    pub fn predict_sample_var<'t>(
        &self,
        den: &Bound<'_, 't>,
        rect: &Bound<'_, 't>,
        x0: &Tensor,
        x_t: Var<'t>,
        t: usize,
    ) -> Result<(Var<'t>, OffsetVars<'t>)> {
        let tape = x_t.tape();
        let frozen = self.denoiser.forward_sample(den, x_t.detach(), t, None)?;
        let est = conditioning_estimate(&x_t.value(), &frozen.value(), t, self.schedule)?;
        let offsets = self.rectifier.offsets_var(
            rect,
            tape.constant(x0.clone()),
            tape.constant(est),
            t,
        )?;
        let eps = self.denoiser.forward_sample(den, x_t, t, Some(&offsets))?;
        Ok((eps, offsets))
    }
}

impl EpsModel for RectifiedModel<'_> {
    fn predict_eps(&self, x_t: &Tensor, t: usize, reference: Option<&Tensor>) -> Result<Tensor> {
        let reference = reference.ok_or_else(|| {
            Error::InvalidConfig("a rectified model needs the reference image".into())
        })?;
        if reference.shape() != x_t.shape() {
            return Err(Error::ShapeMismatch {
                op: "rectified_predict",
                lhs: reference.shape().to_vec(),
                rhs: x_t.shape().to_vec(),
            });
        }
        let batch = x_t.shape()[0];
        let mut outs = Vec::with_capacity(batch);
        for i in 0..batch {
            let tape = Tape::new();
            let den = self.denoiser.params.bind(&tape, false);
            let rect = self.rectifier.params.bind(&tape, false);
            let (eps, _) = self.predict_sample_var(
                &den,
                &rect,
                &reference.select(i),
                tape.constant(x_t.select(i)),
                t,
            )?;
            outs.push(eps.value());
        }
        Tensor::concat_batch(&outs)
    }
}
