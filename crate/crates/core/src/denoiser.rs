//! Tiny convolutional U-Net noise predictor with sinusoidal time embedding.
//!
//! Every block is `conv → +time → norm → SiLU → conv → norm → SiLU`. Down
//! blocks are followed by 2× average pooling; up blocks start with nearest
//! upsampling and concatenate the matching skip activation. Convolutions in
//! the middle and up blocks are addressable by layer id so their kernels can
//! be modulated as `w·(1 + Δ)`. Biases are never modulated.
//!
//! Batches are evaluated one sample at a time, so a batched call is
//! bit-identical to the per-sample loop.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::diffusion::EpsModel;
use crate::error::{Error, Result};
use crate::nn::{self, Bound, ParamSet};
use crate::rectifier::SeparableOffset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Down,
    Middle,
    Up,
    Output,
}

impl BlockKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BlockKind::Down => "down",
            BlockKind::Middle => "middle",
            BlockKind::Up => "up",
            BlockKind::Output => "output",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "down" => BlockKind::Down,
            "middle" => BlockKind::Middle,
            "up" => BlockKind::Up,
            "output" => BlockKind::Output,
            _ => return None,
        })
    }

    pub fn modulatable(&self) -> bool {
        matches!(self, BlockKind::Middle | BlockKind::Up)
    }
}

/// Metadata of one convolution: id, block kind and `(Cout, Cin, kh, kw)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvLayerMeta {
    pub id: String,
    pub kind: BlockKind,
    pub cout: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvLayerMeta {
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.cout, self.cin, self.kh, self.kw]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub in_channels: usize,
    pub image_size: usize,
    /// Output widths of the down blocks; the middle block uses the last one.
    pub widths: Vec<usize>,
    pub time_dim: usize,
    pub groups: usize,
    pub kernel: usize,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            image_size: 16,
            widths: vec![16, 32],
            time_dim: 32,
            groups: 4,
            kernel: 3,
            seed: 0,
        }
    }
}

impl DenoiserConfig {
    /// Smallest useful configuration, for gradient checks on 8×8 inputs.
    pub fn tiny() -> Self {
        Self {
            in_channels: 1,
            image_size: 8,
            widths: vec![4, 8],
            time_dim: 8,
            groups: 2,
            kernel: 3,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.widths.is_empty() {
            return bad("denoiser needs at least one down block".into());
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel size must be odd, got {}", self.kernel));
        }
        if self.image_size % (1 << self.widths.len()) != 0 {
            return bad(format!(
                "image size {} not divisible by 2^{}",
                self.image_size,
                self.widths.len()
            ));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return bad("time embedding dimension must be positive and even".into());
        }
        if self.groups == 0 || self.widths.iter().any(|w| w % self.groups != 0) {
            return bad(format!(
                "every width must be divisible by {} groups",
                self.groups
            ));
        }
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        Ok(())
    }

    /// Blocks in evaluation order: `(name, kind, cin, cout)`.
    fn blocks(&self) -> Vec<(String, BlockKind, usize, usize)> {
        let n = self.widths.len();
        let mut out = Vec::new();
        let mut c = self.in_channels;
        for (i, &w) in self.widths.iter().enumerate() {
            out.push((format!("down{i}"), BlockKind::Down, c, w));
            c = w;
        }
        out.push(("mid".to_string(), BlockKind::Middle, c, c));
        for i in 0..n {
            let skip = self.widths[n - 1 - i];
            let w = self.widths[n - 1 - i];
            out.push((format!("up{i}"), BlockKind::Up, c + skip, w));
            c = w;
        }
        out
    }

    /// All convolution layers in evaluation order.
    pub fn conv_layers(&self) -> Vec<ConvLayerMeta> {
        let k = self.kernel;
        let mut out = Vec::new();
        for (name, kind, cin, cout) in self.blocks() {
            out.push(ConvLayerMeta {
                id: format!("{name}.conv1"),
                kind,
                cout,
                cin,
                kh: k,
                kw: k,
            });
            out.push(ConvLayerMeta {
                id: format!("{name}.conv2"),
                kind,
                cout,
                cin: cout,
                kh: k,
                kw: k,
            });
        }
        out.push(ConvLayerMeta {
            id: "out.conv".into(),
            kind: BlockKind::Output,
            cout: self.in_channels,
            cin: self.widths[0],
            kh: k,
            kw: k,
        });
        out
    }

    pub fn modulated_layers(&self) -> Vec<ConvLayerMeta> {
        self.conv_layers()
            .into_iter()
            .filter(|l| l.kind.modulatable())
            .collect()
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let td = self.time_dim;
        let mut n = td * td + td;
        for (_, _, cin, cout) in self.blocks() {
            let k2 = self.kernel * self.kernel;
            n += cout * cin * k2 + cout; // conv1
            n += cout * cout * k2 + cout; // conv2
            n += 4 * cout; // two norms
            n += td * cout + cout; // time projection
        }
        n + self.in_channels * self.widths[0] * self.kernel * self.kernel + self.in_channels
    }
}

/// Layered parameters of the noise predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub layers: Vec<ConvLayerMeta>,
    pub params: ParamSet,
}

/// Per-sample materialized kernel offsets keyed by layer id.
pub type OffsetVars<'t> = HashMap<String, Var<'t>>;

impl DenoiserParams {
    pub fn build(config: &DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let td = config.time_dim;
        params.insert("time.weight", nn::init_uniform(&[td, td], td, &mut rng));
        params.insert("time.bias", Tensor::zeros(&[td]));
        let layers = config.conv_layers();
        for (name, _, _, cout) in config.blocks() {
            for conv in ["conv1", "conv2"] {
                let meta = layers
                    .iter()
                    .find(|l| l.id == format!("{name}.{conv}"))
                    .expect("layer listed");
                let fan_in = meta.cin * meta.kh * meta.kw;
                params.insert(
                    format!("{}.weight", meta.id),
                    nn::init_uniform(&meta.weight_shape(), fan_in, &mut rng),
                );
                params.insert(format!("{}.bias", meta.id), Tensor::zeros(&[cout]));
            }
            for norm in ["norm1", "norm2"] {
                params.insert(format!("{name}.{norm}.gamma"), Tensor::ones(&[cout]));
                params.insert(format!("{name}.{norm}.beta"), Tensor::zeros(&[cout]));
            }
            params.insert(
                format!("{name}.temb.weight"),
                nn::init_uniform(&[td, cout], td, &mut rng),
            );
            params.insert(format!("{name}.temb.bias"), Tensor::zeros(&[cout]));
        }
        let out = layers.last().expect("output layer");
        params.insert(
            "out.conv.weight",
            nn::init_uniform(&out.weight_shape(), out.cin * out.kh * out.kw, &mut rng),
        );
        params.insert("out.conv.bias", Tensor::zeros(&[out.cout]));
        Ok(Self {
            config: config.clone(),
            layers,
            params,
        })
    }

    pub fn layer(&self, id: &str) -> Option<&ConvLayerMeta> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn modulated_layers(&self) -> Vec<ConvLayerMeta> {
        self.layers
            .iter()
            .filter(|l| l.kind.modulatable())
            .cloned()
            .collect()
    }

    /// Checks that offsets only address known modulatable layers with the
    /// right kernel shape.
    pub fn check_offsets<'t>(&self, offsets: &OffsetVars<'t>) -> Result<()> {
        for (id, delta) in offsets {
            let meta = self
                .layer(id)
                .ok_or_else(|| Error::UnknownLayer(id.clone()))?;
            if !meta.kind.modulatable() {
                return Err(Error::InvalidConfig(format!(
                    "layer `{id}` is in a {} block and cannot be modulated",
                    meta.kind.as_str()
                )));
            }
            if delta.shape() != meta.weight_shape() {
                return Err(Error::ShapeMismatch {
                    op: "modulate",
                    lhs: meta.weight_shape().to_vec(),
                    rhs: delta.shape(),
                });
            }
        }
        Ok(())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        if shape.len() != 4
            || shape[1] != c.in_channels
            || shape[2] != c.image_size
            || shape[3] != c.image_size
        {
            return Err(Error::ShapeMismatch {
                op: "predict_eps",
                lhs: vec![0, c.in_channels, c.image_size, c.image_size],
                rhs: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// One-sample forward pass on `x[1,C,H,W]`.
    pub fn forward_sample<'t>(
        &self,
        bound: &Bound<'_, 't>,
        x: Var<'t>,
        t: usize,
        offsets: Option<&OffsetVars<'t>>,
    ) -> Result<Var<'t>> {
        self.check_input(&x.shape())?;
        if x.shape()[0] != 1 {
            return Err(Error::InvalidShape {
                op: "forward_sample",
                shape: x.shape(),
                reason: "expects a single sample".into(),
            });
        }
        let tape = x.tape();
        let c = &self.config;
        let pad = c.kernel / 2;
        let emb = tape.constant(nn::sinusoidal_batch(&[t], c.time_dim));
        let temb = nn::linear(emb, bound, "time")?.silu();

        let conv = |h: Var<'t>, id: &str| -> Result<Var<'t>> {
            let mut w = bound.get(&format!("{id}.weight"))?;
            if let Some(delta) = offsets.and_then(|o| o.get(id)) {
                w = w.mul(delta.add_scalar(1.0))?;
            }
            h.conv2d(w, 1, pad)?
                .add_channel(bound.get(&format!("{id}.bias"))?)
        };
        let block = |h: Var<'t>, name: &str| -> Result<Var<'t>> {
            let h = conv(h, &format!("{name}.conv1"))?;
            let h = h.add_channel(nn::linear(temb, bound, &format!("{name}.temb"))?)?;
            let h = nn::group_norm_affine(h, c.groups, bound, &format!("{name}.norm1"))?.silu();
            let h = conv(h, &format!("{name}.conv2"))?;
            Ok(nn::group_norm_affine(h, c.groups, bound, &format!("{name}.norm2"))?.silu())
        };

        let n = c.widths.len();
        let mut skips = Vec::with_capacity(n);
        let mut h = x;
        for i in 0..n {
            h = block(h, &format!("down{i}"))?;
            skips.push(h);
            h = h.downsample_avg2x()?;
        }
        h = block(h, "mid")?;
        for i in 0..n {
            let skip = skips[n - 1 - i];
            h = h.upsample_nearest2x()?.concat_channels(skip)?;
            h = block(h, &format!("up{i}"))?;
        }
        conv(h, "out.conv")
    }

    /// Batched forward with per-sample timesteps and optional per-sample offsets.
    pub fn forward<'t>(
        &self,
        bound: &Bound<'_, 't>,
        x: Var<'t>,
        ts: &[usize],
        offsets: Option<&[OffsetVars<'t>]>,
    ) -> Result<Var<'t>> {
        let shape = x.shape();
        self.check_input(&shape)?;
        let batch = shape[0];
        if ts.len() != batch || offsets.is_some_and(|o| o.len() != batch) {
            return Err(Error::InvalidShape {
                op: "forward",
                shape,
                reason: "one timestep (and offset map) per sample required".into(),
            });
        }
        if let Some(offs) = offsets {
            for o in offs {
                self.check_offsets(o)?;
            }
        }
        let outs = (0..batch)
            .map(|i| {
                let xi = if batch == 1 { x } else { x.select(i)? };
                self.forward_sample(bound, xi, ts[i], offsets.map(|o| &o[i]))
            })
            .collect::<Result<Vec<_>>>()?;
        if batch == 1 {
            Ok(outs[0])
        } else {
            x.tape().concat_batch(&outs)
        }
    }

    /// `eps_theta(x_t, t)` for a batch sharing one timestep.
    pub fn predict_eps(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self.modulated_predict_eps(&[], x_t, t)
    }

    /// Forward pass with `theta·(1 + Δ)` on the addressed layers. `offsets`
    /// holds one map per sample, or is empty for an unmodulated pass.
    pub fn modulated_predict_eps(
        &self,
        offsets: &[HashMap<String, SeparableOffset>],
        x_t: &Tensor,
        t: usize,
    ) -> Result<Tensor> {
        self.check_input(x_t.shape())?;
        let batch = x_t.shape()[0];
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let x = tape.constant(x_t.clone());
        let ts = vec![t; batch];
        let out = if offsets.is_empty() {
            self.forward(&bound, x, &ts, None)?
        } else {
            let maps = offsets
                .iter()
                .map(|m| {
                    m.iter()
                        .map(|(id, o)| {
                            if &o.layer_id != id {
                                return Err(Error::UnknownLayer(o.layer_id.clone()));
                            }
                            Ok((id.clone(), tape.constant(o.materialize()?)))
                        })
                        .collect::<Result<OffsetVars<'_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            self.forward(&bound, x, &ts, Some(&maps))?
        };
        Ok(out.value())
    }
}

impl EpsModel for DenoiserParams {
    fn predict_eps(&self, x_t: &Tensor, t: usize, _reference: Option<&Tensor>) -> Result<Tensor> {
        DenoiserParams::predict_eps(self, x_t, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn input(cfg: &DenoiserConfig, batch: usize, seed: u64) -> Tensor {
        let s = cfg.image_size;
        Tensor::randn(&[batch, cfg.in_channels, s, s], &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn default_shape_preserved_for_all_t() {
        let cfg = DenoiserConfig::default();
        let d = DenoiserParams::build(&cfg).unwrap();
        let x = input(&cfg, 1, 1);
        for t in [1, 37, 100] {
            assert_eq!(d.predict_eps(&x, t).unwrap().shape(), &[1, 1, 16, 16]);
        }
    }

    #[test]
    fn param_count_matches_closed_form() {
        for cfg in [DenoiserConfig::default(), DenoiserConfig::tiny()] {
            let d = DenoiserParams::build(&cfg).unwrap();
            assert_eq!(d.params.numel(), cfg.param_count());
        }
        // Default config worked by hand: time MLP 32·32+32 = 1056;
        // down0 (1→16): 144+16 + 2304+16 + 64 + 512+16 = 3072;
        // down1 (16→32): 4608+32 + 9216+32 + 128 + 1024+32 = 15072;
        // mid (32→32): 9216+32 + 9216+32 + 128 + 1024+32 = 19680;
        // up0 (64→32): 18432+32 + 9216+32 + 128 + 1024+32 = 28896;
        // up1 (48→16): 6912+16 + 2304+16 + 64 + 512+16 = 9840;
        // out (16→1): 144+1 = 145.
        assert_eq!(
            DenoiserConfig::default().param_count(),
            1056 + 3072 + 15072 + 19680 + 28896 + 9840 + 145
        );
    }

    #[test]
    fn same_seed_bit_identical() {
        let a = DenoiserParams::build(&DenoiserConfig::default()).unwrap();
        let b = DenoiserParams::build(&DenoiserConfig::default()).unwrap();
        assert!(a.params.bits_eq(&b.params));
        let c = DenoiserParams::build(&DenoiserConfig {
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        assert!(!a.params.bits_eq(&c.params));
    }

    #[test]
    fn modulated_layer_ids() {
        let d = DenoiserParams::build(&DenoiserConfig::default()).unwrap();
        let ids: Vec<String> = d.modulated_layers().into_iter().map(|l| l.id).collect();
        assert_eq!(
            ids,
            ["mid.conv1", "mid.conv2", "up0.conv1", "up0.conv2", "up1.conv1", "up1.conv2"]
        );
        assert_eq!(d.layer("up0.conv1").unwrap().weight_shape(), [32, 64, 3, 3]);
        assert_eq!(d.layer("up1.conv1").unwrap().weight_shape(), [16, 48, 3, 3]);
    }

    #[test]
    fn batch_equals_per_sample_loop() {
        let cfg = DenoiserConfig::tiny();
        let d = DenoiserParams::build(&cfg).unwrap();
        let x = input(&cfg, 3, 2);
        let batched = d.predict_eps(&x, 5).unwrap();
        for i in 0..3 {
            let single = d.predict_eps(&x.select(i), 5).unwrap();
            assert!(single.bits_eq(&batched.select(i)));
        }
    }

    #[test]
    fn zero_offsets_bit_identical() {
        let cfg = DenoiserConfig::tiny();
        let d = DenoiserParams::build(&cfg).unwrap();
        let x = input(&cfg, 2, 3);
        let zero: HashMap<String, SeparableOffset> = d
            .modulated_layers()
            .iter()
            .map(|l| (l.id.clone(), SeparableOffset::zeros(l)))
            .collect();
        let a = d.predict_eps(&x, 4).unwrap();
        let b = d.modulated_predict_eps(&[zero.clone(), zero], &x, 4).unwrap();
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn rejects_bad_addressing() {
        let cfg = DenoiserConfig::tiny();
        let d = DenoiserParams::build(&cfg).unwrap();
        let x = input(&cfg, 1, 4);
        let down = d.layer("down0.conv1").unwrap().clone();
        let mut m = HashMap::new();
        m.insert(down.id.clone(), SeparableOffset::zeros(&down));
        assert!(d.modulated_predict_eps(&[m], &x, 1).is_err());
        let mid = d.layer("mid.conv1").unwrap().clone();
        let mut wrong = SeparableOffset::zeros(&mid);
        wrong.layer_id = "nope".into();
        let mut m = HashMap::new();
        m.insert("nope".to_string(), wrong);
        assert!(matches!(
            d.modulated_predict_eps(&[m], &x, 1),
            Err(Error::UnknownLayer(_))
        ));
        let bad = Tensor::zeros(&[1, 1, 4, 4]);
        assert!(matches!(d.predict_eps(&bad, 1), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = DenoiserConfig::default();
        c.groups = 5;
        assert!(DenoiserParams::build(&c).is_err());
        let mut c = DenoiserConfig::default();
        c.image_size = 10;
        assert!(DenoiserParams::build(&c).is_err());
        let mut c = DenoiserConfig::default();
        c.kernel = 2;
        assert!(DenoiserParams::build(&c).is_err());
    }
}
