//! Analytic attribute probe: a 10-d differentiable image embedding and fixed
//! attribute directions, used in place of a learned perceptual encoder.
//!
//! Pixels in `[-1, 1]` are read as mass `m = (x + 1) / 2`, so a black image
//! (all `-1`) has zero mass. Features, in order:
//!
//! | idx | feature |
//! |-----|---------|
//! | 0   | mean mass |
//! | 1-2 | centroid row, col (pixels) |
//! | 3   | second-moment trace about the centroid |
//! | 4-5 | `rr - cc`, `2 rc` second moments |
//! | 6-9 | mass fraction in radial bins `[0,2) [2,4) [4,6) [6,inf)` about the image center |
//!
//! Every normalisation divides by `sqrt(M² + ε²)` with `ε = 1e-8`, so a
//! massless image embeds as zero mass with its centroid at the image center.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const PROBE_DIM: usize = 10;
pub const PROBE_EPS: f64 = 1e-8;

pub const FEATURE_NAMES: [&str; PROBE_DIM] = [
    "mass",
    "centroid_row",
    "centroid_col",
    "moment_trace",
    "moment_rr_minus_cc",
    "moment_2rc",
    "radial_0",
    "radial_1",
    "radial_2",
    "radial_3",
];

const RADIAL_EDGES: [f64; 3] = [2.0, 4.0, 6.0];

/// Unit target direction in probe space.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeDirection {
    pub name: String,
    pub vector: [f64; PROBE_DIM],
}

impl AttributeDirection {
    fn axis(name: &str, i: usize) -> Self {
        let mut vector = [0.0; PROBE_DIM];
        vector[i] = 1.0;
        Self {
            name: name.into(),
            vector,
        }
    }

    pub fn brighter() -> Self {
        Self::axis("brighter", 0)
    }

    pub fn larger() -> Self {
        Self::axis("larger", 3)
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "brighter" => Ok(Self::brighter()),
            "larger" => Ok(Self::larger()),
            other => Err(Error::UnknownAttribute(other.to_string())),
        }
    }

    /// Any non-zero vector, normalised.
    pub fn custom(name: &str, v: [f64; PROBE_DIM]) -> Result<Self> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "direction `{name}` must be finite and non-zero"
            )));
        }
        Ok(Self {
            name: name.into(),
            vector: v.map(|x| x / n),
        })
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

fn spatial(shape: &[usize]) -> Result<(usize, usize)> {
    let n = shape.len();
    let ok = n >= 2 && shape[..n - 2].iter().all(|&d| d == 1);
    if !ok {
        return Err(Error::InvalidShape {
            op: "probe_embed",
            shape: shape.to_vec(),
            reason: "expected a single image [.., H, W]".into(),
        });
    }
    Ok((shape[n - 2], shape[n - 1]))
}

fn coord_maps(h: usize, w: usize) -> (Tensor, Tensor) {
    let (cr, cc) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let rows = (0..h * w).map(|p| (p / w) as f64 - cr).collect();
    let cols = (0..h * w).map(|p| (p % w) as f64 - cc).collect();
    (
        Tensor::new(vec![h, w], rows).expect("sized"),
        Tensor::new(vec![h, w], cols).expect("sized"),
    )
}

fn radial_masks(h: usize, w: usize) -> Vec<Tensor> {
    let (cr, cc) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    (0..=RADIAL_EDGES.len())
        .map(|b| {
            let lo = if b == 0 { 0.0 } else { RADIAL_EDGES[b - 1] };
            let hi = RADIAL_EDGES.get(b).copied().unwrap_or(f64::INFINITY);
            let data = (0..h * w)
                .map(|p| {
                    let d = ((p / w) as f64 - cr).hypot((p % w) as f64 - cc);
                    if d >= lo && d < hi {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            Tensor::new(vec![h, w], data).expect("sized")
        })
        .collect()
}

/// Taped embedding of one image; returns a `[10]` vector.
pub fn embed_var<'t>(image: Var<'t>) -> Result<Var<'t>> {
    let (h, w) = spatial(&image.shape())?;
    let tape = image.tape();
    let m = image.reshape(&[h, w])?.add_scalar(1.0).scale(0.5);
    let total = m.sum();
    let denom = total.square().add_scalar(PROBE_EPS * PROBE_EPS).sqrt();
    let (rmap, cmap) = coord_maps(h, w);
    let (cr, cc) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (rmap, cmap) = (tape.constant(rmap), tape.constant(cmap));

    // Offsets of the centroid from the image center.
    let dr = m.mul(rmap)?.sum().div(denom)?;
    let dc = m.mul(cmap)?.sum().div(denom)?;
    let rr = rmap.sub(dr)?;
    let cc_ = cmap.sub(dc)?;
    let mrr = m.mul(rr.square())?.sum().div(denom)?;
    let mcc = m.mul(cc_.square())?.sum().div(denom)?;
    let mrc = m.mul(rr.mul(cc_)?)?.sum().div(denom)?;

    let mut feats = vec![
        total.div_scalar((h * w) as f64),
        dr.add_scalar(cr),
        dc.add_scalar(cc),
        mrr.add(mcc)?,
        mrr.sub(mcc)?,
        mrc.scale(2.0),
    ];
    for mask in radial_masks(h, w) {
        feats.push(m.mul(tape.constant(mask))?.sum().div(denom)?);
    }
    tape.stack(&feats)
}

/// Embedding of one image as plain values.
pub fn embed(image: &Tensor) -> Result<[f64; PROBE_DIM]> {
    let tape = Tape::new();
    let e = embed_var(tape.constant(image.clone()))?.value();
    let mut out = [0.0; PROBE_DIM];
    out.copy_from_slice(e.data());
    Ok(out)
}

/// `1 - cos(ΔI, ΔT)` with `ΔI = embed(x_tar) - embed(x_src)`; the norm of
/// `ΔI` is guarded so the loss is exactly 1 at `ΔI = 0`.
pub fn directional_loss_var<'t>(
    x_src: Var<'t>,
    x_tar: Var<'t>,
    dir: &AttributeDirection,
) -> Result<Var<'t>> {
    let (a, b) = (x_src.shape(), x_tar.shape());
    if a != b {
        return Err(Error::ShapeMismatch {
            op: "directional_loss",
            lhs: a,
            rhs: b,
        });
    }
    let tape = x_src.tape();
    let di = embed_var(x_tar)?.sub(embed_var(x_src)?)?;
    let dt = tape.constant(Tensor::from_vec(dir.vector.to_vec()));
    let dot = di.mul(dt)?.sum();
    let norm = di
        .square()
        .sum()
        .add_scalar(PROBE_EPS * PROBE_EPS)
        .sqrt()
        .scale(dir.norm());
    Ok(dot.div(norm)?.neg().add_scalar(1.0))
}

pub fn directional_loss(x_src: &Tensor, x_tar: &Tensor, dir: &AttributeDirection) -> Result<f64> {
    let tape = Tape::new();
    let l = directional_loss_var(
        tape.constant(x_src.clone()),
        tape.constant(x_tar.clone()),
        dir,
    )?;
    Ok(l.item())
}

/// Mean absolute pixel difference.
pub fn l1_reg_var<'t>(x_tar: Var<'t>, x_src: Var<'t>) -> Result<Var<'t>> {
    Ok(x_tar.sub(x_src)?.abs().mean())
}

pub fn l1_reg(x_tar: &Tensor, x_src: &Tensor) -> Result<f64> {
    Ok(x_tar.zip_map(x_src, |a, b| (a - b).abs())?.mean())
}

/// Probe shift along the direction: `<E(edited) - E(original), ΔT>`.
pub fn probe_shift(original: &Tensor, edited: &Tensor, dir: &AttributeDirection) -> Result<f64> {
    let (a, b) = (embed(original)?, embed(edited)?);
    Ok((0..PROBE_DIM).map(|i| (b[i] - a[i]) * dir.vector[i]).sum())
}

/// Norm of the probe change orthogonal to the direction.
pub fn off_attribute_drift(
    original: &Tensor,
    edited: &Tensor,
    dir: &AttributeDirection,
) -> Result<f64> {
    let (a, b) = (embed(original)?, embed(edited)?);
    let d: Vec<f64> = (0..PROBE_DIM).map(|i| b[i] - a[i]).collect();
    let along: f64 = d.iter().zip(&dir.vector).map(|(x, u)| x * u).sum();
    Ok(d
        .iter()
        .zip(&dir.vector)
        .map(|(x, u)| (x - along * u).powi(2))
        .sum::<f64>()
        .sqrt())
}
