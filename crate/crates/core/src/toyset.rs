//! Procedural dataset of anti-aliased grayscale discs.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::container::{read_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 16;
pub const MAGIC: &[u8; 4] = b"RDTS";
pub const VERSION: u32 = 1;

pub const RADIUS_RANGE: (f64, f64) = (2.0, 6.0);
pub const INTENSITY_RANGE: (f64, f64) = (0.3, 1.0);
pub const CENTER_RANGE: (f64, f64) = (5.0, 11.0);
pub const BACKGROUND_RANGE: (f64, f64) = (-1.0, -0.6);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscAttributes {
    pub radius: f64,
    pub intensity: f64,
    /// (row, col) in pixel coordinates; pixel `(i, j)` sits at `(i, j)`.
    pub center: (f64, f64),
    pub background: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySample {
    /// `[1, 16, 16]`
    pub image: Tensor,
    pub attributes: DiscAttributes,
    pub seed: u64,
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Renders a disc whose edge ramps over one pixel around the radius.
pub fn render(a: &DiscAttributes, size: usize) -> Tensor {
    let data = (0..size * size)
        .map(|p| {
            let d = ((p / size) as f64 - a.center.0).hypot((p % size) as f64 - a.center.1);
            let cover = 1.0 - smoothstep(a.radius - 0.5, a.radius + 0.5, d);
            a.background + (a.intensity - a.background) * cover
        })
        .collect();
    Tensor::new(vec![1, size, size], data).expect("sized")
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.gen_range(lo..=hi)
}

/// `n` samples from a seeded generator; sample `i` has its own sub-seed.
pub fn generate(seed: u64, n: usize) -> Result<Vec<ToySample>> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let sub = master.gen::<u64>();
            let mut rng = ChaCha8Rng::seed_from_u64(sub);
            let attributes = DiscAttributes {
                radius: draw(&mut rng, RADIUS_RANGE),
                intensity: draw(&mut rng, INTENSITY_RANGE),
                center: (draw(&mut rng, CENTER_RANGE), draw(&mut rng, CENTER_RANGE)),
                background: draw(&mut rng, BACKGROUND_RANGE),
            };
            ToySample {
                image: render(&attributes, IMAGE_SIZE),
                attributes,
                seed: sub,
            }
        })
        .collect())
}

/// Images as `[1, 1, H, W]` tensors, ready for the denoiser.
pub fn images(samples: &[ToySample]) -> Vec<Tensor> {
    samples
        .iter()
        .map(|s| {
            let sh = s.image.shape();
            s.image
                .clone()
                .reshape(&[1, sh[0], sh[1], sh[2]])
                .expect("same size")
        })
        .collect()
}

pub fn to_bytes(samples: &[ToySample]) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u64(samples.len() as u64);
    let dims = samples.first().map(|s| s.image.shape().to_vec()).unwrap_or(vec![1, 0, 0]);
    for d in &dims {
        w.u64(*d as u64);
    }
    for s in samples {
        let a = &s.attributes;
        w.u64(s.seed);
        for v in [a.radius, a.intensity, a.center.0, a.center.1, a.background] {
            w.f64(v);
        }
    }
    for s in samples {
        for &v in s.image.data() {
            w.f64(v);
        }
    }
    w.buf
}

pub fn from_bytes(bytes: &[u8]) -> Result<Vec<ToySample>> {
    let mut r = ByteReader::new(bytes);
    r.header(MAGIC, VERSION)?;
    let n = r.u64()? as usize;
    let dims = [r.u64()? as usize, r.u64()? as usize, r.u64()? as usize];
    let per = dims.iter().product::<usize>();
    // Reject absurd counts before allocating.
    if n.saturating_mul(48 + per * 8) > bytes.len() {
        return Err(Error::Corrupt(format!("truncated: header claims {n} samples")));
    }
    let mut attrs = Vec::with_capacity(n);
    for _ in 0..n {
        let seed = r.u64()?;
        let v: Vec<f64> = (0..5).map(|_| r.f64()).collect::<Result<_>>()?;
        attrs.push((
            seed,
            DiscAttributes {
                radius: v[0],
                intensity: v[1],
                center: (v[2], v[3]),
                background: v[4],
            },
        ));
    }
    let mut out = Vec::with_capacity(n);
    for (seed, attributes) in attrs {
        let data = (0..per).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        out.push(ToySample {
            image: Tensor::new(dims.to_vec(), data)?,
            attributes,
            seed,
        });
    }
    r.finish()?;
    Ok(out)
}

pub fn save(samples: &[ToySample], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(samples))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<ToySample>> {
    from_bytes(&read_file(path.as_ref())?)
}
