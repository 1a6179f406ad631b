//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"RDCK"
//! version  u32
//! kind     str              (u32 length + UTF-8 bytes)
//! n_meta   u32, then n_meta × (key str, value str)
//! n_tensor u32, then n_tensor × (name str, tag str, rank u32, rank × u64 dims)
//! data     every tensor's values as f64, in table order
//! ```

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::denoiser::{BlockKind, ConvLayerMeta, DenoiserConfig, DenoiserParams};
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::rectifier::{RectifierConfig, RectifierParams};

pub const MAGIC: &[u8; 4] = b"RDCK";
pub const VERSION: u32 = 1;

pub(crate) struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self { buf: Vec::new() }
    }
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt(format!(
                "truncated: wanted {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Corrupt("string is not UTF-8".into()))
    }
    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
    /// Checks a 4-byte magic tag and returns the version that follows.
    pub fn header(&mut self, magic: &[u8; 4], expected: u32) -> Result<()> {
        if self.take(4).map_err(|_| Error::Corrupt("missing header".into()))? != magic {
            return Err(Error::Corrupt(format!(
                "bad magic, expected {}",
                String::from_utf8_lossy(magic)
            )));
        }
        let found = self.u32()?;
        if found != expected {
            return Err(Error::VersionMismatch { found, expected });
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.display().to_string()),
        _ => Error::Io(e),
    })
}

/// A decoded container file.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub metadata: Vec<(String, String)>,
    pub tensors: Vec<(String, String, Tensor)>,
}

impl Container {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.into(),
            metadata: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Corrupt(format!("missing metadata `{key}`")))
    }

    fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta(key)?
            .parse()
            .map_err(|_| Error::Corrupt(format!("bad metadata value for `{key}`")))
    }

    fn meta_list(&self, key: &str) -> Result<Vec<usize>> {
        self.meta(key)?
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Corrupt(format!("bad list in `{key}`")))
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.str(&self.kind);
        w.u32(self.metadata.len() as u32);
        for (k, v) in &self.metadata {
            w.str(k);
            w.str(v);
        }
        w.u32(self.tensors.len() as u32);
        for (name, tag, t) in &self.tensors {
            w.str(name);
            w.str(tag);
            w.u32(t.shape().len() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
        }
        for (_, _, t) in &self.tensors {
            for &v in t.data() {
                w.f64(v);
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.header(MAGIC, VERSION)?;
        let kind = r.str()?;
        let n_meta = r.u32()? as usize;
        let mut metadata = Vec::new();
        for _ in 0..n_meta {
            metadata.push((r.str()?, r.str()?));
        }
        let n = r.u32()? as usize;
        let mut table = Vec::new();
        for _ in 0..n {
            let name = r.str()?;
            let tag = r.str()?;
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            table.push((name, tag, dims));
        }
        let mut tensors = Vec::with_capacity(n);
        for (name, tag, dims) in table {
            let len = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Corrupt("tensor size overflows".into()))?;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::Corrupt("tensor size overflows".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, tag, Tensor::new(dims, data)?));
        }
        r.finish()?;
        Ok(Self {
            kind,
            metadata,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Corrupt(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    fn push_params(&mut self, params: &ParamSet) {
        for (name, t) in params.iter() {
            self.tensors.push((name.into(), "param".into(), t.clone()));
        }
    }

    /// Overwrites every tensor of `params` with the stored value, requiring
    /// identical names, order and shapes.
    fn fill_params(&self, params: &mut ParamSet) -> Result<()> {
        if self.tensors.len() != params.len() {
            return Err(Error::Corrupt(format!(
                "expected {} tensors, found {}",
                params.len(),
                self.tensors.len()
            )));
        }
        let names = params.names().to_vec();
        for ((name, _, t), (want, slot)) in self
            .tensors
            .iter()
            .zip(names.iter().zip(params.tensors_mut()))
        {
            if name != want || t.shape() != slot.shape() {
                return Err(Error::Corrupt(format!(
                    "tensor `{name}` {:?} does not match `{want}` {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl DenoiserParams {
    pub fn to_container(&self) -> Container {
        let c = &self.config;
        let mut out = Container::new("denoiser");
        out.metadata = vec![
            ("in_channels".into(), c.in_channels.to_string()),
            ("image_size".into(), c.image_size.to_string()),
            ("widths".into(), join(&c.widths)),
            ("time_dim".into(), c.time_dim.to_string()),
            ("groups".into(), c.groups.to_string()),
            ("kernel".into(), c.kernel.to_string()),
            ("seed".into(), c.seed.to_string()),
        ];
        out.push_params(&self.params);
        out
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("denoiser")?;
        let config = DenoiserConfig {
            in_channels: c.meta_parse("in_channels")?,
            image_size: c.meta_parse("image_size")?,
            widths: c.meta_list("widths")?,
            time_dim: c.meta_parse("time_dim")?,
            groups: c.meta_parse("groups")?,
            kernel: c.meta_parse("kernel")?,
            seed: c.meta_parse("seed")?,
        };
        let mut d = DenoiserParams::build(&config)?;
        c.fill_params(&mut d.params)?;
        Ok(d)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

impl RectifierParams {
    pub fn to_container(&self) -> Container {
        let c = &self.config;
        let mut out = Container::new("rectifier");
        out.metadata = vec![
            ("encoder_widths".into(), join(&c.encoder_widths)),
            ("hidden".into(), c.hidden.to_string()),
            ("time_dim".into(), c.time_dim.to_string()),
            ("seed".into(), c.seed.to_string()),
            ("image_channels".into(), self.image_channels.to_string()),
            ("subnets".into(), self.targets.len().to_string()),
        ];
        // Subnet index -> target layer, with its kernel metadata.
        for (i, t) in self.targets.iter().enumerate() {
            out.metadata.push((
                format!("subnet.{i}"),
                format!(
                    "{},{},{},{},{},{}",
                    t.id,
                    t.kind.as_str(),
                    t.cout,
                    t.cin,
                    t.kh,
                    t.kw
                ),
            ));
        }
        out.push_params(&self.params);
        out
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("rectifier")?;
        let config = RectifierConfig {
            encoder_widths: c.meta_list("encoder_widths")?,
            hidden: c.meta_parse("hidden")?,
            time_dim: c.meta_parse("time_dim")?,
            seed: c.meta_parse("seed")?,
        };
        let n: usize = c.meta_parse("subnets")?;
        let mut targets = Vec::with_capacity(n);
        for i in 0..n {
            let key = format!("subnet.{i}");
            let parts: Vec<&str> = c.meta(&key)?.split(',').collect();
            let bad = || Error::Corrupt(format!("bad target in `{key}`"));
            if parts.len() != 6 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
            targets.push(ConvLayerMeta {
                id: parts[0].into(),
                kind: BlockKind::parse(parts[1]).ok_or_else(bad)?,
                cout: num(parts[2])?,
                cin: num(parts[3])?,
                kh: num(parts[4])?,
                kw: num(parts[5])?,
            });
        }
        let mut r = RectifierParams::build_for(&targets, c.meta_parse("image_channels")?, &config)?;
        c.fill_params(&mut r.params)?;
        Ok(r)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}
