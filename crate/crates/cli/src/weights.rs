//! The `.msaw` weights container.
//!
//! All integers are little-endian. Layout:
//!
//! ```text
//! "MSAW"  u32 version  u32 input_dim  u32 layer_count
//! per layer: u8 kind, then
//!   1 binary      u32 rows  u32 cols  u8 dtype=1  rows*cols × i8
//!   2 ternary     u32 rows  u32 cols  f64 lambda  u8 dtype=1  rows*cols × i8
//!   3 dense       u32 rows  u32 cols  u8 has_bias  u8 dtype=2  rows*cols × f64  [rows × f64]
//!   4 activation  u8 activation (0 identity, 1 relu, 2 tanh, 3 sigmoid, 4 softplus)
//!   5 batch norm  u32 dim  f64 eps  f64 momentum  u8 dtype=2  gamma beta running_mean running_var (dim × f64 each)
//! ```
//!
//! Discrete entries are stored as `i8` in `{-1, 0, 1}`, which keeps them
//! bit-exact; floats are stored as their IEEE-754 bits.

use std::path::Path;

use anyhow::{bail, ensure, Context};
use msa_core::layers::BatchNorm;
use msa_core::{ActivationKind, Layer, Matrix, Network, Vector};

pub const MAGIC: &[u8; 4] = b"MSAW";
pub const VERSION: u32 = 1;

const KIND_BINARY: u8 = 1;
const KIND_TERNARY: u8 = 2;
const KIND_DENSE: u8 = 3;
const KIND_ACTIVATION: u8 = 4;
const KIND_BATCH_NORM: u8 = 5;

const DTYPE_I8: u8 = 1;
const DTYPE_F64: u8 = 2;

const ACTIVATIONS: [ActivationKind; 5] = [
    ActivationKind::Identity,
    ActivationKind::Relu,
    ActivationKind::Tanh,
    ActivationKind::Sigmoid,
    ActivationKind::Softplus,
];

fn put_u32(out: &mut Vec<u8>, v: usize) -> anyhow::Result<()> {
    out.extend_from_slice(
        &u32::try_from(v)
            .context("dimension exceeds u32")?
            .to_le_bytes(),
    );
    Ok(())
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_discrete(out: &mut Vec<u8>, w: &Matrix) -> anyhow::Result<()> {
    out.push(DTYPE_I8);
    for &v in w.data() {
        let q = v as i8;
        ensure!(
            f64::from(q) == v && q.abs() <= 1,
            "discrete entry {v} is not in {{-1, 0, 1}}"
        );
        out.push(q as u8);
    }
    Ok(())
}

pub fn encode(net: &Network) -> anyhow::Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, net.input_dim())?;
    put_u32(&mut out, net.depth())?;
    for layer in net.layers() {
        match layer {
            Layer::Binary(l) => {
                out.push(KIND_BINARY);
                put_u32(&mut out, l.weights().rows())?;
                put_u32(&mut out, l.weights().cols())?;
                put_discrete(&mut out, l.weights())?;
            }
            Layer::Ternary(l) => {
                out.push(KIND_TERNARY);
                put_u32(&mut out, l.weights().rows())?;
                put_u32(&mut out, l.weights().cols())?;
                put_f64s(&mut out, &[l.lambda()]);
                put_discrete(&mut out, l.weights())?;
            }
            Layer::Dense(l) => {
                out.push(KIND_DENSE);
                put_u32(&mut out, l.weight().rows())?;
                put_u32(&mut out, l.weight().cols())?;
                out.push(u8::from(l.bias().is_some()));
                out.push(DTYPE_F64);
                put_f64s(&mut out, l.weight().data());
                if let Some(b) = l.bias() {
                    put_f64s(&mut out, b.data());
                }
            }
            Layer::Activation(kind) => {
                out.push(KIND_ACTIVATION);
                let tag = ACTIVATIONS.iter().position(|k| k == kind).expect("listed");
                out.push(tag as u8);
            }
            Layer::BatchNorm(bn) => {
                out.push(KIND_BATCH_NORM);
                put_u32(&mut out, bn.dim())?;
                put_f64s(&mut out, &[bn.eps(), bn.momentum()]);
                out.push(DTYPE_F64);
                for v in [bn.gamma(), bn.beta(), bn.running_mean(), bn.running_var()] {
                    put_f64s(&mut out, v.data());
                }
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> anyhow::Result<&'a [u8]> {
        let end = self.pos.checked_add(n).context("length overflow")?;
        let Some(chunk) = self.bytes.get(self.pos..end) else {
            bail!(
                "truncated weights file at offset {}: needed {n} bytes, {} available",
                self.pos,
                self.bytes.len() - self.pos
            );
        };
        self.pos = end;
        Ok(chunk)
    }

    fn u8(&mut self) -> anyhow::Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> anyhow::Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> anyhow::Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> anyhow::Result<Vec<f64>> {
        let b = self.take(n.checked_mul(8).context("length overflow")?)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn dtype(&mut self, expected: u8) -> anyhow::Result<()> {
        let at = self.pos;
        let d = self.u8()?;
        ensure!(
            d == expected,
            "unexpected dtype tag {d} at offset {at} (expected {expected})"
        );
        Ok(())
    }

    fn discrete(&mut self, rows: usize, cols: usize) -> anyhow::Result<Matrix> {
        self.dtype(DTYPE_I8)?;
        let at = self.pos;
        let raw = self.take(rows.checked_mul(cols).context("length overflow")?)?;
        let data = raw
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                let v = b as i8;
                ensure!(
                    v.abs() <= 1,
                    "discrete entry {v} at offset {} is not in {{-1, 0, 1}}",
                    at + i
                );
                Ok(f64::from(v))
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        Ok(Matrix::new(rows, cols, data)?)
    }
}

pub fn decode(bytes: &[u8]) -> anyhow::Result<Network> {
    let mut r = Reader { bytes, pos: 0 };
    ensure!(r.take(4)? == MAGIC, "not a weights file (bad magic)");
    let version = r.u32()?;
    ensure!(
        version == VERSION as usize,
        "unsupported weights version {version}"
    );
    let input_dim = r.u32()?;
    let count = r.u32()?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for t in 0..count {
        let at = r.pos;
        let layer = match r.u8()? {
            KIND_BINARY => {
                let (rows, cols) = (r.u32()?, r.u32()?);
                Layer::binary(r.discrete(rows, cols)?)?
            }
            KIND_TERNARY => {
                let (rows, cols) = (r.u32()?, r.u32()?);
                let lambda = r.f64()?;
                Layer::ternary(r.discrete(rows, cols)?, lambda)?
            }
            KIND_DENSE => {
                let (rows, cols) = (r.u32()?, r.u32()?);
                let has_bias = match r.u8()? {
                    0 => false,
                    1 => true,
                    b => bail!("layer {t}: bad bias flag {b}"),
                };
                r.dtype(DTYPE_F64)?;
                let w = Matrix::new(
                    rows,
                    cols,
                    r.f64s(rows.checked_mul(cols).context("length overflow")?)?,
                )?;
                let b = if has_bias {
                    Some(Vector::new(r.f64s(rows)?)?)
                } else {
                    None
                };
                Layer::dense(w, b)?
            }
            KIND_ACTIVATION => {
                let tag = r.u8()?;
                let kind = ACTIVATIONS
                    .get(usize::from(tag))
                    .with_context(|| format!("layer {t}: unknown activation tag {tag}"))?;
                Layer::activation(*kind)
            }
            KIND_BATCH_NORM => {
                let dim = r.u32()?;
                let (eps, momentum) = (r.f64()?, r.f64()?);
                r.dtype(DTYPE_F64)?;
                let mut v = || -> anyhow::Result<Vector> { Ok(Vector::new(r.f64s(dim)?)?) };
                let (g, b, m, s) = (v()?, v()?, v()?, v()?);
                Layer::BatchNorm(BatchNorm::from_parts(g, b, m, s, eps, momentum)?)
            }
            k => bail!("layer {t}: unknown layer kind {k} at offset {at}"),
        };
        layers.push(layer);
    }
    ensure!(
        r.pos == bytes.len(),
        "{} trailing bytes after last layer",
        bytes.len() - r.pos
    );
    Ok(Network::new(input_dim, layers)?)
}

pub fn save(net: &Network, path: &Path) -> anyhow::Result<()> {
    std::fs::write(path, encode(net)?).with_context(|| format!("writing {}", path.display()))
}

pub fn load(path: &Path) -> anyhow::Result<Network> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading weights {}", path.display()))?;
    decode(&bytes).with_context(|| format!("decoding weights {}", path.display()))
}
