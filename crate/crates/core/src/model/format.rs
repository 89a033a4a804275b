//! The `EDGN` binary container shared by checkpoints and deployed models.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic      "EDGN"
//! version    u16
//! kind       u8      0 = checkpoint, 1 = deployed
//! precision  u8      0 = f32, 1 = f16, 2 = i8
//! config     u32 input_size, u32 num_classes, u32 conv1_filters,
//!            u32 conv2_filters, u32 dense_units, f32 x3 dropout rates
//! checkpoint: u32 epoch, f64 best_val_loss, u64 adam_step
//! deployed:   u16 count, then per activation: str name, f32 scale, i32 zero_point
//! u32 record count, then records:
//!   str name          (u16 length + UTF-8 bytes)
//!   u8 dtype          0 = f64, 1 = f32, 2 = f16 (IEEE binary16), 3 = i8
//!   u8 rank, u32 x rank extents
//!   i8 only: f32 scale, i32 zero_point
//!   u64 payload length, payload
//! ```
//!
//! A checkpoint stores every weight tensor followed by its Adam first and
//! second moments (`<name>.adam_m`, `<name>.adam_v`).

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use half::f16;

use super::{Checkpoint, DeployedModel, GraphConfig, ModelGraph, Precision, PARAM_NAMES};
use crate::quantize::QuantParams;
use crate::tensor::{DType, Shape, Storage, StoredTensor, Tensor};
use crate::train::AdamState;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EDGN";
pub const FORMAT_VERSION: u16 = 1;

const KIND_CHECKPOINT: u8 = 0;
const KIND_DEPLOYED: u8 = 1;

/// Either artifact, as discovered from a file header.
#[derive(Debug)]
pub enum Artifact {
    Checkpoint(Box<Checkpoint>),
    Deployed(Box<DeployedModel>),
}

fn precision_tag(p: Precision) -> u8 {
    match p {
        Precision::F32 => 0,
        Precision::F16 => 1,
        Precision::I8 => 2,
    }
}

fn dtype_tag(d: DType) -> u8 {
    match d {
        DType::F64 => 0,
        DType::F32 => 1,
        DType::F16 => 2,
        DType::I8 => 3,
    }
}

struct CountingWriter<W> {
    inner: W,
    written: u64,
}

impl<W: Write> CountingWriter<W> {
    fn put(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.inner.write_all(bytes)?;
        self.written += bytes.len() as u64;
        Ok(())
    }

    fn put_str(&mut self, s: &str) -> io::Result<()> {
        let len = u16::try_from(s.len())
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "name too long"))?;
        self.put(&len.to_le_bytes())?;
        self.put(s.as_bytes())
    }

    fn put_u32(&mut self, v: usize) -> io::Result<()> {
        let v = u32::try_from(v)
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "value exceeds u32"))?;
        self.put(&v.to_le_bytes())
    }

    fn put_header(&mut self, kind: u8, precision: Precision, cfg: &GraphConfig) -> io::Result<()> {
        self.put(MAGIC)?;
        self.put(&FORMAT_VERSION.to_le_bytes())?;
        self.put(&[kind, precision_tag(precision)])?;
        for v in [
            cfg.input_size,
            cfg.num_classes,
            cfg.conv1_filters,
            cfg.conv2_filters,
            cfg.dense_units,
        ] {
            self.put_u32(v)?;
        }
        for r in cfg.dropout {
            self.put(&r.to_le_bytes())?;
        }
        Ok(())
    }

    fn put_record(&mut self, name: &str, t: &StoredTensor) -> io::Result<()> {
        self.put_str(name)?;
        self.put(&[dtype_tag(t.dtype()), t.shape().rank() as u8])?;
        for &d in t.shape().dims() {
            self.put_u32(d)?;
        }
        if let Some(q) = t.quant() {
            self.put(&q.scale.to_le_bytes())?;
            self.put(&q.zero_point.to_le_bytes())?;
        }
        self.put(&(t.payload_bytes() as u64).to_le_bytes())?;
        match t.storage() {
            Storage::F64(v) => self.put_values(v, |x, out| out.extend_from_slice(&x.to_le_bytes())),
            Storage::F32(v) => self.put_values(v, |x, out| out.extend_from_slice(&x.to_le_bytes())),
            Storage::F16(v) => self.put_values(v, |x, out| out.extend_from_slice(&x.to_le_bytes())),
            Storage::I8(v) => self.put_values(v, |x, out| out.push(*x as u8)),
        }
    }

    /// f32 record straight from a tensor, without an intermediate copy.
    fn put_f32_record(&mut self, name: &str, t: &Tensor<f32>) -> io::Result<()> {
        self.put_str(name)?;
        self.put(&[dtype_tag(DType::F32), t.shape().rank() as u8])?;
        for &d in t.dims() {
            self.put_u32(d)?;
        }
        self.put(&((t.len() * 4) as u64).to_le_bytes())?;
        self.put_values(t.data(), |x, out| out.extend_from_slice(&x.to_le_bytes()))
    }

    fn put_values<T>(&mut self, values: &[T], enc: impl Fn(&T, &mut Vec<u8>)) -> io::Result<()> {
        let mut buf = Vec::with_capacity(64 * 1024);
        for chunk in values.chunks(8192) {
            buf.clear();
            for v in chunk {
                enc(v, &mut buf);
            }
            self.put(&buf)?;
        }
        Ok(())
    }
}

/// Serializes a checkpoint; returns the number of bytes written.
pub fn write_checkpoint<W: Write>(w: W, ckpt: &Checkpoint) -> io::Result<u64> {
    let mut out = CountingWriter { inner: w, written: 0 };
    out.put_header(KIND_CHECKPOINT, Precision::F32, ckpt.graph.config())?;
    out.put(&ckpt.epoch.to_le_bytes())?;
    out.put(&ckpt.best_val_loss.to_le_bytes())?;
    out.put(&ckpt.optimizer.step.to_le_bytes())?;
    let params = ckpt.graph.params();
    out.put_u32(params.len() * 3)?;
    for (i, (name, p)) in PARAM_NAMES.iter().zip(params).enumerate() {
        out.put_f32_record(name, p)?;
        out.put_f32_record(&format!("{name}.adam_m"), &ckpt.optimizer.m[i])?;
        out.put_f32_record(&format!("{name}.adam_v"), &ckpt.optimizer.v[i])?;
    }
    out.inner.flush()?;
    Ok(out.written)
}

/// Serializes a deployed model; returns the number of bytes written.
pub fn write_deployed<W: Write>(w: W, model: &DeployedModel) -> io::Result<u64> {
    let mut out = CountingWriter { inner: w, written: 0 };
    out.put_header(KIND_DEPLOYED, model.precision(), model.config())?;
    let acts = model.activation_qparams();
    out.put(&(acts.len() as u16).to_le_bytes())?;
    for (name, q) in acts {
        out.put_str(name)?;
        out.put(&q.scale.to_le_bytes())?;
        out.put(&q.zero_point.to_le_bytes())?;
    }
    out.put_u32(model.tensors().len())?;
    for (name, t) in model.tensors() {
        out.put_record(name, t)?;
    }
    out.inner.flush()?;
    Ok(out.written)
}

fn write_atomically(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> io::Result<u64>) -> Result<u64> {
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = BufWriter::with_capacity(1 << 20, file);
    let n = body(&mut w).map_err(|e| Error::io(&tmp, e))?;
    w.into_inner()
        .map_err(|e| Error::io(&tmp, e.into_error()))?
        .sync_all()
        .map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(n)
}

/// Writes `ckpt` to `path` (via a temporary file and rename).
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<u64> {
    write_atomically(path.as_ref(), |w| write_checkpoint(w, ckpt))
}

pub fn save_deployed(model: &DeployedModel, path: impl AsRef<Path>) -> Result<u64> {
    write_atomically(path.as_ref(), |w| write_deployed(w, model))
}

struct FormatReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> FormatReader<R> {
    fn take(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let mut filled = 0;
        while filled < buf.len() {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    return Err(Error::format(
                        self.offset + filled as u64,
                        format!("truncated while reading {what}"),
                    ))
                }
                Ok(n) => filled += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => {
                    return Err(Error::format(
                        self.offset + filled as u64,
                        format!("read failed in {what}: {e}"),
                    ))
                }
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.take(&mut b, what)?;
        Ok(b)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.array::<1>(what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn i32(&mut self, what: &str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.array(what)?))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array(what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let at = self.offset;
        let len = self.u16(what)? as usize;
        let mut b = vec![0u8; len];
        self.take(&mut b, what)?;
        String::from_utf8(b).map_err(|_| Error::format(at, format!("{what} is not UTF-8")))
    }

    fn expect_eof(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b) {
            Ok(0) => Ok(()),
            _ => Err(Error::format(self.offset, "trailing bytes after last record")),
        }
    }

    fn header(&mut self) -> Result<(u8, Precision, GraphConfig)> {
        let magic = self.array::<4>("magic")?;
        if &magic != MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}")));
        }
        let version = self.u16("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::format(
                4,
                format!("unsupported version {version} (expected {FORMAT_VERSION})"),
            ));
        }
        let kind = self.u8("kind")?;
        if kind != KIND_CHECKPOINT && kind != KIND_DEPLOYED {
            return Err(Error::format(6, format!("unknown artifact kind {kind}")));
        }
        let precision = match self.u8("precision")? {
            0 => Precision::F32,
            1 => Precision::F16,
            2 => Precision::I8,
            p => return Err(Error::format(7, format!("unknown precision tag {p}"))),
        };
        let mut dims = [0usize; 5];
        for d in dims.iter_mut() {
            *d = self.u32("graph config")? as usize;
        }
        let mut dropout = [0f32; 3];
        for r in dropout.iter_mut() {
            *r = self.f32("dropout rate")?;
        }
        let config = GraphConfig {
            input_size: dims[0],
            num_classes: dims[1],
            conv1_filters: dims[2],
            conv2_filters: dims[3],
            dense_units: dims[4],
            dropout,
        };
        config
            .validate()
            .map_err(|e| Error::format(8, format!("invalid graph config: {e}")))?;
        Ok((kind, precision, config))
    }

    fn record(&mut self) -> Result<(String, StoredTensor)> {
        let start = self.offset;
        let name = self.string("record name")?;
        let dtype = match self.u8("dtype")? {
            0 => DType::F64,
            1 => DType::F32,
            2 => DType::F16,
            3 => DType::I8,
            t => return Err(Error::format(self.offset - 1, format!("unknown dtype tag {t}"))),
        };
        let rank = self.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32("extent")? as usize);
        }
        let shape = Shape::new(dims)
            .map_err(|e| Error::format(start, format!("record '{name}': {e}")))?;
        let quant = if dtype == DType::I8 {
            let at = self.offset;
            let scale = self.f32("scale")?;
            let zero_point = self.i32("zero point")?;
            Some(
                QuantParams::new(scale, zero_point)
                    .map_err(|e| Error::format(at, format!("record '{name}': {e}")))?,
            )
        } else {
            None
        };
        let len_at = self.offset;
        let len = self.u64("payload length")?;
        let expect = (shape.numel() * dtype.size_bytes()) as u64;
        if len != expect {
            return Err(Error::format(
                len_at,
                format!("record '{name}' payload is {len} bytes, shape {shape} needs {expect}"),
            ));
        }
        let mut raw = vec![0u8; len as usize];
        self.take(&mut raw, "tensor payload")?;
        let storage = match dtype {
            DType::F64 => Storage::F64(
                raw.chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
            DType::F32 => Storage::F32(
                raw.chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
            DType::F16 => Storage::F16(
                raw.chunks_exact(2)
                    .map(|b| f16::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
            DType::I8 => Storage::I8(raw.into_iter().map(|b| b as i8).collect()),
        };
        let t = StoredTensor::new(shape, storage, quant)
            .map_err(|e| Error::format(start, format!("record '{name}': {e}")))?;
        Ok((name, t))
    }

    fn checkpoint_body(&mut self, config: GraphConfig) -> Result<Checkpoint> {
        let epoch = self.u32("epoch")?;
        let best_val_loss = self.f64("best validation loss")?;
        let step = self.u64("adam step")?;
        let count_at = self.offset;
        let count = self.u32("record count")? as usize;
        if count != PARAM_NAMES.len() * 3 {
            return Err(Error::format(
                count_at,
                format!("checkpoint must hold {} records, found {count}", PARAM_NAMES.len() * 3),
            ));
        }
        let (mut params, mut m, mut v) = (Vec::new(), Vec::new(), Vec::new());
        for name in PARAM_NAMES {
            for (suffix, dst) in [("", &mut params), (".adam_m", &mut m), (".adam_v", &mut v)] {
                let at = self.offset;
                let (got, t) = self.record()?;
                let want = format!("{name}{suffix}");
                if got != want {
                    return Err(Error::format(at, format!("expected record '{want}', found '{got}'")));
                }
                if t.dtype() != DType::F32 {
                    return Err(Error::format(at, format!("checkpoint record '{got}' is {}", t.dtype())));
                }
                dst.push(t.to_f32());
            }
        }
        for (p, (a, b)) in params.iter().zip(m.iter().zip(&v)) {
            if p.shape() != a.shape() || p.shape() != b.shape() {
                return Err(Error::format(count_at, "Adam moments not congruent with weights"));
            }
        }
        let graph = ModelGraph::from_param_tensors(config, params)
            .map_err(|e| Error::format(count_at, e.to_string()))?;
        Ok(Checkpoint {
            graph,
            optimizer: AdamState { step, m, v },
            epoch,
            best_val_loss,
        })
    }

    fn deployed_body(&mut self, config: GraphConfig, precision: Precision) -> Result<DeployedModel> {
        let n_acts = self.u16("activation count")? as usize;
        let mut acts = Vec::with_capacity(n_acts);
        for _ in 0..n_acts {
            let name = self.string("activation name")?;
            let at = self.offset;
            let scale = self.f32("activation scale")?;
            let zp = self.i32("activation zero point")?;
            let q = QuantParams::new(scale, zp).map_err(|e| Error::format(at, e.to_string()))?;
            acts.push((name, q));
        }
        let count_at = self.offset;
        let count = self.u32("record count")? as usize;
        if count != PARAM_NAMES.len() {
            return Err(Error::format(
                count_at,
                format!("deployed model must hold {} records, found {count}", PARAM_NAMES.len()),
            ));
        }
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            tensors.push(self.record()?);
        }
        DeployedModel::new(config, precision, tensors, acts)
            .map_err(|e| Error::format(count_at, e.to_string()))
    }
}

/// Parses either artifact kind from a byte stream.
pub fn read_artifact<R: Read>(r: R) -> Result<Artifact> {
    let mut rd = FormatReader { inner: r, offset: 0 };
    let (kind, precision, config) = rd.header()?;
    let artifact = if kind == KIND_CHECKPOINT {
        if precision != Precision::F32 {
            return Err(Error::format(7, "checkpoints are always f32"));
        }
        Artifact::Checkpoint(Box::new(rd.checkpoint_body(config)?))
    } else {
        Artifact::Deployed(Box::new(rd.deployed_body(config, precision)?))
    };
    rd.expect_eof()?;
    Ok(artifact)
}

pub fn load_artifact(path: impl AsRef<Path>) -> Result<Artifact> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_artifact(BufReader::with_capacity(1 << 20, f))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    match load_artifact(path)? {
        Artifact::Checkpoint(c) => Ok(*c),
        Artifact::Deployed(_) => Err(Error::format(6, "file is a deployed model, not a checkpoint")),
    }
}

pub fn load_deployed(path: impl AsRef<Path>) -> Result<DeployedModel> {
    match load_artifact(path)? {
        Artifact::Deployed(d) => Ok(*d),
        Artifact::Checkpoint(_) => Err(Error::format(6, "file is a checkpoint, not a deployed model")),
    }
}
