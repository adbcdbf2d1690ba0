//! Binary dataset and checkpoint files, and the CSV report writers.
//!
//! Both binary formats are little-endian and start with a 4-byte magic and
//! a `u32` version.
//!
//! Dataset (`EXPD`): `count, H, W` as `u32`, then `base_lo, base_hi, exp_lo,
//! exp_hi` as `u8`; each record is `H·W` pixel bytes (`round(p·255)`), the two
//! label bytes and `font_scale, noise_sigma, blur_sigma` as `f32`.
//!
//! Checkpoint (`EXPM`): a `u32`-length-prefixed architecture descriptor, a
//! `u32` tensor count, then every parameter tensor as `u32` rank, `u32` dims
//! and `f32` values. A trailing flag byte announces optional optimiser state:
//! `u64` step, `u64` epochs completed, the four Adam hyperparameters as
//! `f32`, then the first- and second-moment tensors in parameter order.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::datagen::{Dataset, Sample, SampleMeta};
use crate::error::{Error, Result};
use crate::eval::{Bucket, EvalReport};
use crate::nn::MultiOutputModel;
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::Tensor;
use crate::train::ResumeState;

pub use crate::train::write_history_csv;

pub const DATASET_MAGIC: [u8; 4] = *b"EXPD";
pub const DATASET_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"EXPM";
pub const CHECKPOINT_VERSION: u32 = 1;

const DATASET_HEADER_LEN: usize = 4 + 4 * 4 + 4;
/// Upper bound on tensor rank accepted from a checkpoint.
const MAX_RANK: u32 = 8;

/// Bounds-checked little-endian cursor; running out of bytes is a truncation.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Cursor { bytes, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "{} ends at byte {} while reading {n} bytes at offset {}",
                self.what,
                self.bytes.len(),
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64> {
        self.array().map(u64::from_le_bytes)
    }

    fn f32(&mut self) -> Result<f32> {
        self.array().map(f32::from_le_bytes)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn finish(&self) -> Result<()> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(Error::Malformed(format!("{n} trailing bytes after {}", self.what))),
        }
    }

    fn header(&mut self, magic: [u8; 4], version: u32) -> Result<()> {
        let found = self.array::<4>()?;
        if found != magic {
            return Err(Error::BadMagic { expected: magic, found });
        }
        let v = self.u32()?;
        if v != version {
            return Err(Error::VersionMismatch {
                expected: version,
                found: v,
            });
        }
        Ok(())
    }
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} does not fit in 32 bits")))
}

pub fn encode_dataset(data: &Dataset) -> Result<Vec<u8>> {
    let (h, w) = data.image_size;
    let mut out = Vec::with_capacity(DATASET_HEADER_LEN + data.len() * (h * w + 14));
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    for v in [data.len(), h, w] {
        out.extend_from_slice(&u32_of(v, "dataset dimension")?.to_le_bytes());
    }
    out.extend_from_slice(&[data.base_range.0, data.base_range.1, data.exp_range.0, data.exp_range.1]);
    for (i, s) in data.samples.iter().enumerate() {
        if s.image.shape() != [1, h, w] {
            return Err(Error::Sample {
                index: i as u64,
                source: Box::new(Error::shape("dataset record", format!("image {:?}, header {h}x{w}", s.image.shape()))),
            });
        }
        if s.base_label >= data.base_classes() || s.exp_label >= data.exp_classes() {
            return Err(Error::Sample {
                index: i as u64,
                source: Box::new(Error::InvalidArgument("label outside the declared range".into())),
            });
        }
        out.extend(s.image.data().iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
        out.extend_from_slice(&[s.base_label as u8, s.exp_label as u8]);
        for m in [s.meta.font_scale, s.meta.noise_sigma, s.meta.blur_sigma] {
            out.extend_from_slice(&m.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut c = Cursor::new(bytes, "dataset");
    c.header(DATASET_MAGIC, DATASET_VERSION)?;
    let count = c.u32()? as usize;
    let (h, w) = (c.u32()? as usize, c.u32()? as usize);
    let [base_lo, base_hi, exp_lo, exp_hi] = c.array::<4>()?;
    if base_lo > base_hi || exp_lo > exp_hi || h == 0 || w == 0 {
        return Err(Error::Malformed(format!(
            "header declares {h}x{w} images, base {base_lo}..={base_hi}, exponent {exp_lo}..={exp_hi}"
        )));
    }
    let record = h * w + 2 + 12;
    let available = c.remaining() / record;
    if available < count {
        return Err(Error::Truncated(format!("header declares {count} samples, file holds {available}")));
    }
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let pixels = c.take(h * w)?.iter().map(|&b| f32::from(b) / 255.0).collect();
        let (base_label, exp_label) = (c.u8()? as usize, c.u8()? as usize);
        if base_label > (base_hi - base_lo) as usize || exp_label > (exp_hi - exp_lo) as usize {
            return Err(Error::Malformed(format!("sample {i}: labels {base_label}/{exp_label} outside header ranges")));
        }
        let meta = SampleMeta {
            font_scale: c.f32()?,
            noise_sigma: c.f32()?,
            blur_sigma: c.f32()?,
        };
        samples.push(Sample {
            image: Tensor::from_vec(&[1, h, w], pixels)?,
            base_label,
            exp_label,
            meta,
        });
    }
    c.finish()?;
    Ok(Dataset {
        image_size: (h, w),
        base_range: (base_lo, base_hi),
        exp_range: (exp_lo, exp_hi),
        samples,
    })
}

pub fn write_dataset(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_dataset(data)?).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    decode_dataset(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Parameters plus optional state for resuming training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: MultiOutputModel,
    pub resume: Option<ResumeState>,
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    out.extend_from_slice(&u32_of(t.rank(), "tensor rank")?.to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&u32_of(d, "tensor dimension")?.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn get_tensor(c: &mut Cursor<'_>) -> Result<Tensor> {
    let rank = c.u32()?;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::Malformed(format!("tensor rank {rank}")));
    }
    let shape = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let len = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= c.remaining()))
        .ok_or_else(|| Error::Truncated(format!("tensor {shape:?} does not fit in the remaining bytes")))?;
    let data = c.take(len * 4)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    Tensor::from_vec(&shape, data).map_err(|_| Error::Malformed(format!("tensor shape {shape:?}")))
}

pub fn encode_checkpoint(model: &MultiOutputModel, resume: Option<&ResumeState>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let desc = model.descriptor();
    out.extend_from_slice(&u32_of(desc.len(), "descriptor length")?.to_le_bytes());
    out.extend_from_slice(desc.as_bytes());
    let params = model.params();
    out.extend_from_slice(&u32_of(params.len(), "tensor count")?.to_le_bytes());
    for p in &params {
        put_tensor(&mut out, p)?;
    }
    match resume {
        None => out.push(0),
        Some(state) => {
            let adam = &state.adam;
            if adam.m.len() != params.len() || adam.v.len() != params.len() {
                return Err(Error::ArchitectureMismatch("optimiser state does not match the model".into()));
            }
            out.push(1);
            out.extend_from_slice(&adam.step.to_le_bytes());
            out.extend_from_slice(&(state.epochs_completed as u64).to_le_bytes());
            let AdamConfig { lr, beta1, beta2, eps } = adam.config;
            for v in [lr, beta1, beta2, eps] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for t in adam.m.iter().chain(&adam.v) {
                put_tensor(&mut out, t)?;
            }
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor::new(bytes, "checkpoint");
    c.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let desc_len = c.u32()? as usize;
    let desc = std::str::from_utf8(c.take(desc_len)?)
        .map_err(|_| Error::Malformed("architecture descriptor is not UTF-8".into()))?;
    let mut model = MultiOutputModel::from_descriptor(desc)?;
    let count = c.u32()? as usize;
    let expected = model.params().len();
    if count != expected {
        return Err(Error::Malformed(format!("{count} tensors for an architecture with {expected}")));
    }
    let read_all = |c: &mut Cursor<'_>| (0..count).map(|_| get_tensor(c)).collect::<Result<Vec<_>>>();
    let params = read_all(&mut c)?;
    model
        .set_params(&params)
        .map_err(|e| Error::Malformed(format!("parameters disagree with the descriptor: {e}")))?;
    let resume = match c.u8()? {
        0 => None,
        1 => {
            let step = c.u64()?;
            let epochs_completed = c.u64()? as usize;
            let config = AdamConfig {
                lr: c.f32()?,
                beta1: c.f32()?,
                beta2: c.f32()?,
                eps: c.f32()?,
            };
            let m = read_all(&mut c)?;
            let v = read_all(&mut c)?;
            for (p, (a, b)) in params.iter().zip(m.iter().zip(&v)) {
                if p.shape() != a.shape() || p.shape() != b.shape() {
                    return Err(Error::Malformed("optimiser moments disagree with parameter shapes".into()));
                }
            }
            Some(ResumeState {
                adam: AdamState { config, step, m, v },
                epochs_completed,
            })
        }
        f => return Err(Error::Malformed(format!("optimiser-state flag {f}"))),
    };
    c.finish()?;
    Ok(Checkpoint { model, resume })
}

pub fn write_checkpoint(model: &MultiOutputModel, resume: Option<&ResumeState>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model, resume)?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Loads a checkpoint's parameters into an existing model of the same architecture.
pub fn load_into(model: &mut MultiOutputModel, path: impl AsRef<Path>) -> Result<Option<ResumeState>> {
    let ckpt = read_checkpoint(path)?;
    if ckpt.model.descriptor() != model.descriptor() {
        return Err(Error::ArchitectureMismatch(format!(
            "checkpoint holds\n{}but the model is\n{}",
            ckpt.model.descriptor(),
            model.descriptor()
        )));
    }
    *model = ckpt.model;
    Ok(ckpt.resume)
}

fn finish_csv<W: Write>(mut w: csv::Writer<W>) -> Result<()> {
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Sweep CSV: `attr,level,base_acc,exp_acc,joint_acc,mean_loss`.
pub fn write_sweep_csv<W: Write>(attribute: &str, rows: &[(f64, EvalReport)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["attr", "level", "base_acc", "exp_acc", "joint_acc", "mean_loss"])?;
    for (level, r) in rows {
        w.write_record([
            attribute.to_string(),
            level.to_string(),
            r.base_accuracy.to_string(),
            r.exp_accuracy.to_string(),
            r.joint_accuracy.to_string(),
            r.mean_loss.to_string(),
        ])?;
    }
    finish_csv(w)
}

/// Histogram CSV: `bucket,count`.
pub fn write_hist_csv<W: Write>(buckets: &[Bucket], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["bucket", "count"])?;
    for b in buckets {
        w.write_record([b.label(), b.count.to_string()])?;
    }
    finish_csv(w)
}

/// Report CSV: one `all` row followed by any bucket rows.
pub fn write_report_csv<W: Write>(report: &EvalReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scope", "count", "base_acc", "exp_acc", "joint_acc", "mean_loss"])?;
    w.write_record([
        "all".to_string(),
        report.count.to_string(),
        report.base_accuracy.to_string(),
        report.exp_accuracy.to_string(),
        report.joint_accuracy.to_string(),
        report.mean_loss.to_string(),
    ])?;
    for b in &report.buckets {
        let scope = Bucket { lo: b.lo, hi: b.hi, count: b.count }.label();
        w.write_record([
            format!("{}={scope}", b.attribute),
            b.count.to_string(),
            b.base_accuracy.to_string(),
            b.exp_accuracy.to_string(),
            b.joint_accuracy.to_string(),
            String::new(),
        ])?;
    }
    finish_csv(w)
}

/// Confusion CSV in long form: `head,true,predicted,count`, every cell listed.
pub fn write_confusion_csv<W: Write>(report: &EvalReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["head", "true", "predicted", "count"])?;
    for (head, m) in [("base", &report.base_confusion), ("exponent", &report.exp_confusion)] {
        for (t, row) in m.iter().enumerate() {
            for (p, n) in row.iter().enumerate() {
                w.write_record([head.to_string(), t.to_string(), p.to_string(), n.to_string()])?;
            }
        }
    }
    finish_csv(w)
}
