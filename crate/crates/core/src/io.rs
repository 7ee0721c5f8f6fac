//! Binary tensor files, the checkpoint container, binary PPM images and
//! atomic file writes. All integers are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::KvMap;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::{Scalar, Tensor};
use crate::params::ParamTree;
use crate::trainer::{OptimizerState, TrainConfig, Trainer};

pub const TENSOR_MAGIC: &[u8; 4] = b"SFGT";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SFGC";
pub const TENSOR_VERSION: u8 = 1;
pub const CHECKPOINT_VERSION: u8 = 1;

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return format_err(format!("unexpected end of data at byte {} (wanted {n} more)", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn dtype_size(tag: u8) -> Result<usize> {
    match tag {
        1 => Ok(4),
        2 => Ok(8),
        t => format_err(format!("unknown dtype tag {t}")),
    }
}

/// Appends the TensorFile encoding of `t` to `out`.
pub fn encode_tensor_into<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) -> Result<()> {
    if t.dims().len() > u8::MAX as usize {
        return format_err(format!("{} dims do not fit the header", t.dims().len()));
    }
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&[TENSOR_VERSION, T::DTYPE_TAG, t.dims().len() as u8, 0]);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        match T::DTYPE_TAG {
            1 => out.extend_from_slice(&v.to_f32().unwrap().to_le_bytes()),
            _ => out.extend_from_slice(&v.as_f64().to_le_bytes()),
        }
    }
    Ok(())
}

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + 8 * t.dims().len() + 8 * t.len());
    encode_tensor_into(t, &mut out)?;
    Ok(out)
}

fn decode_tensor_from<T: Scalar>(r: &mut Reader) -> Result<Tensor<T>> {
    if r.take(4)? != TENSOR_MAGIC {
        return format_err("bad tensor magic");
    }
    let version = r.u8()?;
    if version != TENSOR_VERSION {
        return format_err(format!("unsupported tensor version {version}"));
    }
    let tag = r.u8()?;
    let size = dtype_size(tag)?;
    if tag != T::DTYPE_TAG {
        return format_err(format!("tensor holds dtype {tag}, expected {} ({})", T::DTYPE_TAG, T::NAME));
    }
    let ndim = r.u8()? as usize;
    r.u8()?;
    let dims: Vec<usize> = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
    let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let Some(n) = n.filter(|n| n.checked_mul(size).is_some_and(|b| b <= r.buf.len() - r.pos)) else {
        return format_err(format!("payload for dims {dims:?} is truncated"));
    };
    let bytes = r.take(n * size)?;
    let data = bytes
        .chunks_exact(size)
        .map(|c| match size {
            4 => T::from(f32::from_le_bytes(c.try_into().unwrap())).unwrap(),
            _ => T::of(f64::from_le_bytes(c.try_into().unwrap())),
        })
        .collect();
    Tensor::new(&dims, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn decode_tensor<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut r = Reader::new(bytes);
    let t = decode_tensor_from(&mut r)?;
    if r.pos != bytes.len() {
        return format_err(format!("{} trailing bytes after tensor", bytes.len() - r.pos));
    }
    Ok(t)
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::Usage(format!("{} is not a file path", path.display())))?;
    let tmp: PathBuf = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    atomic_write(path, &encode_tensor(t)?)
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    decode_tensor(&fs::read(path)?)
}

/// Header text plus named tensors, kept sorted by name.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub header: KvMap,
    pub entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        let text = self.header.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            if name.len() > u16::MAX as usize {
                return format_err(format!("parameter name too long: {name}"));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            encode_tensor_into(t, &mut out)?;
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return format_err("bad checkpoint magic");
        }
        let version = r.u8()?;
        if version != CHECKPOINT_VERSION {
            return format_err(format!("unsupported checkpoint version {version}"));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format("header is not UTF-8".into()))?;
        let header = KvMap::parse(text)?;
        let count = r.u32()? as usize;
        let mut entries = BTreeMap::new();
        let mut prev: Option<String> = None;
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
                .to_string();
            if prev.as_ref().is_some_and(|p| *p >= name) {
                return format_err(format!("entry names not strictly sorted at {name:?}"));
            }
            let t = decode_tensor_from(&mut r)?;
            prev = Some(name.clone());
            entries.insert(name, t);
        }
        if r.pos != bytes.len() {
            return format_err(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos));
        }
        Ok(Self { header, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

const TRAIN_PREFIX: &str = "train.";
const OPT_M: &str = "optim.m.";
const OPT_V: &str = "optim.v.";

fn model_entries<T: Scalar>(model: &Model<T>) -> BTreeMap<String, Tensor<T>> {
    let mut entries = BTreeMap::new();
    model.net.visit("", &mut |name, t| {
        entries.insert(name, t.clone());
    });
    entries
}

pub fn model_checkpoint<T: Scalar>(model: &Model<T>) -> Checkpoint<T> {
    Checkpoint { header: model.config.to_kv(), entries: model_entries(model) }
}

/// Copies checkpoint tensors into a freshly built model of the embedded
/// config; names must match exactly.
pub fn model_from_checkpoint<T: Scalar>(ck: &Checkpoint<T>) -> Result<Model<T>> {
    let mut header = KvMap::new();
    for key in ck.header.keys().filter(|k| !k.starts_with(TRAIN_PREFIX)) {
        header.set(key, ck.header.raw(key).unwrap());
    }
    let config = ModelConfig::from_kv(&header)?;
    let mut model = crate::model::build_model::<T>(&config)?;
    let expected = model.param_names();
    let stored: Vec<&String> = ck.entries.keys().filter(|k| !k.starts_with("optim.")).collect();
    let missing: Vec<&String> = expected.iter().filter(|n| !ck.entries.contains_key(*n)).collect();
    let unknown: Vec<&&String> = stored.iter().filter(|n| !expected.contains(n)).collect();
    if !missing.is_empty() || !unknown.is_empty() {
        let mut msg = String::from("checkpoint parameters do not match the model");
        for m in &missing {
            msg += &format!("\n  missing: {m}");
        }
        for u in &unknown {
            msg += &format!("\n  unknown: {u}");
        }
        return format_err(msg);
    }
    let mut err = None;
    model.net.visit_mut("", &mut |name, t| {
        let src = &ck.entries[&name];
        if src.dims() != t.dims() {
            err.get_or_insert(format!("{name}: stored {:?}, model {:?}", src.dims(), t.dims()));
        } else {
            *t = src.clone();
        }
    });
    match err {
        Some(e) => format_err(e),
        None => Ok(model),
    }
}

pub fn save_model<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    model_checkpoint(model).save(path)
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<Model<T>> {
    model_from_checkpoint(&load_checkpoint_as(path)?)
}

/// Reads a checkpoint stored in either precision and converts it to `T`.
pub fn load_checkpoint_as<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path)?;
    let native = Checkpoint::<T>::decode(&bytes);
    if native.is_ok() {
        return native;
    }
    let cast = |ck: Checkpoint<_>| Checkpoint {
        header: ck.header,
        entries: ck.entries.into_iter().map(|(k, v): (String, Tensor<f64>)| (k, v.cast())).collect(),
    };
    if let Ok(ck) = Checkpoint::<f64>::decode(&bytes) {
        return Ok(cast(ck));
    }
    if let Ok(ck) = Checkpoint::<f32>::decode(&bytes) {
        return Ok(Checkpoint {
            header: ck.header,
            entries: ck.entries.into_iter().map(|(k, v)| (k, v.cast())).collect(),
        });
    }
    native
}

/// Model, optimizer moments, step and training config in one container.
pub fn trainer_checkpoint<T: Scalar>(tr: &Trainer<T>) -> Checkpoint<T> {
    let mut ck = model_checkpoint(&tr.model);
    for (k, v) in [(OPT_M, &tr.opt.m), (OPT_V, &tr.opt.v)] {
        for (name, t) in v {
            ck.entries.insert(format!("{k}{name}"), t.clone());
        }
    }
    let tc = tr.config.to_kv();
    for key in tc.keys() {
        ck.header.set(&format!("{TRAIN_PREFIX}{key}"), tc.raw(key).unwrap());
    }
    ck.header.set("train.step", tr.step);
    ck.header.set("train.opt_step", tr.opt.step);
    ck
}

pub fn trainer_from_checkpoint<T: Scalar>(ck: &Checkpoint<T>) -> Result<Trainer<T>> {
    let model = model_from_checkpoint(ck)?;
    let mut tc = KvMap::new();
    for key in ck.header.keys() {
        if let Some(k) = key.strip_prefix(TRAIN_PREFIX) {
            if k != "step" && k != "opt_step" {
                tc.set(k, ck.header.raw(key).unwrap());
            }
        }
    }
    let config = TrainConfig::from_kv(&tc)?;
    let mut opt = OptimizerState::<T> { step: ck.header.get_or("train.opt_step", 0u64)?, ..Default::default() };
    for (name, t) in &ck.entries {
        if let Some(n) = name.strip_prefix(OPT_M) {
            opt.m.insert(n.to_string(), t.clone());
        } else if let Some(n) = name.strip_prefix(OPT_V) {
            opt.v.insert(n.to_string(), t.clone());
        }
    }
    let mut tr = Trainer::new(model, config)?;
    tr.opt = opt;
    tr.step = ck.header.get_or("train.step", 0usize)?;
    Ok(tr)
}

/// Binary PPM (P6, maxval 255) → [3, H, W] in [0, 1].
pub fn decode_ppm<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return format_err("truncated PPM header");
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    if fields[0] != "P6" {
        return format_err(format!("not a binary PPM (magic {:?})", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM header field {s:?}")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return format_err(format!("only maxval 255 is supported, got {maxval}"));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return format_err("truncated PPM header");
    }
    pos += 1;
    let n = w * h * 3;
    if bytes.len() - pos < n {
        return format_err(format!("PPM payload truncated: {} of {n} bytes", bytes.len() - pos));
    }
    let px = &bytes[pos..pos + n];
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, rest) = (i / (h * w), i % (h * w));
        T::of(px[rest * 3 + c] as f64 / 255.0)
    }))
}

/// [3, H, W] in [0, 1] → P6 bytes; values are clamped and rounded half-up.
pub fn encode_ppm<T: Scalar>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let d = img.dims();
    if d.len() != 3 || d[0] != 3 {
        return Err(Error::Shape(format!("PPM needs [3, H, W], got {d:?}")));
    }
    let (h, w) = (d[1], d[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for p in 0..h * w {
        for c in 0..3 {
            out.push(to_u8(img.data()[c * h * w + p].as_f64()));
        }
    }
    Ok(out)
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor().min(255.0) as u8
}

pub fn read_ppm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    decode_ppm(&fs::read(path)?)
}

pub fn write_ppm<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    atomic_write(path, &encode_ppm(img)?)
}

/// `.ppm` for 3 bands, otherwise a tensor file plus a `.bands` note.
pub fn write_image<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    if img.dims().len() == 3 && img.dims()[0] == 3 && path.extension().is_some_and(|e| e == "ppm") {
        return write_ppm(path, img);
    }
    write_tensor(path, img)?;
    let note = format!("bands = {}\n", img.dims().first().copied().unwrap_or(0));
    atomic_write(&path.with_extension("bands"), note.as_bytes())
}

pub fn read_image<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(TENSOR_MAGIC) {
        let t: Tensor<f64> = decode_tensor(&bytes).or_else(|_| decode_tensor::<f32>(&bytes).map(|t| t.cast()))?;
        if t.dims().len() != 3 {
            return format_err(format!("{}: image tensors are [bands, H, W], got {:?}", path.display(), t.dims()));
        }
        Ok(t.cast())
    } else {
        decode_ppm(&bytes)
    }
}

/// Image files in `dir` (`.ppm`, `.sfgt`), sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "ppm" || e == "sfgt"))
        .collect();
    v.sort();
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_header_layout() {
        let t = Tensor::<f32>::from_vec(&[2, 1], vec![1.0, -2.5]);
        let b = encode_tensor(&t).unwrap();
        assert_eq!(&b[..8], b"SFGT\x01\x01\x02\x00");
        assert_eq!(&b[8..16], &2u64.to_le_bytes());
        assert_eq!(b.len(), 8 + 16 + 8);
        assert_eq!(decode_tensor::<f32>(&b).unwrap(), t);
        assert!(decode_tensor::<f64>(&b).is_err());
        assert!(decode_tensor::<f32>(&b[..b.len() - 1]).is_err());
    }

    #[test]
    fn ppm_header_with_comment() {
        let mut bytes = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 128, 255]);
        let img = decode_ppm::<f64>(&bytes).unwrap();
        assert_eq!(img.dims(), &[3, 1, 2]);
        assert_eq!(img.at(&[0, 0, 0]), 1.0);
        assert_eq!(img.at(&[1, 0, 1]), 128.0 / 255.0);
        assert!(decode_ppm::<f64>(&bytes[..bytes.len() - 2]).is_err());
        assert!(decode_ppm::<f64>(b"P3\n1 1\n255\n").is_err());
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(to_u8(0.5 / 255.0), 1);
        assert_eq!(to_u8(1.49 / 255.0), 1);
        assert_eq!(to_u8(2.0), 255);
        assert_eq!(to_u8(-1.0), 0);
    }
}
