//! Versioned little-endian tensor container shared by `.bin`, `.qt` and
//! `.lorc` files.
//!
//! ```text
//! offset  size      field
//! 0       8         magic "FPQTENS\0"
//! 8       2         version (u16, currently 1)
//! 10      1         dtype tag: 1 = f64, 2 = f32, 3 = packed codes
//! 11      1         bits per element: 64, 32, 8 or 4
//! 12      1         ndim
//! 13      8*ndim    dims (u64 each)
//! ..      4         meta_len (u32)
//! ..      meta_len  JSON metadata (empty for plain tensors)
//! ..      ..        payload, row-major
//! end-4   4         CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! 4-bit codes are packed two per byte, low nibble first; an odd final code
//! leaves the high nibble zero. The full layout is described in
//! `docs/FORMAT.md`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lorc::LorcFactors;
use crate::quant::QuantizedTensor;
use crate::spec::{Granularity, QuantSpec, ScaleConstraint};
use crate::tensor::{checked_numel, Tensor};

pub const MAGIC: [u8; 8] = *b"FPQTENS\0";
pub const VERSION: u16 = 1;

const FIXED_HEADER: usize = 13;
const MAX_NDIM: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
    /// Unsigned codes of 4 or 8 bits.
    Codes(u8),
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F64 => 1,
            Dtype::F32 => 2,
            Dtype::Codes(_) => 3,
        }
    }

    fn bits(self) -> u8 {
        match self {
            Dtype::F64 => 64,
            Dtype::F32 => 32,
            Dtype::Codes(b) => b,
        }
    }

    fn from_header(tag: u8, bits: u8) -> Result<Self> {
        match (tag, bits) {
            (1, 64) => Ok(Dtype::F64),
            (2, 32) => Ok(Dtype::F32),
            (3, 4) | (3, 8) => Ok(Dtype::Codes(bits)),
            _ => Err(Error::Schema(format!(
                "unknown dtype tag {tag} with {bits}-bit elements"
            ))),
        }
    }

    /// Payload bytes for `n` elements.
    pub fn payload_len(self, n: usize) -> Result<usize> {
        let len = match self {
            Dtype::F64 => n.checked_mul(8),
            Dtype::F32 => n.checked_mul(4),
            Dtype::Codes(8) => Some(n),
            Dtype::Codes(_) => Some(n.div_ceil(2)),
        };
        len.ok_or_else(|| Error::DimensionOverflow(format!("{n} elements")))
    }
}

/// One decoded container before interpretation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawContainer {
    pub dtype: Dtype,
    pub dims: Vec<usize>,
    pub meta: Vec<u8>,
    pub payload: Vec<u8>,
}

pub fn encode_container(dtype: Dtype, dims: &[usize], meta: &[u8], payload: &[u8]) -> Result<Vec<u8>> {
    if dims.len() > MAX_NDIM {
        return Err(Error::DimensionOverflow(format!("{} dimensions", dims.len())));
    }
    let meta_len =
        u32::try_from(meta.len()).map_err(|_| Error::DimensionOverflow("metadata block over 4 GiB".into()))?;
    let mut out = Vec::with_capacity(FIXED_HEADER + 8 * dims.len() + 8 + meta.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype.tag());
    out.push(dtype.bits());
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&meta_len.to_le_bytes());
    out.extend_from_slice(meta);
    out.extend_from_slice(payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_container(bytes: &[u8]) -> Result<RawContainer> {
    if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 10 {
        return Err(Error::Checksum {
            stored: 0,
            computed: crc32fast::hash(bytes),
        });
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    if bytes.len() < FIXED_HEADER + 4 {
        return Err(Error::Checksum {
            stored: 0,
            computed: crc32fast::hash(bytes),
        });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let dtype = Dtype::from_header(body[10], body[11])?;
    let ndim = body[12] as usize;
    let mut cur = Cursor {
        buf: body,
        pos: FIXED_HEADER,
    };
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes"));
        dims.push(usize::try_from(d).map_err(|_| Error::DimensionOverflow(format!("dimension {d}")))?);
    }
    let n = checked_numel(&dims)?;
    let meta_len = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes")) as usize;
    let meta = cur.take(meta_len)?.to_vec();
    let expected = dtype.payload_len(n)?;
    let payload = cur.rest();
    if payload.len() != expected {
        return Err(Error::Schema(format!(
            "payload holds {} bytes, dims {:?} need {}",
            payload.len(),
            dims,
            expected
        )));
    }
    Ok(RawContainer {
        dtype,
        dims,
        meta,
        payload: payload.to_vec(),
    })
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Schema("header runs past the end of the file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn rest(&self) -> &'a [u8] {
        &self.buf[self.pos..]
    }
}

pub fn pack_codes(codes: &[u8], bits: u8) -> Vec<u8> {
    if bits == 8 {
        return codes.to_vec();
    }
    codes
        .chunks(2)
        .map(|p| (p[0] & 0x0f) | (p.get(1).copied().unwrap_or(0) & 0x0f) << 4)
        .collect()
}

pub fn unpack_codes(payload: &[u8], bits: u8, n: usize) -> Vec<u8> {
    if bits == 8 {
        return payload[..n].to_vec();
    }
    (0..n)
        .map(|i| {
            let b = payload[i / 2];
            if i % 2 == 0 {
                b & 0x0f
            } else {
                b >> 4
            }
        })
        .collect()
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---- plain tensors ----

pub fn encode_tensor(t: &Tensor, dtype: Dtype) -> Result<Vec<u8>> {
    let payload: Vec<u8> = match dtype {
        Dtype::F64 => t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
        Dtype::F32 => t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect(),
        Dtype::Codes(_) => return Err(Error::InvalidArgument("real tensors are stored as f64 or f32".into())),
    };
    encode_container(dtype, t.shape(), &[], &payload)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let raw = decode_container(bytes)?;
    if !raw.meta.is_empty() {
        let kind = serde_json::from_slice::<serde_json::Value>(&raw.meta)
            .ok()
            .and_then(|v| v.get("kind").and_then(|k| k.as_str()).map(str::to_owned))
            .unwrap_or_else(|| "unknown".into());
        return Err(Error::Schema(format!(
            "expected a plain tensor, found a `{kind}` container"
        )));
    }
    let data = match raw.dtype {
        Dtype::F64 => raw
            .payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        Dtype::F32 => raw
            .payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::Codes(_) => return Err(Error::Schema("plain tensor with packed-code payload".into())),
    };
    Tensor::new(raw.dims, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_file(path.as_ref(), &encode_tensor(t, Dtype::F64)?)
}

pub fn write_tensor_f32(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_file(path.as_ref(), &encode_tensor(t, Dtype::F32)?)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_tensor(&read_file(path.as_ref())?)
}

// ---- quantized tensors ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupMap {
    rows: usize,
    cols: usize,
    granularity: String,
    group_size: Option<usize>,
    scale_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstraintMeta {
    method: String,
    group_rows: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuantMeta {
    kind: String,
    spec: QuantSpec,
    scales: Vec<f64>,
    zero_points: Option<Vec<i32>>,
    group_map: GroupMap,
    scale_constraint: Option<ConstraintMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lorc: Option<String>,
}

/// A quantized tensor plus the optional path of its compensation factors.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantFile {
    pub tensor: QuantizedTensor,
    pub lorc: Option<String>,
}

pub fn encode_quantized(q: &QuantizedTensor, lorc: Option<&str>) -> Result<Vec<u8>> {
    let layout = q.layout();
    let spec = *q.spec();
    let meta = QuantMeta {
        kind: "quantized".into(),
        spec,
        scales: q.scales().to_vec(),
        zero_points: q.zero_points().map(|z| z.to_vec()),
        group_map: GroupMap {
            rows: layout.rows(),
            cols: layout.cols(),
            granularity: match spec.granularity {
                Granularity::PerTensor => "tensor",
                Granularity::PerToken => "token",
                Granularity::PerGroup(_) => "group",
            }
            .into(),
            group_size: match spec.granularity {
                Granularity::PerGroup(g) => Some(g),
                _ => None,
            },
            scale_count: layout.scale_count(),
        },
        scale_constraint: match spec.scale_constraint {
            ScaleConstraint::None => None,
            ScaleConstraint::M1 => Some(ConstraintMeta {
                method: "m1".into(),
                group_rows: None,
            }),
            ScaleConstraint::M2 { group_rows } => Some(ConstraintMeta {
                method: "m2".into(),
                group_rows: Some(group_rows),
            }),
        },
        lorc: lorc.map(str::to_owned),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Schema(e.to_string()))?;
    let bits = spec.bits();
    encode_container(Dtype::Codes(bits), q.shape(), &json, &pack_codes(q.codes(), bits))
}

pub fn decode_quantized(bytes: &[u8]) -> Result<QuantFile> {
    let raw = decode_container(bytes)?;
    let meta: QuantMeta =
        serde_json::from_slice(&raw.meta).map_err(|e| Error::Schema(format!("quantized header: {e}")))?;
    if meta.kind != "quantized" {
        return Err(Error::Schema(format!(
            "expected a `quantized` container, found `{}`",
            meta.kind
        )));
    }
    let bits = match raw.dtype {
        Dtype::Codes(b) => b,
        _ => return Err(Error::Schema("quantized payload must hold packed codes".into())),
    };
    if bits != meta.spec.bits() {
        return Err(Error::Schema(format!(
            "spec `{}` has {}-bit codes but the payload stores {bits}-bit elements",
            meta.spec,
            meta.spec.bits()
        )));
    }
    check_group_map(&meta, &raw.dims)?;
    let n = checked_numel(&raw.dims)?;
    let codes = unpack_codes(&raw.payload, bits, n);
    let tensor = QuantizedTensor::from_parts(meta.spec, raw.dims, codes, meta.scales, meta.zero_points).map_err(
        |e| match e {
            Error::Corrupted(m) => Error::Schema(m),
            other => other,
        },
    )?;
    Ok(QuantFile {
        tensor,
        lorc: meta.lorc,
    })
}

fn check_group_map(meta: &QuantMeta, dims: &[usize]) -> Result<()> {
    let spec = &meta.spec;
    let layout = crate::quant::GroupLayout::new(dims, spec.granularity)?;
    let gm = &meta.group_map;
    let expected_size = match spec.granularity {
        Granularity::PerGroup(g) => Some(g),
        _ => None,
    };
    if gm.rows != layout.rows()
        || gm.cols != layout.cols()
        || gm.scale_count != layout.scale_count()
        || gm.group_size != expected_size
    {
        return Err(Error::Schema(format!(
            "group map {gm:?} disagrees with spec `{spec}` and dims {dims:?}"
        )));
    }
    let constraint = match &meta.scale_constraint {
        None => ScaleConstraint::None,
        Some(c) => match (c.method.as_str(), c.group_rows) {
            ("m1", None) => ScaleConstraint::M1,
            ("m2", Some(group_rows)) => ScaleConstraint::M2 { group_rows },
            _ => return Err(Error::Schema(format!("bad scale constraint block {c:?}"))),
        },
    };
    if constraint != spec.scale_constraint {
        return Err(Error::Schema(format!(
            "scale constraint block says {constraint}, spec says {}",
            spec.scale_constraint
        )));
    }
    Ok(())
}

pub fn write_quantized(path: impl AsRef<Path>, q: &QuantizedTensor) -> Result<()> {
    write_file(path.as_ref(), &encode_quantized(q, None)?)
}

pub fn write_quantized_with_lorc(path: impl AsRef<Path>, q: &QuantizedTensor, lorc: &str) -> Result<()> {
    write_file(path.as_ref(), &encode_quantized(q, Some(lorc))?)
}

pub fn read_quantized(path: impl AsRef<Path>) -> Result<QuantizedTensor> {
    read_quant_file(path).map(|f| f.tensor)
}

pub fn read_quant_file(path: impl AsRef<Path>) -> Result<QuantFile> {
    decode_quantized(&read_file(path.as_ref())?)
}

// ---- low-rank factors ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LorcMeta {
    kind: String,
    rank: usize,
    out: usize,
    #[serde(rename = "in")]
    inp: usize,
    captured_energy: f64,
}

/// Payload is an `r x (out + in)` f64 matrix whose row `k` is column `k` of
/// `left` followed by row `k` of `right`.
pub fn encode_lorc(f: &LorcFactors) -> Result<Vec<u8>> {
    let (r, m, n) = (f.rank(), f.out_features(), f.in_features());
    let meta = LorcMeta {
        kind: "lorc".into(),
        rank: r,
        out: m,
        inp: n,
        captured_energy: f.captured_energy(),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Schema(e.to_string()))?;
    let left = f.left().data();
    let mut payload = Vec::with_capacity(r * (m + n) * 8);
    for k in 0..r {
        for i in 0..m {
            payload.extend_from_slice(&left[i * r + k].to_le_bytes());
        }
        for v in f.right().row(k) {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    encode_container(Dtype::F64, &[r, m + n], &json, &payload)
}

pub fn decode_lorc(bytes: &[u8]) -> Result<LorcFactors> {
    let raw = decode_container(bytes)?;
    let meta: LorcMeta = serde_json::from_slice(&raw.meta).map_err(|e| Error::Schema(format!("lorc header: {e}")))?;
    if meta.kind != "lorc" {
        return Err(Error::Schema(format!(
            "expected a `lorc` container, found `{}`",
            meta.kind
        )));
    }
    if raw.dtype != Dtype::F64 {
        return Err(Error::Schema("lorc payload must be f64".into()));
    }
    let (r, m, n) = (meta.rank, meta.out, meta.inp);
    let width = m
        .checked_add(n)
        .ok_or_else(|| Error::DimensionOverflow("factor width".into()))?;
    if raw.dims != [r, width] {
        return Err(Error::Schema(format!(
            "dims {:?} do not match rank {r} with {m}x{n} factors",
            raw.dims
        )));
    }
    let vals: Vec<f64> = raw
        .payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut left = vec![0.0; m * r];
    let mut right = Vec::with_capacity(r * n);
    for k in 0..r {
        let row = &vals[k * width..(k + 1) * width];
        for i in 0..m {
            left[i * r + k] = row[i];
        }
        right.extend_from_slice(&row[m..]);
    }
    LorcFactors::from_parts(
        Tensor::new(vec![m, r], left)?,
        Tensor::new(vec![r, n], right)?,
        meta.captured_energy,
    )
    .map_err(|e| Error::Schema(e.to_string()))
}

pub fn write_lorc(path: impl AsRef<Path>, f: &LorcFactors) -> Result<()> {
    write_file(path.as_ref(), &encode_lorc(f)?)
}

pub fn read_lorc(path: impl AsRef<Path>) -> Result<LorcFactors> {
    decode_lorc(&read_file(path.as_ref())?)
}

// ---- CSV interop ----

/// Reads a headerless CSV of reals into a `[rows x cols]` tensor.
pub fn read_csv(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        if *cols.get_or_insert(record.len()) != record.len() {
            return Err(Error::Schema(format!(
                "{}: row {r} has {} fields, expected {}",
                path.display(),
                record.len(),
                cols.unwrap_or(0)
            )));
        }
        for field in record.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Schema(format!("{}: row {r}: `{field}` is not a number", path.display())))?;
            data.push(v);
        }
        rows += 1;
    }
    Tensor::new(vec![rows, cols.unwrap_or(0)], data)
}

/// Writes a tensor as CSV, one matrix row per line (leading axes collapsed).
/// Values use the shortest representation that parses back to the same bits.
pub fn write_csv(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    let (rows, _) = t.matrix_dims();
    for r in 0..rows {
        writer
            .write_record(t.row(r).iter().map(|v| v.to_string()))
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}
