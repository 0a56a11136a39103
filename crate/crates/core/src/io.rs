//! Binary artifact formats and atomic file output.
//!
//! `FLD1`: magic, u32 ndim (= 2), u32 dims `[ny, nx]`, u8 mask flag, f64
//! values row-major, then one byte per cell when masked. All little-endian.
//! `FST1`: magic, u32 count, then `count` FLD1 records back to back.
//!
//! Checkpoints and bases use a magic tag, a u32-prefixed JSON header holding
//! only integers and enums, f64 payload sections and a SHA-256 trailer over
//! everything before it.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{MlpConfig, MlpParams};
use crate::diffusion::{DiffusionModel, NoiseSchedule, PosteriorVariance};
use crate::error::{Error, Result};
use crate::field::Field2D;
use crate::linalg::Mat;
use crate::pod::{BasisKind, CoeffStandardizer, LatentBasis};

pub const FIELD_MAGIC: &[u8; 4] = b"FLD1";
pub const STACK_MAGIC: &[u8; 4] = b"FST1";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PSRCKPT1";
pub const BASIS_MAGIC: &[u8; 8] = b"PSRBASE1";

/// Write to a sibling temporary file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
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

pub fn sha256_hex(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_existing(path)?))
}

/// Read a prerequisite, mapping "not found" to [`Error::MissingArtifact`].
pub fn read_existing(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.to_path_buf())
        } else {
            Error::Io(e)
        }
    })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Self { buf, pos: 0, path }
    }

    fn corrupt(&self, why: impl Into<String>) -> Error {
        Error::corrupt(self.path, why)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.corrupt(format!(
                "truncated: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, want: &[u8]) -> Result<()> {
        let got = self.take(want.len())?;
        if got != want {
            return Err(self.corrupt(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(want)
            )));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| self.corrupt("length overflow"))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.corrupt(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    out.reserve(v.len() * 8);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn encode_field_into(out: &mut Vec<u8>, f: &Field2D) -> Result<()> {
    out.extend_from_slice(FIELD_MAGIC);
    put_u32(out, 2)?;
    put_u32(out, f.ny())?;
    put_u32(out, f.nx())?;
    out.push(f.mask().is_some() as u8);
    put_f64s(out, f.values());
    if let Some(m) = f.mask() {
        out.extend(m.iter().map(|&b| b as u8));
    }
    Ok(())
}

fn decode_field(r: &mut Reader<'_>) -> Result<Field2D> {
    r.magic(FIELD_MAGIC)?;
    let ndim = r.u32()?;
    if ndim != 2 {
        return Err(r.corrupt(format!("ndim {ndim}, expected 2")));
    }
    let ny = r.u32()? as usize;
    let nx = r.u32()? as usize;
    if nx == 0 || ny == 0 {
        return Err(r.corrupt(format!("empty grid {nx}x{ny}")));
    }
    let flag = r.u8()?;
    if flag > 1 {
        return Err(r.corrupt(format!("mask flag {flag}")));
    }
    let n = nx
        .checked_mul(ny)
        .ok_or_else(|| r.corrupt("grid size overflow"))?;
    let values = r.f64s(n)?;
    let f = Field2D::new(nx, ny, values).map_err(|e| r.corrupt(e.to_string()))?;
    if flag == 1 {
        let bytes = r.take(n)?;
        if bytes.iter().any(|&b| b > 1) {
            return Err(r.corrupt("mask byte other than 0/1"));
        }
        let mask = bytes.iter().map(|&b| b == 1).collect();
        return f.with_mask(mask).map_err(|e| r.corrupt(e.to_string()));
    }
    Ok(f)
}

pub fn encode_field(f: &Field2D) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(21 + f.len() * 9);
    encode_field_into(&mut out, f)?;
    Ok(out)
}

pub fn decode_field_bytes(bytes: &[u8], path: &Path) -> Result<Field2D> {
    let mut r = Reader::new(bytes, path);
    let f = decode_field(&mut r)?;
    r.finish()?;
    Ok(f)
}

pub fn encode_stack(fields: &[Field2D]) -> Result<Vec<u8>> {
    let per = fields.first().map_or(0, |f| 21 + f.len() * 9);
    let mut out = Vec::with_capacity(8 + per * fields.len());
    out.extend_from_slice(STACK_MAGIC);
    put_u32(&mut out, fields.len())?;
    for f in fields {
        encode_field_into(&mut out, f)?;
    }
    Ok(out)
}

pub fn decode_stack_bytes(bytes: &[u8], path: &Path) -> Result<Vec<Field2D>> {
    let mut r = Reader::new(bytes, path);
    r.magic(STACK_MAGIC)?;
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        out.push(decode_field(&mut r)?);
    }
    r.finish()?;
    Ok(out)
}

pub fn write_field(path: &Path, f: &Field2D) -> Result<()> {
    write_atomic(path, &encode_field(f)?)
}

pub fn read_field(path: &Path) -> Result<Field2D> {
    decode_field_bytes(&read_existing(path)?, path)
}

pub fn write_stack(path: &Path, fields: &[Field2D]) -> Result<()> {
    write_atomic(path, &encode_stack(fields)?)
}

pub fn read_stack(path: &Path) -> Result<Vec<Field2D>> {
    decode_stack_bytes(&read_existing(path)?, path)
}

fn seal(mut body: Vec<u8>) -> Vec<u8> {
    let d = Sha256::digest(&body);
    body.extend_from_slice(&d);
    body
}

fn unseal<'a>(bytes: &'a [u8], path: &Path) -> Result<&'a [u8]> {
    if bytes.len() < 32 {
        return Err(Error::corrupt(path, "shorter than checksum trailer"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != tail {
        return Err(Error::corrupt(path, "checksum mismatch"));
    }
    Ok(body)
}

fn put_header<T: Serialize>(out: &mut Vec<u8>, header: &T) -> Result<()> {
    let json = serde_json::to_vec(header).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    put_u32(out, json.len())?;
    out.extend_from_slice(&json);
    Ok(())
}

fn get_header<T: for<'de> Deserialize<'de>>(r: &mut Reader<'_>) -> Result<T> {
    let n = r.u32()? as usize;
    let raw = r.take(n)?;
    serde_json::from_slice(raw).map_err(|e| r.corrupt(format!("header: {e}")))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    denoiser: MlpConfig,
    variance: PosteriorVariance,
}

fn put_standardizer(out: &mut Vec<u8>, s: &CoeffStandardizer) {
    put_f64s(out, &s.mean);
    put_f64s(out, &s.std);
    put_f64s(out, &[s.floor]);
}

fn get_standardizer(r: &mut Reader<'_>, k: usize) -> Result<CoeffStandardizer> {
    let mean = r.f64s(k)?;
    let std = r.f64s(k)?;
    let floor = r.f64s(1)?[0];
    Ok(CoeffStandardizer { mean, std, floor })
}

pub fn encode_checkpoint(model: &DiffusionModel) -> Result<Vec<u8>> {
    let cfg = *model.denoiser.config();
    if model.target_std.k() != cfg.k || model.cond_std.k() != cfg.k {
        return Err(Error::Shape(
            "standardizer width differs from the denoiser's K".into(),
        ));
    }
    if model.schedule.t_total != cfg.t_total {
        return Err(Error::Shape(
            "schedule length differs from the denoiser's T".into(),
        ));
    }
    let mut out = Vec::with_capacity(64 + model.denoiser.as_slice().len() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_header(
        &mut out,
        &CheckpointHeader {
            denoiser: cfg,
            variance: model.variance,
        },
    )?;
    put_f64s(
        &mut out,
        &[model.schedule.beta_start, model.schedule.beta_end],
    );
    put_f64s(&mut out, model.denoiser.as_slice());
    put_standardizer(&mut out, &model.target_std);
    put_standardizer(&mut out, &model.cond_std);
    Ok(seal(out))
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<DiffusionModel> {
    let body = unseal(bytes, path)?;
    let mut r = Reader::new(body, path);
    r.magic(CHECKPOINT_MAGIC)?;
    let h: CheckpointHeader = get_header(&mut r)?;
    h.denoiser
        .validate()
        .map_err(|e| r.corrupt(e.to_string()))?;
    let betas = r.f64s(2)?;
    let schedule = NoiseSchedule::linear(h.denoiser.t_total, betas[0], betas[1])
        .map_err(|e| r.corrupt(e.to_string()))?;
    let params = r.f64s(h.denoiser.param_count())?;
    let denoiser =
        MlpParams::from_flat(h.denoiser, params).map_err(|e| r.corrupt(e.to_string()))?;
    let target_std = get_standardizer(&mut r, h.denoiser.k)?;
    let cond_std = get_standardizer(&mut r, h.denoiser.k)?;
    r.finish()?;
    Ok(DiffusionModel {
        schedule,
        denoiser,
        target_std,
        cond_std,
        variance: h.variance,
    })
}

pub fn write_checkpoint(path: &Path, model: &DiffusionModel) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model)?)
}

pub fn read_checkpoint(path: &Path) -> Result<DiffusionModel> {
    decode_checkpoint(&read_existing(path)?, path)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BasisHeader {
    kind: BasisKind,
    k: usize,
    spectrum: usize,
    nx: usize,
    ny: usize,
}

pub fn encode_basis(b: &LatentBasis) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(64 + (b.k() + 1) * b.dim() * 8);
    out.extend_from_slice(BASIS_MAGIC);
    put_header(
        &mut out,
        &BasisHeader {
            kind: b.kind,
            k: b.k(),
            spectrum: b.eigenvalues.len(),
            nx: b.mean.nx(),
            ny: b.mean.ny(),
        },
    )?;
    put_f64s(&mut out, &[b.total_variance]);
    put_f64s(&mut out, &b.eigenvalues);
    put_f64s(&mut out, b.mean.values());
    put_f64s(&mut out, b.modes_t().as_slice());
    Ok(seal(out))
}

pub fn decode_basis(bytes: &[u8], path: &Path) -> Result<LatentBasis> {
    let body = unseal(bytes, path)?;
    let mut r = Reader::new(body, path);
    r.magic(BASIS_MAGIC)?;
    let h: BasisHeader = get_header(&mut r)?;
    let d =
        h.nx.checked_mul(h.ny)
            .filter(|&d| d > 0)
            .ok_or_else(|| r.corrupt("bad grid"))?;
    let total = r.f64s(1)?[0];
    let eig = r.f64s(h.spectrum)?;
    let mean = Field2D::new(h.nx, h.ny, r.f64s(d)?).map_err(|e| r.corrupt(e.to_string()))?;
    let modes = Mat::from_vec(h.k, d, r.f64s(h.k * d)?).map_err(|e| r.corrupt(e.to_string()))?;
    r.finish()?;
    LatentBasis::from_parts(h.kind, mean, modes, eig, total).map_err(|e| r.corrupt(e.to_string()))
}

pub fn write_basis(path: &Path, b: &LatentBasis) -> Result<()> {
    write_atomic(path, &encode_basis(b)?)
}

pub fn read_basis(path: &Path) -> Result<LatentBasis> {
    decode_basis(&read_existing(path)?, path)
}

/// Minimal CSV writer: header row then rows, fields joined by commas.
#[derive(Clone, Debug, Default)]
pub struct Csv {
    text: String,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        let mut text = header.join(",");
        text.push('\n');
        Self { text }
    }

    pub fn row(&mut self, cells: &[String]) {
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.text.as_bytes())
    }
}

/// Shortest round-trip representation, so CSV output is exact and stable.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}
