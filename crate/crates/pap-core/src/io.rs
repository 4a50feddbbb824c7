//! On-disk formats.
//!
//! Binary layouts are fixed and little-endian throughout:
//!
//! * weights `PAPW1`: magic, then per-parameter records of
//!   name length (u32) + UTF-8 name, rank (u32), dims (u32 each),
//!   values (f32 each);
//! * density maps `PAPD1`: magic, h (u32), w (u32), h*w f32 row-major;
//! * patches `PAPP1`: magic, shape code (u8), size P (u32), channels C (u32),
//!   C*P*P f32 values;
//! * images: 8-bit binary PPM (P6).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::density::DensityMap;
use crate::error::{Error, Result};

const WEIGHTS_MAGIC: &[u8; 5] = b"PAPW1";
const DENSITY_MAGIC: &[u8; 5] = b"PAPD1";
const PATCH_MAGIC: &[u8; 5] = b"PAPP1";

/// One named parameter block of a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), detail: detail.into() }
}

/// Wrap a read error on a prerequisite artifact so callers can distinguish
/// "you have not produced this yet" from a corrupt file.
pub fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingPrerequisite { path: path.to_path_buf(), detail: "file not found".into() })
    }
}

pub fn write_weights(path: &Path, params: &[ParamRecord]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHTS_MAGIC);
    for p in params {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.dims.len() as u32).to_le_bytes());
        for &d in &p.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let expect: usize = p.dims.iter().product();
        assert_eq!(expect, p.values.len(), "param {} dims/values mismatch", p.name);
        for &v in &p.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_weights(path: &Path) -> Result<Vec<ParamRecord>> {
    require(path)?;
    let data = fs::read(path)?;
    let mut r = Cursor { data: &data, pos: 0, path };
    let magic = r.take(5)?;
    if magic != WEIGHTS_MAGIC {
        return Err(format_err(path, "bad magic, expected PAPW1"));
    }
    let mut out = Vec::new();
    while !r.done() {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| format_err(path, "parameter name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(r.f32()?);
        }
        out.push(ParamRecord { name, dims, values });
    }
    Ok(out)
}

pub fn write_density(path: &Path, map: &DensityMap) -> Result<()> {
    let mut buf = Vec::with_capacity(13 + 4 * map.values.len());
    buf.extend_from_slice(DENSITY_MAGIC);
    buf.extend_from_slice(&(map.h as u32).to_le_bytes());
    buf.extend_from_slice(&(map.w as u32).to_le_bytes());
    for &v in &map.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_density(path: &Path) -> Result<DensityMap> {
    require(path)?;
    let data = fs::read(path)?;
    let mut r = Cursor { data: &data, pos: 0, path };
    if r.take(5)? != DENSITY_MAGIC {
        return Err(format_err(path, "bad magic, expected PAPD1"));
    }
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let mut values = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        values.push(r.f32()?);
    }
    Ok(DensityMap { values, h, w, scale: 1 })
}

/// Raw contents of a patch file; interpretation of the shape code belongs to
/// the attack module.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub shape_code: u8,
    pub size: usize,
    pub channels: usize,
    pub values: Vec<f32>,
}

pub fn write_patch(path: &Path, rec: &PatchRecord) -> Result<()> {
    assert_eq!(rec.values.len(), rec.channels * rec.size * rec.size);
    let mut buf = Vec::with_capacity(14 + 4 * rec.values.len());
    buf.extend_from_slice(PATCH_MAGIC);
    buf.push(rec.shape_code);
    buf.extend_from_slice(&(rec.size as u32).to_le_bytes());
    buf.extend_from_slice(&(rec.channels as u32).to_le_bytes());
    for &v in &rec.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_patch(path: &Path) -> Result<PatchRecord> {
    require(path)?;
    let data = fs::read(path)?;
    let mut r = Cursor { data: &data, pos: 0, path };
    if r.take(5)? != PATCH_MAGIC {
        return Err(format_err(path, "bad magic, expected PAPP1"));
    }
    let shape_code = r.take(1)?[0];
    let size = r.u32()? as usize;
    let channels = r.u32()? as usize;
    let mut values = Vec::with_capacity(channels * size * size);
    for _ in 0..channels * size * size {
        values.push(r.f32()?);
    }
    Ok(PatchRecord { shape_code, size, channels, values })
}

/// Write an 8-bit binary PPM (P6). `rgb` is interleaved, row-major.
pub fn write_ppm(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    assert_eq!(rgb.len(), 3 * w * h);
    let mut f = fs::File::create(path)?;
    write!(f, "P6\n{w} {h}\n255\n")?;
    f.write_all(rgb)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    require(path)?;
    let mut data = Vec::new();
    fs::File::open(path)?.read_to_end(&mut data)?;
    let header_err = || format_err(path, "malformed PPM header");
    // Header: "P6", whitespace-separated width, height, maxval, one byte of
    // whitespace, then raw pixels. Comments are not produced by this crate
    // and are not accepted.
    if data.len() < 2 || &data[0..2] != b"P6" {
        return Err(header_err());
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < data.len() && data[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(header_err());
        }
        *field = std::str::from_utf8(&data[start..pos])
            .map_err(|_| header_err())?
            .parse()
            .map_err(|_| header_err())?;
    }
    if pos >= data.len() || !data[pos].is_ascii_whitespace() {
        return Err(header_err());
    }
    pos += 1;
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(format_err(path, format!("unsupported maxval {maxval}")));
    }
    let need = 3 * w * h;
    if data.len() - pos < need {
        return Err(format_err(path, "truncated pixel data"));
    }
    Ok((w, h, data[pos..pos + need].to_vec()))
}

/// Interleaved 8-bit RGB rows to planar [C,H,W] values in [0,1].
pub fn rgb_to_planar_unit(rgb: &[u8], w: usize, h: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; 3 * w * h];
    for i in 0..w * h {
        for c in 0..3 {
            out[c * w * h + i] = rgb[3 * i + c] as f32 / 255.0;
        }
    }
    out
}

/// Planar [C,H,W] values in [0,1] to interleaved 8-bit RGB.
pub fn planar_unit_to_rgb(planar: &[f32], w: usize, h: usize) -> Vec<u8> {
    let mut out = vec![0u8; 3 * w * h];
    for i in 0..w * h {
        for c in 0..3 {
            let v = planar[c * w * h + i].clamp(0.0, 1.0);
            out[3 * i + c] = (v * 255.0).round() as u8;
        }
    }
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(format_err(self.path, "unexpected end of file"));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.data.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.papw");
        let params = vec![
            ParamRecord { name: "conv1.weight".into(), dims: vec![2, 1, 3, 3], values: (0..18).map(|i| i as f32).collect() },
            ParamRecord { name: "conv1.bias".into(), dims: vec![2], values: vec![0.5, -0.5] },
        ];
        write_weights(&path, &params).unwrap();
        let back = read_weights(&path).unwrap();
        assert_eq!(back, params);
        // Magic is literal.
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..5], b"PAPW1");
    }

    #[test]
    fn density_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.papd");
        let m = DensityMap { values: vec![0.0, 0.5, 1.0, 2.0, 0.25, 0.125], h: 2, w: 3, scale: 1 };
        write_density(&path, &m).unwrap();
        assert_eq!(read_density(&path).unwrap(), m);
    }

    #[test]
    fn patch_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.papp");
        let rec = PatchRecord {
            shape_code: 1,
            size: 2,
            channels: 3,
            values: (0..12).map(|i| i as f32 / 11.0).collect(),
        };
        write_patch(&path, &rec).unwrap();
        assert_eq!(read_patch(&path).unwrap(), rec);
    }

    #[test]
    fn ppm_roundtrip_and_planar_conversion() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 9) as u8).collect();
        write_ppm(&path, 3, 2, &rgb).unwrap();
        let (w, h, back) = read_ppm(&path).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(back, rgb);

        let planar = rgb_to_planar_unit(&rgb, 3, 2);
        let again = planar_unit_to_rgb(&planar, 3, 2);
        assert_eq!(again, rgb);
    }

    #[test]
    fn missing_file_is_missing_prerequisite() {
        let e = read_weights(Path::new("/nonexistent/x.papw")).unwrap_err();
        assert!(matches!(e, Error::MissingPrerequisite { .. }));
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.papd");
        std::fs::write(&path, b"NOPE!aaaa").unwrap();
        assert!(matches!(read_density(&path), Err(Error::Format { .. })));
    }
}
