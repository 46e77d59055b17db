//! On-disk formats.
//!
//! Portable tensor file: one line of compact JSON (the header) terminated by
//! `\n`, followed by the flat little-endian `f32` payload in row-major order.
//!
//! ```text
//! {"dtype":"f32","kind":"raw","shape":[64,64],"msfa":"imec4x4","wavelengths":[...],"band_grid":[...]}\n
//! <64*64 little-endian f32>
//! ```
//!
//! Shapes are `[height, width]` for raw mosaics and `[channels, rows, cols]`
//! for plane cubes and fully-defined images.
//!
//! Raw mosaics can also be exchanged as binary 16-bit PGM (`P5`); samples are
//! mapped to `[0, 1]` by dividing by the file's maxval.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::msfa::{FullImage, MsfaPattern, PlaneCube, RawImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Raw,
    Cube,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub dtype: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub msfa: String,
    pub wavelengths: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band_grid: Option<Vec<usize>>,
}

impl TensorHeader {
    fn for_pattern(kind: TensorKind, shape: Vec<usize>, pattern: &MsfaPattern) -> Self {
        Self {
            dtype: "f32".into(),
            kind,
            shape,
            msfa: pattern.id().to_string(),
            wavelengths: pattern.wavelengths().to_vec(),
            band_grid: Some(pattern.band_grid().to_vec()),
        }
    }

    /// Rebuilds the pattern described by the header. Built-in ids are used
    /// as-is unless the header overrides the grid or wavelengths.
    pub fn pattern(&self) -> Result<MsfaPattern> {
        if let Ok(builtin) = MsfaPattern::from_id(&self.msfa) {
            let same_grid = self.band_grid.as_deref().is_none_or(|g| g == builtin.band_grid());
            if same_grid && self.wavelengths == builtin.wavelengths() {
                return Ok(builtin);
            }
        }
        let bands = self.wavelengths.len();
        let width = (bands as f64).sqrt().round() as usize;
        let grid = self.band_grid.clone().unwrap_or_else(|| (0..bands).collect());
        MsfaPattern::new(self.msfa.clone(), width, grid, self.wavelengths.clone())
    }
}

pub fn write_tensor<W: Write>(mut out: W, header: &TensorHeader, data: &[f64]) -> Result<()> {
    let expected: usize = header.shape.iter().product();
    if expected != data.len() {
        return Err(Error::Structure(format!(
            "shape {:?} needs {expected} values, got {}",
            header.shape,
            data.len()
        )));
    }
    serde_json::to_writer(&mut out, header)?;
    out.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(data.len() * 4);
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

pub fn read_tensor<R: Read>(input: R) -> Result<(TensorHeader, Vec<f64>)> {
    let mut reader = BufReader::new(input);
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::Format("tensor file header is not newline-terminated".into()));
    }
    let header: TensorHeader = serde_json::from_slice(&line[..line.len() - 1])?;
    if header.dtype != "f32" {
        return Err(Error::Format(format!("unsupported dtype {:?}", header.dtype)));
    }
    let count: usize = header.shape.iter().product();
    let mut payload = vec![0u8; count * 4];
    reader.read_exact(&mut payload).map_err(|e| {
        Error::Format(format!("payload shorter than shape {:?} requires: {e}", header.shape))
    })?;
    let mut rest = [0u8; 1];
    if reader.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after tensor payload".into()));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((header, data))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn write_raw(path: impl AsRef<Path>, img: &RawImage) -> Result<()> {
    let header = TensorHeader::for_pattern(TensorKind::Raw, vec![img.height(), img.width()], img.pattern());
    write_tensor(create(path.as_ref())?, &header, img.data())
}

pub fn write_cube(path: impl AsRef<Path>, cube: &PlaneCube) -> Result<()> {
    let header = TensorHeader::for_pattern(
        TensorKind::Cube,
        vec![cube.channels(), cube.rows(), cube.cols()],
        cube.pattern(),
    );
    write_tensor(create(path.as_ref())?, &header, cube.data())
}

pub fn write_full(path: impl AsRef<Path>, full: &FullImage) -> Result<()> {
    let header = TensorHeader::for_pattern(
        TensorKind::Full,
        vec![full.channels(), full.height(), full.width()],
        full.pattern(),
    );
    write_tensor(create(path.as_ref())?, &header, full.data())
}

fn read_kind(path: &Path, kind: TensorKind) -> Result<(TensorHeader, Arc<MsfaPattern>, Vec<f64>)> {
    let (header, data) = read_tensor(File::open(path)?)?;
    if header.kind != kind {
        return Err(Error::Format(format!(
            "{} holds a {:?} tensor, expected {:?}",
            path.display(),
            header.kind,
            kind
        )));
    }
    let expected_rank = if kind == TensorKind::Raw { 2 } else { 3 };
    if header.shape.len() != expected_rank {
        return Err(Error::Format(format!("{kind:?} tensor with shape {:?}", header.shape)));
    }
    let pattern = Arc::new(header.pattern()?);
    Ok((header, pattern, data))
}

pub fn read_raw(path: impl AsRef<Path>) -> Result<RawImage> {
    let (h, pattern, data) = read_kind(path.as_ref(), TensorKind::Raw)?;
    RawImage::new(pattern, h.shape[0], h.shape[1], data)
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<PlaneCube> {
    let (h, pattern, data) = read_kind(path.as_ref(), TensorKind::Cube)?;
    PlaneCube::new(pattern, h.shape[0], h.shape[1], h.shape[2], data)
}

pub fn read_full(path: impl AsRef<Path>) -> Result<FullImage> {
    let (h, pattern, data) = read_kind(path.as_ref(), TensorKind::Full)?;
    FullImage::new(pattern, h.shape[0], h.shape[1], h.shape[2], data)
}

/// Writes a raw mosaic as 16-bit binary PGM, clamping values to `[0, 1]`.
pub fn write_pgm16<W: Write>(mut out: W, img: &RawImage) -> Result<()> {
    write!(out, "P5\n{} {}\n65535\n", img.width(), img.height())?;
    let mut buf = Vec::with_capacity(img.data().len() * 2);
    for &v in img.data() {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        buf.extend_from_slice(&q.to_be_bytes());
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

fn pgm_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(Error::Format("truncated PGM header".into()));
        }
        match byte[0] {
            b'#' if tok.is_empty() => {
                let mut comment = Vec::new();
                r.read_until(b'\n', &mut comment)?;
            }
            c if c.is_ascii_whitespace() => {
                if !tok.is_empty() {
                    return Ok(tok);
                }
            }
            c => tok.push(c as char),
        }
    }
}

/// Reads a binary PGM (8- or 16-bit) as a raw mosaic on `pattern`.
pub fn read_pgm<R: Read>(input: R, pattern: impl Into<Arc<MsfaPattern>>) -> Result<RawImage> {
    let mut r = BufReader::new(input);
    if pgm_token(&mut r)? != "P5" {
        return Err(Error::Format("not a binary PGM (P5) file".into()));
    }
    let parse = |t: String| -> Result<usize> {
        t.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PGM header field {t:?}")))
    };
    let width = parse(pgm_token(&mut r)?)?;
    let height = parse(pgm_token(&mut r)?)?;
    let maxval = parse(pgm_token(&mut r)?)?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("PGM maxval {maxval} out of range")));
    }
    let n = width * height;
    let scale = maxval as f64;
    let data = if maxval < 256 {
        let mut buf = vec![0u8; n];
        r.read_exact(&mut buf)?;
        buf.into_iter().map(|v| v as f64 / scale).collect()
    } else {
        let mut buf = vec![0u8; n * 2];
        r.read_exact(&mut buf)?;
        buf.chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / scale)
            .collect()
    };
    RawImage::new(pattern, height, width, data)
}

pub fn write_pgm_file(path: impl AsRef<Path>, img: &RawImage) -> Result<()> {
    write_pgm16(create(path.as_ref())?, img)
}

pub fn read_pgm_file(path: impl AsRef<Path>, pattern: impl Into<Arc<MsfaPattern>>) -> Result<RawImage> {
    read_pgm(File::open(path)?, pattern)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_tensor_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        let img = RawImage::new(
            MsfaPattern::imec2x2(),
            2,
            4,
            vec![0.0, 0.25, 0.5, 1.0, 0.125, 2.0, 3.5, 0.75],
        )
        .unwrap();
        write_raw(&path, &img).unwrap();
        let back = read_raw(&path).unwrap();
        assert_eq!(back, img);

        let bytes = std::fs::read(&path).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
        assert_eq!(header["dtype"], "f32");
        assert_eq!(header["shape"], serde_json::json!([2, 4]));
        assert_eq!(header["msfa"], "imec2x2");
        assert_eq!(bytes.len() - nl - 1, 8 * 4);
        assert_eq!(&bytes[nl + 1 + 4..nl + 1 + 8], &0.25f32.to_le_bytes());
    }

    #[test]
    fn kind_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        let img = RawImage::filled(MsfaPattern::imec2x2(), 2, 2, 0.5).unwrap();
        write_raw(&path, &img).unwrap();
        assert!(matches!(read_cube(&path), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let header = TensorHeader::for_pattern(TensorKind::Raw, vec![2, 2], &MsfaPattern::imec2x2());
        let mut bytes = Vec::new();
        write_tensor(&mut bytes, &header, &[0.0; 4]).unwrap();
        bytes.truncate(bytes.len() - 1);
        assert!(matches!(read_tensor(&bytes[..]), Err(Error::Format(_))));
    }

    #[test]
    fn pgm_roundtrip_quantizes_to_16_bits() {
        let img = RawImage::new(MsfaPattern::imec2x2(), 2, 2, vec![0.0, 1.0, 0.5, 0.2]).unwrap();
        let mut bytes = Vec::new();
        write_pgm16(&mut bytes, &img).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n65535\n"));
        let back = read_pgm(&bytes[..], MsfaPattern::imec2x2()).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0);
        }
        assert_eq!(back.data()[1], 1.0);
    }

    #[test]
    fn pgm_with_comment_and_8_bit() {
        let mut bytes = b"P5 # comment\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 51, 102]);
        let img = read_pgm(&bytes[..], MsfaPattern::imec2x2()).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0, 0.2, 0.4]);
    }
}
