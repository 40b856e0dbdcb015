//! Binary PPM (P6) / PGM (P5) with 8-bit samples.
//!
//! In-memory pixels are f64 in [0,1]; quantization happens exactly once
//! at the file boundary. Parse errors carry the path and byte offset.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Round-trip a unit-interval value through the 8-bit file encoding.
pub fn quantize_unit(v: f64) -> f64 {
    quantize(v) as f64 / 255.0
}

/// Write a `[1,H,W]` map as binary PGM.
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let d = image.dims();
    assert!(d.len() == 3 && d[0] == 1, "write_pgm expects [1,H,W], got {:?}", d);
    let (h, w) = (d[1], d[2]);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    image.with_data(|data| bytes.extend(data.iter().map(|&v| quantize(v))));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Write a `[3,H,W]` planar map as binary PPM (interleaved on disk).
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let d = image.dims();
    assert!(d.len() == 3 && d[0] == 3, "write_ppm expects [3,H,W], got {:?}", d);
    let (h, w) = (d[1], d[2]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    image.with_data(|data| {
        let plane = h * w;
        for i in 0..plane {
            bytes.push(quantize(data[i]));
            bytes.push(quantize(data[plane + i]));
            bytes.push(quantize(data[2 * plane + i]));
        }
    });
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            msg: msg.into(),
        })
    }

    /// Skip whitespace and '#' comments.
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn read_number(&mut self) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return self.fail("expected an ASCII integer in header");
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .map_or_else(|| self.fail("unparseable header integer"), Ok)
    }
}

fn read_header<'a>(cur: &mut Cursor<'a>, magic: &str) -> Result<(usize, usize)> {
    if cur.bytes.len() < 2 || &cur.bytes[..2] != magic.as_bytes() {
        return cur.fail(format!("not a {magic} file"));
    }
    cur.pos = 2;
    let w = cur.read_number()?;
    let h = cur.read_number()?;
    let maxval = cur.read_number()?;
    if maxval != 255 {
        return cur.fail(format!("unsupported maxval {maxval}, expected 255"));
    }
    if w == 0 || h == 0 {
        return cur.fail("degenerate image extent");
    }
    // exactly one separator byte before the payload
    cur.pos += 1;
    Ok((h, w))
}

/// Read a binary PGM into `[1,H,W]`.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    let (h, w) = read_header(&mut cur, "P5")?;
    let need = h * w;
    if bytes.len() < cur.pos + need {
        return cur.fail(format!(
            "truncated pixel data: need {need} bytes, have {}",
            bytes.len() - cur.pos
        ));
    }
    let data: Vec<f64> = bytes[cur.pos..cur.pos + need]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Ok(Tensor::new(&[1, h, w], data))
}

/// Read a binary PPM into planar `[3,H,W]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    let (h, w) = read_header(&mut cur, "P6")?;
    let need = 3 * h * w;
    if bytes.len() < cur.pos + need {
        return cur.fail(format!(
            "truncated pixel data: need {need} bytes, have {}",
            bytes.len() - cur.pos
        ));
    }
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = bytes[cur.pos + 3 * i + c] as f64 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, h, w], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn tmpdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("pnm_test_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn pgm_roundtrip_is_exact_after_quantization() {
        let dir = tmpdir();
        let path = dir.join("a.pgm");
        let mut rng = Rng::new(1);
        let quantized: Vec<f64> = (0..64).map(|_| quantize_unit(rng.next_f64())).collect();
        let img = Tensor::new(&[1, 8, 8], quantized.clone());
        write_pgm(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.to_vec(), quantized);
    }

    #[test]
    fn ppm_roundtrip_is_exact_after_quantization() {
        let dir = tmpdir();
        let path = dir.join("b.ppm");
        let mut rng = Rng::new(2);
        let quantized: Vec<f64> = (0..3 * 16).map(|_| quantize_unit(rng.next_f64())).collect();
        let img = Tensor::new(&[3, 4, 4], quantized.clone());
        write_ppm(&path, &img).unwrap();
        assert_eq!(read_ppm(&path).unwrap().to_vec(), quantized);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let dir = tmpdir();
        let path = dir.join("trunc.ppm");
        fs::write(&path, b"P6\n4 4\n255\nshort").unwrap();
        match read_ppm(&path) {
            Err(Error::Parse { offset, msg, .. }) => {
                assert!(offset > 0);
                assert!(msg.contains("truncated"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tmpdir();
        let path = dir.join("bad.pgm");
        fs::write(&path, b"P3\n2 2\n255\n0 0 0 0").unwrap();
        assert!(read_pgm(&path).is_err());
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tmpdir();
        let path = dir.join("c.pgm");
        let mut bytes = b"P5\n# comment line\n2 2\n255\n".to_vec();
        bytes.extend([0u8, 128, 255, 64]);
        fs::write(&path, bytes).unwrap();
        let img = read_pgm(&path).unwrap();
        assert_eq!(img.dims(), &[1, 2, 2]);
        assert!((img.to_vec()[1] - 128.0 / 255.0).abs() < 1e-12);
    }
}
