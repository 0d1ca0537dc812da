//! Binary PGM (P5) label maps.
//!
//! Files are written with the header `P5\n{width} {height}\n{maxval}\n`.
//! Reading accepts any whitespace and `#` comments in the header. Samples
//! are one byte when `maxval < 256` and two big-endian bytes otherwise.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Row-major samples.
    pub data: Vec<u16>,
}

impl Pgm {
    pub fn new(width: usize, height: usize, maxval: u16, data: Vec<u16>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Invalid(format!("empty {width}x{height} image")));
        }
        if maxval == 0 {
            return Err(Error::Invalid("PGM maxval must be positive".into()));
        }
        if data.len() != width * height {
            return Err(Error::shape("PGM samples", width * height, data.len()));
        }
        if let Some(i) = data.iter().position(|&v| v > maxval) {
            return Err(Error::Invalid(format!(
                "sample {} at pixel {i} exceeds maxval {maxval}",
                data[i]
            )));
        }
        Ok(Pgm {
            width,
            height,
            maxval,
            data,
        })
    }

    /// 8-bit map of small label indices.
    pub fn from_labels8(width: usize, height: usize, labels: &[usize]) -> Result<Self> {
        let data = narrow(labels, 255)?;
        Pgm::new(width, height, 255, data)
    }

    /// 16-bit map with maxval 65535.
    pub fn from_labels16(width: usize, height: usize, labels: &[usize]) -> Result<Self> {
        let data = narrow(labels, 65535)?;
        Pgm::new(width, height, 65535, data)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.data.iter().map(|&v| usize::from(v)).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval < 256 {
            out.extend(self.data.iter().map(|&v| v as u8));
        } else {
            self.data.iter().for_each(|v| out.extend_from_slice(&v.to_be_bytes()));
        }
        out
    }

    pub fn decode(bytes: &[u8], name: &str) -> Result<Self> {
        let fail = |offset: usize, message: String| Error::Format {
            path: name.to_string(),
            offset: offset as u64,
            message,
        };
        if bytes.len() < 2 || &bytes[..2] != b"P5" {
            return Err(fail(0, "expected binary PGM magic \"P5\"".into()));
        }
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for (k, what) in ["width", "height", "maxval"].iter().enumerate() {
            loop {
                match bytes.get(pos) {
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    _ => break,
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            if start == pos {
                return Err(fail(start, format!("expected {what}")));
            }
            let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
            fields[k] = text
                .parse()
                .map_err(|_| fail(start, format!("{what} {text} out of range")))?;
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(fail(pos, "expected one whitespace byte after maxval".into()));
        }
        pos += 1;
        let [width, height, maxval] = fields;
        if width == 0 || height == 0 {
            return Err(fail(2, format!("empty {width}x{height} image")));
        }
        if maxval == 0 || maxval > 65535 {
            return Err(fail(2, format!("maxval {maxval} outside [1, 65535]")));
        }
        let elem = if maxval < 256 { 1 } else { 2 };
        let count = width
            .checked_mul(height)
            .ok_or_else(|| fail(2, "image size overflows".into()))?;
        let payload = &bytes[pos..];
        if payload.len() != count * elem {
            return Err(fail(
                pos + payload.len().min(count * elem),
                format!("payload is {} bytes, {width}x{height} needs {}", payload.len(), count * elem),
            ));
        }
        let data: Vec<u16> = if elem == 1 {
            payload.iter().map(|&b| u16::from(b)).collect()
        } else {
            payload
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]))
                .collect()
        };
        if let Some(i) = data.iter().position(|&v| usize::from(v) > maxval) {
            return Err(fail(
                pos + i * elem,
                format!("sample {} exceeds maxval {maxval}", data[i]),
            ));
        }
        Ok(Pgm {
            width,
            height,
            maxval: maxval as u16,
            data,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Pgm::decode(&bytes, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

fn narrow(labels: &[usize], max: u16) -> Result<Vec<u16>> {
    labels
        .iter()
        .map(|&l| {
            u16::try_from(l)
                .ok()
                .filter(|&v| v <= max)
                .ok_or_else(|| Error::Invalid(format!("label {l} exceeds {max}")))
        })
        .collect()
}
