//! Binary PPM (`P6`, maxval 255).

use garmentfuse_core::synth::RgbImage;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("PPM parse error at byte {offset}: {reason}")]
pub struct PpmError {
    pub offset: usize,
    pub reason: String,
}

fn err(offset: usize, reason: impl Into<String>) -> PpmError {
    PpmError {
        offset,
        reason: reason.into(),
    }
}

/// `P6\n<w> <h>\n255\n` followed by row-major RGB bytes.
pub fn write_ppm(img: &RgbImage) -> Vec<u8> {
    let header = format!("P6\n{} {}\n255\n", img.width, img.height);
    let mut out = Vec::with_capacity(header.len() + img.data.len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&img.data);
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => return,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, PpmError> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(start, format!("{what} out of range")))
    }
}

pub fn read_ppm(bytes: &[u8]) -> Result<RgbImage, PpmError> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(err(0, "missing P6 magic"));
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    if width == 0 || height == 0 {
        return Err(err(2, format!("empty image {width}x{height}")));
    }
    h.skip_space();
    let maxval_at = h.pos;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(err(maxval_at, format!("maxval {maxval} unsupported (only 255)")));
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(err(h.pos, "expected a single whitespace byte after maxval")),
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| err(2, "image dimensions overflow"))?;
    let payload = &bytes[h.pos..];
    if payload.len() < need {
        return Err(err(
            bytes.len(),
            format!("payload truncated: expected {need} bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > need {
        return Err(err(h.pos + need, "trailing bytes after payload"));
    }
    RgbImage::new(width, height, payload.to_vec()).map_err(|e| err(h.pos, e.to_string()))
}
