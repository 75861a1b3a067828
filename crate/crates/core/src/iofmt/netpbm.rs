//! Binary PPM (P6) / PGM (P5) images and colour palettes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Per-channel input normalization `(v / 255 - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

/// A decoded 8-bit netpbm raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

fn format_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        detail: detail.into(),
    }
}

/// Parses a P5/P6 header; returns `(magic, width, height, maxval, data offset)`.
fn parse_header(bytes: &[u8]) -> Result<(&str, usize, usize, usize, usize)> {
    let magic = match bytes.get(..2) {
        Some(b"P5") => "P5",
        Some(b"P6") => "P6",
        _ => {
            return Err(format_err(
                0,
                "not a binary netpbm file (expected P5 or P6)",
            ))
        }
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
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
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(start, "malformed header: expected a decimal number"))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(format_err(
            pos,
            "malformed header: missing whitespace before raster",
        ));
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(format_err(2, "image dimensions must be positive"));
    }
    Ok((magic, w, h, maxval, pos + 1))
}

pub fn decode_netpbm(bytes: &[u8]) -> Result<Raster> {
    let (magic, width, height, maxval, start) = parse_header(bytes)?;
    if maxval != 255 {
        return Err(format_err(
            start - 1,
            format!("only maxval 255 is supported, got {maxval}"),
        ));
    }
    let channels = if magic == "P6" { 3 } else { 1 };
    let need = width * height * channels;
    let data = &bytes[start..];
    if data.len() < need {
        return Err(format_err(
            bytes.len(),
            format!("truncated raster: need {need} bytes, got {}", data.len()),
        ));
    }
    Ok(Raster {
        width,
        height,
        channels,
        pixels: data[..need].to_vec(),
    })
}

/// Reads a binary P6 image as a normalized `1 x 3 x H x W` tensor.
pub fn read_ppm(path: impl AsRef<Path>, norm: &Normalization) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    if bytes.get(..2) != Some(b"P6") {
        return Err(format_err(0, "expected P6 (binary RGB) image"));
    }
    ppm_to_tensor(&decode_netpbm(&bytes)?, norm)
}

pub fn ppm_to_tensor(r: &Raster, norm: &Normalization) -> Result<Tensor<f32>> {
    if r.channels != 3 {
        return Err(Error::Input(format!(
            "expected 3 channels, got {}",
            r.channels
        )));
    }
    let hw = r.width * r.height;
    Tensor::from_fn([1, 3, r.height, r.width], |i| {
        let (c, p) = (i / hw, i % hw);
        (r.pixels[p * 3 + c] as f32 / 255.0 - norm.mean[c]) / norm.std[c]
    })
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

/// Per-pixel argmax over channels of the first batch item, row-major.
pub fn argmax_classes(logits: &Tensor<f32>) -> Vec<usize> {
    let [_, c, h, w] = logits.dims();
    (0..h * w)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if logits.data()[k * h * w + p] > logits.data()[best * h * w + p] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

fn class_bytes(classes: &[usize]) -> Result<Vec<u8>> {
    classes
        .iter()
        .map(|&c| {
            u8::try_from(c)
                .map_err(|_| Error::Argument(format!("class index {c} does not fit an 8-bit PGM")))
        })
        .collect()
}

/// Writes argmax class indices as a binary P5 image.
pub fn write_pgm(logits: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    if logits.c() > 256 {
        return Err(Error::Argument(format!(
            "PGM output needs at most 256 classes, model has {}",
            logits.c()
        )));
    }
    let idx = class_bytes(&argmax_classes(logits))?;
    fs::write(path, encode_pgm(logits.w(), logits.h(), &idx))?;
    Ok(())
}

/// Reads a P5 class map; returns `(width, height, indices)`.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    if bytes.get(..2) != Some(b"P5") {
        return Err(format_err(0, "expected P5 (binary grayscale) image"));
    }
    let r = decode_netpbm(&bytes)?;
    Ok((r.width, r.height, r.pixels))
}

pub type Palette = Vec<[u8; 3]>;

/// Parses `R G B` lines; blank lines and `#` comments are skipped.
pub fn parse_palette(text: &str) -> Result<Palette> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<u8> = line
            .split_whitespace()
            .map(|t| t.parse::<u8>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| {
                Error::Input(format!(
                    "palette line {}: expected three values in 0..=255",
                    i + 1
                ))
            })?;
        match vals[..] {
            [r, g, b] => out.push([r, g, b]),
            _ => {
                return Err(Error::Input(format!(
                    "palette line {}: expected 'R G B'",
                    i + 1
                )))
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Input("palette is empty".into()));
    }
    Ok(out)
}

pub fn read_palette(path: impl AsRef<Path>) -> Result<Palette> {
    parse_palette(&fs::read_to_string(path)?)
}

/// Deterministic fallback palette with `n` distinct-ish colours.
pub fn default_palette(n: usize) -> Palette {
    (0..n)
        .map(|i| {
            let h = (i as u32).wrapping_mul(2_654_435_761);
            [(h >> 24) as u8, (h >> 16) as u8, (h >> 8) as u8]
        })
        .collect()
}

pub fn write_ppm_colorized(
    logits: &Tensor<f32>,
    palette: &Palette,
    path: impl AsRef<Path>,
) -> Result<()> {
    if palette.len() < logits.c() {
        return Err(Error::Input(format!(
            "palette has {} colours, model has {} classes",
            palette.len(),
            logits.c()
        )));
    }
    let rgb: Vec<u8> = argmax_classes(logits)
        .into_iter()
        .flat_map(|c| palette[c])
        .collect();
    fs::write(path, encode_ppm(logits.w(), logits.h(), &rgb))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn black_image_normalizes_to_constants() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("black.ppm");
        fs::write(&p, encode_ppm(64, 64, &vec![0; 64 * 64 * 3])).unwrap();
        let t = read_ppm(&p, &Normalization::default()).unwrap();
        assert_eq!(t.dims(), [1, 3, 64, 64]);
        for c in 0..3 {
            let expect = -IMAGENET_MEAN[c] / IMAGENET_STD[c];
            assert!(t.plane(0, c).iter().all(|&v| v == expect));
        }
    }

    #[test]
    fn channel_order_is_rgb() {
        let r = decode_netpbm(&encode_ppm(2, 1, &[255, 0, 0, 0, 0, 255])).unwrap();
        let t = ppm_to_tensor(
            &r,
            &Normalization {
                mean: [0.0; 3],
                std: [1.0; 3],
            },
        )
        .unwrap();
        assert_eq!(t.plane(0, 0), &[1.0, 0.0]);
        assert_eq!(t.plane(0, 2), &[0.0, 1.0]);
    }

    #[test]
    fn header_comments_and_whitespace() {
        let mut b = b"P6 # comment\n2\t1\n# more\n255\n".to_vec();
        b.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let r = decode_netpbm(&b).unwrap();
        assert_eq!((r.width, r.height, r.pixels.len()), (2, 1, 6));
    }

    #[test]
    fn rejects_p5_as_ppm() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gray.pgm");
        fs::write(&p, encode_pgm(2, 2, &[0; 4])).unwrap();
        let err = read_ppm(&p, &Normalization::default()).unwrap_err();
        assert!(err.to_string().contains("expected P6"), "{err}");
    }

    #[test]
    fn rejects_bad_maxval_and_truncation() {
        assert!(decode_netpbm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(decode_netpbm(b"P6\n2 2\n255\n\0\0\0").is_err());
        assert!(decode_netpbm(b"P6\nx 2\n255\n").is_err());
    }

    #[test]
    fn pgm_round_trips_argmax() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.pgm");
        // class k wins at pixel k
        let logits =
            Tensor::from_fn([1, 3, 1, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 }).unwrap();
        write_pgm(&logits, &p).unwrap();
        assert_eq!(read_pgm(&p).unwrap(), (3, 1, vec![0, 1, 2]));
    }

    #[test]
    fn pgm_rejects_too_many_classes() {
        let dir = tempfile::tempdir().unwrap();
        let logits = Tensor::zeros([1, 300, 1, 1]).unwrap();
        assert!(write_pgm(&logits, dir.path().join("x.pgm")).is_err());
    }

    #[test]
    fn palette_parsing() {
        let p = parse_palette("# ade\n0 0 0\n\n255 10 3\n").unwrap();
        assert_eq!(p, vec![[0, 0, 0], [255, 10, 3]]);
        assert!(parse_palette("1 2\n").is_err());
        assert!(parse_palette("1 2 300\n").is_err());
        assert_eq!(default_palette(150).len(), 150);
    }

    #[test]
    fn colorized_output_uses_palette() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ppm");
        let logits =
            Tensor::from_fn([1, 2, 1, 2], |i| if i == 0 || i == 3 { 1.0 } else { 0.0 }).unwrap();
        write_ppm_colorized(&logits, &vec![[1, 2, 3], [4, 5, 6]], &p).unwrap();
        let r = decode_netpbm(&fs::read(&p).unwrap()).unwrap();
        assert_eq!(r.pixels, vec![1, 2, 3, 4, 5, 6]);
        assert!(write_ppm_colorized(&logits, &vec![[0, 0, 0]], &p).is_err());
    }
}
