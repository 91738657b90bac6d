//! On-disk formats: binary PGM images, JSON point annotations and the `RADM`
//! density container.

use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::scene::{quantize, DensityMap, GrayImage, Point, PointAnnotations};

const DENSITY_MAGIC: &[u8; 4] = b"RADM";
const DENSITY_VERSION: u32 = 1;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Cursor over a PGM header: whitespace-separated ASCII tokens with `#` comments.
struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self, field: &str) -> Result<&'a str> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(field, "missing"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::format(field, "not ASCII"))
    }

    fn number(&mut self, field: &str) -> Result<usize> {
        let tok = self.token(field)?;
        tok.parse::<usize>()
            .map_err(|_| Error::format(field, format!("expected an integer, got {tok:?}")))
    }
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut hdr = HeaderReader { bytes, pos: 0 };
    let magic = hdr.token("magic")?;
    if magic != "P5" {
        return Err(Error::format("magic", format!("expected P5, got {magic:?}")));
    }
    let width = hdr.number("width")?;
    let height = hdr.number("height")?;
    let maxval = hdr.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::format(
            "width",
            format!("image must be non-empty, got {width}x{height}"),
        ));
    }
    if maxval != 255 {
        return Err(Error::format("maxval", format!("expected 255, got {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(hdr.pos) {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => return Err(Error::format("payload", "missing separator after maxval")),
    }
    let payload = &bytes[hdr.pos + 1..];
    let expected = width * height;
    if payload.len() != expected {
        return Err(Error::format(
            "payload",
            format!("expected {expected} bytes, found {}", payload.len()),
        ));
    }
    let pixels = payload.iter().map(|&b| b as f64 / 255.0).collect();
    GrayImage::new(height, width, pixels)
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.pixels().iter().map(|&p| quantize(p)));
    out
}

pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    decode_pgm(&read(path)?).map_err(|e| match e {
        Error::Format { field, message } => {
            Error::format(field, format!("{message} ({})", path.display()))
        }
        other => other,
    })
}

pub fn save_image(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &encode_pgm(img))
}

pub fn parse_annotations(text: &str) -> Result<PointAnnotations> {
    let doc: Value = serde_json::from_str(text)
        .map_err(|e| Error::parse(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
    let list = doc
        .get("points")
        .ok_or_else(|| Error::parse("points", "missing key"))?
        .as_array()
        .ok_or_else(|| Error::parse("points", "expected an array"))?;
    let mut points = Vec::with_capacity(list.len());
    for (i, entry) in list.iter().enumerate() {
        let pair = entry
            .as_array()
            .filter(|a| a.len() == 2)
            .ok_or_else(|| Error::parse(format!("points[{i}]"), "expected an [x, y] pair"))?;
        let mut xy = [0.0; 2];
        for (k, v) in pair.iter().enumerate() {
            let field = format!("points[{i}][{k}]");
            let c = v
                .as_f64()
                .ok_or_else(|| Error::parse(&field, format!("non-numeric entry {v}")))?;
            if c < 0.0 {
                return Err(Error::parse(&field, format!("negative coordinate {c}")));
            }
            xy[k] = c;
        }
        points.push(Point::new(xy[0], xy[1]));
    }
    PointAnnotations::new(points)
}

pub fn format_annotations(ann: &PointAnnotations) -> String {
    let points: Vec<[f64; 2]> = ann.points().iter().map(|p| [p.x, p.y]).collect();
    serde_json::json!({ "points": points }).to_string()
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<PointAnnotations> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    parse_annotations(text)
}

pub fn save_annotations(ann: &PointAnnotations, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), format_annotations(ann).as_bytes())
}

/// Values are narrowed to `f32` on encode.
pub fn encode_density(map: &DensityMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * map.values().len());
    out.extend_from_slice(DENSITY_MAGIC);
    out.extend_from_slice(&DENSITY_VERSION.to_le_bytes());
    out.extend_from_slice(&(map.height() as u32).to_le_bytes());
    out.extend_from_slice(&(map.width() as u32).to_le_bytes());
    for &v in map.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_density(bytes: &[u8]) -> Result<DensityMap> {
    if bytes.len() < 16 {
        return Err(Error::format("header", format!("need 16 bytes, got {}", bytes.len())));
    }
    if &bytes[..4] != DENSITY_MAGIC {
        return Err(Error::format("magic", format!("expected RADM, got {:?}", &bytes[..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != DENSITY_VERSION {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let (height, width) = (word(8) as usize, word(12) as usize);
    let payload = &bytes[16..];
    if payload.len() != height * width * 4 {
        return Err(Error::format(
            "payload",
            format!(
                "{height}x{width} map needs {} bytes, found {}",
                height * width * 4,
                payload.len()
            ),
        ));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    DensityMap::new(height, width, values)
}

pub fn save_density(map: &DensityMap, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &encode_density(map))
}

pub fn load_density(path: impl AsRef<Path>) -> Result<DensityMap> {
    decode_density(&read(path.as_ref())?)
}
