//! PNM (PGM/PPM, plain and binary) and 8-bit PNG reading and writing.
//!
//! Images come back as channels-first `C×H×W` tensors scaled to `[0, 1]`.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::maps::{BinaryMask, ProbMap};
use crate::tensor::Tensor;

fn format_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {msg}", path.display()))
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes, path)
    } else if bytes.first() == Some(&b'P') {
        decode_pnm(&bytes, path)
    } else {
        Err(format_err(
            path,
            "unsupported image format (supported: PGM/PPM and 8-bit PNG; convert TIFF/GIF first)",
        ))
    }
}

/// Binary mask from an image: a pixel is set when its first channel is ≥ 0.5.
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let t = load_image(path)?;
    let [_, h, w] = t.shape()[..] else {
        unreachable!("images are C×H×W")
    };
    let bits = t.data()[..h * w].iter().map(|&v| v >= 0.5).collect();
    BinaryMask::new(w, h, bits)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `C×H×W` tensor (C ∈ {1, 3}) as binary PGM/PPM or PNG, chosen by
/// extension.
pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    let [c, h, w] = image.shape()[..] else {
        return Err(Error::Shape(format!(
            "save_image expects C×H×W, got {:?}",
            image.shape()
        )));
    };
    if c != 1 && c != 3 {
        return Err(Error::Shape(format!("save_image channel axis must be 1 or 3, got {c}")));
    }
    let plane = h * w;
    let mut interleaved = Vec::with_capacity(c * plane);
    for i in 0..plane {
        for ch in 0..c {
            interleaved.push(quantize(image.data()[ch * plane + i]));
        }
    }
    match extension(path).as_str() {
        "pgm" | "ppm" => {
            let expected = if c == 1 { "pgm" } else { "ppm" };
            if extension(path) != expected {
                return Err(format_err(
                    path,
                    format!("{c}-channel images must be saved as .{expected}"),
                ));
            }
            let magic = if c == 1 { "P5" } else { "P6" };
            let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
            out.extend_from_slice(&interleaved);
            fs::write(path, out).map_err(|e| Error::io(path, e))
        }
        "png" => {
            let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
            let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
            enc.set_color(if c == 1 {
                png::ColorType::Grayscale
            } else {
                png::ColorType::Rgb
            });
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(|e| format_err(path, e))?;
            writer.write_image_data(&interleaved).map_err(|e| format_err(path, e))?;
            writer.finish().map_err(|e| format_err(path, e))
        }
        other => Err(format_err(
            path,
            format!("cannot write images with extension `{other}`"),
        )),
    }
}

pub fn save_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let t = Tensor::new(
        vec![1, mask.height(), mask.width()],
        mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    )?;
    save_image(path, &t)
}

/// 16-bit binary PGM, sample = round(p·65535).
pub fn save_prob_map(path: &Path, map: &ProbMap) -> Result<()> {
    let mut out = format!("P5\n{} {}\n65535\n", map.width(), map.height()).into_bytes();
    for &p in map.values() {
        let v = (p.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&v.to_be_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct PnmHeader {
    magic: u8,
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_pnm_header(bytes: &[u8], path: &Path) -> Result<PnmHeader> {
    let magic = match bytes.get(..2) {
        Some([b'P', m @ (b'2' | b'3' | b'5' | b'6')]) => *m,
        _ => return Err(format_err(path, "unsupported PNM variant (supported: P2, P3, P5, P6)")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(path, "malformed PNM header"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err(path, "malformed PNM header"));
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(format_err(path, format!("unsupported PNM maxval {maxval}")));
    }
    Ok(PnmHeader {
        magic,
        width,
        height,
        maxval,
        data_start: pos + 1,
    })
}

fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let hdr = parse_pnm_header(bytes, path)?;
    let channels = if matches!(hdr.magic, b'2' | b'5') { 1 } else { 3 };
    let count = hdr.width * hdr.height * channels;
    let samples: Vec<usize> = match hdr.magic {
        b'5' | b'6' => {
            let body = &bytes[hdr.data_start..];
            if hdr.maxval < 256 {
                if body.len() < count {
                    return Err(format_err(path, "truncated PNM raster"));
                }
                body[..count].iter().map(|&b| b as usize).collect()
            } else {
                if body.len() < 2 * count {
                    return Err(format_err(path, "truncated PNM raster"));
                }
                body.chunks_exact(2)
                    .take(count)
                    .map(|p| u16::from_be_bytes([p[0], p[1]]) as usize)
                    .collect()
            }
        }
        _ => {
            let text = std::str::from_utf8(&bytes[hdr.data_start..])
                .map_err(|_| format_err(path, "plain PNM raster is not ASCII"))?;
            let values: Vec<usize> = text
                .lines()
                .map(|l| l.split('#').next().unwrap_or(""))
                .flat_map(str::split_ascii_whitespace)
                .map(|tok| tok.parse().map_err(|_| format_err(path, format!("bad sample `{tok}`"))))
                .collect::<Result<_>>()?;
            if values.len() < count {
                return Err(format_err(path, "truncated PNM raster"));
            }
            values[..count].to_vec()
        }
    };
    if let Some(v) = samples.iter().find(|&&v| v > hdr.maxval) {
        return Err(format_err(path, format!("sample {v} exceeds maxval {}", hdr.maxval)));
    }
    let scale = hdr.maxval as f64;
    Ok(planar(&samples, channels, hdr.height, hdr.width, |v| v as f64 / scale))
}

fn planar(interleaved: &[usize], c: usize, h: usize, w: usize, f: impl Fn(usize) -> f64) -> Tensor {
    let plane = h * w;
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, p) = (i / plane, i % plane);
        f(interleaved[p * c + ch])
    })
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| format_err(path, e))?;
    let mut buf = vec![
        0;
        reader
            .output_buffer_size()
            .ok_or_else(|| format_err(path, "PNG too large"))?
    ];
    let info = reader.next_frame(&mut buf).map_err(|e| format_err(path, e))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(format_err(
            path,
            format!(
                "unsupported PNG bit depth {:?} (only 8-bit is supported)",
                info.bit_depth
            ),
        ));
    }
    let (stride, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(format_err(path, "palette PNG was not expanded")),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut samples = Vec::with_capacity(w * h * keep);
    for row in buf[..info.buffer_size()].chunks_exact(info.line_size) {
        for px in row[..w * stride].chunks_exact(stride) {
            samples.extend(px[..keep].iter().map(|&b| b as usize));
        }
    }
    Ok(planar(&samples, keep, h, w, |v| v as f64 / 255.0))
}
