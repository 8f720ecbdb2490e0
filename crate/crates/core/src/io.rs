//! File formats: PFM, PNG, scene JSON, trajectories and metric CSV.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::geometry::{DepthMap, Pose};
use crate::image::{Image, Mask};
use crate::metrics::{MetricsReport, RegionMetrics};
use crate::scene_sim::Scene;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed PFM header: {0}")]
    PfmHeader(String),
    #[error("PFM payload truncated: expected {expected} bytes, got {got}")]
    PfmTruncated { expected: usize, got: usize },
    #[error("PFM contains NaN at pixel ({x}, {y})")]
    PfmNan { x: usize, y: usize },
    #[error("png decode: {0}")]
    PngDecode(#[from] png::DecodingError),
    #[error("png encode: {0}")]
    PngEncode(#[from] png::EncodingError),
    #[error("unsupported PNG layout: {0}")]
    PngFormat(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("trajectory line {line}: {msg}")]
    Trajectory { line: usize, msg: String },
    #[error("csv line {line}: {msg}")]
    Csv { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, IoError>;

/// Little-endian grayscale PFM, rows bottom to top.
pub fn write_pfm_to(w: &mut impl Write, image: &Image) -> Result<()> {
    write!(w, "Pf\n{} {}\n-1.0\n", image.width(), image.height())?;
    for y in (0..image.height()).rev() {
        for x in 0..image.width() {
            w.write_all(&(image.get(x, y) as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn write_pfm(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_pfm_to(&mut w, image)?;
    w.flush()?;
    Ok(())
}

fn header_token(r: &mut impl BufRead) -> Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        if byte[0].is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(byte[0]);
        if tok.len() > 64 {
            return Err(IoError::PfmHeader("header token too long".into()));
        }
    }
    String::from_utf8(tok).map_err(|_| IoError::PfmHeader("non-ASCII header".into()))
}

/// Reads grayscale PFM of either endianness.
pub fn read_pfm_from(r: &mut impl BufRead) -> Result<Image> {
    let magic = header_token(r)?;
    if magic != "Pf" {
        return Err(IoError::PfmHeader(format!("expected 'Pf', got {magic:?}")));
    }
    let parse = |t: String, what: &str| -> Result<usize> {
        t.parse::<usize>().map_err(|_| IoError::PfmHeader(format!("bad {what}: {t:?}")))
    };
    let w = parse(header_token(r)?, "width")?;
    let h = parse(header_token(r)?, "height")?;
    if w == 0 || h == 0 {
        return Err(IoError::PfmHeader("zero dimension".into()));
    }
    let scale_tok = header_token(r)?;
    let scale: f64 = scale_tok.parse().map_err(|_| IoError::PfmHeader(format!("bad scale: {scale_tok:?}")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(IoError::PfmHeader("scale must be finite and nonzero".into()));
    }
    let little = scale < 0.0;
    let expected = w * h * 4;
    let mut payload = Vec::with_capacity(expected);
    r.take(expected as u64).read_to_end(&mut payload)?;
    if payload.len() < expected {
        return Err(IoError::PfmTruncated { expected, got: payload.len() });
    }
    let mut img = Image::zeros(w, h);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let bytes = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(bytes) } else { f32::from_be_bytes(bytes) };
        let (x, row) = (i % w, i / w);
        let y = h - 1 - row;
        if v.is_nan() {
            return Err(IoError::PfmNan { x, y });
        }
        img.set(x, y, v as f64);
    }
    Ok(img)
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<Image> {
    read_pfm_from(&mut BufReader::new(File::open(path)?))
}

/// Depth as PFM with invalid pixels stored as 0.
pub fn write_depth_pfm(path: impl AsRef<Path>, depth: &DepthMap) -> Result<()> {
    let img = Image::new(
        depth.width(),
        depth.height(),
        depth.image.data().iter().zip(depth.valid.data()).map(|(&d, &v)| if v { d } else { 0.0 }).collect(),
    );
    write_pfm(path, &img)
}

/// Depth from PFM; non-positive and non-finite values are invalid.
pub fn read_depth_pfm(path: impl AsRef<Path>) -> Result<DepthMap> {
    Ok(DepthMap::from_image(read_pfm(path)?))
}

/// Quantizes `[0, 1]` intensities to 16-bit (`round(v · 65535)`, clamped).
pub fn to_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

pub fn write_png16(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    let data: Vec<u8> = image.data().iter().flat_map(|&v| to_u16(v).to_be_bytes()).collect();
    write_png_raw(path, image.width(), image.height(), png::ColorType::Grayscale, png::BitDepth::Sixteen, &data, None)
}

pub fn write_png8(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    let data: Vec<u8> = image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    write_png_raw(path, image.width(), image.height(), png::ColorType::Grayscale, png::BitDepth::Eight, &data, None)
}

/// 8-bit mask: 255 where set.
pub fn write_mask_png(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    let data: Vec<u8> = mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_png_raw(path, mask.width(), mask.height(), png::ColorType::Grayscale, png::BitDepth::Eight, &data, None)
}

/// Indexed-color PNG; `palette` holds RGB triples.
pub fn write_indexed_png(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    codes: &[u8],
    palette: &[[u8; 3]],
) -> Result<()> {
    let flat: Vec<u8> = palette.iter().flatten().copied().collect();
    write_png_raw(path, width, height, png::ColorType::Indexed, png::BitDepth::Eight, codes, Some(flat))
}

fn write_png_raw(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: &[u8],
    palette: Option<Vec<u8>>,
) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    if let Some(p) = palette {
        enc.set_palette(p);
    }
    let mut writer = enc.write_header()?;
    writer.write_image_data(data)?;
    writer.finish()?;
    Ok(())
}

/// Grayscale PNG (8 or 16 bit) as `[0, 1]` intensities.
pub fn read_png(path: impl AsRef<Path>) -> Result<Image> {
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf)?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(IoError::PngFormat(format!("{:?}", info.color_type)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data = match info.bit_depth {
        png::BitDepth::Eight => buf[..w * h].iter().map(|&b| b as f64 / 255.0).collect(),
        png::BitDepth::Sixteen => {
            buf[..w * h * 2].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0).collect()
        }
        d => return Err(IoError::PngFormat(format!("bit depth {d:?}"))),
    };
    Ok(Image::new(w, h, data))
}

/// Raw bytes of an 8-bit indexed or grayscale PNG.
pub fn read_png_codes(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let mut decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(IoError::PngFormat(format!("bit depth {:?}", info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    buf.truncate(w * h);
    Ok((w, h, buf))
}

pub fn read_scene(path: impl AsRef<Path>) -> Result<Scene> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub fn write_scene(path: impl AsRef<Path>, scene: &Scene) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, scene)?;
    w.flush()?;
    Ok(())
}

/// One pose per line: `timestamp tx ty tz qx qy qz qw`, world-from-camera.
/// Blank lines and `#` comments are skipped. Returns camera-from-world poses.
pub fn parse_trajectory(text: &str) -> Result<Vec<(f64, Pose)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| IoError::Trajectory { line: i + 1, msg };
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| err(format!("bad number {t:?}"))))
            .collect::<Result<_>>()?;
        if vals.len() != 8 {
            return Err(err(format!("expected 8 fields, got {}", vals.len())));
        }
        let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
        if !(q.norm() > 1e-9) || vals.iter().any(|v| !v.is_finite()) {
            return Err(err("degenerate quaternion".into()));
        }
        let wfc = Pose::from_quaternion(UnitQuaternion::from_quaternion(q), Vector3::new(vals[1], vals[2], vals[3]));
        out.push((vals[0], wfc.inverse()));
    }
    Ok(out)
}

pub fn read_trajectory(path: impl AsRef<Path>) -> Result<Vec<(f64, Pose)>> {
    parse_trajectory(&std::fs::read_to_string(path)?)
}

pub fn format_trajectory(poses: &[(f64, Pose)]) -> String {
    let mut out = String::from("# timestamp tx ty tz qx qy qz qw (world from camera)\n");
    for (t, cfw) in poses {
        let wfc = cfw.inverse();
        let p = wfc.translation();
        let q = wfc.quaternion();
        out.push_str(&format!("{} {} {} {} {} {} {} {}\n", t, p.x, p.y, p.z, q.i, q.j, q.k, q.w));
    }
    out
}

pub const CSV_HEADER: &str = "region,pixels,rel,rmse,delta1,delta2,delta3,pct_valid";

fn csv_field(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Metrics CSV with shortest round-trip float formatting; empty cells for missing values.
pub fn format_metrics_csv(m: &RegionMetrics) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in m.regions() {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.region,
            r.pixels,
            csv_field(r.rel),
            csv_field(r.rmse),
            csv_field(r.delta1),
            csv_field(r.delta2),
            csv_field(r.delta3),
            csv_field(r.pct_valid)
        ));
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsReport>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        _ => return Err(IoError::Csv { line: 1, msg: "missing header".into() }),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: &str| IoError::Csv { line: i + 1, msg: msg.into() };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(err("expected 8 fields"));
        }
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| err("bad number"))
            }
        };
        out.push(MetricsReport {
            region: f[0].to_string(),
            pixels: f[1].parse().map_err(|_| err("bad pixel count"))?,
            rel: opt(f[2])?,
            rmse: opt(f[3])?,
            delta1: opt(f[4])?,
            delta2: opt(f[5])?,
            delta3: opt(f[6])?,
            pct_valid: opt(f[7])?,
        });
    }
    Ok(out)
}
