//! File formats: PFM and 16-bit millimeter PNG depth, 8-bit RGB PNG, masks,
//! ASCII PLY, color-mapped depth and line plots.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb, RgbImage};

use crate::data::Image;
use crate::depth_geometry::{DepthMap, PointCloud};
use crate::error::{Error, Result};

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    }
}

/// Writes a single-channel little-endian PFM (scale -1.0), rows bottom-up.
/// Values are written verbatim, invalid pixels included.
pub fn write_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    let mut out = create(path)?;
    let (w, h) = (depth.width(), depth.height());
    let mut buf = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    buf.reserve(w * h * 4);
    for v in (0..h).rev() {
        for u in 0..w {
            buf.extend_from_slice(&(depth.at(u, v) as f32).to_le_bytes());
        }
    }
    out.write_all(&buf).and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

/// Reads a single-channel PFM; zero and non-finite pixels are invalid.
pub fn read_pfm(path: &Path) -> Result<DepthMap> {
    let mut reader = BufReader::new(open(path)?);
    let mut header = Vec::new();
    let mut lines = 0;
    // Header is three whitespace-terminated lines: magic, dims, scale.
    while lines < 3 {
        let mut line = Vec::new();
        let n = reader.read_until(b'\n', &mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(Error::format(path, "truncated PFM header"));
        }
        let text = String::from_utf8_lossy(&line);
        if text.trim().is_empty() || text.trim_start().starts_with('#') {
            continue;
        }
        header.push(text.trim().to_string());
        lines += 1;
    }
    match header[0].as_str() {
        "Pf" => {}
        "PF" => return Err(Error::format(path, "unsupported format: 3-channel PFM")),
        other => return Err(Error::format(path, format!("unsupported format: magic {other:?}"))),
    }
    let dims: Vec<usize> = header[1]
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| Error::format(path, "bad PFM dimensions")))
        .collect::<Result<_>>()?;
    let [w, h] = dims[..] else {
        return Err(Error::format(path, "bad PFM dimensions"));
    };
    let scale: f64 = header[2]
        .parse()
        .map_err(|_| Error::format(path, "bad PFM scale"))?;
    let little = scale < 0.0;
    let mut raw = vec![0u8; w * h * 4];
    reader
        .read_exact(&mut raw)
        .map_err(|_| Error::format(path, "truncated PFM data"))?;
    let mut values = vec![0.0; w * h];
    for (k, chunk) in raw.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, col) = (h - 1 - k / w, k % w);
        values[row * w + col] = v as f64;
    }
    DepthMap::from_values(w, h, values)
}

/// Writes depth as 16-bit PNG millimeters; invalid pixels become 0.
pub fn write_depth_png16(path: &Path, depth: &DepthMap) -> Result<()> {
    let (w, h) = (depth.width() as u32, depth.height() as u32);
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w, h, |u, v| {
        let (u, v) = (u as usize, v as usize);
        let mm = if depth.is_valid(u, v) {
            (depth.at(u, v) * 1000.0).round().clamp(1.0, u16::MAX as f64) as u16
        } else {
            0
        };
        Luma([mm])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

/// Reads a 16-bit PNG as millimeters; 0 marks an invalid pixel.
pub fn read_depth_png16(path: &Path) -> Result<DepthMap> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    if !matches!(img.color(), image::ColorType::L16) {
        return Err(Error::format(
            path,
            format!("unsupported format: expected 16-bit grayscale PNG, got {:?}", img.color()),
        ));
    }
    let g = img.into_luma16();
    let (w, h) = (g.width() as usize, g.height() as usize);
    let values = g.pixels().map(|p| p.0[0] as f64 / 1000.0).collect();
    DepthMap::from_values(w, h, values)
}

/// Dispatches on extension: `.pfm` or `.png`.
pub fn read_depth(path: &Path) -> Result<DepthMap> {
    match extension(path).as_deref() {
        Some("pfm") => read_pfm(path),
        Some("png") => read_depth_png16(path),
        _ => Err(Error::format(path, "unsupported format: depth must be .pfm or .png")),
    }
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    match extension(path).as_deref() {
        Some("pfm") => write_pfm(path, depth),
        Some("png") => write_depth_png16(path, depth),
        _ => Err(Error::format(path, "unsupported format: depth must be .pfm or .png")),
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase())
}

pub fn read_rgb(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * w * h];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = p.0[c] as f32 / 255.0;
        }
    }
    Image::new(w, h, data)
}

pub fn write_rgb(path: &Path, image: &Image) -> Result<()> {
    let img = RgbImage::from_fn(image.width() as u32, image.height() as u32, |u, v| {
        let p = image.pixel(u as usize, v as usize);
        Rgb(p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn write_mask(path: &Path, mask: &[bool], width: usize, height: usize) -> Result<()> {
    let img: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_fn(width as u32, height as u32, |u, v| Luma([if mask[v as usize * width + u as usize] { 255 } else { 0 }]));
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn read_mask(path: &Path) -> Result<(Vec<bool>, usize, usize)> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.pixels().map(|p| p.0[0] > 127).collect(), w, h))
}

/// ASCII PLY with `x y z` and, when present, `red green blue` as uchar.
pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut out = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(out, "ply\nformat ascii 1.0\nelement vertex {}", cloud.len()).map_err(io)?;
    writeln!(out, "property float x\nproperty float y\nproperty float z").map_err(io)?;
    if cloud.colors.is_some() {
        writeln!(out, "property uchar red\nproperty uchar green\nproperty uchar blue").map_err(io)?;
    }
    writeln!(out, "end_header").map_err(io)?;
    for (i, p) in cloud.points.iter().enumerate() {
        match &cloud.colors {
            Some(c) => {
                let [r, g, b] = c[i].map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
                writeln!(out, "{} {} {} {r} {g} {b}", p[0], p[1], p[2]).map_err(io)?;
            }
            None => writeln!(out, "{} {} {}", p[0], p[1], p[2]).map_err(io)?,
        }
    }
    out.flush().map_err(io)
}

/// Counts `element vertex` in a PLY header.
pub fn ply_vertex_count(path: &Path) -> Result<usize> {
    let reader = BufReader::new(open(path)?);
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if let Some(n) = line.strip_prefix("element vertex ") {
            return n.trim().parse().map_err(|_| Error::format(path, "bad vertex count"));
        }
        if line == "end_header" {
            break;
        }
    }
    Err(Error::format(path, "no vertex element"))
}

/// Viridis stops at 0, 1/8, ..., 1.
const VIRIDIS: [[u8; 3]; 9] = [
    [68, 1, 84],
    [72, 40, 120],
    [62, 73, 137],
    [49, 104, 142],
    [38, 130, 142],
    [31, 158, 137],
    [53, 183, 121],
    [110, 206, 88],
    [253, 231, 37],
];

pub fn viridis(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * 8.0;
    let i = (x.floor() as usize).min(7);
    let f = x - i as f64;
    let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
    std::array::from_fn(|c| (a[c] as f64 + (b[c] as f64 - a[c] as f64) * f).round() as u8)
}

/// Color-maps depth over a fixed `[min, max]` range; invalid pixels are black.
pub fn write_depth_colormap(path: &Path, depth: &DepthMap, min: f64, max: f64) -> Result<()> {
    let span = (max - min).max(f64::EPSILON);
    let img = RgbImage::from_fn(depth.width() as u32, depth.height() as u32, |u, v| {
        let (u, v) = (u as usize, v as usize);
        if depth.is_valid(u, v) {
            Rgb(viridis((depth.at(u, v) - min) / span))
        } else {
            Rgb([0, 0, 0])
        }
    });
    img.save(path).map_err(|e| image_err(path, e))
}

/// Plain line chart of one or more series on a shared y range.
pub fn write_line_plot(path: &Path, series: &[&[f64]], width: u32, height: u32) -> Result<()> {
    const COLORS: [[u8; 3]; 4] = [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40]];
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let margin = 20i64;
    let (x0, x1) = (margin, width as i64 - margin);
    let (y0, y1) = (height as i64 - margin, margin);
    let axis = Rgb([0, 0, 0]);
    draw_line(&mut img, (x0, y0), (x1, y0), axis);
    draw_line(&mut img, (x0, y0), (x0, y1), axis);
    let finite = series.iter().flat_map(|s| s.iter()).filter(|v| v.is_finite());
    let lo = finite.clone().fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = finite.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if lo.is_finite() {
        let span = if hi > lo { hi - lo } else { 1.0 };
        for (k, s) in series.iter().enumerate() {
            let n = s.len().max(2) - 1;
            let pt = |i: usize, v: f64| {
                let x = x0 + ((x1 - x0) as f64 * i as f64 / n as f64) as i64;
                let y = y0 + ((y1 - y0) as f64 * (v - lo) / span) as i64;
                (x, y)
            };
            let color = Rgb(COLORS[k % COLORS.len()]);
            for i in 1..s.len() {
                if s[i - 1].is_finite() && s[i].is_finite() {
                    draw_line(&mut img, pt(i - 1, s[i - 1]), pt(i, s[i]), color);
                }
            }
            if s.len() == 1 && s[0].is_finite() {
                let (x, y) = pt(0, s[0]);
                draw_line(&mut img, (x - 2, y), (x + 2, y), color);
            }
        }
    }
    img.save(path).map_err(|e| image_err(path, e))
}

fn draw_line(img: &mut RgbImage, (mut x, mut y): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let dx = (x1 - x).abs();
    let dy = -(y1 - y).abs();
    let (sx, sy) = (if x < x1 { 1 } else { -1 }, if y < y1 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}
