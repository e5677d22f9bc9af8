//! Clip I/O (numbered PPM/PNG frames, 4:4:4 y4m), CSV reports and SVG curves.
//!
//! y4m files carry RGB in the three planes, in R, G, B order, under the
//! `C444` tag; no YUV conversion is applied.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A frame sequence, `T x H x W x 3`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    frames: Tensor,
    frame_rate: f64,
}

impl Clip {
    pub fn new(frames: Tensor, frame_rate: f64) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 4 || s[3] != 3 || s[0] == 0 {
            return Err(Error::shape("Clip", format!("expected T x H x W x 3, got {s:?}")));
        }
        if s[1] % 2 != 0 || s[2] % 2 != 0 || s[1] == 0 || s[2] == 0 {
            return Err(Error::shape("Clip", format!("frame size {}x{} must be even", s[1], s[2])));
        }
        if let Some(v) = frames.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("Clip", format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { frames, frame_rate })
    }

    /// Builds a clip, clamping values into `[0, 1]` first.
    pub fn clamped(frames: Tensor, frame_rate: f64) -> Result<Self> {
        Self::new(frames.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }), frame_rate)
    }

    pub fn from_frames(frames: &[Tensor], frame_rate: f64) -> Result<Self> {
        let parts: Vec<Tensor> = frames
            .iter()
            .map(|f| {
                let s = f.shape().to_vec();
                f.reshape([&[1], &s[..]].concat())
            })
            .collect::<Result<_>>()?;
        Self::new(Tensor::concat_outer(&parts)?, frame_rate)
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn len(&self) -> usize {
        self.frames.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.dim(1)
    }

    pub fn width(&self) -> usize {
        self.frames.dim(2)
    }

    /// One frame as `H x W x 3`.
    pub fn frame(&self, t: usize) -> Tensor {
        let f = self.frames.slice_outer(t, 1).expect("frame index in range");
        f.reshape(vec![self.height(), self.width(), 3]).expect("frame shape")
    }
}

/// Round-half-up 8-bit quantization.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn dequantize(b: u8) -> f32 {
    b as f32 / 255.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameFormat {
    Ppm,
    Png,
}

impl FrameFormat {
    fn extension(self) -> &'static str {
        match self {
            FrameFormat::Ppm => "ppm",
            FrameFormat::Png => "png",
        }
    }
}

const DEFAULT_FRAME_RATE: f64 = 24.0;

/// Reads a clip from a `.y4m` file, a single `.ppm`/`.png` frame, or a
/// directory of numbered frames (sorted by file name).
pub fn read_clip(path: impl AsRef<Path>) -> Result<Clip> {
    let path = path.as_ref();
    if path.is_dir() {
        return read_frame_dir(path);
    }
    match extension(path).as_deref() {
        Some("y4m") => read_y4m(path),
        Some("ppm") | Some("png") => {
            let (h, w, data) = read_frame(path)?;
            Clip::new(Tensor::new(vec![1, h, w, 3], data)?, DEFAULT_FRAME_RATE)
        }
        _ => Err(Error::Unsupported {
            path: path.to_path_buf(),
            detail: "expected a frame directory, .y4m, .ppm or .png".into(),
        }),
    }
}

/// Writes a `.y4m` file when the path has that extension, otherwise a
/// directory of numbered PPM frames.
pub fn write_clip(clip: &Clip, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if extension(path).as_deref() == Some("y4m") {
        write_y4m(clip, path)
    } else {
        write_frames(clip, path, FrameFormat::Ppm)
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase())
}

/// Writes frames as `0001.ext`, `0002.ext`, ... into `dir`.
pub fn write_frames(clip: &Clip, dir: impl AsRef<Path>, format: FrameFormat) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = (clip.height(), clip.width());
    let per = h * w * 3;
    for t in 0..clip.len() {
        let bytes: Vec<u8> = clip.frames().data()[t * per..(t + 1) * per]
            .iter()
            .map(|&v| quantize(v))
            .collect();
        let path = dir.join(format!("{:04}.{}", t + 1, format.extension()));
        match format {
            FrameFormat::Ppm => {
                let mut out = Vec::with_capacity(bytes.len() + 32);
                write!(out, "P6\n{w} {h}\n255\n").expect("in-memory write");
                out.extend_from_slice(&bytes);
                fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
            }
            FrameFormat::Png => {
                image::save_buffer(&path, &bytes, w as u32, h as u32, image::ExtendedColorType::Rgb8)?;
            }
        }
    }
    Ok(())
}

fn read_frame_dir(dir: &Path) -> Result<Clip> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(extension(p).as_deref(), Some("ppm") | Some("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::format(dir, "no .ppm or .png frames found"));
    }
    let mut data = Vec::new();
    let mut size = None;
    for p in &paths {
        let (h, w, frame) = read_frame(p)?;
        match size {
            None => size = Some((h, w)),
            Some(s) if s != (h, w) => {
                return Err(Error::format(
                    p,
                    format!("frame is {w}x{h}, earlier frames are {}x{}", s.1, s.0),
                ))
            }
            _ => {}
        }
        data.extend(frame);
    }
    let (h, w) = size.expect("at least one frame");
    Clip::new(Tensor::new(vec![paths.len(), h, w, 3], data)?, DEFAULT_FRAME_RATE)
}

fn read_frame(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    match extension(path).as_deref() {
        Some("ppm") => read_ppm(path),
        _ => {
            let img = image::open(path)?;
            if !matches!(
                img.color(),
                image::ColorType::Rgb8 | image::ColorType::Rgba8 | image::ColorType::L8 | image::ColorType::La8
            ) {
                return Err(Error::Unsupported {
                    path: path.to_path_buf(),
                    detail: format!("{:?} pixels; only 8-bit frames are supported", img.color()),
                });
            }
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            Ok((h as usize, w as usize, rgb.as_raw().iter().map(|&b| dequantize(b)).collect()))
        }
    }
}

/// Whitespace-separated header tokens, skipping `#` comments.
fn ppm_tokens(bytes: &[u8], count: usize) -> Option<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return None;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    Some((tokens, i + 1))
}

fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (tokens, offset) = ppm_tokens(&bytes, 4).ok_or_else(|| Error::format(path, "truncated PPM header"))?;
    if tokens[0] != "P6" {
        return Err(Error::Unsupported {
            path: path.to_path_buf(),
            detail: format!("magic {:?}; only binary P6 is supported", tokens[0]),
        });
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::format(path, format!("bad header field {s:?}")));
    let (w, h, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if maxval != 255 {
        return Err(Error::Unsupported {
            path: path.to_path_buf(),
            detail: format!("maxval {maxval}; only 8-bit frames are supported"),
        });
    }
    let raster = bytes.get(offset..offset + w * h * 3).ok_or_else(|| Error::format(path, "truncated raster"))?;
    Ok((h, w, raster.iter().map(|&b| dequantize(b)).collect()))
}

fn read_y4m(path: &Path) -> Result<Clip> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut header = String::new();
    reader.read_line(&mut header).map_err(|e| Error::io(path, e))?;
    let mut fields = header.split_whitespace();
    if fields.next() != Some("YUV4MPEG2") {
        return Err(Error::format(path, "missing YUV4MPEG2 signature"));
    }
    let (mut w, mut h, mut rate, mut colorspace) = (0usize, 0usize, DEFAULT_FRAME_RATE, "420".to_string());
    for f in fields {
        let (tag, value) = f.split_at(1);
        match tag {
            "W" => w = value.parse().map_err(|_| Error::format(path, format!("bad width {value:?}")))?,
            "H" => h = value.parse().map_err(|_| Error::format(path, format!("bad height {value:?}")))?,
            "F" => {
                if let Some((n, d)) = value.split_once(':') {
                    let (n, d): (f64, f64) = (n.parse().unwrap_or(0.0), d.parse().unwrap_or(0.0));
                    if n > 0.0 && d > 0.0 {
                        rate = n / d;
                    }
                }
            }
            "C" => colorspace = value.to_string(),
            _ => {}
        }
    }
    if colorspace != "444" {
        return Err(Error::Unsupported {
            path: path.to_path_buf(),
            detail: format!("colorspace C{colorspace}; only 8-bit C444 is supported"),
        });
    }
    if w == 0 || h == 0 {
        return Err(Error::format(path, "missing frame size"));
    }
    let plane = w * h;
    let mut data = Vec::new();
    let mut frames = 0;
    let mut raw = vec![0u8; plane * 3];
    loop {
        let mut line = String::new();
        let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        if !line.starts_with("FRAME") {
            return Err(Error::format(path, format!("frame {}: missing FRAME marker", frames + 1)));
        }
        reader
            .read_exact(&mut raw)
            .map_err(|_| Error::format(path, format!("frame {}: truncated", frames + 1)))?;
        for i in 0..plane {
            for c in 0..3 {
                data.push(dequantize(raw[c * plane + i]));
            }
        }
        frames += 1;
    }
    if frames == 0 {
        return Err(Error::format(path, "no frames"));
    }
    Clip::new(Tensor::new(vec![frames, h, w, 3], data)?, rate)
}

fn write_y4m(clip: &Clip, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let (h, w) = (clip.height(), clip.width());
    let (num, den) = rate_fraction(clip.frame_rate());
    let io = |e| Error::io(path, e);
    write!(out, "YUV4MPEG2 W{w} H{h} F{num}:{den} Ip A1:1 C444\n").map_err(io)?;
    let plane = w * h;
    let mut raw = vec![0u8; plane * 3];
    for t in 0..clip.len() {
        let px = &clip.frames().data()[t * plane * 3..(t + 1) * plane * 3];
        for i in 0..plane {
            for c in 0..3 {
                raw[c * plane + i] = quantize(px[i * 3 + c]);
            }
        }
        out.write_all(b"FRAME\n").map_err(io)?;
        out.write_all(&raw).map_err(io)?;
    }
    out.flush().map_err(io)
}

fn rate_fraction(rate: f64) -> (u64, u64) {
    if rate > 0.0 && (rate - rate.round()).abs() < 1e-9 {
        (rate.round() as u64, 1)
    } else if rate > 0.0 {
        ((rate * 1000.0).round() as u64, 1000)
    } else {
        (DEFAULT_FRAME_RATE as u64, 1)
    }
}

/// A table of named columns, stored row by row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Report {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    /// Builds a report from equal-length named columns.
    pub fn from_columns(columns: &[(&str, Vec<String>)]) -> Result<Self> {
        let n = columns.first().map_or(0, |c| c.1.len());
        if columns.iter().any(|c| c.1.len() != n) {
            return Err(Error::invalid("Report", "columns have different lengths"));
        }
        let mut r = Self::new(columns.iter().map(|c| c.0));
        for i in 0..n {
            r.rows.push(columns.iter().map(|c| c.1[i].clone()).collect());
        }
        Ok(r)
    }

    pub fn push<S: ToString>(&mut self, row: impl IntoIterator<Item = S>) -> Result<()> {
        let row: Vec<String> = row.into_iter().map(|s| s.to_string()).collect();
        if row.len() != self.header.len() {
            return Err(Error::invalid(
                "Report",
                format!("row has {} cells, header has {}", row.len(), self.header.len()),
            ));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i].as_str()).collect())
    }
}

pub fn emit_report(report: &Report, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if report.rows.is_empty() || report.header.is_empty() {
        return Err(Error::invalid("emit_report", "empty table"));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&report.header)?;
    for row in &report.rows {
        w.write_record(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// SVG line plot of `ys` against `xs`; larger y is drawn higher.
pub fn render_curve(xs: &[f64], ys: &[f64], title: &str, x_label: &str, y_label: &str) -> Result<String> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::invalid("emit_curve", "need equal-length, non-empty series"));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::invalid("emit_curve", "non-finite sample"));
    }
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    let range = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, lo + 0.5)
        }
    };
    let (x0, x1) = range(xs);
    let (y0, y1) = range(ys);
    let px = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let py = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<path d="M {M} {M} L {M} {b} L {r} {b}" fill="none" stroke="black"/>"#,
        b = H - M,
        r = W - M
    );
    let _ = writeln!(svg, r#"<text x="{}" y="25" text-anchor="middle">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    for (v, anchor) in [(x0, "start"), (x1, "end")] {
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{}" text-anchor="{anchor}" font-size="11">{v:.3}</text>"#,
            px(v),
            H - M + 15.0
        );
    }
    for v in [y0, y1] {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.2}" text-anchor="end" font-size="11">{v:.3}</text>"#,
            M - 4.0,
            py(v)
        );
    }
    let points: Vec<String> = xs.iter().zip(ys).map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
    let _ = writeln!(
        svg,
        r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#,
        points.join(" ")
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn emit_curve(xs: &[f64], ys: &[f64], path: impl AsRef<Path>) -> Result<()> {
    emit_curve_labeled(xs, ys, "", "x", "y", path)
}

pub fn emit_curve_labeled(
    xs: &[f64],
    ys: &[f64],
    title: &str,
    x_label: &str,
    y_label: &str,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let svg = render_curve(xs, ys, title, x_label, y_label)?;
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Polyline vertices of a rendered curve, for inspection in tests.
pub fn polyline_points(svg: &str) -> Vec<(f64, f64)> {
    let Some(start) = svg.find("points=\"") else {
        return Vec::new();
    };
    let rest = &svg[start + 8..];
    let end = rest.find('"').unwrap_or(rest.len());
    rest[..end]
        .split_whitespace()
        .filter_map(|p| {
            let (x, y) = p.split_once(',')?;
            Some((x.parse().ok()?, y.parse().ok()?))
        })
        .collect()
}
