//! Minimal raster figures: image grids, overlaid histograms, line charts and
//! heat maps. Every figure is also written as plain data elsewhere, so these
//! carry no axes or labels.

use std::path::Path;

use image::{Rgb, RgbImage};

use biva::evaluation::Histogram;
use biva::{Likelihood, Scalar, Tensor};

use crate::error::{CliError, Result};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: u32 = 20;
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

pub fn color(i: usize) -> Rgb<u8> {
    Rgb(PALETTE[i % PALETTE.len()])
}

/// Converts a batch of model outputs `[N, C, H, W]` to 8-bit pixels.
/// Bernoulli outputs are probabilities; the mixture likelihood already
/// yields 0..=255 levels.
pub fn to_pixels<T: Scalar>(images: &Tensor<T>, likelihood: Likelihood) -> Result<Vec<Vec<u8>>> {
    let shape = images.shape();
    if shape.len() != 4 {
        return Err(CliError::Usage(format!("image grids need [N, C, H, W] outputs, got {shape:?}")));
    }
    let per = shape[1] * shape[2] * shape[3];
    let scale = match likelihood {
        Likelihood::Bernoulli => 255.0,
        _ => 1.0,
    };
    Ok(images
        .data()
        .chunks(per)
        .map(|img| img.iter().map(|v| (v.f64() * scale).round().clamp(0.0, 255.0) as u8).collect())
        .collect())
}

/// Tiles `images` (each `C·H·W`, channel-first, one or three channels) into
/// a grid with `cols` columns and a one-pixel gutter.
pub fn image_grid(images: &[Vec<u8>], channels: usize, h: usize, w: usize, cols: usize) -> Result<RgbImage> {
    if images.is_empty() || cols == 0 {
        return Err(CliError::Usage("nothing to tile".into()));
    }
    if channels != 1 && channels != 3 {
        return Err(CliError::Usage(format!("cannot render {channels}-channel images")));
    }
    let rows = images.len().div_ceil(cols);
    let gw = (cols * (w + 1) + 1) as u32;
    let gh = (rows * (h + 1) + 1) as u32;
    let mut out = RgbImage::from_pixel(gw, gh, Rgb([64, 64, 64]));
    let plane = h * w;
    for (n, img) in images.iter().enumerate() {
        if img.len() != channels * plane {
            return Err(CliError::Usage(format!("image {n} has {} values, expected {}", img.len(), channels * plane)));
        }
        let (r, c) = (n / cols, n % cols);
        for y in 0..h {
            for x in 0..w {
                let at = |ch: usize| img[ch * plane + y * w + x];
                let px = if channels == 1 { Rgb([at(0); 3]) } else { Rgb([at(0), at(1), at(2)]) };
                out.put_pixel((c * (w + 1) + 1 + x) as u32, (r * (h + 1) + 1 + y) as u32, px);
            }
        }
    }
    Ok(out)
}

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, BACKGROUND);
    let axis = Rgb([0, 0, 0]);
    for x in MARGIN..WIDTH - MARGIN {
        img.put_pixel(x, HEIGHT - MARGIN, axis);
    }
    for y in MARGIN..=HEIGHT - MARGIN {
        img.put_pixel(MARGIN, y, axis);
    }
    img
}

fn blend(img: &mut RgbImage, x: u32, y: u32, c: Rgb<u8>, alpha: f64) {
    let p = img.get_pixel_mut(x, y);
    for k in 0..3 {
        p.0[k] = (p.0[k] as f64 * (1.0 - alpha) + c.0[k] as f64 * alpha).round() as u8;
    }
}

fn draw_line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let (x, y) = (x0 + (x1 - x0) * t, y0 + (y1 - y0) * t);
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}

/// Two histograms on a shared range, drawn as translucent bars.
pub fn histograms(path: &Path, series: &[&Histogram]) -> Result<()> {
    let mut img = canvas();
    let peak = series.iter().flat_map(|h| h.counts.iter()).copied().max().unwrap_or(0).max(1) as f64;
    let (pw, ph) = ((WIDTH - 2 * MARGIN) as f64, (HEIGHT - 2 * MARGIN) as f64);
    for (i, h) in series.iter().enumerate() {
        let bins = h.counts.len().max(1) as f64;
        for (b, &count) in h.counts.iter().enumerate() {
            let x0 = MARGIN as f64 + pw * b as f64 / bins;
            let x1 = MARGIN as f64 + pw * (b + 1) as f64 / bins;
            let top = (HEIGHT - MARGIN) as f64 - ph * count as f64 / peak;
            for x in x0.round() as u32..(x1.round() as u32).max(x0.round() as u32 + 1) {
                for y in top.round() as u32..HEIGHT - MARGIN {
                    if x < WIDTH {
                        blend(&mut img, x, y, color(i), 0.45);
                    }
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}

/// Polylines in data coordinates, scaled to fit jointly.
pub fn lines(path: &Path, series: &[Vec<(f64, f64)>]) -> Result<()> {
    let mut img = canvas();
    let pts = series.iter().flatten().filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut xl, mut xh, mut yl, mut yh) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        xl = xl.min(x);
        xh = xh.max(x);
        yl = yl.min(y);
        yh = yh.max(y);
    }
    if !xl.is_finite() {
        img.save(path)?;
        return Ok(());
    }
    let xr = (xh - xl).max(1e-12);
    let yr = (yh - yl).max(1e-12);
    let (pw, ph) = ((WIDTH - 2 * MARGIN) as f64, (HEIGHT - 2 * MARGIN) as f64);
    let map = |(x, y): (f64, f64)| (MARGIN as f64 + pw * (x - xl) / xr, (HEIGHT - MARGIN) as f64 - ph * (y - yl) / yr);
    for (i, s) in series.iter().enumerate() {
        for w in s.windows(2) {
            draw_line(&mut img, map(w[0]), map(w[1]), color(i));
        }
        if let [only] = s.as_slice() {
            let (x, y) = map(*only);
            draw_line(&mut img, (x - 2.0, y), (x + 2.0, y), color(i));
        }
    }
    img.save(path)?;
    Ok(())
}

/// Row-major `cells × cells` counts as a grey-scale map, first index down.
pub fn heatmap(path: &Path, counts: &[usize], cells: usize, scale: u32) -> Result<()> {
    if counts.len() != cells * cells {
        return Err(CliError::Usage(format!("{} counts for a {cells}x{cells} grid", counts.len())));
    }
    let peak = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let side = cells as u32 * scale;
    let mut img = RgbImage::new(side, side);
    for (idx, &c) in counts.iter().enumerate() {
        let v = 255 - (255.0 * (c as f64 / peak).sqrt()).round() as u8;
        let (i, j) = ((idx / cells) as u32, (idx % cells) as u32);
        for dy in 0..scale {
            for dx in 0..scale {
                img.put_pixel(j * scale + dx, side - 1 - (i * scale + dy), Rgb([v, v, v]));
            }
        }
    }
    img.save(path)?;
    Ok(())
}
