//! Minimal raster plots for report figures.

use image::{Rgb, RgbImage};

use super::Figure;

const W: u32 = 480;
const H: u32 = 320;
const BG: Rgb<u8> = Rgb([255, 255, 255]);
const INK: Rgb<u8> = Rgb([30, 30, 30]);
const PALETTE: [Rgb<u8>; 4] = [Rgb([31, 119, 180]), Rgb([214, 39, 40]), Rgb([44, 160, 44]), Rgb([148, 103, 189])];

pub(super) fn render(fig: &Figure) -> RgbImage {
    match fig {
        Figure::Fields { n, panels, .. } => fields(*n, panels),
        Figure::Histogram { counts, .. } => histogram(counts),
        Figure::Curves { series, .. } => curves(series),
        Figure::Scatter { points, .. } => scatter(points),
    }
}

/// Blue-white-red ramp on `[0, 1]`.
fn ramp(v: f64) -> Rgb<u8> {
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.5 };
    let (r, g, b) = if v < 0.5 {
        let s = v / 0.5;
        (s, s, 1.0)
    } else {
        let s = (1.0 - v) / 0.5;
        (1.0, s, s)
    };
    Rgb([(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8])
}

fn fields(n: usize, panels: &[Vec<f64>]) -> RgbImage {
    let scale = (160 / n.max(1)).max(1) as u32;
    let side = n as u32 * scale;
    let gap = 6;
    let cols = 3.min(panels.len().max(1)) as u32;
    let rows = panels.len().div_ceil(cols as usize).max(1) as u32;
    let mut img = RgbImage::from_pixel(cols * (side + gap) + gap, rows * (side + gap) + gap, BG);
    for (k, p) in panels.iter().enumerate() {
        let (lo, hi) = p
            .iter()
            .filter(|v| v.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let ox = gap + (k as u32 % cols) * (side + gap);
        let oy = gap + (k as u32 / cols) * (side + gap);
        for i in 0..n {
            for j in 0..n {
                let c = ramp((p[i * n + j] - lo) / span);
                for dy in 0..scale {
                    for dx in 0..scale {
                        img.put_pixel(ox + j as u32 * scale + dx, oy + i as u32 * scale + dy, c);
                    }
                }
            }
        }
    }
    img
}

fn frame(img: &mut RgbImage) {
    for x in 20..W - 10 {
        img.put_pixel(x, H - 20, INK);
    }
    for y in 10..H - 20 {
        img.put_pixel(20, y, INK);
    }
}

fn histogram(counts: &[usize]) -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, BG);
    frame(&mut img);
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let k = counts.len().max(1) as u32;
    let bw = ((W - 31) / k).max(1);
    for (i, &c) in counts.iter().enumerate() {
        let h = ((c as f64 / max) * (H - 31) as f64) as u32;
        let x0 = 21 + i as u32 * bw;
        for x in x0..(x0 + bw.saturating_sub(1)).min(W - 10) {
            for y in (H - 20 - h)..(H - 20) {
                img.put_pixel(x, y, PALETTE[0]);
            }
        }
    }
    img
}

fn curves(series: &[Vec<f64>]) -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, BG);
    frame(&mut img);
    let vals = series.iter().flatten().filter(|v| v.is_finite());
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    for (k, s) in series.iter().enumerate() {
        let len = s.len().max(2) as f64 - 1.0;
        for (i, v) in s.iter().enumerate() {
            if !v.is_finite() {
                continue;
            }
            let x = 21 + ((i as f64 / len) * (W - 32) as f64) as u32;
            let y = H - 21 - (((v - lo) / span) * (H - 32) as f64) as u32;
            img.put_pixel(x.min(W - 1), y.min(H - 1), PALETTE[k % PALETTE.len()]);
        }
    }
    img
}

fn scatter(points: &[[f64; 2]]) -> RgbImage {
    let side = H;
    let mut img = RgbImage::from_pixel(side, side, BG);
    let r = points
        .iter()
        .flat_map(|p| p.iter())
        .filter(|v| v.is_finite())
        .fold(1.0f64, |a, v| a.max(v.abs()))
        * 1.1;
    for p in points {
        if !(p[0].is_finite() && p[1].is_finite()) {
            continue;
        }
        let x = ((p[0] / r + 1.0) * 0.5 * (side - 1) as f64) as u32;
        let y = ((1.0 - p[1] / r) * 0.5 * (side - 1) as f64) as u32;
        img.put_pixel(x.min(side - 1), y.min(side - 1), PALETTE[0]);
    }
    img
}
