//! Raster chart of an element analysis: smoothed band, shaded forecast
//! period, ratings with +-2 sigma_v error bars.

use image::{Rgb, RgbImage};

use ipdm_core::{Error, Result};

use crate::ops::DeteriorationAnalysis;

const W: u32 = 640;
const H: u32 = 360;
const LEFT: f64 = 40.0;
const RIGHT: f64 = 10.0;
const TOP: f64 = 10.0;
const BOTTOM: f64 = 30.0;

struct Canvas {
    img: RgbImage,
    x: (f64, f64),
    y: (f64, f64),
}

impl Canvas {
    fn px(&self, x: f64) -> f64 {
        let span = (self.x.1 - self.x.0).max(1e-9);
        LEFT + (W as f64 - LEFT - RIGHT) * (x - self.x.0) / span
    }

    fn py(&self, y: f64) -> f64 {
        let y = y.clamp(self.y.0, self.y.1);
        H as f64 - BOTTOM - (H as f64 - TOP - BOTTOM) * (y - self.y.0) / (self.y.1 - self.y.0)
    }

    fn put(&mut self, x: f64, y: f64, c: Rgb<u8>) {
        if x >= 0.0 && y >= 0.0 && (x as u32) < W && (y as u32) < H {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    fn vline(&mut self, x: f64, y0: f64, y1: f64, c: Rgb<u8>) {
        let (a, b) = if y0 < y1 { (y0, y1) } else { (y1, y0) };
        let mut y = a;
        while y <= b {
            self.put(x, y, c);
            y += 1.0;
        }
    }

    fn line(&mut self, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>) {
        let n = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
        for k in 0..=n {
            let t = k as f64 / n as f64;
            self.put(x0 + t * (x1 - x0), y0 + t * (y1 - y0), c);
        }
    }
}

pub fn analysis_png(a: &DeteriorationAnalysis) -> Result<Vec<u8>> {
    let years = a.states.iter().map(|s| s.year).chain(a.observations.iter().map(|o| o.year));
    let (x0, x1) = years.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| (lo.min(y), hi.max(y)));
    let (x0, x1) = if x0.is_finite() { (x0, x1.max(x0 + 1.0)) } else { (0.0, 1.0) };
    let mut c = Canvas {
        img: RgbImage::from_pixel(W, H, Rgb([255, 255, 255])),
        x: (x0, x1),
        y: (a.scale.lower, a.scale.upper),
    };

    if let Some(start) = a.states.iter().find(|s| s.kind == "forecast").map(|s| s.year - 1.0) {
        let (p0, p1) = (c.px(start), c.px(x1));
        let mut x = p0;
        while x <= p1 {
            c.vline(x, TOP, H as f64 - BOTTOM, Rgb([235, 235, 235]));
            x += 1.0;
        }
    }
    // band: fill between consecutive states column by column
    for w in a.states.windows(2) {
        let (pa, pb) = (c.px(w[0].year), c.px(w[1].year));
        let mut x = pa;
        while x <= pb {
            let t = if pb > pa { (x - pa) / (pb - pa) } else { 0.0 };
            let lo = w[0].condition_low + t * (w[1].condition_low - w[0].condition_low);
            let hi = w[0].condition_high + t * (w[1].condition_high - w[0].condition_high);
            let (ylo, yhi) = (c.py(lo), c.py(hi));
            c.vline(x, yhi, ylo, Rgb([190, 210, 240]));
            x += 1.0;
        }
    }
    for w in a.states.windows(2) {
        let col = if w[1].kind == "forecast" { Rgb([200, 90, 20]) } else { Rgb([20, 60, 160]) };
        let p = (c.px(w[0].year), c.py(w[0].condition_mean));
        let q = (c.px(w[1].year), c.py(w[1].condition_mean));
        c.line(p, q, col);
        c.line((p.0, p.1 + 1.0), (q.0, q.1 + 1.0), col);
    }
    for o in &a.observations {
        let Some(y) = o.condition else { continue };
        let x = c.px(o.year);
        let col = if o.outlier { Rgb([200, 0, 0]) } else { Rgb([0, 0, 0]) };
        let (lo, hi) = (c.py(y - 2.0 * o.sigma_v), c.py(y + 2.0 * o.sigma_v));
        c.vline(x, hi, lo, col);
        for d in -2..=2 {
            for e in -2..=2 {
                c.put(x + d as f64, c.py(y) + e as f64, col);
            }
        }
    }
    let (xl, yb) = (LEFT, H as f64 - BOTTOM);
    c.line((xl, TOP), (xl, yb), Rgb([0, 0, 0]));
    c.line((xl, yb), (W as f64 - RIGHT, yb), Rgb([0, 0, 0]));
    let mut bytes = Vec::new();
    c.img
        .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Other(format!("encoding plot: {e}")))?;
    Ok(bytes)
}
