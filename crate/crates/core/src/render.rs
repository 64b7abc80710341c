//! Raster frames and the binary PPM (P6) writer.
//!
//! Rendering is a pure function of its inputs: the same state always
//! produces the same bytes. Videos are out of scope; a run writes numbered
//! frames (`frame_0000.ppm`, ...) that external tools can assemble.

use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const WHITE: [u8; 3] = [255, 255, 255];
pub const BLACK: [u8; 3] = [0, 0, 0];

/// 8-bit RGB image, row-major from the top-left corner.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Frame {
        let mut pixels = Vec::with_capacity(3 * width * height);
        for _ in 0..width * height {
            pixels.extend_from_slice(&fill);
        }
        Frame { width, height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Writes a pixel; coordinates off the canvas are ignored.
    pub fn set(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            return;
        }
        let i = 3 * (y as usize * self.width + x as usize);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, rgb: [u8; 3]) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.set(x, y, rgb);
            }
        }
    }

    pub fn draw_disc(&mut self, cx: f64, cy: f64, radius: f64, rgb: [u8; 3]) {
        let r = radius.ceil() as i64;
        let (icx, icy) = (cx.round() as i64, cy.round() as i64);
        for dy in -r..=r {
            for dx in -r..=r {
                let fx = (icx + dx) as f64 - cx;
                let fy = (icy + dy) as f64 - cy;
                if fx * fx + fy * fy <= radius * radius {
                    self.set(icx + dx, icy + dy, rgb);
                }
            }
        }
    }

    /// Straight segment of the given half-width, drawn by dense sampling.
    pub fn draw_segment(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, hw: f64, rgb: [u8; 3]) {
        let len = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
        let steps = (len * 2.0).ceil().max(1.0) as usize;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            self.draw_disc(x0 + t * (x1 - x0), y0 + t * (y1 - y0), hw, rgb);
        }
    }

    /// Binary PPM: `P6`, dimensions, 255, then raw RGB bytes.
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(self.pixels.len() + 32);
        out.extend_from_slice(format!("P6\n{} {}\n255\n", self.width, self.height).as_bytes());
        out.extend_from_slice(&self.pixels);
        let mut f = std::fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }
}

fn check_finite(q: &[f64]) -> Result<()> {
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("render input"));
    }
    Ok(())
}

fn clamp(v: f64, lo: f64, hi: f64) -> f64 {
    v.max(lo).min(hi)
}

/// Point mass in the plane: axes plus a disc at (q[0], q[1]), viewed on
/// [-2, 2]^2. One-dimensional states sit on the horizontal axis.
pub fn draw_point_mass(q: &[f64]) -> Result<Frame> {
    check_finite(q)?;
    let (w, h) = (320usize, 240usize);
    let mut fr = Frame::new(w, h, BLACK);
    let to_px = |x: f64, y: f64| -> (f64, f64) {
        let sx = (clamp(x, -2.0, 2.0) + 2.0) / 4.0 * (w as f64 - 1.0);
        let sy = (1.0 - (clamp(y, -2.0, 2.0) + 2.0) / 4.0) * (h as f64 - 1.0);
        (sx, sy)
    };
    let grey = [80, 80, 80];
    fr.fill_rect(0, (h / 2) as i64, (w - 1) as i64, (h / 2) as i64, grey);
    fr.fill_rect((w / 2) as i64, 0, (w / 2) as i64, (h - 1) as i64, grey);
    let y = if q.len() > 1 { q[1] } else { 0.0 };
    let (px, py) = to_px(q[0], y);
    fr.draw_disc(px, py, 5.0, WHITE);
    Ok(fr)
}

/// Cart pole: track line, cart rectangle centered at the cart position,
/// pole segment tilted by the pole angle (zero angle points straight up).
pub fn draw_cart_pole(q: &[f64]) -> Result<Frame> {
    check_finite(q)?;
    let (w, h) = (320usize, 240usize);
    let mut fr = Frame::new(w, h, BLACK);
    let track_y = 180.0;
    fr.fill_rect(0, track_y as i64, (w - 1) as i64, track_y as i64, [120, 120, 120]);
    // world x in [-2.4, 2.4] maps across the full width
    let x = clamp(q[0], -2.4, 2.4);
    let theta = q[2];
    let cx = (x + 2.4) / 4.8 * (w as f64 - 1.0);
    let (cw, ch) = (20.0, 12.0);
    fr.fill_rect(
        (cx - cw / 2.0).round() as i64,
        (track_y - ch) as i64,
        (cx + cw / 2.0).round() as i64,
        track_y as i64,
        [200, 200, 200],
    );
    let pivot_y = track_y - ch;
    let pole_len = 60.0;
    let tip_x = cx + pole_len * theta.sin();
    let tip_y = pivot_y - pole_len * theta.cos();
    fr.draw_segment(cx, pivot_y, tip_x, tip_y, 1.5, WHITE);
    Ok(fr)
}

/// Mountain car: hill profile y = sin(3x) over the track range with a car
/// disc riding the curve; positions beyond the range clamp to the border.
pub fn draw_mountain_car(q: &[f64]) -> Result<Frame> {
    check_finite(q)?;
    let (w, h) = (320usize, 240usize);
    let mut fr = Frame::new(w, h, BLACK);
    let (x_lo, x_hi) = (-1.2, 0.6);
    let to_px = |x: f64, y: f64| -> (f64, f64) {
        let sx = (x - x_lo) / (x_hi - x_lo) * (w as f64 - 1.0);
        let sy = (1.0 - (y + 1.2) / 2.4) * (h as f64 - 1.0);
        (sx, sy)
    };
    for c in 0..w {
        let x = x_lo + c as f64 / (w as f64 - 1.0) * (x_hi - x_lo);
        let (_, sy) = to_px(x, (3.0 * x).sin());
        fr.set(c as i64, sy.round() as i64, [120, 120, 120]);
    }
    let goal = to_px(0.45, (3.0f64 * 0.45).sin());
    fr.draw_segment(goal.0, goal.1, goal.0, goal.1 - 20.0, 1.0, [160, 160, 160]);
    let x = clamp(q[0], x_lo, x_hi);
    let (cx, cy) = to_px(x, (3.0 * x).sin());
    fr.draw_disc(cx, cy, 6.0, WHITE);
    Ok(fr)
}

/// Level-set field on an M x M vertex grid: white where the field is
/// positive, black elsewhere. Row 0 is the top of the image (y = 1).
pub fn draw_level_set(field: &[f64], m: usize) -> Result<Frame> {
    check_finite(field)?;
    if field.len() != m * m {
        return Err(Error::shape(format!("level-set field needs {} values, got {}", m * m, field.len())));
    }
    let mut fr = Frame::new(m, m, BLACK);
    for row in 0..m {
        for col in 0..m {
            // field is indexed by (iy, ix) with iy increasing upward
            let iy = m - 1 - row;
            if field[iy * m + col] > 0.0 {
                fr.set(col as i64, row as i64, WHITE);
            }
        }
    }
    Ok(fr)
}

/// Writes `frame_0000.ppm`, `frame_0001.ppm`, ... into a directory.
pub fn write_frames(dir: &Path, frames: &[Frame]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, fr) in frames.iter().enumerate() {
        fr.write_ppm(&dir.join(format!("frame_{i:04}.ppm")))?;
    }
    Ok(())
}
