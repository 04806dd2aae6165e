//! Procedural live/spoof faces with analytic depth.
//!
//! A live sample is a Lambert-shaded ellipsoid on a textured background. A
//! spoof is the same scene re-rendered through an attack channel: a screen
//! replay adds a stripe/moiré interference pattern, a print adds paper grain,
//! desaturation and a faint rectangular border.

use std::f32::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::AttackType;
use crate::raster::{GrayMap, RgbImage};

/// Scene parameters drawn once per sample; the spoof of a scene shares them.
#[derive(Debug, Clone)]
pub(crate) struct Scene {
    size: usize,
    centre: (f32, f32),
    axes: (f32, f32),
    skin: [f32; 3],
    background: [f32; 3],
    bg_waves: [(f32, f32, f32, f32); 3],
    light: [f32; 3],
    gain: f32,
    device: usize,
}

pub(crate) struct Rendered {
    pub image: RgbImage,
    /// Face height map at full resolution, 0 off-face, peak 1.
    pub height: GrayMap,
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

impl Scene {
    pub fn sample(rng: &mut ChaCha8Rng, size: usize, devices: usize) -> Self {
        let s = size as f32;
        let jitter = s / 10.0;
        let a = s * rng.random_range(0.22..0.30);
        let light = {
            let (lx, ly) = (rng.random_range(-0.6..0.6f32), rng.random_range(-0.6..0.6f32));
            let n = (lx * lx + ly * ly + 1.0).sqrt();
            [lx / n, ly / n, 1.0 / n]
        };
        let mut bg_waves = [(0.0, 0.0, 0.0, 0.0); 3];
        for w in &mut bg_waves {
            let theta = rng.random_range(0.0..PI);
            let freq = rng.random_range(0.5..2.5f32);
            *w = (theta.cos() * freq, theta.sin() * freq, rng.random_range(0.0..2.0 * PI), rng.random_range(0.02..0.06));
        }
        Self {
            size,
            centre: (
                s / 2.0 + rng.random_range(-jitter..jitter),
                s / 2.0 + rng.random_range(-jitter..jitter),
            ),
            axes: (a, a * rng.random_range(1.15..1.35)),
            // identity proxy: hue and tone of the skin
            skin: hsv(
                rng.random_range(0.02..0.11),
                rng.random_range(0.25..0.6),
                rng.random_range(0.6..0.95),
            ),
            background: hsv(
                rng.random(),
                rng.random_range(0.1..0.5),
                rng.random_range(0.25..0.7),
            ),
            bg_waves,
            light,
            gain: rng.random_range(0.75..1.1),
            device: rng.random_range(0..devices.max(1)),
        }
    }

    pub fn device(&self) -> usize {
        self.device
    }

    fn sensor_sigma(&self) -> f32 {
        0.004 + 0.004 * self.device as f32
    }

    fn colour_cast(&self) -> [f32; 3] {
        let t = self.device as f32 * 0.03;
        [1.0 + t, 1.0, 1.0 - t]
    }

    /// Renders the scene. `rng` supplies fine texture and sensor noise.
    pub fn render(&self, rng: &mut ChaCha8Rng) -> Rendered {
        let n = self.size;
        let s = n as f32;
        let (cx, cy) = self.centre;
        let (ax, ay) = self.axes;
        let eyes = [
            (cx - 0.38 * ax, cy - 0.25 * ay),
            (cx + 0.38 * ax, cy - 0.25 * ay),
        ];
        let skin_tex = Normal::new(0.0f32, 0.015).unwrap();
        let sensor = Normal::new(0.0f32, self.sensor_sigma()).unwrap();
        let cast = self.colour_cast();

        let mut height = GrayMap::zeros(n, n);
        let mut image = RgbImage::new(n, n);
        for y in 0..n {
            for x in 0..n {
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                let mut bg = 1.0;
                for &(fx, fy, ph, amp) in &self.bg_waves {
                    bg += amp * (2.0 * PI * (fx * px + fy * py) / s + ph).sin();
                }
                let mut rgb = self.background.map(|c| c * bg);

                let u = (px - cx) / ax;
                let v = (py - cy) / ay;
                let r2 = u * u + v * v;
                if r2 < 1.0 {
                    let z = (1.0 - r2).sqrt();
                    height.data[y * n + x] = z;
                    // surface (x, y, a*z); normal from the height gradient
                    let gx = -ax * u / (ax * z.max(0.05));
                    let gy = -ax * v / (ay * z.max(0.05));
                    let norm = (gx * gx + gy * gy + 1.0).sqrt();
                    let nrm = [-gx / norm, -gy / norm, 1.0 / norm];
                    let lambert = (nrm[0] * self.light[0] + nrm[1] * self.light[1] + nrm[2] * self.light[2]).max(0.0);
                    let mut shade = 0.35 + 0.65 * lambert;
                    for &(ex, ey) in &eyes {
                        let d = ((px - ex) / (0.16 * ax)).powi(2) + ((py - ey) / (0.09 * ay)).powi(2);
                        if d < 1.0 {
                            shade *= 0.35 + 0.65 * d;
                        }
                    }
                    let mouth = ((px - cx) / (0.35 * ax)).powi(2) + ((py - cy - 0.45 * ay) / (0.07 * ay)).powi(2);
                    if mouth < 1.0 {
                        shade *= 0.55 + 0.45 * mouth;
                    }
                    let tex = 1.0 + skin_tex.sample(rng);
                    let face = self.skin.map(|c| c * shade * tex);
                    // soft silhouette
                    let alpha = ((1.0 - r2) * 12.0).min(1.0);
                    for c in 0..3 {
                        rgb[c] = alpha * face[c] + (1.0 - alpha) * rgb[c];
                    }
                }
                let grain = sensor.sample(rng);
                let px = [0, 1, 2].map(|c| rgb[c] * self.gain * cast[c] + grain);
                image.set(y, x, px);
            }
        }
        image.clamp01();
        Rendered { image, height }
    }
}

/// Passes a rendered live image through an attack channel.
pub(crate) fn apply_attack(image: &RgbImage, attack: AttackType, rng: &mut ChaCha8Rng) -> RgbImage {
    let n = image.height;
    let s = n as f32;
    let mut out = image.clone();
    match attack {
        AttackType::None => {}
        AttackType::Screen => {
            // two close gratings beat into a moiré pattern on top of visible stripes
            let theta = rng.random_range(0.0..PI);
            let f1 = s / rng.random_range(3.0..6.0f32);
            let f2 = f1 * rng.random_range(1.04..1.12f32);
            let theta2 = theta + rng.random_range(-0.15..0.15f32);
            let amp = rng.random_range(0.10..0.18f32);
            let phase = rng.random_range(0.0..2.0 * PI);
            let tint = [0.95, 1.0, 1.06];
            for y in 0..n {
                for x in 0..n {
                    let (px, py) = (x as f32 / s, y as f32 / s);
                    let g1 = (2.0 * PI * f1 * (px * theta.cos() + py * theta.sin()) + phase).sin();
                    let g2 = (2.0 * PI * f2 * (px * theta2.cos() + py * theta2.sin())).sin();
                    let m = 1.0 + amp * (0.6 * g1 + 0.4 * g1 * g2);
                    let p = image.get(y, x);
                    out.set(y, x, [0, 1, 2].map(|c| (0.05 + 0.9 * p[c]) * m * tint[c]));
                }
            }
        }
        AttackType::Print => {
            let sigma = rng.random_range(0.03..0.06f32);
            let grain = Normal::new(0.0f32, sigma).unwrap();
            let desat = rng.random_range(0.15..0.35f32);
            let inset = rng.random_range(2..(n / 10).max(3));
            let border_dim = rng.random_range(0.12..0.2f32);
            for y in 0..n {
                for x in 0..n {
                    let p = image.get(y, x);
                    let gray = (p[0] + p[1] + p[2]) / 3.0;
                    let g = grain.sample(rng);
                    let on_border = (y == inset || y == n - 1 - inset) && (inset..n - inset).contains(&x)
                        || (x == inset || x == n - 1 - inset) && (inset..n - inset).contains(&y);
                    let dim = if on_border { 1.0 - border_dim } else { 1.0 };
                    out.set(
                        y,
                        x,
                        [0, 1, 2].map(|c| ((1.0 - desat) * p[c] + desat * gray + g) * dim),
                    );
                }
            }
        }
    }
    out.clamp01();
    out
}
