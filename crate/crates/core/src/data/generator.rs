//! Procedural layered scenes with exact motion ground truth.
//!
//! A scene is a textured background plane plus textured sprites stacked in
//! depth order. Each layer translates with its own constant velocity, so
//! flow, covered pixels and point tracks follow analytically from the layer
//! that is on top at a pixel.

use rand::Rng;

use crate::correspondence::FlowField;
use crate::data::Image;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextureMode {
    Noise,
    Gradient,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Synthetic,
    Real,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Domain::Synthetic => "synthetic",
            Domain::Real => "real",
        })
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Domain::Synthetic),
            "real" => Ok(Domain::Real),
            _ => Err(Error::Config(format!("unknown domain '{s}' (synthetic|real)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    /// Square frame side in pixels.
    pub size: usize,
    /// Inclusive range of sprite counts.
    pub sprite_count: (usize, usize),
    /// Inclusive range of sprite extents in pixels.
    pub sprite_size: (usize, usize),
    /// Largest per-frame displacement component in pixels.
    pub max_disp: usize,
    pub background_motion: bool,
    /// Draw velocities on a quarter-pixel grid instead of integers.
    pub subpixel: bool,
    pub texture: TextureMode,
    /// Gain/bias jitter range of the unlabeled stream.
    pub jitter: f32,
    /// Per-pixel noise amplitude of the unlabeled stream.
    pub distortion: f32,
    /// Frame distance between the two frames of a pair.
    pub gap: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            size: 64,
            sprite_count: (2, 4),
            sprite_size: (12, 28),
            max_disp: 6,
            background_motion: true,
            subpixel: false,
            texture: TextureMode::Noise,
            jitter: 0.15,
            distortion: 0.03,
            gap: 1,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::Config("generator size must be at least 8".into()));
        }
        if self.max_disp * 4 > self.size {
            return Err(Error::Config(format!(
                "max displacement {} exceeds a quarter of the frame size {}",
                self.max_disp, self.size
            )));
        }
        if self.sprite_count.0 > self.sprite_count.1 || self.sprite_size.0 > self.sprite_size.1 || self.sprite_size.0 == 0 {
            return Err(Error::Config("generator ranges must be non-empty".into()));
        }
        if self.gap == 0 {
            return Err(Error::Config("frame gap must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.jitter) || self.distortion < 0.0 {
            return Err(Error::Config("jitter must be in [0,1) and distortion non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Background,
    Rect { half_w: f32, half_h: f32 },
    Ellipse { rx: f32, ry: f32 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Texture {
    pub seed: u32,
    pub base: [f32; 3],
    pub contrast: f32,
    /// Spatial period of the coarsest octave in pixels.
    pub scale: f32,
    pub mode: TextureMode,
    pub ramp: [f32; 2],
}

impl Texture {
    pub fn random<R: Rng>(rng: &mut R, mode: TextureMode, scale: f32) -> Self {
        Self {
            seed: rng.gen(),
            base: [rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75)],
            contrast: rng.gen_range(0.6..0.9),
            scale,
            mode,
            ramp: [rng.gen_range(-0.02..0.02), rng.gen_range(-0.02..0.02)],
        }
    }

    /// Colour at local coordinates `(u, v)`.
    pub fn sample(&self, u: f32, v: f32) -> [f32; 3] {
        let mut out = self.base;
        for (c, o) in out.iter_mut().enumerate() {
            let cs = self.seed.wrapping_add(0x9E37_79B9u32.wrapping_mul(c as u32 + 1));
            let detail = match self.mode {
                TextureMode::Noise => {
                    let mut acc = 0.0;
                    let mut period = self.scale;
                    let mut amp = 0.5;
                    for oct in 0..3u32 {
                        acc += amp * (value_noise(u / period, v / period, cs.wrapping_add(oct * 7919)) - 0.5);
                        period *= 0.5;
                        amp *= 0.6;
                    }
                    acc
                }
                TextureMode::Gradient => {
                    self.ramp[0] * u + self.ramp[1] * v
                        + 0.1 * (value_noise(u / self.scale, v / self.scale, cs) - 0.5)
                }
            };
            *o = (*o + self.contrast * detail).clamp(0.0, 1.0);
        }
        out
    }
}

fn hash2(x: i32, y: i32, seed: u32) -> f32 {
    let mut h = (x as u32).wrapping_mul(0x8DA6_B343) ^ (y as u32).wrapping_mul(0xD816_3841) ^ seed.wrapping_mul(0xCB1A_B31F);
    h ^= h >> 15;
    h = h.wrapping_mul(0x2C1B_3C6D);
    h ^= h >> 12;
    h = h.wrapping_mul(0x297A_2D39);
    h ^= h >> 15;
    (h >> 8) as f32 / (1u32 << 24) as f32
}

fn value_noise(x: f32, y: f32, seed: u32) -> f32 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (sx, sy) = (fx * fx * (3.0 - 2.0 * fx), fy * fy * (3.0 - 2.0 * fy));
    let (ix, iy) = (x0 as i32, y0 as i32);
    let a = hash2(ix, iy, seed);
    let b = hash2(ix + 1, iy, seed);
    let c = hash2(ix, iy + 1, seed);
    let d = hash2(ix + 1, iy + 1, seed);
    let top = a + (b - a) * sx;
    let bot = c + (d - c) * sx;
    top + (bot - top) * sy
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Layer {
    pub shape: Shape,
    /// Centre at time 0 (pixel units; ignored for the background).
    pub origin: (f32, f32),
    /// Displacement per frame `(du, dv)`.
    pub velocity: (f32, f32),
    pub texture: Texture,
}

impl Layer {
    fn local(&self, x: f32, y: f32, t: f32) -> (f32, f32) {
        (
            x - self.origin.0 - t * self.velocity.0,
            y - self.origin.1 - t * self.velocity.1,
        )
    }

    fn covers(&self, x: f32, y: f32, t: f32) -> bool {
        let (u, v) = self.local(x, y, t);
        match self.shape {
            Shape::Background => true,
            Shape::Rect { half_w, half_h } => u.abs() <= half_w && v.abs() <= half_h,
            Shape::Ellipse { rx, ry } => (u / rx).powi(2) + (v / ry).powi(2) <= 1.0,
        }
    }
}

/// Layered scene; `layers[0]` is the background, later layers are in front.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub size: usize,
    pub layers: Vec<Layer>,
}

/// Two frames with optional ground truth (present iff synthetic).
#[derive(Clone, Debug)]
pub struct VideoPair {
    pub frame1: Image,
    pub frame2: Image,
    pub domain: Domain,
    pub gt_flow: Option<FlowField>,
    /// Pixels of frame 1 with no correspondent in frame 2.
    pub covered: Option<Vec<bool>>,
}

/// Ground-truth trajectory of one point, in image pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct GtTrack {
    pub positions: Vec<(f32, f32)>,
    pub visible: Vec<bool>,
    pub layer: usize,
}

#[derive(Clone, Debug)]
pub struct SyntheticClip {
    pub frames: Vec<Image>,
    pub scene: Scene,
    pub tracks: Vec<GtTrack>,
}

fn sample_velocity<R: Rng>(rng: &mut R, max: usize, subpixel: bool) -> (f32, f32) {
    let m = max as i32;
    if subpixel {
        let q = 4 * m;
        (rng.gen_range(-q..=q) as f32 / 4.0, rng.gen_range(-q..=q) as f32 / 4.0)
    } else {
        (rng.gen_range(-m..=m) as f32, rng.gen_range(-m..=m) as f32)
    }
}

impl Scene {
    pub fn random<R: Rng>(cfg: &GeneratorConfig, domain: Domain, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.size as f32;
        // the unlabeled stream gets coarser textures: part of its domain shift
        let tex_scale = match domain {
            Domain::Synthetic => 8.0,
            Domain::Real => 12.0,
        };
        let n = rng.gen_range(cfg.sprite_count.0..=cfg.sprite_count.1);
        let distinct = (2 * cfg.max_disp + 1).pow(2) > n + 1;
        let mut used: Vec<(f32, f32)> = Vec::new();
        let mut velocity = |rng: &mut R, allow_motion: bool| -> (f32, f32) {
            loop {
                let v = if allow_motion {
                    sample_velocity(rng, cfg.max_disp, cfg.subpixel)
                } else {
                    (0.0, 0.0)
                };
                if !distinct || !used.contains(&v) {
                    used.push(v);
                    return v;
                }
                if !allow_motion {
                    return v;
                }
            }
        };
        let bg = Layer {
            shape: Shape::Background,
            origin: (0.0, 0.0),
            velocity: velocity(rng, cfg.background_motion),
            texture: Texture::random(rng, cfg.texture, tex_scale),
        };
        let mut layers = vec![bg];
        for _ in 0..n {
            let ew = rng.gen_range(cfg.sprite_size.0..=cfg.sprite_size.1) as f32;
            let eh = rng.gen_range(cfg.sprite_size.0..=cfg.sprite_size.1) as f32;
            let shape = if rng.gen_bool(0.5) {
                Shape::Rect {
                    half_w: ew / 2.0,
                    half_h: eh / 2.0,
                }
            } else {
                Shape::Ellipse { rx: ew / 2.0, ry: eh / 2.0 }
            };
            layers.push(Layer {
                shape,
                origin: (rng.gen_range(0.0..s), rng.gen_range(0.0..s)),
                velocity: velocity(rng, cfg.max_disp > 0),
                texture: Texture::random(rng, cfg.texture, tex_scale * 0.75),
            });
        }
        Ok(Self { size: cfg.size, layers })
    }

    /// Index of the front-most layer covering pixel `(x, y)` at time `t`.
    pub fn top_layer(&self, x: f32, y: f32, t: f32) -> usize {
        (0..self.layers.len())
            .rev()
            .find(|&l| self.layers[l].covers(x, y, t))
            .unwrap_or(0)
    }

    pub fn render(&self, t: f32) -> Image {
        let n = self.size;
        let mut data = Vec::with_capacity(n * n * 3);
        for y in 0..n {
            for x in 0..n {
                let (xf, yf) = (x as f32, y as f32);
                let l = &self.layers[self.top_layer(xf, yf, t)];
                let (u, v) = l.local(xf, yf, t);
                data.extend_from_slice(&l.texture.sample(u, v));
            }
        }
        Tensor::new(&[n, n, 3], data).expect("rendered frame has consistent extents")
    }

    /// Flow from time `t` to `t + gap`, taken from the top layer at each pixel.
    pub fn flow(&self, t: f32, gap: f32) -> FlowField {
        let n = self.size;
        let mut data = Vec::with_capacity(n * n * 2);
        for y in 0..n {
            for x in 0..n {
                let l = &self.layers[self.top_layer(x as f32, y as f32, t)];
                data.push(l.velocity.0 * gap);
                data.push(l.velocity.1 * gap);
            }
        }
        FlowField::new(Tensor::new(&[n, n, 2], data).expect("flow extents")).expect("finite flow")
    }

    /// Pixels at time `t` whose surface point leaves the frame or is hidden
    /// by another layer at `t + gap`.
    pub fn covered(&self, t: f32, gap: f32) -> Vec<bool> {
        let n = self.size;
        let mut out = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                let li = self.top_layer(x as f32, y as f32, t);
                let v = self.layers[li].velocity;
                let (tx, ty) = ((x as f32 + v.0 * gap).round(), (y as f32 + v.1 * gap).round());
                let outside = tx < 0.0 || ty < 0.0 || tx >= n as f32 || ty >= n as f32;
                out.push(outside || self.top_layer(tx, ty, t + gap) != li);
            }
        }
        out
    }

    /// Pixels where layer `layer` is front-most at time `t`.
    pub fn layer_mask(&self, layer: usize, t: f32) -> Vec<bool> {
        let n = self.size;
        let mut out = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                out.push(self.top_layer(x as f32, y as f32, t) == layer);
            }
        }
        out
    }

    /// Trajectory of the surface point under pixel `(x, y)` at time 0.
    pub fn track(&self, x: f32, y: f32, frames: usize) -> GtTrack {
        let layer = self.top_layer(x, y, 0.0);
        let v = self.layers[layer].velocity;
        let mut positions = Vec::with_capacity(frames);
        let mut visible = Vec::with_capacity(frames);
        let lim = self.size as f32 - 1.0;
        for t in 0..frames {
            let (px, py) = (x + t as f32 * v.0, y + t as f32 * v.1);
            let inside = px >= 0.0 && py >= 0.0 && px <= lim && py <= lim;
            visible.push(inside && self.top_layer(px.round(), py.round(), t as f32) == layer);
            positions.push((px, py));
        }
        GtTrack {
            positions,
            visible,
            layer,
        }
    }
}

/// Photometric shift of the unlabeled stream: per-channel gain, global bias
/// and per-pixel noise.
pub fn apply_jitter<R: Rng>(img: &Image, rng: &mut R, jitter: f32, distortion: f32) -> Image {
    let gain: Vec<f32> = (0..3).map(|_| 1.0 + rng.gen_range(-jitter..=jitter)).collect();
    let bias = rng.gen_range(-jitter..=jitter) * 0.5;
    let mut out = img.clone();
    for px in out.data_mut().chunks_mut(3) {
        for (c, v) in px.iter_mut().enumerate() {
            let noise = if distortion > 0.0 {
                rng.gen_range(-distortion..=distortion)
            } else {
                0.0
            };
            *v = (*v * gain[c] + bias + noise).clamp(0.0, 1.0);
        }
    }
    out
}

/// Draws one frame pair. Synthetic pairs carry flow and covered maps;
/// real-domain pairs are photometrically jittered and carry no labels.
pub fn gen_pair<R: Rng>(cfg: &GeneratorConfig, domain: Domain, rng: &mut R) -> Result<VideoPair> {
    let scene = Scene::random(cfg, domain, rng)?;
    let gap = cfg.gap as f32;
    let frame1 = scene.render(0.0);
    let frame2 = scene.render(gap);
    Ok(match domain {
        Domain::Synthetic => VideoPair {
            frame1,
            frame2,
            domain,
            gt_flow: Some(scene.flow(0.0, gap)),
            covered: Some(scene.covered(0.0, gap)),
        },
        Domain::Real => VideoPair {
            frame1: apply_jitter(&frame1, rng, cfg.jitter, cfg.distortion),
            frame2: apply_jitter(&frame2, rng, cfg.jitter, cfg.distortion),
            domain,
            gt_flow: None,
            covered: None,
        },
    })
}

/// Draws a clip of constant-velocity layers with `points` ground-truth tracks
/// seeded at non-border pixels of frame 0.
pub fn gen_clip<R: Rng>(
    cfg: &GeneratorConfig,
    frames: usize,
    points: usize,
    domain: Domain,
    rng: &mut R,
) -> Result<SyntheticClip> {
    if frames == 0 {
        return Err(Error::invalid("clip needs at least one frame"));
    }
    let scene = Scene::random(cfg, domain, rng)?;
    let mut rendered: Vec<Image> = (0..frames).map(|t| scene.render(t as f32)).collect();
    if domain == Domain::Real {
        rendered = rendered
            .iter()
            .map(|f| apply_jitter(f, rng, cfg.jitter, cfg.distortion))
            .collect();
    }
    let margin = (cfg.size / 8).max(1);
    let mut tracks = Vec::with_capacity(points);
    for _ in 0..points {
        let x = rng.gen_range(margin..cfg.size - margin) as f32;
        let y = rng.gen_range(margin..cfg.size - margin) as f32;
        tracks.push(scene.track(x, y, frames));
    }
    Ok(SyntheticClip {
        frames: rendered,
        scene,
        tracks,
    })
}
