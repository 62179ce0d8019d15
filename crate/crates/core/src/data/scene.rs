//! Procedural scenes: a tilted background plane with fronto-parallel
//! rectangles and shaded spheres, seen through a pinhole camera.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One RGB image with metric depth and a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthSample {
    /// `[3, H, W]` in `[0, 1]`.
    pub rgb: Tensor<f32>,
    /// `[1, H, W]` in metres.
    pub depth: Tensor<f32>,
    pub mask: Vec<bool>,
}

impl DepthSample {
    pub fn height(&self) -> usize {
        self.depth.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.depth.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::dim("sample", format!("{h}×{w} is not a positive multiple of 32")));
        }
        if self.rgb.shape() != [3, h, w] || self.mask.len() != h * w {
            return Err(Error::dim("sample", format!("rgb {:?} vs depth {:?}", self.rgb.shape(), self.depth.shape())));
        }
        if self.mask.iter().zip(self.depth.data()).any(|(&m, &d)| m && !(d > 0.0)) {
            return Err(Error::Argument("sample: masked pixel without positive depth".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub rects: usize,
    pub spheres: usize,
    pub near: f64,
    pub far: f64,
    /// Surface pattern and shading strength in `[0, 1]`; 0 leaves every
    /// object a flat colour.
    pub texture: f64,
    /// Depth attenuation strength in `[0, 1]`.
    pub fog: f64,
}

impl SceneSpec {
    pub fn from_config(cfg: &ModelConfig, seed: u64, size: usize) -> Self {
        SceneSpec {
            seed,
            height: size,
            width: size,
            rects: cfg.scene_rects,
            spheres: cfg.scene_spheres,
            near: cfg.scene_near,
            far: cfg.scene_far,
            texture: cfg.scene_texture,
            fog: cfg.scene_fog,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("scene: {m}")));
        if self.height == 0 || self.width == 0 || self.height % 32 != 0 || self.width % 32 != 0 {
            return bad(format!("size {}×{} must be positive multiples of 32", self.height, self.width));
        }
        if !(self.near > 0.0 && self.far > self.near && self.far.is_finite()) {
            return bad(format!("depth range ({}, {})", self.near, self.far));
        }
        if !(0.0..=1.0).contains(&self.texture) || !(0.0..=1.0).contains(&self.fog) {
            return bad(format!("texture {} and fog {} must lie in [0, 1]", self.texture, self.fog));
        }
        Ok(())
    }
}

impl fmt::Display for SceneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "seed={} height={} width={} rects={} spheres={} near={} far={} texture={} fog={}",
            self.seed, self.height, self.width, self.rects, self.spheres, self.near, self.far, self.texture, self.fog
        )
    }
}

struct Camera {
    focal: f64,
    cx: f64,
    cy: f64,
}

impl Camera {
    fn new(h: usize, w: usize) -> Self {
        Camera { focal: 0.9 * w as f64, cx: w as f64 / 2.0, cy: h as f64 / 2.0 }
    }

    /// Normalized ray `(x/z, y/z)` through the centre of pixel `(y, x)`.
    fn ray(&self, y: usize, x: usize) -> (f64, f64) {
        ((x as f64 + 0.5 - self.cx) / self.focal, (y as f64 + 0.5 - self.cy) / self.focal)
    }
}

/// Inverse depth of the background, affine in the normalized ray.
struct Plane {
    q0: f64,
    qx: f64,
    qy: f64,
}

impl Plane {
    fn depth(&self, rx: f64, ry: f64) -> f64 {
        1.0 / (self.q0 + self.qx * rx + self.qy * ry)
    }
}

struct Rect {
    z: f64,
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    color: [f64; 3],
}

struct Sphere {
    c: [f64; 3],
    r: f64,
    color: [f64; 3],
}

struct Layout {
    plane: Plane,
    plane_color: [f64; 3],
    rects: Vec<Rect>,
    spheres: Vec<Sphere>,
    /// World size of one checker cell.
    cell: f64,
}

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9)]
}

fn layout(spec: &SceneSpec, cam: &Camera) -> Layout {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (near, far) = (spec.near, spec.far);
    let span = far - near;
    let scale = span / 10.0;

    let z_top = far * rng.gen_range(0.5..0.8);
    let z_bottom = near + span * rng.gen_range(0.15..0.35);
    let (y_top, y_bottom) = (-cam.cy / cam.focal, cam.cy / cam.focal);
    let qy = (1.0 / z_bottom - 1.0 / z_top) / (y_bottom - y_top);
    let q0 = 1.0 / z_top - qy * y_top;
    let qx = rng.gen_range(-0.15..0.15) / z_top / (cam.cx / cam.focal);
    let plane = Plane { q0, qx, qy };
    let plane_color = color(&mut rng);

    let rects = (0..spec.rects)
        .map(|_| {
            let z = near + span * rng.gen_range(0.02..0.5);
            let (hw, hh) = (scale * rng.gen_range(0.15..0.6), scale * rng.gen_range(0.15..0.6));
            let u = rng.gen_range(0.1..0.9) * 2.0 * cam.cx;
            let v = rng.gen_range(0.1..0.9) * 2.0 * cam.cy;
            let (px, py) = (cam.focal * hw / z, cam.focal * hh / z);
            Rect { z, x0: u - px, x1: u + px, y0: v - py, y1: v + py, color: color(&mut rng) }
        })
        .collect();

    let spheres = (0..spec.spheres)
        .map(|_| {
            let r = scale * rng.gen_range(0.15..0.5);
            let z = (near + span * rng.gen_range(0.05..0.5)).max(near + r * 1.01);
            let u = rng.gen_range(0.1..0.9) * 2.0 * cam.cx;
            let v = rng.gen_range(0.1..0.9) * 2.0 * cam.cy;
            let c = [(u - cam.cx) / cam.focal * z, (v - cam.cy) / cam.focal * z, z];
            Sphere { c, r, color: color(&mut rng) }
        })
        .collect();

    Layout { plane, plane_color, rects, spheres, cell: 0.5 * scale }
}

fn checker(p: [f64; 3], cell: f64) -> f64 {
    let k: i64 = p.iter().map(|v| (v / cell).floor() as i64).sum();
    if k.rem_euclid(2) == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Depth of the background plane at pixel `(y, x)`.
pub fn background_depth(spec: &SceneSpec, y: usize, x: usize) -> f64 {
    let cam = Camera::new(spec.height, spec.width);
    let l = layout(spec, &cam);
    let (rx, ry) = cam.ray(y, x);
    l.plane.depth(rx, ry)
}

/// Direction from surfaces towards the light (upper left, behind the camera).
const LIGHT: [f64; 3] = [-0.4, -0.6, -0.7];

/// Renders the scene; also returns per-pixel object labels (0 is the
/// background).
pub(crate) fn render(spec: &SceneSpec) -> Result<(DepthSample, Vec<usize>)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let cam = Camera::new(h, w);
    let l = layout(spec, &cam);
    let light_norm = LIGHT.iter().map(|v| v * v).sum::<f64>().sqrt();
    let fog_ref = spec.near + 0.1 * (spec.far - spec.near);

    let mut rgb = vec![0f32; 3 * h * w];
    let mut depth = vec![0f32; h * w];
    let mut labels = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            let (rx, ry) = cam.ray(y, x);
            let mut z = l.plane.depth(rx, ry);
            let mut label = 0;
            let mut base = l.plane_color;
            let mut pattern = checker([rx * z, ry * z, z], l.cell);
            let mut shade = 1.0;
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            for (i, r) in l.rects.iter().enumerate() {
                if r.z < z && px >= r.x0 && px < r.x1 && py >= r.y0 && py < r.y1 {
                    z = r.z;
                    label = 1 + i;
                    base = r.color;
                    pattern = checker([rx * z - r.x0, ry * z - r.y0, 0.0], l.cell * 0.5);
                    shade = 1.0;
                }
            }
            for (i, s) in l.spheres.iter().enumerate() {
                let dir = [rx, ry, 1.0];
                let a: f64 = dir.iter().map(|v| v * v).sum();
                let b: f64 = dir.iter().zip(&s.c).map(|(d, c)| d * c).sum();
                let cc: f64 = s.c.iter().map(|v| v * v).sum::<f64>() - s.r * s.r;
                let disc = b * b - a * cc;
                if disc < 0.0 {
                    continue;
                }
                let t = (b - disc.sqrt()) / a;
                if t > 0.0 && t < z {
                    z = t;
                    label = 1 + l.rects.len() + i;
                    base = s.color;
                    let n: Vec<f64> = (0..3).map(|k| (dir[k] * t - s.c[k]) / s.r).collect();
                    let lambert = (0..3).map(|k| n[k] * LIGHT[k] / light_norm).sum::<f64>().max(0.0);
                    pattern = 0.0;
                    shade = 0.3 + 0.7 * lambert;
                }
            }
            let texture = 1.0 + 0.5 * spec.texture * pattern;
            let lit = (1.0 - spec.texture) + spec.texture * shade;
            let fog = (1.0 - spec.fog) + spec.fog * (fog_ref / z).min(1.0);
            for (c, channel) in base.iter().enumerate() {
                rgb[(c * h + y) * w + x] = (channel * texture * lit * fog).clamp(0.0, 1.0) as f32;
            }
            depth[y * w + x] = z as f32;
            labels[y * w + x] = label;
        }
    }
    let mask = depth.iter().map(|&d| d > 0.0 && d.is_finite()).collect();
    let sample = DepthSample { rgb: Tensor::new([3, h, w], rgb)?, depth: Tensor::new([1, h, w], depth)?, mask };
    Ok((sample, labels))
}

/// Deterministic in `spec`; nearer objects render larger and, with fog,
/// darker with distance.
pub fn gen_synthetic_scene(spec: &SceneSpec) -> Result<DepthSample> {
    render(spec).map(|(s, _)| s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> SceneSpec {
        SceneSpec::from_config(&ModelConfig::default(), seed, 64)
    }

    #[test]
    fn deterministic_and_valid() {
        for seed in 0..20 {
            let a = gen_synthetic_scene(&spec(seed)).unwrap();
            assert_eq!(a, gen_synthetic_scene(&spec(seed)).unwrap());
            a.validate().unwrap();
            assert!(a.mask.iter().all(|&m| m));
            assert!(a.depth.data().iter().all(|&d| d >= 0.5 && d < 10.0), "seed {seed}");
            assert!(a.rgb.data().iter().all(|&c| (0.0..=1.0).contains(&c)));
        }
        assert_ne!(gen_synthetic_scene(&spec(1)).unwrap(), gen_synthetic_scene(&spec(2)).unwrap());
    }

    #[test]
    fn empty_scene_is_the_background_plane() {
        let s = SceneSpec { rects: 0, spheres: 0, ..spec(4) };
        let d = gen_synthetic_scene(&s).unwrap();
        for (i, &v) in d.depth.data().iter().enumerate() {
            assert_eq!(v, background_depth(&s, i / 64, i % 64) as f32);
        }
    }

    #[test]
    fn flat_texture_gives_flat_objects() {
        let s = SceneSpec { texture: 0.0, fog: 0.0, ..spec(7) };
        let (d, labels) = render(&s).unwrap();
        let n = 64 * 64;
        let mut seen: std::collections::HashMap<usize, [f32; 3]> = Default::default();
        for i in 0..n {
            let px = [d.rgb.data()[i], d.rgb.data()[n + i], d.rgb.data()[2 * n + i]];
            assert_eq!(*seen.entry(labels[i]).or_insert(px), px);
        }
        assert!(seen.len() > 1);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(SceneSpec { near: 0.0, ..spec(0) }.validate().is_err());
        assert!(SceneSpec { far: 0.4, ..spec(0) }.validate().is_err());
        assert!(SceneSpec { height: 48, ..spec(0) }.validate().is_err());
        assert!(SceneSpec { texture: 1.5, ..spec(0) }.validate().is_err());
    }
}
