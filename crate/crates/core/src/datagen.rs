//! Synthetic fully segmented scenes and square padding.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::rng;
use crate::tensor::Tensor;

pub const BACKGROUND: u32 = 0;

const MAX_ATTEMPTS: u64 = 64;
const MIN_COLOR_DISTANCE: f64 = 0.35;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub size: usize,
    /// Entity count bounds, background included.
    pub min_entities: usize,
    pub max_entities: usize,
    /// Relative odds of ellipse, rectangle and triangle.
    pub shape_weights: [f64; 3],
    /// Amplitude of the per-entity linear shading.
    pub color_jitter: f64,
    /// Amplitude of the per-pixel uniform texture.
    pub texture_noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            size: 32,
            min_entities: 2,
            max_entities: 12,
            shape_weights: [1.0, 1.0, 1.0],
            color_jitter: 0.15,
            texture_noise: 0.1,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 4 {
            return Err(Error::InvalidArgument(format!("canvas size {} below 4", self.size)));
        }
        if self.min_entities < 1 || self.min_entities > self.max_entities {
            return Err(Error::InvalidArgument(format!(
                "entity range [{}, {}] is empty",
                self.min_entities, self.max_entities
            )));
        }
        if self.max_entities > self.size * self.size {
            return Err(Error::InvalidArgument(format!("{} entities cannot fit on the canvas", self.max_entities)));
        }
        let w = self.shape_weights;
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidArgument(format!("bad shape weights {w:?}")));
        }
        for (name, v) in [("color_jitter", self.color_jitter), ("texture_noise", self.texture_noise)] {
            if !(v.is_finite() && (0.0..=1.0).contains(&v)) {
                return Err(Error::InvalidArgument(format!("{name} {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Fails when a palette with `capacity` classes could overflow.
    pub fn check_capacity(&self, capacity: usize) -> Result<()> {
        if self.max_entities > capacity {
            return Err(Error::Capacity(self.max_entities, capacity));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[1, 3, H, W]`, values in `[-1, 1]`.
    pub image: Tensor<f32>,
    /// Dense entity ids, background `0`.
    pub entities: LabelMap,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, cos: f64, sin: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Triangle([(f64, f64); 3]),
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Ellipse { cy, cx, ry, rx, cos, sin } => {
                let (dy, dx) = (y - cy, x - cx);
                let (u, v) = (dx * cos + dy * sin, -dx * sin + dy * cos);
                (u / rx) * (u / rx) + (v / ry) * (v / ry) <= 1.0
            }
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y <= y1 && x >= x0 && x <= x1,
            Shape::Triangle(p) => {
                let edge = |a: (f64, f64), b: (f64, f64)| (b.1 - a.1) * (y - a.0) - (b.0 - a.0) * (x - a.1);
                let d = [edge(p[0], p[1]), edge(p[1], p[2]), edge(p[2], p[0])];
                d.iter().all(|v| *v >= 0.0) || d.iter().all(|v| *v <= 0.0)
            }
        }
    }
}

fn random_shape(rng: &mut rng::Rng, cfg: &SceneConfig) -> Shape {
    let s = cfg.size as f64;
    let total: f64 = cfg.shape_weights.iter().sum();
    let mut pick = rng.random::<f64>() * total;
    let mut kind = 2;
    for (k, w) in cfg.shape_weights.iter().enumerate() {
        if pick < *w {
            kind = k;
            break;
        }
        pick -= w;
    }
    let (lo, hi) = (0.08 * s, 0.35 * s);
    match kind {
        0 => {
            let angle = rng.random::<f64>() * core::f64::consts::PI;
            Shape::Ellipse {
                cy: rng.random::<f64>() * s,
                cx: rng.random::<f64>() * s,
                ry: rng.random_range(lo..hi),
                rx: rng.random_range(lo..hi),
                cos: libm::cos(angle),
                sin: libm::sin(angle),
            }
        }
        1 => {
            let (h, w) = (rng.random_range(2.0 * lo..2.0 * hi), rng.random_range(2.0 * lo..2.0 * hi));
            let (y0, x0) = (rng.random_range(-0.5 * h..s - 0.5 * h), rng.random_range(-0.5 * w..s - 0.5 * w));
            Shape::Rect { y0, x0, y1: y0 + h, x1: x0 + w }
        }
        _ => {
            let (cy, cx) = (rng.random::<f64>() * s, rng.random::<f64>() * s);
            let mut pts = [(0.0, 0.0); 3];
            for (k, p) in pts.iter_mut().enumerate() {
                let angle = (k as f64 + rng.random_range(-0.3..0.3)) * 2.0 * core::f64::consts::PI / 3.0;
                let r = rng.random_range(lo..1.5 * hi);
                *p = (cy + r * libm::sin(angle), cx + r * libm::cos(angle));
            }
            Shape::Triangle(pts)
        }
    }
}

fn random_color(rng: &mut rng::Rng, taken: &[[f64; 3]]) -> [f64; 3] {
    let mut best = [0.0; 3];
    let mut best_gap = f64::NEG_INFINITY;
    for _ in 0..32 {
        let c = [rng.random_range(-0.85..0.85), rng.random_range(-0.85..0.85), rng.random_range(-0.85..0.85)];
        let gap = taken
            .iter()
            .map(|t| libm::sqrt(t.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum()))
            .fold(f64::INFINITY, f64::min);
        if gap >= MIN_COLOR_DISTANCE {
            return c;
        }
        if gap > best_gap {
            (best, best_gap) = (c, gap);
        }
    }
    best
}

/// Composites z-ordered opaque shapes over a background. Entities hidden by
/// later shapes are dropped; ids are renumbered densely in paint order.
pub fn synth_scene(seed: u64, cfg: &SceneConfig) -> Result<Sample> {
    cfg.validate()?;
    let n = cfg.size;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = rng::keyed(seed, attempt, 0x5CE7E);
        let target = rng.random_range(cfg.min_entities..=cfg.max_entities);
        let mut owner = vec![0usize; n * n];
        let mut painted = 1;
        let mut tries = 0;
        let mut shapes = 0;
        // Keep adding shapes until the visible count reaches the target.
        while painted < target && tries < 8 * cfg.max_entities {
            tries += 1;
            shapes += 1;
            let shape = random_shape(&mut rng, cfg);
            let mut any = false;
            for r in 0..n {
                for c in 0..n {
                    if shape.contains(r as f64 + 0.5, c as f64 + 0.5) {
                        owner[r * n + c] = shapes;
                        any = true;
                    }
                }
            }
            if any {
                painted = count_visible(&owner, shapes);
            }
        }
        let mut dense = vec![u32::MAX; shapes + 1];
        let mut next = 0;
        for (id, slot) in dense.iter_mut().enumerate() {
            if owner.contains(&id) {
                *slot = next;
                next += 1;
            }
        }
        let visible = next as usize;
        if dense[0] != BACKGROUND || visible < cfg.min_entities || visible > cfg.max_entities {
            continue;
        }
        let entities = LabelMap::new(n, n, owner.iter().map(|&o| dense[o]).collect())?;
        let image = render(&mut rng, &entities, visible, cfg);
        return Ok(Sample { image, entities });
    }
    Err(Error::InvalidArgument(format!("no valid scene for seed {seed} within {MAX_ATTEMPTS} attempts")))
}

fn count_visible(owner: &[usize], shapes: usize) -> usize {
    let mut seen = vec![false; shapes + 1];
    for &o in owner {
        seen[o] = true;
    }
    seen.iter().filter(|s| **s).count()
}

fn render(rng: &mut rng::Rng, entities: &LabelMap, count: usize, cfg: &SceneConfig) -> Tensor<f32> {
    let n = cfg.size;
    let mut colors: Vec<[f64; 3]> = Vec::with_capacity(count);
    let mut shading = Vec::with_capacity(count);
    for _ in 0..count {
        let c = random_color(rng, &colors);
        colors.push(c);
        shading.push((rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    }
    let mut image = Tensor::zeros([1, 3, n, n]);
    let data = image.data_mut();
    let denom = (n - 1).max(1) as f64;
    for r in 0..n {
        for c in 0..n {
            let e = entities.get(r, c) as usize;
            let (gy, gx) = shading[e];
            let shade = cfg.color_jitter * (gy * (r as f64 / denom - 0.5) + gx * (c as f64 / denom - 0.5));
            for ch in 0..3 {
                let noise = cfg.texture_noise * rng.random_range(-1.0..=1.0);
                let v = (colors[e][ch] + shade + noise).clamp(-1.0, 1.0);
                data[ch * n * n + r * n + c] = v as f32;
            }
        }
    }
    image
}

/// Scales so the longer side equals `target` (nearest neighbour for labels,
/// bilinear for the image) and pads right and bottom with zeros and
/// [`BACKGROUND`].
pub fn pad_to_square(image: &Tensor<f32>, entities: &LabelMap, target: usize) -> Result<Sample> {
    let [b, ch, h, w] = image.shape();
    if b != 1 || h == 0 || w == 0 || target == 0 {
        return Err(Error::InvalidArgument(format!("cannot pad image of shape {:?} to {target}", image.shape())));
    }
    if entities.height() != h || entities.width() != w {
        return Err(Error::ShapeMismatch { expected: [1, 1, h, w], got: [1, 1, entities.height(), entities.width()] });
    }
    let scale = target as f64 / h.max(w) as f64;
    let (nh, nw) = (scaled_len(h, scale, target), scaled_len(w, scale, target));
    let mut labels = LabelMap::filled(target, target, BACKGROUND);
    let mut out = Tensor::zeros([1, ch, target, target]);
    let src = |len: usize, dst: usize| (((dst as f64 + 0.5) / scale) as usize).min(len - 1);
    for r in 0..nh {
        for c in 0..nw {
            labels.set(r, c, entities.get(src(h, r), src(w, c)));
        }
    }
    let taps = |len: usize, dst: usize| {
        let pos = ((dst as f64 + 0.5) / scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = pos as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, pos - i0 as f64)
    };
    let data = image.data();
    let out_data = out.data_mut();
    for r in 0..nh {
        let (r0, r1, fr) = taps(h, r);
        for c in 0..nw {
            let (c0, c1, fc) = taps(w, c);
            for k in 0..ch {
                let at = |y: usize, x: usize| data[k * h * w + y * w + x] as f64;
                let top = at(r0, c0) * (1.0 - fc) + at(r0, c1) * fc;
                let bottom = at(r1, c0) * (1.0 - fc) + at(r1, c1) * fc;
                out_data[k * target * target + r * target + c] = (top * (1.0 - fr) + bottom * fr) as f32;
            }
        }
    }
    Ok(Sample { image: out, entities: labels })
}

fn scaled_len(len: usize, scale: f64, target: usize) -> usize {
    (libm::round(len as f64 * scale) as usize).clamp(1, target)
}
