//! Image families. Each class is a fixed recipe drawn once from the task
//! seed; every example re-renders its class recipe with its own jitter.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Reference canvas the recipes are expressed in; other sizes rescale.
const CANVAS: f64 = 32.0;
const NOISE: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PrimitiveShape {
    Rect { half_w: f64, half_h: f64 },
    Ellipse { rx: f64, ry: f64 },
    Line { half_len: f64, half_thickness: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub shape: PrimitiveShape,
    /// Orientation in radians.
    pub angle: f64,
}

/// The primitives every object task composes its classes from.
pub fn primitive_vocabulary() -> Vec<Primitive> {
    use PrimitiveShape::*;
    let p = |shape, angle: f64| Primitive { shape, angle };
    vec![
        p(Rect { half_w: 4.0, half_h: 4.0 }, 0.0),
        p(Rect { half_w: 6.0, half_h: 2.0 }, 0.0),
        p(Rect { half_w: 6.0, half_h: 2.0 }, PI / 2.0),
        p(Rect { half_w: 3.0, half_h: 3.0 }, PI / 4.0),
        p(Ellipse { rx: 4.0, ry: 4.0 }, 0.0),
        p(Ellipse { rx: 6.0, ry: 2.5 }, 0.0),
        p(Ellipse { rx: 6.0, ry: 2.5 }, PI / 2.0),
        p(Ellipse { rx: 2.0, ry: 2.0 }, 0.0),
        p(Line { half_len: 8.0, half_thickness: 0.8 }, 0.0),
        p(Line { half_len: 8.0, half_thickness: 0.8 }, PI / 2.0),
        p(Line { half_len: 8.0, half_thickness: 0.8 }, PI / 4.0),
        p(Line { half_len: 8.0, half_thickness: 0.8 }, -PI / 4.0),
    ]
}

impl Primitive {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (c * x + s * y, -s * x + c * y);
        match self.shape {
            PrimitiveShape::Rect { half_w, half_h } => u.abs() <= half_w && v.abs() <= half_h,
            PrimitiveShape::Ellipse { rx, ry } => (u / rx).powi(2) + (v / ry).powi(2) <= 1.0,
            PrimitiveShape::Line {
                half_len,
                half_thickness,
            } => u.abs() <= half_len && v.abs() <= half_thickness,
        }
    }
}

/// One placed vocabulary entry of a shapes class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub primitive: usize,
    pub dx: f64,
    pub dy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClassRecipe {
    Shapes(Vec<Placement>),
    Texture { frequency: f64, orientation: f64 },
    Glyph([[bool; 8]; 8]),
}

pub fn shapes_recipes(n_classes: usize, rng: &mut ChaCha8Rng) -> Vec<ClassRecipe> {
    let vocab = primitive_vocabulary().len();
    let mut seen: Vec<Vec<usize>> = Vec::new();
    let mut out = Vec::with_capacity(n_classes);
    while out.len() < n_classes {
        let parts = rng.gen_range(2..=3);
        let mut ids: Vec<usize> = (0..vocab).collect();
        ids.shuffle(rng);
        ids.truncate(parts);
        let mut key = ids.clone();
        key.sort_unstable();
        // distinct primitive multisets keep classes separable
        if seen.contains(&key) && seen.len() < 200 {
            continue;
        }
        seen.push(key);
        let placements = ids
            .into_iter()
            .map(|primitive| Placement {
                primitive,
                dx: rng.gen_range(-6.0..6.0),
                dy: rng.gen_range(-6.0..6.0),
            })
            .collect();
        out.push(ClassRecipe::Shapes(placements));
    }
    out
}

pub fn texture_recipes(n_classes: usize, rng: &mut ChaCha8Rng) -> Vec<ClassRecipe> {
    const FREQUENCIES: [f64; 4] = [0.07, 0.13, 0.2, 0.3];
    const ORIENTATIONS: usize = 6;
    let mut grid: Vec<(f64, f64)> = FREQUENCIES
        .iter()
        .flat_map(|&f| (0..ORIENTATIONS).map(move |o| (f, o as f64 * PI / ORIENTATIONS as f64)))
        .collect();
    grid.shuffle(rng);
    (0..n_classes)
        .map(|c| {
            let (frequency, orientation) = grid[c % grid.len()];
            ClassRecipe::Texture { frequency, orientation }
        })
        .collect()
}

pub fn glyph_recipes(n_classes: usize, rng: &mut ChaCha8Rng) -> Vec<ClassRecipe> {
    let mut out: Vec<ClassRecipe> = Vec::with_capacity(n_classes);
    while out.len() < n_classes {
        let mut g = [[false; 8]; 8];
        g.iter_mut().flatten().for_each(|b| *b = rng.gen_bool(0.45));
        let lit = g.iter().flatten().filter(|b| **b).count();
        let candidate = ClassRecipe::Glyph(g);
        if (16..=48).contains(&lit) && !out.contains(&candidate) {
            out.push(candidate);
        }
    }
    out
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders one `size x size` example of `recipe` into `out`.
pub fn render(recipe: &ClassRecipe, size: usize, rng: &mut ChaCha8Rng, out: &mut [f64]) {
    let scale = size as f64 / CANVAS;
    match recipe {
        ClassRecipe::Shapes(parts) => {
            let vocab = primitive_vocabulary();
            let zoom = rng.gen_range(0.85..1.15);
            let rot = rng.gen_range(-0.25..0.25);
            let (tx, ty) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let (s, c) = f64::sin_cos(rot);
            for (idx, px) in out.iter_mut().enumerate() {
                // pixel centre in the recipe frame
                let x = ((idx % size) as f64 + 0.5) / scale - CANVAS / 2.0 - tx;
                let y = ((idx / size) as f64 + 0.5) / scale - CANVAS / 2.0 - ty;
                let (x, y) = ((c * x + s * y) / zoom, (-s * x + c * y) / zoom);
                let hit = parts
                    .iter()
                    .any(|p| vocab[p.primitive].contains(x - p.dx, y - p.dy));
                *px = if hit { 0.9 } else { 0.1 };
            }
        }
        ClassRecipe::Texture { frequency, orientation } => {
            let comps: Vec<(f64, f64, f64)> = [-0.15, 0.0, 0.15]
                .iter()
                .map(|d| {
                    let theta = orientation + d + rng.gen_range(-0.08..0.08);
                    let f = frequency * rng.gen_range(0.92..1.08);
                    (f, theta, rng.gen_range(0.0..2.0 * PI))
                })
                .collect();
            for (idx, px) in out.iter_mut().enumerate() {
                let x = (idx % size) as f64 / scale;
                let y = (idx / size) as f64 / scale;
                let sum: f64 = comps
                    .iter()
                    .map(|(f, t, phase)| (2.0 * PI * f * (x * t.cos() + y * t.sin()) + phase).cos())
                    .sum();
                *px = 0.5 + 0.4 * sum / comps.len() as f64;
            }
        }
        ClassRecipe::Glyph(bits) => {
            let cell = (3.0 * scale).max(1.0);
            let span = 8.0 * cell;
            let slack = (size as f64 - span).max(0.0);
            let (ox, oy) = (rng.gen_range(0.0..=slack), rng.gen_range(0.0..=slack));
            for (idx, px) in out.iter_mut().enumerate() {
                let x = ((idx % size) as f64 + 0.5 - ox) / cell;
                let y = ((idx / size) as f64 + 0.5 - oy) / cell;
                let on = (0.0..8.0).contains(&x) && (0.0..8.0).contains(&y) && bits[y as usize][x as usize];
                *px = if on { 0.9 } else { 0.1 };
            }
        }
    }
    for px in out.iter_mut() {
        *px = quantize(*px + rng.gen_range(-NOISE..NOISE));
    }
}
