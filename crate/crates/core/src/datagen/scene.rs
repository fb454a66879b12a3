//! Procedural scene generation.
//!
//! Computation runs in f64 throughout so the emitted scene is identical no
//! matter which precision the training engine later runs at.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rec. 709 luma weights.
pub(crate) const LUMA: [f64; 3] = [0.2126, 0.7152, 0.0722];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub size: usize,
    pub class_count: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec { size: 64, class_count: 5, min_shapes: 1, max_shapes: 4 }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 || self.size % 8 != 0 {
            return Err(Error::invalid(format!(
                "canvas size must be >= 16 and divisible by 8, got {}",
                self.size
            )));
        }
        if self.class_count < 2 {
            return Err(Error::invalid(format!("class_count must be >= 2, got {}", self.class_count)));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::invalid(format!(
                "min_shapes {} exceeds max_shapes {}",
                self.min_shapes, self.max_shapes
            )));
        }
        Ok(())
    }
}

/// One source-domain sample: planar (3,S,S) image in [0,1] and an (S,S)
/// label map. Class 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub size: usize,
    pub class_count: usize,
    pub image: Vec<f64>,
    pub labels: Vec<u8>,
}

impl Scene {
    pub fn pixel(&self, c: usize, y: usize, x: usize) -> f64 {
        self.image[(c * self.size + y) * self.size + x]
    }
}

#[derive(Clone, Copy)]
enum Kind {
    Disc,
    Square,
    Triangle,
    Ring,
}

struct Shape {
    kind: Kind,
    cx: f64,
    cy: f64,
    /// Primary radius: disc radius, square half-side, triangle circumradius,
    /// ring outer radius.
    r: f64,
    /// Ring inner radius; triangle rotation elsewhere unused.
    aux: f64,
    color: [f64; 3],
    grad_dir: (f64, f64),
}

impl Shape {
    fn bound(&self) -> f64 {
        match self.kind {
            Kind::Square => self.r * std::f64::consts::SQRT_2,
            _ => self.r,
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.kind {
            Kind::Disc => dx * dx + dy * dy <= self.r * self.r,
            Kind::Square => dx.abs() <= self.r && dy.abs() <= self.r,
            Kind::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= self.r * self.r && d2 >= self.aux * self.aux
            }
            Kind::Triangle => {
                let rot = self.aux;
                let verts: Vec<(f64, f64)> = [0.0, 1.0, 2.0]
                    .iter()
                    .map(|k| {
                        let a = rot + k * std::f64::consts::TAU / 3.0;
                        (self.cx + self.r * a.cos(), self.cy + self.r * a.sin())
                    })
                    .collect();
                let sign = |a: (f64, f64), b: (f64, f64)| {
                    (x - b.0) * (a.1 - b.1) - (a.0 - b.0) * (y - b.1)
                };
                let d0 = sign(verts[0], verts[1]);
                let d1 = sign(verts[1], verts[2]);
                let d2 = sign(verts[2], verts[0]);
                let has_neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
                let has_pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
                !(has_neg && has_pos)
            }
        }
    }
}

/// Bilinearly interpolated random lattice, values in [0,1].
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cell: usize) -> Vec<f64> {
    let nodes = size / cell + 1;
    let grid: Vec<f64> = (0..nodes * nodes).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let gy = y / cell;
        let fy = (y % cell) as f64 / cell as f64;
        for x in 0..size {
            let gx = x / cell;
            let fx = (x % cell) as f64 / cell as f64;
            let top = grid[gy * nodes + gx] * (1.0 - fx) + grid[gy * nodes + gx + 1] * fx;
            let bot = grid[(gy + 1) * nodes + gx] * (1.0 - fx) + grid[(gy + 1) * nodes + gx + 1] * fx;
            out[y * size + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Bright color whose luminance clears the background band by a margin.
fn shape_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let c = [
            rng.random_range(0.35..1.0),
            rng.random_range(0.35..1.0),
            rng.random_range(0.35..1.0),
        ];
        if LUMA.iter().zip(&c).map(|(l, v)| l * v).sum::<f64>() >= 0.5 {
            return c;
        }
    }
}

pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let size = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Background: two octaves of dark value noise with a per-scene tint.
    let coarse = value_noise(&mut rng, size, 8);
    let fine = value_noise(&mut rng, size, 4);
    let tint = [
        rng.random_range(0.55..1.0),
        rng.random_range(0.55..1.0),
        rng.random_range(0.55..1.0),
    ];
    let mut image = vec![0.0f64; 3 * size * size];
    for p in 0..size * size {
        let n = 0.7 * coarse[p] + 0.3 * fine[p];
        let lum = 0.08 + 0.30 * n;
        for c in 0..3 {
            image[c * size * size + p] = lum * tint[c];
        }
    }
    let mut labels = vec![0u8; size * size];

    let n_shapes = rng.random_range(spec.min_shapes..=spec.max_shapes);
    let kinds_in_play = (spec.class_count - 1).min(4);
    let mut placed: Vec<Shape> = Vec::new();
    for _ in 0..n_shapes {
        if kinds_in_play == 0 {
            break;
        }
        let class = rng.random_range(1..=kinds_in_play) as u8;
        let kind = match class {
            1 => Kind::Disc,
            2 => Kind::Square,
            3 => Kind::Triangle,
            _ => Kind::Ring,
        };
        // Sized so that regions stay several cells wide at the network's
        // output stride (span >= 8 px regardless), capped so shapes still
        // fit with margin on small test canvases. Thin or low-area kinds
        // (ring annulus, triangle) draw from the upper end.
        let r_lo = 8.0f64.min(size as f64 / 6.0);
        let r_hi = 15.0f64.min(size as f64 / 4.0);
        let r = match kind {
            Kind::Disc | Kind::Square => rng.random_range(r_lo..r_hi),
            Kind::Ring => rng.random_range((r_lo + r_hi) / 2.0..r_hi + 2.0),
            Kind::Triangle => rng.random_range(r_lo + 3.0..r_hi + 3.0),
        };
        let aux = match kind {
            Kind::Ring => r * rng.random_range(0.35..0.5),
            Kind::Triangle => rng.random_range(0.0..std::f64::consts::TAU),
            _ => 0.0,
        };
        let color = shape_color(&mut rng);
        let grad_a = rng.random_range(0.0..std::f64::consts::TAU);
        let bound = match kind {
            Kind::Square => r * std::f64::consts::SQRT_2,
            _ => r,
        };

        let mut shape = None;
        for _attempt in 0..40 {
            let margin = bound + 1.0;
            let cx = rng.random_range(margin..size as f64 - margin);
            let cy = rng.random_range(margin..size as f64 - margin);
            let candidate = Shape { kind, cx, cy, r, aux, color, grad_dir: (grad_a.cos(), grad_a.sin()) };
            let clear = placed
                .iter()
                .all(|s| {
                    let d = ((s.cx - cx).powi(2) + (s.cy - cy).powi(2)).sqrt();
                    d >= s.bound() + candidate.bound() + 2.0
                });
            if clear {
                shape = Some(candidate);
                break;
            }
        }
        let Some(shape) = shape else { continue };

        for y in 0..size {
            for x in 0..size {
                if !shape.contains(x as f64, y as f64) {
                    continue;
                }
                labels[y * size + x] = class;
                let t = ((x as f64 - shape.cx) * shape.grad_dir.0
                    + (y as f64 - shape.cy) * shape.grad_dir.1)
                    / shape.bound();
                let shade = 1.0 + 0.06 * t;
                for c in 0..3 {
                    image[(c * size + y) * size + x] = (shape.color[c] * shade).clamp(0.0, 1.0);
                }
            }
        }
        placed.push(shape);
    }

    Ok(Scene { size, class_count: spec.class_count, image, labels })
}
