//! Appearance shifts applied to a scene to fabricate the second domain.
//!
//! Every transform leaves geometry-dependent labels consistent with the
//! shifted image: photocopy keeps them, ripple warps them with the image,
//! cubism re-tiles them with the image. Pixels whose source falls outside
//! the frame get the ignore label.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::IGNORE_LABEL;

use super::scene::{Scene, LUMA};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformSpec {
    None,
    Photocopy { contrast: f64, grain: f64 },
    Ripple { amplitude: f64, wavelength: f64 },
    Cubism { cells: usize, max_offset: f64, jitter: f64 },
}

impl TransformSpec {
    pub fn photocopy_default() -> Self {
        TransformSpec::Photocopy { contrast: 1.7, grain: 0.05 }
    }

    pub fn ripple_default() -> Self {
        TransformSpec::Ripple { amplitude: 2.0, wavelength: 16.0 }
    }

    pub fn cubism_default() -> Self {
        TransformSpec::Cubism { cells: 40, max_offset: 4.0, jitter: 0.1 }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            TransformSpec::None => "none",
            TransformSpec::Photocopy { .. } => "photocopy",
            TransformSpec::Ripple { .. } => "ripple",
            TransformSpec::Cubism { .. } => "cubism",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            TransformSpec::None => Ok(()),
            TransformSpec::Photocopy { contrast, grain } => {
                if contrast <= 0.0 {
                    return Err(Error::invalid(format!("contrast must be > 0, got {contrast}")));
                }
                if grain < 0.0 {
                    return Err(Error::invalid(format!("grain must be >= 0, got {grain}")));
                }
                Ok(())
            }
            TransformSpec::Ripple { amplitude, wavelength } => {
                if amplitude < 0.0 {
                    return Err(Error::invalid(format!("amplitude must be >= 0, got {amplitude}")));
                }
                if wavelength <= 0.0 {
                    return Err(Error::invalid(format!("wavelength must be > 0, got {wavelength}")));
                }
                Ok(())
            }
            TransformSpec::Cubism { cells, max_offset, jitter } => {
                if cells == 0 {
                    return Err(Error::invalid("cells must be >= 1"));
                }
                if max_offset < 0.0 || jitter < 0.0 {
                    return Err(Error::invalid("max_offset and jitter must be >= 0"));
                }
                Ok(())
            }
        }
    }

    pub fn apply(&self, scene: &Scene, seed: u64) -> Result<SamplePair> {
        self.validate()?;
        let (x2, y2_eval) = match *self {
            TransformSpec::None => (scene.image.clone(), scene.labels.clone()),
            TransformSpec::Photocopy { contrast, grain } => {
                photocopy(scene, contrast, grain, seed)
            }
            TransformSpec::Ripple { amplitude, wavelength } => {
                ripple(scene, amplitude, wavelength, seed)
            }
            TransformSpec::Cubism { cells, max_offset, jitter } => {
                cubism(scene, cells, max_offset, jitter, seed)
            }
        };
        Ok(SamplePair {
            x1: scene.image.clone(),
            y1: scene.labels.clone(),
            x2,
            y2_eval,
            size: scene.size,
            class_count: scene.class_count,
            kind: self.kind_name(),
        })
    }
}

/// A scene rendered in both domains. `y2_eval` exists for evaluation only;
/// training on the second domain never reads it.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub x1: Vec<f64>,
    pub y1: Vec<u8>,
    pub x2: Vec<f64>,
    pub y2_eval: Vec<u8>,
    pub size: usize,
    pub class_count: usize,
    pub kind: &'static str,
}

fn photocopy(scene: &Scene, contrast: f64, grain: f64, seed: u64) -> (Vec<f64>, Vec<u8>) {
    let size = scene.size;
    let plane = size * size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0f64; 3 * plane];
    for p in 0..plane {
        let lum: f64 = (0..3).map(|c| LUMA[c] * scene.image[c * plane + p]).sum();
        let x = lum.clamp(0.0, 1.0);
        // Contrast gain; c == 1 leaves the value untouched exactly.
        let v = if contrast == 1.0 {
            x
        } else {
            let xc = x.powf(contrast);
            xc / (xc + (1.0 - x).powf(contrast))
        };
        let noise = if grain > 0.0 { rng.random_range(-grain..grain) } else { 0.0 };
        let v = (v + noise).clamp(0.0, 1.0);
        for c in 0..3 {
            out[c * plane + p] = v;
        }
    }
    (out, scene.labels.clone())
}

/// Source coordinates the ripple warp reads from for output pixel (x, y).
pub fn ripple_source(x: f64, y: f64, amplitude: f64, wavelength: f64, phase_x: f64, phase_y: f64) -> (f64, f64) {
    let sx = x + amplitude * (std::f64::consts::TAU * y / wavelength + phase_x).sin();
    let sy = y + amplitude * (std::f64::consts::TAU * x / wavelength + phase_y).sin();
    (sx, sy)
}

fn ripple(scene: &Scene, amplitude: f64, wavelength: f64, seed: u64) -> (Vec<f64>, Vec<u8>) {
    let size = scene.size;
    let plane = size * size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase_x = rng.random_range(0.0..std::f64::consts::TAU);
    let phase_y = rng.random_range(0.0..std::f64::consts::TAU);

    if amplitude == 0.0 {
        return (scene.image.clone(), scene.labels.clone());
    }

    let mut out = vec![0.0f64; 3 * plane];
    let mut labels = vec![0u8; plane];
    let max = (size - 1) as f64;
    for y in 0..size {
        for x in 0..size {
            let (sx, sy) = ripple_source(x as f64, y as f64, amplitude, wavelength, phase_x, phase_y);
            let cx = sx.clamp(0.0, max);
            let cy = sy.clamp(0.0, max);
            let x0 = cx.floor() as usize;
            let y0 = cy.floor() as usize;
            let x1 = (x0 + 1).min(size - 1);
            let y1 = (y0 + 1).min(size - 1);
            let fx = cx - x0 as f64;
            let fy = cy - y0 as f64;
            for c in 0..3 {
                let pl = &scene.image[c * plane..(c + 1) * plane];
                let top = pl[y0 * size + x0] * (1.0 - fx) + pl[y0 * size + x1] * fx;
                let bot = pl[y1 * size + x0] * (1.0 - fx) + pl[y1 * size + x1] * fx;
                out[c * plane + y * size + x] = top * (1.0 - fy) + bot * fy;
            }
            let nx = sx.round();
            let ny = sy.round();
            labels[y * size + x] = if nx < 0.0 || ny < 0.0 || nx > max || ny > max {
                IGNORE_LABEL
            } else {
                scene.labels[ny as usize * size + nx as usize]
            };
        }
    }
    (out, labels)
}

fn cubism(scene: &Scene, cells: usize, max_offset: f64, jitter: f64, seed: u64) -> (Vec<f64>, Vec<u8>) {
    let size = scene.size;
    let plane = size * size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let sites: Vec<(f64, f64)> = (0..cells)
        .map(|_| (rng.random_range(0.0..size as f64), rng.random_range(0.0..size as f64)))
        .collect();
    let offsets: Vec<(f64, f64)> = (0..cells)
        .map(|_| {
            let radius = rng.random_range(0.0..=max_offset);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            (radius * angle.cos(), radius * angle.sin())
        })
        .collect();
    let tints: Vec<[f64; 3]> = (0..cells)
        .map(|_| {
            [
                rng.random_range(-jitter..=jitter),
                rng.random_range(-jitter..=jitter),
                rng.random_range(-jitter..=jitter),
            ]
        })
        .collect();

    // Nearest site per pixel, lowest index wins ties.
    let mut cell_of = vec![0usize; plane];
    for y in 0..size {
        for x in 0..size {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (i, &(sx, sy)) in sites.iter().enumerate() {
                let d = (x as f64 - sx).powi(2) + (y as f64 - sy).powi(2);
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            cell_of[y * size + x] = best;
        }
    }

    let mut out = vec![0.0f64; 3 * plane];
    let mut labels = vec![0u8; plane];
    let hi = size as isize - 1;
    for y in 0..size {
        for x in 0..size {
            let cell = cell_of[y * size + x];
            let (ox, oy) = offsets[cell];
            let sx = (x as f64 + ox).round() as isize;
            let sy = (y as f64 + oy).round() as isize;
            let in_frame = sx >= 0 && sy >= 0 && sx <= hi && sy <= hi;
            let (px, py) = (sx.clamp(0, hi) as usize, sy.clamp(0, hi) as usize);

            let on_border = [(1isize, 0isize), (-1, 0), (0, 1), (0, -1)].iter().any(|&(dx, dy)| {
                let nx = x as isize + dx;
                let ny = y as isize + dy;
                nx >= 0 && ny >= 0 && nx <= hi && ny <= hi
                    && cell_of[ny as usize * size + nx as usize] != cell
            });
            let edge = if on_border { 0.55 } else { 1.0 };

            for c in 0..3 {
                let v = scene.image[(c * size + py) * size + px] + tints[cell][c];
                out[(c * size + y) * size + x] = (v * edge).clamp(0.0, 1.0);
            }
            labels[y * size + x] = if in_frame {
                scene.labels[py * size + px]
            } else {
                IGNORE_LABEL
            };
        }
    }
    (out, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::scene::{generate_scene, SceneSpec};

    fn scenes(n: u64) -> Vec<Scene> {
        let spec = SceneSpec::default();
        (0..n).map(|s| generate_scene(&spec, s).unwrap()).collect()
    }

    #[test]
    fn pair_shapes_and_ranges_hold_across_transforms() {
        let specs = [
            TransformSpec::None,
            TransformSpec::photocopy_default(),
            TransformSpec::ripple_default(),
            TransformSpec::cubism_default(),
        ];
        for scene in scenes(5) {
            for t in &specs {
                let p = t.apply(&scene, 99).unwrap();
                assert_eq!(p.x2.len(), 3 * p.size * p.size);
                assert_eq!(p.y2_eval.len(), p.size * p.size);
                assert!(p.x2.iter().all(|&v| (0.0..=1.0).contains(&v)));
                assert!(p
                    .y2_eval
                    .iter()
                    .all(|&l| (l as usize) < p.class_count || l == IGNORE_LABEL));
                assert_eq!(p.x1, scene.image);
                assert_eq!(p.y1, scene.labels);
            }
        }
    }

    #[test]
    fn same_seed_same_pair() {
        let scene = generate_scene(&SceneSpec::default(), 3).unwrap();
        let t = TransformSpec::cubism_default();
        assert_eq!(t.apply(&scene, 5).unwrap(), t.apply(&scene, 5).unwrap());
        assert_ne!(t.apply(&scene, 5).unwrap().x2, t.apply(&scene, 6).unwrap().x2);
    }

    #[test]
    fn photocopy_keeps_labels_and_grays_out_color() {
        let scene = generate_scene(&SceneSpec::default(), 11).unwrap();
        let t = TransformSpec::Photocopy { contrast: 1.7, grain: 0.0 };
        let p = t.apply(&scene, 0).unwrap();
        assert_eq!(p.y2_eval, scene.labels);
        let plane = p.size * p.size;
        for i in 0..plane {
            assert_eq!(p.x2[i], p.x2[plane + i]);
            assert_eq!(p.x2[i], p.x2[2 * plane + i]);
        }
    }

    #[test]
    fn photocopy_unit_contrast_no_grain_is_luminance_exactly() {
        let scene = generate_scene(&SceneSpec::default(), 2).unwrap();
        let t = TransformSpec::Photocopy { contrast: 1.0, grain: 0.0 };
        let p = t.apply(&scene, 0).unwrap();
        let plane = p.size * p.size;
        for i in 0..plane {
            let lum: f64 = (0..3).map(|c| LUMA[c] * scene.image[c * plane + i]).sum();
            assert_eq!(p.x2[i], lum.clamp(0.0, 1.0));
        }
    }

    #[test]
    fn photocopy_moves_pixels_meaningfully() {
        let t = TransformSpec::photocopy_default();
        let mut total = 0.0;
        let mut count = 0usize;
        for scene in scenes(100) {
            let p = t.apply(&scene, 1).unwrap();
            total += p
                .x1
                .iter()
                .zip(&p.x2)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
            count += p.x1.len();
        }
        let mean = total / count as f64;
        assert!(mean > 0.05, "mean abs pixel diff {mean} too small");
    }

    #[test]
    fn ripple_zero_amplitude_is_identity() {
        let scene = generate_scene(&SceneSpec::default(), 4).unwrap();
        let t = TransformSpec::Ripple { amplitude: 0.0, wavelength: 16.0 };
        let p = t.apply(&scene, 0).unwrap();
        assert_eq!(p.x2, scene.image);
        assert_eq!(p.y2_eval, scene.labels);
    }

    #[test]
    fn ripple_source_formula_probe() {
        // y on a node of the sine: sx reduces to x. x = 8 with wavelength 16
        // puts the second sine at half-period, so sy = y - amplitude.
        let (sx, sy) = ripple_source(10.0, 8.0, 3.0, 16.0, 0.0, 0.0);
        assert!((sx - 10.0).abs() < 1e-12, "sx {sx}");
        assert!((sy - (8.0 + 3.0 * (std::f64::consts::TAU * 10.0 / 16.0).sin())).abs() < 1e-12);
        let (sx, _) = ripple_source(10.0, 4.0, 3.0, 16.0, 0.0, 0.0);
        assert!((sx - 13.0).abs() < 1e-12, "peak displacement, got {sx}");
    }

    #[test]
    fn ripple_out_of_frame_stays_rare() {
        let t = TransformSpec::ripple_default();
        let mut ignored = 0usize;
        let mut total = 0usize;
        for (i, scene) in scenes(100).into_iter().enumerate() {
            let p = t.apply(&scene, i as u64).unwrap();
            ignored += p.y2_eval.iter().filter(|&&l| l == IGNORE_LABEL).count();
            total += p.y2_eval.len();
        }
        let frac = ignored as f64 / total as f64;
        assert!(frac <= 0.05, "out-of-frame fraction {frac}");
    }

    #[test]
    fn cubism_degenerate_cell_is_identity_up_to_border() {
        // One cell, no offset, no jitter: the single cell has no internal
        // borders and frame edges have no neighboring cell, so nothing moves.
        let scene = generate_scene(&SceneSpec::default(), 6).unwrap();
        let t = TransformSpec::Cubism { cells: 1, max_offset: 0.0, jitter: 0.0 };
        let p = t.apply(&scene, 0).unwrap();
        assert_eq!(p.x2, scene.image);
        assert_eq!(p.y2_eval, scene.labels);
    }

    #[test]
    fn cubism_labels_come_from_nearby_pixels() {
        let t = TransformSpec::cubism_default();
        let reach = 5isize; // ceil(max_offset) + 1 rounding slack
        for (i, scene) in scenes(10).into_iter().enumerate() {
            let p = t.apply(&scene, i as u64).unwrap();
            let size = p.size as isize;
            for y in 0..size {
                for x in 0..size {
                    let l = p.y2_eval[(y * size + x) as usize];
                    if l == IGNORE_LABEL {
                        continue;
                    }
                    let found = (-reach..=reach).any(|dy| {
                        (-reach..=reach).any(|dx| {
                            let nx = x + dx;
                            let ny = y + dy;
                            nx >= 0 && ny >= 0 && nx < size && ny < size
                                && scene.labels[(ny * size + nx) as usize] == l
                        })
                    });
                    assert!(found, "label {l} at ({x},{y}) not present within {reach} px in source");
                }
            }
        }
    }

    #[test]
    fn cubism_disagreement_stays_in_band() {
        let t = TransformSpec::cubism_default();
        let mut moved = 0usize;
        let mut total = 0usize;
        for (i, scene) in scenes(50).into_iter().enumerate() {
            let p = t.apply(&scene, i as u64).unwrap();
            for (a, b) in scene.labels.iter().zip(&p.y2_eval) {
                if *b == IGNORE_LABEL {
                    continue;
                }
                total += 1;
                if a != b {
                    moved += 1;
                }
            }
        }
        let frac = moved as f64 / total as f64;
        assert!((0.02..=0.25).contains(&frac), "label disagreement {frac} out of band");
    }

    #[test]
    fn cubism_out_of_frame_stays_rare() {
        let t = TransformSpec::cubism_default();
        let mut ignored = 0usize;
        let mut total = 0usize;
        for (i, scene) in scenes(100).into_iter().enumerate() {
            let p = t.apply(&scene, i as u64).unwrap();
            ignored += p.y2_eval.iter().filter(|&&l| l == IGNORE_LABEL).count();
            total += p.y2_eval.len();
        }
        let frac = ignored as f64 / total as f64;
        assert!(frac <= 0.05, "out-of-frame fraction {frac}");
    }

    #[test]
    fn validation_rejects_nonsense() {
        assert!(TransformSpec::Photocopy { contrast: 0.0, grain: 0.0 }.validate().is_err());
        assert!(TransformSpec::Photocopy { contrast: 1.0, grain: -0.1 }.validate().is_err());
        assert!(TransformSpec::Ripple { amplitude: -1.0, wavelength: 16.0 }.validate().is_err());
        assert!(TransformSpec::Ripple { amplitude: 1.0, wavelength: 0.0 }.validate().is_err());
        assert!(TransformSpec::Cubism { cells: 0, max_offset: 4.0, jitter: 0.1 }.validate().is_err());
        assert!(TransformSpec::Cubism { cells: 4, max_offset: -1.0, jitter: 0.1 }.validate().is_err());
    }

    #[test]
    fn serde_tagging_round_trips() {
        let t = TransformSpec::ripple_default();
        let json = serde_json::to_string(&t).unwrap();
        assert!(json.contains("\"kind\":\"ripple\""), "{json}");
        let back: TransformSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
    }
}
