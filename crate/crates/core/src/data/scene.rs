use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{scene_rng, DataConfig, Stream};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIRCLE: &str = "circle";
pub const SQUARE: &str = "square";
pub const TRIANGLE: &str = "triangle";
pub const ALPHA_BAR: &str = "alpha-bar";
pub const BETA_BAR: &str = "beta-bar";

/// Every class the generator can emit.
pub const CLASSES: [&str; 5] = [CIRCLE, SQUARE, TRIANGLE, ALPHA_BAR, BETA_BAR];

const SHAPES: [&str; 3] = [CIRCLE, SQUARE, TRIANGLE];
const LIGHT: [f64; 3] = [0.9, 0.9, 0.9];
const DARK: [f64; 3] = [0.5, 0.5, 0.5];
const BACKGROUND: f64 = 0.15;

pub fn is_bar(class: &str) -> bool {
    class == ALPHA_BAR || class == BETA_BAR
}

fn shape_color(class: &str) -> [f64; 3] {
    match class {
        CIRCLE => [0.1, 0.8, 0.2],
        SQUARE => [0.2, 0.3, 0.9],
        _ => [0.95, 0.55, 0.1],
    }
}

/// Corner marker deciding which bar is the alpha bar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Marker {
    /// The light bar is the alpha bar.
    Magenta,
    /// The dark bar is the alpha bar.
    Cyan,
}

impl Marker {
    pub fn swapped(self) -> Self {
        match self {
            Marker::Magenta => Marker::Cyan,
            Marker::Cyan => Marker::Magenta,
        }
    }

    fn color(self) -> [f64; 3] {
        match self {
            Marker::Magenta => [1.0, 0.0, 1.0],
            Marker::Cyan => [0.0, 1.0, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u16,
    pub class: String,
    pub pixels: usize,
}

/// A rendered synthetic image with its object-id map.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub size: usize,
    /// `[3, S, S]`, values `k / 255`.
    pub image: Tensor,
    /// Object id per pixel, `0` for background.
    pub segmap: Vec<u16>,
    pub objects: Vec<SceneObject>,
    /// Present when the scene contains the bar pair.
    pub marker: Option<Marker>,
    /// Side of the square marker at the top-left corner, `0` without bars.
    pub marker_size: usize,
}

impl Scene {
    pub fn class_of(&self, id: u16) -> Option<&str> {
        self.objects
            .iter()
            .find(|o| o.id == id)
            .map(|o| o.class.as_str())
    }

    /// Sorted, duplicate-free classes present in the scene.
    pub fn classes(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self.objects.iter().map(|o| o.class.as_str()).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn in_marker(&self, r: usize, c: usize) -> bool {
        r < self.marker_size && c < self.marker_size
    }

    /// Class-membership map for `class`.
    pub fn class_pixels(&self, class: &str) -> Vec<bool> {
        let ids: Vec<u16> = self
            .objects
            .iter()
            .filter(|o| o.class == class)
            .map(|o| o.id)
            .collect();
        self.segmap.iter().map(|id| ids.contains(id)).collect()
    }
}

pub(crate) fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

struct Canvas {
    size: usize,
    color: Vec<[f64; 3]>,
    segmap: Vec<u16>,
    occupied: Vec<bool>,
}

impl Canvas {
    /// Whether `pixels` and their one-pixel halo are free.
    fn free(&self, pixels: &[(usize, usize)]) -> bool {
        let s = self.size as isize;
        pixels.iter().all(|&(r, c)| {
            (-1..=1).all(|dr| {
                (-1..=1).all(|dc| {
                    let (y, x) = (r as isize + dr, c as isize + dc);
                    y < 0 || x < 0 || y >= s || x >= s || !self.occupied[(y * s + x) as usize]
                })
            })
        })
    }

    fn paint(&mut self, pixels: &[(usize, usize)], color: [f64; 3], id: u16) {
        for &(r, c) in pixels {
            let p = r * self.size + c;
            self.color[p] = color;
            self.segmap[p] = id;
            self.occupied[p] = true;
        }
    }
}

fn rasterize(size: usize, inside: impl Fn(f64, f64) -> bool) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for r in 0..size {
        for c in 0..size {
            if inside(r as f64 + 0.5, c as f64 + 0.5) {
                out.push((r, c));
            }
        }
    }
    out
}

fn shape_pixels(class: &str, size: usize, extent: f64, cy: f64, cx: f64) -> Vec<(usize, usize)> {
    let h = extent / 2.0;
    match class {
        CIRCLE => rasterize(size, |y, x| (y - cy).powi(2) + (x - cx).powi(2) <= h * h),
        SQUARE => rasterize(size, |y, x| (y - cy).abs() <= h && (x - cx).abs() <= h),
        _ => rasterize(size, |y, x| {
            // apex at the top, base at the bottom
            let t = (y - (cy - h)) / extent;
            (0.0..=1.0).contains(&t) && (x - cx).abs() <= t * h
        }),
    }
}

fn bar_pixels(size: usize, length: f64, thickness: f64, cy: f64, cx: f64, angle: f64) -> Vec<(usize, usize)> {
    let (dy, dx) = (angle.sin(), angle.cos());
    let half = length / 2.0;
    rasterize(size, |y, x| {
        let (py, px) = (y - cy, x - cx);
        let along = (py * dy + px * dx).clamp(-half, half);
        let (ey, ex) = (py - along * dy, px - along * dx);
        ey * ey + ex * ex <= (thickness / 2.0).powi(2)
    })
}

fn place(
    canvas: &Canvas,
    rng: &mut ChaCha8Rng,
    retries: usize,
    what: &str,
    mut propose: impl FnMut(&mut ChaCha8Rng) -> Vec<(usize, usize)>,
) -> Result<Vec<(usize, usize)>> {
    for _ in 0..retries {
        let pixels = propose(rng);
        if !pixels.is_empty() && canvas.free(&pixels) {
            return Ok(pixels);
        }
    }
    Err(Error::Data(format!(
        "could not place {what} without overlap after {retries} attempts"
    )))
}

/// Renders the scene for `seed`.
pub fn generate_scene(seed: u64, config: &DataConfig) -> Result<Scene> {
    render(seed, config, false)
}

/// The scene for `seed` with the marker swapped, so every bar changes class
/// while all pixels outside the marker stay the same.
pub fn generate_twin(seed: u64, config: &DataConfig) -> Result<Scene> {
    render(seed, config, true)
}

fn render(seed: u64, config: &DataConfig, swap_marker: bool) -> Result<Scene> {
    config.validate()?;
    let s = config.image_size;
    let sf = s as f64;
    let mut rng = scene_rng(seed, Stream::Scene);
    let mut canvas = Canvas {
        size: s,
        color: vec![[BACKGROUND; 3]; s * s],
        segmap: vec![0; s * s],
        occupied: vec![false; s * s],
    };
    let mut objects = Vec::new();
    let mut marker = None;
    let mut marker_size = 0;

    if config.bar_pair {
        let mut mrng = scene_rng(seed, Stream::Marker);
        let mut kind = if mrng.gen_bool(0.5) {
            Marker::Magenta
        } else {
            Marker::Cyan
        };
        if swap_marker {
            kind = kind.swapped();
        }
        marker_size = ((sf * config.marker_frac).round() as usize).max(1);
        let pixels: Vec<(usize, usize)> = (0..marker_size)
            .flat_map(|r| (0..marker_size).map(move |c| (r, c)))
            .collect();
        canvas.paint(&pixels, kind.color(), 0);
        marker = Some(kind);

        let (light_class, dark_class) = match kind {
            Marker::Magenta => (ALPHA_BAR, BETA_BAR),
            Marker::Cyan => (BETA_BAR, ALPHA_BAR),
        };
        let thickness = (sf * config.bar_thickness).max(1.0);
        for (class, color) in [(light_class, LIGHT), (dark_class, DARK)] {
            let pixels = place(&canvas, &mut rng, config.max_retries, class, |rng| {
                let length = sf * rng.gen_range(config.bar_min..=config.bar_max);
                let angle = rng.gen_range(0.0..std::f64::consts::PI);
                let reach_y = (length / 2.0) * angle.sin().abs() + thickness / 2.0;
                let reach_x = (length / 2.0) * angle.cos().abs() + thickness / 2.0;
                let cy = rng.gen_range(reach_y..=(sf - reach_y).max(reach_y));
                let cx = rng.gen_range(reach_x..=(sf - reach_x).max(reach_x));
                bar_pixels(s, length, thickness, cy, cx, angle)
            })?;
            let id = objects.len() as u16 + 1;
            canvas.paint(&pixels, color, id);
            objects.push(SceneObject {
                id,
                class: class.to_owned(),
                pixels: pixels.len(),
            });
        }
    }

    let count = rng.gen_range(config.shapes_min..=config.shapes_max);
    for _ in 0..count {
        let class = SHAPES[rng.gen_range(0..SHAPES.len())];
        let pixels = place(&canvas, &mut rng, config.max_retries, class, |rng| {
            let extent = sf * rng.gen_range(config.shape_min..=config.shape_max);
            let h = extent / 2.0;
            let cy = rng.gen_range(h..=(sf - h).max(h));
            let cx = rng.gen_range(h..=(sf - h).max(h));
            shape_pixels(class, s, extent, cy, cx)
        })?;
        let id = objects.len() as u16 + 1;
        canvas.paint(&pixels, shape_color(class), id);
        objects.push(SceneObject {
            id,
            class: class.to_owned(),
            pixels: pixels.len(),
        });
    }

    let mut data = vec![0.0; 3 * s * s];
    for p in 0..s * s {
        for ch in 0..3 {
            let noise = if config.noise > 0.0 {
                rng.gen_range(-config.noise..=config.noise)
            } else {
                0.0
            };
            data[ch * s * s + p] = quantize(canvas.color[p][ch] + noise);
        }
    }
    Ok(Scene {
        size: s,
        image: Tensor::new(vec![3, s, s], data)?,
        segmap: canvas.segmap,
        objects,
        marker,
        marker_size,
    })
}
