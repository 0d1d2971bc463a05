use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::{is_bar, Scene, ALPHA_BAR, BETA_BAR};
use super::{scene_rng, DataConfig, Stream};
use crate::attention::RegionMask;
use crate::error::{Error, Result};

pub const YES: &str = "yes";
pub const NO: &str = "no";

/// Shape family of sampled regions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    #[default]
    Rect,
    Circle,
}

/// Region geometry in pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Region {
    /// Half-open rows `r0..r1` and columns `c0..c1`.
    Rect {
        r0: usize,
        c0: usize,
        r1: usize,
        c1: usize,
    },
    /// Pixels whose centers lie within `radius` of `(cy, cx)`.
    Circle { cy: f64, cx: f64, radius: f64 },
}

impl Region {
    pub fn rasterize(&self, size: usize) -> RegionMask {
        match *self {
            Region::Rect { r0, c0, r1, c1 } => {
                RegionMask::from_fn(size, |r, c| (r0..r1).contains(&r) && (c0..c1).contains(&c))
            }
            Region::Circle { cy, cx, radius } => RegionMask::from_fn(size, |r, c| {
                let (y, x) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
                y * y + x * x <= radius * radius
            }),
        }
    }

    /// The region mirrored left to right in a `size`-wide image.
    pub fn flipped(&self, size: usize) -> Region {
        match *self {
            Region::Rect { r0, c0, r1, c1 } => Region::Rect {
                r0,
                c0: size - c1,
                r1,
                c1: size - c0,
            },
            Region::Circle { cy, cx, radius } => Region::Circle {
                cy,
                cx: size as f64 - cx,
                radius,
            },
        }
    }
}

/// One labelled region question about a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Question {
    pub class: String,
    pub region: Region,
    pub mask: RegionMask,
    pub answer: &'static str,
    pub context: bool,
}

pub fn question_text(class: &str) -> String {
    let article = if class.starts_with(['a', 'e', 'i', 'o', 'u']) { "an" } else { "a" };
    format!("is there {article} {class} in this region?")
}

/// At-least-one-pixel rule.
pub fn label(scene: &Scene, mask: &RegionMask, class: &str) -> &'static str {
    let hit = mask
        .bits()
        .iter()
        .zip(&scene.segmap)
        .any(|(&m, &id)| m != 0 && id != 0 && scene.class_of(id) == Some(class));
    if hit {
        YES
    } else {
        NO
    }
}

fn overlaps(mask: &RegionMask, pixels: &[bool]) -> bool {
    mask.bits().iter().zip(pixels).any(|(&m, &p)| m != 0 && p)
}

fn touches_marker(scene: &Scene, mask: &RegionMask) -> bool {
    (0..scene.marker_size).any(|r| (0..scene.marker_size).any(|c| mask.get(r, c)))
}

/// Whether a bar question cannot be resolved from the region's pixels: the
/// region avoids the marker and covers exactly one of the two bars.
pub fn is_context_ambiguous(scene: &Scene, mask: &RegionMask, class: &str) -> bool {
    if !is_bar(class) || scene.marker.is_none() || touches_marker(scene, mask) {
        return false;
    }
    let alpha = overlaps(mask, &scene.class_pixels(ALPHA_BAR));
    let beta = overlaps(mask, &scene.class_pixels(BETA_BAR));
    alpha != beta
}

fn sample_region<R: Rng + ?Sized>(rng: &mut R, size: usize, kind: RegionKind, config: &DataConfig) -> Region {
    let sf = size as f64;
    let side = |rng: &mut R| {
        let v = (sf * rng.gen_range(config.region_min..=config.region_max)).round() as usize;
        v.clamp(1, size)
    };
    match kind {
        RegionKind::Rect => {
            let (h, w) = (side(rng), side(rng));
            let r0 = rng.gen_range(0..=size - h);
            let c0 = rng.gen_range(0..=size - w);
            Region::Rect {
                r0,
                c0,
                r1: r0 + h,
                c1: c0 + w,
            }
        }
        RegionKind::Circle => {
            let radius = (side(rng) as f64 / 2.0).max(0.5);
            Region::Circle {
                cy: rng.gen_range(radius..=sf - radius),
                cx: rng.gen_range(radius..=sf - radius),
                radius,
            }
        }
    }
}

/// `n / 2` yes/no pairs. Each pair asks about one class present in the
/// scene, with one region that hits the class and one that misses it.
///
/// For the bar classes both regions avoid the marker and each covers exactly
/// one bar: the yes region the queried bar, the no region the other one.
pub fn generate_questions(
    scene: &Scene,
    n: usize,
    kind: RegionKind,
    seed: u64,
    config: &DataConfig,
) -> Result<Vec<Question>> {
    if n % 2 != 0 {
        return Err(Error::invalid(format!("question count {n} is odd")));
    }
    let classes = scene.classes();
    if classes.is_empty() || n == 0 {
        return Ok(Vec::new());
    }
    let mut rng = scene_rng(seed, Stream::Questions);
    let mut out = Vec::with_capacity(n);
    let mut failures = 0;
    while out.len() < n {
        let mut class = classes[rng.gen_range(0..classes.len())];
        if is_bar(class) {
            class = if rng.gen_bool(config.alpha_share) { ALPHA_BAR } else { BETA_BAR };
        }
        let target = scene.class_pixels(class);
        let other = if is_bar(class) {
            let o = if class == ALPHA_BAR { BETA_BAR } else { ALPHA_BAR };
            Some(scene.class_pixels(o))
        } else {
            None
        };
        let mut draw = |want_yes: bool| -> Option<Question> {
            for _ in 0..config.max_retries {
                let region = sample_region(&mut rng, scene.size, kind, config);
                let mask = region.rasterize(scene.size);
                if mask.is_empty() {
                    continue;
                }
                let hits_target = overlaps(&mask, &target);
                if hits_target != want_yes {
                    continue;
                }
                if let Some(other) = &other {
                    if touches_marker(scene, &mask) || overlaps(&mask, other) == want_yes {
                        continue;
                    }
                }
                let answer = label(scene, &mask, class);
                let context = is_context_ambiguous(scene, &mask, class);
                return Some(Question {
                    class: class.to_owned(),
                    region,
                    mask,
                    answer,
                    context,
                });
            }
            None
        };
        match (draw(true), draw(false)) {
            (Some(yes), Some(no)) => {
                out.push(yes);
                out.push(no);
            }
            _ => {
                failures += 1;
                if failures > 50 {
                    return Err(Error::Data(format!(
                        "could not sample labelable regions for a scene with classes {classes:?}"
                    )));
                }
            }
        }
    }
    Ok(out)
}

/// The same class and region asked about another scene, labelled afresh.
pub fn relabel(question: &Question, scene: &Scene) -> Question {
    Question {
        answer: label(scene, &question.mask, &question.class),
        context: is_context_ambiguous(scene, &question.mask, &question.class),
        ..question.clone()
    }
}
