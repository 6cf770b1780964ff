use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sprite shape classes, in class-id order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Bar,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Bar];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundMode {
    Flat,
    Noise,
    Gradient,
}

/// Parameters of the procedural scene generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub n_classes: usize,
    /// Object sprite extent in pixels, inclusive range.
    pub min_object_size: usize,
    pub max_object_size: usize,
    pub palette: Vec<[f32; 3]>,
    pub background: BackgroundMode,
    pub occlusion: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_size: 64,
            min_objects: 2,
            max_objects: 5,
            n_classes: 4,
            min_object_size: 12,
            max_object_size: 20,
            palette: vec![
                [0.90, 0.20, 0.20],
                [0.20, 0.75, 0.25],
                [0.20, 0.35, 0.90],
                [0.95, 0.85, 0.20],
                [0.85, 0.30, 0.85],
                [0.20, 0.85, 0.85],
                [0.95, 0.55, 0.15],
                [0.95, 0.95, 0.95],
            ],
            background: BackgroundMode::Noise,
            occlusion: false,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size > u16::MAX as usize {
            return Err(Error::Config(format!("image_size {} out of range", self.image_size)));
        }
        if self.palette.is_empty() {
            return Err(Error::Config("palette is empty".to_string()));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "object range {}..{} is empty",
                self.min_objects, self.max_objects
            )));
        }
        if self.max_objects > u8::MAX as usize {
            return Err(Error::Config("at most 255 objects per scene".to_string()));
        }
        if self.n_classes == 0 || self.n_classes > Shape::ALL.len() {
            return Err(Error::Config(format!(
                "n_classes must be in 1..={}, got {}",
                Shape::ALL.len(),
                self.n_classes
            )));
        }
        if self.min_object_size < 3
            || self.min_object_size > self.max_object_size
            || self.max_object_size > self.image_size
        {
            return Err(Error::Config(format!(
                "object size range {}..{} invalid for image size {}",
                self.min_object_size, self.max_object_size, self.image_size
            )));
        }
        if self
            .palette
            .iter()
            .flatten()
            .any(|c| !(0.0..=1.0).contains(c))
        {
            return Err(Error::Config("palette entries must lie in [0, 1]".to_string()));
        }
        Ok(())
    }
}

/// One visible object: class and tight normalized box `(x_min, y_min, x_max, y_max)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectInfo {
    pub class_id: u32,
    pub bbox: [f32; 4],
}

/// An image with its instance label map. Label 0 is background, `k` in
/// `1..=objects.len()` is the `k`-th object.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub height: usize,
    pub width: usize,
    /// Row-major `H x W x 3`, values in `[0, 1]`.
    pub image: Vec<f32>,
    pub gt_masks: Vec<u8>,
    pub objects: Vec<ObjectInfo>,
    pub seed: u64,
}

impl SceneSample {
    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    /// Indicator mask for label `k`.
    pub fn mask(&self, k: u8) -> Vec<bool> {
        self.gt_masks.iter().map(|&l| l == k).collect()
    }

    /// Indicator masks of the objects (background excluded).
    pub fn object_masks(&self) -> Vec<Vec<bool>> {
        (1..=self.objects.len() as u8).map(|k| self.mask(k)).collect()
    }
}

struct Placed {
    shape: Shape,
    cx: f32,
    cy: f32,
    size: f32,
    vertical: bool,
}

impl Placed {
    fn contains(&self, px: f32, py: f32) -> bool {
        let (dx, dy) = (px - self.cx, py - self.cy);
        let half = self.size / 2.0;
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= half * half,
            Shape::Square => dx.abs() <= half && dy.abs() <= half,
            Shape::Triangle => {
                if dy.abs() > half {
                    return false;
                }
                let t = (dy + half) / self.size;
                dx.abs() <= t * half
            }
            Shape::Bar => {
                let (ax, ay) = if self.vertical {
                    (half / 3.0, half)
                } else {
                    (half, half / 3.0)
                };
                dx.abs() <= ax && dy.abs() <= ay
            }
        }
    }

    fn pixels(&self, size: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let half = self.size / 2.0 + 1.0;
        let lo_y = ((self.cy - half).floor().max(0.0)) as usize;
        let hi_y = ((self.cy + half).ceil() as usize).min(size);
        let lo_x = ((self.cx - half).floor().max(0.0)) as usize;
        let hi_x = ((self.cx + half).ceil() as usize).min(size);
        for y in lo_y..hi_y {
            for x in lo_x..hi_x {
                if self.contains(x as f32 + 0.5, y as f32 + 0.5) {
                    out.push(y * size + x);
                }
            }
        }
        out
    }
}

const PLACEMENT_ATTEMPTS: usize = 200;

/// Deterministically renders one scene from `seed`.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<SceneSample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = config.image_size;
    let n = size * size;
    let target = rng.random_range(config.min_objects..=config.max_objects);

    let mut image = render_background(config, &mut rng);
    let mut labels = vec![0u8; n];
    let mut classes = Vec::with_capacity(target);

    for _ in 0..target {
        let class_id = rng.random_range(0..config.n_classes);
        let base = config.palette[rng.random_range(0..config.palette.len())];
        let jitter: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.08f32..0.08));
        let color: [f32; 3] = std::array::from_fn(|c| (base[c] + jitter[c]).clamp(0.0, 1.0));
        let striped = rng.random_bool(0.5);
        let stripe_period = rng.random_range(3usize..6);

        let mut placed = None;
        for attempt in 0..PLACEMENT_ATTEMPTS {
            // Shrink towards the minimum size when placements keep failing.
            let hi = if attempt < PLACEMENT_ATTEMPTS / 2 {
                config.max_object_size
            } else {
                config.min_object_size
            };
            let s = rng.random_range(config.min_object_size..=hi) as f32;
            let margin = s / 2.0;
            let cx = rng.random_range(margin..=(size as f32 - margin).max(margin));
            let cy = rng.random_range(margin..=(size as f32 - margin).max(margin));
            let candidate = Placed {
                shape: Shape::ALL[class_id],
                cx,
                cy,
                size: s,
                vertical: rng.random_bool(0.5),
            };
            let pixels = candidate.pixels(size);
            if pixels.is_empty() {
                continue;
            }
            if config.occlusion || pixels.iter().all(|&p| labels[p] == 0) {
                placed = Some(pixels);
                break;
            }
        }
        let Some(pixels) = placed else { continue };
        classes.push(class_id as u32);
        let label = classes.len() as u8;
        for p in pixels {
            labels[p] = label;
            let (y, x) = (p / size, p % size);
            let shade = if striped && ((x + y) / stripe_period) % 2 == 1 {
                0.7
            } else {
                1.0
            };
            for c in 0..3 {
                image[p * 3 + c] = (color[c] * shade).clamp(0.0, 1.0);
            }
        }
    }

    // Drop fully occluded objects and relabel the survivors in drawing order.
    let mut counts = vec![0usize; classes.len() + 1];
    for &l in &labels {
        counts[l as usize] += 1;
    }
    let mut remap = vec![0u8; classes.len() + 1];
    let mut kept_classes = Vec::new();
    for k in 1..=classes.len() {
        if counts[k] > 0 {
            kept_classes.push(classes[k - 1]);
            remap[k] = kept_classes.len() as u8;
        }
    }
    for l in labels.iter_mut() {
        *l = remap[*l as usize];
    }
    let objects = kept_classes
        .iter()
        .enumerate()
        .map(|(i, &class_id)| ObjectInfo {
            class_id,
            bbox: tight_bbox(&labels, size, size, (i + 1) as u8),
        })
        .collect();

    Ok(SceneSample {
        height: size,
        width: size,
        image,
        gt_masks: labels,
        objects,
        seed,
    })
}

fn render_background(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let size = config.image_size;
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.05f32..0.45));
    let other: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.05f32..0.45));
    let mut image = vec![0f32; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let p = (y * size + x) * 3;
            for c in 0..3 {
                image[p + c] = match config.background {
                    BackgroundMode::Flat => base[c],
                    BackgroundMode::Noise => (base[c] + rng.random_range(-0.05f32..0.05)).clamp(0.0, 1.0),
                    BackgroundMode::Gradient => {
                        let t = (x + y) as f32 / (2 * size.max(2) - 2) as f32;
                        base[c] * (1.0 - t) + other[c] * t
                    }
                };
            }
        }
    }
    image
}

/// Tight box of label `k` in normalized coordinates; the pixel at column `x`
/// spans `[x / W, (x + 1) / W]`.
pub fn tight_bbox(labels: &[u8], height: usize, width: usize, k: u8) -> [f32; 4] {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for (p, &l) in labels.iter().enumerate() {
        if l == k {
            let (y, x) = (p / width, p % width);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
    }
    if x0 == usize::MAX {
        return [0.0; 4];
    }
    [
        x0 as f32 / width as f32,
        y0 as f32 / height as f32,
        (x1 + 1) as f32 / width as f32,
        (y1 + 1) as f32 / height as f32,
    ]
}
