//! Synthetic detection scenes: textured rectangles on a noisy background.
//!
//! Class 0 is a solid fill, class 1 horizontal stripes (period 4), class 2
//! a checkerboard of 2-pixel cells. Boxes have integer corners and cover
//! pixels `[x_tl, x_br) × [y_tl, y_br)`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::geometry::{extract_point, iou, Box, PointKind};
use crate::numerics::DenseArray;

pub const MANIFEST: &str = "manifest.json";
pub const DATASET_VERSION: u32 = 1;
pub const PATTERNS: [&str; 3] = ["solid", "stripes", "checker"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub classes: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: 3,
            min_objects: 1,
            max_objects: 5,
            classes: 3,
            min_size: 8,
            max_size: 40,
            noise: 0.2,
            seed: 7,
        }
    }
}

impl SceneSpec {
    /// `smallest_stride` bounds the minimum box side from below.
    pub fn validate(&self, smallest_stride: usize) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return config_err("image extents must be positive");
        }
        if self.classes == 0 || self.classes > PATTERNS.len() {
            return config_err(format!("classes must be in 1..={}", PATTERNS.len()));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return config_err(format!("object range [{}, {}] is empty", self.min_objects, self.max_objects));
        }
        if self.min_size > self.max_size {
            return config_err(format!("size range [{}, {}] is empty", self.min_size, self.max_size));
        }
        if self.min_size < 2 * smallest_stride {
            return config_err(format!("min_size {} below twice the smallest stride {smallest_stride}", self.min_size));
        }
        // one pixel of margin on each side keeps corners strictly inside
        if self.max_size + 2 > self.height.min(self.width) {
            return config_err(format!("max_size {} does not fit a {}x{} image", self.max_size, self.height, self.width));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return config_err("noise amplitude must be in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub boxes: Vec<Box>,
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `H×W×channels`, values in `[0, 1]`.
    pub image: DenseArray,
    pub annotation: Annotation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub spec: SceneSpec,
    pub count: usize,
    pub seed: u64,
}

fn pattern_on(class: usize, row: usize, col: usize) -> bool {
    match class {
        0 => true,
        1 => row % 4 < 2,
        _ => (row / 2 + col / 2).is_multiple_of(2),
    }
}

/// Image `index` depends only on `spec.seed ^ index`.
pub fn render_one(spec: &SceneSpec, index: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ index as u64);
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let mut data: Vec<f64> = (0..h * w * c).map(|_| rng.gen_range(0.0..=1.0) * spec.noise * 0.5).collect();
    let wanted = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut boxes: Vec<Box> = Vec::new();
    let mut classes = Vec::new();
    for _ in 0..wanted {
        for _attempt in 0..100 {
            let bw = rng.gen_range(spec.min_size..=spec.max_size);
            let bh = rng.gen_range(spec.min_size..=spec.max_size);
            let x0 = rng.gen_range(1..=w - 1 - bw);
            let y0 = rng.gen_range(1..=h - 1 - bh);
            let b = Box { x_tl: x0 as f64, y_tl: y0 as f64, x_br: (x0 + bw) as f64, y_br: (y0 + bh) as f64 };
            if boxes.iter().any(|o| iou(o, &b) > 0.0) {
                continue;
            }
            let class = rng.gen_range(0..spec.classes);
            let tint: Vec<f64> = (0..c).map(|_| rng.gen_range(0.6..=1.0)).collect();
            for row in y0..y0 + bh {
                for col in x0..x0 + bw {
                    let level = if pattern_on(class, row - y0, col - x0) { 1.0 } else { 0.45 };
                    for ch in 0..c {
                        let v = tint[ch] * level + rng.gen_range(-0.5..=0.5) * spec.noise * 0.5;
                        data[(row * w + col) * c + ch] = v.clamp(0.0, 1.0);
                    }
                }
            }
            boxes.push(b);
            classes.push(class);
            break;
        }
    }
    let image = DenseArray::new(vec![h, w, c], data).expect("consistent shape");
    Sample { image, annotation: Annotation { boxes, classes } }
}

pub fn generate(spec: &SceneSpec, count: usize) -> Result<Dataset> {
    spec.validate(1)?;
    Ok(Dataset { spec: spec.clone(), samples: (0..count).map(|i| render_one(spec, i)).collect() })
}

/// Spec for the validation split: same scene distribution, disjoint seeds.
pub fn val_spec(train: &SceneSpec) -> SceneSpec {
    SceneSpec { seed: train.seed ^ (1 << 40), ..train.clone() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Issue {
    pub image: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetReport {
    pub images: usize,
    pub per_class: Vec<usize>,
    pub issues: Vec<Issue>,
}

impl DatasetReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn into_result(self) -> Result<Self> {
        if self.is_valid() {
            return Ok(self);
        }
        let lines: Vec<String> = self.issues.iter().map(|i| format!("image {}: {}", i.image, i.message)).collect();
        Err(Error::Config(format!("dataset invalid: {}", lines.join("; "))))
    }
}

pub fn validate(ds: &Dataset) -> DatasetReport {
    let spec = &ds.spec;
    let mut report = DatasetReport { images: ds.samples.len(), per_class: vec![0; spec.classes], issues: Vec::new() };
    let (wf, hf) = (spec.width as f64, spec.height as f64);
    for (i, s) in ds.samples.iter().enumerate() {
        let mut issue = |m: String| report.issues.push(Issue { image: i, message: m });
        if s.image.shape() != [spec.height, spec.width, spec.channels] {
            issue(format!("image shape {:?}", s.image.shape()));
        }
        if let Some(v) = s.image.data().iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            issue(format!("pixel value {v} outside [0, 1]"));
        }
        let a = &s.annotation;
        if a.boxes.len() != a.classes.len() {
            issue(format!("{} boxes but {} class ids", a.boxes.len(), a.classes.len()));
        }
        for (j, b) in a.boxes.iter().enumerate() {
            if let Err(e) = b.validate() {
                issue(format!("box {j}: {e}"));
                continue;
            }
            for kind in PointKind::ALL {
                let p = extract_point(b, kind);
                if !(p.x > 0.0 && p.x < wf && p.y > 0.0 && p.y < hf) {
                    issue(format!("box {j}: {} ({}, {}) not strictly inside the image", kind.name(), p.x, p.y));
                }
            }
        }
        for (j, &c) in a.classes.iter().enumerate() {
            match report.per_class.get_mut(c) {
                Some(n) => *n += 1,
                None => report.issues.push(Issue { image: i, message: format!("object {j}: class id {c} out of range") }),
            }
        }
    }
    report
}

fn image_path(dir: &Path, i: usize) -> std::path::PathBuf {
    dir.join(format!("{i:06}.bvra"))
}

fn ann_path(dir: &Path, i: usize) -> std::path::PathBuf {
    dir.join(format!("{i:06}.json"))
}

pub fn save_dir(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest { version: DATASET_VERSION, spec: ds.spec.clone(), count: ds.samples.len(), seed: ds.spec.seed };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    for (i, s) in ds.samples.iter().enumerate() {
        fs::write(image_path(dir, i), s.image.to_bytes())?;
        fs::write(ann_path(dir, i), serde_json::to_string(&s.annotation)?)?;
    }
    Ok(())
}

pub fn load_dir(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", dir.join(MANIFEST).display())))?;
    if manifest.version != DATASET_VERSION {
        return Err(Error::Format(format!("dataset version {} not supported", manifest.version)));
    }
    let mut samples = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let bytes = fs::read(image_path(dir, i))?;
        let image = DenseArray::from_bytes(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", image_path(dir, i).display())))?;
        let text = fs::read_to_string(ann_path(dir, i))?;
        let annotation: Annotation = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", ann_path(dir, i).display())))?;
        samples.push(Sample { image, annotation });
    }
    Ok(Dataset { spec: manifest.spec, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_pixels() {
        let spec = SceneSpec::default();
        assert_eq!(generate(&spec, 4).unwrap(), generate(&spec, 4).unwrap());
        let other = SceneSpec { seed: 8, ..spec.clone() };
        assert_ne!(generate(&spec, 2).unwrap(), generate(&other, 2).unwrap());
    }

    #[test]
    fn images_are_independent_of_count() {
        let spec = SceneSpec::default();
        let a = generate(&spec, 3).unwrap();
        let b = generate(&spec, 7).unwrap();
        assert_eq!(a.samples[..], b.samples[..3]);
    }

    #[test]
    fn empty_dataset() {
        let ds = generate(&SceneSpec::default(), 0).unwrap();
        assert!(ds.samples.is_empty());
        assert!(validate(&ds).is_valid());
    }

    #[test]
    fn infeasible_sizes_are_rejected() {
        let spec = SceneSpec { max_size: 63, ..SceneSpec::default() };
        assert!(matches!(generate(&spec, 1), Err(Error::Config(_))));
        let spec = SceneSpec { min_size: 6, ..SceneSpec::default() };
        assert!(spec.validate(4).is_err());
    }

    #[test]
    fn solid_object_is_one_region_matching_the_box() {
        let spec = SceneSpec { min_objects: 1, max_objects: 1, classes: 1, noise: 0.0, ..SceneSpec::default() };
        for i in 0..10 {
            let s = render_one(&spec, i);
            let b = s.annotation.boxes[0];
            let (h, w) = (spec.height, spec.width);
            let fg: Vec<bool> = (0..h * w).map(|p| s.image.data()[p * 3] > 0.0).collect();
            // flood fill from the first foreground pixel
            let start = fg.iter().position(|&f| f).unwrap();
            let mut seen = vec![false; h * w];
            let mut stack = vec![start];
            seen[start] = true;
            let (mut x0, mut y0, mut x1, mut y1, mut n) = (w, h, 0, 0, 0);
            while let Some(p) = stack.pop() {
                let (r, c) = (p / w, p % w);
                n += 1;
                (x0, y0, x1, y1) = (x0.min(c), y0.min(r), x1.max(c + 1), y1.max(r + 1));
                let mut push = |q: usize| {
                    if fg[q] && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                };
                if r > 0 { push(p - w) }
                if r + 1 < h { push(p + w) }
                if c > 0 { push(p - 1) }
                if c + 1 < w { push(p + 1) }
            }
            assert_eq!(n, fg.iter().filter(|&&f| f).count(), "single region");
            assert_eq!((x0 as f64, y0 as f64, x1 as f64, y1 as f64), (b.x_tl, b.y_tl, b.x_br, b.y_br));
        }
    }

    #[test]
    fn corrupted_box_is_reported_with_its_image() {
        let mut ds = generate(&SceneSpec::default(), 3).unwrap();
        let b = &mut ds.samples[2].annotation.boxes[0];
        std::mem::swap(&mut b.x_tl, &mut b.x_br);
        let r = validate(&ds);
        assert_eq!(r.issues.len(), 1);
        assert_eq!(r.issues[0].image, 2);
        assert!(r.into_result().is_err());
    }

    #[test]
    fn class_balance_over_a_thousand_images() {
        let ds = generate(&SceneSpec::default(), 1000).unwrap();
        let r = validate(&ds);
        assert!(r.is_valid(), "{:?}", r.issues.first());
        let total: usize = r.per_class.iter().sum();
        for &n in &r.per_class {
            let share = n as f64 / total as f64;
            assert!((share - 1.0 / 3.0).abs() < 0.05, "{:?}", r.per_class);
        }
    }

    #[test]
    fn disk_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&SceneSpec::default(), 3).unwrap();
        save_dir(&ds, dir.path()).unwrap();
        assert_eq!(load_dir(dir.path()).unwrap(), ds);
        let path = image_path(dir.path(), 1);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_dir(dir.path()).unwrap_err().to_string();
        assert!(err.contains("data section"), "{err}");
    }
}
