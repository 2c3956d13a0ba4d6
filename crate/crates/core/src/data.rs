//! Deterministic synthetic dataset: coloured circles, triangles and squares
//! on textured backgrounds, with tight bounding boxes.
//!
//! On disk a dataset is a directory holding `manifest.json`, `labels.json`
//! and `images/NNNNN.ppm`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::BoundingBox;
use crate::pnm;
use crate::tensor::Tensor;
use crate::zoo::LabeledImage;

pub const CLASS_NAMES: [&str; 3] = ["circle", "triangle", "square"];
pub const MIN_IMAGE_SIZE: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    pub boxes: Vec<BoundingBox>,
    pub instance_count: usize,
}

impl LabeledImage for Sample {
    fn image(&self) -> &Tensor {
        &self.image
    }

    fn label(&self) -> usize {
        self.label
    }
}

impl Sample {
    pub fn boxes_for(&self, class: usize) -> Vec<BoundingBox> {
        self.boxes
            .iter()
            .filter(|b| b.class_index == class)
            .copied()
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    pub num_samples: usize,
    pub class_names: Vec<String>,
    pub image_size: usize,
    pub multi_instance_prob: f64,
    /// The first `train` samples form the training split, the rest `val`.
    pub splits: SplitCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub seed: u64,
    pub num_samples: usize,
    pub size: usize,
    pub multi_instance_prob: f64,
    pub train_fraction: f64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            seed: 0,
            num_samples: 600,
            size: MIN_IMAGE_SIZE,
            multi_instance_prob: 0.5,
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn train(&self) -> &[Sample] {
        &self.samples[..self.manifest.splits.train]
    }

    pub fn val(&self) -> &[Sample] {
        &self.samples[self.manifest.splits.train..]
    }
}

/// Pixel-level footprint of one shape instance inside its square cell.
fn covers(class: usize, s: usize, dx: usize, dy: usize) -> bool {
    let c = s as f64 / 2.0;
    let (px, py) = (dx as f64 + 0.5, dy as f64 + 0.5);
    match class {
        0 => (px - c).powi(2) + (py - c).powi(2) <= c * c,
        // apex at the top centre, base along the bottom row
        1 => (px - c).abs() <= c * (dy + 1) as f64 / s as f64,
        _ => true,
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h * 6.0) % 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn background(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.35));
    let freq = rng.gen_range(0.2..0.9);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let amp = rng.gen_range(0.03..0.1);
    let (ca, sa) = (angle.cos(), angle.sin());
    let plane = size * size;
    let mut img = vec![0.0; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let stripe = amp * ((x as f64 * ca + y as f64 * sa) * freq).sin();
            for (c, b) in base.iter().enumerate() {
                let noise = rng.gen_range(-0.05..0.05);
                img[c * plane + y * size + x] = (b + stripe + noise).clamp(0.0, 1.0);
            }
        }
    }
    img
}

fn place_instances(
    rng: &mut ChaCha8Rng,
    size: usize,
    count: usize,
) -> Result<Vec<(usize, usize, usize)>> {
    // (x0, y0, side); 1-pixel margin to the border and between shapes
    let (lo, hi) = if count == 1 {
        (size / 4, size * 7 / 16)
    } else {
        (size / 5, size / 3)
    };
    for _attempt in 0..50 {
        let mut cells: Vec<(usize, usize, usize)> = Vec::with_capacity(count);
        let mut ok = true;
        for _ in 0..count {
            let mut placed = false;
            for _ in 0..200 {
                let s = rng.gen_range(lo..=hi);
                if s + 2 > size {
                    return Err(Error::invalid(format!(
                        "image size {size} too small for shapes"
                    )));
                }
                let x0 = rng.gen_range(1..=size - s - 1);
                let y0 = rng.gen_range(1..=size - s - 1);
                let clear = cells.iter().all(|&(cx, cy, cs)| {
                    x0 + s < cx || cx + cs < x0 || y0 + s < cy || cy + cs < y0
                });
                if clear {
                    cells.push((x0, y0, s));
                    placed = true;
                    break;
                }
            }
            if !placed {
                ok = false;
                break;
            }
        }
        if ok {
            return Ok(cells);
        }
    }
    Err(Error::invalid(format!(
        "could not place {count} shapes in a {size}px image"
    )))
}

fn render_sample(rng: &mut ChaCha8Rng, size: usize, label: usize, count: usize) -> Result<Sample> {
    let mut img = background(rng, size);
    let plane = size * size;
    let cells = place_instances(rng, size, count)?;
    let mut boxes = Vec::with_capacity(count);
    for (x0, y0, s) in cells {
        let hue = rng.gen_range(0.0..1.0);
        let color = hsv_to_rgb(hue, rng.gen_range(0.2..0.6), rng.gen_range(0.9..1.0));
        let (mut bx0, mut by0, mut bx1, mut by1) = (usize::MAX, usize::MAX, 0, 0);
        for dy in 0..s {
            for dx in 0..s {
                if !covers(label, s, dx, dy) {
                    continue;
                }
                let (x, y) = (x0 + dx, y0 + dy);
                for (c, v) in color.iter().enumerate() {
                    img[c * plane + y * size + x] = *v;
                }
                bx0 = bx0.min(x);
                by0 = by0.min(y);
                bx1 = bx1.max(x + 1);
                by1 = by1.max(y + 1);
            }
        }
        boxes.push(BoundingBox::new(bx0, by0, bx1, by1, label)?);
    }
    Ok(Sample {
        image: Tensor::new(vec![3, size, size], img)?,
        label,
        boxes,
        instance_count: count,
    })
}

fn generate_from(manifest: DatasetManifest) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(manifest.seed);
    let n = manifest.num_samples;
    let classes = CLASS_NAMES.len();
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let mut samples = Vec::with_capacity(n);
    for &label in &labels {
        let count = if rng.gen_bool(manifest.multi_instance_prob) {
            rng.gen_range(2..=3)
        } else {
            1
        };
        samples.push(render_sample(&mut rng, manifest.image_size, label, count)?);
    }
    Ok(Dataset { manifest, samples })
}

/// Generates `num_samples` images, each holding 1 to 3 non-overlapping
/// instances of a single class. Classes are balanced to within one sample.
pub fn generate(config: &GenerateConfig) -> Result<Dataset> {
    if config.size < MIN_IMAGE_SIZE {
        return Err(Error::invalid(format!(
            "image size must be at least {MIN_IMAGE_SIZE}, got {}",
            config.size
        )));
    }
    if !(0.0..=1.0).contains(&config.multi_instance_prob) {
        return Err(Error::invalid("multi_instance_prob must lie in [0, 1]"));
    }
    if !(0.0..=1.0).contains(&config.train_fraction) {
        return Err(Error::invalid("train_fraction must lie in [0, 1]"));
    }
    let train = ((config.num_samples as f64) * config.train_fraction).round() as usize;
    generate_from(DatasetManifest {
        seed: config.seed,
        num_samples: config.num_samples,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        image_size: config.size,
        multi_instance_prob: config.multi_instance_prob,
        splits: SplitCounts {
            train,
            val: config.num_samples - train,
        },
    })
}

/// Rebuilds the dataset described by `manifest`, refusing to do so under a
/// different seed.
pub fn regenerate(manifest: &DatasetManifest, seed: u64) -> Result<Dataset> {
    if manifest.seed != seed {
        return Err(Error::SeedMismatch {
            manifest: manifest.seed,
            requested: seed,
        });
    }
    validate_manifest(manifest)?;
    generate_from(manifest.clone())
}

fn validate_manifest(m: &DatasetManifest) -> Result<()> {
    if m.splits.train + m.splits.val != m.num_samples {
        return Err(Error::format(
            "manifest",
            "split counts do not add up to num_samples",
        ));
    }
    if m.class_names != CLASS_NAMES {
        return Err(Error::format("manifest", "unexpected class names"));
    }
    if m.image_size < MIN_IMAGE_SIZE || !(0.0..=1.0).contains(&m.multi_instance_prob) {
        return Err(Error::format(
            "manifest",
            "image_size or multi_instance_prob out of range",
        ));
    }
    Ok(())
}

pub fn manifest_to_json(m: &DatasetManifest) -> Result<String> {
    Ok(serde_json::to_string_pretty(m)?)
}

pub fn manifest_from_json(s: &str) -> Result<DatasetManifest> {
    let m: DatasetManifest =
        serde_json::from_str(s).map_err(|e| Error::format("manifest", e.to_string()))?;
    validate_manifest(&m)?;
    Ok(m)
}

pub fn write_manifest(path: impl AsRef<Path>, m: &DatasetManifest) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, manifest_to_json(m)?).map_err(|e| Error::file(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    manifest_from_json(&fs::read_to_string(path).map_err(|e| Error::file(path, e))?)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelRecord {
    id: usize,
    file: String,
    split: String,
    label: usize,
    class_name: String,
    instance_count: usize,
    boxes: Vec<BoundingBox>,
}

fn image_file(id: usize) -> String {
    format!("images/{id:05}.ppm")
}

/// Writes `manifest.json`, `labels.json` and `images/NNNNN.ppm` under `dir`.
pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::file(&images, e))?;
    write_manifest(dir.join("manifest.json"), &dataset.manifest)?;
    let mut records = Vec::with_capacity(dataset.samples.len());
    for (id, s) in dataset.samples.iter().enumerate() {
        let file = image_file(id);
        pnm::write_image(dir.join(&file), &s.image)?;
        records.push(LabelRecord {
            id,
            file,
            split: if id < dataset.manifest.splits.train {
                "train"
            } else {
                "val"
            }
            .into(),
            label: s.label,
            class_name: CLASS_NAMES[s.label].into(),
            instance_count: s.instance_count,
            boxes: s.boxes.clone(),
        });
    }
    let labels = dir.join("labels.json");
    fs::write(&labels, serde_json::to_string_pretty(&records)?).map_err(|e| Error::file(&labels, e))
}

/// Loads a dataset directory. Images come back 8-bit quantised.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir.join("manifest.json"))?;
    let labels_path = dir.join("labels.json");
    let text = fs::read_to_string(&labels_path).map_err(|e| Error::file(&labels_path, e))?;
    let records: Vec<LabelRecord> =
        serde_json::from_str(&text).map_err(|e| Error::format("labels", e.to_string()))?;
    if records.len() != manifest.num_samples {
        return Err(Error::format(
            "labels",
            format!(
                "{} records for {} samples",
                records.len(),
                manifest.num_samples
            ),
        ));
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut samples = Vec::with_capacity(records.len());
    for r in records {
        if r.label >= CLASS_NAMES.len() {
            return Err(Error::format(
                "labels",
                format!("label {} out of range", r.label),
            ));
        }
        let image = pnm::read_image(dir.join(&r.file))?;
        if image.shape() != [3, manifest.image_size, manifest.image_size] {
            return Err(Error::format(
                "labels",
                format!("{} has shape {:?}", r.file, image.shape()),
            ));
        }
        samples.push(Sample {
            image,
            label: r.label,
            boxes: r.boxes,
            instance_count: r.instance_count,
        });
    }
    Ok(Dataset { manifest, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(seed: u64, n: usize, p: f64) -> GenerateConfig {
        GenerateConfig {
            seed,
            num_samples: n,
            size: 32,
            multi_instance_prob: p,
            train_fraction: 0.75,
        }
    }

    #[test]
    fn same_seed_same_pixels() {
        assert_eq!(
            generate(&cfg(3, 20, 0.5)).unwrap(),
            generate(&cfg(3, 20, 0.5)).unwrap()
        );
        assert_ne!(
            generate(&cfg(3, 20, 0.5)).unwrap(),
            generate(&cfg(4, 20, 0.5)).unwrap()
        );
    }

    #[test]
    fn single_instance_when_probability_zero() {
        let d = generate(&cfg(1, 60, 0.0)).unwrap();
        assert!(d
            .samples
            .iter()
            .all(|s| s.boxes.len() == 1 && s.instance_count == 1));
    }

    #[test]
    fn boxes_in_bounds_and_disjoint() {
        let d = generate(&cfg(11, 1000, 0.6)).unwrap();
        for s in &d.samples {
            assert!((1..=3).contains(&s.instance_count));
            assert_eq!(s.boxes_for(s.label).len(), s.instance_count);
            for (i, b) in s.boxes.iter().enumerate() {
                assert!(b.x0 >= 1 && b.y0 >= 1 && b.x1 <= 31 && b.y1 <= 31, "{b:?}");
                for other in &s.boxes[i + 1..] {
                    assert!(!b.overlaps(other));
                }
            }
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn classes_balanced() {
        let d = generate(&cfg(5, 301, 0.5)).unwrap();
        let mut counts = [0usize; 3];
        for s in &d.samples {
            counts[s.label] += 1;
        }
        let target = 301.0 / 3.0;
        for c in counts {
            assert!((c as f64 - target).abs() <= 0.1 * target);
        }
    }

    #[test]
    fn generator_rejects_small_images() {
        assert!(generate(&GenerateConfig {
            size: 16,
            ..cfg(0, 3, 0.0)
        })
        .is_err());
        assert!(generate(&GenerateConfig {
            multi_instance_prob: 1.5,
            ..cfg(0, 3, 0.0)
        })
        .is_err());
    }

    #[test]
    fn shape_footprints_fill_their_box() {
        for class in 0..3 {
            for s in [6usize, 7, 10, 13] {
                let mut minx = s;
                let mut maxx = 0;
                let mut miny = s;
                let mut maxy = 0;
                for dy in 0..s {
                    for dx in 0..s {
                        if covers(class, s, dx, dy) {
                            minx = minx.min(dx);
                            maxx = maxx.max(dx);
                            miny = miny.min(dy);
                            maxy = maxy.max(dy);
                        }
                    }
                }
                assert_eq!(
                    (minx, miny, maxx, maxy),
                    (0, 0, s - 1, s - 1),
                    "class {class} size {s}"
                );
            }
        }
    }

    #[test]
    fn manifest_round_trip_and_strictness() {
        let d = generate(&cfg(2, 12, 0.5)).unwrap();
        let json = manifest_to_json(&d.manifest).unwrap();
        assert_eq!(manifest_from_json(&json).unwrap(), d.manifest);
        let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
        v["extra_field"] = serde_json::json!(1);
        let err = manifest_from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("extra_field"), "{err}");
    }

    #[test]
    fn regenerate_checks_seed() {
        let d = generate(&cfg(8, 10, 0.5)).unwrap();
        assert_eq!(regenerate(&d.manifest, 8).unwrap(), d);
        assert!(matches!(
            regenerate(&d.manifest, 9),
            Err(Error::SeedMismatch {
                manifest: 8,
                requested: 9
            })
        ));
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate(&cfg(6, 8, 0.5)).unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.manifest, d.manifest);
        for (a, b) in back.samples.iter().zip(&d.samples) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.boxes, b.boxes);
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                assert!((x - y).abs() <= 1.0 / 255.0);
            }
        }
        assert_eq!(back.train().len(), 6);
        assert_eq!(back.val().len(), 2);
    }
}
