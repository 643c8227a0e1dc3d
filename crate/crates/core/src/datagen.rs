//! Synthetic multi-label scenes and their JSON-lines manifests.
//!
//! A class is a (shape, colour) pair. Each image holds a few objects drawn
//! back to front, so later objects may hide earlier ones; a class is
//! labelled only when at least [`MIN_VISIBLE_FRACTION`] of one of its
//! objects stays visible. Object classes are drawn from a long-tailed
//! marginal for the first object and from the first object's row of a
//! symmetric affinity matrix for the rest, which gives the label sets a
//! co-occurrence structure.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::image::RgbImage;
use crate::regions::BBox;

pub const MIN_VISIBLE_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Cross,
    Ring,
}

pub const SHAPES: [Shape; 5] = [Shape::Square, Shape::Circle, Shape::Triangle, Shape::Cross, Shape::Ring];
pub const COLORS: [(&str, [u8; 3]); 4] =
    [("red", [215, 45, 40]), ("green", [45, 190, 70]), ("blue", [50, 85, 225]), ("yellow", [230, 205, 45])];

/// Largest class count the shape × colour palette supports.
pub const MAX_CLASSES: usize = SHAPES.len() * COLORS.len();

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
            Shape::Ring => "ring",
        }
    }

    /// Whether the point `(u, v)` in unit-square coordinates lies inside the shape.
    pub fn contains(self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - 0.5, v - 0.5);
        let r2 = du * du + dv * dv;
        match self {
            Shape::Square => (0.06..0.94).contains(&u) && (0.06..0.94).contains(&v),
            Shape::Circle => r2 <= 0.25,
            Shape::Triangle => (0.05..=0.95).contains(&v) && du.abs() <= 0.5 * (v - 0.05) / 0.9,
            Shape::Cross => du.abs() <= 0.17 || dv.abs() <= 0.17,
            Shape::Ring => (0.09..=0.25).contains(&r2),
        }
    }
}

pub fn class_shape(class: usize) -> Shape {
    SHAPES[class % SHAPES.len()]
}

pub fn class_color(class: usize) -> [u8; 3] {
    COLORS[class / SHAPES.len()].1
}

pub fn class_name(class: usize) -> String {
    format!("{}_{}", COLORS[class / SHAPES.len()].0, class_shape(class).name())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub num_classes: usize,
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side as a fraction of the image side.
    pub min_scale: f64,
    pub max_scale: f64,
    /// Probability that an object after the first is placed over an earlier one.
    pub occlusion_prob: f64,
    /// Exponent of the long-tailed marginal `w_k = (k + 1)^-imbalance`.
    pub imbalance: f64,
    /// K×K symmetric sampling weights; `None` selects [`default_affinity`].
    pub cooccurrence: Option<Vec<Vec<f64>>>,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            num_classes: 10,
            image_size: 64,
            min_objects: 1,
            max_objects: 4,
            min_scale: 0.15,
            max_scale: 0.5,
            occlusion_prob: 0.3,
            imbalance: 0.5,
            cooccurrence: None,
            seed: 0,
        }
    }
}

/// Classes pair up (0 with 1, 2 with 3, ...) with a strong affinity; a class
/// repeats itself with a low one.
pub fn default_affinity(k: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|i| {
            (0..k)
                .map(|j| {
                    if i == j {
                        0.5
                    } else if (i ^ 1) == j {
                        6.0
                    } else {
                        1.0
                    }
                })
                .collect()
        })
        .collect()
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > MAX_CLASSES {
            bail!(Config, "num_classes must be in 1..={MAX_CLASSES}, got {}", self.num_classes);
        }
        if self.image_size < 8 {
            bail!(Config, "image_size must be at least 8");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            bail!(Config, "objects per image range [{}, {}] is invalid", self.min_objects, self.max_objects);
        }
        if !(0.0 < self.min_scale && self.min_scale <= self.max_scale && self.max_scale <= 1.0) {
            bail!(Config, "object scale range [{}, {}] is invalid", self.min_scale, self.max_scale);
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            bail!(Config, "occlusion_prob must be in [0, 1]");
        }
        let aff = self.affinity();
        if aff.len() != self.num_classes || aff.iter().any(|row| row.len() != self.num_classes) {
            bail!(Config, "cooccurrence must be {0}x{0}", self.num_classes);
        }
        for (i, row) in aff.iter().enumerate() {
            if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) || row.iter().sum::<f64>() <= 0.0 {
                bail!(Config, "cooccurrence row {i} is not a valid sampling weight vector");
            }
            for (j, &v) in row.iter().enumerate() {
                if v != aff[j][i] {
                    bail!(Config, "cooccurrence is not symmetric at ({i}, {j})");
                }
            }
        }
        Ok(())
    }

    pub fn affinity(&self) -> Vec<Vec<f64>> {
        self.cooccurrence.clone().unwrap_or_else(|| default_affinity(self.num_classes))
    }

    pub fn marginal(&self) -> Vec<f64> {
        let w: Vec<f64> = (0..self.num_classes).map(|k| ((k + 1) as f64).powf(-self.imbalance)).collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|v| v / total).collect()
    }

    /// Probability of each object count, `P(n) ∝ n - min + 1`.
    pub fn count_distribution(&self) -> Vec<(usize, f64)> {
        let counts: Vec<usize> = (self.min_objects..=self.max_objects).collect();
        let total: f64 = counts.iter().map(|n| (n - self.min_objects + 1) as f64).sum();
        counts.into_iter().map(|n| (n, (n - self.min_objects + 1) as f64 / total)).collect()
    }

    /// Expected share of drawn objects belonging to each class.
    pub fn expected_object_frequencies(&self) -> Vec<f64> {
        let marginal = self.marginal();
        let aff = self.affinity();
        let k = self.num_classes;
        let follow: Vec<f64> = (0..k)
            .map(|j| {
                (0..k)
                    .map(|a| {
                        let row_sum: f64 = aff[a].iter().sum();
                        marginal[a] * aff[a][j] / row_sum
                    })
                    .sum()
            })
            .collect();
        let mut expected = vec![0.0; k];
        let mut objects = 0.0;
        for (n, p) in self.count_distribution() {
            objects += p * n as f64;
            for j in 0..k {
                expected[j] += p * (marginal[j] + (n as f64 - 1.0) * follow[j]);
            }
        }
        expected.into_iter().map(|e| e / objects).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlacedObject {
    pub class: usize,
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub color: [u8; 3],
}

impl PlacedObject {
    pub fn bbox(&self) -> BBox {
        BBox {
            x1: self.x as f64,
            y1: self.y as f64,
            x2: (self.x + self.size) as f64,
            y2: (self.y + self.size) as f64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub image: RgbImage,
    pub objects: Vec<PlacedObject>,
    /// Visible pixel count of each object after occlusion.
    pub visible: Vec<usize>,
    pub labels: Vec<usize>,
}

fn jitter(rng: &mut impl Rng, rgb: [u8; 3], amount: i32) -> [u8; 3] {
    rgb.map(|c| (c as i32 + rng.gen_range(-amount..=amount)).clamp(0, 255) as u8)
}

/// Draw the object layout (classes, sizes, positions) without rendering.
pub fn sample_layout(spec: &SceneSpec, rng: &mut impl Rng) -> Result<Vec<PlacedObject>> {
    spec.validate()?;
    let counts = spec.count_distribution();
    let n = counts[WeightedIndex::new(counts.iter().map(|c| c.1)).expect("positive weights").sample(rng)].0;
    let marginal = WeightedIndex::new(spec.marginal()).expect("positive marginal");
    let affinity = spec.affinity();
    let s = spec.image_size;
    let mut objects: Vec<PlacedObject> = Vec::with_capacity(n);
    for i in 0..n {
        let class = if i == 0 {
            marginal.sample(rng)
        } else {
            WeightedIndex::new(&affinity[objects[0].class]).expect("validated row").sample(rng)
        };
        let size = ((rng.gen_range(spec.min_scale..=spec.max_scale) * s as f64).round() as usize).clamp(4, s);
        let (x, y) = if i > 0 && rng.gen_bool(spec.occlusion_prob) {
            let target = &objects[rng.gen_range(0..i)];
            let cx = target.x as i64 + target.size as i64 / 2 + rng.gen_range(-(size as i64) / 2..=size as i64 / 2);
            let cy = target.y as i64 + target.size as i64 / 2 + rng.gen_range(-(size as i64) / 2..=size as i64 / 2);
            let clamp = |c: i64| (c - size as i64 / 2).clamp(0, (s - size) as i64) as usize;
            (clamp(cx), clamp(cy))
        } else {
            (rng.gen_range(0..=s - size), rng.gen_range(0..=s - size))
        };
        let color = jitter(rng, class_color(class), 20);
        objects.push(PlacedObject { class, x, y, size, color });
    }
    Ok(objects)
}

/// Render one scene. Identical `spec` and `index` always give identical bytes.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(index));
    let objects = sample_layout(spec, &mut rng)?;
    let s = spec.image_size;
    let base = [rng.gen_range(35..110u8), rng.gen_range(35..110u8), rng.gen_range(35..110u8)];
    let mut image = RgbImage::filled(s, s, base);
    for y in 0..s {
        for x in 0..s {
            image.put(x, y, jitter(&mut rng, base, 8));
        }
    }
    let mut owner: Vec<Option<usize>> = vec![None; s * s];
    let mut area = vec![0usize; objects.len()];
    for (i, obj) in objects.iter().enumerate() {
        let shape = class_shape(obj.class);
        for py in obj.y..obj.y + obj.size {
            for px in obj.x..obj.x + obj.size {
                let u = (px - obj.x) as f64 / obj.size as f64 + 0.5 / obj.size as f64;
                let v = (py - obj.y) as f64 / obj.size as f64 + 0.5 / obj.size as f64;
                if shape.contains(u, v) {
                    owner[py * s + px] = Some(i);
                    area[i] += 1;
                    image.put(px, py, obj.color);
                }
            }
        }
    }
    let mut visible = vec![0usize; objects.len()];
    for o in owner.into_iter().flatten() {
        visible[o] += 1;
    }
    let mut labels: Vec<usize> = objects
        .iter()
        .enumerate()
        .filter(|&(i, _)| area[i] > 0 && visible[i] as f64 >= MIN_VISIBLE_FRACTION * area[i] as f64)
        .map(|(_, o)| o.class)
        .collect();
    labels.sort_unstable();
    labels.dedup();
    Ok(Scene { image, objects, visible, labels })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn from_name(name: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|s| s.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: String,
    pub labels: Vec<usize>,
}

/// One split of a dataset. Stored as `<split>.jsonl`, one entry per line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn file_name(split: Split) -> String {
        format!("{}.jsonl", split.name())
    }

    /// Check label range and that every image file exists under `root`.
    pub fn validate(&self, num_classes: usize, root: &Path) -> Result<()> {
        for e in &self.entries {
            if let Some(bad) = e.labels.iter().find(|&&l| l >= num_classes) {
                bail!(Input, "{}: label {bad} out of range for {num_classes} classes", e.image);
            }
            if !root.join(&e.image).is_file() {
                bail!(Input, "missing image file {}", root.join(&e.image).display());
            }
        }
        Ok(())
    }
}

pub fn save_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in &manifest.entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Load `<split>.jsonl`; the split is taken from the file stem.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    let Some(split) = Split::from_name(stem) else {
        bail!(Input, "manifest name {} is not one of train/val/test", path.display());
    };
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        entries.push(entry);
    }
    Ok(Manifest { split, entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    /// Global index of the first image of `split`; images are numbered train, val, test.
    pub fn offset(&self, split: Split) -> usize {
        match split {
            Split::Train => 0,
            Split::Val => self.train,
            Split::Test => self.train + self.val,
        }
    }
}

/// Generate all three splits under `out_dir`: images in `<split>/NNNNNN.ppm`
/// and manifests in `<split>.jsonl`.
pub fn generate_dataset(spec: &SceneSpec, counts: SplitCounts, out_dir: impl AsRef<Path>) -> Result<Vec<Manifest>> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let mut manifests = Vec::new();
    for split in Split::ALL {
        std::fs::create_dir_all(out_dir.join(split.name()))?;
        let mut entries = Vec::with_capacity(counts.get(split));
        for i in 0..counts.get(split) {
            let global = counts.offset(split) + i;
            let scene = generate_scene(spec, global as u64)?;
            let rel = format!("{}/{:06}.ppm", split.name(), global);
            scene.image.save_ppm(out_dir.join(&rel))?;
            entries.push(ManifestEntry { image: rel, labels: scene.labels });
        }
        let manifest = Manifest { split, entries };
        save_manifest(&manifest, out_dir.join(Manifest::file_name(split)))?;
        manifests.push(manifest);
    }
    Ok(manifests)
}

/// Images and labels of one split held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub num_classes: usize,
    pub ids: Vec<String>,
    pub images: Vec<RgbImage>,
    pub labels: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Render a split directly in memory, identical to what [`generate_dataset`] writes.
    pub fn synthesize(spec: &SceneSpec, counts: SplitCounts, split: Split) -> Result<Dataset> {
        let mut ds = Dataset { num_classes: spec.num_classes, ids: vec![], images: vec![], labels: vec![] };
        for i in 0..counts.get(split) {
            let global = counts.offset(split) + i;
            let scene = generate_scene(spec, global as u64)?;
            ds.ids.push(format!("{}/{:06}.ppm", split.name(), global));
            ds.images.push(scene.image);
            ds.labels.push(scene.labels);
        }
        Ok(ds)
    }

    pub fn load(root: impl AsRef<Path>, split: Split, num_classes: usize) -> Result<Dataset> {
        let root = root.as_ref();
        let manifest = load_manifest(root.join(Manifest::file_name(split)))?;
        manifest.validate(num_classes, root)?;
        let mut ds = Dataset { num_classes, ids: vec![], images: vec![], labels: vec![] };
        for e in manifest.entries {
            ds.images.push(RgbImage::load_ppm(root.join(&e.image))?);
            ds.ids.push(e.image);
            ds.labels.push(e.labels);
        }
        Ok(ds)
    }

    /// `{0,1}^K` target of image `i`.
    pub fn multi_hot(&self, i: usize) -> Vec<f64> {
        let mut y = vec![0.0; self.num_classes];
        for &l in &self.labels[i] {
            y[l] = 1.0;
        }
        y
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            num_classes: self.num_classes,
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }
}

pub fn manifest_path(root: &Path, split: Split) -> PathBuf {
    root.join(Manifest::file_name(split))
}
