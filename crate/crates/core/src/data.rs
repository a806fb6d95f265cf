//! Samples, the synthetic sharp-boundary scene generator, folder datasets and
//! batching.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::depth_geometry::DepthMap;
use crate::error::{Error, Result};
use crate::io;
use crate::nn::Tensor;

/// Planar RGB image, channel-major, values in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::ShapeMismatch(format!(
                "image buffer has {} values, expected 3x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, u: usize, v: usize) -> [f32; 3] {
        let plane = self.width * self.height;
        let i = v * self.width + u;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec([1, 3, self.height, self.width], self.data.clone()).expect("consistent image buffer")
    }

    pub fn hflip(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.width) {
            row.reverse();
        }
        Self { data, ..*self }
    }
}

/// An RGB image with its metric depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub image: Image,
    pub depth: DepthMap,
    pub id: String,
}

impl Sample {
    pub fn new(image: Image, depth: DepthMap, id: impl Into<String>) -> Result<Self> {
        if image.width() != depth.width() || image.height() != depth.height() {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{} vs depth {}x{}",
                image.width(),
                image.height(),
                depth.width(),
                depth.height()
            )));
        }
        Ok(Self { image, depth, id: id.into() })
    }

    pub fn hflip(&self) -> Result<Self> {
        let w = self.depth.width();
        let flip = |s: &[f64]| -> Vec<f64> { s.chunks(w).flat_map(|r| r.iter().rev().copied()).collect() };
        let valid: Vec<bool> = self.depth.valid().chunks(w).flat_map(|r| r.iter().rev().copied()).collect();
        let depth = DepthMap::with_mask(w, self.depth.height(), flip(self.depth.values()), valid)?;
        Ok(Self {
            image: self.image.hflip(),
            depth,
            id: self.id.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Ramp,
    Constant,
}

/// Minimum depth gap between a shape and whatever lies beneath its outline.
pub const MIN_SEPARATION: f64 = 0.3;

/// Per-pixel slope cap of the background ramp, in meters per pixel.
pub const MAX_RAMP_SLOPE: f64 = 0.015;

/// Lower bound of per-channel albedo; shading spans [0.3, 1], so albedo stays a
/// secondary cue.
pub const ALBEDO_MIN: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSceneConfig {
    /// `[height, width]`, both multiples of 32.
    pub size: [usize; 2],
    /// Inclusive range of the shape count.
    pub n_shapes: [usize; 2],
    pub depth_range: [f64; 2],
    pub background: Background,
    /// Pins the far level of the background; random when absent.
    pub background_depth: Option<f64>,
    pub shape_kinds: Vec<ShapeKind>,
    pub seed: u64,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        Self {
            size: [64, 64],
            n_shapes: [2, 6],
            depth_range: [1.0, 8.0],
            background: Background::Ramp,
            background_depth: None,
            shape_kinds: vec![ShapeKind::Rectangle, ShapeKind::Ellipse],
            seed: 0,
        }
    }
}

impl SyntheticSceneConfig {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::SizeNotDivisible { height: h, width: w });
        }
        let [lo, hi] = self.depth_range;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo < hi) {
            return Err(Error::Config(format!("depth_range must satisfy 0 < min < max, got [{lo}, {hi}]")));
        }
        if self.n_shapes[0] > self.n_shapes[1] {
            return Err(Error::Config(format!("n_shapes range [{}, {}] is empty", self.n_shapes[0], self.n_shapes[1])));
        }
        if self.n_shapes[1] > 0 && self.shape_kinds.is_empty() {
            return Err(Error::Config("shape_kinds is empty".into()));
        }
        if let Some(d) = self.background_depth {
            if !(d >= lo && d <= hi) {
                return Err(Error::Config(format!("background_depth {d} outside depth_range")));
            }
        }
        Ok(())
    }
}

/// A generated scene plus its exact shape-outline mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub sample: Sample,
    /// Pixels with a 4-neighbor belonging to a different surface.
    pub edges: Vec<bool>,
}

pub fn generate_scene(cfg: &SyntheticSceneConfig) -> Result<Sample> {
    generate_scene_with_edges(cfg, 0).map(|s| s.sample)
}

/// Scene number `index` of the stream selected by `cfg.seed`.
pub fn generate_scene_with_edges(cfg: &SyntheticSceneConfig, index: u64) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let [h, w] = cfg.size;
    let [lo, hi] = cfg.depth_range;

    let mut depth = background(cfg, &mut rng);
    let mut label = vec![0u16; w * h];
    let n_shapes = rng.gen_range(cfg.n_shapes[0]..=cfg.n_shapes[1]);
    let mut albedo = vec![random_albedo(&mut rng)];
    for k in 0..n_shapes {
        let mut placed = false;
        for _attempt in 0..32 {
            let kind = *cfg.shape_kinds.choose(&mut rng).expect("validated non-empty");
            let footprint = random_footprint(kind, w, h, &mut rng);
            let beneath = dilated_min(&footprint, &depth, w, h);
            let upper = beneath - MIN_SEPARATION;
            // Leave room for every later shape to stack in front of this one.
            let floor = lo + (n_shapes - 1 - k) as f64 * MIN_SEPARATION;
            if upper < floor {
                continue;
            }
            let d = rng.gen_range((upper - 2.0).max(floor)..=upper);
            for (i, &inside) in footprint.iter().enumerate() {
                if inside {
                    depth[i] = d;
                    label[i] = (k + 1) as u16;
                }
            }
            albedo.push(random_albedo(&mut rng));
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Infeasible(format!(
                "could not place shape {} at least {MIN_SEPARATION} m in front of the scene within depth range [{lo}, {hi}]",
                k + 1
            )));
        }
    }

    let mut edges = vec![false; w * h];
    for v in 0..h {
        for u in 0..w {
            let l = label[v * w + u];
            let differs = |uu: usize, vv: usize| label[vv * w + uu] != l;
            edges[v * w + u] = (u > 0 && differs(u - 1, v))
                || (u + 1 < w && differs(u + 1, v))
                || (v > 0 && differs(u, v - 1))
                || (v + 1 < h && differs(u, v + 1));
        }
    }

    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        let shade = 1.0 - 0.7 * (depth[i] - lo) / (hi - lo);
        let a = albedo[label[i] as usize];
        for c in 0..3 {
            data[c * plane + i] = (a[c] * shade).clamp(0.0, 1.0) as f32;
        }
    }
    let image = Image::new(w, h, data)?;
    // Stored depth is f32-representable so PFM export is lossless.
    let depth = DepthMap::from_values(w, h, depth.into_iter().map(|d| d as f32 as f64).collect())?;
    let id = format!("synth_{:016x}_{index:06}", cfg.seed);
    Ok(SyntheticScene {
        sample: Sample::new(image, depth, id)?,
        edges,
    })
}

fn background(cfg: &SyntheticSceneConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let [h, w] = cfg.size;
    let [lo, hi] = cfg.depth_range;
    let far = match cfg.background_depth {
        Some(d) => d,
        None => rng.gen_range(lo + 0.5 * (hi - lo)..=hi),
    };
    let (su, sv) = match cfg.background {
        Background::Constant => (0.0, 0.0),
        Background::Ramp => {
            // Keep the whole ramp inside [lo, far].
            let room = (far - lo) / ((w - 1) + (h - 1)) as f64;
            let cap = MAX_RAMP_SLOPE.min(room);
            (rng.gen_range(-cap..=cap), rng.gen_range(-cap..=cap))
        }
    };
    // Anchor the farthest corner at `far`.
    let u0 = if su > 0.0 { (w - 1) as f64 } else { 0.0 };
    let v0 = if sv > 0.0 { (h - 1) as f64 } else { 0.0 };
    let mut out = Vec::with_capacity(w * h);
    for v in 0..h {
        for u in 0..w {
            let d = far + su * (u as f64 - u0) + sv * (v as f64 - v0);
            out.push(d.clamp(lo, hi));
        }
    }
    out
}

fn random_albedo(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen_range(ALBEDO_MIN..1.0), rng.gen_range(ALBEDO_MIN..1.0), rng.gen_range(ALBEDO_MIN..1.0)]
}

fn random_footprint(kind: ShapeKind, w: usize, h: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let (wf, hf) = (w as f64, h as f64);
    let cx = rng.gen_range(0.1 * wf..0.9 * wf);
    let cy = rng.gen_range(0.1 * hf..0.9 * hf);
    let rx = rng.gen_range(wf / 10.0..wf / 4.0);
    let ry = rng.gen_range(hf / 10.0..hf / 4.0);
    let mut mask = vec![false; w * h];
    for v in 0..h {
        for u in 0..w {
            let (dx, dy) = ((u as f64 + 0.5 - cx) / rx, (v as f64 + 0.5 - cy) / ry);
            mask[v * w + u] = match kind {
                ShapeKind::Rectangle => dx.abs() <= 1.0 && dy.abs() <= 1.0,
                ShapeKind::Ellipse => dx * dx + dy * dy <= 1.0,
            };
        }
    }
    mask
}

/// Minimum depth over the footprint grown by one pixel (8-neighborhood).
fn dilated_min(mask: &[bool], depth: &[f64], w: usize, h: usize) -> f64 {
    let mut m = f64::INFINITY;
    for v in 0..h {
        for u in 0..w {
            if !mask[v * w + u] {
                continue;
            }
            for vv in v.saturating_sub(1)..(v + 2).min(h) {
                for uu in u.saturating_sub(1)..(u + 2).min(w) {
                    m = m.min(depth[vv * w + uu]);
                }
            }
        }
    }
    m
}

/// `count` consecutive scenes from the stream of `cfg.seed`.
pub fn generate_scenes(cfg: &SyntheticSceneConfig, count: usize) -> Result<Vec<SyntheticScene>> {
    cfg.validate()?;
    crate::par::map_range(count, |i| generate_scene_with_edges(cfg, i as u64))
        .into_iter()
        .collect()
}

/// Writes `images/<id>.png`, `depth/<id>.pfm`, `edges/<id>.png` and
/// `index.txt`; returns every path written.
pub fn write_synthetic_dataset(out_dir: &Path, scenes: &[SyntheticScene]) -> Result<Vec<PathBuf>> {
    for sub in ["images", "depth", "edges"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut index = String::new();
    let mut written = Vec::with_capacity(3 * scenes.len() + 1);
    for scene in scenes {
        let s = &scene.sample;
        let img = format!("images/{}.png", s.id);
        let dep = format!("depth/{}.pfm", s.id);
        let edg = out_dir.join(format!("edges/{}.png", s.id));
        io::write_rgb(&out_dir.join(&img), &s.image)?;
        io::write_pfm(&out_dir.join(&dep), &s.depth)?;
        io::write_mask(&edg, &scene.edges, s.depth.width(), s.depth.height())?;
        index.push_str(&format!("{img}\t{dep}\n"));
        written.extend([out_dir.join(img), out_dir.join(dep), edg]);
    }
    let index_path = out_dir.join(INDEX_FILE);
    let mut f = std::fs::File::create(&index_path).map_err(|e| Error::io(&index_path, e))?;
    f.write_all(index.as_bytes()).map_err(|e| Error::io(&index_path, e))?;
    written.push(index_path);
    Ok(written)
}

pub fn load_sample(image_path: &Path, depth_path: &Path) -> Result<Sample> {
    let image = io::read_rgb(image_path)?;
    let depth = io::read_depth(depth_path)?;
    let id = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Sample::new(image, depth, id)
}

/// Anything that can hand out samples by index.
pub trait Dataset: Sync {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<Sample>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Default)]
pub struct InMemoryDataset {
    pub samples: Vec<Sample>,
}

impl InMemoryDataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn synthetic(cfg: &SyntheticSceneConfig, count: usize) -> Result<Self> {
        Ok(Self::new(generate_scenes(cfg, count)?.into_iter().map(|s| s.sample).collect()))
    }
}

impl InMemoryDataset {
    /// Hash split into `(train, val)`.
    pub fn split(self) -> (Self, Self) {
        let (val, train): (Vec<_>, Vec<_>) = self.samples.into_iter().partition(|s| is_validation_id(&s.id));
        (Self::new(train), Self::new(val))
    }
}

impl Dataset for InMemoryDataset {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn get(&self, index: usize) -> Result<Sample> {
        Ok(self.samples[index].clone())
    }
}

pub const INDEX_FILE: &str = "index.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    All,
    Train,
    Val,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Split::All),
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Config(format!("unknown split {other:?}; expected all, train or val"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::All => "all",
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Stable 80/20 assignment from the SHA-256 of the sample id.
pub fn is_validation_id(id: &str) -> bool {
    let digest = Sha256::digest(id.as_bytes());
    let x = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    x % 5 == 0
}

/// Image/depth pairs listed in an index file, loaded lazily.
#[derive(Debug, Clone)]
pub struct FolderDataset {
    root: PathBuf,
    entries: Vec<(PathBuf, PathBuf)>,
}

impl FolderDataset {
    /// Uses `<split>.txt` under `root` when present, else `index.txt` with
    /// the hash split.
    pub fn open(root: &Path, split: Split) -> Result<Self> {
        let dedicated = root.join(format!("{}.txt", split.name()));
        let (index_path, filter) = if split != Split::All && dedicated.is_file() {
            (dedicated, false)
        } else {
            (root.join(INDEX_FILE), split != Split::All)
        };
        if !index_path.is_file() {
            return Err(Error::Config(format!("missing index file {}", index_path.display())));
        }
        let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let Some((img, dep)) = line.split_once('\t') else {
                return Err(Error::format(&index_path, format!("line {}: expected image<TAB>depth", n + 1)));
            };
            let img = PathBuf::from(img.trim());
            if filter {
                let id = sample_id(&img);
                if is_validation_id(&id) != (split == Split::Val) {
                    continue;
                }
            }
            entries.push((img, PathBuf::from(dep.trim())));
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn entries(&self) -> &[(PathBuf, PathBuf)] {
        &self.entries
    }

    /// Loads every sample into memory.
    pub fn load_all(&self) -> Result<InMemoryDataset> {
        let samples: Result<Vec<_>> = crate::par::map_range(self.len(), |i| self.get(i)).into_iter().collect();
        Ok(InMemoryDataset::new(samples?))
    }
}

fn sample_id(image: &Path) -> String {
    image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

impl Dataset for FolderDataset {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn get(&self, index: usize) -> Result<Sample> {
        let (img, dep) = &self.entries[index];
        load_sample(&self.root.join(img), &self.root.join(dep)).map_err(|e| Error::Sample {
            id: sample_id(img),
            source: Box::new(e),
        })
    }
}

/// A stacked batch: images `[n, 3, H, W]` plus per-sample depth.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub depths: Vec<DepthMap>,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn from_samples(samples: Vec<Sample>) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::Config("empty batch".into()));
        };
        let (w, h) = (first.image.width(), first.image.height());
        let mut data = Vec::with_capacity(samples.len() * 3 * w * h);
        let mut depths = Vec::with_capacity(samples.len());
        let mut ids = Vec::with_capacity(samples.len());
        for s in samples.iter() {
            if s.image.width() != w || s.image.height() != h {
                return Err(Error::ShapeMismatch(format!(
                    "sample {} is {}x{}, batch is {w}x{h}",
                    s.id,
                    s.image.width(),
                    s.image.height()
                )));
            }
            data.extend_from_slice(s.image.data());
        }
        for s in samples {
            depths.push(s.depth);
            ids.push(s.id);
        }
        let images = Tensor::from_vec([depths.len(), 3, h, w], data)?;
        Ok(Self { images, depths, ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Sample order for one pass: identity, or a seeded shuffle.
pub fn epoch_order(len: usize, shuffle_seed: Option<u64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
}

/// Yields batches in a deterministic order; the last batch may be short.
pub struct Batches<'a, D: Dataset + ?Sized> {
    dataset: &'a D,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<'a, D: Dataset + ?Sized> Batches<'a, D> {
    pub fn new(dataset: &'a D, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(Self {
            dataset,
            order: epoch_order(dataset.len(), shuffle_seed),
            batch_size,
            pos: 0,
        })
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl<D: Dataset + ?Sized> Iterator for Batches<'_, D> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let loaded: Result<Vec<Sample>> = crate::par::map_slice(idx, |&i| self.dataset.get(i)).into_iter().collect();
        Some(loaded.and_then(Batch::from_samples))
    }
}

/// Opens `root_dir` for `split` and batches it.
pub fn dataset_iterator(
    root_dir: &Path,
    split: Split,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<impl Iterator<Item = Result<Batch>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let ds = FolderDataset::open(root_dir, split)?;
    if ds.is_empty() {
        return Err(Error::Config(format!("split {:?} of {} is empty", split.name(), root_dir.display())));
    }
    let order = epoch_order(ds.len(), shuffle_seed);
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    Ok(chunks.into_iter().map(move |idx| {
        let loaded: Result<Vec<Sample>> = crate::par::map_slice(&idx, |&i| ds.get(i)).into_iter().collect();
        loaded.and_then(Batch::from_samples)
    }))
}
