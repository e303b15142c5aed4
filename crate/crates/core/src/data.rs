//! Episodes, datasets (synthetic and image-folder), class splits and
//! training-time augmentation. Images are stored as CHW `f32` in [0,1].

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::EpisodeBatch;
use crate::tensor::{Scalar, Tensor};

/// Derives an independent stream seed from a base seed and a tuple of
/// indices (splitmix64 finalizer over each component).
pub fn mix_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = base ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    side: usize,
    class_names: Vec<String>,
    images: Vec<Vec<f32>>,
    labels: Vec<usize>,
    by_class: Vec<Vec<usize>>,
}

impl Dataset {
    /// Builds a dataset from `(image, class)` pairs; every image must be 3×side×side.
    pub fn new(side: usize, class_names: Vec<String>, items: Vec<(Vec<f32>, usize)>) -> Result<Self> {
        let mut by_class = vec![Vec::new(); class_names.len()];
        let mut images = Vec::with_capacity(items.len());
        let mut labels = Vec::with_capacity(items.len());
        for (i, (img, c)) in items.into_iter().enumerate() {
            if img.len() != 3 * side * side {
                return Err(Error::Data(format!(
                    "image {i} has {} values, expected 3×{side}×{side}",
                    img.len()
                )));
            }
            if c >= class_names.len() {
                return Err(Error::Data(format!("image {i} has class {c} of {}", class_names.len())));
            }
            by_class[c].push(i);
            images.push(img);
            labels.push(c);
        }
        Ok(Self {
            side,
            class_names,
            images,
            labels,
            by_class,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Indices of the images of class `c`.
    pub fn class_images(&self, c: usize) -> &[usize] {
        &self.by_class[c]
    }

    /// Stacks the given images into an `[n, 3, side, side]` tensor.
    pub fn stack<T: Scalar>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(indices.len() * 3 * self.side * self.side);
        for &i in indices {
            data.extend(self.images[i].iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        Tensor::new(vec![indices.len(), 3, self.side, self.side], data)
    }
}

/// Class-disjoint base / validation / novel partition of a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub base: Vec<usize>,
    pub val: Vec<usize>,
    pub novel: Vec<usize>,
}

impl DatasetSplit {
    pub fn new(base: Vec<usize>, val: Vec<usize>, novel: Vec<usize>) -> Result<Self> {
        let mut seen = HashSet::new();
        for &c in base.iter().chain(&val).chain(&novel) {
            if !seen.insert(c) {
                return Err(Error::Data(format!("class {c} appears in more than one split")));
            }
        }
        Ok(Self { base, val, novel })
    }

    /// Contiguous split: the first `base` classes, then `val`, then the rest.
    pub fn contiguous(num_classes: usize, base: usize, val: usize) -> Result<Self> {
        if base + val > num_classes {
            return Err(Error::Data(format!(
                "cannot take {base} base + {val} validation classes from {num_classes}"
            )));
        }
        Self::new(
            (0..base).collect(),
            (base..base + val).collect(),
            (base + val..num_classes).collect(),
        )
    }

    /// Proportional contiguous split (60% / 20% / 20%, at least one val and novel class).
    pub fn proportional(num_classes: usize) -> Result<Self> {
        if num_classes < 3 {
            return Err(Error::Data(format!("need at least 3 classes to split, found {num_classes}")));
        }
        let val = (num_classes / 5).max(1);
        let novel = val;
        Self::contiguous(num_classes, num_classes - val - novel, val)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    /// Dataset class of each episode-local label.
    pub classes: Vec<usize>,
    /// `(image index, local label)`, class-major: item `n·K + k` is shot `k` of class `n`.
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
}

impl Episode {
    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|&(_, l)| l).collect()
    }

    /// Support images followed by query images, optionally augmented.
    pub fn to_batch<T: Scalar>(
        &self,
        data: &Dataset,
        augment_cfg: Option<(&AugmentConfig, u64)>,
    ) -> Result<EpisodeBatch<T>> {
        let indices: Vec<usize> = self.support.iter().chain(&self.query).map(|&(i, _)| i).collect();
        let images = match augment_cfg {
            None => data.stack(&indices)?,
            Some((cfg, seed)) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let side = data.side();
                let mut values = Vec::with_capacity(indices.len() * 3 * side * side);
                for &i in &indices {
                    let img = augment(data.image(i), side, cfg, &mut rng);
                    values.extend(img.into_iter().map(|v| T::from_f64_lossy(v as f64)));
                }
                Tensor::new(vec![indices.len(), 3, side, side], values)?
            }
        };
        Ok(EpisodeBatch {
            images,
            way: self.way,
            shot: self.shot,
            query_labels: self.query_labels(),
        })
    }
}

/// Samples `way` classes uniformly from `classes`, then `shot + queries`
/// distinct images per class.
pub fn sample_episode(
    data: &Dataset,
    classes: &[usize],
    way: usize,
    shot: usize,
    queries: usize,
    seed: u64,
) -> Result<Episode> {
    if way == 0 || shot == 0 || queries == 0 {
        return Err(Error::Data(format!(
            "way, shot and queries must be positive (got {way}, {shot}, {queries})"
        )));
    }
    if classes.len() < way {
        return Err(Error::Data(format!(
            "{way}-way episode needs {way} classes, partition has {}",
            classes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<usize> = index::sample(&mut rng, classes.len(), way)
        .into_iter()
        .map(|i| classes[i])
        .collect();
    let mut support = Vec::with_capacity(way * shot);
    let mut query = Vec::with_capacity(way * queries);
    for (label, &c) in chosen.iter().enumerate() {
        let pool = data.class_images(c);
        if pool.len() < shot + queries {
            return Err(Error::Data(format!(
                "class {c} has {} images, episode needs {}",
                pool.len(),
                shot + queries
            )));
        }
        let picks = index::sample(&mut rng, pool.len(), shot + queries).into_vec();
        support.extend(picks[..shot].iter().map(|&p| (pool[p], label)));
        query.extend(picks[shot..].iter().map(|&p| (pool[p], label)));
    }
    Ok(Episode {
        way,
        shot,
        queries,
        classes: chosen,
        support,
        query,
    })
}

/// Parameters of the synthetic fine-grained dataset: classes in the same
/// coarse group share a striped base pattern and differ by the colour
/// (channel cue) and position (spatial cue) of a blob.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub coarse_groups: usize,
    pub side: usize,
    pub images_per_class: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub palette: Vec<[f32; 3]>,
    /// Blob centre offset from the image centre, in pixels.
    pub offsets: Vec<(i32, i32)>,
}

const HUES: usize = 10;

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::new(40, 4, 32, 30, 0.05, 0)
    }
}

impl SyntheticSpec {
    /// Spec with the default palette/offset assignment: class `c` gets hue
    /// `c mod 10` and one of nine grid offsets chosen by `c / 10`.
    pub fn new(
        num_classes: usize,
        coarse_groups: usize,
        side: usize,
        images_per_class: usize,
        noise_std: f64,
        seed: u64,
    ) -> Self {
        let step = (side / 6) as i32;
        let grid: Vec<(i32, i32)> = (-1..=1).flat_map(|y| (-1..=1).map(move |x| (x * step, y * step))).collect();
        let palette = (0..num_classes).map(|c| hue_rgb((c % HUES) as f32 / HUES as f32)).collect();
        let offsets = (0..num_classes).map(|c| grid[(c / HUES + 4) % grid.len()]).collect();
        Self {
            num_classes,
            coarse_groups,
            side,
            images_per_class,
            noise_std,
            seed,
            palette,
            offsets,
        }
    }

    pub fn group_of(&self, class: usize) -> usize {
        class * self.coarse_groups / self.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.coarse_groups == 0 || self.side < 4 || self.images_per_class == 0 {
            return Err(Error::Config(
                "synthetic spec needs positive classes, groups, images and side >= 4".into(),
            ));
        }
        if self.coarse_groups > self.num_classes {
            return Err(Error::Config(format!(
                "{} coarse groups for {} classes",
                self.coarse_groups, self.num_classes
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if self.palette.len() != self.num_classes || self.offsets.len() != self.num_classes {
            return Err(Error::Config("palette and offsets need one entry per class".into()));
        }
        for a in 0..self.num_classes {
            for b in a + 1..self.num_classes {
                if self.palette[a] == self.palette[b] && self.offsets[a] == self.offsets[b] {
                    return Err(Error::Config(format!(
                        "classes {a} and {b} share both palette and offset"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Flat `key = value` text.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "num_classes = {}", self.num_classes);
        let _ = writeln!(s, "coarse_groups = {}", self.coarse_groups);
        let _ = writeln!(s, "side = {}", self.side);
        let _ = writeln!(s, "images_per_class = {}", self.images_per_class);
        let _ = writeln!(s, "noise_std = {}", self.noise_std);
        let _ = writeln!(s, "seed = {}", self.seed);
        for (c, (p, o)) in self.palette.iter().zip(&self.offsets).enumerate() {
            let _ = writeln!(s, "class{c}.palette = {},{},{}", p[0], p[1], p[2]);
            let _ = writeln!(s, "class{c}.offset = {},{}", o.0, o.1);
        }
        s
    }

    /// Parses [`to_kv`](Self::to_kv) output. Per-class palette/offset lines
    /// are optional and override the defaults.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut kv = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            kv.push((k.trim().to_string(), v.trim().to_string()));
        }
        let get = |key: &str| kv.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let num = |key: &str, default: f64| -> Result<f64> {
            get(key).map_or(Ok(default), |v| {
                v.parse::<f64>()
                    .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
            })
        };
        let d = Self::default();
        let mut spec = Self::new(
            num("num_classes", d.num_classes as f64)? as usize,
            num("coarse_groups", d.coarse_groups as f64)? as usize,
            num("side", d.side as f64)? as usize,
            num("images_per_class", d.images_per_class as f64)? as usize,
            num("noise_std", d.noise_std)?,
            get("seed").map_or(Ok(d.seed), |v| {
                v.parse().map_err(|_| Error::Config(format!("`seed`: cannot parse `{v}`")))
            })?,
        );
        for (k, v) in &kv {
            let Some(rest) = k.strip_prefix("class") else { continue };
            let Some((idx, field)) = rest.split_once('.') else { continue };
            let c: usize = idx
                .parse()
                .map_err(|_| Error::Config(format!("bad class key `{k}`")))?;
            if c >= spec.num_classes {
                return Err(Error::Config(format!("`{k}` exceeds num_classes")));
            }
            let parts: Vec<&str> = v.split(',').map(str::trim).collect();
            match (field, parts.as_slice()) {
                ("palette", [r, g, b]) => {
                    let p = |s: &str| s.parse::<f32>().map_err(|_| Error::Config(format!("`{k}`: bad value")));
                    spec.palette[c] = [p(r)?, p(g)?, p(b)?];
                }
                ("offset", [x, y]) => {
                    let p = |s: &str| s.parse::<i32>().map_err(|_| Error::Config(format!("`{k}`: bad value")));
                    spec.offsets[c] = (p(x)?, p(y)?);
                }
                _ => return Err(Error::Config(format!("unrecognized key `{k}`"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Noise-free rendering of class `c`.
    pub fn render_clean(&self, class: usize) -> Vec<f32> {
        let s = self.side;
        let group = self.group_of(class);
        // Each group gets its own stripe orientation and frequency.
        let angle = std::f32::consts::PI * group as f32 / self.coarse_groups as f32;
        let freq = 2.0 + (group % 3) as f32;
        let (ca, sa) = (angle.cos(), angle.sin());
        let (ox, oy) = self.offsets[class];
        let cx = s as f32 / 2.0 + ox as f32;
        let cy = s as f32 / 2.0 + oy as f32;
        let radius = s as f32 / 5.0;
        let color = self.palette[class];
        let mut img = vec![0f32; 3 * s * s];
        for y in 0..s {
            for x in 0..s {
                let t = (x as f32 * ca + y as f32 * sa) / s as f32;
                let base = 0.35 + 0.15 * (2.0 * std::f32::consts::PI * freq * t).sin();
                let dist = ((x as f32 + 0.5 - cx).powi(2) + (y as f32 + 0.5 - cy).powi(2)).sqrt();
                let inside = dist <= radius;
                for ch in 0..3 {
                    img[ch * s * s + y * s + x] = if inside { color[ch] } else { base };
                }
            }
        }
        img
    }
}

fn hue_rgb(h: f32) -> [f32; 3] {
    // HSV with s = 0.85, v = 0.95
    let (s, v) = (0.85f32, 0.95f32);
    let h6 = h * 6.0;
    let i = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Renders every image of the spec. Image `i` of class `c` depends only on
/// `(seed, c, i)`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let names = (0..spec.num_classes).map(|c| format!("class{c:03}")).collect();
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut items = Vec::with_capacity(spec.num_classes * spec.images_per_class);
    for c in 0..spec.num_classes {
        let clean = spec.render_clean(c);
        for i in 0..spec.images_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, &[c as u64, i as u64]));
            let img = clean
                .iter()
                .map(|&v| {
                    let n = if spec.noise_std > 0.0 { noise.sample(&mut rng) as f32 } else { 0.0 };
                    (v + n).clamp(0.0, 1.0)
                })
                .collect();
            items.push((img, c));
        }
    }
    Dataset::new(spec.side, names, items)
}

/// Loads `root/<class>/<image>`; classes ordered by directory name, files by
/// file name. Images are resized to `side`×`side` RGB in [0,1].
pub fn load_image_folder(root: &Path, side: usize) -> Result<Dataset> {
    if side == 0 {
        return Err(Error::Config("image side must be positive".into()));
    }
    let mut class_dirs: Vec<_> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().map(|t| t.is_dir()).unwrap_or(false))
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!("{} has no class directories", root.display())));
    }
    let mut names = Vec::with_capacity(class_dirs.len());
    let mut items = Vec::new();
    for (c, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
            .map(|e| e.path())
            .filter(|p| !p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.')))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!("class directory {} is empty", dir.display())));
        }
        for f in files {
            items.push((load_image(&f, side)?, c));
        }
        names.push(dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
    }
    Dataset::new(side, names, items)
}

fn load_image(path: &Path, side: usize) -> Result<Vec<f32>> {
    let decode_err = |reason: String| Error::Decode {
        path: path.to_path_buf(),
        reason,
    };
    let img = image::ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(|e| decode_err(e.to_string()))?;
    let rgb = image::imageops::resize(
        &img.to_rgb8(),
        side as u32,
        side as u32,
        image::imageops::FilterType::Triangle,
    );
    let mut out = vec![0f32; 3 * side * side];
    for (x, y, px) in rgb.enumerate_pixels() {
        for ch in 0..3 {
            out[ch * side * side + y as usize * side + x as usize] = px.0[ch] as f32 / 255.0;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub crop_scale_min: f32,
    pub flip_p: f64,
    pub brightness: f32,
    pub saturation: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            crop_scale_min: 0.7,
            flip_p: 0.5,
            brightness: 0.2,
            saturation: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

/// Random resized crop, horizontal flip and brightness/saturation jitter.
pub fn augment(image: &[f32], side: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> Vec<f32> {
    if !cfg.enabled {
        return image.to_vec();
    }
    let area = rng.gen_range(cfg.crop_scale_min.min(1.0)..=1.0);
    let crop = ((side as f32 * area.sqrt()).round() as usize).clamp(1, side);
    let x0 = rng.gen_range(0..=side - crop);
    let y0 = rng.gen_range(0..=side - crop);
    let mut out = resize_crop(image, side, x0, y0, crop);
    if rng.gen_bool(cfg.flip_p.clamp(0.0, 1.0)) {
        out = flip_horizontal(&out, side);
    }
    let b = 1.0 + rng.gen_range(-cfg.brightness..=cfg.brightness);
    let s = 1.0 + rng.gen_range(-cfg.saturation..=cfg.saturation);
    let plane = side * side;
    for p in 0..plane {
        let (r, g, bl) = (out[p] * b, out[plane + p] * b, out[2 * plane + p] * b);
        let gray = 0.299 * r + 0.587 * g + 0.114 * bl;
        out[p] = (gray + s * (r - gray)).clamp(0.0, 1.0);
        out[plane + p] = (gray + s * (g - gray)).clamp(0.0, 1.0);
        out[2 * plane + p] = (gray + s * (bl - gray)).clamp(0.0, 1.0);
    }
    out
}

/// Bilinear resample of the `crop`×`crop` window at (x0, y0) back to side×side.
fn resize_crop(image: &[f32], side: usize, x0: usize, y0: usize, crop: usize) -> Vec<f32> {
    let mut out = vec![0f32; image.len()];
    let scale = crop as f32 / side as f32;
    let plane = side * side;
    for y in 0..side {
        let sy = ((y as f32 + 0.5) * scale - 0.5).clamp(0.0, (crop - 1) as f32);
        let (ya, fy) = (sy.floor() as usize, sy.fract());
        let yb = (ya + 1).min(crop - 1);
        for x in 0..side {
            let sx = ((x as f32 + 0.5) * scale - 0.5).clamp(0.0, (crop - 1) as f32);
            let (xa, fx) = (sx.floor() as usize, sx.fract());
            let xb = (xa + 1).min(crop - 1);
            for ch in 0..3 {
                let at = |yy: usize, xx: usize| image[ch * plane + (y0 + yy) * side + x0 + xx];
                let top = at(ya, xa) * (1.0 - fx) + at(ya, xb) * fx;
                let bot = at(yb, xa) * (1.0 - fx) + at(yb, xb) * fx;
                out[ch * plane + y * side + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn flip_horizontal(image: &[f32], side: usize) -> Vec<f32> {
    let mut out = image.to_vec();
    for row in out.chunks_mut(side) {
        row.reverse();
    }
    out
}
