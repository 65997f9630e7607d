//! Dataset ingestion, deterministic augmentation, and a seeded synthetic
//! cross-view generator for desk-scale experiments.
//!
//! On-disk layout: `root/{train,test}/{drone,satellite}/{class_id}/*.png`.

use crate::backbone::{rot90_tensor, FeatureField};
use crate::error::{Error, Result};
use crate::retrieval::View;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl View {
    pub fn dir_name(&self) -> &'static str {
        match self {
            View::Drone => "drone",
            View::Satellite => "satellite",
        }
    }
}

/// splitmix64 finalizer; the seed-derivation primitive everywhere below.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Fold a seed path into one u64 so independent draw streams never
/// depend on iteration order or worker count.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut acc = 0x243F6A8885A308D3u64;
    for &p in parts {
        acc = splitmix64(acc ^ p);
    }
    acc
}

/// Per-sample augmentation stream for (global seed, epoch, index).
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x41, epoch, index]))
}

/// Class directory names are numeric where possible; anything else is
/// hashed (FNV-1a) so every class still gets a stable 64-bit id.
pub fn class_id_from_name(name: &str) -> u64 {
    if let Ok(n) = name.parse::<u64>() {
        return n;
    }
    let mut h = 0xCBF29CE484222325u64;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001B3);
    }
    h
}

#[derive(Debug, Clone)]
pub struct ClassEntry {
    pub id: u64,
    pub name: String,
    pub drone: Vec<PathBuf>,
    pub satellite: Vec<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub classes: Vec<ClassEntry>,
    pub warnings: Vec<String>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.classes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

fn list_sorted_dirs(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort_unstable();
    Ok(names)
}

fn list_sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.file_type()?.is_file() && name.ends_with(".png") {
            names.push(name);
        }
    }
    names.sort_unstable();
    Ok(names.into_iter().map(|n| dir.join(n)).collect())
}

/// Walk `root/split/{drone,satellite}` and pair classes by directory
/// name. Classes missing either view are skipped with a warning.
pub fn scan_dataset(root: &Path, split: Split) -> Result<DatasetManifest> {
    let split_dir = root.join(split.dir_name());
    let drone_dir = split_dir.join(View::Drone.dir_name());
    let sat_dir = split_dir.join(View::Satellite.dir_name());
    for d in [&drone_dir, &sat_dir] {
        if !d.is_dir() {
            return Err(Error::Data(format!("missing view directory {}", d.display())));
        }
    }

    let drone_classes = list_sorted_dirs(&drone_dir)?;
    let sat_classes = list_sorted_dirs(&sat_dir)?;
    let mut warnings = Vec::new();
    let mut classes = Vec::new();

    let mut all: Vec<String> = drone_classes.clone();
    for c in &sat_classes {
        if !all.contains(c) {
            all.push(c.clone());
        }
    }
    all.sort_unstable();

    for name in &all {
        let drone = if drone_classes.contains(name) {
            list_sorted_pngs(&drone_dir.join(name))?
        } else {
            Vec::new()
        };
        let satellite = if sat_classes.contains(name) {
            list_sorted_pngs(&sat_dir.join(name))?
        } else {
            Vec::new()
        };
        if drone.is_empty() || satellite.is_empty() {
            let missing = if drone.is_empty() { View::Drone } else { View::Satellite };
            warnings.push(format!(
                "class {} has no {} images, skipped",
                name,
                missing.dir_name()
            ));
            continue;
        }
        classes.push(ClassEntry {
            id: class_id_from_name(name),
            name: name.clone(),
            drone,
            satellite,
        });
    }

    Ok(DatasetManifest {
        root: root.to_path_buf(),
        split,
        classes,
        warnings,
    })
}

// ── image io ─────────────────────────────────────────────────────────

/// Decode an 8-bit RGB PNG to a `[3,H,W]` tensor in [0,1].
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let raw = img.as_raw();
    let (w, h) = (w as usize, h as usize);
    let mut values = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                values[c * h * w + y * w + x] = raw[(y * w + x) * 3 + c] as f32 / 255.0;
            }
        }
    }
    Tensor::new(vec![3, h, w], values)
}

/// Encode a `[3,H,W]` tensor in [0,1] as an 8-bit RGB PNG.
pub fn save_image(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Dimension(format!("image wants [3,H,W], got {:?}", s)));
    }
    let (h, w) = (s[1], s[2]);
    let mut raw = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = t.values()[c * h * w + y * w + x];
                raw[(y * w + x) * 3 + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    let img: image::RgbImage = image::ImageBuffer::from_raw(w as u32, h as u32, raw)
        .expect("buffer sized from the tensor shape");
    img.save(path)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {}", path.display(), e))))
}

/// One preprocessed training or evaluation image.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: FeatureField<f32>,
    pub class_id: u64,
    pub view: View,
}

impl Sample {
    /// Wrap a `[3,S,S]` pixel tensor; the spatial extent must be square.
    pub fn from_pixels(pixels: Tensor<f32>, class_id: u64, view: View) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(Error::Geometry(format!(
                "sample wants a square [C,S,S] image, got {:?}",
                s
            )));
        }
        Ok(Sample {
            image: FeatureField::from_image(pixels)?,
            class_id,
            view,
        })
    }

    pub fn side(&self) -> usize {
        self.image.height()
    }

    /// Pixel tensor as `[C,S,S]`.
    pub fn pixels(&self) -> Result<Tensor<f32>> {
        let f = &self.image;
        let shape = vec![f.channels(), f.height(), f.width()];
        f.data().clone().reshaped(shape)
    }
}

pub fn load_sample(path: &Path, class_id: u64, view: View) -> Result<Sample> {
    Sample::from_pixels(load_image(path)?, class_id, view)
}

/// Box-filter resample of a `[C,H,W]` tensor. Each output pixel is the
/// area-weighted mean of the source region it covers; identity sizes
/// reproduce the input bitwise.
pub fn resample_area(t: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("resample wants [C,H,W], got {:?}", s)));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::Geometry("resample target must be non-empty".into()));
    }
    let (ch, h, w) = (s[0], s[1], s[2]);
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = vec![0.0f32; ch * out_h * out_w];
    for c in 0..ch {
        let plane = &t.values()[c * h * w..(c + 1) * h * w];
        for oy in 0..out_h {
            let y0 = oy as f64 * sy;
            let y1 = (oy + 1) as f64 * sy;
            for ox in 0..out_w {
                let x0 = ox as f64 * sx;
                let x1 = (ox + 1) as f64 * sx;
                let mut acc = 0.0f64;
                let mut area = 0.0f64;
                let iy0 = y0.floor() as usize;
                let iy1 = (y1.ceil() as usize).min(h);
                let ix0 = x0.floor() as usize;
                let ix1 = (x1.ceil() as usize).min(w);
                for y in iy0..iy1 {
                    let wy = (y1.min((y + 1) as f64) - y0.max(y as f64)).max(0.0);
                    for x in ix0..ix1 {
                        let wx = (x1.min((x + 1) as f64) - x0.max(x as f64)).max(0.0);
                        acc += plane[y * w + x] as f64 * wy * wx;
                        area += wy * wx;
                    }
                }
                out[c * out_h * out_w + oy * out_w + ox] = (acc / area) as f32;
            }
        }
    }
    Tensor::new(vec![ch, out_h, out_w], out)
}

fn hflip(t: &Tensor<f32>) -> Tensor<f32> {
    let s = t.shape();
    let (ch, h, w) = (s[0], s[1], s[2]);
    let mut out = vec![0.0f32; ch * h * w];
    for c in 0..ch {
        for y in 0..h {
            for x in 0..w {
                out[c * h * w + y * w + x] = t.values()[c * h * w + y * w + (w - 1 - x)];
            }
        }
    }
    Tensor::from_raw(s.to_vec(), out)
}

fn crop(t: &Tensor<f32>, top: usize, left: usize, side: usize) -> Result<Tensor<f32>> {
    let s = t.shape();
    let (ch, h, w) = (s[0], s[1], s[2]);
    if top + side > h || left + side > w {
        return Err(Error::Geometry(format!(
            "crop {}+{} exceeds {}x{}",
            top, side, h, w
        )));
    }
    let mut out = Vec::with_capacity(ch * side * side);
    for c in 0..ch {
        for y in 0..side {
            let row = c * h * w + (top + y) * w + left;
            out.extend_from_slice(&t.values()[row..row + side]);
        }
    }
    Tensor::new(vec![ch, side, side], out)
}

/// Train-time augmentation policy. The crop fraction must map the
/// canonical side to an integer crop size.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub rotate: bool,
    pub flip: bool,
    pub crop_fraction: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            rotate: true,
            flip: true,
            crop_fraction: 1.0,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "crop fraction {} outside (0,1]",
                self.crop_fraction
            )));
        }
        Ok(())
    }

    fn crop_side(&self, side: usize) -> Result<usize> {
        let exact = self.crop_fraction * side as f64;
        let rounded = exact.round();
        if (exact - rounded).abs() > 1e-9 || rounded < 1.0 {
            return Err(Error::Config(format!(
                "crop fraction {} of side {} is not an integer size",
                self.crop_fraction, side
            )));
        }
        Ok(rounded as usize)
    }
}

/// Apply the augmentation policy with draws from `rng`, in a fixed
/// order: quarter-turn rotation, horizontal flip, crop, then box
/// resample back to the input side. With everything off and crop
/// fraction 1 the output is the input, bitwise.
pub fn augment(sample: &Sample, cfg: &AugmentationConfig, rng: &mut ChaCha8Rng) -> Result<Sample> {
    cfg.validate()?;
    let side = sample.side();
    let mut px = sample.pixels()?;

    if cfg.rotate {
        let turns = rng.gen_range(0..4usize);
        if turns > 0 {
            px = rot90_tensor(&px, turns)?;
        }
    }
    if cfg.flip && rng.gen_bool(0.5) {
        px = hflip(&px);
    }
    let c = cfg.crop_side(side)?;
    if c < side {
        let top = rng.gen_range(0..=side - c);
        let left = rng.gen_range(0..=side - c);
        px = crop(&px, top, left, c)?;
        px = resample_area(&px, side, side)?;
    }
    Sample::from_pixels(px, sample.class_id, sample.view)
}

// ── synthetic scenes ─────────────────────────────────────────────────

/// Generator parameters. The same spec always produces a bitwise
/// identical tree.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSceneSpec {
    pub classes: usize,
    pub side: usize,
    pub blob_min: usize,
    pub blob_max: usize,
    pub variants: usize,
    /// Uniform pixel noise amplitude on drone variants; 0 disables.
    pub noise: f64,
    /// Per-channel color gain amplitude on drone variants: each capture
    /// scales channel c by a draw from [1-tint, 1+tint]. Satellite tiles
    /// keep canonical colors, so raw color statistics cannot match the
    /// views; 0 disables.
    pub tint: f64,
    pub seed: u64,
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.side < 8 {
            return Err(Error::Config(format!("side {} too small", self.side)));
        }
        if self.blob_min == 0 || self.blob_min > self.blob_max {
            return Err(Error::Config(format!(
                "blob range {}..={} invalid",
                self.blob_min, self.blob_max
            )));
        }
        if self.variants == 0 {
            return Err(Error::Config("at least one drone variant per class".into()));
        }
        if !(self.noise >= 0.0 && self.noise < 0.5) {
            return Err(Error::Config(format!("noise {} outside [0,0.5)", self.noise)));
        }
        if !(self.tint >= 0.0 && self.tint < 1.0) {
            return Err(Error::Config(format!("tint {} outside [0,1)", self.tint)));
        }
        Ok(())
    }
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            classes: 32,
            side: 64,
            blob_min: 6,
            blob_max: 6,
            variants: 4,
            noise: 0.01,
            tint: 0.0,
            seed: 7,
        }
    }
}

/// Blob colors cycle through a seeded shuffle of this palette with
/// fixed size and strength, so per-class color histograms are nearly
/// identical and only blob layout separates classes.
const PALETTE: [[f64; 3]; 6] = [
    [0.82, 0.20, 0.16],
    [0.16, 0.55, 0.80],
    [0.88, 0.72, 0.12],
    [0.20, 0.65, 0.30],
    [0.55, 0.30, 0.70],
    [0.90, 0.88, 0.84],
];
const GROUND: [f64; 3] = [0.42, 0.40, 0.36];
const CROP_RANGE: (f64, f64) = (0.7, 1.0);

const ROLE_SCENE: u64 = 1;
const ROLE_VARIANT: u64 = 2;

fn scene_rng(spec: &SyntheticSceneSpec, class: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(&[spec.seed, ROLE_SCENE, class as u64]))
}

fn variant_rng(spec: &SyntheticSceneSpec, class: usize, split: Split, variant: usize) -> ChaCha8Rng {
    let s = match split {
        Split::Train => 0u64,
        Split::Test => 1u64,
    };
    ChaCha8Rng::seed_from_u64(derive_seed(&[
        spec.seed,
        ROLE_VARIANT,
        class as u64,
        s,
        variant as u64,
    ]))
}

/// Canonical overhead scene for one class: textured ground plus soft
/// color blobs, already quantized to the 8-bit grid.
pub fn render_scene(spec: &SyntheticSceneSpec, class: usize) -> Result<Tensor<f32>> {
    spec.validate()?;
    let mut rng = scene_rng(spec, class);
    let s = spec.side;
    let mut img = vec![0.0f64; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let jitter: f64 = rng.gen_range(-0.05..0.05);
            for c in 0..3 {
                img[c * s * s + y * s + x] = (GROUND[c] + jitter).clamp(0.0, 1.0);
            }
        }
    }
    let blobs = rng.gen_range(spec.blob_min..=spec.blob_max);
    let mut order: Vec<usize> = (0..PALETTE.len()).collect();
    order.shuffle(&mut rng);
    for b in 0..blobs {
        let cx: f64 = rng.gen_range(0.15..0.85) * s as f64;
        let cy: f64 = rng.gen_range(0.15..0.85) * s as f64;
        let radius: f64 = 0.14 * s as f64;
        let color = PALETTE[order[b % PALETTE.len()]];
        let peak: f64 = 0.85;
        let sigma = radius / 2.0;
        for y in 0..s {
            for x in 0..s {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let a = peak * (-d2 / (2.0 * sigma * sigma)).exp();
                if a < 1e-3 {
                    continue;
                }
                for c in 0..3 {
                    let i = c * s * s + y * s + x;
                    img[i] = img[i] * (1.0 - a) + color[c] * a;
                }
            }
        }
    }
    // quantize as the PNG writer will, so in-memory and on-disk agree
    let vals: Vec<f32> = img
        .into_iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8 as f32 / 255.0)
        .collect();
    Tensor::new(vec![3, s, s], vals)
}

/// The pose and color draws for one drone variant, re-derivable by
/// anyone holding the spec.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DroneParams {
    pub turns: usize,
    pub crop_side: usize,
    pub top: usize,
    pub left: usize,
    pub gain: [f64; 3],
}

pub fn drone_params(
    spec: &SyntheticSceneSpec,
    class: usize,
    split: Split,
    variant: usize,
) -> DroneParams {
    let mut rng = variant_rng(spec, class, split, variant);
    drone_params_from(&mut rng, spec.side, spec.tint)
}

/// One drone-view capture: crop of the scene, rotated, channel-scaled,
/// with optional pixel noise. With tint and noise off this is exactly a
/// rotated scene crop.
pub fn render_drone_variant(
    spec: &SyntheticSceneSpec,
    scene: &Tensor<f32>,
    class: usize,
    split: Split,
    variant: usize,
) -> Result<Tensor<f32>> {
    let p = drone_params(spec, class, split, variant);
    let cropped = crop(scene, p.top, p.left, p.crop_side)?;
    let px = rot90_tensor(&cropped, p.turns)?;
    // noise draws continue the variant stream after the pose draws
    let mut rng = variant_rng(spec, class, split, variant);
    let _ = drone_params_from(&mut rng, spec.side, spec.tint);
    let plane = p.crop_side * p.crop_side;
    let vals: Vec<f32> = px
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let n: f64 = if spec.noise > 0.0 {
                rng.gen_range(-spec.noise..spec.noise)
            } else {
                0.0
            };
            let shifted = (v as f64 * p.gain[i / plane] + n).clamp(0.0, 1.0);
            (shifted * 255.0).round() as u8 as f32 / 255.0
        })
        .collect();
    Tensor::new(px.shape().to_vec(), vals)
}

fn drone_params_from(rng: &mut ChaCha8Rng, side: usize, tint: f64) -> DroneParams {
    let turns = rng.gen_range(0..4usize);
    let frac: f64 = rng.gen_range(CROP_RANGE.0..=CROP_RANGE.1);
    let crop_side = ((frac * side as f64).round() as usize).clamp(1, side);
    let top = rng.gen_range(0..=side - crop_side);
    let left = rng.gen_range(0..=side - crop_side);
    let mut gain = [1.0f64; 3];
    for g in gain.iter_mut() {
        *g = rng.gen_range(1.0 - tint..=1.0 + tint);
    }
    DroneParams {
        turns,
        crop_side,
        top,
        left,
        gain,
    }
}

/// Generate the full two-split tree under `root` and return the train
/// manifest. `root/spec.json` echoes the generating parameters.
pub fn generate_synthetic(spec: &SyntheticSceneSpec, root: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    for split in [Split::Train, Split::Test] {
        for view in [View::Drone, View::Satellite] {
            std::fs::create_dir_all(root.join(split.dir_name()).join(view.dir_name()))?;
        }
    }
    for class in 0..spec.classes {
        let name = format!("{:04}", class);
        let scene = render_scene(spec, class)?;
        for split in [Split::Train, Split::Test] {
            let sat_dir = root
                .join(split.dir_name())
                .join(View::Satellite.dir_name())
                .join(&name);
            std::fs::create_dir_all(&sat_dir)?;
            save_image(&sat_dir.join("sat.png"), &scene)?;

            let drone_dir = root
                .join(split.dir_name())
                .join(View::Drone.dir_name())
                .join(&name);
            std::fs::create_dir_all(&drone_dir)?;
            for v in 0..spec.variants {
                let px = render_drone_variant(spec, &scene, class, split, v)?;
                save_image(&drone_dir.join(format!("d{:02}.png", v)), &px)?;
            }
        }
    }
    let echo = serde_json::to_string_pretty(spec)
        .map_err(|e| Error::Format(format!("spec echo: {}", e)))?;
    std::fs::write(root.join("spec.json"), echo)?;
    scan_dataset(root, Split::Train)
}
