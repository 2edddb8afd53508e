//! Dataset ingestion: PNG loading and resizing, manifests, seeded splits,
//! and a synthetic ellipse-segmentation generator.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::FilterType;
use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Image size as `width × height`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub width: usize,
    pub height: usize,
}

impl Resolution {
    pub const DESK: Self = Self { width: 64, height: 48 };
    pub const PAPER: Self = Self { width: 256, height: 192 };

    pub fn new(width: usize, height: usize) -> Result<Self> {
        let r = Self { width, height };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.width % 16 != 0 || self.height % 16 != 0 {
            return Err(Error::Config(format!("resolution {self} must be a nonzero multiple of 16")));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

impl FromStr for Resolution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (w, h) = s
            .split_once(['x', 'X', '×'])
            .ok_or_else(|| Error::Config(format!("resolution `{s}` is not WxH")))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| Error::Config(format!("resolution `{s}`: {e}")));
        Self::new(parse(w)?, parse(h)?)
    }
}

/// One image with its binary mask. `image` is `1×3×H×W` in `[0, 1]`,
/// `mask` is `1×1×H×W` with values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
}

impl SegSample {
    pub fn resolution(&self) -> Resolution {
        let d = self.mask.dims();
        Resolution { width: d[3], height: d[2] }
    }

    fn from_images(rgb: &RgbImage, mask: &GrayImage) -> Result<Self> {
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut planes = vec![0.0f32; 3 * w * h];
        for (x, y, px) in rgb.enumerate_pixels() {
            let i = y as usize * w + x as usize;
            for c in 0..3 {
                planes[c * w * h + i] = px.0[c] as f32 / 255.0;
            }
        }
        let m = mask.pixels().map(|p| if p.0[0] >= 128 { 1.0 } else { 0.0 }).collect();
        Ok(Self { image: Tensor::new(&[1, 3, h, w], planes)?, mask: Tensor::new(&[1, 1, h, w], m)? })
    }

    fn to_images(&self) -> (RgbImage, GrayImage) {
        let Resolution { width: w, height: h } = self.resolution();
        let d = self.image.data();
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            image::Rgb([q(d[i]), q(d[w * h + i]), q(d[2 * w * h + i])])
        });
        let m = self.mask.data();
        let gray = GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([if m[y as usize * w + x as usize] >= 0.5 { 255 } else { 0 }])
        });
        (rgb, gray)
    }

    /// Writes the image and mask as 8-bit PNGs.
    pub fn save(&self, image_path: &Path, mask_path: &Path) -> Result<()> {
        let (rgb, gray) = self.to_images();
        rgb.save(image_path)?;
        gray.save(mask_path)?;
        Ok(())
    }
}

/// Reads an RGB image and its mask, resizing to `res`: bilinear for the
/// image, nearest for the mask, which is then thresholded at 128.
pub fn load_sample(image_path: &Path, mask_path: &Path, res: Resolution) -> Result<SegSample> {
    res.validate()?;
    let open = |p: &Path| image::open(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())));
    let img = open(image_path)?;
    let mask = open(mask_path)?;
    for (p, im) in [(image_path, &img), (mask_path, &mask)] {
        if im.width() == 0 || im.height() == 0 {
            return Err(Error::Data(format!("{} has zero extent", p.display())));
        }
    }
    let (w, h) = (res.width as u32, res.height as u32);
    let mut rgb = img.to_rgb8();
    if rgb.dimensions() != (w, h) {
        rgb = image::imageops::resize(&rgb, w, h, FilterType::Triangle);
    }
    let mut gray = mask.to_luma8();
    if gray.dimensions() != (w, h) {
        gray = image::imageops::resize(&gray, w, h, FilterType::Nearest);
    }
    SegSample::from_images(&rgb, &gray)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    #[serde(default)]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub resolution: Resolution,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    /// Loads `manifest.json` from `dir` if present, otherwise pairs files in
    /// `images/` and `masks/` by stem. Relative paths resolve against `dir`.
    pub fn open(dir: &Path, resolution: Resolution) -> Result<Self> {
        let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into());
        let manifest = dir.join(MANIFEST_FILE);
        let mut entries: Vec<ManifestEntry> = if manifest.exists() {
            serde_json::from_str(&fs::read_to_string(&manifest)?)?
        } else {
            scan_pairs(dir)?
        };
        for e in &mut entries {
            if e.image.is_relative() {
                e.image = dir.join(&e.image);
            }
            if e.mask.is_relative() {
                e.mask = dir.join(&e.mask);
            }
        }
        Ok(Self { name, resolution, entries })
    }

    /// Writes the entries as a JSON array, paths relative to `dir` where possible.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let rel = |p: &Path| p.strip_prefix(dir).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf());
        let entries: Vec<ManifestEntry> = self
            .entries
            .iter()
            .map(|e| ManifestEntry { image: rel(&e.image), mask: rel(&e.mask), split: e.split })
            .collect();
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&entries)?)?;
        Ok(())
    }

    pub fn subset(&self, split: Split) -> Self {
        Self {
            name: self.name.clone(),
            resolution: self.resolution,
            entries: self.entries.iter().filter(|e| e.split == Some(split)).cloned().collect(),
        }
    }

    pub fn load(&self) -> Result<Vec<SegSample>> {
        self.entries.iter().map(|e| load_sample(&e.image, &e.mask, self.resolution)).collect()
    }
}

fn scan_pairs(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let (images, masks) = (dir.join("images"), dir.join("masks"));
    if !images.is_dir() || !masks.is_dir() {
        return Err(Error::Data(format!("{} has no manifest and no images/ + masks/ folders", dir.display())));
    }
    let mut entries = Vec::new();
    let mut files: Vec<PathBuf> = fs::read_dir(&images)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    files.sort();
    for img in files {
        let Some(stem) = img.file_stem() else { continue };
        let mask = fs::read_dir(&masks)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .find(|m| m.file_stem() == Some(stem))
            .ok_or_else(|| Error::Data(format!("no mask for {}", img.display())))?;
        entries.push(ManifestEntry { image: img, mask, split: None });
    }
    if entries.is_empty() {
        return Err(Error::Data(format!("no images under {}", images.display())));
    }
    Ok(entries)
}

/// Ratios of the train, validation and test partitions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.7, val: 0.2, test: 0.1 }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|&v| !(v > 0.0)) || ((r.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios must be positive and sum to 1, got {r:?}")));
        }
        Ok(())
    }
}

/// Seeded shuffle, then `floor(n·val)` validation and `floor(n·test)` test
/// items; the remainder goes to training. Returns per-item assignments in
/// input order.
pub fn assign_splits(n: usize, ratios: SplitRatios, seed: u64) -> Result<Vec<Split>> {
    ratios.validate()?;
    if n == 0 {
        return Err(Error::EmptyInput("cannot split an empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let count = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
    let (n_val, n_test) = (count(ratios.val), count(ratios.test));
    let mut out = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_val {
            out[i] = Split::Val;
        } else if rank < n_val + n_test {
            out[i] = Split::Test;
        }
    }
    Ok(out)
}

/// Assigns every manifest entry a split.
pub fn split(manifest: &DatasetManifest, ratios: SplitRatios, seed: u64) -> Result<DatasetManifest> {
    let splits = assign_splits(manifest.entries.len(), ratios, seed)?;
    let mut out = manifest.clone();
    for (e, s) in out.entries.iter_mut().zip(splits) {
        e.split = Some(s);
    }
    Ok(out)
}

/// Axis-aligned ellipse in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
}

impl Ellipse {
    /// Whether the centre of pixel `(x, y)` lies inside.
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let dx = (x as f64 + 0.5 - self.cx) / self.a;
        let dy = (y as f64 + 0.5 - self.cy) / self.b;
        dx * dx + dy * dy <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub sample: SegSample,
    pub ellipses: Vec<Ellipse>,
}

/// Probability that a synthetic sample has no foreground.
pub const SYNTH_EMPTY_RATE: f64 = 0.1;

/// Bilinear interpolation of a coarse random grid, for smooth backgrounds.
fn smooth_field<R: Rng>(rng: &mut R, w: usize, h: usize, cells: usize) -> Vec<f64> {
    let (gw, gh) = (cells + 1, cells * h / w + 2);
    let grid: Vec<f64> = (0..gw * gh).map(|_| rng.random::<f64>()).collect();
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let fy = y as f64 / h as f64 * (gh - 1) as f64;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = x as f64 / w as f64 * (gw - 1) as f64;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let at = |i: usize, j: usize| grid[j.min(gh - 1) * gw + i.min(gw - 1)];
            let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1, y0) * tx;
            let bot = at(x0, y0 + 1) * (1.0 - tx) + at(x0 + 1, y0 + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

fn synth_one<R: Rng>(rng: &mut R, res: Resolution) -> Result<SynthSample> {
    let (w, h) = (res.width, res.height);
    let (wf, hf) = (w as f64, h as f64);
    let mut ellipses = Vec::new();
    if !rng.random_bool(SYNTH_EMPTY_RATE) {
        for _ in 0..rng.random_range(1..=3) {
            let a = rng.random_range(0.08..=0.22) * wf;
            let b = rng.random_range(0.08..=0.22) * hf;
            let cx = rng.random_range(a..=wf - a);
            let cy = rng.random_range(b..=hf - b);
            ellipses.push(Ellipse { cx, cy, a, b });
        }
    }
    // mucosa-like background: smooth reddish tissue with mild noise
    let shade = smooth_field(rng, w, h, 4);
    let tone = [rng.random_range(0.45..0.65), rng.random_range(0.25..0.4), rng.random_range(0.2..0.35)];
    // foreground: brighter, with a per-object stripe texture
    let lift = [rng.random_range(0.2..0.3), rng.random_range(0.1..0.2), rng.random_range(0.0..0.1)];
    let freq = rng.random_range(0.3..0.8);
    let mut planes = vec![0.0f32; 3 * w * h];
    let mut mask = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let inside = ellipses.iter().any(|e| e.contains(x, y));
            mask[i] = if inside { 1.0 } else { 0.0 };
            let texture = if inside { 0.05 * ((x + y) as f64 * freq).sin() } else { 0.0 };
            for c in 0..3 {
                let mut v = tone[c] + 0.25 * (shade[i] - 0.5) + rng.random_range(-0.03..0.03) + texture;
                if inside {
                    v += lift[c];
                }
                // quantize so PNG round trips are exact
                planes[c * w * h + i] = ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32;
            }
        }
    }
    Ok(SynthSample {
        sample: SegSample { image: Tensor::new(&[1, 3, h, w], planes)?, mask: Tensor::new(&[1, 1, h, w], mask)? },
        ellipses,
    })
}

/// `n` synthetic samples, bit-identical for a given seed.
pub fn synth_samples(n: usize, res: Resolution, seed: u64) -> Result<Vec<SynthSample>> {
    res.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| synth_one(&mut rng, res)).collect()
}

/// Writes `n` synthetic samples to `dir/images`, `dir/masks` and a split
/// manifest (7:2:1, same seed).
pub fn synth_generate(n: usize, res: Resolution, seed: u64, dir: &Path) -> Result<DatasetManifest> {
    let samples = synth_samples(n, res, seed)?;
    let (images, masks) = (dir.join("images"), dir.join("masks"));
    fs::create_dir_all(&images)?;
    fs::create_dir_all(&masks)?;
    let splits = assign_splits(n, SplitRatios::default(), seed)?;
    let mut entries = Vec::with_capacity(n);
    for (i, (s, split)) in samples.iter().zip(splits).enumerate() {
        let (ip, mp) = (images.join(format!("{i:05}.png")), masks.join(format!("{i:05}.png")));
        s.sample.save(&ip, &mp)?;
        entries.push(ManifestEntry { image: ip, mask: mp, split: Some(split) });
    }
    let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "synth".into());
    let manifest = DatasetManifest { name, resolution: res, entries };
    manifest.write(dir)?;
    Ok(manifest)
}

/// Stacked `N×3×H×W` images and `N×1×H×W` masks.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub masks: Tensor<T>,
}

pub fn make_batch<T: Real>(samples: &[&SegSample]) -> Result<Batch<T>> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    let cast = |f: fn(&SegSample) -> &Tensor<f32>| -> Result<Tensor<T>> {
        let items: Vec<Tensor<T>> = samples.iter().map(|s| f(s).cast::<T>()).collect();
        Tensor::stack_batch(&items)
    };
    Ok(Batch { images: cast(|s| &s.image)?, masks: cast(|s| &s.mask)? })
}
