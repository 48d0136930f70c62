//! Synthetic camera dataset and splice benchmark, in memory and on disk.
//!
//! Disk layout:
//! ```text
//! <root>/manifest.json
//! <root>/<split>/<camera_id>/<image_id>.png
//! <root>/splices/<case_id>/{image.png, mask.png, meta.json}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::synth::{
    make_camera_bank, make_splice, mix_seed, render, BankConfig, CameraModelSpec, RegionShape, SpliceCase,
    SpliceConfig, SyntheticImage,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub num_models: usize,
    pub images_per_model: usize,
    pub image_size: usize,
    pub seed: u64,
    pub bank: BankConfig,
    /// Train / validation fractions; the test split takes the rest.
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_models: 4,
            images_per_model: 60,
            image_size: 64,
            seed: 7,
            bank: BankConfig::default(),
            train_fraction: 0.7,
            val_fraction: 0.2,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_models < 2 {
            return Err(Error::Config(format!("num_models must be >= 2, got {}", self.num_models)));
        }
        if self.images_per_model < 3 {
            return Err(Error::Config("images_per_model must be >= 3 to fill every split".into()));
        }
        if self.image_size == 0 {
            return Err(Error::Config("image_size must be positive".into()));
        }
        let (t, v) = (self.train_fraction, self.val_fraction);
        if !(t > 0.0 && v > 0.0 && t + v < 1.0) {
            return Err(Error::Config("split fractions must be positive and leave room for test".into()));
        }
        Ok(())
    }
}

/// One entry of the dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub split: Split,
    pub camera_id: usize,
    pub image_id: String,
    pub scene_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub bank: Vec<CameraModelSpec>,
    pub images: Vec<ImageRecord>,
}

/// A camera-labelled image set split by image.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<SyntheticImage>,
    pub val: Vec<SyntheticImage>,
    pub test: Vec<SyntheticImage>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SyntheticImage] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.bank.len()
    }
}

/// Split sizes per camera: `round(n * train)`, `round(n * val)`, rest (each at least one).
fn split_counts(n: usize, train: f64, val: f64) -> (usize, usize, usize) {
    let tr = ((n as f64 * train).round() as usize).clamp(1, n - 2);
    let va = ((n as f64 * val).round() as usize).clamp(1, n - tr - 1);
    (tr, va, n - tr - va)
}

/// Plans the manifest (bank, seeds, splits) without rendering pixels.
pub fn plan_dataset(config: &DatasetConfig) -> Result<Manifest> {
    config.validate()?;
    let bank = make_camera_bank(config.num_models, config.seed, &config.bank)?;
    let mut images = Vec::new();
    let (tr, va, _) = split_counts(config.images_per_model, config.train_fraction, config.val_fraction);
    for spec in &bank {
        let mut order: Vec<usize> = (0..config.images_per_model).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0x5917 + spec.id as u64)));
        for (rank, &idx) in order.iter().enumerate() {
            let split = if rank < tr {
                Split::Train
            } else if rank < tr + va {
                Split::Val
            } else {
                Split::Test
            };
            images.push(ImageRecord {
                split,
                camera_id: spec.id,
                image_id: format!("{:05}", idx),
                scene_seed: mix_seed(config.seed, (spec.id as u64) << 32 | idx as u64),
            });
        }
    }
    images.sort_by(|a, b| (a.split, a.camera_id, &a.image_id).cmp(&(b.split, b.camera_id, &b.image_id)));
    Ok(Manifest {
        config: config.clone(),
        bank,
        images,
    })
}

/// Renders every image of the planned dataset.
pub fn synthesize(config: &DatasetConfig) -> Result<Dataset> {
    let manifest = plan_dataset(config)?;
    let size = config.image_size;
    let mut ds = Dataset {
        manifest,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for rec in &ds.manifest.images {
        let img = render(rec.scene_seed, &ds.manifest.bank[rec.camera_id], size, size);
        match rec.split {
            Split::Train => ds.train.push(img),
            Split::Val => ds.val.push(img),
            Split::Test => ds.test.push(img),
        }
    }
    Ok(ds)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_rgb_png(path: &Path, pixels: &Array3<f64>) -> Result<()> {
    let (h, w, c) = pixels.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([to_u8(pixels[[y, x, 0]]), to_u8(pixels[[y, x, 1]]), to_u8(pixels[[y, x, 2]])])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_rgb_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

/// Writes an 8-bit grayscale image of `values` in `[0, 1]`.
pub fn save_gray_png(path: &Path, values: &Array2<f64>) -> Result<()> {
    let (h, w) = values.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([to_u8(values[[y as usize, x as usize]])]));
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_gray_png(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] as f64 / 255.0
    }))
}

pub fn save_mask_png(path: &Path, mask: &Array2<bool>) -> Result<()> {
    save_gray_png(path, &mask.mapv(|m| if m { 1.0 } else { 0.0 }))
}

pub fn load_mask_png(path: &Path) -> Result<Array2<bool>> {
    Ok(load_gray_png(path)?.mapv(|v| v >= 0.5))
}

fn image_path(root: &Path, rec: &ImageRecord) -> PathBuf {
    root.join(rec.split.as_str())
        .join(rec.camera_id.to_string())
        .join(format!("{}.png", rec.image_id))
}

/// Writes all images plus `manifest.json` under `root`.
pub fn write_dataset(root: &Path, ds: &Dataset) -> Result<()> {
    let mut counters = [0usize; 3];
    for rec in &ds.manifest.images {
        let si = Split::ALL.iter().position(|s| *s == rec.split).expect("known split");
        let img = &ds.split(rec.split)[counters[si]];
        counters[si] += 1;
        let path = image_path(root, rec);
        fs::create_dir_all(path.parent().expect("has parent")).map_err(io_err(&path))?;
        save_rgb_png(&path, &img.pixels)?;
    }
    let mpath = root.join("manifest.json");
    let json = serde_json::to_string_pretty(&ds.manifest)?;
    fs::write(&mpath, json).map_err(io_err(&mpath))
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads a dataset from disk; labels come from the directory structure.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    let mut ds = Dataset {
        manifest: manifest.clone(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for split in Split::ALL {
        let dir = root.join(split.as_str());
        let mut cams: Vec<(usize, PathBuf)> = Vec::new();
        if dir.is_dir() {
            for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
                let entry = entry.map_err(io_err(&dir))?;
                if let Some(id) = entry.file_name().to_str().and_then(|s| s.parse::<usize>().ok()) {
                    cams.push((id, entry.path()));
                }
            }
        }
        cams.sort();
        for (camera_id, cam_dir) in cams {
            let mut files: Vec<PathBuf> = fs::read_dir(&cam_dir)
                .map_err(io_err(&cam_dir))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "png"))
                .collect();
            files.sort();
            for f in files {
                let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                let scene_seed = manifest
                    .images
                    .iter()
                    .find(|r| r.split == split && r.camera_id == camera_id && r.image_id == stem)
                    .map(|r| r.scene_seed)
                    .unwrap_or(0);
                let img = SyntheticImage {
                    pixels: load_rgb_png(&f)?,
                    camera_id,
                    scene_seed,
                };
                match split {
                    Split::Train => ds.train.push(img),
                    Split::Val => ds.val.push(img),
                    Split::Test => ds.test.push(img),
                }
            }
        }
    }
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpliceBenchConfig {
    pub cases: usize,
    pub image_size: usize,
    pub seed: u64,
    pub splice: SpliceConfig,
}

impl Default for SpliceBenchConfig {
    fn default() -> Self {
        Self {
            cases: 20,
            image_size: 96,
            seed: 1234,
            splice: SpliceConfig::default(),
        }
    }
}

/// Metadata stored next to each splice case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpliceMeta {
    pub case_id: String,
    pub host_camera: usize,
    pub donor_camera: usize,
    pub host_scene_seed: u64,
    pub donor_scene_seed: u64,
    pub region_seed: u64,
    pub shape: RegionShape,
    pub spliced_fraction: f64,
}

/// Fresh scenes (never in the camera dataset) composited across camera pairs.
pub fn make_splice_benchmark(bank: &[CameraModelSpec], config: &SpliceBenchConfig) -> Result<Vec<(SpliceMeta, SpliceCase)>> {
    if bank.len() < 2 {
        return Err(Error::Config("splicing needs at least two camera models".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0x5B11CE));
    let size = config.image_size;
    let mut out = Vec::with_capacity(config.cases);
    for i in 0..config.cases {
        let host_cam = rng.random_range(0..bank.len());
        let mut donor_cam = rng.random_range(0..bank.len() - 1);
        if donor_cam >= host_cam {
            donor_cam += 1;
        }
        let host_seed = mix_seed(config.seed, 0xA000_0000 + 2 * i as u64);
        let donor_seed = mix_seed(config.seed, 0xA000_0001 + 2 * i as u64);
        let region_seed = mix_seed(config.seed, 0xB000_0000 + i as u64);
        let host = render(host_seed, &bank[host_cam], size, size);
        let donor = render(donor_seed, &bank[donor_cam], size, size);
        let case = make_splice(&host, &donor, region_seed, &config.splice, None)?;
        let meta = SpliceMeta {
            case_id: format!("case{:04}", i),
            host_camera: host_cam,
            donor_camera: donor_cam,
            host_scene_seed: host_seed,
            donor_scene_seed: donor_seed,
            region_seed,
            shape: case.shape,
            spliced_fraction: case.spliced_fraction(),
        };
        out.push((meta, case));
    }
    Ok(out)
}

pub fn write_splices(root: &Path, cases: &[(SpliceMeta, SpliceCase)]) -> Result<()> {
    for (meta, case) in cases {
        let dir = root.join("splices").join(&meta.case_id);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        save_rgb_png(&dir.join("image.png"), &case.image)?;
        save_mask_png(&dir.join("mask.png"), &case.mask)?;
        let path = dir.join("meta.json");
        fs::write(&path, serde_json::to_string_pretty(meta)?).map_err(io_err(&path))?;
    }
    Ok(())
}
