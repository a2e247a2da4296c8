//! Dataset ingestion and the synthetic complexity suite.
//!
//! Every synthetic image draws from its own generator seeded by
//! `(seed, family, split, index)`, so streams are reproducible and the
//! train/validation splits never share a generator state.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DataConfig, DataSource};
use crate::error::{KarlError, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Constant,
    Gradient,
    Checkerboard,
    Noise,
    Mandelbrot,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Constant,
        Family::Gradient,
        Family::Checkerboard,
        Family::Noise,
        Family::Mandelbrot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Constant => "constant",
            Family::Gradient => "gradient",
            Family::Checkerboard => "checkerboard",
            Family::Noise => "noise",
            Family::Mandelbrot => "mandelbrot",
        }
    }

    /// Recovers the family from a synthetic image id.
    pub fn of_id(id: &str) -> Option<Family> {
        id.split('-').next().and_then(|s| s.parse().ok())
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = KarlError;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| KarlError::Data(format!("unknown synthetic kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub split: Split,
    pub resolution: usize,
    pub channels: usize,
    pub seed: u64,
    /// Images per family (synthetic) or maximum images, `0` = all (folder).
    pub size: usize,
}

impl DatasetSpec {
    pub fn synthetic(split: Split, resolution: usize, channels: usize, size: usize, seed: u64) -> Self {
        Self {
            source: DataSource::Synthetic,
            split,
            resolution,
            channels,
            seed,
            size,
        }
    }
}

fn image_rng(seed: u64, family: Family, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((family as u64) << 8) | split.tag());
    rng.set_word_pos((index as u128) << 20);
    ChaCha8Rng::seed_from_u64(rng.random())
}

fn random_color<R: Rng>(rng: &mut R, channels: usize) -> Vec<f64> {
    (0..channels).map(|_| rng.random::<f64>()).collect()
}

/// Renders `spec.size` images of one family.
pub fn make_synthetic(family: Family, spec: &DatasetSpec, params: &DataConfig) -> Vec<Image> {
    (0..spec.size)
        .map(|i| {
            let mut rng = image_rng(spec.seed, family, spec.split, i);
            let id = format!("{}-{}-{i:04}", family.name(), spec.split.name());
            let pixels = render(family, spec.resolution, spec.channels, params, &mut rng);
            Image { id, pixels }
        })
        .collect()
}

/// All requested families, concatenated in family order.
pub fn synthetic_suite(families: &[Family], spec: &DatasetSpec, params: &DataConfig) -> Vec<Image> {
    families.iter().flat_map(|&f| make_synthetic(f, spec, params)).collect()
}

fn render<R: Rng>(family: Family, n: usize, channels: usize, p: &DataConfig, rng: &mut R) -> Array3<f64> {
    match family {
        Family::Constant => {
            let c = random_color(rng, channels);
            Array3::from_shape_fn((n, n, channels), |(_, _, ch)| c[ch])
        }
        Family::Gradient => {
            let c0 = random_color(rng, channels);
            let c1 = random_color(rng, channels);
            let angle = rng.random::<f64>() * std::f64::consts::TAU;
            let (dx, dy) = (angle.cos(), angle.sin());
            // projection onto the direction, rescaled to [0, 1] over the image
            let span = dx.abs() + dy.abs();
            Array3::from_shape_fn((n, n, channels), |(y, x, ch)| {
                let u = (x as f64 + 0.5) / n as f64 - 0.5;
                let v = (y as f64 + 0.5) / n as f64 - 0.5;
                let t = ((u * dx + v * dy) / span + 0.5).clamp(0.0, 1.0);
                c0[ch] + (c1[ch] - c0[ch]) * t
            })
        }
        Family::Checkerboard => {
            let cells = if p.checker_cells.is_empty() {
                vec![4]
            } else {
                p.checker_cells.clone()
            };
            let cell = cells[rng.random_range(0..cells.len())].max(1);
            let c0 = random_color(rng, channels);
            let mut c1 = random_color(rng, channels);
            while c0.iter().zip(&c1).all(|(a, b)| (a - b).abs() < 0.25) {
                c1 = random_color(rng, channels);
            }
            Array3::from_shape_fn((n, n, channels), |(y, x, ch)| {
                if (x / cell + y / cell) % 2 == 0 {
                    c0[ch]
                } else {
                    c1[ch]
                }
            })
        }
        Family::Noise => {
            let (lo, hi) = p.noise_amplitude;
            let amp = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            Array3::from_shape_simple_fn((n, n, channels), || {
                (0.5 + amp * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0)
            })
        }
        Family::Mandelbrot => {
            let j = p.mandelbrot_jitter;
            let span = p.mandelbrot_span * (1.0 - 0.5 * j * rng.random::<f64>());
            let cx = p.mandelbrot_center.0 + j * span * (rng.random::<f64>() - 0.5);
            let cy = p.mandelbrot_center.1 + j * span * (rng.random::<f64>() - 0.5);
            let phase = rng.random::<f64>();
            let max_iter = p.mandelbrot_max_iter.max(1);
            let mut out = Array3::zeros((n, n, channels));
            for y in 0..n {
                for x in 0..n {
                    let re = cx + span * ((x as f64 + 0.5) / n as f64 - 0.5);
                    let im = cy + span * ((y as f64 + 0.5) / n as f64 - 0.5);
                    let t = escape_time(re, im, max_iter);
                    for ch in 0..channels {
                        out[[y, x, ch]] = match t {
                            None => 0.0,
                            Some(t) => {
                                let a = std::f64::consts::TAU * (t + phase + ch as f64 / 3.0);
                                0.5 + 0.5 * a.cos()
                            }
                        };
                    }
                }
            }
            out
        }
    }
}

/// Normalized smooth escape time, `None` inside the set.
fn escape_time(re: f64, im: f64, max_iter: usize) -> Option<f64> {
    let (mut zr, mut zi) = (0.0f64, 0.0f64);
    for i in 0..max_iter {
        let zr2 = zr * zr;
        let zi2 = zi * zi;
        if zr2 + zi2 > 256.0 {
            let nu = ((zr2 + zi2).ln() / 2.0 / std::f64::consts::LN_2).ln() / std::f64::consts::LN_2;
            return Some(((i as f64 + 1.0 - nu) / max_iter as f64).max(0.0));
        }
        zi = 2.0 * zr * zi + im;
        zr = zr2 - zi2 + re;
    }
    None
}

/// Files under `path` (non-recursive), center-cropped, resized and scaled to
/// `[0, 1]`, ordered by file name. Unreadable files are skipped with a
/// warning. Files hash into train/val by `(seed, file name)`.
pub fn load_folder(path: &Path, spec: &DatasetSpec, val_fraction: f64) -> Result<Vec<Image>> {
    let entries = std::fs::read_dir(path).map_err(|e| KarlError::io(path, e))?;
    let mut files: Vec<_> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(KarlError::Data(format!("{}: folder is empty", path.display())));
    }
    let mut out = Vec::new();
    for file in files {
        let name = file.file_name().unwrap_or_default().to_string_lossy().into_owned();
        if split_of(&name, spec.seed, val_fraction) != spec.split {
            continue;
        }
        let decoded = match image::open(&file) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", file.display());
                continue;
            }
        };
        out.push(to_image(&name, &decoded, spec.resolution, spec.channels)?);
        if spec.size > 0 && out.len() == spec.size {
            break;
        }
    }
    if out.is_empty() {
        return Err(KarlError::Data(format!(
            "{}: no decodable images in the {} split",
            path.display(),
            spec.split.name()
        )));
    }
    Ok(out)
}

fn split_of(name: &str, seed: u64, val_fraction: f64) -> Split {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let bytes = h.finalize();
    let u = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as f64 / u64::MAX as f64;
    if u < val_fraction {
        Split::Val
    } else {
        Split::Train
    }
}

fn to_image(id: &str, img: &image::DynamicImage, resolution: usize, channels: usize) -> Result<Image> {
    let (w, h) = (img.width(), img.height());
    let side = w.min(h);
    let cropped = img.crop_imm((w - side) / 2, (h - side) / 2, side, side);
    let r = resolution as u32;
    let resized = cropped.resize_exact(r, r, image::imageops::FilterType::Triangle);
    let pixels = match channels {
        1 => {
            let luma = resized.to_luma8();
            Array3::from_shape_fn((resolution, resolution, 1), |(y, x, _)| {
                luma.get_pixel(x as u32, y as u32)[0] as f64 / 255.0
            })
        }
        3 => {
            let rgb = resized.to_rgb8();
            Array3::from_shape_fn((resolution, resolution, 3), |(y, x, c)| {
                rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
            })
        }
        other => return Err(KarlError::Config(format!("unsupported channel count {other}"))),
    };
    Ok(Image {
        id: id.to_string(),
        pixels,
    })
}

/// Loads the split described by the data section of a run config.
pub fn load_split(cfg: &DataConfig, resolution: usize, channels: usize, split: Split) -> Result<Vec<Image>> {
    match cfg.source {
        DataSource::Synthetic => {
            let families: Vec<Family> = cfg.families.iter().map(|f| f.parse()).collect::<Result<_>>()?;
            let size = match split {
                Split::Train => cfg.train_per_family,
                Split::Val => cfg.val_per_family,
            };
            let spec = DatasetSpec::synthetic(split, resolution, channels, size, cfg.data_seed);
            let images = synthetic_suite(&families, &spec, cfg);
            if images.is_empty() {
                return Err(KarlError::Data("synthetic dataset is empty".into()));
            }
            Ok(images)
        }
        DataSource::Folder => {
            let path = cfg
                .dataset_path
                .as_ref()
                .ok_or_else(|| KarlError::Config("source = \"folder\" needs dataset_path".into()))?;
            let spec = DatasetSpec {
                source: DataSource::Folder,
                split,
                resolution,
                channels,
                seed: cfg.data_seed,
                size: 0,
            };
            load_folder(path, &spec, cfg.val_fraction)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn spec(split: Split, size: usize) -> DatasetSpec {
        DatasetSpec::synthetic(split, 32, 3, size, 11)
    }

    #[test]
    fn constant_images_have_zero_variance() {
        for img in make_synthetic(Family::Constant, &spec(Split::Train, 5), &Default::default()) {
            for ch in 0..3 {
                let first = img.pixels[[0, 0, ch]];
                assert!(img.pixels.slice(ndarray::s![.., .., ch]).iter().all(|&v| v == first));
            }
        }
    }

    #[test]
    fn checkerboards_have_exactly_two_colors() {
        for img in make_synthetic(Family::Checkerboard, &spec(Split::Train, 10), &Default::default()) {
            let colors: HashSet<Vec<u64>> = img
                .pixels
                .lanes(ndarray::Axis(2))
                .into_iter()
                .map(|l| l.iter().map(|v| v.to_bits()).collect())
                .collect();
            assert_eq!(colors.len(), 2, "{}", img.id);
        }
    }

    #[test]
    fn streams_are_reproducible_and_splits_differ() {
        let cfg = DataConfig::default();
        for family in Family::ALL {
            let a = make_synthetic(family, &spec(Split::Train, 3), &cfg);
            let b = make_synthetic(family, &spec(Split::Train, 3), &cfg);
            assert_eq!(a, b);
            let v = make_synthetic(family, &spec(Split::Val, 3), &cfg);
            for (x, y) in a.iter().zip(&v) {
                assert_ne!(x.id, y.id);
                if family != Family::Mandelbrot || cfg.mandelbrot_jitter > 0.0 {
                    assert_ne!(x.pixels, y.pixels, "{family}");
                }
            }
        }
    }

    #[test]
    fn all_families_stay_in_unit_range() {
        let cfg = DataConfig::default();
        for img in synthetic_suite(&Family::ALL, &spec(Split::Val, 4), &cfg) {
            assert!(img.pixels.iter().all(|v| (0.0..=1.0).contains(v)), "{}", img.id);
            assert_eq!(Family::of_id(&img.id).map(|f| f.name()), img.id.split('-').next());
        }
    }

    #[test]
    fn families_are_distinguishable_by_simple_statistics() {
        let cfg = DataConfig::default();
        let variance = |img: &Image| {
            let m = img.pixels.mean().unwrap();
            img.pixels.mapv(|v| (v - m).powi(2)).mean().unwrap()
        };
        let unique = |img: &Image| img.pixels.iter().map(|v| v.to_bits()).collect::<HashSet<_>>().len();
        let s = spec(Split::Val, 1);
        let constant = &make_synthetic(Family::Constant, &s, &cfg)[0];
        let checker = &make_synthetic(Family::Checkerboard, &s, &cfg)[0];
        let noise = &make_synthetic(Family::Noise, &s, &cfg)[0];
        let corner = constant.pixels.slice(ndarray::s![0, 0, ..]).to_owned();
        assert!(constant
            .pixels
            .outer_iter()
            .all(|row| row.outer_iter().all(|px| px == corner)));
        assert!(variance(noise) > variance(checker) / 10.0);
        assert!(unique(checker) <= 6);
        assert!(unique(noise) > 3000);
    }

    #[test]
    fn unknown_kind_is_an_error() {
        assert!("plasma".parse::<Family>().is_err());
        assert_eq!("noise".parse::<Family>().unwrap(), Family::Noise);
    }

    #[test]
    fn folder_loading_splits_and_scales() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..20u8 {
            let img = image::RgbImage::from_fn(40, 30, |x, y| image::Rgb([x as u8 * 6, y as u8 * 8, i * 10]));
            img.save(dir.path().join(format!("img{i:02}.png"))).unwrap();
        }
        std::fs::write(dir.path().join("broken.png"), b"not an image").unwrap();
        let mk = |split| DatasetSpec {
            source: DataSource::Folder,
            split,
            resolution: 16,
            channels: 3,
            seed: 5,
            size: 0,
        };
        let train = load_folder(dir.path(), &mk(Split::Train), 0.3).unwrap();
        let val = load_folder(dir.path(), &mk(Split::Val), 0.3).unwrap();
        let train_ids: HashSet<_> = train.iter().map(|i| i.id.clone()).collect();
        assert!(val.iter().all(|i| !train_ids.contains(&i.id)));
        assert_eq!(train.len() + val.len(), 20);
        assert!(train.iter().all(|i| i.shape() == (16, 16, 3)));
        assert!(train.iter().all(|i| i.pixels.iter().all(|v| (0.0..=1.0).contains(v))));
        assert_eq!(train, load_folder(dir.path(), &mk(Split::Train), 0.3).unwrap());
    }

    #[test]
    fn empty_folder_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            source: DataSource::Folder,
            split: Split::Train,
            resolution: 8,
            channels: 1,
            seed: 0,
            size: 0,
        };
        assert!(matches!(load_folder(dir.path(), &spec, 0.1), Err(KarlError::Data(_))));
    }
}
