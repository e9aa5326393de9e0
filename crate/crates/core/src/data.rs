//! Samples, the synthetic lesion generator, dataset loading, augmentation and PNG I/O.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// 8-bit mask values at or above this are foreground.
pub const MASK_THRESHOLD: u8 = 128;

/// One image with its ground-truth mask. The image is `3 x H x W` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Array3<f64>,
    pub mask: BinaryMask,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Array3<f64>, mask: BinaryMask) -> Result<Self> {
        let (ch, h, w) = image.dim();
        if ch != 3 || (h, w) != mask.dims() {
            return Err(Error::shape(format!(
                "image {:?} does not match mask {:?}",
                image.dim(),
                mask.dims()
            )));
        }
        Ok(Self {
            id: id.into(),
            image,
            mask,
        })
    }
}

/// Synthetic lesion generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub size: usize,
    /// Number of Fourier harmonics perturbing the lesion outline.
    pub harmonics: usize,
    /// Range of the mean lesion radius as a fraction of `size`.
    pub radius_range: (f64, f64),
    /// Gaussian blur of the lesion edge in pixels (0 = sharp).
    pub blur_sigma: f64,
    /// Darkening of the lesion relative to the skin, in `(0, 1]`.
    pub contrast: f64,
    pub hair_strokes: usize,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            size: 64,
            harmonics: 3,
            radius_range: (0.15, 0.30),
            blur_sigma: 1.0,
            contrast: 0.6,
            hair_strokes: 0,
            seed: 0,
        }
    }
}

/// Skin level of the lesion channel (channel 0) before texture.
pub const LESION_CHANNEL_BACKGROUND: f64 = 0.85;

const TEXTURE_AMPLITUDE: f64 = 0.03;

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(32) {
            return Err(Error::Dimension {
                dim: self.size,
                divisor: 32,
            });
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return Err(Error::InvalidParam(format!(
                "contrast {} outside (0, 1]",
                self.contrast
            )));
        }
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "blur sigma {} must be >= 0",
                self.blur_sigma
            )));
        }
        let (lo, hi) = self.radius_range;
        if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
            return Err(Error::InvalidParam(format!(
                "radius range ({lo}, {hi}) outside (0, 0.5]"
            )));
        }
        Ok(())
    }

    /// Lesion-channel value halfway between skin and fully dark lesion.
    pub fn lesion_channel_midpoint(&self) -> f64 {
        LESION_CHANNEL_BACKGROUND - self.contrast / 2.0
    }
}

fn gaussian_blur(values: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma == 0.0 {
        return values.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let (h, w) = values.dim();
    let pass = |src: &Array2<f64>, horizontal: bool| {
        Array2::from_shape_fn((h, w), |(r, c)| {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let d = i as isize - radius;
                let (rr, cc) = if horizontal {
                    (r as isize, (c as isize + d).clamp(0, w as isize - 1))
                } else {
                    ((r as isize + d).clamp(0, h as isize - 1), c as isize)
                };
                acc += k * src[[rr as usize, cc as usize]];
            }
            acc / norm
        })
    };
    pass(&pass(values, true), false)
}

/// Generates one lesion: a filled outline from random Fourier descriptors on a
/// textured skin background, darkened inside the lesion and optionally crossed by
/// dark hair strokes. Deterministic per seed.
pub fn synth_lesion(params: &SynthParams) -> Result<Sample> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n = params.size as f64;

    let radius = rng.random_range(params.radius_range.0..=params.radius_range.1) * n;
    let center = (rng.random_range(0.35..0.65) * n, rng.random_range(0.35..0.65) * n);
    let mut harmonics: Vec<(f64, f64)> = (1..=params.harmonics)
        .map(|j| (rng.random_range(0.0..0.3 / j as f64), rng.random_range(0.0..2.0 * PI)))
        .collect();
    let total: f64 = harmonics.iter().map(|h| h.0).sum();
    if total > 0.6 {
        for h in &mut harmonics {
            h.0 *= 0.6 / total;
        }
    }
    let outline = |theta: f64| {
        radius
            * (1.0
                + harmonics
                    .iter()
                    .enumerate()
                    .map(|(j, &(a, phi))| a * ((j + 1) as f64 * theta + phi).cos())
                    .sum::<f64>())
    };
    let mask = BinaryMask::from_fn(params.size, params.size, |r, c| {
        let (dy, dx) = (r as f64 + 0.5 - center.0, c as f64 + 0.5 - center.1);
        (dy * dy + dx * dx).sqrt() <= outline(dy.atan2(dx))
    });

    let background = [
        LESION_CHANNEL_BACKGROUND,
        rng.random_range(0.55..0.75),
        rng.random_range(0.45..0.65),
    ];
    let depth = [1.0, rng.random_range(0.5..1.0), rng.random_range(0.5..1.0)];
    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.05..0.4),
                rng.random_range(0.05..0.4),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let texture = Array2::from_shape_fn((params.size, params.size), |(r, c)| {
        TEXTURE_AMPLITUDE / waves.len() as f64
            * waves
                .iter()
                .map(|&(fy, fx, phi)| (fy * r as f64 + fx * c as f64 + phi).sin())
                .sum::<f64>()
    });
    let soft = gaussian_blur(&mask.to_f64(), params.blur_sigma);
    let mut image = Array3::from_shape_fn((3, params.size, params.size), |(ch, r, c)| {
        (background[ch] + texture[[r, c]] - params.contrast * depth[ch] * soft[[r, c]]).clamp(0.0, 1.0)
    });

    for _ in 0..params.hair_strokes {
        let p0 = (rng.random_range(0.0..n), rng.random_range(0.0..n));
        let p1 = (rng.random_range(0.0..n), rng.random_range(0.0..n));
        let p2 = (rng.random_range(0.0..n), rng.random_range(0.0..n));
        let shade = rng.random_range(0.05..0.2);
        let steps = (4 * params.size) as i32;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let u = 1.0 - t;
            let y = u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0;
            let x = u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1;
            let (r, c) = (y as usize, x as usize);
            if r < params.size && c < params.size {
                for ch in 0..3 {
                    image[[ch, r, c]] = shade;
                }
            }
        }
    }

    Sample::new(format!("synth_{:05}", params.seed), image, mask)
}

/// Outcome of scanning a dataset directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub loaded: usize,
    /// Unpaired files, one message each.
    pub warnings: Vec<String>,
}

fn png_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if let (true, Some(stem)) = (is_png, path.file_stem().and_then(|s| s.to_str())) {
            out.push((stem.to_string(), path.clone()));
        }
    }
    out.sort();
    Ok(out)
}

/// Loads `<root>/images/<id>.png` with `<root>/masks/<id>.png`, resized to `size`.
/// Samples come back sorted by id.
pub fn load_dataset(root: impl AsRef<Path>, size: usize) -> Result<(Vec<Sample>, LoadReport)> {
    let root = root.as_ref();
    let images = png_stems(&root.join("images"))?;
    let masks = png_stems(&root.join("masks"))?;
    let mut report = LoadReport::default();
    let mut samples = Vec::new();
    for (id, path) in &images {
        match masks.binary_search_by(|(m, _)| m.cmp(id)) {
            Ok(i) => {
                let image = load_image_png(path, size)?;
                let mask = load_mask_png(&masks[i].1, size)?;
                samples.push(Sample::new(id.clone(), image, mask)?);
            }
            Err(_) => report.warnings.push(format!("image {id} has no mask")),
        }
    }
    for (id, _) in &masks {
        if images.binary_search_by(|(m, _)| m.cmp(id)).is_err() {
            report.warnings.push(format!("mask {id} has no image"));
        }
    }
    report.loaded = samples.len();
    Ok((samples, report))
}

/// Reads a split file: one sample id per line, blank lines ignored.
pub fn read_split(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads an RGB image, bilinearly resized to `size x size`, scaled to `[0, 1]`.
pub fn load_image_png(path: impl AsRef<Path>, size: usize) -> Result<Array3<f64>> {
    let mut rgb = open_image(path.as_ref())?.to_rgb8();
    if rgb.dimensions() != (size as u32, size as u32) {
        rgb = imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle);
    }
    Ok(Array3::from_shape_fn((3, size, size), |(ch, r, c)| {
        rgb.get_pixel(c as u32, r as u32)[ch] as f64 / 255.0
    }))
}

/// Reads an 8-bit mask, binarized at [`MASK_THRESHOLD`] and nearest-resized to `size`.
pub fn load_mask_png(path: impl AsRef<Path>, size: usize) -> Result<BinaryMask> {
    let mut gray = open_image(path.as_ref())?.to_luma8();
    if gray.dimensions() != (size as u32, size as u32) {
        gray = imageops::resize(&gray, size as u32, size as u32, FilterType::Nearest);
    }
    Ok(BinaryMask::from_fn(size, size, |r, c| {
        gray.get_pixel(c as u32, r as u32)[0] >= MASK_THRESHOLD
    }))
}

/// Reads an 8-bit mask at its stored resolution, binarized at [`MASK_THRESHOLD`].
pub fn read_mask_png(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let gray = open_image(path.as_ref())?.to_luma8();
    let (w, h) = gray.dimensions();
    Ok(BinaryMask::from_fn(h as usize, w as usize, |r, c| {
        gray.get_pixel(c as u32, r as u32)[0] >= MASK_THRESHOLD
    }))
}

fn write_png<P>(img: &image::ImageBuffer<P, Vec<P::Subpixel>>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
{
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_image_png(image: &Array3<f64>, path: impl AsRef<Path>) -> Result<()> {
    let (_, h, w) = image.dim();
    let img = RgbImage::from_fn(w as u32, h as u32, |c, r| {
        let px = |ch: usize| (image[[ch, r as usize, c as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    write_png(&img, path.as_ref())
}

/// Writes an 8-bit single-channel image.
pub fn save_gray_png(values: &Array2<u8>, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = values.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |c, r| Luma([values[[r as usize, c as usize]]]));
    write_png(&img, path.as_ref())
}

/// Writes a mask as 0/255.
pub fn save_mask_png(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    save_gray_png(&mask.as_array().mapv(|v| v * 255), path)
}

/// Writes samples in the `images/` + `masks/` layout.
pub fn write_dataset(root: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let root = root.as_ref();
    for s in samples {
        save_image_png(&s.image, root.join("images").join(format!("{}.png", s.id)))?;
        save_mask_png(&s.mask, root.join("masks").join(format!("{}.png", s.id)))?;
    }
    Ok(())
}

/// Draws a mask outline over an image in red.
pub fn overlay(image: &Array3<f64>, mask: &BinaryMask) -> Array3<f64> {
    let mut out = image.clone();
    let (h, w) = mask.dims();
    for r in 0..h {
        for c in 0..w {
            if mask.is_boundary(r, c) {
                out[[0, r, c]] = 1.0;
                out[[1, r, c]] = 0.0;
                out[[2, r, c]] = 0.0;
            }
        }
    }
    out
}

/// Paints the given pixels red.
pub fn mark_points(image: &Array3<f64>, points: &[(usize, usize)]) -> Array3<f64> {
    let mut out = image.clone();
    for &(r, c) in points {
        out[[0, r, c]] = 1.0;
        out[[1, r, c]] = 0.0;
        out[[2, r, c]] = 0.0;
    }
    out
}

/// Concrete augmentation choices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    pub flip_vertical: bool,
    pub flip_horizontal: bool,
    pub scale: f64,
}

impl Augmentation {
    pub const IDENTITY: Self = Self {
        flip_vertical: false,
        flip_horizontal: false,
        scale: 1.0,
    };

    /// Independent fair-coin flips and a uniform scale in `[0.9, 1.1]`.
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            flip_vertical: rng.random_bool(0.5),
            flip_horizontal: rng.random_bool(0.5),
            scale: rng.random_range(0.9..=1.1),
        }
    }
}

/// Scales about the image center, cropping or padding back to the original size.
/// Padding replicates the image edge and is background in the mask.
fn rescale(sample: &Sample, scale: f64) -> Sample {
    let (ch, h, w) = sample.image.dim();
    let src = |o: usize, n: usize| (o as f64 + 0.5 - n as f64 / 2.0) / scale + n as f64 / 2.0 - 0.5;
    let image = Array3::from_shape_fn((ch, h, w), |(k, r, c)| {
        let y = src(r, h).clamp(0.0, (h - 1) as f64);
        let x = src(c, w).clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let img = &sample.image;
        let top = img[[k, y0, x0]] * (1.0 - fx) + img[[k, y0, x1]] * fx;
        let bottom = img[[k, y1, x0]] * (1.0 - fx) + img[[k, y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    });
    let mask = BinaryMask::from_fn(h, w, |r, c| {
        let (y, x) = (src(r, h).round(), src(c, w).round());
        y >= 0.0 && x >= 0.0 && (y as usize) < h && (x as usize) < w && sample.mask.get(y as usize, x as usize)
    });
    Sample {
        id: sample.id.clone(),
        image,
        mask,
    }
}

pub fn augment_with(sample: &Sample, aug: Augmentation) -> Sample {
    let mut out = if aug.scale == 1.0 {
        sample.clone()
    } else {
        rescale(sample, aug.scale)
    };
    if aug.flip_vertical {
        out.image.invert_axis(ndarray::Axis(1));
        out.mask = out.mask.flip_vertical();
    }
    if aug.flip_horizontal {
        out.image.invert_axis(ndarray::Axis(2));
        out.mask = out.mask.flip_horizontal();
    }
    out.image = out.image.as_standard_layout().to_owned();
    out
}

pub fn augment(sample: &Sample, seed: u64) -> Sample {
    augment_with(sample, Augmentation::sample(seed))
}
