//! Synthetic shape scenes, light augmentation and PNG/manifest IO.
//!
//! Sample `i` of `generate_shapes(seed, ..)` is drawn from ChaCha8 seeded
//! with `seed` on stream `i`, so a sample does not depend on how many were
//! requested.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::bilinear_map;
use crate::interaction::components;
use crate::mask::Mask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Base seed of the default training split.
pub const TRAIN_SEED: u64 = 1;
/// Base seed of the default held-out split.
pub const TEST_SEED: u64 = 1_000_003;

/// Smallest and largest target area as pixel count and frame fraction.
pub const MIN_AREA: usize = 16;
pub const MAX_AREA_FRACTION: f64 = 0.6;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<S> {
    pub id: String,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor<S>,
    pub gt: Mask,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeConfig {
    pub size: usize,
    pub max_distractors: usize,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        ShapeConfig {
            size: 64,
            max_distractors: 2,
        }
    }
}

/// A generated scene with its distractor silhouettes.
#[derive(Clone, Debug)]
pub struct Scene<S> {
    pub sample: Sample<S>,
    pub distractors: Vec<Mask>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Ellipse,
    Rectangle,
    Blob,
}

fn raster_shape(kind: Kind, size: usize, scale: f64, rng: &mut ChaCha8Rng) -> Mask {
    let n = size as f64;
    let cy = rng.gen_range(0.2 * n..0.8 * n);
    let cx = rng.gen_range(0.2 * n..0.8 * n);
    match kind {
        Kind::Ellipse => {
            let ry = rng.gen_range(0.06..0.3) * n * scale;
            let rx = rng.gen_range(0.06..0.3) * n * scale;
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let (s, c) = theta.sin_cos();
            Mask::from_fn(size, size, |r, col| {
                let (dy, dx) = (r as f64 + 0.5 - cy, col as f64 + 0.5 - cx);
                let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            })
        }
        Kind::Rectangle => {
            let hy = rng.gen_range(0.05..0.28) * n * scale;
            let hx = rng.gen_range(0.05..0.28) * n * scale;
            Mask::from_fn(size, size, |r, col| {
                (r as f64 + 0.5 - cy).abs() <= hy && (col as f64 + 0.5 - cx).abs() <= hx
            })
        }
        Kind::Blob => {
            const COARSE: usize = 6;
            let noise: Vec<f64> = (0..COARSE * COARSE).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let smooth = bilinear_map::<f64>(COARSE, COARSE, size, size)
                .expect("valid sizes")
                .apply(&noise);
            let radius = rng.gen_range(0.12..0.3) * n * scale;
            Mask::from_fn(size, size, |r, col| {
                let d = ((r as f64 + 0.5 - cy).powi(2) + (col as f64 + 0.5 - cx).powi(2)).sqrt() / radius;
                1.0 - d + 0.45 * smooth[r * size + col] > 0.0
            })
        }
    }
}

/// Largest 4-connected component of `mask`.
fn largest_component(mask: &Mask) -> Mask {
    let comps = components(mask.bits(), mask.height(), mask.width());
    let mut out = Mask::empty(mask.height(), mask.width());
    if let Some(best) = comps.iter().reduce(|a, b| if b.len() > a.len() { b } else { a }) {
        for &i in best {
            out.set(i / mask.width(), i % mask.width(), true);
        }
    }
    out
}

fn dilate(mask: &Mask, radius: usize) -> Mask {
    let (h, w) = (mask.height(), mask.width());
    let r2 = (radius * radius) as i64;
    let rad = radius as i64;
    Mask::from_fn(h, w, |r, c| {
        (-rad..=rad).any(|dy| {
            (-rad..=rad).any(|dx| {
                let (y, x) = (r as i64 + dy, c as i64 + dx);
                dy * dy + dx * dx <= r2 && y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask.get(y as usize, x as usize)
            })
        })
    })
}

fn random_kind(rng: &mut ChaCha8Rng) -> Kind {
    match rng.gen_range(0..3) {
        0 => Kind::Ellipse,
        1 => Kind::Rectangle,
        _ => Kind::Blob,
    }
}

fn color_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// One scene from `rng`.
pub fn generate_scene<S: Scalar>(id: String, config: &ShapeConfig, rng: &mut ChaCha8Rng) -> Scene<S> {
    let n = config.size;
    let max_area = (MAX_AREA_FRACTION * (n * n) as f64) as usize;

    let bg_base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.15..0.85));
    let mut target_color: [f64; 3];
    loop {
        target_color = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
        if color_distance(&target_color, &bg_base) > 0.35 {
            break;
        }
    }
    let freq_y = rng.gen_range(0.05..0.35);
    let freq_x = rng.gen_range(0.05..0.35);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let amp = rng.gen_range(0.03..0.12);

    let gt = loop {
        let kind = random_kind(rng);
        let m = largest_component(&raster_shape(kind, n, 1.0, rng));
        if (MIN_AREA..=max_area).contains(&m.count()) {
            break m;
        }
    };

    let wanted = rng.gen_range(0..=config.max_distractors);
    let mut occupied = dilate(&gt, 2);
    let mut distractors = Vec::new();
    let mut colors = Vec::new();
    for _ in 0..wanted {
        for _attempt in 0..8 {
            let kind = random_kind(rng);
            let m = largest_component(&raster_shape(kind, n, 0.7, rng));
            if m.count() < MIN_AREA || m.and(&occupied).expect("same size").count() > 0 {
                continue;
            }
            occupied = occupied.or(&dilate(&m, 2)).expect("same size");
            let jitter: [f64; 3] = std::array::from_fn(|k| (target_color[k] + rng.gen_range(-0.08..0.08)).clamp(0.0, 1.0));
            distractors.push(m);
            colors.push(jitter);
            break;
        }
    }

    let mut data = vec![0.0f64; 3 * n * n];
    for r in 0..n {
        for c in 0..n {
            let i = r * n + c;
            let wave = amp * ((r as f64 * freq_y + c as f64 * freq_x) + phase).sin();
            let mut color = bg_base.map(|b| b + wave);
            if gt.bits()[i] {
                color = target_color;
            }
            for (m, col) in distractors.iter().zip(&colors) {
                if m.bits()[i] {
                    color = *col;
                }
            }
            for (k, v) in color.iter().enumerate() {
                let noise = rng.gen_range(-0.04..0.04);
                data[k * n * n + i] = (v + noise).clamp(0.0, 1.0);
            }
        }
    }
    let image = Tensor::from_fn([3, n, n], |i| S::lit(data[i]));
    Scene {
        sample: Sample { id, image, gt },
        distractors,
    }
}

/// `n` scenes; sample `i` uses ChaCha8 seeded with `seed`, stream `i`.
pub fn generate_shapes<S: Scalar>(seed: u64, n: usize, config: &ShapeConfig) -> Result<Vec<Sample<S>>> {
    if n == 0 {
        return Err(Error::InvalidInput("requested zero samples".into()));
    }
    Ok((0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            generate_scene(format!("shape-{seed}-{i:05}"), config, &mut rng).sample
        })
        .collect())
}

fn resize_channel(values: &[f64], n: usize, out: usize) -> Vec<f64> {
    bilinear_map::<f64>(n, n, out, out).expect("valid sizes").apply(values)
}

/// Random horizontal flip, then a rescale by a factor in `[0.75, 1.4]`
/// about the image centre, cropping or edge-padding back to the original
/// size. Falls back to the flip alone when rescaling would lose the object.
pub fn augment<S: Scalar>(sample: &Sample<S>, rng: &mut impl Rng) -> Result<Sample<S>> {
    let (h, w) = (sample.gt.height(), sample.gt.width());
    if h != w || sample.image.shape() != [3, h, w] {
        return Err(Error::InvalidShape("augmentation expects square samples".into()));
    }
    let n = h;
    let flip = rng.gen_bool(0.5);
    let scale = rng.gen_range(0.75..=1.4);
    let src = |k: usize, r: usize, c: usize| {
        let c = if flip { n - 1 - c } else { c };
        sample.image.data()[k * n * n + r * n + c].to_f64_lossy()
    };
    let gt_src = |r: usize, c: usize| sample.gt.get(r, if flip { n - 1 - c } else { c });

    let m = ((n as f64 * scale).round() as usize).max(1);
    let offset = m as i64 / 2 - n as i64 / 2;
    let pick = |v: i64| (v + offset).clamp(0, m as i64 - 1) as usize;
    let mut image = vec![S::zero(); 3 * n * n];
    for k in 0..3 {
        let chan: Vec<f64> = (0..n * n).map(|i| src(k, i / n, i % n)).collect();
        let resized = resize_channel(&chan, n, m);
        for r in 0..n {
            for c in 0..n {
                image[k * n * n + r * n + c] = S::lit(resized[pick(r as i64) * m + pick(c as i64)].clamp(0.0, 1.0));
            }
        }
    }
    let gt = Mask::from_fn(n, n, |r, c| {
        let (y, x) = (r as i64 + offset, c as i64 + offset);
        if y < 0 || x < 0 || y >= m as i64 || x >= m as i64 {
            return false;
        }
        gt_src(y as usize * n / m, x as usize * n / m)
    });
    if gt.count() >= MIN_AREA {
        return Ok(Sample {
            id: sample.id.clone(),
            image: Tensor::new([3, n, n], image)?,
            gt,
        });
    }
    let image = Tensor::from_fn([3, n, n], |i| S::lit(src(i / (n * n), (i / n) % n, i % n)));
    Ok(Sample {
        id: sample.id.clone(),
        image,
        gt: Mask::from_fn(n, n, gt_src),
    })
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_image<S: Scalar>(image: &Tensor<S>, path: &Path) -> Result<()> {
    let (h, w) = match *image.shape() {
        [3, h, w] => (h, w),
        ref s => return Err(Error::InvalidShape(format!("image must be [3,H,W], got {s:?}"))),
    };
    let d = image.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb(std::array::from_fn(|k| to_u8(d[k * h * w + i].to_f64_lossy())))
    });
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Writes `mask` as an 8-bit grayscale PNG with values 0 and 255.
pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    encode_mask_png(mask).and_then(|bytes| Ok(fs::write(path, bytes)?))
}

pub fn encode_mask_png(mask: &Mask) -> Result<Vec<u8>> {
    let img = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    encode_gray_png(&img)
}

pub fn encode_gray_png(img: &GrayImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// RGB image bytes (any format the decoder recognizes) as `[3, H, W]` in
/// `[0, 1]`.
pub fn decode_image<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    let img = image::load_from_memory(bytes)?.to_rgb8();
    Ok(rgb_to_tensor(&img))
}

pub fn rgb_to_tensor<S: Scalar>(img: &RgbImage) -> Tensor<S> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::from_fn([3, h, w], |i| {
        let (k, p) = (i / (h * w), i % (h * w));
        S::lit(img.get_pixel((p % w) as u32, (p / w) as u32).0[k] as f64 / 255.0)
    })
}

/// Single-channel mask bytes binarized at 128 (values ≥ 128 are set).
pub fn decode_mask(bytes: &[u8]) -> Result<Mask> {
    let img = image::load_from_memory(bytes)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Mask::new(h, w, img.pixels().map(|p| p.0[0] >= 128).collect())
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    decode_mask(&fs::read(path)?)
}

pub fn load_sample<S: Scalar>(image_path: &Path, mask_path: &Path) -> Result<Sample<S>> {
    let image: Tensor<S> = decode_image(&fs::read(image_path)?)?;
    let gt = load_mask(mask_path)?;
    if image.shape()[1..] != [gt.height(), gt.width()] {
        return Err(Error::InvalidInput(format!(
            "image {:?} and mask {}x{} differ in size",
            &image.shape()[1..],
            gt.height(),
            gt.width()
        )));
    }
    let id = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Sample { id, image, gt })
}

/// One manifest line: `id<TAB>image<TAB>mask`, paths relative to the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// Writes every sample as `<id>.png` and `<id>_mask.png` under `dir`, plus
/// `manifest.tsv`.
pub fn write_dataset<S: Scalar>(samples: &[Sample<S>], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let manifest = dir.join("manifest.tsv");
    let mut out = std::io::BufWriter::new(fs::File::create(&manifest)?);
    for s in samples {
        let image = format!("{}.png", s.id);
        let mask = format!("{}_mask.png", s.id);
        save_image(&s.image, &dir.join(&image))?;
        save_mask(&s.gt, &dir.join(&mask))?;
        writeln!(out, "{}\t{image}\t{mask}", s.id)?;
    }
    out.flush()?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let file = BufReader::new(fs::File::open(path)?);
    let mut entries = Vec::new();
    for (n, line) in file.lines().enumerate() {
        let line = line?;
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, image, mask] = fields[..] else {
            return Err(Error::InvalidInput(format!("manifest line {}: expected 3 tab-separated fields", n + 1)));
        };
        entries.push(ManifestEntry {
            id: id.to_string(),
            image: base.join(image),
            mask: base.join(mask),
        });
    }
    Ok(entries)
}

/// Loads every manifest entry, keeping the manifest ids.
pub fn load_manifest<S: Scalar>(path: &Path) -> Result<Vec<Sample<S>>> {
    read_manifest(path)?
        .into_iter()
        .map(|e| {
            let mut s = load_sample(&e.image, &e.mask)?;
            s.id = e.id;
            Ok(s)
        })
        .collect()
}
