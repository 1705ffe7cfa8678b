//! Procedural camouflage scenes, salient references and sentence embeddings.
//!
//! Every category owns an appearance signature: a luminance polarity and a
//! grating orientation. A scene paints smooth random blobs onto a shared
//! band-limited noise background; each blob adds `(1 − strength)` times its
//! category's signature. One blob is the labeled object. The others are
//! unlabeled decoys carrying other categories' signatures, so the object is
//! only identifiable when the target category is known.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::exec;
use crate::nn::tensor_seed;
use crate::pgm::{quantize, Gray8};
use crate::tensor::Tensor;

/// Width of the sentence embeddings.
pub const TEXT_DIM: usize = 64;
/// Total norm of the per-sentence jitter before renormalization.
pub const TEXT_JITTER: f64 = 0.1;
/// Area budget of the blobs in a scene, as a fraction of the image; `n`
/// blobs each draw from `SCALE_RANGE / n`.
pub const SCALE_RANGE: (f64, f64) = (0.1, 0.4);
/// Admissible rasterized mask area fraction.
pub const AREA_RANGE: (f64, f64) = (0.02, 0.5);
/// Minimum object/background mean-intensity gap of a reference.
pub const MIN_REFERENCE_CONTRAST: f64 = 0.4;

const BACKGROUND_LEVEL: f64 = 0.5;
const NOISE_STD: f64 = 0.1;
const NOISE_SIGMA: f64 = 1.0;
const POLARITY_GAIN: f64 = 1.0;
const GRATING_GAIN: f64 = 0.5;
const GRATING_PERIOD: f64 = 4.0;
const REF_POLARITY: f64 = 0.3;
const REF_GRATING: f64 = 0.1;
const MAX_HARMONIC: f64 = 0.1;
const DECOY_MARGIN: f64 = 2.0;
const PLACEMENT_TRIES: usize = 200;
const MAX_RETRIES: u32 = 1000;

/// Luminance polarity and grating orientation of one category.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Signature {
    pub polarity: f64,
    pub theta: f64,
}

impl Signature {
    /// Even categories are bright, odd ones dark; each polarity pair shares
    /// one of `ceil(n/2)` evenly spaced orientations.
    pub fn of(category: usize, num_categories: usize) -> Self {
        let orientations = num_categories.div_ceil(2).max(1);
        Self {
            polarity: if category.is_multiple_of(2) { 1.0 } else { -1.0 },
            theta: PI * (category / 2) as f64 / orientations as f64,
        }
    }

    fn grating(&self, x: f64, y: f64, phase: f64) -> f64 {
        (2.0 * PI / GRATING_PERIOD * (x * self.theta.cos() + y * self.theta.sin()) + phase).sin()
    }
}

/// Smooth random polygon: a circle whose radius carries three low harmonics.
#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub r0: f64,
    pub harmonics: [(f64, f64); 3],
}

impl Blob {
    fn max_radius(&self) -> f64 {
        self.r0 * (1.0 + self.harmonics.iter().map(|h| h.0).sum::<f64>())
    }

    fn radius_at(&self, phi: f64) -> f64 {
        let bump: f64 = self
            .harmonics
            .iter()
            .enumerate()
            .map(|(k, &(a, ph))| a * ((k + 1) as f64 * phi + ph).cos())
            .sum();
        self.r0 * (1.0 + bump)
    }

    /// Membership of the pixel whose centre is `(x + 0.5, y + 0.5)`.
    pub fn contains(&self, x: usize, y: usize) -> bool {
        self.contains_with_margin(x, y, 0.0)
    }

    fn contains_with_margin(&self, x: usize, y: usize, margin: f64) -> bool {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        (dx * dx + dy * dy).sqrt() < self.radius_at(dy.atan2(dx)) + margin
    }

    pub fn mask(&self, size: usize) -> Tensor {
        Tensor::from_fn(&[1, size, size], |i| self.contains(i % size, i / size) as u8 as f64)
    }

    /// Draws a blob whose area fraction is drawn from `SCALE_RANGE / share`,
    /// lying wholly inside the frame, or `None` when the outline does not fit.
    fn sample(rng: &mut ChaCha8Rng, size: usize, share: usize) -> Option<Self> {
        let s = size as f64;
        let n = share as f64;
        let area = rng.random_range(SCALE_RANGE.0 / n..=SCALE_RANGE.1 / n) * s * s;
        let harmonics = [0; 3].map(|_| (rng.random_range(0.0..MAX_HARMONIC), rng.random_range(0.0..2.0 * PI)));
        let spread: f64 = harmonics.iter().map(|h| h.0 * h.0).sum();
        let r0 = (area / (PI * (1.0 + spread / 2.0))).sqrt();
        let mut blob = Self {
            cx: 0.0,
            cy: 0.0,
            r0,
            harmonics,
        };
        let rmax = blob.max_radius();
        // one clear pixel between the outline and the frame
        let lo = rmax + 1.0;
        if 2.0 * lo >= s {
            return None;
        }
        blob.cx = rng.random_range(lo..=s - lo);
        blob.cy = rng.random_range(lo..=s - lo);
        Some(blob)
    }
}

/// Inputs of one scene. Shape, scale, decoy count and texture are drawn from
/// `seed` and the retry counter.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub category: usize,
    pub num_categories: usize,
    pub seed: u64,
    pub strength: f64,
    pub size: usize,
    pub max_decoys: usize,
}

/// A rendered scene and how it was drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `[3, S, S]`, quantized to 8-bit levels and replicated over channels.
    pub image: Tensor,
    /// `[1, S, S]`, binary.
    pub mask: Tensor,
    pub area_fraction: f64,
    pub decoys: Vec<usize>,
    pub retries: u32,
}

fn rng_for(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(tensor_seed(seed, tag))
}

/// Gaussian-smoothed white noise rescaled to unit standard deviation.
pub fn band_limited_noise(rng: &mut ChaCha8Rng, size: usize, sigma: f64) -> Vec<f64> {
    let white: Vec<f64> = (0..size * size).map(|_| StandardNormal.sample(rng)).collect();
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = taps.iter().sum();
    // circular boundary keeps the statistics stationary up to the frame edge
    let blur = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..size {
            for x in 0..size {
                let mut acc = 0.0;
                for (t, &w) in taps.iter().enumerate() {
                    let d = t as isize - radius;
                    let (sx, sy) = if horizontal {
                        ((x as isize + d).rem_euclid(size as isize) as usize, y)
                    } else {
                        (x, (y as isize + d).rem_euclid(size as isize) as usize)
                    };
                    acc += w * src[sy * size + sx];
                }
                out[y * size + x] = acc / norm;
            }
        }
        out
    };
    let smooth = blur(&blur(&white, true), false);
    let mean = smooth.iter().sum::<f64>() / smooth.len() as f64;
    let std = (smooth.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / smooth.len() as f64).sqrt();
    smooth.iter().map(|v| (v - mean) / std).collect()
}

fn replicate_gray(plane: &[f64], size: usize) -> Tensor {
    let q: Vec<f64> = plane.iter().map(|&v| quantize(v) as f64 / 255.0).collect();
    let mut data = Vec::with_capacity(3 * q.len());
    for _ in 0..3 {
        data.extend_from_slice(&q);
    }
    Tensor::new(vec![3, size, size], data).expect("three planes")
}

fn validate_scene(spec: &SceneSpec) -> Result<()> {
    if spec.num_categories == 0 || spec.category >= spec.num_categories {
        return Err(Error::InvalidArgument(format!(
            "category {} outside 0..{}",
            spec.category, spec.num_categories
        )));
    }
    if spec.max_decoys > 0 && spec.num_categories < 2 {
        return Err(Error::InvalidArgument("decoys need at least two categories".into()));
    }
    if !(0.0..=1.0).contains(&spec.strength) {
        return Err(Error::InvalidArgument(format!(
            "strength {} outside [0, 1]",
            spec.strength
        )));
    }
    if spec.size < 16 {
        return Err(Error::InvalidArgument(format!("image size {} below 16", spec.size)));
    }
    Ok(())
}

/// Places the object and up to `max_decoys` non-touching decoys, all drawn
/// from one shape distribution that splits the area budget evenly. A drawn
/// decoy count that cannot be laid out is lowered until one fits.
fn layout(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> Option<(Blob, Vec<(Blob, usize)>)> {
    let mut n_blobs = rng.random_range(0..=spec.max_decoys) + 1;
    let mut blobs: Vec<Blob> = Vec::new();
    'count: while n_blobs > 0 {
        for _ in 0..PLACEMENT_TRIES {
            blobs.clear();
            for _ in 0..n_blobs {
                let Some(b) = Blob::sample(rng, spec.size, n_blobs) else {
                    break;
                };
                let clear = blobs.iter().all(|o| {
                    let d = ((b.cx - o.cx).powi(2) + (b.cy - o.cy).powi(2)).sqrt();
                    d > b.max_radius() + o.max_radius() + DECOY_MARGIN
                });
                if !clear {
                    break;
                }
                blobs.push(b);
            }
            if blobs.len() == n_blobs {
                break 'count;
            }
        }
        n_blobs -= 1;
    }
    if blobs.len() != n_blobs || blobs.is_empty() {
        return None;
    }
    // the labeled blob is chosen after placement so it is not biased in size
    let object = blobs.swap_remove(rng.random_range(0..blobs.len()));
    let decoys = blobs
        .into_iter()
        .map(|b| {
            let mut c = rng.random_range(0..spec.num_categories - 1);
            if c >= spec.category {
                c += 1;
            }
            (b, c)
        })
        .collect();
    Some((object, decoys))
}

/// Renders one camouflage scene. A draw whose mask area leaves
/// [`AREA_RANGE`] is redrawn with the retry counter folded into the seed.
pub fn gen_scene(spec: &SceneSpec) -> Result<Scene> {
    validate_scene(spec)?;
    let s = spec.size;
    for retry in 0..MAX_RETRIES {
        let mut rng = rng_for(spec.seed, &format!("scene/{retry}"));
        let Some((object, decoys)) = layout(&mut rng, spec) else {
            continue;
        };
        let mask = object.mask(s);
        let area = mask.mean();
        if !(AREA_RANGE.0..=AREA_RANGE.1).contains(&area) {
            continue;
        }
        let noise = band_limited_noise(&mut rng, s, NOISE_SIGMA);
        let mut plane: Vec<f64> = noise.iter().map(|n| BACKGROUND_LEVEL + NOISE_STD * n).collect();
        let amount = 1.0 - spec.strength;
        let painted = decoys
            .iter()
            .map(|(b, c)| (b, *c))
            .chain(std::iter::once((&object, spec.category)));
        for (blob, category) in painted {
            let sig = Signature::of(category, spec.num_categories);
            let phase = rng.random_range(0.0..2.0 * PI);
            for y in 0..s {
                for x in 0..s {
                    if blob.contains(x, y) {
                        let d = POLARITY_GAIN * sig.polarity + GRATING_GAIN * sig.grating(x as f64, y as f64, phase);
                        plane[y * s + x] += amount * d;
                    }
                }
            }
        }
        return Ok(Scene {
            image: replicate_gray(&plane, s),
            mask,
            area_fraction: area,
            decoys: decoys.iter().map(|d| d.1).collect(),
            retries: retry,
        });
    }
    Err(Error::InvalidArgument(format!(
        "no admissible scene within {MAX_RETRIES} retries for seed {}",
        spec.seed
    )))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSpec {
    pub category: usize,
    pub num_categories: usize,
    pub seed: u64,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reference {
    /// `[3, S, S]`
    pub image: Tensor,
    /// `[1, S, S]`
    pub mask: Tensor,
    /// Plain background level, 0 for bright categories and 1 for dark ones.
    pub background: f64,
    pub area_fraction: f64,
}

/// Renders the category's signature at full strength on a plain background
/// of the opposite luminance.
pub fn gen_reference(spec: &ReferenceSpec) -> Result<Reference> {
    if spec.category >= spec.num_categories {
        return Err(Error::InvalidArgument(format!(
            "category {} outside 0..{}",
            spec.category, spec.num_categories
        )));
    }
    let s = spec.size;
    let sig = Signature::of(spec.category, spec.num_categories);
    let background = if sig.polarity > 0.0 { 0.0 } else { 1.0 };
    for retry in 0..MAX_RETRIES {
        let mut rng = rng_for(spec.seed, &format!("reference/{retry}"));
        let Some(blob) = Blob::sample(&mut rng, s, 1) else {
            continue;
        };
        let mask = blob.mask(s);
        let area = mask.mean();
        if !(AREA_RANGE.0..=AREA_RANGE.1).contains(&area) {
            continue;
        }
        let phase = rng.random_range(0.0..2.0 * PI);
        let mut plane = vec![background; s * s];
        for y in 0..s {
            for x in 0..s {
                if blob.contains(x, y) {
                    plane[y * s + x] = BACKGROUND_LEVEL
                        + REF_POLARITY * sig.polarity
                        + REF_GRATING * sig.grating(x as f64, y as f64, phase);
                }
            }
        }
        return Ok(Reference {
            image: replicate_gray(&plane, s),
            mask,
            background,
            area_fraction: area,
        });
    }
    Err(Error::InvalidArgument(format!(
        "no admissible reference within {MAX_RETRIES} retries for seed {}",
        spec.seed
    )))
}

fn unit_gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// `[n, 64]` unit rows: the category's unit anchor plus Gaussian jitter of
/// expected total norm [`TEXT_JITTER`], renormalized.
pub fn gen_text_embedding(category: usize, n_sentences: usize, seed: u64) -> Result<Tensor> {
    if n_sentences == 0 {
        return Err(Error::InvalidArgument("at least one sentence is required".into()));
    }
    let anchor = normalized(unit_gaussian(
        &mut rng_for(seed, &format!("anchor/{category}")),
        TEXT_DIM,
        1.0,
    ));
    let mut rng = rng_for(seed, &format!("sentences/{category}"));
    let per_component = TEXT_JITTER / (TEXT_DIM as f64).sqrt();
    let mut data = Vec::with_capacity(n_sentences * TEXT_DIM);
    for _ in 0..n_sentences {
        let jitter = unit_gaussian(&mut rng, TEXT_DIM, per_component);
        data.extend(normalized(anchor.iter().zip(jitter).map(|(a, j)| a + j).collect()));
    }
    Tensor::new(vec![n_sentences, TEXT_DIM], data)
}

/// One manifest row.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: String,
    pub category: usize,
    pub seed: u64,
    pub strength: Option<f64>,
    pub area_fraction: Option<f64>,
}

pub const MANIFEST_HEADER: &str = "path\tcategory\tseed\tstrength\tarea_fraction";
pub const MANIFEST_FILE: &str = "manifest.tsv";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"))
}

pub fn render_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for e in entries {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            e.path,
            e.category,
            e.seed,
            opt(e.strength),
            opt(e.area_fraction)
        );
    }
    out
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::Format("manifest header mismatch".into()));
    }
    let bad = |n: usize| Error::Format(format!("manifest line {n} is malformed"));
    let parse_opt = |s: &str, n: usize| -> Result<Option<f64>> {
        if s == "-" {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| bad(n))
        }
    };
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let n = i + 2;
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 5 {
                return Err(bad(n));
            }
            Ok(ManifestEntry {
                path: f[0].to_string(),
                category: f[1].parse().map_err(|_| bad(n))?,
                seed: f[2].parse().map_err(|_| bad(n))?,
                strength: parse_opt(f[3], n)?,
                area_fraction: parse_opt(f[4], n)?,
            })
        })
        .collect()
}

pub const SPLITS: [&str; 2] = ["train", "test"];

/// Scene seed of sample `index` in `split`. Splits draw from disjoint tags.
pub fn scene_seed(seed: u64, split: &str, index: usize) -> u64 {
    tensor_seed(seed, &format!("{split}/scene/{index}"))
}

pub fn reference_seed(seed: u64, split: &str, category: usize, index: usize) -> u64 {
    tensor_seed(seed, &format!("{split}/ref/{category}/{index}"))
}

enum Job {
    Scene {
        index: usize,
        spec: SceneSpec,
    },
    Reference {
        category: usize,
        index: usize,
        spec: ReferenceSpec,
    },
    Text {
        category: usize,
    },
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Generates both splits under `root`, which must be absent or empty. Files
/// are written concurrently; the manifest is written last.
pub fn gen_dataset(root: &Path, cfg: &DataConfig, size: usize, seed: u64) -> Result<Vec<ManifestEntry>> {
    if root.exists() {
        let mut entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
        if entries.next().is_some() {
            return Err(Error::InvalidArgument(format!(
                "target directory {} is not empty",
                root.display()
            )));
        }
    }
    if cfg.categories == 0 {
        return Err(Error::InvalidArgument("data.categories must be positive".into()));
    }
    let mut manifest = Vec::new();
    for split in SPLITS {
        let per_category = if split == "train" {
            cfg.train_per_category
        } else {
            cfg.test_per_category
        };
        for sub in ["images", "masks", "refs", "text"] {
            mkdir(&root.join(split).join(sub))?;
        }
        let mut jobs = Vec::new();
        for index in 0..per_category * cfg.categories {
            jobs.push(Job::Scene {
                index,
                spec: SceneSpec {
                    category: index % cfg.categories,
                    num_categories: cfg.categories,
                    seed: scene_seed(seed, split, index),
                    strength: cfg.strength,
                    size,
                    max_decoys: cfg.decoys,
                },
            });
        }
        for category in 0..cfg.categories {
            for index in 0..cfg.refs_per_category {
                jobs.push(Job::Reference {
                    category,
                    index,
                    spec: ReferenceSpec {
                        category,
                        num_categories: cfg.categories,
                        seed: reference_seed(seed, split, category, index),
                        size,
                    },
                });
            }
            jobs.push(Job::Text { category });
        }
        let dir = root.join(split);
        let rows = exec::map_slice(&jobs, |job| -> Result<Vec<ManifestEntry>> {
            match job {
                Job::Scene { index, spec } => {
                    let scene = gen_scene(spec)?;
                    let mut rows = Vec::with_capacity(2);
                    for (sub, t) in [("images", scene.image.index_outer(0)), ("masks", scene.mask)] {
                        let rel = format!("{split}/{sub}/{index:05}.pgm");
                        write_file(
                            &dir.join(sub).join(format!("{index:05}.pgm")),
                            &Gray8::from_tensor(&t)?.to_bytes(),
                        )?;
                        rows.push(ManifestEntry {
                            path: rel,
                            category: spec.category,
                            seed: spec.seed,
                            strength: Some(spec.strength),
                            area_fraction: Some(scene.area_fraction),
                        });
                    }
                    Ok(rows)
                }
                Job::Reference { category, index, spec } => {
                    let r = gen_reference(spec)?;
                    let name = format!("cat{category}_{index}.pgm");
                    write_file(
                        &dir.join("refs").join(&name),
                        &Gray8::from_tensor(&r.image.index_outer(0))?.to_bytes(),
                    )?;
                    Ok(vec![ManifestEntry {
                        path: format!("{split}/refs/{name}"),
                        category: *category,
                        seed: spec.seed,
                        strength: None,
                        area_fraction: Some(r.area_fraction),
                    }])
                }
                Job::Text { category } => {
                    let t = gen_text_embedding(*category, cfg.sentences, seed)?;
                    let name = format!("cat{category}.rfmt");
                    write_file(&dir.join("text").join(&name), &t.to_bytes())?;
                    Ok(vec![ManifestEntry {
                        path: format!("{split}/text/{name}"),
                        category: *category,
                        seed,
                        strength: None,
                        area_fraction: None,
                    }])
                }
            }
        });
        for r in rows {
            manifest.extend(r?);
        }
    }
    crate::model::checkpoint::write_atomic(&root.join(MANIFEST_FILE), render_manifest(&manifest).as_bytes())?;
    Ok(manifest)
}
