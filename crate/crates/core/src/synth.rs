//! Synthetic multi-channel tasks.
//!
//! *Decompose*: image = albedo x shading, with piecewise-constant Voronoi
//! albedo and a smooth grayscale shading field. *Inpaint*: a masked image
//! and its hole mask are inputs, the full image is the output.
//!
//! Every sample draws from its own RNG stream, so sample `i` of a dataset
//! does not depend on how many samples precede it.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::tensor::Rng;

/// Lowest shading value produced by the normalized field.
pub const SHADING_FLOOR: f64 = 0.15;
const ALBEDO_RANGE: (f64, f64) = (0.15, 1.0);
const SHADING_TERMS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenSpec {
    pub num_regions: usize,
    /// Shortest shading period, in pixels. `f64::INFINITY` gives shading = 1.
    pub light_smoothness: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            num_regions: 6,
            light_smoothness: 12.0,
        }
    }
}

impl GenSpec {
    fn validate(&self) -> Result<()> {
        if self.num_regions < 2 {
            return Err(Error::param(format!("need at least 2 albedo regions, got {}", self.num_regions)));
        }
        if !(self.light_smoothness > 0.0) {
            return Err(Error::param("light smoothness must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Decompose,
    Inpaint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Input,
    Output,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Input => "input",
            Role::Output => "output",
        }
    }
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Decompose => "decompose",
            Task::Inpaint => "inpaint",
        }
    }

    /// Plane names in teammate order, with their roles.
    pub fn topology(self) -> &'static [(&'static str, Role)] {
        match self {
            Task::Decompose => &[("image", Role::Input), ("albedo", Role::Output), ("shading", Role::Output)],
            Task::Inpaint => &[("masked", Role::Input), ("mask", Role::Input), ("image", Role::Output)],
        }
    }

    pub fn plane_names(self) -> Vec<&'static str> {
        self.topology().iter().map(|p| p.0).collect()
    }

    pub fn roles(self) -> Vec<Role> {
        self.topology().iter().map(|p| p.1).collect()
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decompose" => Ok(Task::Decompose),
            "inpaint" => Ok(Task::Inpaint),
            other => Err(Error::param(format!("unknown task {other:?} (expected decompose or inpaint)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionSample {
    pub image: Image,
    pub albedo: Image,
    pub shading: Image,
}

/// Voronoi partition of the frame with a flat random color per cell.
fn voronoi_albedo(rng: &mut Rng, h: usize, w: usize, regions: usize) -> Image {
    let sites: Vec<(f64, f64, [f64; 3])> = (0..regions)
        .map(|_| {
            let y = rng.uniform(0.0, h as f64);
            let x = rng.uniform(0.0, w as f64);
            let color = [(); 3].map(|_| rng.uniform(ALBEDO_RANGE.0, ALBEDO_RANGE.1));
            (y, x, color)
        })
        .collect();
    let mut img = Image::filled(h, w, 0.0);
    for py in 0..h {
        for px in 0..w {
            let (cy, cx) = (py as f64 + 0.5, px as f64 + 0.5);
            let nearest = sites
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 - cy).powi(2) + (a.1 - cx).powi(2);
                    let db = (b.0 - cy).powi(2) + (b.1 - cx).powi(2);
                    da.total_cmp(&db)
                })
                .expect("at least two sites");
            for c in 0..CHANNELS {
                img.set(c, py, px, nearest.2[c]);
            }
        }
    }
    img
}

/// Random low-frequency cosine mixture, min-max normalized into
/// `[SHADING_FLOOR, 1]` and replicated over the channels.
fn smooth_shading(rng: &mut Rng, h: usize, w: usize, smoothness: f64) -> Image {
    if smoothness.is_infinite() {
        return Image::filled(h, w, 1.0);
    }
    let max_freq = 1.0 / smoothness;
    let terms: Vec<(f64, f64, f64, f64)> = (0..SHADING_TERMS)
        .map(|_| {
            let angle = rng.uniform(0.0, std::f64::consts::TAU);
            let freq = rng.uniform(0.25, 1.0) * max_freq;
            let phase = rng.uniform(0.0, std::f64::consts::TAU);
            let amp = rng.uniform(0.2, 1.0);
            (freq * angle.cos(), freq * angle.sin(), phase, amp)
        })
        .collect();
    let mut field = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            field[y * w + x] = terms
                .iter()
                .map(|(fy, fx, ph, a)| a * (std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) + ph).cos())
                .sum();
        }
    }
    let lo = field.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    Image::from_fn(h, w, |_, y, x| {
        if span < 1e-12 {
            1.0
        } else {
            SHADING_FLOOR + (1.0 - SHADING_FLOOR) * (field[y * w + x] - lo) / span
        }
    })
}

fn check_frame(count: usize, h: usize, w: usize) -> Result<()> {
    if h < 8 || w < 8 {
        return Err(Error::param(format!("frame must be at least 8x8, got {h}x{w}")));
    }
    if count == 0 {
        return Err(Error::param("sample count must be at least 1"));
    }
    Ok(())
}

fn decomposition_sample(rng: &mut Rng, h: usize, w: usize, spec: &GenSpec) -> DecompositionSample {
    let albedo = voronoi_albedo(rng, h, w, spec.num_regions);
    let shading = smooth_shading(rng, h, w, spec.light_smoothness);
    let image = albedo.hadamard(&shading).expect("same frame");
    DecompositionSample { image, albedo, shading }
}

/// `count` decomposition samples in `[0, 1]`, deterministic in the seed of `rng`.
pub fn generate(rng: &Rng, count: usize, h: usize, w: usize, spec: &GenSpec) -> Result<Vec<DecompositionSample>> {
    check_frame(count, h, w)?;
    spec.validate()?;
    Ok((0..count)
        .map(|i| decomposition_sample(&mut rng.stream(i as u64), h, w, spec))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintSample {
    pub image: Image,
    /// 1 inside holes, 0 elsewhere, on every channel.
    pub mask: Image,
    /// `image` with holes set to 0.
    pub masked: Image,
}

/// `count` inpainting samples: decomposition images with one to two
/// rectangular holes each.
pub fn generate_inpaint(rng: &Rng, count: usize, h: usize, w: usize, spec: &GenSpec) -> Result<Vec<InpaintSample>> {
    check_frame(count, h, w)?;
    spec.validate()?;
    Ok((0..count)
        .map(|i| {
            let mut r = rng.stream(i as u64);
            let image = decomposition_sample(&mut r, h, w, spec).image;
            let mut mask = Image::filled(h, w, 0.0);
            for _ in 0..1 + r.below(2) {
                let (rh, rw) = (2 + r.below(h / 2 - 1), 2 + r.below(w / 2 - 1));
                let (y0, x0) = (r.below(h - rh + 1), r.below(w - rw + 1));
                for c in 0..CHANNELS {
                    for y in y0..y0 + rh {
                        for x in x0..x0 + rw {
                            mask.set(c, y, x, 1.0);
                        }
                    }
                }
            }
            let masked = image.hadamard(&mask.map(|m| 1.0 - m)).expect("same frame");
            InpaintSample { image, mask, masked }
        })
        .collect())
}

/// RMSE of `pred_albedo x pred_shading` against `image` after fitting one
/// least-squares scale per channel. All inputs are in `[0, 1]` space.
pub fn recomposition_error(pred_albedo: &Image, pred_shading: &Image, image: &Image) -> Result<f64> {
    let product = pred_albedo.hadamard(pred_shading)?;
    if !product.same_shape(image) {
        return Err(Error::shape(format!(
            "prediction 3x{}x{} vs image 3x{}x{}",
            product.height(),
            product.width(),
            image.height(),
            image.width()
        )));
    }
    let mut se = 0.0;
    for c in 0..CHANNELS {
        let (p, t) = (product.channel(c), image.channel(c));
        let pp: f64 = p.iter().map(|v| v * v).sum();
        let pt: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
        let scale = if pp > 0.0 { pt / pp } else { 0.0 };
        se += p.iter().zip(t).map(|(a, b)| (scale * a - b).powi(2)).sum::<f64>();
    }
    Ok((se / image.data().len() as f64).sqrt())
}

/// Index written next to a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub task: Task,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub spec: GenSpec,
    pub samples: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::from("# teamwork synthetic dataset\n");
        let roles: Vec<String> = self
            .task
            .topology()
            .iter()
            .map(|(n, r)| format!("{n}:{}", r.name()))
            .collect();
        let _ = writeln!(s, "task={}", self.task.name());
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "height={}", self.height);
        let _ = writeln!(s, "width={}", self.width);
        let _ = writeln!(s, "num_regions={}", self.spec.num_regions);
        let _ = writeln!(s, "light_smoothness={}", self.spec.light_smoothness);
        let _ = writeln!(s, "roles={}", roles.join(","));
        let _ = writeln!(s, "count={}", self.samples.len());
        for name in &self.samples {
            let _ = writeln!(s, "{name}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        let mut samples = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            match line.split_once('=') {
                Some((k, v)) => {
                    fields.insert(k.trim(), v.trim());
                }
                None => samples.push(line.to_string()),
            }
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| Error::format(format!("manifest lacks {k}")));
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::format(format!("manifest {k} is not a count"))) };
        let manifest = Manifest {
            task: get("task")?.parse()?,
            seed: get("seed")?.parse().map_err(|_| Error::format("manifest seed"))?,
            height: num("height")?,
            width: num("width")?,
            spec: GenSpec {
                num_regions: num("num_regions")?,
                light_smoothness: get("light_smoothness")?
                    .parse()
                    .map_err(|_| Error::format("manifest light_smoothness"))?,
            },
            samples,
        };
        if num("count")? != manifest.samples.len() {
            return Err(Error::format("manifest count does not match its entries"));
        }
        Ok(manifest)
    }
}

/// A sample as planes in teammate order (see [`Task::topology`]), in `[0, 1]`.
pub type Planes = Vec<Image>;

pub fn sample_dir_name(i: usize) -> String {
    format!("sample_{i:06}")
}

/// Generates a dataset for `task` and its planes in teammate order.
pub fn generate_task(task: Task, seed: u64, count: usize, h: usize, w: usize, spec: &GenSpec) -> Result<Vec<Planes>> {
    let rng = Rng::new(seed);
    Ok(match task {
        Task::Decompose => generate(&rng, count, h, w, spec)?
            .into_iter()
            .map(|s| vec![s.image, s.albedo, s.shading])
            .collect(),
        Task::Inpaint => generate_inpaint(&rng, count, h, w, spec)?
            .into_iter()
            .map(|s| vec![s.masked, s.mask, s.image])
            .collect(),
    })
}

/// Writes `sample_%06d/<plane>.tnsr` files plus the manifest under `dir`.
pub fn write_dataset(dir: &Path, task: Task, seed: u64, spec: &GenSpec, samples: &[Planes]) -> Result<Manifest> {
    let first = samples.first().ok_or_else(|| Error::param("empty dataset"))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let names = task.plane_names();
    let mut entries = Vec::with_capacity(samples.len());
    for (i, planes) in samples.iter().enumerate() {
        let sub = dir.join(sample_dir_name(i));
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for (name, plane) in names.iter().zip(planes) {
            plane.save(&sub.join(format!("{name}.tnsr")))?;
        }
        entries.push(sample_dir_name(i));
    }
    let manifest = Manifest {
        task,
        seed,
        height: first[0].height(),
        width: first[0].width(),
        spec: *spec,
        samples: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads a dataset written by [`write_dataset`]. Planes stay in `[0, 1]`.
pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<Planes>)> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = Manifest::parse(&text)?;
    let names = manifest.task.plane_names();
    let samples = manifest
        .samples
        .iter()
        .map(|entry| {
            names
                .iter()
                .map(|n| Image::load(&PathBuf::from(dir).join(entry).join(format!("{n}.tnsr"))))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}
