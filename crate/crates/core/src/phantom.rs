//! Procedural multi-organ phantoms with exact ground truth, and dataset I/O.
//!
//! Every image shows an elliptical "body" on a dark surround. Organs are
//! superellipses with a sinusoidal boundary perturbation, one class-specific
//! base contrast (at most 0.15 from the local background) and texture.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{elst, kernels, Scalar, Tensor};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Exemplar,
    Unlabeled,
    Background,
    Test,
    Synthetic,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Exemplar => "exemplar",
            Split::Unlabeled => "unlabeled",
            Split::Background => "background",
            Split::Test => "test",
            Split::Synthetic => "synthetic",
        }
    }
}

/// Per-pixel class indices, `0` being background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Shape {
                op: "mask",
                detail: format!("{height}x{width} with {} values", data.len()),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![0; height * width]).expect("positive extents")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self, k: u8) -> usize {
        self.data.iter().filter(|&&v| v == k).count()
    }

    pub fn contains(&self, k: u8) -> bool {
        self.data.contains(&k)
    }

    pub fn classes(&self) -> BTreeSet<u8> {
        self.data.iter().copied().collect()
    }

    pub fn indicator(&self, k: u8) -> Vec<bool> {
        self.data.iter().map(|&v| v == k).collect()
    }

    /// Rejects any value above `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().position(|&v| v as usize > num_classes) {
            Some(i) => Err(Error::Validation(format!(
                "mask value {} at pixel {i} exceeds {num_classes} classes",
                self.data[i]
            ))),
            None => Ok(()),
        }
    }

    /// `[channels, H, W]` one-hot encoding.
    pub fn one_hot<T: Scalar>(&self, channels: usize) -> Result<Tensor<T>> {
        let hw = self.data.len();
        let mut out = vec![T::zero(); channels * hw];
        for (i, &v) in self.data.iter().enumerate() {
            if v as usize >= channels {
                return Err(Error::InvalidCategory(v));
            }
            out[v as usize * hw + i] = T::one();
        }
        Tensor::from_vec(&[channels, self.height, self.width], out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub split: Split,
    /// `[1, H, W]`, intensities in `[0, 1]`.
    pub image: Tensor<f32>,
    pub mask: Mask,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.image.dims() != [1, self.height(), self.width()] {
            return Err(Error::Validation(format!(
                "image dims {:?} do not match mask {}x{}",
                self.image.dims(),
                self.height(),
                self.width()
            )));
        }
        if let Some(v) = self.image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("intensity {v} outside [0, 1]")));
        }
        self.mask.validate(num_classes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub num_classes: usize,
    pub size: usize,
    pub n_unlabeled: usize,
    pub n_background: usize,
    pub n_test: usize,
    /// Probability that a given class appears in a non-exemplar sample.
    pub presence: f64,
    /// Per-image noise level is drawn from `noise_sigma * [0.6, 1.6]`.
    pub noise_sigma: f64,
    /// Per-organ size factor range.
    pub organ_scale: (f64, f64),
    /// Per-image multiplicative gain range.
    pub gain: (f64, f64),
    /// Per-image factor on organ-to-background offsets; offsets stay within 0.15.
    pub contrast: (f64, f64),
    /// Per-image blur sigma is drawn from `[0, blur_max]`.
    pub blur_max: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            size: 64,
            n_unlabeled: 60,
            n_background: 10,
            n_test: 20,
            presence: 0.7,
            noise_sigma: 0.025,
            organ_scale: (0.75, 1.3),
            gain: (0.8, 1.2),
            contrast: (0.7, 1.15),
            blur_max: 1.0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "num_classes {} outside [2, 8]",
                self.num_classes
            )));
        }
        if self.size != 64 && self.size != 128 {
            return Err(Error::Config(format!(
                "size {} must be 64 or 128",
                self.size
            )));
        }
        if !(self.presence > 0.0 && self.presence <= 1.0) {
            return Err(Error::Config(format!(
                "presence {} outside (0, 1]",
                self.presence
            )));
        }
        if !(self.noise_sigma >= 0.0) || !(self.blur_max >= 0.0) {
            return Err(Error::Config(
                "noise_sigma and blur_max must be non-negative".into(),
            ));
        }
        for (name, (lo, hi)) in [
            ("organ_scale", self.organ_scale),
            ("gain", self.gain),
            ("contrast", self.contrast),
        ] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} range ({lo}, {hi}) is not a positive interval"
                )));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Short SHA-256 digest of a value's canonical JSON form.
pub fn config_hash<S: Serialize>(value: &S) -> String {
    let json = serde_json::to_vec(value).expect("serialisable config");
    hex::encode(&Sha256::digest(&json)[..8])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(skip)]
    pub root: PathBuf,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub exemplar: Vec<String>,
    pub unlabeled: Vec<String>,
    pub background: Vec<String>,
    pub test: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub synthetic: Vec<String>,
    pub seed: u64,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic_config_hash: Option<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Exemplar => &self.exemplar,
            Split::Unlabeled => &self.unlabeled,
            Split::Background => &self.background,
            Split::Test => &self.test,
            Split::Synthetic => &self.synthetic,
        }
    }

    pub fn split_dir(&self, split: Split) -> PathBuf {
        self.root.join(split.as_str())
    }

    pub fn validate(&self) -> Result<()> {
        if self.exemplar.len() != 1 {
            return Err(Error::Validation(format!(
                "exemplar split must hold exactly one id, found {}",
                self.exemplar.len()
            )));
        }
        Ok(())
    }

    pub fn save(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        write_json(&path, self)
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let mut m: DatasetManifest = read_json(&path)?;
        m.root = root.to_path_buf();
        m.validate()?;
        Ok(m)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        let dir = self.split_dir(split);
        self.ids(split)
            .iter()
            .map(|id| {
                let s = load_sample(&dir, id)?;
                s.validate(self.num_classes)?;
                Ok(s)
            })
            .collect()
    }

    /// Loads the exemplar and checks that it shows every class.
    pub fn load_exemplar(&self) -> Result<Sample> {
        let ex = self
            .load_split(Split::Exemplar)?
            .pop()
            .ok_or_else(|| Error::Validation("no exemplar".into()))?;
        for k in 1..=self.num_classes as u8 {
            if !ex.mask.contains(k) {
                return Err(Error::MissingCategory(k));
            }
        }
        Ok(ex)
    }
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::json(path, e))?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    id: String,
    split: Split,
    num_classes: usize,
    height: usize,
    width: usize,
}

/// Writes `<dir>/<id>.img.elst`, `<id>.mask.elst` and `<id>.json`.
pub fn save_sample(sample: &Sample, num_classes: usize, dir: &Path) -> Result<()> {
    sample.validate(num_classes)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    elst::write_tensor(&dir.join(format!("{}.img.elst", sample.id)), &sample.image)?;
    elst::write_file(
        &dir.join(format!("{}.mask.elst", sample.id)),
        &[sample.height(), sample.width()],
        sample.mask.data(),
    )?;
    let side = Sidecar {
        id: sample.id.clone(),
        split: sample.split,
        num_classes,
        height: sample.height(),
        width: sample.width(),
    };
    write_json(&dir.join(format!("{}.json", sample.id)), &side)
}

pub fn load_sample(dir: &Path, id: &str) -> Result<Sample> {
    let side: Sidecar = read_json(&dir.join(format!("{id}.json")))?;
    if side.id != id {
        return Err(Error::Validation(format!(
            "sidecar id {} does not match {id}",
            side.id
        )));
    }
    let image = elst::read_tensor(&dir.join(format!("{id}.img.elst")))?;
    let (mdims, mdata) = elst::read_file::<u8>(&dir.join(format!("{id}.mask.elst")))?;
    if mdims != [side.height, side.width] {
        return Err(Error::Validation(format!(
            "mask dims {mdims:?} disagree with sidecar {}x{}",
            side.height, side.width
        )));
    }
    let sample = Sample {
        id: side.id,
        split: side.split,
        image,
        mask: Mask::new(side.height, side.width, mdata)?,
    };
    sample.validate(side.num_classes)?;
    Ok(sample)
}

#[derive(Debug, Clone, Copy)]
enum Texture {
    Smooth,
    Stripes,
    Speckle,
    Radial,
}

#[derive(Debug, Clone, Copy)]
struct OrganClass {
    offset: f64,
    semi_axes: (f64, f64),
    exponent: f64,
    texture: Texture,
}

fn organ_class(k: u8) -> OrganClass {
    let (offset, semi_axes, exponent, texture) = match k {
        1 => (0.13, (10.0, 7.0), 2.0, Texture::Smooth),
        2 => (-0.12, (8.0, 4.5), 2.6, Texture::Stripes),
        3 => (0.07, (5.5, 5.5), 2.0, Texture::Speckle),
        4 => (-0.07, (9.0, 4.0), 3.0, Texture::Radial),
        5 => (0.15, (5.0, 4.0), 1.6, Texture::Stripes),
        6 => (-0.14, (7.0, 6.0), 2.2, Texture::Speckle),
        7 => (0.10, (6.0, 3.5), 2.4, Texture::Smooth),
        _ => (-0.10, (4.5, 4.5), 1.8, Texture::Radial),
    };
    OrganClass {
        offset,
        semi_axes,
        exponent,
        texture,
    }
}

fn organ_scale(size: usize) -> f64 {
    if size >= 128 {
        1.5
    } else {
        1.0
    }
}

/// Rejects class counts whose nominal organ area exceeds a sixth of the canvas.
fn check_fit(cfg: &PhantomConfig) -> Result<()> {
    let s = organ_scale(cfg.size) * cfg.organ_scale.0.max(1.0);
    let area: f64 = (1..=cfg.num_classes as u8)
        .map(|k| {
            let c = organ_class(k);
            PI * c.semi_axes.0 * c.semi_axes.1 * s * s
        })
        .sum();
    let budget = (cfg.size * cfg.size) as f64 / 6.0;
    if area > budget {
        return Err(Error::Generation(format!(
            "{} organ classes need ~{area:.0} px but a {}x{} canvas allows {budget:.0}",
            cfg.num_classes, cfg.size, cfg.size
        )));
    }
    Ok(())
}

struct Body {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Body {
    fn inside(&self, y: f64, x: f64, shrink: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let (ru, rv) = ((self.rx - shrink).max(1.0), (self.ry - shrink).max(1.0));
        (u / ru).powi(2) + (v / rv).powi(2) <= 1.0
    }
}

struct OrganShape {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    exponent: f64,
    angle: f64,
    wobble: f64,
    lobes: f64,
    phase: f64,
}

impl OrganShape {
    fn inside(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let r = 1.0 + self.wobble * (self.lobes * v.atan2(u) + self.phase).sin();
        (u.abs() / self.a).powf(self.exponent) + (v.abs() / self.b).powf(self.exponent)
            <= r.powf(self.exponent)
    }

    fn radius(&self) -> f64 {
        self.a.max(self.b) * (1.0 + self.wobble) + 1.0
    }
}

fn draw(rng: &mut Stream, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn render(rng: &mut Stream, cfg: &PhantomConfig, classes: &[u8]) -> Result<(Vec<f32>, Mask)> {
    let n = cfg.size;
    let nf = n as f64;
    let s = organ_scale(n);
    let bg_mean = rng.random_range(0.35..0.55);
    let gain = draw(rng, cfg.gain);
    let contrast = draw(rng, cfg.contrast);
    let blur = rng.random_range(0.0..=cfg.blur_max);
    let noise = cfg.noise_sigma * rng.random_range(0.6..1.6);
    let body = Body {
        cy: nf / 2.0 + rng.random_range(-0.05..0.05) * nf,
        cx: nf / 2.0 + rng.random_range(-0.05..0.05) * nf,
        ry: rng.random_range(0.33..0.42) * nf,
        rx: rng.random_range(0.40..0.47) * nf,
        angle: rng.random_range(-0.3..0.3),
    };
    let ramp_amp = rng.random_range(0.0..0.05);
    let ramp_dir: f64 = rng.random_range(0.0..2.0 * PI);
    let wave_amp = rng.random_range(0.0..0.03);
    let wave_freq = rng.random_range(0.05..0.12);
    let wave_dir: f64 = rng.random_range(0.0..2.0 * PI);
    let wave_phase = rng.random_range(0.0..2.0 * PI);

    let mut base = vec![0.0f64; n * n];
    for y in 0..n {
        for x in 0..n {
            let (yf, xf) = (y as f64, x as f64);
            base[y * n + x] = if body.inside(yf, xf, 0.0) {
                let t = ((xf - nf / 2.0) * ramp_dir.cos() + (yf - nf / 2.0) * ramp_dir.sin()) / nf;
                let w =
                    (wave_freq * (xf * wave_dir.cos() + yf * wave_dir.sin()) + wave_phase).sin();
                bg_mean + ramp_amp * t + wave_amp * w
            } else {
                bg_mean * 0.3
            };
        }
    }

    let mut mask = Mask::zeros(n, n);
    let mut image = base.clone();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for &k in classes {
        let class = organ_class(k);
        let scale = draw(rng, cfg.organ_scale) * s;
        let mut shape = OrganShape {
            cy: 0.0,
            cx: 0.0,
            a: class.semi_axes.0 * scale,
            b: class.semi_axes.1 * scale,
            exponent: class.exponent,
            angle: rng.random_range(0.0..PI),
            wobble: rng.random_range(0.0..0.12),
            lobes: [2.0, 3.0, 4.0][rng.random_range(0..3)],
            phase: rng.random_range(0.0..2.0 * PI),
        };
        let mut pixels = None;
        let mut radius = shape.radius();
        // a crowded or small body shrinks the organ rather than failing
        'shrink: for _ in 0..5 {
            radius = shape.radius();
            for _ in 0..300 {
                shape.cy = rng.random_range(radius..nf - radius);
                shape.cx = rng.random_range(radius..nf - radius);
                if !body.inside(shape.cy, shape.cx, 2.0) {
                    continue;
                }
                let y0 = (shape.cy - radius).floor().max(0.0) as usize;
                let y1 = ((shape.cy + radius).ceil() as usize).min(n - 1);
                let x0 = (shape.cx - radius).floor().max(0.0) as usize;
                let x1 = ((shape.cx + radius).ceil() as usize).min(n - 1);
                let mut px = Vec::new();
                let mut clash = false;
                'scan: for y in y0..=y1 {
                    for x in x0..=x1 {
                        if shape.inside(y as f64, x as f64) {
                            if !body.inside(y as f64, x as f64, 1.0) {
                                clash = true;
                                break 'scan;
                            }
                            // keep a one-pixel gap to previously placed organs
                            for (dy, dx) in [(0i64, 0i64), (-1, 0), (1, 0), (0, -1), (0, 1)] {
                                let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                                if yy >= 0
                                    && xx >= 0
                                    && (yy as usize) < n
                                    && (xx as usize) < n
                                    && mask.get(yy as usize, xx as usize) != 0
                                {
                                    clash = true;
                                    break 'scan;
                                }
                            }
                            px.push((y, x));
                        }
                    }
                }
                if !clash && !px.is_empty() {
                    pixels = Some(px);
                    break 'shrink;
                }
            }
            shape.a *= 0.85;
            shape.b *= 0.85;
        }
        let pixels = pixels.ok_or_else(|| {
            Error::Generation(format!("could not place organ {k} on a {n}x{n} canvas"))
        })?;
        let cap = 0.15 / gain;
        let level = ((class.offset + rng.random_range(-0.02..0.02)) * contrast).clamp(-cap, cap);
        let stripe_dir: f64 = rng.random_range(0.0..PI);
        for (y, x) in pixels {
            let (yf, xf) = (y as f64, x as f64);
            let texture = match class.texture {
                Texture::Smooth => 0.0,
                Texture::Stripes => {
                    0.035 * (0.9 * (xf * stripe_dir.cos() + yf * stripe_dir.sin())).sin()
                }
                Texture::Speckle => 0.04 * normal.sample(rng),
                Texture::Radial => {
                    let d = ((yf - shape.cy).powi(2) + (xf - shape.cx).powi(2)).sqrt() / radius;
                    0.05 * (d - 0.5)
                }
            };
            image[y * n + x] = base[y * n + x] + level + texture;
            mask.set(y, x, k);
        }
    }
    let image = kernels::gaussian_blur(&image, 1, n, n, blur);
    let pixels = image
        .iter()
        .map(|&v| (v * gain + noise * normal.sample(rng)).clamp(0.0, 1.0) as f32)
        .collect();
    Ok((pixels, mask))
}

fn make_sample(seed: u64, cfg: &PhantomConfig, split: Split, index: usize) -> Result<Sample> {
    let mut rng = rng::stream(
        seed,
        &[rng::tag("phantom"), rng::tag(split.as_str()), index as u64],
    );
    let classes: Vec<u8> = match split {
        Split::Exemplar => (1..=cfg.num_classes as u8).collect(),
        Split::Background => Vec::new(),
        _ => (1..=cfg.num_classes as u8)
            .filter(|_| rng.random_bool(cfg.presence))
            .collect(),
    };
    let (pixels, mask) = render(&mut rng, cfg, &classes)?;
    Ok(Sample {
        id: format!("{}-{index:04}", split.as_str()),
        split,
        image: Tensor::from_vec(&[1, cfg.size, cfg.size], pixels)?,
        mask,
    })
}

/// An in-memory generated dataset.
#[derive(Debug, Clone)]
pub struct PhantomDataset {
    pub manifest: DatasetManifest,
    pub exemplar: Sample,
    pub unlabeled: Vec<Sample>,
    pub background: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl PhantomDataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        match split {
            Split::Exemplar => vec![&self.exemplar],
            Split::Unlabeled => self.unlabeled.iter().collect(),
            Split::Background => self.background.iter().collect(),
            Split::Test => self.test.iter().collect(),
            Split::Synthetic => Vec::new(),
        }
    }
}

pub fn generate_phantom_samples(seed: u64, cfg: &PhantomConfig) -> Result<PhantomDataset> {
    cfg.validate()?;
    check_fit(cfg)?;
    let gen = |split, count| {
        (0..count)
            .map(|i| make_sample(seed, cfg, split, i))
            .collect::<Result<Vec<_>>>()
    };
    let exemplar = make_sample(seed, cfg, Split::Exemplar, 0)?;
    let unlabeled = gen(Split::Unlabeled, cfg.n_unlabeled)?;
    let background = gen(Split::Background, cfg.n_background)?;
    let test = gen(Split::Test, cfg.n_test)?;
    let ids = |v: &[Sample]| v.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
    let manifest = DatasetManifest {
        root: PathBuf::new(),
        num_classes: cfg.num_classes,
        height: cfg.size,
        width: cfg.size,
        exemplar: vec![exemplar.id.clone()],
        unlabeled: ids(&unlabeled),
        background: ids(&background),
        test: ids(&test),
        synthetic: Vec::new(),
        seed,
        config_hash: cfg.hash(),
        synthetic_config_hash: None,
    };
    Ok(PhantomDataset {
        manifest,
        exemplar,
        unlabeled,
        background,
        test,
    })
}

/// Generates the dataset and writes it under `root`.
pub fn generate_phantom_dataset(
    seed: u64,
    cfg: &PhantomConfig,
    root: &Path,
) -> Result<DatasetManifest> {
    let mut ds = generate_phantom_samples(seed, cfg)?;
    ds.manifest.root = root.to_path_buf();
    for split in [
        Split::Exemplar,
        Split::Unlabeled,
        Split::Background,
        Split::Test,
    ] {
        let dir = ds.manifest.split_dir(split);
        for s in ds.split(split) {
            save_sample(s, cfg.num_classes, &dir)?;
        }
    }
    ds.manifest.save()?;
    Ok(ds.manifest)
}
