//! Exemplar-guided synthesis.
//!
//! The exemplar is split into one crop per organ class. Each crop gets its
//! own intensity and geometric transform and is pasted, in ascending class
//! order, onto a transformed background. Labels are regenerated from the
//! pasted crop masks, so image and label agree pixel for pixel.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{kernels, Tensor};
use crate::phantom::{self, config_hash, save_sample, DatasetManifest, Mask, Sample, Split};
use crate::rng::{self, Stream};

/// One draw of geometric and intensity parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub scale: f32,
    /// Counter-clockwise as displayed, in degrees.
    pub rotation: f32,
    pub blur_sigma: f32,
    pub intensity_scale: f32,
    pub intensity_shift: f32,
    /// `(dx, dy)` in pixels.
    pub translation: (f32, f32),
}

impl Default for TransformSpec {
    fn default() -> Self {
        Self::identity()
    }
}

impl TransformSpec {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: 0.0,
            blur_sigma: 0.0,
            intensity_scale: 1.0,
            intensity_shift: 0.0,
            translation: (0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !(self.intensity_scale > 0.0) || !(self.blur_sigma >= 0.0) {
            return Err(Error::Validation(format!(
                "transform spec out of range: {self:?}"
            )));
        }
        let finite = [
            self.scale,
            self.rotation,
            self.blur_sigma,
            self.intensity_scale,
            self.intensity_shift,
            self.translation.0,
            self.translation.1,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Validation("non-finite transform parameter".into()));
        }
        Ok(())
    }

    fn geometric_identity(&self) -> bool {
        self.scale == 1.0 && self.rotation == 0.0 && self.translation == (0.0, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformRanges {
    pub scale: (f32, f32),
    pub rotation: (f32, f32),
    pub blur_sigma: (f32, f32),
    pub intensity_scale: (f32, f32),
    pub intensity_shift: (f32, f32),
    /// Background translation bound as a fraction of the canvas side.
    pub background_translation: f32,
    /// Organ centres land at least this fraction of the side from the border.
    pub placement_margin: f32,
}

impl Default for TransformRanges {
    fn default() -> Self {
        Self {
            scale: (0.7, 1.3),
            rotation: (-30.0, 30.0),
            blur_sigma: (0.0, 1.5),
            intensity_scale: (0.8, 1.2),
            intensity_shift: (-0.1, 0.1),
            background_translation: 0.125,
            placement_margin: 0.15,
        }
    }
}

impl TransformRanges {
    pub fn validate(&self) -> Result<()> {
        let ordered = |(a, b): (f32, f32)| a <= b && a.is_finite() && b.is_finite();
        if !(self.scale.0 > 0.0)
            || !ordered(self.scale)
            || !ordered(self.rotation)
            || !(self.blur_sigma.0 >= 0.0)
            || !ordered(self.blur_sigma)
            || !(self.intensity_scale.0 > 0.0)
            || !ordered(self.intensity_scale)
            || !ordered(self.intensity_shift)
            || !(0.0..0.5).contains(&self.placement_margin)
            || !(self.background_translation >= 0.0)
        {
            return Err(Error::Config(format!("invalid transform ranges {self:?}")));
        }
        Ok(())
    }
}

fn draw(rng: &mut Stream, (lo, hi): (f32, f32)) -> f32 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Which transform families are active; the four axes of the strategy ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformStrategy {
    pub intensity_exemplar: bool,
    pub intensity_background: bool,
    pub geometric_exemplar: bool,
    pub geometric_background: bool,
}

impl Default for TransformStrategy {
    fn default() -> Self {
        Self::all_on()
    }
}

impl TransformStrategy {
    pub const fn new(int_e: bool, int_b: bool, geo_e: bool, geo_b: bool) -> Self {
        Self {
            intensity_exemplar: int_e,
            intensity_background: int_b,
            geometric_exemplar: geo_e,
            geometric_background: geo_b,
        }
    }

    pub const fn all_on() -> Self {
        Self::new(true, true, true, true)
    }

    pub const fn all_off() -> Self {
        Self::new(false, false, false, false)
    }

    /// Short label such as `Int.E+Geo.E`.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [
            (self.intensity_exemplar, "Int.E"),
            (self.intensity_background, "Int.B"),
            (self.geometric_exemplar, "Geo.E"),
            (self.geometric_background, "Geo.B"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, l)| *l)
        .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }

    pub fn active_axes(&self) -> usize {
        [
            self.intensity_exemplar,
            self.intensity_background,
            self.geometric_exemplar,
            self.geometric_background,
        ]
        .iter()
        .filter(|&&b| b)
        .count()
    }
}

/// The seven transform-strategy rows compared by the ablation runner.
pub const STRATEGY_ROWS: [TransformStrategy; 7] = [
    TransformStrategy::new(false, false, false, false),
    TransformStrategy::new(true, false, true, false),
    TransformStrategy::new(true, true, false, false),
    TransformStrategy::new(false, false, true, true),
    TransformStrategy::new(true, false, true, true),
    TransformStrategy::new(true, true, true, false),
    TransformStrategy::new(true, true, true, true),
];

/// One organ cut out of a canvas. Pixels outside `mask` are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct OrganCrop {
    pub category: u8,
    /// Canvas row/column of the crop's top-left pixel.
    pub top: usize,
    pub left: usize,
    pub canvas: (usize, usize),
    /// `[1, h, w]`.
    pub image: Tensor<f32>,
    /// Binary (0/1) mask of the crop.
    pub mask: Mask,
}

impl OrganCrop {
    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    pub fn area(&self) -> usize {
        self.mask.count(1)
    }

    fn center(&self) -> (f64, f64) {
        (
            self.top as f64 + (self.height() as f64 - 1.0) / 2.0,
            self.left as f64 + (self.width() as f64 - 1.0) / 2.0,
        )
    }
}

/// Cuts the pixels of class `k` out of `(image, mask)` into a tight crop.
pub fn extract_organ_from(image: &Tensor<f32>, mask: &Mask, k: u8) -> Result<OrganCrop> {
    if k == 0 {
        return Err(Error::InvalidCategory(0));
    }
    let (h, w) = (mask.height(), mask.width());
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) == k {
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }
    if y0 == usize::MAX {
        return Err(Error::MissingCategory(k));
    }
    let (ch, cw) = (y1 - y0 + 1, x1 - x0 + 1);
    let mut img = vec![0.0f32; ch * cw];
    let mut m = vec![0u8; ch * cw];
    for y in 0..ch {
        for x in 0..cw {
            if mask.get(y0 + y, x0 + x) == k {
                img[y * cw + x] = image.data()[(y0 + y) * w + x0 + x];
                m[y * cw + x] = 1;
            }
        }
    }
    Ok(OrganCrop {
        category: k,
        top: y0,
        left: x0,
        canvas: (h, w),
        image: Tensor::from_vec(&[1, ch, cw], img)?,
        mask: Mask::new(ch, cw, m)?,
    })
}

pub fn extract_organ(exemplar: &Sample, k: u8) -> Result<OrganCrop> {
    extract_organ_from(&exemplar.image, &exemplar.mask, k)
}

/// Inverse of the similarity `out = c + s R (src - c) + t` at one output point.
struct InverseWarp {
    cy: f64,
    cx: f64,
    cos: f64,
    sin: f64,
    inv_scale: f64,
    ty: f64,
    tx: f64,
}

impl InverseWarp {
    fn new(center: (f64, f64), t: &TransformSpec) -> Self {
        let theta = (t.rotation as f64).to_radians();
        Self {
            cy: center.0,
            cx: center.1,
            cos: theta.cos(),
            sin: theta.sin(),
            inv_scale: 1.0 / t.scale as f64,
            ty: t.translation.1 as f64,
            tx: t.translation.0 as f64,
        }
    }

    /// Source `(y, x)` for output `(y, x)`.
    fn source(&self, oy: f64, ox: f64) -> (f64, f64) {
        let u = (ox - self.cx - self.tx) * self.inv_scale;
        let v = (oy - self.cy - self.ty) * self.inv_scale;
        (
            self.cy + self.sin * u + self.cos * v,
            self.cx + self.cos * u - self.sin * v,
        )
    }

    fn forward(&self, sy: f64, sx: f64) -> (f64, f64) {
        let (dy, dx) = (sy - self.cy, sx - self.cx);
        let s = 1.0 / self.inv_scale;
        (
            self.cy + s * (-self.sin * dx + self.cos * dy) + self.ty,
            self.cx + s * (self.cos * dx + self.sin * dy) + self.tx,
        )
    }
}

/// Samples `(image, mask)` of size `h x w` at source point `(sy, sx)`.
/// The label comes from the nearest pixel; the intensity is the bilinear
/// average over the taps that carry a nonzero label.
fn sample_at(image: &[f32], mask: &[u8], h: usize, w: usize, sy: f64, sx: f64) -> (f32, u8) {
    let ny = sy.round();
    let nx = sx.round();
    if ny < 0.0 || nx < 0.0 || ny >= h as f64 || nx >= w as f64 {
        return (0.0, 0);
    }
    let label = mask[ny as usize * w + nx as usize];
    let y0 = sy.floor();
    let x0 = sx.floor();
    let (fy, fx) = (sy - y0, sx - x0);
    let mut acc = 0.0f64;
    let mut wsum = 0.0f64;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let (yy, xx) = (y0 + dy, x0 + dx);
            let wt = wy * wx;
            if wt <= 0.0 || yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
                continue;
            }
            let i = yy as usize * w + xx as usize;
            if mask[i] == label {
                acc += wt * image[i] as f64;
                wsum += wt;
            }
        }
    }
    let value = if wsum > 0.0 {
        (acc / wsum) as f32
    } else {
        image[ny as usize * w + nx as usize]
    };
    (value, label)
}

/// Geometric warp applied to an image and its label map with the same transform.
pub trait GeometricWarp: Sized {
    fn apply_geometric(&self, t: &TransformSpec) -> Result<Self>;
}

impl GeometricWarp for OrganCrop {
    /// Rotates and scales about the crop centre, translates, then clips to
    /// the canvas. Fails with [`Error::OffCanvas`] if nothing is left.
    fn apply_geometric(&self, t: &TransformSpec) -> Result<Self> {
        t.validate()?;
        if t.geometric_identity() {
            return Ok(self.clone());
        }
        let warp = InverseWarp::new(self.center(), t);
        let (h, w) = (self.height(), self.width());
        let (ch, cw) = self.canvas;
        let corners = [
            (-0.5, -0.5),
            (-0.5, w as f64 - 0.5),
            (h as f64 - 0.5, -0.5),
            (h as f64 - 0.5, w as f64 - 0.5),
        ];
        let (mut ymin, mut ymax, mut xmin, mut xmax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for (dy, dx) in corners {
            let (y, x) = warp.forward(self.top as f64 + dy, self.left as f64 + dx);
            ymin = ymin.min(y);
            ymax = ymax.max(y);
            xmin = xmin.min(x);
            xmax = xmax.max(x);
        }
        let y0 = (ymin.floor() - 1.0).max(0.0) as usize;
        let x0 = (xmin.floor() - 1.0).max(0.0) as usize;
        let y1 = ((ymax.ceil() + 1.0).min(ch as f64 - 1.0)).max(-1.0);
        let x1 = ((xmax.ceil() + 1.0).min(cw as f64 - 1.0)).max(-1.0);
        if y1 < y0 as f64 || x1 < x0 as f64 {
            return Err(Error::OffCanvas);
        }
        let (y1, x1) = (y1 as usize, x1 as usize);
        let mut hits = Vec::new();
        for oy in y0..=y1 {
            for ox in x0..=x1 {
                let (sy, sx) = warp.source(oy as f64, ox as f64);
                let (v, l) = sample_at(
                    self.image.data(),
                    self.mask.data(),
                    h,
                    w,
                    sy - self.top as f64,
                    sx - self.left as f64,
                );
                if l != 0 {
                    hits.push((oy, ox, v));
                }
            }
        }
        if hits.is_empty() {
            return Err(Error::OffCanvas);
        }
        let ty = hits.iter().map(|h| h.0).min().unwrap();
        let by = hits.iter().map(|h| h.0).max().unwrap();
        let lx = hits.iter().map(|h| h.1).min().unwrap();
        let rx = hits.iter().map(|h| h.1).max().unwrap();
        let (nh, nw) = (by - ty + 1, rx - lx + 1);
        let mut img = vec![0.0f32; nh * nw];
        let mut m = vec![0u8; nh * nw];
        for (oy, ox, v) in hits {
            img[(oy - ty) * nw + ox - lx] = v;
            m[(oy - ty) * nw + ox - lx] = 1;
        }
        Ok(OrganCrop {
            category: self.category,
            top: ty,
            left: lx,
            canvas: self.canvas,
            image: Tensor::from_vec(&[1, nh, nw], img)?,
            mask: Mask::new(nh, nw, m)?,
        })
    }
}

impl GeometricWarp for Sample {
    /// Warps the whole canvas about its centre; uncovered pixels become zero.
    fn apply_geometric(&self, t: &TransformSpec) -> Result<Self> {
        warp_background(self, t, BackgroundFill::Zero)
    }
}

/// What a background warp shows where the source canvas does not reach.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundFill {
    #[default]
    Zero,
    /// Mirror the canvas about its edge pixels.
    Reflect,
}

fn reflect(c: f64, n: usize) -> f64 {
    if n < 2 {
        return 0.0;
    }
    let period = 2.0 * (n as f64 - 1.0);
    let r = c.rem_euclid(period);
    if r > n as f64 - 1.0 {
        period - r
    } else {
        r
    }
}

/// Warps a whole canvas about its centre.
pub fn warp_background(sample: &Sample, t: &TransformSpec, fill: BackgroundFill) -> Result<Sample> {
    t.validate()?;
    if t.geometric_identity() {
        return Ok(sample.clone());
    }
    let (h, w) = (sample.height(), sample.width());
    let warp = InverseWarp::new(((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0), t);
    // Canvas pixels all count as valid taps for the image; labels are nearest.
    let ones = vec![1u8; h * w];
    let mut img = vec![0.0f32; h * w];
    let mut m = vec![0u8; h * w];
    for oy in 0..h {
        for ox in 0..w {
            let (mut sy, mut sx) = warp.source(oy as f64, ox as f64);
            if fill == BackgroundFill::Reflect {
                sy = reflect(sy, h);
                sx = reflect(sx, w);
            }
            let (v, inside) = sample_at(sample.image.data(), &ones, h, w, sy, sx);
            if inside != 0 {
                img[oy * w + ox] = v;
                m[oy * w + ox] = sample.mask.get(sy.round() as usize, sx.round() as usize);
            }
        }
    }
    Ok(Sample {
        id: sample.id.clone(),
        split: sample.split,
        image: Tensor::from_vec(&[1, h, w], img)?,
        mask: Mask::new(h, w, m)?,
    })
}

pub fn apply_geometric<W: GeometricWarp>(item: &W, t: &TransformSpec) -> Result<W> {
    item.apply_geometric(t)
}

/// Separable Gaussian blur with edge replication on a `[C, H, W]` image.
pub fn gaussian_blur(image: &Tensor<f32>, sigma: f32) -> Result<Tensor<f32>> {
    let (c, h, w) = image.chw()?;
    if sigma <= 0.0 {
        return Ok(image.clone());
    }
    Tensor::from_vec(
        image.dims(),
        kernels::gaussian_blur(image.data(), c, h, w, sigma as f64),
    )
}

/// `clamp(blur(image) * intensity_scale + intensity_shift, 0, 1)`.
pub fn apply_intensity(image: &Tensor<f32>, t: &TransformSpec) -> Result<Tensor<f32>> {
    t.validate()?;
    let blurred = gaussian_blur(image, t.blur_sigma)?;
    if t.intensity_scale == 1.0 && t.intensity_shift == 0.0 {
        return Ok(blurred);
    }
    let data = blurred
        .data()
        .iter()
        .map(|&v| (v * t.intensity_scale + t.intensity_shift).clamp(0.0, 1.0))
        .collect();
    Tensor::from_vec(image.dims(), data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source", content = "id")]
pub enum BackgroundSource {
    Black,
    Phantom(String),
}

/// One logged draw, in application order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "target")]
pub enum TransformLogEntry {
    Background {
        #[serde(flatten)]
        source: BackgroundSource,
        spec: TransformSpec,
    },
    Organ {
        category: u8,
        attempts: usize,
        spec: TransformSpec,
    },
}

pub type TransformLog = Vec<TransformLogEntry>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EsmConfig {
    /// Number of synthetic samples.
    pub count: usize,
    pub strategy: TransformStrategy,
    pub ranges: TransformRanges,
    pub retries: usize,
    /// Probability of a black canvas instead of an organ-free phantom.
    pub black_fraction: f64,
    pub background_fill: BackgroundFill,
}

impl Default for EsmConfig {
    fn default() -> Self {
        Self {
            count: 200,
            strategy: TransformStrategy::all_on(),
            ranges: TransformRanges::default(),
            retries: 10,
            black_fraction: 0.5,
            background_fill: BackgroundFill::Zero,
        }
    }
}

impl EsmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("synthetic count must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.black_fraction) {
            return Err(Error::Config("black_fraction outside [0, 1]".into()));
        }
        self.ranges.validate()
    }
}

fn draw_intensity(rng: &mut Stream, r: &TransformRanges, t: &mut TransformSpec) {
    t.blur_sigma = draw(rng, r.blur_sigma);
    t.intensity_scale = draw(rng, r.intensity_scale);
    t.intensity_shift = draw(rng, r.intensity_shift);
}

fn draw_organ_spec(rng: &mut Stream, cfg: &EsmConfig, crop: &OrganCrop) -> TransformSpec {
    let mut t = TransformSpec::identity();
    if cfg.strategy.intensity_exemplar {
        draw_intensity(rng, &cfg.ranges, &mut t);
    }
    if cfg.strategy.geometric_exemplar {
        t.scale = draw(rng, cfg.ranges.scale);
        t.rotation = draw(rng, cfg.ranges.rotation);
        let (ch, cw) = crop.canvas;
        let m = cfg.ranges.placement_margin;
        let ty = rng.random_range(m * ch as f32..=(1.0 - m) * (ch as f32 - 1.0));
        let tx = rng.random_range(m * cw as f32..=(1.0 - m) * (cw as f32 - 1.0));
        let (cy, cx) = crop.center();
        t.translation = (tx - cx as f32, ty - cy as f32);
    }
    t
}

fn draw_background_spec(rng: &mut Stream, cfg: &EsmConfig, side: usize) -> TransformSpec {
    let mut t = TransformSpec::identity();
    if cfg.strategy.intensity_background {
        draw_intensity(rng, &cfg.ranges, &mut t);
    }
    if cfg.strategy.geometric_background {
        t.scale = draw(rng, cfg.ranges.scale);
        t.rotation = draw(rng, cfg.ranges.rotation);
        let b = cfg.ranges.background_translation * side as f32;
        t.translation = (draw(rng, (-b, b)), draw(rng, (-b, b)));
    }
    t
}

pub fn black_canvas(height: usize, width: usize) -> Sample {
    Sample {
        id: "black".into(),
        split: Split::Background,
        image: Tensor::zeros(&[1, height, width]),
        mask: Mask::zeros(height, width),
    }
}

/// Writes `organ` onto `(image, mask)`; later pastes overwrite earlier ones.
pub fn paste(image: &mut Tensor<f32>, mask: &mut Mask, organ: &OrganCrop) {
    let w = mask.width();
    for y in 0..organ.height() {
        for x in 0..organ.width() {
            if organ.mask.get(y, x) != 0 {
                let (cy, cx) = (organ.top + y, organ.left + x);
                image.data_mut()[cy * w + cx] = organ.image.data()[y * organ.width() + x];
                mask.set(cy, cx, organ.category);
            }
        }
    }
}

/// Transformed background and transformed organs for logged specs.
pub fn replay_parts(
    exemplar: &Sample,
    background: &Sample,
    background_spec: &TransformSpec,
    fill: BackgroundFill,
    organ_specs: &[(u8, TransformSpec)],
) -> Result<(Sample, Vec<OrganCrop>)> {
    let bg = apply_intensity(&background.image, background_spec)?;
    let bg = warp_background(
        &Sample {
            image: bg,
            ..background.clone()
        },
        background_spec,
        fill,
    )?;
    let organs = organ_specs
        .iter()
        .map(|(k, spec)| {
            let toned = apply_intensity(&exemplar.image, spec)?;
            extract_organ_from(&toned, &exemplar.mask, *k)?.apply_geometric(spec)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((bg, organs))
}

/// One synthetic sample from the exemplar and a background.
pub fn synthesize_sample(
    exemplar: &Sample,
    background: &Sample,
    source: BackgroundSource,
    cfg: &EsmConfig,
    rng: &mut Stream,
) -> Result<(Sample, TransformLog)> {
    if background.mask.data().iter().any(|&v| v != 0) {
        return Err(Error::Contract(
            "background sample contains foreground".into(),
        ));
    }
    let (h, w) = (exemplar.height(), exemplar.width());
    let k_max = exemplar.mask.data().iter().copied().max().unwrap_or(0);
    let mut log = Vec::new();
    let bg_spec = draw_background_spec(rng, cfg, h.max(w));
    let bg_toned = Sample {
        image: apply_intensity(&background.image, &bg_spec)?,
        ..background.clone()
    };
    let bg = warp_background(&bg_toned, &bg_spec, cfg.background_fill)?;
    log.push(TransformLogEntry::Background {
        source,
        spec: bg_spec,
    });
    let mut image = bg.image;
    let mut mask = Mask::zeros(h, w);
    for k in 1..=k_max {
        let base = extract_organ(exemplar, k)?;
        let mut placed = None;
        for attempt in 1..=cfg.retries.max(1) {
            let spec = draw_organ_spec(rng, cfg, &base);
            let toned = apply_intensity(&exemplar.image, &spec)?;
            let crop = extract_organ_from(&toned, &exemplar.mask, k)?;
            match crop.apply_geometric(&spec) {
                Ok(organ) => {
                    placed = Some((organ, spec, attempt));
                    break;
                }
                Err(Error::OffCanvas) => continue,
                Err(e) => return Err(e),
            }
        }
        let (organ, spec, attempts) = placed.ok_or(Error::OffCanvas)?;
        paste(&mut image, &mut mask, &organ);
        log.push(TransformLogEntry::Organ {
            category: k,
            attempts,
            spec,
        });
    }
    Ok((
        Sample {
            id: String::new(),
            split: Split::Synthetic,
            image,
            mask,
        },
        log,
    ))
}

/// A synthesized sample and the draws that produced it.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub sample: Sample,
    pub log: TransformLog,
}

/// Builds `cfg.count` synthetic samples in memory. Sample `b` uses its own
/// stream derived from `(seed, b)`.
pub fn synthesize_dataset(
    exemplar: &Sample,
    backgrounds: &[Sample],
    cfg: &EsmConfig,
    seed: u64,
) -> Result<Vec<SyntheticSample>> {
    cfg.validate()?;
    let black = black_canvas(exemplar.height(), exemplar.width());
    (0..cfg.count)
        .map(|b| {
            let mut rng = rng::stream(seed, &[rng::tag("esm"), b as u64]);
            let use_black = backgrounds.is_empty() || rng.random_bool(cfg.black_fraction);
            let (bg, source) = if use_black {
                (&black, BackgroundSource::Black)
            } else {
                let pick = &backgrounds[rng.random_range(0..backgrounds.len())];
                (pick, BackgroundSource::Phantom(pick.id.clone()))
            };
            let (mut sample, log) = synthesize_sample(exemplar, bg, source, cfg, &mut rng)
                .map_err(|e| Error::Synthesis {
                    index: b,
                    source: Box::new(e),
                })?;
            sample.id = format!("synthetic-{b:04}");
            Ok(SyntheticSample { sample, log })
        })
        .collect()
}

/// Writes the synthetic split (with one `<id>.transforms.json` per sample)
/// and records it in the manifest.
pub fn build_synthetic_dataset(
    manifest: &mut DatasetManifest,
    cfg: &EsmConfig,
    seed: u64,
) -> Result<()> {
    let exemplar = manifest.load_exemplar()?;
    let backgrounds = manifest.load_split(Split::Background)?;
    let samples = synthesize_dataset(&exemplar, &backgrounds, cfg, seed)?;
    let dir = manifest.split_dir(Split::Synthetic);
    let mut ids = Vec::with_capacity(samples.len());
    for s in &samples {
        save_sample(&s.sample, manifest.num_classes, &dir)?;
        phantom::write_json(
            &dir.join(format!("{}.transforms.json", s.sample.id)),
            &s.log,
        )?;
        ids.push(s.sample.id.clone());
    }
    manifest.synthetic = ids;
    manifest.synthetic_config_hash = Some(config_hash(&(cfg, seed)));
    manifest.save()
}

pub fn load_transform_log(dir: &Path, id: &str) -> Result<TransformLog> {
    phantom::read_json(&dir.join(format!("{id}.transforms.json")))
}
