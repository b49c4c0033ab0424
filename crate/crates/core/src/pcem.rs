//! Pixel prototypes and the prototype contrastive loss.
//!
//! A prototype is the mean embedding column over the pixels of one class in
//! one image, with the class map resized bilinearly to the embedding grid.
//! The loss pulls each prototype towards a same-class prototype from another
//! image and away from other-class prototypes of the other images.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::{Graph, Scalar, Var};
use crate::phantom::Mask;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndicatorThreshold {
    /// Any nonzero resized value selects the pixel.
    Positive,
    /// Resized value of at least one half.
    Half,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcemConfig {
    pub tau: f64,
    /// L2-normalise prototypes before taking dot products.
    pub normalize: bool,
    pub threshold: IndicatorThreshold,
    pub include_background: bool,
}

impl Default for PcemConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            normalize: true,
            threshold: IndicatorThreshold::Positive,
            include_background: true,
        }
    }
}

impl PcemConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prototype {
    pub category: u8,
    pub image: usize,
    /// `[c]` on the graph; `None` when the class has no pixels.
    pub vector: Option<Var>,
    pub pixel_count: usize,
}

impl Prototype {
    pub fn present(&self) -> bool {
        self.pixel_count > 0
    }
}

/// Per-class pixel selections on the `h x w` embedding grid.
pub fn indicator_maps(
    mask: &Mask,
    channels: usize,
    h: usize,
    w: usize,
    threshold: IndicatorThreshold,
) -> Result<Vec<Vec<bool>>> {
    let onehot = mask.one_hot::<f64>(channels)?;
    let resized = if (h, w) == (mask.height(), mask.width()) {
        onehot.into_data()
    } else {
        kernels::bilinear_resize(onehot.data(), channels, mask.height(), mask.width(), h, w)
    };
    let cut = |v: f64| match threshold {
        IndicatorThreshold::Positive => v > 0.0,
        IndicatorThreshold::Half => v >= 0.5,
    };
    Ok(resized
        .chunks(h * w)
        .map(|c| c.iter().map(|&v| cut(v)).collect())
        .collect())
}

/// One prototype per channel `0..channels` of image `image` in the batch.
pub fn compute_prototypes<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    mask: &Mask,
    image: usize,
    channels: usize,
    threshold: IndicatorThreshold,
) -> Result<Vec<Prototype>> {
    let (_, h, w) = g.value(x).chw()?;
    let maps = indicator_maps(mask, channels, h, w, threshold)?;
    maps.iter()
        .enumerate()
        .map(|(k, sel)| {
            let pixel_count = sel.iter().filter(|&&b| b).count();
            let vector = if pixel_count > 0 {
                Some(g.masked_mean(x, sel)?)
            } else {
                None
            };
            Ok(Prototype {
                category: k as u8,
                image,
                vector,
                pixel_count,
            })
        })
        .collect()
}

/// `N x K` prototypes of a batch.
#[derive(Debug, Clone)]
pub struct BatchPrototypes {
    n: usize,
    k: usize,
    entries: Vec<Prototype>,
}

impl BatchPrototypes {
    /// Takes per-image prototype lists, each covering the same `K` categories.
    pub fn new(per_image: Vec<Vec<Prototype>>) -> Result<Self> {
        let n = per_image.len();
        let k = per_image.first().map_or(0, |p| p.len());
        let mut entries = Vec::with_capacity(n * k);
        for (i, row) in per_image.into_iter().enumerate() {
            if row.len() != k
                || row
                    .iter()
                    .enumerate()
                    .any(|(j, p)| p.image != i || p.category as usize != j)
            {
                return Err(Error::Contract(format!(
                    "prototype row {i} is not one entry per category"
                )));
            }
            entries.extend(row);
        }
        Ok(Self { n, k, entries })
    }

    pub fn batch_size(&self) -> usize {
        self.n
    }

    pub fn categories(&self) -> usize {
        self.k
    }

    pub fn get(&self, n: usize, k: usize) -> &Prototype {
        &self.entries[n * self.k + k]
    }
}

/// Stream used to pick the positive for anchor `(n, k)` at `step`.
pub fn positive_stream(seed: u64, step: u64, n: usize, k: usize) -> rng::Stream {
    rng::stream(seed, &[rng::tag("pcem-positive"), step, n as u64, k as u64])
}

/// One anchor's contribution `logsumexp([pos, negs] / tau) - pos / tau`.
#[derive(Debug, Clone, Copy)]
pub struct AnchorTerm {
    pub image: usize,
    pub category: usize,
    /// Image whose same-category prototype served as the positive.
    pub positive: usize,
    pub negatives: usize,
    pub value: Var,
}

/// Per-anchor terms. Anchors without a positive candidate or without any
/// negative contribute nothing.
pub fn contrastive_terms<T: Scalar>(
    g: &mut Graph<T>,
    batch: &BatchPrototypes,
    cfg: &PcemConfig,
    seed: u64,
    step: u64,
) -> Result<Vec<AnchorTerm>> {
    cfg.validate()?;
    if batch.n < 2 {
        return Err(Error::Config(format!(
            "contrastive loss needs at least 2 images, got {}",
            batch.n
        )));
    }
    let first = if cfg.include_background { 0 } else { 1 };
    let mut unit = vec![None; batch.entries.len()];
    for (i, p) in batch.entries.iter().enumerate() {
        if let Some(v) = p.vector {
            unit[i] = Some(if cfg.normalize { g.l2_normalize(v) } else { v });
        }
    }
    let at = |n: usize, k: usize| unit[n * batch.k + k];
    let inv_tau = T::from_f64_lossy(1.0 / cfg.tau);
    let mut terms = Vec::new();
    for n in 0..batch.n {
        for k in first..batch.k {
            let Some(anchor) = at(n, k) else { continue };
            let candidates: Vec<usize> = (0..batch.n)
                .filter(|&i| i != n && at(i, k).is_some())
                .collect();
            if candidates.is_empty() {
                continue;
            }
            let negatives: Vec<Var> = (0..batch.n)
                .filter(|&i| i != n)
                .flat_map(|i| {
                    (first..batch.k)
                        .filter(move |&j| j != k)
                        .map(move |j| (i, j))
                })
                .filter_map(|(i, j)| at(i, j))
                .collect();
            if negatives.is_empty() {
                continue;
            }
            let mut r = positive_stream(seed, step, n, k);
            let m = candidates[r.random_range(0..candidates.len())];
            let pos = g.dot(anchor, at(m, k).expect("candidate present"))?;
            let mut sims = vec![pos];
            let count = negatives.len();
            for neg in negatives {
                sims.push(g.dot(anchor, neg)?);
            }
            let logits = g.concat(&sims)?;
            let logits = g.scale(logits, inv_tau);
            let lse = g.logsumexp(logits);
            let p = g.scale(pos, inv_tau);
            terms.push(AnchorTerm {
                image: n,
                category: k,
                positive: m,
                negatives: count,
                value: g.sub(lse, p)?,
            });
        }
    }
    Ok(terms)
}

/// Sum of [`contrastive_terms`]; a zero scalar when there are none.
pub fn contrastive_loss<T: Scalar>(
    g: &mut Graph<T>,
    batch: &BatchPrototypes,
    cfg: &PcemConfig,
    seed: u64,
    step: u64,
) -> Result<Var> {
    let terms: Vec<Var> = contrastive_terms(g, batch, cfg, seed, step)?
        .iter()
        .map(|t| t.value)
        .collect();
    if terms.is_empty() {
        return Ok(g.constant(crate::Tensor::scalar(T::zero())));
    }
    g.add_all(&terms)
}
