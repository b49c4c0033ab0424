//! Two-stage training: batch assembly, the joint losses, the optimisation
//! loop and pseudo-label generation.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::seg_loss;
use crate::numerics::{elst, Graph, Scalar, Tensor, Var};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::pcem::{
    compute_prototypes, contrastive_loss, BatchPrototypes, IndicatorThreshold, PcemConfig,
};
use crate::phantom::{read_json, write_json, Mask, Sample, Split};
use crate::rng;
use crate::segnet::{argmax_channels, Bound, SegNetwork, Segmenter};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub tau: f64,
    pub lambda_s: f64,
    pub lambda_c: f64,
    pub lambda_u: f64,
    pub steps_stage1: usize,
    pub steps_stage2: usize,
    pub seed: u64,
    pub use_esm: bool,
    pub pcem_stage1: bool,
    pub pcem_stage2: bool,
    /// Steps of each stage trained without the contrastive term.
    pub pcem_warmup: usize,
    pub pseudo_labels: bool,
    /// Start stage 2 from the stage-1 weights instead of a fresh init.
    pub warm_start: bool,
    /// Random 90-degree rotations and flips, applied to image and mask together.
    pub augment: bool,
    pub checkpoint_every: usize,
    pub normalize_prototypes: bool,
    pub indicator_threshold: IndicatorThreshold,
    pub include_background: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            batch_size: 4,
            tau: 0.07,
            lambda_s: 1.0,
            lambda_c: 1.0,
            lambda_u: 1.0,
            steps_stage1: 1500,
            steps_stage2: 1500,
            seed: 0,
            use_esm: true,
            pcem_stage1: true,
            pcem_stage2: true,
            pcem_warmup: 0,
            pseudo_labels: true,
            warm_start: false,
            augment: true,
            checkpoint_every: 500,
            normalize_prototypes: true,
            indicator_threshold: IndicatorThreshold::Positive,
            include_background: true,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "lr must be positive and weight_decay non-negative".into(),
            ));
        }
        if [self.lambda_s, self.lambda_c, self.lambda_u]
            .iter()
            .any(|l| !(*l >= 0.0))
        {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let pcem =
            (self.pcem_stage1 && self.use_esm) || (self.pcem_stage2 && self.stage2_enabled());
        if pcem && self.batch_size < 2 {
            return Err(Error::Config(
                "the contrastive loss needs batch_size >= 2".into(),
            ));
        }
        if self.pcem_stage1 && !self.use_esm {
            return Err(Error::Config(
                "pcem_stage1 needs synthetic data (use_esm) to fill a batch".into(),
            ));
        }
        self.pcem_config().validate()
    }

    pub fn stage2_enabled(&self) -> bool {
        self.pseudo_labels && self.steps_stage2 > 0
    }

    pub fn pcem_config(&self) -> PcemConfig {
        PcemConfig {
            tau: self.tau,
            normalize: self.normalize_prototypes,
            threshold: self.indicator_threshold,
            include_background: self.include_background,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::new(self.lr, self.weight_decay)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn number(self) -> u64 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::One => "stage1",
            Stage::Two => "stage2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Exemplar,
    Synthetic,
    Pseudo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub role: Role,
    pub id: String,
    pub image: Tensor<f32>,
    pub target: Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub members: Vec<Member>,
}

impl Batch {
    pub fn count(&self, role: Role) -> usize {
        self.members.iter().filter(|m| m.role == role).count()
    }
}

/// Training pools for one stage.
#[derive(Debug, Clone, Copy)]
pub struct StageData<'a> {
    pub exemplar: &'a Sample,
    pub synthetic: &'a [Sample],
    pub pseudo: &'a [Sample],
}

/// Rotates by `quarter` counter-clockwise quarter turns, then optionally
/// mirrors left-right. Image and mask move together.
pub fn augment_pair(
    image: &Tensor<f32>,
    mask: &Mask,
    quarter: u8,
    flip: bool,
) -> Result<(Tensor<f32>, Mask)> {
    let (h, w) = (mask.height(), mask.width());
    if quarter % 2 == 1 && h != w {
        return Err(Error::Contract("quarter turns need a square canvas".into()));
    }
    let src = |y: usize, x: usize| -> (usize, usize) {
        let x = if flip { w - 1 - x } else { x };
        match quarter % 4 {
            0 => (y, x),
            1 => (x, w - 1 - y),
            2 => (h - 1 - y, w - 1 - x),
            _ => (h - 1 - x, y),
        }
    };
    let mut img = vec![0.0f32; h * w];
    let mut m = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y, x);
            img[y * w + x] = image.data()[sy * w + sx];
            m[y * w + x] = mask.get(sy, sx);
        }
    }
    Ok((Tensor::from_vec(image.dims(), img)?, Mask::new(h, w, m)?))
}

fn pick<'a>(r: &mut rng::Stream, pool: &'a [Sample], amount: usize) -> Vec<&'a Sample> {
    if amount == 0 || pool.is_empty() {
        return Vec::new();
    }
    if amount <= pool.len() {
        index::sample(r, pool.len(), amount)
            .into_iter()
            .map(|i| &pool[i])
            .collect()
    } else {
        (0..amount)
            .map(|_| &pool[r.random_range(0..pool.len())])
            .collect()
    }
}

/// One exemplar plus synthetic members (stage 1), or one exemplar,
/// `ceil((b-1)/2)` synthetic and the remainder pseudo-labelled (stage 2).
/// Empty pools hand their slots to the other pool; with both empty the
/// batch is the exemplar alone.
pub fn sample_batch(data: &StageData, hp: &HyperParams, stage: Stage, step: u64) -> Result<Batch> {
    let mut r = rng::stream(hp.seed, &[rng::tag("batch"), stage.number(), step]);
    let others = hp.batch_size - 1;
    let (mut n_syn, mut n_pse) = match stage {
        Stage::One => (others, 0),
        Stage::Two => (others.div_ceil(2), others / 2),
    };
    if data.synthetic.is_empty() {
        n_pse += n_syn;
        n_syn = 0;
    }
    if data.pseudo.is_empty() {
        n_syn += n_pse;
        n_pse = 0;
        if data.synthetic.is_empty() {
            n_syn = 0;
        }
    }
    let mut chosen = vec![(Role::Exemplar, data.exemplar)];
    chosen.extend(
        pick(&mut r, data.synthetic, n_syn)
            .into_iter()
            .map(|s| (Role::Synthetic, s)),
    );
    chosen.extend(
        pick(&mut r, data.pseudo, n_pse)
            .into_iter()
            .map(|s| (Role::Pseudo, s)),
    );
    let members = chosen
        .into_iter()
        .enumerate()
        .map(|(slot, (role, s))| {
            let (image, target) = if hp.augment {
                let mut a = rng::stream(
                    hp.seed,
                    &[rng::tag("augment"), stage.number(), step, slot as u64],
                );
                let quarter = a.random_range(0..4u8);
                let flip = a.random_bool(0.5);
                augment_pair(&s.image, &s.mask, quarter, flip)?
            } else {
                (s.image.clone(), s.mask.clone())
            };
            Ok(Member {
                role,
                id: s.id.clone(),
                image,
                target,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch { members })
}

/// Loss weights and the contrastive settings for one stage.
#[derive(Debug, Clone, Copy)]
pub struct LossSpec {
    pub lambda_s: f64,
    pub lambda_c: f64,
    pub lambda_u: f64,
    /// `Some` enables the contrastive term.
    pub pcem: Option<PcemConfig>,
    /// Seed of the positive-selection streams.
    pub seed: u64,
    pub step: u64,
}

impl LossSpec {
    pub fn for_stage(hp: &HyperParams, stage: Stage, step: u64) -> Self {
        let enabled = match stage {
            Stage::One => hp.pcem_stage1,
            Stage::Two => hp.pcem_stage2,
        } && step >= hp.pcem_warmup as u64;
        Self {
            lambda_s: hp.lambda_s,
            lambda_c: hp.lambda_c,
            lambda_u: hp.lambda_u,
            pcem: enabled.then(|| hp.pcem_config()),
            seed: rng::derive_seed(hp.seed, &[rng::tag("pcem"), stage.number()]),
            step,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub l_e: Var,
    pub l_s: Option<Var>,
    pub l_c: Option<Var>,
    pub l_u: Option<Var>,
    pub total: Var,
}

/// Scalar values of [`LossTerms`]; absent terms are zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: u64,
    pub l_e: f64,
    pub l_s: f64,
    pub l_c: f64,
    pub l_u: f64,
    pub total: f64,
}

impl LossRow {
    pub fn read<T: Scalar>(g: &Graph<T>, t: &LossTerms, step: u64) -> Self {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.scalar_value(x).to_f64_lossy());
        Self {
            step,
            l_e: v(Some(t.l_e)),
            l_s: v(t.l_s),
            l_c: v(t.l_c),
            l_u: v(t.l_u),
            total: v(Some(t.total)),
        }
    }
}

fn mean_of<T: Scalar>(g: &mut Graph<T>, terms: &[Var]) -> Result<Option<Var>> {
    if terms.is_empty() {
        return Ok(None);
    }
    let s = g.add_all(terms)?;
    Ok(Some(
        g.scale(s, T::one() / T::from_usize(terms.len()).unwrap()),
    ))
}

/// `L_e + lambda_s L_s + lambda_c L_c + lambda_u L_u` over one batch.
/// Prototypes pool over each member's predicted mask.
pub fn batch_loss<T: Scalar>(
    g: &mut Graph<T>,
    net: &SegNetwork<T>,
    p: &Bound,
    batch: &Batch,
    spec: &LossSpec,
) -> Result<LossTerms> {
    batch_loss_inner(g, net, p, batch, spec, None)
}

/// [`batch_loss`] with the prototype masks supplied, one per member. The
/// predicted masks are piecewise constant in the parameters; holding them
/// fixed gives the function whose gradient backward computes.
pub fn batch_loss_with_masks<T: Scalar>(
    g: &mut Graph<T>,
    net: &SegNetwork<T>,
    p: &Bound,
    batch: &Batch,
    spec: &LossSpec,
    masks: &[Mask],
) -> Result<LossTerms> {
    if masks.len() != batch.members.len() {
        return Err(Error::Contract(format!(
            "{} prototype masks for {} members",
            masks.len(),
            batch.members.len()
        )));
    }
    batch_loss_inner(g, net, p, batch, spec, Some(masks))
}

/// Argmax masks of every member under the network's own parameters.
pub fn predicted_masks<T: Scalar>(net: &SegNetwork<T>, batch: &Batch) -> Result<Vec<Mask>> {
    batch
        .members
        .iter()
        .map(|m| Ok(net.predict_mask(&m.image)?.1))
        .collect()
}

fn batch_loss_inner<T: Scalar>(
    g: &mut Graph<T>,
    net: &SegNetwork<T>,
    p: &Bound,
    batch: &Batch,
    spec: &LossSpec,
    fixed: Option<&[Mask]>,
) -> Result<LossTerms> {
    if batch.count(Role::Exemplar) != 1 {
        return Err(Error::Contract(format!(
            "a batch holds exactly one exemplar, found {}",
            batch.count(Role::Exemplar)
        )));
    }
    let channels = net.config().num_outputs;
    let mut l_e = None;
    let (mut syn, mut pse) = (Vec::new(), Vec::new());
    let mut protos = Vec::new();
    for (n, m) in batch.members.iter().enumerate() {
        let x = g.constant(m.image.cast());
        let (enc, logits) = net.forward(g, p, x)?;
        let l = seg_loss(g, logits, &m.target)?;
        match m.role {
            Role::Exemplar => l_e = Some(l),
            Role::Synthetic => syn.push(l),
            Role::Pseudo => pse.push(l),
        }
        if let Some(cfg) = &spec.pcem {
            let pred = match fixed {
                Some(masks) => masks[n].clone(),
                None => argmax_channels(g.value(logits))?,
            };
            protos.push(compute_prototypes(
                g,
                enc.embedding,
                &pred,
                n,
                channels,
                cfg.threshold,
            )?);
        }
    }
    let l_e = l_e.expect("exemplar counted above");
    let l_s = mean_of(g, &syn)?;
    let l_u = mean_of(g, &pse)?;
    let l_c = match &spec.pcem {
        Some(cfg) => Some(contrastive_loss(
            g,
            &BatchPrototypes::new(protos)?,
            cfg,
            spec.seed,
            spec.step,
        )?),
        None => None,
    };
    let mut total = l_e;
    for (term, w) in [
        (l_s, spec.lambda_s),
        (l_c, spec.lambda_c),
        (l_u, spec.lambda_u),
    ] {
        if let Some(t) = term {
            let scaled = g.scale(t, T::from_f64_lossy(w));
            total = g.add(total, scaled)?;
        }
    }
    Ok(LossTerms {
        l_e,
        l_s,
        l_c,
        l_u,
        total,
    })
}

/// Stage-1 objective; the batch may not contain pseudo-labelled members.
pub fn stage1_loss<T: Scalar>(
    g: &mut Graph<T>,
    net: &SegNetwork<T>,
    p: &Bound,
    batch: &Batch,
    spec: &LossSpec,
) -> Result<LossTerms> {
    if batch.count(Role::Pseudo) > 0 {
        return Err(Error::Contract(
            "stage-1 batches contain no pseudo-labelled members".into(),
        ));
    }
    batch_loss(g, net, p, batch, spec)
}

pub fn stage2_loss<T: Scalar>(
    g: &mut Graph<T>,
    net: &SegNetwork<T>,
    p: &Bound,
    batch: &Batch,
    spec: &LossSpec,
) -> Result<LossTerms> {
    batch_loss(g, net, p, batch, spec)
}

pub fn losses_csv(rows: &[LossRow]) -> String {
    let mut s = String::from("step,L_e,L_s,L_c,L_u,total\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.step, r.l_e, r.l_s, r.l_c, r.l_u, r.total
        );
    }
    s
}

/// Runs `steps` optimisation steps of `stage`. `on_checkpoint` is called
/// every `hp.checkpoint_every` steps with the number of completed steps.
pub fn train_stage(
    net: &mut SegNetwork<f32>,
    adam: &mut AdamState<f32>,
    data: &StageData,
    hp: &HyperParams,
    stage: Stage,
    steps: usize,
    mut on_checkpoint: impl FnMut(&SegNetwork<f32>, &AdamState<f32>, u64) -> Result<()>,
) -> Result<Vec<LossRow>> {
    let opt = hp.adam();
    let mut rows = Vec::with_capacity(steps);
    let mut g = Graph::new();
    for step in 0..steps as u64 {
        let batch = sample_batch(data, hp, stage, step)?;
        g.reset();
        let p = net.bind(&mut g);
        let spec = LossSpec::for_stage(hp, stage, step);
        let terms = batch_loss(&mut g, net, &p, &batch, &spec)?;
        let row = LossRow::read(&g, &terms, step);
        if !row.total.is_finite() {
            return Err(Error::Contract(format!(
                "{} loss became non-finite at step {step}",
                stage.name()
            )));
        }
        g.backward(terms.total)?;
        let zeros: Vec<Vec<f32>> = net.params().iter().map(|t| vec![0.0; t.len()]).collect();
        let grads: Vec<&[f32]> =
            p.0.iter()
                .zip(&zeros)
                .map(|(&v, z)| g.grad(v).unwrap_or(z))
                .collect();
        adam_step(net.params_mut(), &grads, adam, &opt)?;
        rows.push(row);
        let done = step + 1;
        if hp.checkpoint_every > 0 && done % hp.checkpoint_every as u64 == 0 {
            on_checkpoint(net, adam, done)?;
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub id: String,
    pub mask: Mask,
}

/// Predicted masks of the unlabeled pool, tagged with the producing model.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabeledSet {
    pub checkpoint_hash: String,
    pub entries: Vec<PseudoLabel>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PseudoIndex {
    checkpoint_hash: String,
    ids: Vec<String>,
}

pub const PSEUDO_INDEX: &str = "pseudo_labels.json";

impl PseudoLabeledSet {
    /// Unlabeled samples paired with their pseudo masks, in entry order.
    pub fn samples(&self, unlabeled: &[Sample]) -> Result<Vec<Sample>> {
        self.entries
            .iter()
            .map(|e| {
                let s = unlabeled.iter().find(|s| s.id == e.id).ok_or_else(|| {
                    Error::Validation(format!("pseudo label for unknown sample {}", e.id))
                })?;
                Ok(Sample {
                    id: s.id.clone(),
                    split: Split::Unlabeled,
                    image: s.image.clone(),
                    mask: e.mask.clone(),
                })
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for e in &self.entries {
            elst::write_file(
                &dir.join(format!("{}.mask.elst", e.id)),
                &[e.mask.height(), e.mask.width()],
                e.mask.data(),
            )?;
        }
        let index = PseudoIndex {
            checkpoint_hash: self.checkpoint_hash.clone(),
            ids: self.entries.iter().map(|e| e.id.clone()).collect(),
        };
        write_json(&dir.join(PSEUDO_INDEX), &index)
    }

    pub fn load(dir: &Path, num_classes: usize) -> Result<Self> {
        let index: PseudoIndex = read_json(&dir.join(PSEUDO_INDEX))?;
        let entries = index
            .ids
            .into_iter()
            .map(|id| {
                let (dims, data) = elst::read_file::<u8>(&dir.join(format!("{id}.mask.elst")))?;
                if dims.len() != 2 {
                    return Err(Error::Validation(format!("pseudo mask {id} is not 2-D")));
                }
                let mask = Mask::new(dims[0], dims[1], data)?;
                mask.validate(num_classes)?;
                Ok(PseudoLabel { id, mask })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            checkpoint_hash: index.checkpoint_hash,
            entries,
        })
    }
}

/// One prediction per unlabeled image, with no confidence filtering.
pub fn generate_pseudo_labels<S: Segmenter + ?Sized>(
    model: &S,
    unlabeled: &[Sample],
    checkpoint_hash: &str,
) -> Result<PseudoLabeledSet> {
    let entries = unlabeled
        .iter()
        .map(|s| {
            Ok(PseudoLabel {
                id: s.id.clone(),
                mask: model.segment(s)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PseudoLabeledSet {
        checkpoint_hash: checkpoint_hash.into(),
        entries,
    })
}
