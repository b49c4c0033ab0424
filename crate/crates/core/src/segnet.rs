//! U-shaped encoder-decoder segmentation network.
//!
//! The encoder maps `[1,H,W]` to the embedding `[c, H/2^d, W/2^d]`; the
//! decoder upsamples back with skip connections and a 1x1 head producing
//! one logit channel per dataset class, background included.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::phantom::{Mask, Sample};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub in_channels: usize,
    /// Output channels: background plus every organ class.
    pub num_outputs: usize,
    /// Encoder widths, one per resolution level; depth is `widths.len()`.
    pub widths: Vec<usize>,
    /// Embedding channels `c`.
    pub embed_channels: usize,
    pub convs_per_block: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_outputs: 4,
            widths: vec![16, 32, 32],
            embed_channels: 32,
            convs_per_block: 1,
            height: 64,
            width: 64,
        }
    }
}

impl NetConfig {
    pub fn for_classes(num_classes: usize, height: usize, width: usize) -> Self {
        Self {
            num_outputs: num_classes + 1,
            height,
            width,
            ..Self::default()
        }
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    /// `(h, w)` of the embedding map.
    pub fn embed_dims(&self) -> (usize, usize) {
        (self.height >> self.depth(), self.width >> self.depth())
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.depth();
        if d == 0
            || self.widths.contains(&0)
            || self.embed_channels == 0
            || self.convs_per_block == 0
        {
            return Err(Error::Config(
                "network widths and block sizes must be positive".into(),
            ));
        }
        if self.in_channels == 0 || self.num_outputs < 2 {
            return Err(Error::Config(
                "network needs at least one input and two output channels".into(),
            ));
        }
        let unit = 1usize << d;
        if self.height % unit != 0
            || self.width % unit != 0
            || self.height < unit
            || self.width < unit
        {
            return Err(Error::Config(format!(
                "input {}x{} is not divisible by 2^{d}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Shapes and names of every parameter, in a fixed order.
fn layout(cfg: &NetConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let block = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str, c_in: usize, c_out: usize| {
        let mut c = c_in;
        for j in 0..cfg.convs_per_block {
            out.push((format!("{prefix}.conv{j}.weight"), vec![c_out, c, 3, 3]));
            out.push((format!("{prefix}.conv{j}.bias"), vec![c_out]));
            out.push((format!("{prefix}.norm{j}.gamma"), vec![c_out]));
            out.push((format!("{prefix}.norm{j}.beta"), vec![c_out]));
            c = c_out;
        }
    };
    let mut c = cfg.in_channels;
    for (l, &w) in cfg.widths.iter().enumerate() {
        block(&mut out, &format!("enc{l}"), c, w);
        c = w;
    }
    block(&mut out, "bottleneck", c, cfg.embed_channels);
    let mut up = cfg.embed_channels;
    for l in (0..cfg.depth()).rev() {
        block(
            &mut out,
            &format!("dec{l}"),
            up + cfg.widths[l],
            cfg.widths[l],
        );
        up = cfg.widths[l];
    }
    out.push(("head.weight".into(), vec![cfg.num_outputs, up, 1, 1]));
    out.push(("head.bias".into(), vec![cfg.num_outputs]));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegNetwork<T> {
    config: NetConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

/// Parameters registered on a graph, in layout order.
#[derive(Debug, Clone)]
pub struct Bound(pub Vec<Var>);

/// Embedding map plus the skip features the decoder consumes.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub embedding: Var,
    pub skips: Vec<Var>,
}

impl<T: Scalar> SegNetwork<T> {
    /// Kaiming-uniform fan-in weights, zero biases, identity norms.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, &[rng::tag("init")]);
        let (names, params) = layout(&config)
            .into_iter()
            .map(|(name, dims)| {
                let n: usize = dims.iter().product();
                let t = if name.ends_with(".weight") {
                    let fan_in: usize = dims[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let data = (0..n)
                        .map(|_| T::from_f64_lossy(r.random_range(-bound..bound)))
                        .collect();
                    Tensor::from_vec(&dims, data).expect("layout dims")
                } else if name.ends_with(".gamma") {
                    Tensor::full(&dims, T::one())
                } else {
                    Tensor::zeros(&dims)
                };
                (name, t)
            })
            .unzip();
        Ok(Self {
            config,
            names,
            params,
        })
    }

    /// Rebuilds a network from named tensors, checking names and shapes.
    pub fn from_parts(config: NetConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let expect = layout(&config);
        if expect.len() != named.len() {
            return Err(Error::Validation(format!(
                "expected {} parameter tensors, got {}",
                expect.len(),
                named.len()
            )));
        }
        for ((en, ed), (n, t)) in expect.iter().zip(&named) {
            if en != n || ed.as_slice() != t.dims() {
                return Err(Error::Validation(format!(
                    "parameter {n} {:?} does not match expected {en} {ed:?}",
                    t.dims()
                )));
            }
        }
        let (names, params) = named.into_iter().unzip();
        Ok(Self {
            config,
            names,
            params,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> SegNetwork<U> {
        SegNetwork {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
        }
    }

    /// SHA-256 over names and little-endian f64 values, hex-encoded.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for (n, p) in self.names.iter().zip(&self.params) {
            h.update(n.as_bytes());
            for v in p.data() {
                h.update(v.to_f64_lossy().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Registers every parameter as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.params.iter().map(|p| g.param(p)).collect())
    }

    /// Registers parameters as constants, for inference.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.params.iter().map(|p| g.constant(p.clone())).collect())
    }

    fn block(&self, g: &mut Graph<T>, p: &[Var], cursor: &mut usize, mut x: Var) -> Result<Var> {
        for _ in 0..self.config.convs_per_block {
            let i = *cursor;
            x = g.conv2d(x, p[i], Some(p[i + 1]), 1, 1)?;
            x = g.instance_norm(x, p[i + 2], p[i + 3])?;
            x = g.relu(x);
            *cursor += 4;
        }
        Ok(x)
    }

    fn check_input(&self, g: &Graph<T>, image: Var) -> Result<()> {
        let c = &self.config;
        let dims = g.dims(image);
        let want = [c.in_channels, c.height, c.width];
        if dims != want {
            for (axis, (&got, &expected)) in ["channels", "height", "width"]
                .into_iter()
                .zip(dims.iter().zip(&want))
            {
                if got != expected {
                    return Err(Error::Dimension {
                        op: "encode",
                        axis,
                        expected,
                        got,
                    });
                }
            }
            return Err(Error::Shape {
                op: "encode",
                detail: format!("expected {want:?}, got {dims:?}"),
            });
        }
        Ok(())
    }

    /// `[1,H,W] -> [c,h,w]` plus skip features.
    pub fn encode(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<EncoderOutput> {
        self.check_input(g, image)?;
        let mut cursor = 0;
        let mut x = image;
        let mut skips = Vec::with_capacity(self.config.depth());
        for _ in 0..self.config.depth() {
            let f = self.block(g, &p.0, &mut cursor, x)?;
            skips.push(f);
            x = g.max_pool2(f)?;
        }
        let embedding = self.block(g, &p.0, &mut cursor, x)?;
        Ok(EncoderOutput { embedding, skips })
    }

    /// Embedding and skips to logits `[K,H,W]`.
    pub fn decode(&self, g: &mut Graph<T>, p: &Bound, enc: &EncoderOutput) -> Result<Var> {
        let c = &self.config;
        let (eh, ew) = c.embed_dims();
        let dims = g.dims(enc.embedding);
        if dims != [c.embed_channels, eh, ew] || enc.skips.len() != c.depth() {
            return Err(Error::Shape {
                op: "decode",
                detail: format!("embedding {dims:?} with {} skips", enc.skips.len()),
            });
        }
        let mut cursor = 4 * c.convs_per_block * (c.depth() + 1);
        let mut x = enc.embedding;
        for l in (0..c.depth()).rev() {
            let up = g.upsample2(x)?;
            let cat = g.concat(&[up, enc.skips[l]])?;
            x = self.block(g, &p.0, &mut cursor, cat)?;
        }
        g.conv2d(x, p.0[cursor], Some(p.0[cursor + 1]), 1, 0)
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<(EncoderOutput, Var)> {
        let enc = self.encode(g, p, image)?;
        let logits = self.decode(g, p, &enc)?;
        Ok((enc, logits))
    }

    /// Logits and the argmax mask for one image.
    pub fn predict_mask(&self, image: &Tensor<f32>) -> Result<(Tensor<T>, Mask)> {
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let x = g.constant(image.cast());
        let (_, logits) = self.forward(&mut g, &p, x)?;
        let out = g.value(logits).clone();
        let mask = argmax_channels(&out)?;
        Ok((out, mask))
    }
}

/// Per-pixel argmax over the leading axis of `[K,H,W]`; ties go to the
/// lowest channel.
pub fn argmax_channels<T: Scalar>(logits: &Tensor<T>) -> Result<Mask> {
    let (k, h, w) = logits.chw()?;
    if k > u8::MAX as usize + 1 {
        return Err(Error::Contract(format!(
            "{k} channels do not fit a u8 mask"
        )));
    }
    let d = logits.data();
    let hw = h * w;
    let data = (0..hw)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if d[c * hw + i] > d[best * hw + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    Mask::new(h, w, data)
}

/// Anything that maps a sample to a predicted mask.
pub trait Segmenter {
    fn segment(&self, sample: &Sample) -> Result<Mask>;
}

impl<T: Scalar> Segmenter for SegNetwork<T> {
    fn segment(&self, sample: &Sample) -> Result<Mask> {
        self.predict_mask(&sample.image).map(|(_, m)| m)
    }
}

impl<S: Segmenter + ?Sized> Segmenter for &S {
    fn segment(&self, sample: &Sample) -> Result<Mask> {
        (**self).segment(sample)
    }
}

/// Returns the sample's own ground truth.
#[derive(Debug, Clone, Copy, Default)]
pub struct GroundTruthOracle;

impl Segmenter for GroundTruthOracle {
    fn segment(&self, sample: &Sample) -> Result<Mask> {
        Ok(sample.mask.clone())
    }
}

/// Predicts one class everywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConstantSegmenter(pub u8);

impl Segmenter for ConstantSegmenter {
    fn segment(&self, sample: &Sample) -> Result<Mask> {
        Ok(Mask::new(
            sample.height(),
            sample.width(),
            vec![self.0; sample.height() * sample.width()],
        )?)
    }
}
