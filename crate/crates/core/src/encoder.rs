//! Miniature self-supervised backbone.
//!
//! A strided convolutional front-end maps input frames `[T, d_in]` to latents
//! `[T', d]`, followed by pre-norm transformer blocks. The forward pass
//! exposes the front-end output and every block output; the last block output
//! goes through the encoder's final layer norm.
//!
//! LoRA factors and bottleneck adapters attach to the feed-forward part of
//! every transformer block. Both are zero-initialised on one side so that
//! injection leaves the forward function unchanged.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamGroup, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_in: usize,
    pub conv_blocks: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub conv_channels: usize,
    pub blocks: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub mask_embedding: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_in: 16,
            conv_blocks: 2,
            conv_kernel: 3,
            conv_stride: 2,
            conv_channels: 32,
            blocks: 3,
            d_model: 32,
            heads: 4,
            d_ff: 128,
            mask_embedding: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("encoder: {m}")));
        if self.d_in == 0 || self.d_model == 0 || self.conv_channels == 0 {
            return bad("dimensions must be positive");
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad("d_model must be divisible by heads");
        }
        if self.d_ff < self.d_model {
            return bad("d_ff must be at least d_model");
        }
        if self.conv_stride == 0 || self.conv_kernel == 0 {
            return bad("conv kernel and stride must be at least 1");
        }
        Ok(())
    }

    /// Product of the front-end strides.
    pub fn total_stride(&self) -> usize {
        self.conv_stride.pow(self.conv_blocks as u32)
    }

    /// Number of latent frames for `t` input frames.
    pub fn output_frames(&self, t: usize) -> usize {
        (0..self.conv_blocks).fold(t, |t, _| t.div_ceil(self.conv_stride))
    }

    /// Number of exposed layers: front-end plus every block.
    pub fn num_layers(&self) -> usize {
        self.blocks + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdaptationSpec {
    None,
    Lora { rank: usize },
    Adapter { bottleneck: usize },
}

/// Architecture description; parameter values live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub adaptation: AdaptationSpec,
}

/// Outputs of one forward pass, all `[T', d]`.
#[derive(Clone, Debug)]
pub struct LayerOutputs {
    pub front_end: Var,
    pub blocks: Vec<Var>,
}

impl LayerOutputs {
    /// Front-end followed by the blocks, in depth order.
    pub fn all(&self) -> Vec<Var> {
        std::iter::once(self.front_end)
            .chain(self.blocks.iter().copied())
            .collect()
    }

    pub fn last(&self) -> Var {
        *self.blocks.last().unwrap_or(&self.front_end)
    }
}

pub const MASK_EMBEDDING: &str = "enc.mask_embedding";

fn block_prefix(b: usize) -> String {
    format!("enc.block{b}")
}

impl Encoder {
    /// Fresh encoder with randomly initialised parameters.
    pub fn init<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut p = ParamStore::new();
        let c = &config;
        let mut c_in = c.d_in;
        for i in 0..c.conv_blocks {
            let fan_in = c.conv_kernel * c_in;
            p.insert(
                format!("enc.frontend.conv{i}.weight"),
                Tensor::randn(&[fan_in, c.conv_channels], (2.0 / fan_in as f64).sqrt(), rng),
                ParamGroup::FrontEnd,
            )?;
            p.insert(
                format!("enc.frontend.conv{i}.bias"),
                Tensor::zeros(&[c.conv_channels]),
                ParamGroup::FrontEnd,
            )?;
            c_in = c.conv_channels;
        }
        p.insert("enc.frontend.norm.gain", Tensor::full(&[c_in], 1.0), ParamGroup::FrontEnd)?;
        p.insert("enc.frontend.norm.bias", Tensor::zeros(&[c_in]), ParamGroup::FrontEnd)?;
        linear(&mut p, "enc.frontend.proj", c_in, c.d_model, ParamGroup::FrontEnd, rng)?;
        if c.mask_embedding {
            p.insert(
                MASK_EMBEDDING,
                Tensor::randn(&[c.d_model], 0.1, rng),
                ParamGroup::MaskEmbedding,
            )?;
        }
        let d = c.d_model;
        for b in 0..c.blocks {
            let pre = block_prefix(b);
            for ln in ["ln1", "ln2"] {
                p.insert(format!("{pre}.{ln}.gain"), Tensor::full(&[d], 1.0), ParamGroup::Transformer)?;
                p.insert(format!("{pre}.{ln}.bias"), Tensor::zeros(&[d]), ParamGroup::Transformer)?;
            }
            for proj in ["q", "v", "o"] {
                linear(&mut p, &format!("{pre}.attn.{proj}"), d, d, ParamGroup::Transformer, rng)?;
            }
            p.insert(
                format!("{pre}.attn.k.weight"),
                Tensor::randn(&[d, d], (1.0 / d as f64).sqrt(), rng),
                ParamGroup::Transformer,
            )?;
            linear(&mut p, &format!("{pre}.ffn.w1"), d, c.d_ff, ParamGroup::Transformer, rng)?;
            linear(&mut p, &format!("{pre}.ffn.w2"), c.d_ff, d, ParamGroup::Transformer, rng)?;
        }
        p.insert("enc.final_norm.gain", Tensor::full(&[d], 1.0), ParamGroup::Transformer)?;
        p.insert("enc.final_norm.bias", Tensor::zeros(&[d]), ParamGroup::Transformer)?;
        Ok((
            Self {
                config,
                adaptation: AdaptationSpec::None,
            },
            p,
        ))
    }

    /// Same architecture without adaptation attachments.
    pub fn base(&self) -> Encoder {
        Encoder {
            config: self.config.clone(),
            adaptation: AdaptationSpec::None,
        }
    }

    /// Records the forward pass on `g`.
    ///
    /// When `mask` is given, masked front-end frames are replaced by the
    /// learned mask embedding before positional encodings are added.
    pub fn forward(&self, g: &mut Graph, features: &Tensor, mask: Option<&[bool]>) -> Result<LayerOutputs> {
        let c = &self.config;
        if features.shape().len() != 2 {
            return Err(Error::shape(format!("features must be [T, d_in], got {:?}", features.shape())));
        }
        if features.cols() != c.d_in {
            return Err(Error::shape(format!(
                "features have dim {}, encoder expects {}",
                features.cols(),
                c.d_in
            )));
        }
        if features.rows() == 0 || features.is_empty() {
            return Err(Error::InputTooShort { frames: 0, min: 1 });
        }
        let t_out = c.output_frames(features.rows());
        if let Some(m) = mask {
            if m.len() != t_out {
                return Err(Error::shape(format!("mask length {} for {t_out} frames", m.len())));
            }
        }

        let mut x = g.constant(features.clone());
        for i in 0..c.conv_blocks {
            let u = g.unfold(x, c.conv_kernel, c.conv_stride);
            x = affine(g, u, &format!("enc.frontend.conv{i}"))?;
            x = g.gelu(x);
        }
        x = norm(g, x, "enc.frontend.norm")?;
        let front_end = affine(g, x, "enc.frontend.proj")?;

        let mut h = front_end;
        if let Some(m) = mask {
            let emb = g.param(MASK_EMBEDDING)?;
            h = g.mask_rows(h, emb, m);
        }
        let pos = g.constant(sinusoidal_positions(t_out, c.d_model));
        h = g.add(h, pos);

        let mut blocks = Vec::with_capacity(c.blocks);
        for b in 0..c.blocks {
            h = self.block(g, h, b)?;
            if b + 1 == c.blocks {
                h = norm(g, h, "enc.final_norm")?;
            }
            blocks.push(h);
        }
        Ok(LayerOutputs { front_end, blocks })
    }

    fn block(&self, g: &mut Graph, x: Var, b: usize) -> Result<Var> {
        let pre = block_prefix(b);
        let a_in = norm(g, x, &format!("{pre}.ln1"))?;
        let q = affine(g, a_in, &format!("{pre}.attn.q"))?;
        let wk = g.param(&format!("{pre}.attn.k.weight"))?;
        let k = g.matmul(a_in, wk);
        let v = affine(g, a_in, &format!("{pre}.attn.v"))?;
        let att = g.attention(q, k, v, self.config.heads);
        let att = affine(g, att, &format!("{pre}.attn.o"))?;
        let h = g.add(x, att);

        let f_in = norm(g, h, &format!("{pre}.ln2"))?;
        let f = self.ffn_linear(g, f_in, &format!("{pre}.ffn.w1"))?;
        let f = g.gelu(f);
        let mut y = self.ffn_linear(g, f, &format!("{pre}.ffn.w2"))?;
        if let AdaptationSpec::Adapter { .. } = self.adaptation {
            let down = affine(g, y, &format!("{pre}.adapter.down"))?;
            let act = g.relu(down);
            let up = affine(g, act, &format!("{pre}.adapter.up"))?;
            y = g.add(y, up);
        }
        Ok(g.add(h, y))
    }

    /// `x W0 + b`, plus `(x B) A` when LoRA is attached.
    fn ffn_linear(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let w = g.param(&format!("{name}.weight"))?;
        let mut y = g.matmul(x, w);
        if let AdaptationSpec::Lora { .. } = self.adaptation {
            let lb = g.param(&format!("{name}.lora_b"))?;
            let la = g.param(&format!("{name}.lora_a"))?;
            let xb = g.matmul(x, lb);
            let delta = g.matmul(xb, la);
            y = g.add(y, delta);
        }
        let bias = g.param(&format!("{name}.bias"))?;
        Ok(g.add_row(y, bias))
    }

    /// Layer latents for `features` (front-end first), without gradients.
    pub fn encode(&self, params: &ParamStore, features: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::no_grad(params);
        let out = self.forward(&mut g, features, None)?;
        g.check_finite()?;
        Ok(out.all().into_iter().map(|v| g.value(v).clone()).collect())
    }

    fn ffn_matrices(&self) -> Vec<(String, usize, usize)> {
        let (d, f) = (self.config.d_model, self.config.d_ff);
        (0..self.config.blocks)
            .flat_map(|b| {
                let pre = block_prefix(b);
                [(format!("{pre}.ffn.w1"), d, f), (format!("{pre}.ffn.w2"), f, d)]
            })
            .collect()
    }

    /// Attaches rank-`rank` factors `B [rows, r]` (zero) and `A [r, cols]`
    /// (Gaussian) to both feed-forward matrices of every block, and freezes
    /// the pretrained encoder weights.
    pub fn inject_lora<R: Rng + ?Sized>(&mut self, params: &mut ParamStore, rank: usize, rng: &mut R) -> Result<()> {
        if self.adaptation != AdaptationSpec::None {
            return Err(Error::Adaptation(format!("already adapted: {:?}", self.adaptation)));
        }
        let mats = self.ffn_matrices();
        if rank == 0 {
            return Err(Error::Adaptation("LoRA rank must be at least 1".into()));
        }
        if let Some((name, r, c)) = mats.iter().find(|(_, r, c)| rank > *r.min(c)) {
            return Err(Error::Adaptation(format!(
                "rank {rank} exceeds dims of `{name}` [{r}, {c}]"
            )));
        }
        for (name, rows, cols) in mats {
            params.insert(format!("{name}.lora_b"), Tensor::zeros(&[rows, rank]), ParamGroup::Adaptation)?;
            params.insert(
                format!("{name}.lora_a"),
                Tensor::randn(&[rank, cols], 1.0 / (rank as f64).sqrt(), rng),
                ParamGroup::Adaptation,
            )?;
        }
        freeze_pretrained(params);
        self.adaptation = AdaptationSpec::Lora { rank };
        Ok(())
    }

    /// Adds `y + Up(relu(Down(y)))` after every block's feed-forward output,
    /// with `Up` zero-initialised, and freezes the pretrained encoder weights.
    pub fn inject_adapters<R: Rng + ?Sized>(
        &mut self,
        params: &mut ParamStore,
        bottleneck: usize,
        rng: &mut R,
    ) -> Result<()> {
        if self.adaptation != AdaptationSpec::None {
            return Err(Error::Adaptation(format!("already adapted: {:?}", self.adaptation)));
        }
        if bottleneck == 0 {
            return Err(Error::Adaptation("adapter bottleneck must be at least 1".into()));
        }
        let d = self.config.d_model;
        for b in 0..self.config.blocks {
            let pre = block_prefix(b);
            linear(params, &format!("{pre}.adapter.down"), d, bottleneck, ParamGroup::Adaptation, rng)?;
            params.insert(
                format!("{pre}.adapter.up.weight"),
                Tensor::zeros(&[bottleneck, d]),
                ParamGroup::Adaptation,
            )?;
            params.insert(format!("{pre}.adapter.up.bias"), Tensor::zeros(&[d]), ParamGroup::Adaptation)?;
        }
        freeze_pretrained(params);
        self.adaptation = AdaptationSpec::Adapter { bottleneck };
        Ok(())
    }

    /// Number of LoRA factor values: `2 * blocks * (d*r + r*d_ff)`.
    pub fn lora_param_count(&self) -> usize {
        match self.adaptation {
            AdaptationSpec::Lora { rank } => {
                let c = &self.config;
                2 * c.blocks * (c.d_model * rank + rank * c.d_ff)
            }
            _ => 0,
        }
    }
}

fn freeze_pretrained(params: &mut ParamStore) {
    for (_, p) in params.iter_mut() {
        if p.group.is_pretrained_encoder() {
            p.trainable = false;
        }
    }
}

pub(crate) fn linear<R: Rng + ?Sized>(
    p: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    group: ParamGroup,
    rng: &mut R,
) -> Result<()> {
    p.insert(
        format!("{name}.weight"),
        Tensor::randn(&[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng),
        group,
    )?;
    p.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]), group)
}

/// `x W + b` for parameters `{name}.weight`, `{name}.bias`.
pub(crate) fn affine(g: &mut Graph, x: Var, name: &str) -> Result<Var> {
    let w = g.param(&format!("{name}.weight"))?;
    let b = g.param(&format!("{name}.bias"))?;
    let y = g.matmul(x, w);
    Ok(g.add_row(y, b))
}

/// Layer norm with learned gain and bias.
fn norm(g: &mut Graph, x: Var, name: &str) -> Result<Var> {
    let gain = g.param(&format!("{name}.gain"))?;
    let bias = g.param(&format!("{name}.bias"))?;
    let n = g.layer_norm(x);
    let n = g.mul_row(n, gain);
    Ok(g.add_row(n, bias))
}

/// Fixed sinusoidal position table `[t, d]`.
pub fn sinusoidal_positions(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_parts(vec![t, d], data)
}

/// `Σ_l softmax(logits)_l * layers_l` recorded on the graph.
pub fn weighted_layer_sum(g: &mut Graph, layers: &[Var], logits: Var) -> Result<Var> {
    let n = g.value(logits).len();
    if n != layers.len() {
        return Err(Error::shape(format!("{n} layer weights for {} layers", layers.len())));
    }
    if let Some(first) = layers.first() {
        let shape = g.value(*first).shape().to_vec();
        if layers.iter().any(|l| g.value(*l).shape() != shape.as_slice()) {
            return Err(Error::shape("layers differ in shape"));
        }
    } else {
        return Err(Error::shape("no layers to combine"));
    }
    let w = g.softmax(logits);
    Ok(g.weighted_sum(layers, w))
}

/// Tensor-level convenience wrapper around [`weighted_layer_sum`].
pub fn weighted_layer_sum_values(layers: &[Tensor], logits: &[f64]) -> Result<Tensor> {
    let mut g = Graph::detached();
    let vars: Vec<Var> = layers.iter().map(|l| g.constant(l.clone())).collect();
    let w = g.constant(Tensor::vector(logits.to_vec()));
    let out = weighted_layer_sum(&mut g, &vars, w)?;
    Ok(g.value(out).clone())
}
