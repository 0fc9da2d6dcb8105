//! Cross-modal encoder: visual self-attention over multi-scale tokens plus
//! bidirectional image/text cross-attention, repeated per layer.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{check_finite, ClipInputs};
use crate::error::{Error, Result};
use crate::tensor::{
    Attention, DeformGeometry, FeedForward, LayerNorm, Linear, ParamInit, ParamStore, Scalar,
    Tape, Tensor, Var,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Deformable,
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    /// Sampling points per scale and head in deformable mode.
    pub points: usize,
    pub fusion: FusionMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 6,
            points: 4,
            fusion: FusionMode::Deformable,
        }
    }
}

/// Encoder output, all rows projected to the model width `C`.
#[derive(Clone, Debug)]
pub struct FusedFeatures {
    /// `[frames · tokens_per_frame, C]`: per frame, scale 0 first.
    pub visual: Var,
    /// `[N_t, C]`.
    pub text: Var,
    /// `[1, C]`, the mean of the fused text tokens.
    pub sentence: Var,
    pub geometry: Arc<DeformGeometry>,
}

impl FusedFeatures {
    pub fn frames(&self) -> usize {
        self.geometry.frames
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.geometry.tokens_per_frame
    }

    /// Rows of scale 0 for every frame: `[frames · H_0 · W_0, C]`.
    pub fn mask_features<T: Scalar>(&self, tape: &mut Tape<T>) -> Result<Var> {
        let (h, w) = self.geometry.levels[0];
        let s = self.tokens_per_frame();
        let idx: Vec<usize> = (0..self.frames())
            .flat_map(|t| (0..h * w).map(move |i| t * s + i))
            .collect();
        tape.select_rows(self.visual, &idx)
    }
}

/// Sampling-point attention: per token and head, `points` learned offsets on
/// every scale, mixed with softmax-normalized learned weights.
#[derive(Clone, Copy, Debug)]
struct DeformAttention {
    value: Linear,
    offsets: Linear,
    weights: Linear,
    out: Linear,
    heads: usize,
    levels: usize,
    points: usize,
}

impl DeformAttention {
    fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        levels: usize,
        points: usize,
    ) -> Self {
        let n = heads * levels * points;
        let offsets = Linear {
            weight: store.add(
                format!("{name}.offsets.weight"),
                &[dim, 2 * n],
                ParamInit::Zeros,
            ),
            bias: store.add(format!("{name}.offsets.bias"), &[2 * n], ParamInit::Zeros),
        };
        // Start each head looking along its own direction, farther for later points.
        let mut bias = Vec::with_capacity(2 * n);
        for h in 0..heads {
            let a = std::f32::consts::TAU * h as f32 / heads as f32;
            let (dx, dy) = (a.cos(), a.sin());
            let m = dx.abs().max(dy.abs());
            for _ in 0..levels {
                for p in 0..points {
                    bias.push(dx / m * (p + 1) as f32);
                    bias.push(dy / m * (p + 1) as f32);
                }
            }
        }
        *store.get_mut(offsets.bias) = Tensor::new([2 * n], bias).expect("offset bias");
        DeformAttention {
            value: Linear::new(store, &format!("{name}.value"), dim, dim),
            offsets,
            weights: Linear::new(store, &format!("{name}.weights"), dim, n),
            out: Linear::new(store, &format!("{name}.out"), dim, dim),
            heads,
            levels,
            points,
        }
    }

    fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        x: Var,
        geom: &Arc<DeformGeometry>,
    ) -> Result<Var> {
        let rows = tape.shape(x)[0];
        let value = self.value.forward(tape, vars, x)?;
        let offsets = self.offsets.forward(tape, vars, x)?;
        let logits = self.weights.forward(tape, vars, x)?;
        let per_head = self.levels * self.points;
        let logits = tape.reshape(logits, &[rows * self.heads, per_head])?;
        let w = tape.softmax(logits, 1)?;
        let w = tape.reshape(w, &[rows, self.heads * per_head])?;
        let sampled = tape.deform_sample(value, offsets, w, geom.clone())?;
        self.out.forward(tape, vars, sampled)
    }
}

#[derive(Clone, Copy, Debug)]
enum SelfAttention {
    Deformable(DeformAttention),
    Dense(Attention),
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    norm_self: LayerNorm,
    self_attn: SelfAttention,
    norm_i2t: LayerNorm,
    image_to_text: Attention,
    norm_t2i: LayerNorm,
    text_to_image: Attention,
    norm_ffn_v: LayerNorm,
    ffn_v: FeedForward,
    norm_ffn_t: LayerNorm,
    ffn_t: FeedForward,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    input_proj: Vec<Linear>,
    text_proj: Linear,
    layers: Vec<EncoderLayer>,
    heads: usize,
    points: usize,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        cfg: &EncoderConfig,
        input_channels: &[usize],
        text_channels: usize,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
    ) -> Result<Self> {
        if cfg.layers == 0 {
            return Err(Error::Config("encoder.layers must be >= 1".into()));
        }
        if cfg.fusion == FusionMode::Deformable && cfg.points == 0 {
            return Err(Error::Config("encoder.points must be >= 1".into()));
        }
        let levels = input_channels.len();
        let input_proj = input_channels
            .iter()
            .enumerate()
            .map(|(l, &c)| Linear::new(store, &format!("encoder.input_proj.{l}"), c, dim))
            .collect();
        let text_proj = Linear::new(store, "encoder.text_proj", text_channels, dim);
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let p = format!("encoder.layers.{i}");
            let self_attn = match cfg.fusion {
                FusionMode::Deformable => SelfAttention::Deformable(DeformAttention::new(
                    store,
                    &format!("{p}.self_attn"),
                    dim,
                    heads,
                    levels,
                    cfg.points,
                )),
                FusionMode::Dense => {
                    SelfAttention::Dense(Attention::new(store, &format!("{p}.self_attn"), dim, heads)?)
                }
            };
            layers.push(EncoderLayer {
                norm_self: LayerNorm::new(store, &format!("{p}.norm_self"), dim),
                self_attn,
                norm_i2t: LayerNorm::new(store, &format!("{p}.norm_i2t"), dim),
                image_to_text: Attention::new(store, &format!("{p}.image_to_text"), dim, heads)?,
                norm_t2i: LayerNorm::new(store, &format!("{p}.norm_t2i"), dim),
                text_to_image: Attention::new(store, &format!("{p}.text_to_image"), dim, heads)?,
                norm_ffn_v: LayerNorm::new(store, &format!("{p}.norm_ffn_v"), dim),
                ffn_v: FeedForward::new(store, &format!("{p}.ffn_v"), dim, ffn_dim),
                norm_ffn_t: LayerNorm::new(store, &format!("{p}.norm_ffn_t"), dim),
                ffn_t: FeedForward::new(store, &format!("{p}.ffn_t"), dim, ffn_dim),
            });
        }
        Ok(Encoder {
            input_proj,
            text_proj,
            layers,
            heads,
            points: cfg.points,
        })
    }

    /// Projects every scale to width `C` and stacks tokens frame by frame.
    /// Returns the `[frames · S, C]` visual tokens and the `[N_t, C]` text.
    pub fn project_inputs<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        inputs: &ClipInputs<T>,
    ) -> Result<(Var, Var)> {
        if inputs.scales.len() != self.input_proj.len() {
            return Err(Error::Config(format!(
                "model expects {} feature scales, clip has {}",
                self.input_proj.len(),
                inputs.scales.len()
            )));
        }
        let frames = inputs.frames;
        let mut projected = Vec::with_capacity(inputs.scales.len());
        for (proj, scale) in self.input_proj.iter().zip(&inputs.scales) {
            let x = tape.constant(scale.clone());
            projected.push(proj.forward(tape, vars, x)?);
        }
        let stacked = if projected.len() == 1 {
            projected[0]
        } else {
            let all = tape.concat_rows(&projected)?;
            let sizes: Vec<usize> = inputs.levels.iter().map(|&(h, w)| h * w).collect();
            let mut level_base = Vec::with_capacity(sizes.len());
            let mut acc = 0;
            for &s in &sizes {
                level_base.push(acc);
                acc += frames * s;
            }
            let idx: Vec<usize> = (0..frames)
                .flat_map(|t| {
                    let (sizes, level_base) = (&sizes, &level_base);
                    (0..sizes.len())
                        .flat_map(move |l| (0..sizes[l]).map(move |i| level_base[l] + t * sizes[l] + i))
                })
                .collect();
            tape.select_rows(all, &idx)?
        };
        let text_in = tape.constant(inputs.text.clone());
        let text = self.text_proj.forward(tape, vars, text_in)?;
        Ok((stacked, text))
    }

    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        inputs: &ClipInputs<T>,
    ) -> Result<FusedFeatures> {
        let frames = inputs.frames;
        let geometry = Arc::new(DeformGeometry::new(
            &inputs.levels,
            frames,
            self.heads,
            self.points,
        ));
        let (mut v, mut txt) = self.project_inputs(tape, vars, inputs)?;
        let n_t = tape.shape(txt)[0];
        let c = tape.shape(txt)[1];
        let repeat: Vec<usize> = (0..frames).flat_map(|_| 0..n_t).collect();
        for (i, layer) in self.layers.iter().enumerate() {
            let x = layer.norm_self.forward(tape, vars, v)?;
            let upd = match &layer.self_attn {
                SelfAttention::Deformable(d) => d.forward(tape, vars, x, &geometry)?,
                SelfAttention::Dense(a) => a.forward(tape, vars, x, x, x, frames)?,
            };
            v = tape.add(v, upd)?;

            let x = layer.norm_i2t.forward(tape, vars, v)?;
            let upd = layer.image_to_text.forward(tape, vars, x, txt, txt, 1)?;
            v = tape.add(v, upd)?;

            // Each frame updates the text independently; the updates are averaged.
            let x = layer.norm_t2i.forward(tape, vars, txt)?;
            let q = tape.select_rows(x, &repeat)?;
            let per_frame = layer.text_to_image.forward(tape, vars, q, v, v, frames)?;
            let per_frame = tape.reshape(per_frame, &[frames, n_t * c])?;
            let upd = tape.mean_rows(per_frame)?;
            let upd = tape.reshape(upd, &[n_t, c])?;
            txt = tape.add(txt, upd)?;

            let x = layer.norm_ffn_v.forward(tape, vars, v)?;
            let upd = layer.ffn_v.forward(tape, vars, x)?;
            v = tape.add(v, upd)?;
            let x = layer.norm_ffn_t.forward(tape, vars, txt)?;
            let upd = layer.ffn_t.forward(tape, vars, x)?;
            txt = tape.add(txt, upd)?;

            check_finite(tape, v, || format!("encoder layer {i} (visual)"))?;
            check_finite(tape, txt, || format!("encoder layer {i} (text)"))?;
        }
        let sentence = tape.mean_rows(txt)?;
        let sentence = tape.reshape(sentence, &[1, c])?;
        Ok(FusedFeatures {
            visual: v,
            text: txt,
            sentence,
            geometry,
        })
    }
}
