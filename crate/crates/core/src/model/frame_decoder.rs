//! Per-frame query decoder: text-initialized queries refined against the
//! text tokens and one frame's visual tokens at a time.

use serde::{Deserialize, Serialize};

use super::encoder::FusedFeatures;
use crate::error::{Error, Result};
use crate::tensor::{
    Attention, FeedForward, LayerNorm, ParamId, ParamInit, ParamStore, Scalar, Tape, Var,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameDecoderConfig {
    pub layers: usize,
    pub queries: usize,
}

impl Default for FrameDecoderConfig {
    fn default() -> Self {
        FrameDecoderConfig {
            layers: 9,
            queries: 20,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DecoderLayer {
    norm_text: LayerNorm,
    text_attn: Attention,
    norm_cross: LayerNorm,
    cross_attn: Attention,
    norm_self: LayerNorm,
    self_attn: Attention,
    norm_ffn: LayerNorm,
    ffn: FeedForward,
}

impl DecoderLayer {
    pub(crate) fn new(
        store: &mut ParamStore,
        prefix: &str,
        cross_name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
    ) -> Result<Self> {
        Ok(DecoderLayer {
            norm_text: LayerNorm::new(store, &format!("{prefix}.norm_text"), dim),
            text_attn: Attention::new(store, &format!("{prefix}.text_attn"), dim, heads)?,
            norm_cross: LayerNorm::new(store, &format!("{prefix}.norm_{cross_name}"), dim),
            cross_attn: Attention::new(store, &format!("{prefix}.{cross_name}_attn"), dim, heads)?,
            norm_self: LayerNorm::new(store, &format!("{prefix}.norm_self"), dim),
            self_attn: Attention::new(store, &format!("{prefix}.self_attn"), dim, heads)?,
            norm_ffn: LayerNorm::new(store, &format!("{prefix}.norm_ffn"), dim),
            ffn: FeedForward::new(store, &format!("{prefix}.ffn"), dim, ffn_dim),
        })
    }

    /// Text cross-attention, cross-attention to `memory`, self-attention and
    /// FFN, each as a pre-norm residual. Rows of `q` and `memory` are split
    /// into `blocks` independent groups for the last three sublayers.
    pub(crate) fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        mut q: Var,
        text: Var,
        memory: Var,
        blocks: usize,
    ) -> Result<Var> {
        let x = self.norm_text.forward(tape, vars, q)?;
        let upd = self.text_attn.forward(tape, vars, x, text, text, 1)?;
        q = tape.add(q, upd)?;
        let x = self.norm_cross.forward(tape, vars, q)?;
        let upd = self.cross_attn.forward(tape, vars, x, memory, memory, blocks)?;
        q = tape.add(q, upd)?;
        let x = self.norm_self.forward(tape, vars, q)?;
        let upd = self.self_attn.forward(tape, vars, x, x, x, blocks)?;
        q = tape.add(q, upd)?;
        let x = self.norm_ffn.forward(tape, vars, q)?;
        let upd = self.ffn.forward(tape, vars, x)?;
        tape.add(q, upd)
    }
}

#[derive(Clone, Debug)]
pub struct FrameDecoder {
    pub query_pos: ParamId,
    /// Bias-free projection of the sentence feature.
    pub sentence_proj: ParamId,
    layers: Vec<DecoderLayer>,
    queries: usize,
}

impl FrameDecoder {
    pub fn new(
        store: &mut ParamStore,
        cfg: &FrameDecoderConfig,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
    ) -> Result<Self> {
        if cfg.layers == 0 || cfg.queries == 0 {
            return Err(Error::Config(
                "frame_decoder.layers and frame_decoder.queries must be >= 1".into(),
            ));
        }
        let query_pos = store.add(
            "frame_decoder.query_pos",
            &[cfg.queries, dim],
            ParamInit::Uniform { fan_in: 1 },
        );
        let sentence_proj = store.add(
            "frame_decoder.sentence_proj.weight",
            &[dim, dim],
            ParamInit::Uniform { fan_in: dim },
        );
        let layers = (0..cfg.layers)
            .map(|i| {
                DecoderLayer::new(
                    store,
                    &format!("frame_decoder.layers.{i}"),
                    "image",
                    dim,
                    heads,
                    ffn_dim,
                )
            })
            .collect::<Result<_>>()?;
        Ok(FrameDecoder {
            query_pos,
            sentence_proj,
            layers,
            queries: cfg.queries,
        })
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    /// `query_pos + sentence · W`, shape `[N_f, C]`.
    pub fn init_queries<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        sentence: Var,
    ) -> Result<Var> {
        let c = tape.shape(sentence)[1];
        let s = tape.matmul(sentence, vars[self.sentence_proj.index()])?;
        let s = tape.reshape(s, &[c])?;
        tape.add_row(vars[self.query_pos.index()], s)
    }

    /// Decodes every frame independently; returns `[frames · N_f, C]`.
    pub fn decode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        fused: &FusedFeatures,
    ) -> Result<Var> {
        let frames = fused.frames();
        let init = self.init_queries(tape, vars, fused.sentence)?;
        let repeat: Vec<usize> = (0..frames).flat_map(|_| 0..self.queries).collect();
        let mut q = tape.select_rows(init, &repeat)?;
        for (i, layer) in self.layers.iter().enumerate() {
            q = layer.forward(tape, vars, q, fused.text, fused.visual, frames)?;
            if !tape.value(q).all_finite() {
                let c = tape.shape(q)[1];
                let bad = tape
                    .value(q)
                    .data()
                    .iter()
                    .position(|x| !x.is_finite())
                    .unwrap_or(0);
                return Err(Error::numeric(format!(
                    "frame decoder frame {} layer {i}",
                    bad / c / self.queries
                )));
            }
        }
        Ok(q)
    }
}
