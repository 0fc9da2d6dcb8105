//! Video query decoder, dot-product mask head and inference-time selection.

use serde::{Deserialize, Serialize};

use super::frame_decoder::DecoderLayer;
use crate::data::BinaryMask;
use crate::error::{Error, Result};
use crate::tensor::{FeedForward, LayerNorm, Linear, ParamStore, Scalar, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VideoDecoderConfig {
    pub layers: usize,
    pub queries: usize,
}

impl Default for VideoDecoderConfig {
    fn default() -> Self {
        VideoDecoderConfig {
            layers: 6,
            queries: 20,
        }
    }
}

/// Maps queries to mask embeddings and referral logits.
#[derive(Clone, Copy, Debug)]
pub struct MaskHead {
    norm: LayerNorm,
    embed: FeedForward,
    score: Linear,
}

impl MaskHead {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        MaskHead {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            embed: FeedForward::new(store, &format!("{name}.embed"), dim, dim),
            score: Linear::new(store, &format!("{name}.score"), dim, 1),
        }
    }

    pub fn embedding<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[Var], q: Var) -> Result<Var> {
        let x = self.norm.forward(tape, vars, q)?;
        self.embed.forward(tape, vars, x)
    }

    /// Referral logits `[n, 1]`.
    pub fn score_logits<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[Var], q: Var) -> Result<Var> {
        self.score.forward(tape, vars, q)
    }
}

/// Mask logits `embeddings · featuresᵀ`: `[n, C] × [P, C] → [n, P]`.
pub fn mask_logits<T: Scalar>(tape: &mut Tape<T>, embeddings: Var, features: Var) -> Result<Var> {
    tape.matmul_t(embeddings, features)
}

#[derive(Clone, Debug)]
pub struct VideoDecoder {
    layers: Vec<DecoderLayer>,
    pub head: MaskHead,
    queries: usize,
}

impl VideoDecoder {
    pub fn new(
        store: &mut ParamStore,
        cfg: &VideoDecoderConfig,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
    ) -> Result<Self> {
        if cfg.layers == 0 || cfg.queries == 0 {
            return Err(Error::Config(
                "video_decoder.layers and video_decoder.queries must be >= 1".into(),
            ));
        }
        let layers = (0..cfg.layers)
            .map(|i| {
                DecoderLayer::new(
                    store,
                    &format!("video_decoder.layers.{i}"),
                    "query",
                    dim,
                    heads,
                    ffn_dim,
                )
            })
            .collect::<Result<_>>()?;
        Ok(VideoDecoder {
            layers,
            head: MaskHead::new(store, "video_decoder.head", dim),
            queries: cfg.queries,
        })
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    /// Refines `init` (`[N_v, C]`) against text tokens and all reordered
    /// frame queries.
    pub fn decode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        init: Var,
        frame_queries: Var,
        text: Var,
    ) -> Result<Var> {
        let mut q = init;
        for (i, layer) in self.layers.iter().enumerate() {
            q = layer.forward(tape, vars, q, text, frame_queries, 1)?;
            if !tape.value(q).all_finite() {
                return Err(Error::numeric(format!("video decoder layer {i}")));
            }
        }
        Ok(q)
    }
}

/// Soft masks and referral scores for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPrediction {
    pub queries: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// `[queries, frames, height, width]` probabilities.
    pub soft_masks: Vec<f32>,
    pub scores: Vec<f32>,
}

impl MaskPrediction {
    /// Builds a prediction from mask logits `[n, frames · h · w]` and score
    /// logits `[n]`.
    pub fn from_logits(
        logits: &[f32],
        score_logits: &[f32],
        frames: usize,
        height: usize,
        width: usize,
    ) -> Self {
        MaskPrediction {
            queries: score_logits.len(),
            frames,
            height,
            width,
            soft_masks: logits.iter().map(|&x| sigmoid(x)).collect(),
            scores: score_logits.iter().map(|&x| sigmoid(x)).collect(),
        }
    }

    pub fn mask(&self, query: usize, frame: usize) -> &[f32] {
        let p = self.height * self.width;
        &self.soft_masks[(query * self.frames + frame) * p..][..p]
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Queries whose referral score exceeds 0.5, or the best-scoring query if
/// none does.
pub fn selected_queries(scores: &[f32]) -> Vec<usize> {
    let sel: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] > 0.5).collect();
    if !sel.is_empty() || scores.is_empty() {
        return sel;
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    vec![best]
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    let mut out = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let y = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = (y - y0 as f64) as f32;
        for c in 0..out_w {
            let x = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = (x - x0 as f64) as f32;
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Per-frame binary masks at `out_h × out_w`. The selected queries' soft
/// masks are merged by pixelwise maximum (whose thresholding is the union of
/// the individually thresholded masks), upsampled bilinearly and thresholded.
pub fn select_and_binarize(
    pred: &MaskPrediction,
    threshold: f32,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<BinaryMask>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "threshold {threshold} must lie in (0, 1)"
        )));
    }
    let sel = selected_queries(&pred.scores);
    let p = pred.height * pred.width;
    (0..pred.frames)
        .map(|t| {
            let mut merged = vec![0.0f32; p];
            for &q in &sel {
                for (m, &v) in merged.iter_mut().zip(pred.mask(q, t)) {
                    *m = m.max(v);
                }
            }
            let up = resize_bilinear(&merged, pred.height, pred.width, out_h, out_w);
            BinaryMask::from_bits(out_h, out_w, up.iter().map(|&v| v > threshold).collect())
        })
        .collect()
}
