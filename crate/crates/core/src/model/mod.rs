//! The segmentation model: encoder, frame decoder, query initializer, video
//! decoder and mask heads, assembled over one parameter store.

pub mod encoder;
pub mod frame_decoder;
pub mod initializer;
pub mod video_decoder;

use serde::{Deserialize, Serialize};

pub use encoder::{Encoder, EncoderConfig, FusedFeatures, FusionMode};
pub use frame_decoder::{FrameDecoder, FrameDecoderConfig};
pub use initializer::{
    cosine_cost, gather_indices, hungarian, reorder, reorder_permutations, Aggregator, Assignment,
};
pub use video_decoder::{
    mask_logits, resize_bilinear, select_and_binarize, selected_queries, MaskHead,
    MaskPrediction, VideoDecoder, VideoDecoderConfig,
};

use crate::data::FeatureClip;
use crate::error::{Error, Result};
use crate::tensor::{Linear, ParamStore, Scalar, Tape, Tensor, Var};

pub(crate) fn check_finite<T: Scalar>(
    tape: &Tape<T>,
    v: Var,
    stage: impl FnOnce() -> String,
) -> Result<()> {
    if tape.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::numeric(stage()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Common model width `C`.
    pub channels: usize,
    pub heads: usize,
    /// Hidden width of feed-forward sublayers as a multiple of `C`.
    pub ffn_ratio: usize,
    /// Channels of each input feature scale, finest first.
    pub input_channels: Vec<usize>,
    pub text_channels: usize,
    /// Match frame `t` against the already reordered frame `t - 1` (true) or
    /// against the raw frame `t - 1` (false).
    pub chained_matching: bool,
    pub encoder: EncoderConfig,
    pub frame_decoder: FrameDecoderConfig,
    pub video_decoder: VideoDecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 64,
            heads: 4,
            ffn_ratio: 2,
            input_channels: vec![64, 64, 64],
            text_channels: 64,
            chained_matching: true,
            encoder: EncoderConfig::default(),
            frame_decoder: FrameDecoderConfig::default(),
            video_decoder: VideoDecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return bad(format!(
                "model.channels ({}) must be a positive multiple of model.heads ({})",
                self.channels, self.heads
            ));
        }
        if self.ffn_ratio == 0 {
            return bad("model.ffn_ratio must be >= 1".into());
        }
        if self.input_channels.is_empty() || self.input_channels.contains(&0) {
            return bad("model.input_channels must list one positive width per scale".into());
        }
        if self.text_channels == 0 {
            return bad("model.text_channels must be positive".into());
        }
        if self.encoder.layers == 0 {
            return bad("encoder.layers must be >= 1".into());
        }
        if self.encoder.fusion == FusionMode::Deformable && self.encoder.points == 0 {
            return bad("encoder.points must be >= 1".into());
        }
        if self.frame_decoder.layers == 0 || self.frame_decoder.queries == 0 {
            return bad("frame_decoder.layers and frame_decoder.queries must be >= 1".into());
        }
        if self.video_decoder.layers == 0 {
            return bad("video_decoder.layers must be >= 1".into());
        }
        if self.video_decoder.queries != self.frame_decoder.queries {
            return bad(format!(
                "video_decoder.queries ({}) must equal frame_decoder.queries ({})",
                self.video_decoder.queries, self.frame_decoder.queries
            ));
        }
        Ok(())
    }

    /// Checks that a clip's feature widths fit this architecture.
    pub fn check_clip(&self, clip: &FeatureClip) -> Result<()> {
        let widths: Vec<usize> = clip.scales.iter().map(|s| s.channels).collect();
        if widths != self.input_channels {
            return Err(Error::Config(format!(
                "clip {} has scale widths {widths:?}, model.input_channels is {:?}",
                clip.clip_id, self.input_channels
            )));
        }
        if clip.text_channels() != self.text_channels {
            return Err(Error::Config(format!(
                "clip {} has {} text channels, model.text_channels is {}",
                clip.clip_id,
                clip.text_channels(),
                self.text_channels
            )));
        }
        Ok(())
    }
}

/// Model inputs for one clip, stacked frame-major per scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipInputs<T: Scalar> {
    pub frames: usize,
    pub levels: Vec<(usize, usize)>,
    /// Per scale `[frames · H_l · W_l, C_l]`.
    pub scales: Vec<Tensor<T>>,
    /// `[N_t, C_t]`.
    pub text: Tensor<T>,
}

impl<T: Scalar> ClipInputs<T> {
    pub fn from_clip(clip: &FeatureClip) -> Self {
        let all: Vec<usize> = (0..clip.frames).collect();
        Self::from_frames(clip, &all)
    }

    /// Inputs restricted to the given frame indices, in that order.
    pub fn from_frames(clip: &FeatureClip, frames: &[usize]) -> Self {
        let scales = clip
            .scales
            .iter()
            .map(|s| {
                let data: Vec<T> = frames
                    .iter()
                    .flat_map(|&t| s.frame(t).iter().map(|&x| T::of(x as f64)))
                    .collect();
                Tensor::new([frames.len() * s.tokens(), s.channels], data).expect("scale shape")
            })
            .collect();
        ClipInputs {
            frames: frames.len(),
            levels: clip.scale_shapes(),
            scales,
            text: clip.text_tokens.cast(),
        }
    }
}

/// Every intermediate the losses and inference need.
#[derive(Clone, Debug)]
pub struct ModelOutputs {
    pub fused: FusedFeatures,
    /// Raw frame queries `[frames · N_f, C]`.
    pub frame_queries: Var,
    /// Per-frame permutations applied by the reordering step.
    pub reorder: Vec<Vec<usize>>,
    pub reordered: Var,
    /// Aggregated video queries before refinement, `[N_v, C]`.
    pub video_init: Var,
    pub video_queries: Var,
    /// `[N_v, frames · h · w]`.
    pub mask_logits: Var,
    /// `[N_v, 1]`.
    pub score_logits: Var,
    /// One `[N_f, h · w]` matrix per frame.
    pub frame_mask_logits: Vec<Var>,
    /// `[frames · N_f, 1]`.
    pub frame_score_logits: Var,
    /// Video queries projected into the sentence space, `[N_v, C]`.
    pub similarity: Var,
    pub frames: usize,
    pub mask_height: usize,
    pub mask_width: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub frame_decoder: FrameDecoder,
    pub aggregator: Aggregator,
    pub video_decoder: VideoDecoder,
    pub frame_head: MaskHead,
    pub similarity_proj: Linear,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed);
        let c = config.channels;
        let ffn = c * config.ffn_ratio;
        let encoder = Encoder::new(
            &mut store,
            &config.encoder,
            &config.input_channels,
            config.text_channels,
            c,
            config.heads,
            ffn,
        )?;
        let frame_decoder =
            FrameDecoder::new(&mut store, &config.frame_decoder, c, config.heads, ffn)?;
        let aggregator = Aggregator::new(&mut store, c);
        let video_decoder =
            VideoDecoder::new(&mut store, &config.video_decoder, c, config.heads, ffn)?;
        let frame_head = MaskHead::new(&mut store, "frame_head", c);
        let similarity_proj = Linear::new(&mut store, "similarity_proj", c, c);
        Ok(Model {
            config,
            store,
            encoder,
            frame_decoder,
            aggregator,
            video_decoder,
            frame_head,
            similarity_proj,
        })
    }

    /// Runs the full forward pass. `fixed_reorder` replaces the matching step
    /// with given permutations (used to hold the discrete choice constant).
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        inputs: &ClipInputs<T>,
        fixed_reorder: Option<&[Vec<usize>]>,
    ) -> Result<ModelOutputs> {
        let frames = inputs.frames;
        let n = self.frame_decoder.queries();
        let fused = self.encoder.encode(tape, vars, inputs)?;
        let frame_queries = self.frame_decoder.decode(tape, vars, &fused)?;
        let c = tape.shape(frame_queries)[1];

        let reorder = match fixed_reorder {
            Some(p) => p.to_vec(),
            None => reorder_permutations(
                tape.value(frame_queries).data(),
                frames,
                n,
                c,
                self.config.chained_matching,
            )?,
        };
        let reordered = tape.select_rows(frame_queries, &gather_indices(&reorder))?;
        let video_init = self.aggregator.aggregate(tape, vars, reordered, frames)?;
        check_finite(tape, video_init, || "query aggregation".into())?;
        let video_queries =
            self.video_decoder
                .decode(tape, vars, video_init, reordered, fused.text)?;

        let features = fused.mask_features(tape)?;
        let (mask_height, mask_width) = fused.geometry.levels[0];
        let hw = mask_height * mask_width;
        let emb = self.video_decoder.head.embedding(tape, vars, video_queries)?;
        let mask_logits = mask_logits(tape, emb, features)?;
        let score_logits = self.video_decoder.head.score_logits(tape, vars, video_queries)?;

        let frame_emb = self.frame_head.embedding(tape, vars, frame_queries)?;
        let mut frame_mask_logits = Vec::with_capacity(frames);
        for t in 0..frames {
            let e = tape.slice_rows(frame_emb, t * n, n)?;
            let f = tape.slice_rows(features, t * hw, hw)?;
            frame_mask_logits.push(tape.matmul_t(e, f)?);
        }
        let frame_score_logits = self.frame_head.score_logits(tape, vars, frame_queries)?;
        let similarity = self.similarity_proj.forward(tape, vars, video_queries)?;
        check_finite(tape, mask_logits, || "mask head".into())?;
        Ok(ModelOutputs {
            fused,
            frame_queries,
            reorder,
            reordered,
            video_init,
            video_queries,
            mask_logits,
            score_logits,
            frame_mask_logits,
            frame_score_logits,
            similarity,
            frames,
            mask_height,
            mask_width,
        })
    }

    /// Inference on every frame of a clip.
    pub fn predict(&self, clip: &FeatureClip) -> Result<MaskPrediction> {
        self.config.check_clip(clip)?;
        let inputs = ClipInputs::<f32>::from_clip(clip);
        let mut tape = Tape::<f32>::new();
        let vars = self.store.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &vars, &inputs, None)?;
        Ok(MaskPrediction::from_logits(
            tape.value(out.mask_logits).data(),
            tape.value(out.score_logits).data(),
            out.frames,
            out.mask_height,
            out.mask_width,
        ))
    }

    /// Inference followed by selection and upsampling to the clip's mask
    /// resolution.
    pub fn segment(&self, clip: &FeatureClip, threshold: f32) -> Result<Vec<crate::data::BinaryMask>> {
        let pred = self.predict(clip)?;
        select_and_binarize(&pred, threshold, clip.mask_height, clip.mask_width)
    }
}
