//! Clip data model: frozen-backbone features for one (video, expression)
//! pair plus ground-truth masks.

mod manifest;
mod mask;
mod synthetic;

pub use manifest::{
    list_clips, load_clip, read_prediction, save_clip, write_prediction, Manifest,
    PredictionFile, MANIFEST_FILE,
};
pub use mask::BinaryMask;
pub use synthetic::{generate_synthetic, SyntheticSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Feature map of one scale for every frame, laid out `[T, H, W, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleFeatures {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ScaleFeatures {
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    /// `H·W × C` slice for frame `t`.
    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.tokens() * self.channels;
        &self.data[t * n..(t + 1) * n]
    }
}

/// One annotated object with a mask for every frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectTrack {
    pub id: usize,
    pub masks: Vec<BinaryMask>,
}

/// Rule used when real frames were resized before feature export; recorded
/// for provenance only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResizeRule {
    pub longest_side: usize,
    pub shortest_side: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureClip {
    pub clip_id: String,
    pub expression: String,
    pub frames: usize,
    pub scales: Vec<ScaleFeatures>,
    /// `N_t × C_t` token features.
    pub text_tokens: Tensor<f32>,
    /// `C_t` sentence feature.
    pub text_sentence: Vec<f32>,
    pub mask_height: usize,
    pub mask_width: usize,
    pub objects: Vec<ObjectTrack>,
    pub target_ids: Vec<usize>,
    pub resize: Option<ResizeRule>,
}

impl FeatureClip {
    pub fn text_channels(&self) -> usize {
        self.text_tokens.cols()
    }

    pub fn num_tokens(&self) -> usize {
        self.text_tokens.rows()
    }

    pub fn scale_shapes(&self) -> Vec<(usize, usize)> {
        self.scales.iter().map(|s| (s.height, s.width)).collect()
    }

    pub fn is_target(&self, object: usize) -> bool {
        self.target_ids.contains(&self.objects[object].id)
    }

    /// Union of all target objects' masks in frame `t`.
    pub fn target_mask(&self, t: usize) -> BinaryMask {
        let mut out = BinaryMask::empty(self.mask_height, self.mask_width);
        for obj in self.objects.iter().filter(|o| self.target_ids.contains(&o.id)) {
            out = out.union(&obj.masks[t]).expect("validated mask shapes");
        }
        out
    }

    /// Checks every structural invariant of the clip.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(format!("{}: {msg}", self.clip_id)));
        if self.frames == 0 {
            return fail("frames must be >= 1".into());
        }
        if self.scales.is_empty() {
            return fail("at least one feature scale required".into());
        }
        for (l, s) in self.scales.iter().enumerate() {
            if s.height == 0 || s.width == 0 || s.channels == 0 {
                return fail(format!("scales[{l}] has an empty dimension"));
            }
            if s.data.len() != self.frames * s.height * s.width * s.channels {
                return fail(format!(
                    "scales[{l}] holds {} values, expected {}",
                    s.data.len(),
                    self.frames * s.height * s.width * s.channels
                ));
            }
            if l > 0 {
                let prev = &self.scales[l - 1];
                if s.height > prev.height
                    || s.width > prev.width
                    || s.height * s.width >= prev.height * prev.width
                {
                    return fail(format!("scales[{l}] is not smaller than scales[{}]", l - 1));
                }
            }
            if s.data.iter().any(|v| !v.is_finite()) {
                return fail(format!("scales[{l}] contains non-finite values"));
            }
        }
        if self.text_tokens.shape().len() != 2 || self.num_tokens() == 0 {
            return fail("text tokens must be a non-empty N_t x C_t matrix".into());
        }
        if self.text_sentence.len() != self.text_channels() {
            return fail(format!(
                "sentence feature has {} channels, tokens have {}",
                self.text_sentence.len(),
                self.text_channels()
            ));
        }
        if self.mask_height == 0 || self.mask_width == 0 {
            return fail("mask resolution must be positive".into());
        }
        let mut ids = Vec::new();
        for (i, obj) in self.objects.iter().enumerate() {
            if ids.contains(&obj.id) {
                return fail(format!("duplicate object id {}", obj.id));
            }
            ids.push(obj.id);
            if obj.masks.len() != self.frames {
                return fail(format!(
                    "objects[{i}] has {} masks for {} frames",
                    obj.masks.len(),
                    self.frames
                ));
            }
            if let Some(t) = obj
                .masks
                .iter()
                .position(|m| m.height() != self.mask_height || m.width() != self.mask_width)
            {
                return fail(format!("objects[{i}].masks[{t}] has the wrong resolution"));
            }
        }
        if let Some(bad) = self.target_ids.iter().find(|t| !ids.contains(t)) {
            return fail(format!("target id {bad} is not an annotated object"));
        }
        Ok(())
    }
}
