//! Set-prediction losses: per-frame and per-trajectory mask losses with
//! bipartite matching, and the query/sentence similarity loss.

use serde::{Deserialize, Serialize};

use super::matching::{match_predictions_to_gt, MatchWeights};
use crate::data::{BinaryMask, FeatureClip};
use crate::error::{Error, Result};
use crate::model::ModelOutputs;
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_sim: f64,
    pub lambda_dice: f64,
    pub lambda_bce: f64,
    pub lambda_cls: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_sim: 0.5,
            lambda_dice: 1.0,
            lambda_bce: 1.0,
            lambda_cls: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_sim", self.lambda_sim),
            ("lambda_dice", self.lambda_dice),
            ("lambda_bce", self.lambda_bce),
            ("lambda_cls", self.lambda_cls),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss.{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn match_weights(&self) -> MatchWeights {
        MatchWeights {
            dice: self.lambda_dice,
            bce: self.lambda_bce,
            cls: self.lambda_cls,
        }
    }
}

/// Scalar loss values of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub video: f64,
    pub frame: f64,
    pub similarity: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.video, self.frame, self.similarity, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Ground truth for one object at mask-head resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectTarget {
    pub is_target: bool,
    /// `frames · h · w` area fractions, frame-major.
    pub masks: Vec<f64>,
    /// Whether the object is visible in each frame.
    pub present: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipTargets {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub objects: Vec<ObjectTarget>,
}

/// Fraction of each `h × w` cell covered by `mask`, pixels assigned to
/// cells by proportional position.
pub fn downsample_area(mask: &BinaryMask, h: usize, w: usize) -> Vec<f64> {
    let (mh, mw) = (mask.height(), mask.width());
    let mut hits = vec![0usize; h * w];
    let mut total = vec![0usize; h * w];
    for r in 0..mh {
        let cr = r * h / mh;
        for c in 0..mw {
            let cell = cr * w + c * w / mw;
            total[cell] += 1;
            if mask.get(r, c) {
                hits[cell] += 1;
            }
        }
    }
    hits.iter()
        .zip(&total)
        .map(|(&a, &b)| if b == 0 { 0.0 } else { a as f64 / b as f64 })
        .collect()
}

impl ClipTargets {
    /// Targets for the given frame indices at mask-head resolution `h × w`.
    pub fn from_clip(clip: &FeatureClip, frames: &[usize], h: usize, w: usize) -> Self {
        let objects = clip
            .objects
            .iter()
            .enumerate()
            .map(|(i, o)| ObjectTarget {
                is_target: clip.is_target(i),
                masks: frames
                    .iter()
                    .flat_map(|&t| downsample_area(&o.masks[t], h, w))
                    .collect(),
                present: frames.iter().map(|&t| !o.masks[t].is_empty()).collect(),
            })
            .collect();
        ClipTargets {
            frames: frames.len(),
            height: h,
            width: w,
            objects,
        }
    }

    fn frame_mask(&self, object: usize, t: usize) -> &[f64] {
        let p = self.height * self.width;
        &self.objects[object].masks[t * p..(t + 1) * p]
    }
}

/// Discrete matching decisions of one loss evaluation, as `(query, object)`
/// pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Matchings {
    pub video: Vec<(usize, usize)>,
    pub frames: Vec<Vec<(usize, usize)>>,
}

/// Loss nodes on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub video: Var,
    pub frame: Var,
    pub similarity: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown<T: Scalar>(&self, tape: &Tape<T>) -> LossBreakdown {
        LossBreakdown {
            video: tape.item(self.video).as_f64(),
            frame: tape.item(self.frame).as_f64(),
            similarity: tape.item(self.similarity).as_f64(),
            total: tape.item(self.total).as_f64(),
        }
    }
}

fn zero<T: Scalar>(tape: &mut Tape<T>) -> Var {
    tape.constant(Tensor::scalar(T::zero()))
}

/// Dice + BCE over matched rows plus referral BCE over every query.
#[allow(clippy::too_many_arguments)]
fn set_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    score_logits: Var,
    targets: &[&[f64]],
    is_target: &[bool],
    pairs: &[(usize, usize)],
    cfg: &LossConfig,
) -> Result<Var> {
    let (nq, p) = (tape.shape(logits)[0], tape.shape(logits)[1]);
    let mut terms = Vec::with_capacity(3);
    if !pairs.is_empty() {
        let rows: Vec<usize> = pairs.iter().map(|&(q, _)| q).collect();
        let sel = tape.select_rows(logits, &rows)?;
        let tgt = Tensor::new(
            [pairs.len(), p],
            pairs
                .iter()
                .flat_map(|&(_, o)| targets[o].iter().map(|&x| T::of(x)))
                .collect(),
        )?;
        let dice = tape.dice_rows(sel, &tgt)?;
        let dice = tape.mean(dice);
        let bce = tape.bce_rows(sel, &tgt)?;
        let bce = tape.mean(bce);
        terms.push((dice, cfg.lambda_dice));
        terms.push((bce, cfg.lambda_bce));
    }
    let mut cls_t = vec![T::zero(); nq];
    for &(q, o) in pairs {
        if is_target[o] {
            cls_t[q] = T::one();
        }
    }
    let cls = tape.bce_rows(score_logits, &Tensor::new([nq, 1], cls_t)?)?;
    let cls = tape.mean(cls);
    terms.push((cls, cfg.lambda_cls));
    tape.weighted_sum(&terms)
}

fn values<T: Scalar>(tape: &Tape<T>, v: Var) -> Vec<f64> {
    tape.value(v).data().iter().map(|x| x.as_f64()).collect()
}

/// Trajectory-level loss on the video queries. Returns the loss and the
/// `(query, object)` matching it used.
pub fn video_loss<T: Scalar>(
    tape: &mut Tape<T>,
    out: &ModelOutputs,
    targets: &ClipTargets,
    cfg: &LossConfig,
    fixed: Option<&[(usize, usize)]>,
) -> Result<(Var, Vec<(usize, usize)>)> {
    let masks: Vec<&[f64]> = targets.objects.iter().map(|o| o.masks.as_slice()).collect();
    let is_target: Vec<bool> = targets.objects.iter().map(|o| o.is_target).collect();
    let pairs = match fixed {
        Some(p) => p.to_vec(),
        None => {
            let p = tape.shape(out.mask_logits)[1];
            match_predictions_to_gt(
                &values(tape, out.mask_logits),
                &values(tape, out.score_logits),
                p,
                &masks,
                &is_target,
                &cfg.match_weights(),
            )?
        }
    };
    let loss = set_loss(
        tape,
        out.mask_logits,
        out.score_logits,
        &masks,
        &is_target,
        &pairs,
        cfg,
    )?;
    Ok((loss, pairs))
}

/// Per-frame matched loss on the frame queries, averaged over frames. Only
/// objects visible in a frame take part in that frame's matching.
pub fn frame_loss<T: Scalar>(
    tape: &mut Tape<T>,
    out: &ModelOutputs,
    targets: &ClipTargets,
    cfg: &LossConfig,
    fixed: Option<&[Vec<(usize, usize)>]>,
) -> Result<(Var, Vec<Vec<(usize, usize)>>)> {
    let n = tape.shape(out.frame_mask_logits[0])[0];
    let is_target: Vec<bool> = targets.objects.iter().map(|o| o.is_target).collect();
    let mut terms = Vec::with_capacity(targets.frames);
    let mut all_pairs = Vec::with_capacity(targets.frames);
    for t in 0..targets.frames {
        let logits = out.frame_mask_logits[t];
        let scores = tape.slice_rows(out.frame_score_logits, t * n, n)?;
        let masks: Vec<&[f64]> = (0..targets.objects.len())
            .map(|o| targets.frame_mask(o, t))
            .collect();
        let pairs = match fixed {
            Some(f) => f[t].clone(),
            None => {
                let visible: Vec<usize> = (0..targets.objects.len())
                    .filter(|&o| targets.objects[o].present[t])
                    .collect();
                let vis_masks: Vec<&[f64]> = visible.iter().map(|&o| masks[o]).collect();
                let vis_target: Vec<bool> = visible.iter().map(|&o| is_target[o]).collect();
                let p = tape.shape(logits)[1];
                match_predictions_to_gt(
                    &values(tape, logits),
                    &values(tape, scores),
                    p,
                    &vis_masks,
                    &vis_target,
                    &cfg.match_weights(),
                )?
                .into_iter()
                .map(|(q, k)| (q, visible[k]))
                .collect()
            }
        };
        let loss = set_loss(tape, logits, scores, &masks, &is_target, &pairs, cfg)?;
        terms.push((loss, 1.0 / targets.frames as f64));
        all_pairs.push(pairs);
    }
    Ok((tape.weighted_sum(&terms)?, all_pairs))
}

/// `1 - cosine(projection(Q_v[n]), sentence)` averaged over queries matched
/// to referred objects; zero when there are none.
pub fn similarity_loss<T: Scalar>(
    tape: &mut Tape<T>,
    projected: Var,
    sentence: Var,
    target_queries: &[usize],
) -> Result<Var> {
    if target_queries.is_empty() {
        return Ok(zero(tape));
    }
    let q = tape.select_rows(projected, target_queries)?;
    let s = tape.select_rows(sentence, &vec![0; target_queries.len()])?;
    let cos = tape.cosine_rows(q, s)?;
    let cos = tape.mean(cos);
    let one = tape.constant(Tensor::scalar(T::one()));
    tape.sub(one, cos)
}

/// `L_v + L_f + λ_sim · L_sim` for one clip. Passing `fixed` reuses earlier
/// matchings instead of recomputing them.
pub fn compute_losses<T: Scalar>(
    tape: &mut Tape<T>,
    out: &ModelOutputs,
    targets: &ClipTargets,
    cfg: &LossConfig,
    fixed: Option<&Matchings>,
) -> Result<(LossVars, Matchings)> {
    if targets.frames != out.frames
        || targets.height != out.mask_height
        || targets.width != out.mask_width
    {
        return Err(Error::Shape {
            op: "loss targets",
            lhs: vec![out.frames, out.mask_height, out.mask_width],
            rhs: vec![targets.frames, targets.height, targets.width],
        });
    }
    let (video, video_pairs) =
        video_loss(tape, out, targets, cfg, fixed.map(|m| m.video.as_slice()))?;
    let (frame, frame_pairs) =
        frame_loss(tape, out, targets, cfg, fixed.map(|m| m.frames.as_slice()))?;
    let target_queries: Vec<usize> = video_pairs
        .iter()
        .filter(|&&(_, o)| targets.objects[o].is_target)
        .map(|&(q, _)| q)
        .collect();
    let similarity = similarity_loss(tape, out.similarity, out.fused.sentence, &target_queries)?;
    let total = tape.weighted_sum(&[(video, 1.0), (frame, 1.0), (similarity, cfg.lambda_sim)])?;
    Ok((
        LossVars {
            video,
            frame,
            similarity,
            total,
        },
        Matchings {
            video: video_pairs,
            frames: frame_pairs,
        },
    ))
}
