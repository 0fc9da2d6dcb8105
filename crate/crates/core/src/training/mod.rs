//! Losses, optimizer, checkpoints and the training loop.

pub mod checkpoint;
pub mod loss;
pub mod matching;
pub mod optim;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use loss::{
    compute_losses, downsample_area, frame_loss, similarity_loss, video_loss, ClipTargets,
    LossBreakdown, LossConfig, LossVars, Matchings, ObjectTarget,
};
pub use matching::{match_cost_terms, match_predictions_to_gt, mean_bce, soft_dice_loss, MatchWeights};
pub use optim::AdamW;

use crate::data::FeatureClip;
use crate::error::{Error, Result};
use crate::model::{ClipInputs, Model, ModelConfig};
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f64,
    /// Clips per iteration; 0 uses every clip.
    pub batch_size: usize,
    /// Frames sampled per clip and iteration; 0 uses every frame.
    pub frames: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 300,
            learning_rate: 5e-5,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 0.0,
            batch_size: 0,
            frames: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("train.learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("train.weight_decay must be >= 0, got {}", self.weight_decay));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("train.{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad(format!("train.eps must be positive, got {}", self.eps));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return bad(format!("train.grad_clip must be >= 0, got {}", self.grad_clip));
        }
        Ok(())
    }
}

/// Everything that determines a training run's trajectory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSetup {
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()
    }
}

/// Clip indices and sorted frame indices used by one iteration. A pure
/// function of the seed and iteration number, so resumed runs see the same
/// samples as uninterrupted ones.
pub fn iteration_plan(
    seed: u64,
    iteration: usize,
    clips: &[FeatureClip],
    cfg: &TrainConfig,
) -> Vec<(usize, Vec<usize>)> {
    let n = clips.len();
    let batch = if cfg.batch_size == 0 { n } else { cfg.batch_size.min(n) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7261_696e_0000_0000);
    rng.set_stream(iteration as u64);
    (0..batch)
        .map(|k| {
            let c = (iteration * batch + k) % n;
            let total = clips[c].frames;
            let frames = if cfg.frames == 0 || cfg.frames >= total {
                (0..total).collect()
            } else {
                let mut f = sample(&mut rng, total, cfg.frames).into_vec();
                f.sort_unstable();
                f
            };
            (c, frames)
        })
        .collect()
}

/// One clip's loss values and parameter gradients.
pub struct ClipStep {
    pub losses: LossBreakdown,
    pub grads: Vec<Vec<f32>>,
    pub matchings: Matchings,
}

/// Forward and backward pass for one clip on its own tape.
pub fn clip_gradients(
    model: &Model,
    loss_cfg: &LossConfig,
    clip: &FeatureClip,
    frames: &[usize],
) -> Result<ClipStep> {
    let inputs = ClipInputs::<f32>::from_frames(clip, frames);
    let mut tape = Tape::<f32>::new();
    let vars = model.store.bind(&mut tape);
    let out = model.forward(&mut tape, &vars, &inputs, None)?;
    let targets = ClipTargets::from_clip(clip, frames, out.mask_height, out.mask_width);
    let (lv, matchings) = compute_losses(&mut tape, &out, &targets, loss_cfg, None)?;
    let losses = lv.breakdown(&tape);
    if !losses.is_finite() {
        return Ok(ClipStep {
            losses,
            grads: Vec::new(),
            matchings,
        });
    }
    let g = tape.backward(lv.total)?;
    let grads = model
        .store
        .ids()
        .zip(&vars)
        .map(|(id, &v)| match g.raw(v) {
            Some(d) => d.to_vec(),
            None => vec![0.0; model.store.get(id).numel()],
        })
        .collect();
    Ok(ClipStep {
        losses,
        grads,
        matchings,
    })
}

pub struct Trainer {
    pub setup: TrainSetup,
    pub model: Model,
    pub optimizer: AdamW,
    /// Batch-mean losses of every completed iteration.
    pub history: Vec<LossBreakdown>,
}

impl Trainer {
    pub fn new(setup: TrainSetup) -> Result<Self> {
        setup.validate()?;
        let model = Model::new(setup.model.clone(), setup.seed)?;
        let t = &setup.train;
        let optimizer = AdamW::new(
            &model.store,
            t.learning_rate,
            (t.beta1, t.beta2),
            t.eps,
            t.weight_decay,
        );
        Ok(Trainer {
            setup,
            model,
            optimizer,
            history: Vec::new(),
        })
    }

    pub fn iteration(&self) -> usize {
        self.history.len()
    }

    /// Runs one optimization step and records its losses.
    pub fn step(&mut self, clips: &[FeatureClip]) -> Result<LossBreakdown> {
        if clips.is_empty() {
            return Err(Error::Validation("training set is empty".into()));
        }
        let it = self.iteration();
        let plan = iteration_plan(self.setup.seed, it, clips, &self.setup.train);
        let scale = 1.0 / plan.len() as f64;
        let mut mean = LossBreakdown::default();
        let mut grads: Vec<Vec<f32>> = Vec::new();
        for (c, frames) in &plan {
            let s = clip_gradients(&self.model, &self.setup.loss, &clips[*c], frames).map_err(|e| match e {
                Error::Numeric { stage } => Error::numeric(format!(
                    "iteration {} (clip {}): {stage}",
                    it + 1,
                    clips[*c].clip_id
                )),
                e => e,
            })?;
            if !s.losses.is_finite() {
                return Err(Error::numeric(format!(
                    "iteration {} (clip {}): L_v={} L_f={} L_sim={} L_train={}",
                    it + 1,
                    clips[*c].clip_id,
                    s.losses.video,
                    s.losses.frame,
                    s.losses.similarity,
                    s.losses.total
                )));
            }
            mean.video += s.losses.video * scale;
            mean.frame += s.losses.frame * scale;
            mean.similarity += s.losses.similarity * scale;
            mean.total += s.losses.total * scale;
            if grads.is_empty() {
                grads = s.grads;
            } else {
                for (acc, g) in grads.iter_mut().zip(&s.grads) {
                    acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
            }
        }
        let k = scale as f32;
        let mut sq = 0.0f64;
        for g in &mut grads {
            for x in g.iter_mut() {
                *x *= k;
                sq += (*x as f64) * (*x as f64);
            }
        }
        if !sq.is_finite() {
            return Err(Error::numeric(format!("iteration {} gradients", it + 1)));
        }
        let clip = self.setup.train.grad_clip;
        if clip > 0.0 && sq.sqrt() > clip {
            let f = (clip / sq.sqrt()) as f32;
            grads.iter_mut().flatten().for_each(|x| *x *= f);
        }
        self.optimizer.update(&mut self.model.store, &grads)?;
        self.history.push(mean);
        Ok(mean)
    }

    /// Steps until `setup.train.iterations` iterations have been completed,
    /// calling `log` after each one.
    pub fn run(
        &mut self,
        clips: &[FeatureClip],
        mut log: impl FnMut(usize, &LossBreakdown),
    ) -> Result<()> {
        for clip in clips {
            self.model.config.check_clip(clip)?;
        }
        while self.iteration() < self.setup.train.iterations {
            let l = self.step(clips)?;
            log(self.iteration(), &l);
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self)
    }

    /// Restores a trainer from a checkpoint, keeping `iterations` from the
    /// checkpoint unless overridden.
    pub fn resume(ckpt: &Checkpoint, iterations: Option<usize>) -> Result<Self> {
        let mut setup = ckpt.setup()?;
        if let Some(n) = iterations {
            setup.train.iterations = n;
        }
        let mut t = Trainer::new(setup)?;
        ckpt.restore(&mut t)?;
        Ok(t)
    }
}

/// Loss curve as CSV text.
pub fn loss_csv(history: &[LossBreakdown]) -> String {
    let mut s = String::from("iteration,L_v,L_f,L_sim,L_train\n");
    for (i, l) in history.iter().enumerate() {
        s.push_str(&format!(
            "{},{:e},{:e},{:e},{:e}\n",
            i + 1,
            l.video,
            l.frame,
            l.similarity,
            l.total
        ));
    }
    s
}
