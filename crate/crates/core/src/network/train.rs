//! Training loop: one scene per iteration, drawn from the dataset by the
//! seeded training RNG, with SGD-momentum updates and NaN aborts.
//! Runs are deterministic given the seed, and a checkpoint restores the
//! exact state (parameters, momentum, iteration, RNG stream).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::network::checkpoint::{Checkpoint, RngState};
use crate::network::loss::{compute_loss, LossHyper};
use crate::network::optim::{sgd_step_scaled, SgdConfig};
use crate::network::Model;
use crate::synthdata::Scene;
use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

/// One loss-curve row: `iteration,total,conf,loc,n_matched`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: u64,
    pub total: f64,
    pub conf: f64,
    pub loc: f64,
    pub n_matched: usize,
}

pub fn loss_curve_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("iteration,total,conf,loc,n_matched\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.iteration, r.total, r.conf, r.loc, r.n_matched
        ));
    }
    out
}

/// Model plus optimizer and RNG state; the unit of checkpointing.
#[derive(Debug, Clone)]
pub struct Trainer<S: Scalar> {
    pub model: Model<S>,
    pub momentum: Vec<Tensor<S>>,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
    pub cfg: TrainConfig,
}

// RNG streams: 0 drives the training loop, 1 the parameter init.
const STREAM_TRAIN: u64 = 0;
const STREAM_INIT: u64 = 1;

impl<S: Scalar> Trainer<S> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        init_rng.set_stream(STREAM_INIT);
        let model = Model::init(cfg, &mut init_rng)?;
        let momentum = model
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(STREAM_TRAIN);
        Ok(Self {
            model,
            momentum,
            iteration: 0,
            rng,
            cfg: cfg.clone(),
        })
    }

    fn hyper(&self) -> LossHyper<S> {
        LossHyper {
            beta: S::of(self.cfg.beta),
            neg_weight: S::of(self.cfg.neg_weight),
            pos_iou_threshold: S::of(self.cfg.pos_iou_threshold),
        }
    }

    /// One forward/backward/update on a scene. The scene index is only used
    /// for diagnostics.
    pub fn step(&mut self, scene: &Scene<S>, scene_index: usize) -> Result<LossRecord> {
        let pass = self.model.forward(&scene.image)?;
        let (map_h, map_w) = (pass.scale.shape()[0], pass.scale.shape()[1]);
        let anchors = self.model.anchors_for(map_h, map_w)?;
        let (breakdown, grads, _) = compute_loss(
            &pass.conf,
            &pass.loc,
            &pass.scale,
            &anchors,
            &scene.gts,
            &self.hyper(),
        )?;
        if !breakdown.total.is_finite() {
            return Err(Error::NanAbort {
                iteration: self.iteration,
                scene: scene_index,
                msg: format!(
                    "loss is not finite (conf {}, loc {}, n {})",
                    breakdown.conf_term, breakdown.loc_term, breakdown.n_matched
                ),
            });
        }
        let model_grads =
            self.model
                .backward(&pass, &grads.conf, &grads.loc, &grads.scale_anchor)?;
        let sgd = SgdConfig::from_train(&self.cfg);
        let iteration = self.iteration;

        // Per-layer multipliers: the scale regression trains with its own
        // learning-rate gain plus a stronger weight decay that springs the
        // scale map back toward 1 wherever the data applies no pressure.
        // For the first `scale_warmup` iterations the box-regression head
        // idles at a reduced rate, so the residual size signal flows into
        // the scale map before the offsets can absorb it.
        let gain = S::of(self.cfg.scale_lr_gain);
        let loc_mult = if iteration < self.cfg.scale_warmup {
            S::of(self.cfg.loc_warm_mult)
        } else {
            S::one()
        };
        let decay = S::of(self.cfg.scale_decay_mult);
        let names = self.model.param_names();
        let lr_mults: Vec<S> = names
            .iter()
            .map(|n| {
                if n.starts_with("scale_reg") {
                    gain
                } else if n.starts_with("head_loc") {
                    loc_mult
                } else {
                    S::one()
                }
            })
            .collect();
        let loc_decay = S::of(self.cfg.loc_decay_mult);
        let wd_mults: Vec<S> = names
            .iter()
            .map(|n| {
                if n.starts_with("scale_reg") {
                    decay
                } else if n == "head_loc.kernel" || n == "head_loc.bias" {
                    loc_decay
                } else {
                    S::one()
                }
            })
            .collect();
        sgd_step_scaled(
            &mut self.model.params_mut(),
            &model_grads.tensors,
            &mut self.momentum,
            Some((&lr_mults, &wd_mults)),
            &sgd,
            iteration,
        )?;
        self.iteration += 1;
        Ok(LossRecord {
            iteration,
            total: breakdown.total.as_f64(),
            conf: breakdown.conf_term.as_f64(),
            loc: breakdown.loc_term.as_f64(),
            n_matched: breakdown.n_matched,
        })
    }

    /// Runs `iterations` steps, drawing one scene per step, invoking the
    /// sink after each. On a NaN abort the partial curve stands and the
    /// error carries the offending iteration and scene.
    pub fn run(
        &mut self,
        dataset: &[Scene<S>],
        iterations: u64,
        mut sink: impl FnMut(&LossRecord),
    ) -> Result<()> {
        if dataset.is_empty() {
            return Err(Error::InvalidArgument("training dataset is empty".into()));
        }
        for _ in 0..iterations {
            let scene_index = self.rng.gen_range(0..dataset.len());
            let record = self.step(&dataset[scene_index], scene_index)?;
            sink(&record);
        }
        Ok(())
    }

    /// Verifies all parameters are finite; used at checkpoint boundaries.
    pub fn ensure_finite(&self) -> Result<()> {
        for (name, p) in self.model.param_names().iter().zip(self.model.params()) {
            p.ensure_finite(name)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint<S> {
        let names = self.model.param_names();
        let params = names
            .iter()
            .zip(self.model.params())
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        let momentum = names
            .iter()
            .zip(self.momentum.iter())
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        Checkpoint {
            config: self.cfg.clone(),
            params,
            momentum,
            iteration: self.iteration,
            rng: RngState::capture(&self.rng),
        }
    }

    /// Rebuilds a trainer from a checkpoint; the next step reproduces what
    /// an uninterrupted run would have done.
    pub fn from_checkpoint(ckpt: &Checkpoint<S>) -> Result<Self> {
        let mut trainer = Self::new(&ckpt.config)?;
        let names = trainer.model.param_names();
        if names.len() != ckpt.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, checkpoint has {}",
                names.len(),
                ckpt.params.len()
            )));
        }
        for ((name, params), slot) in names
            .iter()
            .zip(ckpt.params.iter())
            .zip(trainer.model.params_mut())
        {
            let (ckpt_name, tensor) = params;
            if name != ckpt_name || slot.shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch at `{ckpt_name}` (expected `{name}`)"
                )));
            }
            *slot = tensor.clone();
        }
        for ((name, entry), slot) in names
            .iter()
            .zip(ckpt.momentum.iter())
            .zip(trainer.momentum.iter_mut())
        {
            let (ckpt_name, tensor) = entry;
            if name != ckpt_name || slot.shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "momentum mismatch at `{ckpt_name}` (expected `{name}`)"
                )));
            }
            *slot = tensor.clone();
        }
        trainer.iteration = ckpt.iteration;
        trainer.rng = ckpt.rng.restore();
        Ok(trainer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_scene, SceneSpec};

    fn small_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.precision = 64;
        cfg.channels = vec![4, 6, 8, 8];
        cfg.image_size = 32;
        cfg.max_width = 24;
        cfg.aspect_ratios = vec![2.0, 4.0];
        cfg.iterations = 40;
        cfg.seed = 11;
        cfg
    }

    fn dataset(cfg: &TrainConfig, n: usize) -> Vec<Scene<f64>> {
        let spec = SceneSpec::from_config(cfg);
        (0..n).map(|i| generate_scene(&spec, i as u64).unwrap()).collect()
    }

    #[test]
    fn zero_iterations_leaves_initialization_untouched() {
        let cfg = small_cfg();
        let data = dataset(&cfg, 4);
        let mut trainer = Trainer::<f64>::new(&cfg).unwrap();
        let before = trainer.checkpoint();
        trainer.run(&data, 0, |_| {}).unwrap();
        let after = trainer.checkpoint();
        assert_eq!(before.iteration, after.iteration);
        for (a, b) in before.params.iter().zip(after.params.iter()) {
            assert_eq!(a.1, b.1);
        }
    }

    #[test]
    fn resume_reproduces_the_loss_sequence_bit_for_bit() {
        let cfg = small_cfg();
        let data = dataset(&cfg, 6);

        let mut full = Trainer::<f64>::new(&cfg).unwrap();
        let mut full_records = Vec::new();
        full.run(&data, 30, |r| full_records.push(*r)).unwrap();

        let mut first = Trainer::<f64>::new(&cfg).unwrap();
        let mut records = Vec::new();
        first.run(&data, 15, |r| records.push(*r)).unwrap();
        let ckpt = first.checkpoint();
        let mut resumed = Trainer::<f64>::from_checkpoint(&ckpt).unwrap();
        resumed.run(&data, 15, |r| records.push(*r)).unwrap();

        assert_eq!(records.len(), full_records.len());
        for (a, b) in records.iter().zip(full_records.iter()) {
            assert_eq!(a.iteration, b.iteration);
            assert_eq!(a.total.to_bits(), b.total.to_bits(), "at {}", a.iteration);
            assert_eq!(a.n_matched, b.n_matched);
        }
    }

    #[test]
    fn identical_seeds_identical_curves() {
        let cfg = small_cfg();
        let data = dataset(&cfg, 6);
        let mut a = Trainer::<f64>::new(&cfg).unwrap();
        let mut b = Trainer::<f64>::new(&cfg).unwrap();
        let mut ra = Vec::new();
        let mut rb = Vec::new();
        a.run(&data, 20, |r| ra.push(*r)).unwrap();
        b.run(&data, 20, |r| rb.push(*r)).unwrap();
        assert_eq!(loss_curve_csv(&ra), loss_curve_csv(&rb));
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let cfg = small_cfg();
        let mut trainer = Trainer::<f64>::new(&cfg).unwrap();
        assert!(trainer.run(&[], 1, |_| {}).is_err());
    }
}
