//! Two-phase training: layering first, then overlap completion with target
//! stacks rebuilt from the current model on every batch.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossWeights, Phase, Prediction, TotalLoss};
use crate::model::{self, NetworkConfig};
use crate::params::ParameterSet;
use crate::regions::{adjacency, assign_layers, build_target_stack, decompose, AdjacencyGraph, RegionDecomposition};
use crate::synth::{augment, Scene};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub decay_interval_steps: u64,
    pub optimizer_rho: f64,
    pub optimizer_eps: f64,
    pub batch_size: usize,
    pub validation_fraction: f64,
    /// Weight of the sparse term.
    pub lambda: f64,
    /// Objects closer than this many pixels repel each other.
    pub adjacency_threshold: f64,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            phase1_epochs: 300,
            phase2_epochs: 150,
            learning_rate: 1e-4,
            decay_factor: 0.9,
            decay_interval_steps: 1000,
            optimizer_rho: 0.9,
            optimizer_eps: 1e-8,
            batch_size: 4,
            validation_fraction: 0.1,
            lambda: 0.1,
            adjacency_threshold: 15.0,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.network.validate()?;
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!("validation_fraction must lie in (0, 1), got {}", self.validation_fraction));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("decay_factor", self.decay_factor),
            ("optimizer_rho", self.optimizer_rho),
            ("optimizer_eps", self.optimizer_eps),
            ("adjacency_threshold", self.adjacency_threshold),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.optimizer_rho >= 1.0 {
            return bad(format!("optimizer_rho must be below 1, got {}", self.optimizer_rho));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.batch_size == 0 || self.decay_interval_steps == 0 {
            return bad("batch_size and decay_interval_steps must be positive".into());
        }
        Ok(())
    }

    /// `learning_rate * decay_factor^floor(step / decay_interval_steps)`.
    pub fn lr(&self, step: u64) -> f64 {
        self.learning_rate * self.decay_factor.powi((step / self.decay_interval_steps) as i32)
    }

    fn weights(&self, phase: Phase) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            phase,
        }
    }
}

/// Parameters, RMSprop accumulators and bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParameterSet<f32>,
    pub accumulators: ParameterSet<f32>,
    pub step: u64,
    /// Best validation loss seen in phase 1 and phase 2.
    pub best_val: [Option<f64>; 2],
    pub phase: Phase,
}

impl TrainState {
    pub fn new(params: ParameterSet<f32>) -> Self {
        Self {
            accumulators: params.zeros_like(),
            params,
            step: 0,
            best_val: [None, None],
            phase: Phase::Layering,
        }
    }
}

/// One RMSprop update. A non-finite gradient rejects the whole step.
pub fn optimizer_step(state: &mut TrainState, grads: &ParameterSet<f32>, config: &TrainConfig) -> Result<()> {
    state.params.check_congruent(grads)?;
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(name.to_string()));
    }
    let lr = config.lr(state.step);
    let (rho, eps) = (config.optimizer_rho, config.optimizer_eps);
    let accs = state.accumulators.iter_mut();
    let params = state.params.iter_mut();
    for (((_, p), (_, a)), (_, g)) in params.zip(accs).zip(grads.iter()) {
        for ((pv, av), &gv) in p.data_mut().iter_mut().zip(a.data_mut()).zip(g.data()) {
            let (g, acc) = (gv as f64, *av as f64);
            let acc = rho * acc + (1.0 - rho) * g * g;
            *av = acc as f32;
            *pv = (*pv as f64 - lr * g / (acc.sqrt() + eps)) as f32;
        }
    }
    state.step += 1;
    Ok(())
}

/// A scene with its precomputed region decomposition and adjacency.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub image: Tensor<f32>,
    pub regions: RegionDecomposition,
    pub adjacency: AdjacencyGraph,
}

impl PreparedScene {
    pub fn new(scene: &Scene, threshold: f64) -> Result<Self> {
        let regions = decompose(scene.height(), scene.width(), &scene.instances)?;
        let adjacency = adjacency(&regions.objects, threshold);
        Ok(Self {
            image: scene.image.clone(),
            regions,
            adjacency,
        })
    }
}

fn loss_on(pred: &Prediction, scene: &PreparedScene, weights: &LossWeights) -> Result<TotalLoss> {
    let target = match weights.phase {
        Phase::Layering => None,
        Phase::Completion => {
            let asg = assign_layers(pred, &scene.regions);
            Some(build_target_stack(&asg, &scene.regions, pred.channels()).stack)
        }
    };
    total_loss(pred, &scene.regions, &scene.adjacency, target.as_ref(), weights)
}

/// Loss of the current phase and its parameter gradient for one scene.
/// In phase 2 the target stack comes from the same forward pass and is
/// held constant.
pub fn scene_gradient(
    params: &ParameterSet<f32>,
    network: &NetworkConfig,
    scene: &PreparedScene,
    weights: &LossWeights,
) -> Result<(f64, ParameterSet<f32>)> {
    let mut tape = Tape::new();
    let vars = tape.bind(params)?;
    let out = model::forward_on_tape(&mut tape, &vars, network, &scene.image)?;
    let pred = model::prediction_from_outputs(tape.value(out.foreground), tape.value(out.layering))?;
    let loss = loss_on(&pred, scene, weights)?;
    let grad = &loss.total;
    let (h, w) = (pred.height(), pred.width());
    let d_fg = Tensor::<f32>::new(
        vec![1, h, w],
        grad.d_foreground.data().iter().map(|&v| v as f32).collect(),
    )?;
    let d_lay = model::channel_major::<f32>(&grad.d_layering);
    let root = tape.external(grad.value, vec![(out.foreground, d_fg), (out.layering, d_lay)])?;
    Ok((grad.value, tape.gradient(root)?))
}

/// Loss of the given phase without gradients.
pub fn scene_loss(
    params: &ParameterSet<f32>,
    network: &NetworkConfig,
    scene: &PreparedScene,
    weights: &LossWeights,
) -> Result<TotalLoss> {
    let pred = model::forward(&scene.image, params, network)?;
    loss_on(&pred, scene, weights)
}

/// Mean loss over `scenes`, summed in index order.
pub fn mean_loss(
    params: &ParameterSet<f32>,
    network: &NetworkConfig,
    scenes: &[PreparedScene],
    weights: &LossWeights,
) -> Result<f64> {
    let values: Vec<f64> = scenes
        .par_iter()
        .map(|s| scene_loss(params, network, s, weights).map(|l| l.value()))
        .collect::<Result<_>>()?;
    Ok(values.iter().sum::<f64>() / values.len().max(1) as f64)
}

/// Seeded 90/10-style split into `(train, validation)` indices. Both parts
/// are nonempty when there are at least two scenes; a single scene serves
/// as both.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    if n < 2 {
        return (idx.clone(), idx);
    }
    let n_val = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: Phase,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// Passed to the observer after every epoch; `best` is set when the
/// epoch produced a new best validation loss.
pub struct EpochEvent<'a> {
    pub log: &'a EpochLog,
    pub best: Option<&'a ParameterSet<f32>>,
}

#[derive(Clone, Debug)]
pub struct PhaseOutcome {
    pub best_params: ParameterSet<f32>,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

fn seed_for(seed: u64, phase: Phase, epoch: usize, item: u64) -> u64 {
    // splitmix-style mixing keeps nearby inputs apart
    let mut z = seed
        ^ (phase.number() as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (epoch as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ item.wrapping_mul(0x94D0_49BB_1331_11EB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs one phase from `state`. The observer sees every epoch and may
/// persist the best parameters; its errors abort training.
pub fn train_phase(
    state: &mut TrainState,
    phase: Phase,
    train: &[Scene],
    val: &[PreparedScene],
    config: &TrainConfig,
    observer: &mut dyn FnMut(EpochEvent<'_>) -> Result<()>,
) -> Result<PhaseOutcome> {
    if train.is_empty() {
        return Err(Error::Dataset("no training scenes".into()));
    }
    config.validate()?;
    state.phase = phase;
    let weights = config.weights(phase);
    let epochs = match phase {
        Phase::Layering => config.phase1_epochs,
        Phase::Completion => config.phase2_epochs,
    };
    let slot = phase.number() as usize - 1;
    let mut outcome = PhaseOutcome {
        best_params: state.params.clone(),
        best_val_loss: f64::INFINITY,
        best_epoch: 0,
        log: Vec::with_capacity(epochs),
    };
    let static_train: Option<Vec<PreparedScene>> = if config.augment {
        None
    } else {
        Some(
            train
                .iter()
                .map(|s| PreparedScene::new(s, config.adjacency_threshold))
                .collect::<Result<_>>()?,
        )
    };

    for epoch in 0..epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed_for(config.seed, phase, epoch, u64::MAX)));

        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<(f64, ParameterSet<f32>)> = batch
                .par_iter()
                .map(|&i| {
                    let prepared;
                    let scene = match &static_train {
                        Some(s) => &s[i],
                        None => {
                            let aug = augment(&train[i], seed_for(config.seed, phase, epoch, i as u64));
                            prepared = PreparedScene::new(&aug, config.adjacency_threshold)?;
                            &prepared
                        }
                    };
                    scene_gradient(&state.params, &config.network, scene, &weights)
                })
                .collect::<Result<_>>()
                .map_err(|e| match e {
                    Error::NonFinite { .. } | Error::NonFiniteLoss(_) | Error::NonFiniteGradient(_) => {
                        Error::Diverged {
                            phase: phase.number(),
                            epoch,
                        }
                    }
                    other => other,
                })?;
            let scale = 1.0 / results.len() as f32;
            let mut iter = results.into_iter();
            let (first_loss, mut grads) = iter.next().expect("nonempty batch");
            loss_sum += first_loss;
            for (l, g) in iter {
                loss_sum += l;
                for ((_, a), (_, b)) in grads.iter_mut().zip(g.iter()) {
                    a.add_assign(b);
                }
            }
            grads.iter_mut().for_each(|(_, g)| g.scale_in_place(scale));
            optimizer_step(state, &grads, config).map_err(|e| match e {
                Error::NonFiniteGradient(_) => Error::Diverged {
                    phase: phase.number(),
                    epoch,
                },
                other => other,
            })?;
        }

        let val_loss = mean_loss(&state.params, &config.network, val, &weights)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                phase: phase.number(),
                epoch,
            });
        }
        let log = EpochLog {
            phase,
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            lr: config.lr(state.step),
            seconds: started.elapsed().as_secs_f64(),
        };
        let improved = val_loss < outcome.best_val_loss;
        if improved {
            outcome.best_val_loss = val_loss;
            outcome.best_epoch = epoch;
            outcome.best_params = state.params.clone();
            state.best_val[slot] = Some(val_loss);
        }
        observer(EpochEvent {
            log: &log,
            best: improved.then_some(&outcome.best_params),
        })?;
        log::info!(
            "phase {} epoch {epoch}: train {:.5} val {:.5}",
            phase.number(),
            log.train_loss,
            log.val_loss
        );
        outcome.log.push(log);
    }
    Ok(outcome)
}

/// Result of a full two-phase run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub phase1: PhaseOutcome,
    pub phase2: PhaseOutcome,
}

/// Phase 1 from freshly initialised parameters.
pub fn train_phase1(
    scenes: &[Scene],
    config: &TrainConfig,
    observer: &mut dyn FnMut(EpochEvent<'_>) -> Result<()>,
) -> Result<PhaseOutcome> {
    let (train, val) = split(scenes, config)?;
    let mut state = TrainState::new(model::init_params(&config.network, config.seed)?);
    train_phase(&mut state, Phase::Layering, &train, &val, config, observer)
}

/// Phase 2 continuing from the best phase-1 parameters. Optimizer state
/// and the step counter start fresh.
pub fn train_phase2(
    scenes: &[Scene],
    phase1_best: &ParameterSet<f32>,
    config: &TrainConfig,
    observer: &mut dyn FnMut(EpochEvent<'_>) -> Result<()>,
) -> Result<PhaseOutcome> {
    model::init_params(&config.network, 0)?.check_congruent(phase1_best)?;
    let (train, val) = split(scenes, config)?;
    let mut state = TrainState::new(phase1_best.clone());
    train_phase(&mut state, Phase::Completion, &train, &val, config, observer)
}

/// Both phases back to back.
pub fn train_two_phase(
    scenes: &[Scene],
    config: &TrainConfig,
    observer: &mut dyn FnMut(EpochEvent<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    let phase1 = train_phase1(scenes, config, observer)?;
    let phase2 = train_phase2(scenes, &phase1.best_params, config, observer)?;
    Ok(TrainOutcome { phase1, phase2 })
}

fn split(scenes: &[Scene], config: &TrainConfig) -> Result<(Vec<Scene>, Vec<PreparedScene>)> {
    if scenes.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    let (tr, va) = split_indices(scenes.len(), config.validation_fraction, config.seed);
    let train = tr.iter().map(|&i| scenes[i].clone()).collect();
    let val = va
        .iter()
        .map(|&i| PreparedScene::new(&scenes[i], config.adjacency_threshold))
        .collect::<Result<_>>()?;
    Ok((train, val))
}
