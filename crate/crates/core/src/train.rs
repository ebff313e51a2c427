//! Cross-entropy loss and SGD with classical momentum.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::FrameSet;
use crate::error::{Error, Result};
use crate::metrics::{GroundTruth, SaliencyMap};
use crate::nets::{dynamic_input, static_forward, Network, ParamStore};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Static,
    Dynamic,
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(Stage::Static),
            "dynamic" => Ok(Stage::Dynamic),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Static => "static",
            Stage::Dynamic => "dynamic",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub iterations: usize,
    pub loss_clamp_eps: f64,
    pub stage: Stage,
    /// Seeds the per-epoch sample order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-5,
            momentum: 0.9,
            iterations: 2000,
            loss_clamp_eps: 1e-7,
            stage: Stage::Static,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be ≥ 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.loss_clamp_eps > 0.0 && self.loss_clamp_eps < 0.5) {
            return Err(Error::Config(format!(
                "loss_clamp_eps {} outside (0, 0.5)",
                self.loss_clamp_eps
            )));
        }
        Ok(())
    }
}

/// Summed binary cross-entropy with predictions clamped to `[eps, 1-eps]`.
pub fn cross_entropy_loss(s: &SaliencyMap, g: &GroundTruth, eps: f64) -> Result<f64> {
    if (s.height(), s.width()) != (g.height(), g.width()) {
        return Err(Error::shape(format!(
            "loss of {}×{} map against {}×{} ground truth",
            s.height(),
            s.width(),
            g.height(),
            g.width()
        )));
    }
    let mut tape = Tape::new();
    let sv = tape.constant(s.to_tensor());
    let l = tape.cross_entropy(sv, &g.to_tensor(), eps)?;
    tape.value(l).item()
}

/// Per-parameter velocities, aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    velocity: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        OptimizerState {
            velocity: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }
}

/// `v ← μ·v + g;  p ← p − lr·v`. Nothing is modified when any gradient is non-finite.
pub fn sgd_momentum_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(Error::shape(format!(
            "{} parameters, {} gradients, {} velocities",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for (((name, p), g), v) in params.iter().zip(grads).zip(&state.velocity) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::Parameter {
                name: name.to_string(),
                msg: format!("parameter {}, gradient {}, velocity {}", p.shape(), g.shape(), v.shape()),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
    }
    let (lr, mu) = (cfg.learning_rate, cfg.momentum);
    for (((_, p), g), v) in params.tensors_mut().zip(grads).zip(&mut state.velocity) {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = mu * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// Network input plus target for one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub input: Tensor,
    pub target: GroundTruth,
}

/// `(I_t, G_t)` for every annotated frame.
pub fn static_samples(set: &FrameSet) -> Vec<TrainingSample> {
    set.annotated()
        .into_iter()
        .map(|s| TrainingSample {
            input: s.frame_t.clone(),
            target: s.gt.expect("annotated").clone(),
        })
        .collect()
}

/// `((I_t, I_{t+1}, S_t), G_t)` for every annotated frame, with `S_t` from
/// the frozen static network.
pub fn dynamic_samples(set: &FrameSet, static_net: &Network) -> Result<Vec<TrainingSample>> {
    set.annotated()
        .into_iter()
        .map(|s| {
            let st = static_forward(static_net, s.frame_t)?;
            Ok(TrainingSample {
                input: dynamic_input(s.frame_t, s.frame_t1, &st)?,
                target: s.gt.expect("annotated").clone(),
            })
        })
        .collect()
}

/// One forward/backward pass; returns the loss and the gradients of every
/// parameter in store order.
pub fn loss_and_grads(net: &Network, sample: &TrainingSample, eps: f64) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = net.record_params(&mut tape, true);
    let out = net.forward_on_tape(&mut tape, &sample.input, &vars)?;
    let loss = tape.cross_entropy(out, &sample.target.to_tensor(), eps)?;
    tape.backward(loss)?;
    let value = tape.value(loss).item()?;
    Ok((value, vars.iter().map(|&v| tape.grad(v)).collect()))
}

/// Optimizes `net` for `cfg.iterations` single-sample steps, visiting the
/// samples in a freshly shuffled order each epoch. `on_step` sees the
/// iteration number (1-based), its loss and the updated network; returning
/// `Ok(false)` stops early. Returns the per-iteration loss trace.
pub fn train_stage(
    net: &mut Network,
    samples: &[TrainingSample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64, &Network) -> Result<bool>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Dataset("training set has no annotated samples".into()));
    }
    let expect = net.spec().input_channels;
    if let Some(s) = samples.iter().find(|s| s.input.shape().c != expect) {
        return Err(Error::shape(format!(
            "{} stage network takes {expect} channels, sample has {}",
            cfg.stage,
            s.input.shape()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new(net.params());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        if it % samples.len() == 0 {
            order.shuffle(&mut rng);
        }
        let sample = &samples[order[it % samples.len()]];
        let (loss, grads) = loss_and_grads(net, sample, cfg.loss_clamp_eps)?;
        sgd_momentum_step(net.params_mut(), &grads, &mut state, cfg)?;
        trace.push(loss);
        log::debug!("{} iteration {}: loss {loss:.6}", cfg.stage, it + 1);
        if !on_step(it + 1, loss, net)? {
            break;
        }
    }
    Ok(trace)
}

/// Loss trace as `iteration loss` lines.
pub fn format_loss_trace(trace: &[f64]) -> String {
    trace
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{} {l:.10}\n", i + 1))
        .collect()
}
