//! The residual estimator: ego-frame normalization, front-agent selection,
//! the history / interaction / KD encoders and the confined residual decoder.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Vec2};
use crate::nn::{init_params, Activation, MlpBundle, MlpSpec};
use crate::scene::ScenarioState;
use crate::trajectory::GaussianTrajectory;
use crate::{OBS_LEN, PRED_LEN, VAR_CEIL, VAR_FLOOR};

/// Number of front agents kept for the interaction encoder.
pub const MAX_FRONT_AGENTS: usize = 3;
/// Network inputs are ego-frame meters times this factor.
pub const INPUT_SCALE: f64 = 0.1;

/// Pose of the ego's last observation; the origin of all network inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoFrame {
    pub origin: Vec2,
    pub heading: f64,
}

impl EgoFrame {
    pub fn new(origin: Vec2, heading: f64) -> Self {
        EgoFrame {
            origin,
            heading: wrap_angle(heading),
        }
    }

    pub fn to_local(&self, p: Vec2) -> Vec2 {
        (p - self.origin).rotate(-self.heading)
    }

    pub fn to_world(&self, p: Vec2) -> Vec2 {
        p.rotate(self.heading) + self.origin
    }

    /// Ego-frame trajectory to world frame (variances via the rotated diagonal).
    pub fn trajectory_to_world(&self, t: &GaussianTrajectory) -> GaussianTrajectory {
        t.transformed(self.heading, self.origin)
    }

    /// World means to the ego frame; variances are taken as given.
    pub fn means_to_local(&self, means: &[Vec2]) -> Vec<Vec2> {
        means.iter().map(|p| self.to_local(*p)).collect()
    }
}

/// Ego-frame copies of everything the network sees.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedInputs {
    pub frame: EgoFrame,
    pub ego_history: Vec<Vec2>,
    pub others: Vec<Vec<Vec2>>,
    pub kd: Vec<Vec2>,
}

pub fn ego_frame(state: &ScenarioState) -> EgoFrame {
    EgoFrame::new(state.ego.last(), state.ego.heading())
}

pub fn to_ego_frame(state: &ScenarioState, kd_means: &[Vec2]) -> NormalizedInputs {
    let frame = ego_frame(state);
    NormalizedInputs {
        frame,
        ego_history: frame.means_to_local(&state.ego.positions()),
        others: state
            .others
            .iter()
            .map(|o| frame.means_to_local(&o.positions()))
            .collect(),
        kd: frame.means_to_local(kd_means),
    }
}

/// Up to `k` front agents as ego-frame histories, nearest first.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionSet {
    pub capacity: usize,
    pub agents: Vec<Vec<Vec2>>,
}

impl InteractionSet {
    /// Flattened slots (`2·T_o` coordinates each, zeros when absent) then one mask per slot.
    pub fn features(&self) -> Vec<f64> {
        let obs = self.agents.first().map_or(OBS_LEN, Vec::len);
        let mut f = Vec::with_capacity(self.capacity * (2 * obs + 1));
        for slot in 0..self.capacity {
            match self.agents.get(slot) {
                Some(h) => f.extend(h.iter().flat_map(|p| [p.x * INPUT_SCALE, p.y * INPUT_SCALE])),
                None => f.extend(std::iter::repeat_n(0.0, 2 * obs)),
            }
        }
        f.extend((0..self.capacity).map(|s| if s < self.agents.len() { 1.0 } else { 0.0 }));
        f
    }
}

/// Drops agents behind the ego (abeam counts as front), keeps the `k` nearest.
pub fn preprocess_interactions(state: &ScenarioState, frame: &EgoFrame, k: usize) -> InteractionSet {
    let mut front: Vec<(f64, u64, Vec<Vec2>)> = state
        .others
        .iter()
        .filter_map(|o| {
            let h = frame.means_to_local(&o.positions());
            let last = *h.last().unwrap();
            (last.x >= 0.0).then(|| (last.norm(), o.agent_id, h))
        })
        .collect();
    front.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    front.truncate(k);
    InteractionSet {
        capacity: k,
        agents: front.into_iter().map(|(_, _, h)| h).collect(),
    }
}

pub fn history_features(history: &[Vec2]) -> Vec<f64> {
    history
        .iter()
        .flat_map(|p| [p.x * INPUT_SCALE, p.y * INPUT_SCALE])
        .collect()
}

/// Layer widths of the residual estimator (and of the encoder-decoder baseline).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkArch {
    pub obs_len: usize,
    pub pred_len: usize,
    pub max_agents: usize,
    pub history_hidden: Vec<usize>,
    pub interaction_hidden: Vec<usize>,
    pub kd_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
}

impl Default for NetworkArch {
    fn default() -> Self {
        NetworkArch {
            obs_len: OBS_LEN,
            pred_len: PRED_LEN,
            max_agents: MAX_FRONT_AGENTS,
            history_hidden: vec![32, 32, 64],
            interaction_hidden: vec![32, 32, 64],
            kd_hidden: vec![32, 64],
            decoder_hidden: vec![256, 128, 128, 64],
        }
    }
}

impl NetworkArch {
    pub fn history_input(&self) -> usize {
        2 * self.obs_len
    }

    pub fn interaction_input(&self) -> usize {
        self.max_agents * (2 * self.obs_len + 1)
    }

    pub fn kd_input(&self) -> usize {
        2 * self.pred_len
    }

    /// Mean head then log-variance head, each `2·T_p` values interleaved (x, y) per step.
    pub fn decoder_output(&self) -> usize {
        4 * self.pred_len
    }

    fn encoder(input: usize, hidden: &[usize]) -> Result<MlpSpec> {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        MlpSpec::new(widths, Activation::Relu)
    }

    pub fn history_spec(&self) -> Result<MlpSpec> {
        Self::encoder(self.history_input(), &self.history_hidden)
    }

    pub fn interaction_spec(&self) -> Result<MlpSpec> {
        Self::encoder(self.interaction_input(), &self.interaction_hidden)
    }

    pub fn kd_spec(&self) -> Result<MlpSpec> {
        Self::encoder(self.kd_input(), &self.kd_hidden)
    }

    /// Decoder over the concatenated features; `with_kd` is false for the
    /// encoder-decoder baseline.
    pub fn decoder_spec(&self, with_kd: bool) -> Result<MlpSpec> {
        let feature = |h: &[usize]| -> Result<usize> {
            h.last()
                .copied()
                .ok_or_else(|| Error::Config("encoder hidden widths must not be empty".into()))
        };
        let mut input = feature(&self.history_hidden)? + feature(&self.interaction_hidden)?;
        if with_kd {
            input += feature(&self.kd_hidden)?;
        }
        let mut widths = vec![input];
        widths.extend_from_slice(&self.decoder_hidden);
        widths.push(self.decoder_output());
        MlpSpec::new(widths, Activation::None)
    }
}

/// The three encoders and the decoder of the residual estimator.
#[derive(Debug, Clone)]
pub struct ResidualNets {
    pub history: MlpBundle,
    pub interaction: MlpBundle,
    pub kd: MlpBundle,
    pub decoder: MlpBundle,
}

impl ResidualNets {
    pub fn new(arch: &NetworkArch, seed: u64) -> Result<Self> {
        Ok(ResidualNets {
            history: init_params(&arch.history_spec()?, seed)?,
            interaction: init_params(&arch.interaction_spec()?, seed.wrapping_add(1))?,
            kd: init_params(&arch.kd_spec()?, seed.wrapping_add(2))?,
            decoder: init_params(&arch.decoder_spec(true)?, seed.wrapping_add(3))?,
        })
    }
}

/// Encoder features for one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub history: Vec<f64>,
    pub interaction: Vec<f64>,
    pub kd: Vec<f64>,
}

fn column(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v)
}

fn run(net: &MlpBundle, input: &[f64]) -> Result<Vec<f64>> {
    Ok(net.forward_batch(column(input))?.output().as_slice().to_vec())
}

/// Runs the three encoders on flattened feature vectors.
pub fn encode(nets: &ResidualNets, history: &[f64], interactions: &[f64], kd: &[f64]) -> Result<Encoded> {
    Ok(Encoded {
        history: run(&nets.history, history)?,
        interaction: run(&nets.interaction, interactions)?,
        kd: run(&nets.kd, kd)?,
    })
}

/// Gaussian residual in the ego frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualDistribution {
    pub means: Vec<Vec2>,
    pub variances: Vec<Vec2>,
}

impl ResidualDistribution {
    pub fn as_trajectory(&self) -> GaussianTrajectory {
        GaussianTrajectory {
            means: self.means.clone(),
            variances: self.variances.clone(),
        }
    }
}

/// How raw decoder outputs become a residual mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanHead {
    /// `C · tanh(raw)`: every component bounded by `C`.
    Confined,
    /// `scale · raw` with no bound.
    Linear(f64),
}

impl MeanHead {
    /// Value and derivative with respect to the raw output.
    pub fn apply(self, raw: f64, c: f64) -> (f64, f64) {
        match self {
            MeanHead::Confined => {
                let t = raw.tanh();
                (c * t, c * (1.0 - t * t))
            }
            MeanHead::Linear(scale) => (scale * raw, scale),
        }
    }
}

/// `σ² = exp(clamp(raw))`, with derivative (zero where the clamp is active).
pub fn variance_head(raw: f64) -> (f64, f64) {
    let (lo, hi) = (VAR_FLOOR.ln(), VAR_CEIL.ln());
    if raw < lo {
        (VAR_FLOOR, 0.0)
    } else if raw > hi {
        (VAR_CEIL, 0.0)
    } else {
        let v = raw.exp();
        (v, v)
    }
}

/// Splits raw decoder outputs into mean and variance heads.
pub fn heads_from_raw(raw: &[f64], head: MeanHead, c: f64) -> ResidualDistribution {
    let n = raw.len() / 4;
    let (m, v) = raw.split_at(2 * n);
    ResidualDistribution {
        means: m
            .chunks(2)
            .map(|p| Vec2::new(head.apply(p[0], c).0, head.apply(p[1], c).0))
            .collect(),
        variances: v
            .chunks(2)
            .map(|p| Vec2::new(variance_head(p[0]).0, variance_head(p[1]).0))
            .collect(),
    }
}

/// Decoder pass with the confined (`C · tanh`) mean head.
pub fn decode_residual(nets: &ResidualNets, enc: &Encoded, c: f64) -> Result<ResidualDistribution> {
    let mut input = enc.history.clone();
    input.extend_from_slice(&enc.interaction);
    input.extend_from_slice(&enc.kd);
    let raw = run(&nets.decoder, &input)?;
    Ok(heads_from_raw(&raw, MeanHead::Confined, c))
}
