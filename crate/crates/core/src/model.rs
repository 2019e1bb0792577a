//! Trainable models: the residual estimator (single- or multi-mode) and the
//! plain encoder-decoder baseline.
//!
//! A batch runs through every network as one column matrix. Residuals are
//! predicted and fused in the track frame of each KD step (along-track,
//! cross-track), so the confinement bound limits how far a prediction can
//! leave its KD lane. The loss is the winner-takes-all Gaussian NLL of the
//! fused (or, for the baseline, direct) prediction, averaged over the batch.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{fuse, fuse_scalar, FusionConfig, FusionMode};
use crate::geometry::Vec2;
use crate::nn::{MlpBundle, Tape};
use crate::geometry::wrap_angle;
use crate::predictors::{enumerate_lane_branches, KdHypothesis, KdVariancePrior, KnowledgePredictor};
use crate::residual::{
    ego_frame, history_features, preprocess_interactions, variance_head, EgoFrame, MeanHead,
    NetworkArch, ResidualNets, INPUT_SCALE,
};
use crate::scene::ScenarioState;
use crate::train::{gaussian_nll, Nll};
use crate::trajectory::{closest_mode, rotate_diag_variance, GaussianTrajectory, MultiModalPrediction};
use crate::{OBS_LEN, PRED_LEN};

/// Meters per unit of raw decoder output for the baseline's absolute positions.
pub const EDN_OUTPUT_SCALE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// KD trajectory + learned residual, fused.
    Residual,
    /// History and interaction encoders decoding the full trajectory.
    EncoderDecoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub arch: NetworkArch,
    pub modes: usize,
    pub mean_head: MeanHead,
    pub fusion: FusionConfig,
}

impl ModelConfig {
    pub fn rrb() -> Self {
        ModelConfig {
            kind: ModelKind::Residual,
            arch: NetworkArch::default(),
            modes: 1,
            mean_head: MeanHead::Confined,
            fusion: FusionConfig::default(),
        }
    }

    /// Residual estimator without the `C · tanh` confinement.
    pub fn nc_rrb() -> Self {
        ModelConfig {
            mean_head: MeanHead::Linear(1.0),
            ..Self::rrb()
        }
    }

    /// Residual estimator fused by plain addition.
    pub fn a_rrb() -> Self {
        ModelConfig {
            fusion: FusionConfig::with_mode(FusionMode::SimpleAdd),
            ..Self::rrb()
        }
    }

    pub fn rrb_m(modes: usize) -> Self {
        ModelConfig {
            modes,
            ..Self::rrb()
        }
    }

    pub fn edn() -> Self {
        ModelConfig {
            kind: ModelKind::EncoderDecoder,
            mean_head: MeanHead::Linear(EDN_OUTPUT_SCALE),
            ..Self::rrb()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes == 0 {
            return Err(Error::Config("a model needs at least one mode".into()));
        }
        if self.kind == ModelKind::EncoderDecoder && self.modes != 1 {
            return Err(Error::Config("the encoder-decoder baseline is single-mode".into()));
        }
        if matches!(self.fusion.mode, FusionMode::ViIndependent | FusionMode::ViFixed) {
            return Err(Error::Config(format!(
                "fusion mode {} combines a KD trajectory with a separately trained \
                 encoder-decoder and is not a training mode",
                self.fusion.mode
            )));
        }
        Ok(())
    }
}

/// One KD hypothesis in the ego frame. The network sees it in lane
/// coordinates relative to the ego (arc length travelled, lateral shift):
/// the ego frame bent along the lane, so the encoding does not depend on the
/// road's curvature.
#[derive(Debug, Clone, PartialEq)]
pub struct KdInput {
    pub means: Vec<Vec2>,
    /// Track heading of each step relative to the ego heading.
    pub headings: Vec<f64>,
    /// (along-track, cross-track) variances.
    pub track_variances: Vec<Vec2>,
    /// Distance of each mean from its lane centerline.
    pub lane_offsets: Vec<f64>,
    pub features: Vec<f64>,
}

impl KdInput {
    pub fn new(
        means: Vec<Vec2>,
        headings: Vec<f64>,
        track_variances: Vec<Vec2>,
        lane_coords: &[Vec2],
        lane_offsets: Vec<f64>,
    ) -> Self {
        KdInput {
            lane_offsets,
            features: history_features(lane_coords),
            means,
            headings,
            track_variances,
        }
    }

    pub fn from_hypothesis(h: &KdHypothesis, frame: &EgoFrame) -> Self {
        KdInput::new(
            frame.means_to_local(&h.trajectory.means),
            h.headings.iter().map(|a| wrap_angle(a - frame.heading)).collect(),
            h.track_variances.clone(),
            &h.lane_coords,
            h.lane_offsets.clone(),
        )
    }

    /// Per-axis residual bound at step `j`: `c` along the track; across it,
    /// `c` shrunk by the KD point's own distance from the centerline so the
    /// fused point stays as far inside the road as an on-center one would.
    pub fn bound(&self, c: f64, j: usize, axis: usize) -> f64 {
        if axis == 0 {
            c
        } else {
            (c - self.lane_offsets[j]).max(0.0)
        }
    }

    /// Ego-frame trajectory (variances as the rotated diagonal).
    pub fn trajectory(&self) -> GaussianTrajectory {
        GaussianTrajectory {
            means: self.means.clone(),
            variances: self
                .track_variances
                .iter()
                .zip(&self.headings)
                .map(|(v, h)| {
                    let (s, c) = h.sin_cos();
                    rotate_diag_variance(*v, c, s)
                })
                .collect(),
        }
    }

    /// Ego-frame points expressed as track-frame offsets from the KD means.
    pub fn track_offsets(&self, points: &[Vec2]) -> Vec<Vec2> {
        points
            .iter()
            .zip(self.means.iter().zip(&self.headings))
            .map(|(p, (m, h))| (*p - *m).rotate(-h))
            .collect()
    }

    /// Track-frame offsets back to an ego-frame trajectory.
    pub fn offsets_to_ego(&self, offsets: &GaussianTrajectory) -> GaussianTrajectory {
        let rotated = |v: &Vec2, h: f64| {
            let (s, c) = h.sin_cos();
            rotate_diag_variance(*v, c, s)
        };
        GaussianTrajectory {
            means: offsets
                .means
                .iter()
                .zip(self.means.iter().zip(&self.headings))
                .map(|(o, (m, h))| *m + o.rotate(*h))
                .collect(),
            variances: offsets
                .variances
                .iter()
                .zip(&self.headings)
                .map(|(v, h)| rotated(v, *h))
                .collect(),
        }
    }

    /// Fuses an independent ego-frame prediction with this hypothesis,
    /// treating it as a residual from the KD means in the track frame.
    pub fn fuse_independent(
        &self,
        independent: &GaussianTrajectory,
        cfg: &FusionConfig,
    ) -> Result<GaussianTrajectory> {
        let kd = GaussianTrajectory {
            means: vec![Vec2::ZERO; self.means.len()],
            variances: self.track_variances.clone(),
        };
        let residual = GaussianTrajectory {
            means: self.track_offsets(&independent.means),
            variances: independent
                .variances
                .iter()
                .zip(&self.headings)
                .map(|(v, h)| {
                    let (s, c) = (-h).sin_cos();
                    rotate_diag_variance(*v, c, s)
                })
                .collect(),
        };
        let (fused, _) = fuse(&kd, &residual, cfg)?;
        Ok(self.offsets_to_ego(&fused))
    }
}

/// Network-ready view of one scenario: ego-frame features, KD hypotheses,
/// confinement bound and (for training) ego-frame ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub key: String,
    pub frame: EgoFrame,
    pub history: Vec<f64>,
    pub interaction: Vec<f64>,
    pub kd: Vec<KdInput>,
    pub c: f64,
    pub gt: Option<Vec<Vec2>>,
}

/// One KD hypothesis per decoder: the predictor itself for a single mode,
/// lane branches otherwise.
pub fn kd_hypotheses(
    state: &ScenarioState,
    predictor: &KnowledgePredictor,
    prior: &KdVariancePrior,
    modes: usize,
) -> Vec<KdHypothesis> {
    if modes <= 1 {
        return vec![predictor.hypothesis(state, prior)];
    }
    let mut out = enumerate_lane_branches(state, prior, modes);
    // fewer branches than decoders: repeat the last one
    while out.len() < modes {
        out.push(out.last().unwrap().clone());
    }
    out
}

impl Sample {
    pub fn from_state(
        state: &ScenarioState,
        predictor: &KnowledgePredictor,
        prior: &KdVariancePrior,
        arch: &NetworkArch,
        modes: usize,
        c_override: Option<f64>,
    ) -> Result<Self> {
        if arch.obs_len != OBS_LEN || arch.pred_len != PRED_LEN {
            return Err(Error::Config(format!(
                "scenario data has T_o = {OBS_LEN}, T_p = {PRED_LEN}; architecture expects {} / {}",
                arch.obs_len, arch.pred_len
            )));
        }
        let frame = ego_frame(state);
        let kd = kd_hypotheses(state, predictor, prior, modes)
            .into_iter()
            .map(|h| KdInput::from_hypothesis(&h, &frame))
            .collect();
        Ok(Sample {
            key: state.key(),
            frame,
            history: history_features(&frame.means_to_local(&state.ego.positions())),
            interaction: preprocess_interactions(state, &frame, arch.max_agents).features(),
            kd,
            c: c_override.unwrap_or(state.map.confinement_c),
            gt: state
                .ground_truth_positions()
                .map(|gt| frame.means_to_local(&gt)),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub history: MlpBundle,
    pub interaction: MlpBundle,
    pub kd: Option<MlpBundle>,
    pub decoders: Vec<MlpBundle>,
}

/// Prediction of one (sample, mode). `track` holds the fused offsets from the
/// KD means in the track frame (the absolute prediction for the baseline);
/// the sensitivities of its entries (index `2j + axis`) to the raw decoder
/// outputs drive the backward pass.
#[derive(Debug, Clone)]
struct ModeOutput {
    traj: GaussianTrajectory,
    track: GaussianTrajectory,
    mean_wrt_raw_mean: Vec<f64>,
    mean_wrt_raw_var: Vec<f64>,
    var_wrt_raw_var: Vec<f64>,
}

struct Forward {
    history: Tape,
    interaction: Tape,
    kd: Option<Tape>,
    decoders: Vec<Tape>,
    /// `outputs[i][m]` for sample `i`, mode `m`.
    outputs: Vec<Vec<ModeOutput>>,
}

fn columns(batch: &[&Sample], rows: usize, f: impl Fn(&Sample) -> &[f64]) -> Result<DMatrix<f64>> {
    let mut m = DMatrix::zeros(rows, batch.len());
    for (i, s) in batch.iter().enumerate() {
        let v = f(s);
        if v.len() != rows {
            return Err(Error::Dimension {
                context: "sample features",
                expected: rows,
                actual: v.len(),
            });
        }
        m.column_mut(i).copy_from_slice(v);
    }
    Ok(m)
}

fn stack(parts: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows = parts.iter().map(|p| p.nrows()).sum();
    let mut out = DMatrix::zeros(rows, parts[0].ncols());
    let mut r = 0;
    for p in parts {
        out.rows_mut(r, p.nrows()).copy_from(p);
        r += p.nrows();
    }
    out
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let nets = ResidualNets::new(&config.arch, seed)?;
        let with_kd = config.kind == ModelKind::Residual;
        let decoder_spec = config.arch.decoder_spec(with_kd)?;
        let decoders = (0..config.modes)
            .map(|m| crate::nn::init_params(&decoder_spec, seed.wrapping_add(3 + 97 * m as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Model {
            history: nets.history,
            interaction: nets.interaction,
            kd: with_kd.then_some(nets.kd),
            decoders,
            config,
        })
    }

    /// Rebuilds a model from named networks, checking every layer layout.
    pub fn from_bundles(config: ModelConfig, mut named: Vec<(String, MlpBundle)>) -> Result<Self> {
        let template = Model::new(config.clone(), 0)?;
        let mut take = |name: &str, want: &MlpBundle| -> Result<MlpBundle> {
            let pos = named.iter().position(|(n, _)| n == name).ok_or_else(|| {
                Error::Checkpoint(format!("network '{name}' missing for a {:?} model", config.kind))
            })?;
            let (_, b) = named.swap_remove(pos);
            if b.spec != want.spec {
                return Err(Error::Checkpoint(format!(
                    "network '{name}' has layers {:?}, the configured architecture needs {:?}",
                    b.spec.layer_widths, want.spec.layer_widths
                )));
            }
            Ok(b)
        };
        let history = take("history", &template.history)?;
        let interaction = take("interaction", &template.interaction)?;
        let kd = match &template.kd {
            Some(k) => Some(take("kd", k)?),
            None => None,
        };
        let decoders = template
            .decoders
            .iter()
            .enumerate()
            .map(|(m, d)| take(&format!("decoder_{m}"), d))
            .collect::<Result<Vec<_>>>()?;
        if let Some((extra, _)) = named.first() {
            return Err(Error::Checkpoint(format!(
                "unexpected network '{extra}' for a {:?} model with {} mode(s)",
                config.kind, config.modes
            )));
        }
        Ok(Model {
            config,
            history,
            interaction,
            kd,
            decoders,
        })
    }

    pub fn named_bundles(&self) -> Vec<(String, &MlpBundle)> {
        let mut v = vec![
            ("history".to_string(), &self.history),
            ("interaction".to_string(), &self.interaction),
        ];
        if let Some(k) = &self.kd {
            v.push(("kd".to_string(), k));
        }
        for (m, d) in self.decoders.iter().enumerate() {
            v.push((format!("decoder_{m}"), d));
        }
        v
    }

    fn bundles_mut(&mut self) -> Vec<&mut MlpBundle> {
        let mut v = vec![&mut self.history, &mut self.interaction];
        if let Some(k) = &mut self.kd {
            v.push(k);
        }
        v.extend(self.decoders.iter_mut());
        v
    }

    pub fn num_params(&self) -> usize {
        self.named_bundles().iter().map(|(_, b)| b.num_params()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.bundles_mut().into_iter().for_each(MlpBundle::zero_grads);
    }

    pub fn adam_step(&mut self, lr: f64) -> Result<()> {
        self.bundles_mut().into_iter().try_for_each(|b| b.adam_step(lr))
    }

    pub fn param_norms(&self) -> Vec<(String, f64)> {
        self.named_bundles()
            .into_iter()
            .map(|(n, b)| (n, b.param_norm()))
            .collect()
    }

    pub fn grad_norms(&self) -> Vec<(String, f64)> {
        self.named_bundles()
            .into_iter()
            .map(|(n, b)| (n, b.grad_norm()))
            .collect()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.named_bundles()
            .into_iter()
            .flat_map(|(_, b)| b.params_flat())
            .collect()
    }

    pub fn grads_flat(&self) -> Vec<f64> {
        self.named_bundles()
            .into_iter()
            .flat_map(|(_, b)| b.grads_flat())
            .collect()
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Dimension {
                context: "model parameter vector",
                expected: self.num_params(),
                actual: flat.len(),
            });
        }
        let mut off = 0;
        for b in self.bundles_mut() {
            let n = b.num_params();
            b.set_params_flat(&flat[off..off + n])?;
            off += n;
        }
        Ok(())
    }

    fn feature_width(b: &MlpBundle) -> usize {
        b.spec.output_width()
    }

    fn forward(&self, batch: &[&Sample]) -> Result<Forward> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let arch = &self.config.arch;
        let n = batch.len();
        let modes = self.config.modes;
        let t = arch.pred_len;
        let history = self
            .history
            .forward_batch(columns(batch, arch.history_input(), |s| &s.history)?)?;
        let interaction = self
            .interaction
            .forward_batch(columns(batch, arch.interaction_input(), |s| &s.interaction)?)?;

        let kd = match &self.kd {
            Some(net) => {
                let mut x = DMatrix::zeros(arch.kd_input(), n * modes);
                for (i, s) in batch.iter().enumerate() {
                    if s.kd.len() != modes {
                        return Err(Error::Dimension {
                            context: "KD hypotheses per sample",
                            expected: modes,
                            actual: s.kd.len(),
                        });
                    }
                    for (m, k) in s.kd.iter().enumerate() {
                        if k.features.len() != arch.kd_input() || k.means.len() != t {
                            return Err(Error::Dimension {
                                context: "KD features",
                                expected: arch.kd_input(),
                                actual: k.features.len(),
                            });
                        }
                        x.column_mut(m * n + i).copy_from_slice(&k.features);
                    }
                }
                Some(net.forward_batch(x)?)
            }
            None => None,
        };

        let mut decoders = Vec::with_capacity(modes);
        for m in 0..modes {
            let mut parts = vec![history.output().clone(), interaction.output().clone()];
            if let Some(k) = &kd {
                parts.push(k.output().columns(m * n, n).into_owned());
            }
            decoders.push(self.decoders[m].forward_batch(stack(&parts))?);
        }

        let mut outputs = Vec::with_capacity(n);
        for (i, s) in batch.iter().enumerate() {
            let per_mode = (0..modes)
                .map(|m| self.head(s, m, decoders[m].output().column(i).as_slice(), t))
                .collect();
            outputs.push(per_mode);
        }
        Ok(Forward {
            history,
            interaction,
            kd,
            decoders,
            outputs,
        })
    }

    /// Turns raw decoder outputs into the final prediction.
    fn head(&self, s: &Sample, mode: usize, raw: &[f64], t: usize) -> ModeOutput {
        let mut means = Vec::with_capacity(t);
        let mut variances = Vec::with_capacity(t);
        let mut track_means = Vec::with_capacity(t);
        let mut track_variances = Vec::with_capacity(t);
        let mut jmm = vec![0.0; 2 * t];
        let mut jmv = vec![0.0; 2 * t];
        let mut jvv = vec![0.0; 2 * t];
        for j in 0..t {
            let mut mean = [0.0; 2];
            let mut var = [0.0; 2];
            for axis in 0..2 {
                let k = 2 * j + axis;
                let c = match self.config.kind {
                    ModelKind::EncoderDecoder => s.c,
                    ModelKind::Residual => s.kd[mode].bound(s.c, j, axis),
                };
                let (mu_res, dmu) = self.config.mean_head.apply(raw[k], c);
                let (sigma_res, dsigma) = variance_head(raw[2 * t + k]);
                match self.config.kind {
                    ModelKind::EncoderDecoder => {
                        mean[axis] = mu_res;
                        var[axis] = sigma_res;
                        jmm[k] = dmu;
                        jvv[k] = dsigma;
                    }
                    ModelKind::Residual => {
                        let kd = &s.kd[mode];
                        let pick = |v: Vec2| if axis == 0 { v.x } else { v.y };
                        let f = fuse_scalar(
                            &self.config.fusion,
                            0.0,
                            pick(kd.track_variances[j]),
                            mu_res,
                            sigma_res,
                        );
                        mean[axis] = f.mean;
                        var[axis] = f.var;
                        jmm[k] = f.dmean_dmu_res * dmu;
                        jmv[k] = f.dmean_dsigma_res * dsigma;
                        jvv[k] = f.dvar_dsigma_res * dsigma;
                    }
                }
            }
            let (mean, var) = (Vec2::new(mean[0], mean[1]), Vec2::new(var[0], var[1]));
            track_means.push(mean);
            track_variances.push(var);
            match self.config.kind {
                ModelKind::EncoderDecoder => {
                    means.push(mean);
                    variances.push(var);
                }
                ModelKind::Residual => {
                    let kd = &s.kd[mode];
                    let (sin, cos) = kd.headings[j].sin_cos();
                    means.push(kd.means[j] + mean.rotate(kd.headings[j]));
                    variances.push(rotate_diag_variance(var, cos, sin));
                }
            }
        }
        ModeOutput {
            traj: GaussianTrajectory { means, variances },
            track: GaussianTrajectory {
                means: track_means,
                variances: track_variances,
            },
            mean_wrt_raw_mean: jmm,
            mean_wrt_raw_var: jmv,
            var_wrt_raw_var: jvv,
        }
    }

    /// Ego-frame predictions, one list of modes per sample.
    pub fn predict_local(&self, batch: &[&Sample]) -> Result<Vec<Vec<GaussianTrajectory>>> {
        Ok(self
            .forward(batch)?
            .outputs
            .into_iter()
            .map(|modes| modes.into_iter().map(|o| o.traj).collect())
            .collect())
    }

    /// World-frame prediction for one sample with uniform mode probabilities.
    pub fn predict(&self, sample: &Sample) -> Result<MultiModalPrediction> {
        let modes = self.predict_local(&[sample])?.pop().unwrap();
        MultiModalPrediction::uniform(
            modes
                .iter()
                .map(|t| sample.frame.trajectory_to_world(t))
                .collect(),
        )
    }

    /// Winning mode and its NLL for every sample. Rotations preserve
    /// distances, so the winner is the same in every frame.
    fn batch_losses(&self, fwd: &Forward, batch: &[&Sample]) -> Result<Vec<(usize, Nll)>> {
        batch
            .iter()
            .zip(&fwd.outputs)
            .map(|(s, outs)| {
                let gt = s.gt.as_ref().ok_or_else(|| {
                    Error::InvalidInput(format!("sample {} has no ground truth", s.key))
                })?;
                let mode = closest_mode(outs.iter().map(|o| o.traj.means.as_slice()), gt);
                let target = match self.config.kind {
                    ModelKind::EncoderDecoder => gt.clone(),
                    ModelKind::Residual => s.kd[mode].track_offsets(gt),
                };
                let o = &outs[mode].track;
                Ok((mode, gaussian_nll(&o.means, &o.variances, &target)?))
            })
            .collect()
    }

    /// Mean WTA loss over the batch.
    pub fn loss(&self, batch: &[&Sample]) -> Result<f64> {
        let fwd = self.forward(batch)?;
        let losses = self.batch_losses(&fwd, batch)?;
        Ok(losses.iter().map(|(_, l)| l.loss).sum::<f64>() / batch.len() as f64)
    }

    /// Mean WTA loss over the batch; accumulates its parameter gradients.
    pub fn loss_and_backward(&mut self, batch: &[&Sample]) -> Result<f64> {
        let fwd = self.forward(batch)?;
        let losses = self.batch_losses(&fwd, batch)?;
        let n = batch.len();
        let scale = 1.0 / n as f64;
        let modes = self.config.modes;
        let t = self.config.arch.pred_len;

        let h_width = Self::feature_width(&self.history);
        let i_width = Self::feature_width(&self.interaction);
        let mut d_hist = DMatrix::zeros(h_width, n);
        let mut d_int = DMatrix::zeros(i_width, n);
        let mut d_kd = self.kd.as_ref().map(|k| DMatrix::zeros(Self::feature_width(k), n * modes));

        for m in 0..modes {
            let mut d_raw = DMatrix::zeros(4 * t, n);
            let mut any = false;
            for (i, (mode, w)) in losses.iter().enumerate() {
                if *mode != m {
                    continue;
                }
                any = true;
                let o = &fwd.outputs[i][m];
                for j in 0..t {
                    for axis in 0..2 {
                        let k = 2 * j + axis;
                        let pick = |v: Vec2| if axis == 0 { v.x } else { v.y };
                        let dl_dmu = pick(w.d_means[j]) * scale;
                        let dl_dvar = pick(w.d_variances[j]) * scale;
                        d_raw[(k, i)] = dl_dmu * o.mean_wrt_raw_mean[k];
                        d_raw[(2 * t + k, i)] = dl_dmu * o.mean_wrt_raw_var[k] + dl_dvar * o.var_wrt_raw_var[k];
                    }
                }
            }
            if !any {
                continue;
            }
            let d_in = self.decoders[m].backward_batch(&fwd.decoders[m], d_raw)?;
            d_hist += d_in.rows(0, h_width);
            d_int += d_in.rows(h_width, i_width);
            if let Some(dk) = &mut d_kd {
                let kw = dk.nrows();
                dk.columns_mut(m * n, n).copy_from(&d_in.rows(h_width + i_width, kw));
            }
        }
        self.history.backward_batch(&fwd.history, d_hist)?;
        self.interaction.backward_batch(&fwd.interaction, d_int)?;
        if let (Some(net), Some(tape), Some(dk)) = (&mut self.kd, &fwd.kd, d_kd) {
            net.backward_batch(tape, dk)?;
        }
        Ok(losses.iter().map(|(_, l)| l.loss).sum::<f64>() * scale)
    }
}

/// Scales a raw ego-frame point list into network units.
pub fn to_network_units(points: &[Vec2]) -> Vec<f64> {
    points
        .iter()
        .flat_map(|p| [p.x * INPUT_SCALE, p.y * INPUT_SCALE])
        .collect()
}
