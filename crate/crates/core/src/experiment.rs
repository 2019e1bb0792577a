//! The dataset → train → evaluate workflow: synthetic suite generation and
//! on-disk layout, train/test splits, pipeline selection, model training with
//! checkpoints, and evaluation into a comparison table.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionMode};
use crate::metrics::{score, ComparisonTable, MetricsReport, ScenarioMetrics};
use crate::model::{KdInput, Model, ModelConfig, ModelKind, Sample};
use crate::mpc::{init_state_from_history, initial_control_from_history, solve_mpc, MpcConfig};
use crate::nn::{load_checkpoint, save_checkpoint, MlpBundle};
use crate::predictors::{fit_kd_variance, KdVariancePrior, KnowledgePredictor};
use crate::residual::NetworkArch;
use crate::scene::{
    load_interaction_csv, load_map_document, load_tracks, simulate_scene, write_interaction_csv, Confinement, ConfinementRule,
    write_map_document, MapDocument, ScenarioState, SyntheticScene, SyntheticSpec, Template,
};
use crate::train::{train, LossCurve, TrainConfig};
use crate::trajectory::{GaussianTrajectory, MultiModalPrediction};

pub const MAP_FILE: &str = "map.json";
pub const TRACKS_DIR: &str = "tracks";
pub const DEFAULT_HELD_OUT: Template = Template::Curve;
pub const DEFAULT_PIPELINES: [&str; 8] = ["lin", "cv", "kd1", "kd2", "edn", "rrb", "rrb_m", "rrb_m+mpc"];

/// Samples per forward pass when predicting with a trained model.
const PREDICT_BATCH: usize = 256;

// ---------------------------------------------------------------- datasets

/// A family of synthetic scenes cycling through the listed templates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteSpec {
    pub scenes: usize,
    pub templates: Vec<String>,
    /// Shared scene parameters; its `template` field is overridden per scene.
    pub scene: SyntheticSpec,
}

impl Default for SuiteSpec {
    /// 300 scenes of 20 frames (6 anchor frames per agent), C kept clear of
    /// the raster quantization, and 0.1 m measurement noise on every track.
    fn default() -> Self {
        SuiteSpec {
            scenes: 300,
            templates: Template::ALL.iter().map(|t| t.name().to_string()).collect(),
            scene: SyntheticSpec {
                frames: 20,
                confinement: Confinement::Rule(ConfinementRule::RasterSafe),
                position_noise: 0.1,
                ..SyntheticSpec::default()
            },
        }
    }
}

impl SuiteSpec {
    pub fn validate(&self) -> Result<Vec<Template>> {
        if self.scenes == 0 {
            return Err(Error::Config("scenes: must be >= 1".into()));
        }
        if self.templates.is_empty() {
            return Err(Error::Config("templates: list at least one template".into()));
        }
        let templates = self
            .templates
            .iter()
            .map(|t| t.parse::<Template>().map_err(|e| Error::Config(format!("templates: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        for t in &templates {
            self.scene_spec(*t).validate()?;
        }
        Ok(templates)
    }

    fn scene_spec(&self, t: Template) -> SyntheticSpec {
        SyntheticSpec {
            template: t.name().to_string(),
            ..self.scene.clone()
        }
    }
}

/// Seed of the `k`-th scene of a suite.
pub fn scene_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(k as u64)
}

pub fn generate_suite(spec: &SuiteSpec, seed: u64) -> Result<Vec<SyntheticScene>> {
    let templates = spec.validate()?;
    (0..spec.scenes)
        .map(|k| simulate_scene(&spec.scene_spec(templates[k % templates.len()]), scene_seed(seed, k)))
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub scenarios: Vec<ScenarioState>,
    pub skipped_tracks: usize,
}

impl Dataset {
    pub fn from_scenes(scenes: &[SyntheticScene]) -> Result<Self> {
        let mut scenarios = Vec::new();
        for s in scenes {
            scenarios.extend(s.scenarios()?);
        }
        Ok(Dataset {
            scenarios,
            skipped_tracks: 0,
        })
    }

    pub fn scene_count(&self) -> usize {
        self.scenarios
            .iter()
            .map(|s| s.map.scene_id.as_str())
            .collect::<BTreeSet<_>>()
            .len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetSummary {
    pub scenes: usize,
    pub tracks: usize,
    pub scenarios: usize,
}

/// Writes `map.json` with every scene plus one track CSV per scene.
pub fn write_dataset(dir: &Path, scenes: &[SyntheticScene]) -> Result<DatasetSummary> {
    let tracks_dir = dir.join(TRACKS_DIR);
    fs::create_dir_all(&tracks_dir)
        .map_err(|e| Error::io(format!("creating output directory {}", tracks_dir.display()), e))?;
    let doc = MapDocument::from_maps(scenes.iter().map(|s| s.map.as_ref()));
    write_map_document(&dir.join(MAP_FILE), &doc)?;
    let mut summary = DatasetSummary {
        scenes: scenes.len(),
        tracks: 0,
        scenarios: 0,
    };
    for s in scenes {
        write_interaction_csv(&tracks_dir.join(format!("{}.csv", s.map.scene_id)), &s.track_rows())?;
        summary.tracks += s.tracks.len();
        summary.scenarios += s.scenarios()?.len();
    }
    Ok(summary)
}

/// Loads a directory written by [`write_dataset`], scenes in map-file order.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let map_path = dir.join(MAP_FILE);
    if !map_path.is_file() {
        return Err(Error::Config(format!(
            "dataset directory {} has no {MAP_FILE}; run gen-data first or pass track files",
            dir.display()
        )));
    }
    let doc = load_map_document(&map_path)?;
    let mut out = Dataset::default();
    for entry in &doc.scenes {
        let path = dir.join(TRACKS_DIR).join(format!("{}.csv", entry.id));
        if !path.is_file() {
            return Err(Error::Config(format!(
                "scene '{}' listed in {} has no track file {}",
                entry.id,
                map_path.display(),
                path.display()
            )));
        }
        let ingested = load_tracks(&path, Arc::new(entry.to_map()?))?;
        out.scenarios.extend(ingested.scenarios);
        out.skipped_tracks += ingested.skipped_tracks;
    }
    Ok(out)
}

/// Loads Interaction-format track files against one map document.
pub fn load_csv_dataset(track_files: &[PathBuf], map_file: &Path) -> Result<Dataset> {
    let mut out = Dataset::default();
    for f in track_files {
        let ingested = load_interaction_csv(f, map_file)?;
        out.scenarios.extend(ingested.scenarios);
        out.skipped_tracks += ingested.skipped_tracks;
    }
    Ok(out)
}

// ---------------------------------------------------------------- splits

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ *b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Split {
    /// 80/20 by a hash of the scene id; all scenarios of a scene stay together.
    Random,
    /// Every scene of the held-out category is test data, all others train.
    SceneGeneralization { held_out: String },
}

impl Split {
    pub fn is_test(&self, state: &ScenarioState) -> bool {
        match self {
            Split::Random => fnv1a(state.map.scene_id.as_bytes()) % 5 == 0,
            Split::SceneGeneralization { held_out } => state.map.category == *held_out,
        }
    }

    /// `(train, test)`; both sides must be non-empty.
    pub fn apply(&self, scenarios: &[ScenarioState]) -> Result<(Vec<ScenarioState>, Vec<ScenarioState>)> {
        let (test, train): (Vec<_>, Vec<_>) = scenarios.iter().cloned().partition(|s| self.is_test(s));
        if train.is_empty() || test.is_empty() {
            return Err(Error::InvalidInput(format!(
                "split '{self}' leaves {} training and {} test scenarios; both must be non-empty",
                train.len(),
                test.len()
            )));
        }
        Ok((train, test))
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Random => f.write_str("random"),
            Split::SceneGeneralization { held_out } => write!(f, "scene-generalization:{held_out}"),
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "random" => Ok(Split::Random),
            None if s == "scene-generalization" => Ok(Split::SceneGeneralization {
                held_out: DEFAULT_HELD_OUT.name().to_string(),
            }),
            Some(("scene-generalization", cat)) if !cat.is_empty() => Ok(Split::SceneGeneralization {
                held_out: cat.to_string(),
            }),
            _ => Err(Error::Config(format!(
                "unknown split '{s}' (expected random | scene-generalization[:<category>])"
            ))),
        }
    }
}

// ---------------------------------------------------------------- pipelines

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    Rrb,
    NcRrb,
    ARrb,
    RrbM,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Rrb, Variant::NcRrb, Variant::ARrb, Variant::RrbM];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Rrb => "rrb",
            Variant::NcRrb => "nc_rrb",
            Variant::ARrb => "a_rrb",
            Variant::RrbM => "rrb_m",
        }
    }

    pub fn config(self, arch: &NetworkArch, modes: usize, sigma_cross: f64) -> ModelConfig {
        let mut c = match self {
            Variant::Rrb => ModelConfig::rrb(),
            Variant::NcRrb => ModelConfig::nc_rrb(),
            Variant::ARrb => ModelConfig::a_rrb(),
            Variant::RrbM => ModelConfig::rrb_m(modes),
        };
        c.arch = arch.clone();
        c.fusion.sigma_cross = sigma_cross;
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stage {
    Knowledge(KnowledgePredictor),
    Edn,
    /// KD fused with the independently trained encoder-decoder.
    Vi { fixed_kd_variance: bool },
    Residual(Variant),
}

/// A prediction pipeline written as `[kd+]stage[+mpc]`, e.g. `kd1`,
/// `rrb_m+mpc`, `kd2+rrb`, `vi2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pipeline {
    pub stage: Stage,
    /// KD feeding a residual or VI stage.
    pub kd: KnowledgePredictor,
    pub mpc: bool,
}

impl Pipeline {
    /// Key of the trained model this pipeline needs. Residual models are
    /// always trained on KD1; a KD prefix swaps the KD at prediction time
    /// without retraining.
    pub fn model_key(&self) -> Option<String> {
        match self.stage {
            Stage::Knowledge(_) => None,
            Stage::Edn | Stage::Vi { .. } => Some("edn".into()),
            Stage::Residual(v) => Some(v.name().into()),
        }
    }

    /// KD predictors whose variance prior the pipeline uses.
    pub fn knowledge(&self) -> Option<KnowledgePredictor> {
        match self.stage {
            Stage::Knowledge(k) => Some(k),
            Stage::Edn => None,
            Stage::Vi { .. } | Stage::Residual(_) => Some(self.kd),
        }
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let prefixed = matches!(self.stage, Stage::Residual(_) | Stage::Vi { .. })
            && self.kd != KnowledgePredictor::Kd1;
        if prefixed {
            write!(f, "{}+", self.kd.name())?;
        }
        match self.stage {
            Stage::Knowledge(k) => f.write_str(k.name())?,
            Stage::Edn => f.write_str("edn")?,
            Stage::Vi { fixed_kd_variance } => f.write_str(if fixed_kd_variance { "vi2" } else { "vi1" })?,
            Stage::Residual(v) => f.write_str(v.name())?,
        }
        if self.mpc {
            f.write_str("+mpc")?;
        }
        Ok(())
    }
}

impl FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| {
            Error::Config(format!(
                "pipeline '{s}': {why} (expected [kd+]stage[+mpc] with stage one of \
                 lin, cv, kd1, kd2, edn, vi1, vi2, rrb, nc_rrb, a_rrb, rrb_m)"
            ))
        };
        let mut parts: Vec<&str> = s.split('+').collect();
        let mpc = parts.len() > 1 && parts.last() == Some(&"mpc");
        if mpc {
            parts.pop();
        }
        let (kd, stage_name) = match parts.as_slice() {
            [stage] => (None, *stage),
            [kd, stage] => (Some(kd.parse::<KnowledgePredictor>().map_err(|_| bad("unknown KD prefix"))?), *stage),
            _ => return Err(bad("too many '+' parts")),
        };
        let stage = match stage_name {
            "edn" => Stage::Edn,
            "vi1" => Stage::Vi { fixed_kd_variance: false },
            "vi2" => Stage::Vi { fixed_kd_variance: true },
            name => match Variant::ALL.iter().find(|v| v.name() == name) {
                Some(v) => Stage::Residual(*v),
                None => Stage::Knowledge(name.parse().map_err(|_| bad("unknown stage"))?),
            },
        };
        match (&stage, kd) {
            (Stage::Knowledge(_) | Stage::Edn, Some(_)) => {
                return Err(bad("a KD prefix only applies to residual and VI stages"))
            }
            (Stage::Residual(Variant::RrbM), Some(k)) if k != KnowledgePredictor::Kd1 => {
                return Err(bad("rrb_m builds its modes from KD1 lane branches"))
            }
            _ => {}
        }
        Ok(Pipeline {
            stage,
            kd: kd.unwrap_or(KnowledgePredictor::Kd1),
            mpc,
        })
    }
}

pub fn parse_pipelines(names: &[String]) -> Result<Vec<Pipeline>> {
    names.iter().map(|n| n.parse()).collect()
}

// ---------------------------------------------------------------- models

/// Everything that determines one trainable model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub key: String,
    pub kd: KnowledgePredictor,
    pub config: ModelConfig,
}

/// Architecture-level options shared by all models of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOptions {
    pub arch: NetworkArch,
    /// Modes of the multimodal residual estimator.
    pub modes: usize,
    pub sigma_cross: f64,
    /// Replaces the fusion mode of every residual model, e.g. `simple_add`
    /// trains `rrb` as the A-RRB ablation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusionMode>,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            arch: NetworkArch::default(),
            modes: 2,
            sigma_cross: 0.0,
            fusion: None,
        }
    }
}

impl ModelOptions {
    /// Spec of the model stored under `key` (`edn`, `rrb`, `rrb_m`, ...).
    pub fn spec_for_key(&self, key: &str) -> Result<ModelSpec> {
        if key == "edn" {
            let mut config = ModelConfig::edn();
            config.arch = self.arch.clone();
            return Ok(ModelSpec {
                key: key.into(),
                kd: KnowledgePredictor::Kd1,
                config,
            });
        }
        let Some(v) = Variant::ALL.iter().find(|v| v.name() == key) else {
            return Err(Error::Config(format!("'{key}' does not name a trainable model")));
        };
        let mut config = v.config(&self.arch, self.modes, self.sigma_cross);
        if let Some(mode) = self.fusion {
            config.fusion.mode = mode;
        }
        config.validate()?;
        Ok(ModelSpec {
            key: key.into(),
            kd: KnowledgePredictor::Kd1,
            config,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    key: String,
    kd: String,
    config: ModelConfig,
    prior: KdVariancePrior,
    train: TrainConfig,
    curve: LossCurve,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub key: String,
    pub kd: KnowledgePredictor,
    /// Variance prior of `kd` fitted on the training split.
    pub prior: KdVariancePrior,
    pub train: TrainConfig,
    pub model: Model,
    pub curve: LossCurve,
}

impl TrainedModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            key: self.key.clone(),
            kd: self.kd.name().into(),
            config: self.model.config.clone(),
            prior: self.prior.clone(),
            train: self.train.clone(),
            curve: self.curve.clone(),
        };
        let named = self.model.named_bundles();
        let refs: Vec<(&str, &MlpBundle)> = named.iter().map(|(n, b)| (n.as_str(), *b)).collect();
        save_checkpoint(path, &serde_json::to_value(meta)?, &refs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        let meta: CheckpointMeta = serde_json::from_value(ck.meta)
            .map_err(|e| Error::Checkpoint(format!("{}: bad metadata: {e}", path.display())))?;
        Ok(TrainedModel {
            kd: meta.kd.parse()?,
            model: Model::from_bundles(meta.config, ck.bundles)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?,
            key: meta.key,
            prior: meta.prior,
            train: meta.train,
            curve: meta.curve,
        })
    }

    /// Fails if the stored model does not match what `options` would build.
    pub fn check_against(&self, options: &ModelOptions) -> Result<()> {
        let want = options.spec_for_key(&self.key)?;
        if want.config != self.model.config || want.kd != self.kd {
            return Err(Error::Checkpoint(format!(
                "checkpoint '{}' was trained with {:?} (KD {}), the configuration asks for {:?} (KD {})",
                self.key, self.model.config, self.kd, want.config, want.kd
            )));
        }
        Ok(())
    }
}

/// File name of a model checkpoint inside an output directory.
pub fn checkpoint_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("{key}.ckpt"))
}

pub fn build_samples(
    states: &[ScenarioState],
    kd: &KnowledgePredictor,
    prior: &KdVariancePrior,
    config: &ModelConfig,
) -> Result<Vec<Sample>> {
    states
        .iter()
        .map(|s| Sample::from_state(s, kd, prior, &config.arch, config.modes, None))
        .collect()
}

pub fn train_model(
    spec: &ModelSpec,
    train_states: &[ScenarioState],
    prior: &KdVariancePrior,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(usize, f64),
) -> Result<TrainedModel> {
    let samples = build_samples(train_states, &spec.kd, prior, &spec.config)?;
    let mut model = Model::new(spec.config.clone(), cfg.seed)?;
    let curve = train(&mut model, &samples, cfg, on_epoch)?;
    Ok(TrainedModel {
        key: spec.key.clone(),
        kd: spec.kd,
        prior: prior.clone(),
        train: cfg.clone(),
        model,
        curve,
    })
}

/// Fits the variance prior of every listed KD on the training scenarios.
pub fn fit_priors(
    train_states: &[ScenarioState],
    kds: impl IntoIterator<Item = KnowledgePredictor>,
) -> Result<BTreeMap<String, KdVariancePrior>> {
    kds.into_iter()
        .map(|k| Ok((k.name().to_string(), fit_kd_variance(train_states, &k)?)))
        .collect()
}

// ---------------------------------------------------------------- evaluation

/// Fitted priors and trained models available to the pipelines.
#[derive(Debug, Clone, Default)]
pub struct Context {
    pub priors: BTreeMap<String, KdVariancePrior>,
    pub models: BTreeMap<String, TrainedModel>,
}

impl Context {
    pub fn prior(&self, kd: &KnowledgePredictor) -> KdVariancePrior {
        self.priors.get(kd.name()).cloned().unwrap_or_default()
    }

    pub fn model(&self, key: &str) -> Result<&TrainedModel> {
        self.models.get(key).ok_or_else(|| {
            Error::Config(format!(
                "no trained model '{key}'; train it first or drop the pipelines that need it"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub mpc: MpcConfig,
    /// Worker threads for the per-scenario MPC solves.
    pub jobs: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            mpc: MpcConfig::default(),
            jobs: 1,
        }
    }
}

/// Order-preserving parallel map over `jobs` scoped threads.
fn par_map<T: Sync, R: Send>(
    items: &[T],
    jobs: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    if jobs <= 1 || items.len() < 2 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let f = &f;
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| scope.spawn(move || c.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Ego-frame predictions of a trained model fed by `kd`, one list of modes
/// per scenario.
fn model_predictions_local(
    trained: &TrainedModel,
    kd: &KnowledgePredictor,
    prior: &KdVariancePrior,
    states: &[ScenarioState],
) -> Result<Vec<(Sample, Vec<GaussianTrajectory>)>> {
    let samples = build_samples(states, kd, prior, &trained.model.config)?;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(PREDICT_BATCH) {
        let batch: Vec<&Sample> = chunk.iter().collect();
        let preds = trained.model.predict_local(&batch)?;
        out.extend(chunk.iter().cloned().zip(preds));
    }
    Ok(out)
}

/// Projects every mode onto a kinematically feasible trajectory; variances pass through.
pub fn apply_mpc(
    pred: &MultiModalPrediction,
    state: &ScenarioState,
    cfg: &MpcConfig,
) -> Result<MultiModalPrediction> {
    let s0 = init_state_from_history(&state.ego);
    let u_prev = initial_control_from_history(&state.ego, cfg);
    let modes = pred
        .modes
        .iter()
        .map(|m| {
            let sol = solve_mpc(&m.means, &s0, u_prev, cfg)?;
            Ok(GaussianTrajectory {
                means: sol.positions(),
                variances: m.variances.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MultiModalPrediction::with_probabilities(modes, pred.probabilities.clone())
}

/// World-frame predictions of one pipeline for every scenario.
pub fn predict_pipeline(
    pipeline: &Pipeline,
    states: &[ScenarioState],
    ctx: &Context,
    opts: &EvalOptions,
) -> Result<Vec<MultiModalPrediction>> {
    let raw: Vec<MultiModalPrediction> = match pipeline.stage {
        Stage::Knowledge(k) => {
            let prior = ctx.prior(&k);
            states
                .iter()
                .map(|s| MultiModalPrediction::single(k.predict(s, &prior)))
                .collect()
        }
        Stage::Edn | Stage::Residual(_) => {
            let trained = ctx.model(&pipeline.model_key().unwrap())?;
            let prior = if pipeline.stage == Stage::Edn || pipeline.kd == trained.kd {
                trained.prior.clone()
            } else {
                ctx.prior(&pipeline.kd)
            };
            let kd = if pipeline.stage == Stage::Edn { trained.kd } else { pipeline.kd };
            model_predictions_local(trained, &kd, &prior, states)?
                .into_iter()
                .map(|(sample, modes)| {
                    MultiModalPrediction::uniform(
                        modes.iter().map(|t| sample.frame.trajectory_to_world(t)).collect(),
                    )
                })
                .collect::<Result<_>>()?
        }
        Stage::Vi { fixed_kd_variance } => {
            let edn = ctx.model("edn")?;
            let prior = ctx.prior(&pipeline.kd);
            let cfg = FusionConfig::with_mode(if fixed_kd_variance {
                FusionMode::ViFixed
            } else {
                FusionMode::ViIndependent
            });
            model_predictions_local(edn, &edn.kd, &edn.prior, states)?
                .into_iter()
                .zip(states)
                .map(|((sample, modes), state)| {
                    let kd = KdInput::from_hypothesis(&pipeline.kd.hypothesis(state, &prior), &sample.frame);
                    let fused = kd.fuse_independent(&modes[0], &cfg)?;
                    Ok(MultiModalPrediction::single(sample.frame.trajectory_to_world(&fused)))
                })
                .collect::<Result<_>>()?
        }
    };
    if !pipeline.mpc {
        return Ok(raw);
    }
    let pairs: Vec<(&MultiModalPrediction, &ScenarioState)> = raw.iter().zip(states).collect();
    par_map(&pairs, opts.jobs, |(p, s)| apply_mpc(p, s, &opts.mpc))
}

/// Per-pipeline scenario scores plus the comparison table.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub table: ComparisonTable,
    pub scores: Vec<(String, Vec<ScenarioMetrics>)>,
}

pub fn evaluate(
    pipelines: &[Pipeline],
    test: &[ScenarioState],
    ctx: &Context,
    opts: &EvalOptions,
    split: &str,
) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::InvalidInput("evaluation set is empty".into()));
    }
    let mut table = ComparisonTable {
        split: split.to_string(),
        rows: Vec::new(),
    };
    let mut scores = Vec::new();
    for p in pipelines {
        let preds = predict_pipeline(p, test, ctx, opts)?;
        let s = preds
            .iter()
            .zip(test)
            .map(|(pred, state)| score(pred, state))
            .collect::<Result<Vec<_>>>()?;
        let name = p.to_string();
        info!("evaluated {name} on {} scenarios", s.len());
        table.rows.push(MetricsReport::from_scores(name.clone(), &s)?);
        scores.push((name, s));
    }
    Ok(Evaluation { table, scores })
}

/// Model keys needed by a pipeline list, in a stable order.
pub fn required_models(pipelines: &[Pipeline]) -> BTreeSet<String> {
    pipelines.iter().filter_map(Pipeline::model_key).collect()
}

/// Every KD whose prior some pipeline or model needs.
pub fn required_knowledge(pipelines: &[Pipeline]) -> BTreeSet<String> {
    let mut out: BTreeSet<String> = pipelines
        .iter()
        .filter_map(|p| p.knowledge().map(|k| k.name().to_string()))
        .collect();
    if pipelines.iter().any(|p| matches!(p.stage, Stage::Residual(_) | Stage::Vi { .. })) {
        out.insert(KnowledgePredictor::Kd1.name().to_string());
    }
    out
}

// ---------------------------------------------------------------- full runs

/// Options of a complete train-and-evaluate run on an in-memory dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub split: Split,
    pub pipelines: Vec<Pipeline>,
    pub models: ModelOptions,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub context: Context,
    pub evaluation: Evaluation,
    pub train_size: usize,
    pub test_size: usize,
}

/// Splits, fits priors, trains every needed model and evaluates all pipelines.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    scenarios: &[ScenarioState],
    mut on_epoch: impl FnMut(&str, usize, f64),
) -> Result<ExperimentOutput> {
    let (train_set, test_set) = cfg.split.apply(scenarios)?;
    let kds = required_knowledge(&cfg.pipelines)
        .into_iter()
        .map(|k| k.parse())
        .collect::<Result<Vec<KnowledgePredictor>>>()?;
    let mut context = Context {
        priors: fit_priors(&train_set, kds)?,
        models: BTreeMap::new(),
    };
    for key in required_models(&cfg.pipelines) {
        let spec = cfg.models.spec_for_key(&key)?;
        let prior = match spec.config.kind {
            ModelKind::Residual => context.prior(&spec.kd),
            ModelKind::EncoderDecoder => KdVariancePrior::default(),
        };
        let trained = train_model(&spec, &train_set, &prior, &cfg.train, |e, l| on_epoch(&key, e, l))?;
        context.models.insert(key, trained);
    }
    let evaluation = evaluate(&cfg.pipelines, &test_set, &context, &cfg.eval, &cfg.split.to_string())?;
    Ok(ExperimentOutput {
        context,
        evaluation,
        train_size: train_set.len(),
        test_size: test_set.len(),
    })
}

/// Writes `metrics.txt`, `metrics.json` and `scores.csv` (one row per
/// pipeline and scenario).
pub fn write_evaluation(dir: &Path, eval: &Evaluation) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(format!("writing {}", p.display()), e))
    };
    write("metrics.txt", eval.table.to_text())?;
    write("metrics.json", eval.table.to_json()? + "\n")?;
    let mut csv = String::from("pipeline,scenario,category,ade,fde,rv,ct\n");
    for (name, scores) in &eval.scores {
        for s in scores {
            csv.push_str(&format!(
                "{name},{},{},{},{},{},{}\n",
                s.key, s.category, s.ade, s.fde, s.rv, s.ct
            ));
        }
    }
    write("scores.csv", csv)
}
