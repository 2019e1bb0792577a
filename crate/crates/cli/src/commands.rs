use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context as _, Result};
use log::info;
use serde::{Deserialize, Serialize};

use rrb_core::experiment::{
    checkpoint_path, evaluate, fit_priors, generate_suite, load_csv_dataset, load_dataset, predict_pipeline,
    required_knowledge, required_models, train_model, write_dataset, write_evaluation, Context, Dataset,
    EvalOptions, Pipeline, TrainedModel,
};
use rrb_core::model::ModelKind;
use rrb_core::predictors::{KdVariancePrior, KnowledgePredictor};
use rrb_core::scene::ScenarioState;
use rrb_core::trajectory::MultiModalPrediction;

use crate::config::RunConfig;
use crate::render::render_svg;

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let data = if cfg.data.tracks.is_empty() {
        load_dataset(&cfg.data_dir())?
    } else {
        load_csv_dataset(&cfg.data.tracks, cfg.data.map.as_deref().expect("validated"))?
    };
    if data.skipped_tracks > 0 {
        info!("skipped {} tracks too short for a scenario", data.skipped_tracks);
    }
    if data.scenarios.is_empty() {
        bail!("the dataset holds no scenarios");
    }
    Ok(data)
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    cfg.suite.validate().context("suite")?;
    let scenes = generate_suite(&cfg.suite, cfg.seed)?;
    let dir = cfg.data_dir();
    let summary = write_dataset(&dir, &scenes)?;
    println!(
        "wrote {} scenes, {} tracks, {} scenarios to {}",
        summary.scenes,
        summary.tracks,
        summary.scenarios,
        dir.display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let keys: Vec<String> = match &cfg.models {
        Some(m) => m.clone(),
        None => required_models(&cfg.pipelines()?).into_iter().collect(),
    };
    if keys.is_empty() {
        bail!("nothing to train: the pipelines need no model and `models` is not set");
    }
    let data = load_data(cfg)?;
    let (train_set, _) = cfg.split()?.apply(&data.scenarios)?;
    let train_cfg = cfg.train_config();
    let dir = cfg.models_dir();
    for key in &keys {
        let spec = cfg.model.spec_for_key(key)?;
        let prior = match spec.config.kind {
            ModelKind::Residual => fit_priors(&train_set, [spec.kd])?.remove(spec.kd.name()).unwrap_or_default(),
            ModelKind::EncoderDecoder => KdVariancePrior::default(),
        };
        info!("training {key} on {} scenarios", train_set.len());
        let trained = train_model(&spec, &train_set, &prior, &train_cfg, |e, l| {
            info!("{key}: epoch {} loss {l:.5}", e + 1)
        })?;
        let ckpt = checkpoint_path(&dir, key);
        fs::create_dir_all(&dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        trained.save(&ckpt)?;
        write_file(&dir.join(format!("{key}_loss.csv")), &trained.curve.to_csv())?;
        println!(
            "{key}: {} epochs, final loss {:.5}, checkpoint {}",
            trained.curve.epochs.len(),
            trained.curve.epochs.last().copied().unwrap_or(f64::NAN),
            ckpt.display()
        );
    }
    Ok(())
}

/// Priors fitted on the training split plus every checkpoint the pipelines need.
fn build_context(
    cfg: &RunConfig,
    pipelines: &[Pipeline],
    train_set: &[ScenarioState],
    checkpoints: &Path,
) -> Result<Context> {
    let kds = required_knowledge(pipelines)
        .into_iter()
        .map(|k| k.parse())
        .collect::<rrb_core::Result<Vec<KnowledgePredictor>>>()?;
    let mut ctx = Context {
        priors: fit_priors(train_set, kds)?,
        models: Default::default(),
    };
    for key in required_models(pipelines) {
        let path = checkpoint_path(checkpoints, &key);
        if !path.is_file() {
            bail!(
                "no checkpoint for model '{key}' at {}; run `rrb train` first or drop the pipelines that need it",
                path.display()
            );
        }
        let trained = TrainedModel::load(&path)?;
        trained.check_against(&cfg.model)?;
        ctx.models.insert(key, trained);
    }
    Ok(ctx)
}

fn eval_options(cfg: &RunConfig) -> EvalOptions {
    EvalOptions {
        mpc: cfg.mpc.clone(),
        jobs: cfg.jobs,
    }
}

pub fn eval(cfg: &RunConfig, checkpoints: Option<PathBuf>) -> Result<()> {
    cfg.validate()?;
    let pipelines = cfg.pipelines()?;
    let data = load_data(cfg)?;
    let split = cfg.split()?;
    let (train_set, test_set) = split.apply(&data.scenarios)?;
    let ctx = build_context(cfg, &pipelines, &train_set, &checkpoints.unwrap_or_else(|| cfg.models_dir()))?;
    let evaluation = evaluate(&pipelines, &test_set, &ctx, &eval_options(cfg), &split.to_string())?;
    let dir = cfg.eval_dir();
    write_evaluation(&dir, &evaluation)?;
    print!("{}", evaluation.table.to_text());
    println!("\nmetrics written to {}", dir.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedPrediction {
    pub pipeline: String,
    pub prediction: MultiModalPrediction,
}

/// World-frame predictions of several pipelines for one scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionFile {
    pub scenario: String,
    pub predictions: Vec<NamedPrediction>,
}

pub fn predict(cfg: &RunConfig, key: Option<&str>, checkpoints: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    cfg.validate()?;
    let pipelines = cfg.pipelines()?;
    let data = load_data(cfg)?;
    let (train_set, test_set) = cfg.split()?.apply(&data.scenarios)?;
    let state = match key {
        Some(k) => data
            .scenarios
            .iter()
            .find(|s| s.key() == k)
            .ok_or_else(|| anyhow!("no scenario '{k}' in the dataset (keys look like {})", data.scenarios[0].key()))?,
        None => &test_set[0],
    };
    let ctx = build_context(cfg, &pipelines, &train_set, &checkpoints.unwrap_or_else(|| cfg.models_dir()))?;
    let opts = eval_options(cfg);
    let predictions = pipelines
        .iter()
        .map(|p| {
            let mut pred = predict_pipeline(p, std::slice::from_ref(state), &ctx, &opts)?;
            Ok(NamedPrediction {
                pipeline: p.to_string(),
                prediction: pred.remove(0),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let file = PredictionFile {
        scenario: state.key(),
        predictions,
    };
    let out = out.unwrap_or_else(|| cfg.output_dir().join("predictions.json"));
    write_file(&out, &(serde_json::to_string_pretty(&file)? + "\n"))?;
    println!("predictions of {} pipelines for {} written to {}", file.predictions.len(), file.scenario, out.display());
    Ok(())
}

pub fn render(cfg: &RunConfig, predictions: &Path, out: &Path) -> Result<()> {
    match out.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("svg") => {}
        other => bail!(
            "unsupported image format '{}' for {}; use a .svg file name",
            other.unwrap_or(""),
            out.display()
        ),
    }
    let text = fs::read_to_string(predictions).with_context(|| format!("reading {}", predictions.display()))?;
    let file: PredictionFile =
        serde_json::from_str(&text).with_context(|| format!("parsing predictions {}", predictions.display()))?;
    let data = load_data(cfg)?;
    let state = data
        .scenarios
        .iter()
        .find(|s| s.key() == file.scenario)
        .ok_or_else(|| anyhow!("scenario '{}' from {} is not in the dataset", file.scenario, predictions.display()))?;
    let named: Vec<(String, MultiModalPrediction)> =
        file.predictions.into_iter().map(|p| (p.pipeline, p.prediction)).collect();
    write_file(out, &render_svg(state, &named))?;
    println!("rendered {} to {}", file.scenario, out.display());
    Ok(())
}
