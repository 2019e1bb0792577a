//! Losses and the mini-batch training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::model::{Model, Sample};
use crate::trajectory::{closest_mode, MultiModalPrediction};

/// Gaussian negative log-likelihood and its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Nll {
    pub loss: f64,
    pub d_means: Vec<Vec2>,
    pub d_variances: Vec<Vec2>,
}

/// `Σ_j Σ_axis ½[ln(2πσ²) + (x − μ)²/σ²]`.
pub fn gaussian_nll(means: &[Vec2], variances: &[Vec2], gt: &[Vec2]) -> Result<Nll> {
    if means.len() != gt.len() || variances.len() != gt.len() {
        return Err(Error::Dimension {
            context: "NLL horizon",
            expected: gt.len(),
            actual: means.len().min(variances.len()),
        });
    }
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let mut loss = 0.0;
    let mut d_means = Vec::with_capacity(gt.len());
    let mut d_variances = Vec::with_capacity(gt.len());
    for j in 0..gt.len() {
        let mut dm = [0.0; 2];
        let mut dv = [0.0; 2];
        for (axis, (mu, var, x)) in [
            (means[j].x, variances[j].x, gt[j].x),
            (means[j].y, variances[j].y, gt[j].y),
        ]
        .into_iter()
        .enumerate()
        {
            if !(var > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "NLL variance at step {j} is not positive: {var}"
                )));
            }
            let e = mu - x;
            loss += 0.5 * (ln2pi + var.ln() + e * e / var);
            dm[axis] = e / var;
            dv[axis] = 0.5 * (1.0 / var - e * e / (var * var));
        }
        d_means.push(Vec2::new(dm[0], dm[1]));
        d_variances.push(Vec2::new(dv[0], dv[1]));
    }
    Ok(Nll {
        loss,
        d_means,
        d_variances,
    })
}

/// Winner-takes-all loss: the NLL of the mode closest to the ground truth.
/// Gradient vectors of every other mode are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Wta {
    pub loss: f64,
    pub mode: usize,
    pub d_means: Vec<Vec<Vec2>>,
    pub d_variances: Vec<Vec<Vec2>>,
}

pub fn wta_loss(pred: &MultiModalPrediction, gt: &[Vec2]) -> Result<Wta> {
    if pred.is_empty() {
        return Err(Error::InvalidInput("WTA loss needs at least one mode".into()));
    }
    let mode = closest_mode(pred.modes.iter().map(|m| m.means.as_slice()), gt);
    let chosen = &pred.modes[mode];
    let nll = gaussian_nll(&chosen.means, &chosen.variances, gt)?;
    let zeros = vec![Vec2::ZERO; gt.len()];
    let mut d_means = vec![zeros.clone(); pred.len()];
    let mut d_variances = vec![zeros; pred.len()];
    d_means[mode] = nll.d_means;
    d_variances[mode] = nll.d_variances;
    Ok(Wta {
        loss: nll.loss,
        mode,
        d_means,
        d_variances,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// The learning rate halves every this many epochs.
    pub lr_halving_period: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            lr_halving_period: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.lr_halving_period == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "epochs, batch_size, lr_halving_period and learning_rate must be positive, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Learning rate for a zero-based epoch index.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * 0.5f64.powi((epoch / self.lr_halving_period) as i32)
    }
}

/// Mean training loss per epoch.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossCurve {
    pub epochs: Vec<f64>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss\n");
        for (e, l) in self.epochs.iter().enumerate() {
            s.push_str(&format!("{},{}\n", e + 1, l));
        }
        s
    }
}

/// Trains `model` on `samples` with Adam on shuffled mini-batches. Gradients
/// are averaged over each batch. `on_epoch` sees the zero-based epoch index
/// and its mean loss.
pub fn train(
    model: &mut Model,
    samples: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<LossCurve> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    if let Some(i) = samples.iter().position(|s| s.gt.is_none()) {
        return Err(Error::InvalidInput(format!(
            "training sample {} has no ground truth",
            samples[i].key
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = LossCurve::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.learning_rate_at(epoch);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            model.zero_grads();
            let loss = model.loss_and_backward(&batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss {loss} at epoch {}, batch {b}; parameter norms {:?}",
                    epoch + 1,
                    model.param_norms()
                )));
            }
            model.adam_step(lr).map_err(|e| {
                Error::NonFinite(format!("epoch {}, batch {b}: {e}", epoch + 1))
            })?;
            total += loss * batch.len() as f64;
        }
        let mean = total / samples.len() as f64;
        on_epoch(epoch, mean);
        curve.epochs.push(mean);
    }
    Ok(curve)
}
