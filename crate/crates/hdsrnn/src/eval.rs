//! Metrics, experiment sweeps, and attention-weight export.
//!
//! Every learned-model evaluation is reported on two scales: `residual`, the
//! normalized differenced-deseasonalized series the model actually predicts,
//! and `reconstructed`, after mapping forecasts back to raw readings. Sweeps
//! record non-converged trials explicitly instead of dropping them.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HdsRnn, ModelConfig};
use crate::pipeline::{reconstruct, DecompositionModel, PreparedData, SensorMeta, Window};
use crate::synthdata::NetworkSpec;
use crate::training::{fit, Forecaster, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    Residual,
    Reconstructed,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MetricSet {
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
    /// Signed mean error, kept alongside MAE for transparency.
    pub mean_error: f64,
    pub scale: Scale,
    pub n_windows: usize,
}

/// MSE/RMSE/MAE over all windows and forecast steps.
pub fn metrics(preds: &[Vec<f64>], truths: &[Vec<f64>], scale: Scale) -> Result<MetricSet> {
    if preds.len() != truths.len() {
        return Err(Error::Dimension {
            op: "metrics",
            msg: format!("{} prediction windows vs {} truth windows", preds.len(), truths.len()),
        });
    }
    if preds.is_empty() {
        return Err(Error::InsufficientData("metrics need at least one window".into()));
    }
    let mut count = 0usize;
    let (mut sq, mut abs, mut signed) = (0.0, 0.0, 0.0);
    for (p, t) in preds.iter().zip(truths) {
        if p.len() != t.len() {
            return Err(Error::Dimension {
                op: "metrics",
                msg: format!("window lengths differ: {} vs {}", p.len(), t.len()),
            });
        }
        for (pi, ti) in p.iter().zip(t) {
            let d = pi - ti;
            sq += d * d;
            abs += d.abs();
            signed += d;
            count += 1;
        }
    }
    let n = count as f64;
    let mse = sq / n;
    Ok(MetricSet {
        mse,
        rmse: mse.sqrt(),
        mae: abs / n,
        mean_error: signed / n,
        scale,
        n_windows: preds.len(),
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StepMetrics {
    /// 1-based forecast step.
    pub step: usize,
    pub mse: f64,
    pub mae: f64,
}

/// Error broken down by forecast step.
pub fn per_step_metrics(preds: &[Vec<f64>], truths: &[Vec<f64>]) -> Result<Vec<StepMetrics>> {
    if preds.is_empty() || preds.len() != truths.len() {
        return Err(Error::Dimension {
            op: "per_step_metrics",
            msg: format!("{} prediction windows vs {} truth windows", preds.len(), truths.len()),
        });
    }
    let tau = preds[0].len();
    let mut out = Vec::with_capacity(tau);
    for j in 0..tau {
        let (mut sq, mut abs) = (0.0, 0.0);
        for (p, t) in preds.iter().zip(truths) {
            let d = p[j] - t[j];
            sq += d * d;
            abs += d.abs();
        }
        let n = preds.len() as f64;
        out.push(StepMetrics {
            step: j + 1,
            mse: sq / n,
            mae: abs / n,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub residual: MetricSet,
    pub reconstructed: Option<MetricSet>,
    pub per_step_residual: Vec<StepMetrics>,
    pub per_step_reconstructed: Option<Vec<StepMetrics>>,
}

/// Evaluate a model over a window set; reconstructed-scale metrics are
/// included when the windows carry reconstruction anchors.
pub fn evaluate_forecaster<M: Forecaster>(
    model: &M,
    windows: &[Window],
    decomp: Option<&DecompositionModel>,
    target_sensor: usize,
) -> Result<EvalOutcome> {
    if windows.is_empty() {
        return Err(Error::InsufficientData("no windows to evaluate".into()));
    }
    let preds = windows
        .iter()
        .map(|w| model.predict(w))
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(&preds, windows, decomp, target_sensor)
}

/// Evaluate already-computed forecasts against their windows.
pub fn evaluate_predictions(
    preds: &[Vec<f64>],
    windows: &[Window],
    decomp: Option<&DecompositionModel>,
    target_sensor: usize,
) -> Result<EvalOutcome> {
    let truths: Vec<Vec<f64>> = windows.iter().map(|w| w.targets.clone()).collect();
    let residual = metrics(preds, &truths, Scale::Residual)?;
    let per_step_residual = per_step_metrics(preds, &truths)?;

    let reconstructable = decomp.is_some() && windows.iter().all(|w| w.recon.is_some());
    let (reconstructed, per_step_reconstructed) = if reconstructable {
        let decomp = decomp.unwrap();
        let mut raw_preds = Vec::with_capacity(windows.len());
        let mut raw_truths = Vec::with_capacity(windows.len());
        for (w, p) in windows.iter().zip(preds) {
            let info = w.recon.as_ref().unwrap();
            raw_preds.push(reconstruct(p, decomp, target_sensor, &info.slots, info.raw_anchor)?);
            raw_truths.push(info.raw_targets.clone());
        }
        (
            Some(metrics(&raw_preds, &raw_truths, Scale::Reconstructed)?),
            Some(per_step_metrics(&raw_preds, &raw_truths)?),
        )
    } else {
        (None, None)
    };
    Ok(EvalOutcome {
        residual,
        reconstructed,
        per_step_residual,
        per_step_reconstructed,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepTrial {
    pub seed: u64,
    pub converged: bool,
    pub detail: Option<EvalOutcome>,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepEntry {
    pub value: usize,
    pub trials: Vec<SweepTrial>,
    /// Median residual-scale test MSE/MAE over converged seeds.
    pub median_mse: Option<f64>,
    pub median_mae: Option<f64>,
    /// Per-step medians over converged seeds, reconstructed scale.
    pub median_per_step_reconstructed: Option<Vec<StepMetrics>>,
    pub all_converged: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepResult {
    pub parameter: String,
    pub entries: Vec<SweepEntry>,
}

impl SweepResult {
    pub fn to_json_file(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum SweepParam {
    EncoderLength,
    DecoderLength,
}

impl SweepParam {
    fn name(self) -> &'static str {
        match self {
            SweepParam::EncoderLength => "encoder_length",
            SweepParam::DecoderLength => "decoder_length",
        }
    }

    fn apply(self, template: &ModelConfig, value: usize) -> ModelConfig {
        let mut cfg = template.clone();
        match self {
            SweepParam::EncoderLength => cfg.encoder_length = value,
            SweepParam::DecoderLength => cfg.decoder_length = value,
        }
        cfg
    }
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let mid = xs.len() / 2;
    Some(if xs.len() % 2 == 1 {
        xs[mid]
    } else {
        0.5 * (xs[mid - 1] + xs[mid])
    })
}

fn sweep(
    param: SweepParam,
    template: &ModelConfig,
    train: &TrainConfig,
    data: &PreparedData,
    values: &[usize],
    seeds: &[u64],
) -> Result<SweepResult> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one value and one seed".into()));
    }
    let jobs: Vec<(usize, u64)> = values
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let trials: Vec<(usize, SweepTrial)> = jobs
        .into_par_iter()
        .map(|(value, seed)| {
            let cfg = param.apply(template, value);
            let trial_train = TrainConfig {
                rng_seed: seed,
                ..train.clone()
            };
            let trial = match fit(&cfg, &trial_train, data) {
                Ok((_, report)) => SweepTrial {
                    seed,
                    converged: true,
                    detail: Some(EvalOutcome {
                        residual: report.test_residual,
                        reconstructed: report.test_reconstructed,
                        per_step_residual: report.per_step_residual,
                        per_step_reconstructed: report.per_step_reconstructed,
                    }),
                    failure: None,
                },
                Err(Error::Diverged { epoch }) => SweepTrial {
                    seed,
                    converged: false,
                    detail: None,
                    failure: Some(format!("diverged at epoch {epoch}")),
                },
                Err(e) => SweepTrial {
                    seed,
                    converged: false,
                    detail: None,
                    failure: Some(e.to_string()),
                },
            };
            (value, trial)
        })
        .collect();

    let entries = values
        .iter()
        .map(|&value| {
            let mine: Vec<SweepTrial> = trials
                .iter()
                .filter(|(v, _)| *v == value)
                .map(|(_, t)| t.clone())
                .collect();
            let done: Vec<&EvalOutcome> =
                mine.iter().filter_map(|t| t.detail.as_ref()).collect();
            let median_mse = median(done.iter().map(|d| d.residual.mse).collect());
            let median_mae = median(done.iter().map(|d| d.residual.mae).collect());
            let median_per_step_reconstructed = median_per_step(&done);
            SweepEntry {
                value,
                all_converged: mine.iter().all(|t| t.converged),
                trials: mine,
                median_mse,
                median_mae,
                median_per_step_reconstructed,
            }
        })
        .collect();
    Ok(SweepResult {
        parameter: param.name().to_string(),
        entries,
    })
}

fn median_per_step(done: &[&EvalOutcome]) -> Option<Vec<StepMetrics>> {
    let per_step: Vec<&Vec<StepMetrics>> = done
        .iter()
        .filter_map(|d| d.per_step_reconstructed.as_ref())
        .collect();
    if per_step.is_empty() {
        return None;
    }
    let tau = per_step[0].len();
    Some(
        (0..tau)
            .map(|j| StepMetrics {
                step: j + 1,
                mse: median(per_step.iter().map(|s| s[j].mse).collect()).unwrap(),
                mae: median(per_step.iter().map(|s| s[j].mae).collect()).unwrap(),
            })
            .collect(),
    )
}

/// Train and evaluate once per encoder length and seed.
pub fn sweep_encoder_length(
    template: &ModelConfig,
    train: &TrainConfig,
    data: &PreparedData,
    values: &[usize],
    seeds: &[u64],
) -> Result<SweepResult> {
    sweep(SweepParam::EncoderLength, template, train, data, values, seeds)
}

/// Train and evaluate once per decoder length and seed, with per-step error
/// breakdown.
pub fn sweep_decoder_length(
    template: &ModelConfig,
    train: &TrainConfig,
    data: &PreparedData,
    values: &[usize],
    seeds: &[u64],
) -> Result<SweepResult> {
    sweep(SweepParam::DecoderLength, template, train, data, values, seeds)
}

/// Plot-ready CSV for the encoder-length analysis: one row per swept value.
pub fn write_encoder_sweep_csv(path: &Path, result: &SweepResult) -> Result<()> {
    let mut out = String::from("encoder_length,mse,mae,converged\n");
    for e in &result.entries {
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.value,
            e.median_mse.map_or(String::from("NA"), |v| v.to_string()),
            e.median_mae.map_or(String::from("NA"), |v| v.to_string()),
            e.all_converged
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Plot-ready CSV for the decoder-length analysis: one row per (tau, step).
pub fn write_decoder_sweep_csv(path: &Path, result: &SweepResult) -> Result<()> {
    let mut out = String::from("tau,step,mse,mae\n");
    for e in &result.entries {
        let steps: Option<Vec<StepMetrics>> = e.median_per_step_reconstructed.clone().or_else(|| {
            let residual: Vec<&Vec<StepMetrics>> = e
                .trials
                .iter()
                .filter_map(|t| t.detail.as_ref().map(|d| &d.per_step_residual))
                .collect();
            if residual.is_empty() {
                None
            } else {
                let tau = residual[0].len();
                Some(
                    (0..tau)
                        .map(|j| StepMetrics {
                            step: j + 1,
                            mse: median(residual.iter().map(|s| s[j].mse).collect()).unwrap(),
                            mae: median(residual.iter().map(|s| s[j].mae).collect()).unwrap(),
                        })
                        .collect(),
                )
            }
        });
        if let Some(steps) = steps {
            for s in steps {
                out.push_str(&format!("{},{},{},{}\n", e.value, s.step, s.mse, s.mae));
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Mean spatial attention per sensor over a window set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub sensor_ids: Vec<String>,
    pub target_sensor: usize,
    /// Mean spatial weight per sensor over all windows and encoder steps;
    /// convex by construction.
    pub mean_weights: Vec<f64>,
    /// Planar distance from each sensor to the target, when a network
    /// specification is available.
    pub distance_to_target: Option<Vec<f64>>,
}

impl AttentionSummary {
    pub fn to_json_file(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Average the model's spatial weights over every test window and encoder
/// step, optionally joined with sensor distances from a network spec.
pub fn export_spatial_weights(
    model: &HdsRnn,
    windows: &[Window],
    sensors: &[SensorMeta],
    network: Option<&NetworkSpec>,
) -> Result<AttentionSummary> {
    if model.spatial().is_none() {
        return Err(Error::Contract(
            "model has no spatial attention stage to export".into(),
        ));
    }
    if windows.is_empty() {
        return Err(Error::InsufficientData("no windows to average over".into()));
    }
    let n = model.config().n_sensors;
    if sensors.len() != n {
        return Err(Error::Config(format!(
            "{} sensor labels for {n} model inputs",
            sensors.len()
        )));
    }
    let mut sums = vec![0.0; n];
    let mut rows = 0usize;
    for w in windows {
        let forecast = model.forward(&w.x, w.y_seed)?;
        let t_len = forecast.spatial_weights.shape()[0];
        for t in 0..t_len {
            for k in 0..n {
                sums[k] += forecast.spatial_weights.at2(t, k);
            }
        }
        rows += t_len;
    }
    let mean_weights: Vec<f64> = sums.iter().map(|s| s / rows as f64).collect();
    let target = model.config().target_sensor;
    let distance_to_target = network.map(|spec| {
        (0..n)
            .map(|k| spec.distance(k, target))
            .collect()
    });
    Ok(AttentionSummary {
        sensor_ids: sensors.iter().map(|s| s.id.clone()).collect(),
        target_sensor: target,
        mean_weights,
        distance_to_target,
    })
}

/// Plot-ready CSV for the attention-weight analysis: one row per sensor.
pub fn write_attention_csv(path: &Path, summary: &AttentionSummary) -> Result<()> {
    let mut out = String::from("sensor,mean_weight,distance_to_target\n");
    for (k, id) in summary.sensor_ids.iter().enumerate() {
        let dist = summary
            .distance_to_target
            .as_ref()
            .map_or(String::new(), |d| d[k].to_string());
        out.push_str(&format!("{},{},{}\n", id, summary.mean_weights[k], dist));
    }
    std::fs::write(path, out)?;
    Ok(())
}
