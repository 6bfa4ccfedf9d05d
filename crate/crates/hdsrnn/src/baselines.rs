//! Reference forecasters: persistence, seasonal-naive, linear
//! autoregression, a flattened-window MLP, and the attention-free Seq2Seq
//! degeneration of the main model. All consume the same windows as the main
//! model so metrics are directly comparable.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_forecaster, EvalOutcome};
use crate::layers::AffineLayer;
use crate::model::{HdsRnn, ModelConfig, PassCtx};
use crate::pipeline::{PreparedData, Window, WindowSet};
use crate::tensor::{BoundParams, NodeId, ParamStore, Tape, Tensor};
use crate::training::{fit_forecaster, Forecaster, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum BaselineSpec {
    /// Repeat the last observed target value.
    Persistence,
    /// Repeat the value one season back.
    SeasonalNaive { period: usize },
    /// Ordinary least squares on the target's own lags.
    LinearAr { order: usize },
    /// Flattened-window multilayer perceptron with tanh hidden layers.
    Mlp { hidden: Vec<usize> },
    /// The main model with both attention stages disabled.
    Seq2Seq,
}

impl BaselineSpec {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineSpec::Persistence => "persistence",
            BaselineSpec::SeasonalNaive { .. } => "seasonal-naive",
            BaselineSpec::LinearAr { .. } => "linear-ar",
            BaselineSpec::Mlp { .. } => "mlp",
            BaselineSpec::Seq2Seq => "seq2seq",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            BaselineSpec::SeasonalNaive { period } if *period == 0 => {
                Err(Error::Config("seasonal-naive period must be positive".into()))
            }
            BaselineSpec::LinearAr { order } if *order == 0 => {
                Err(Error::Config("linear-ar order must be positive".into()))
            }
            BaselineSpec::Mlp { hidden } if hidden.iter().any(|&w| w == 0) => {
                Err(Error::Config("mlp hidden widths must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

pub fn persistence_forecast(window: &Window, tau: usize) -> Vec<f64> {
    vec![window.y_seed; tau]
}

/// `y[T + j] = y[T + j - k * period]` with the smallest `k` that lands on an
/// observed index, reading through the window and, when the window is
/// shorter than the period, through the panel history. Forecast positions
/// are never read, so nothing leaks from the future.
pub fn seasonal_naive_forecast(
    window: &Window,
    panel_target: &[f64],
    target_sensor_row: usize,
    tau: usize,
    period: usize,
) -> Result<Vec<f64>> {
    let t_len = window.x.shape()[1];
    let last_observed = window.start + t_len - 1;
    let mut out = Vec::with_capacity(tau);
    for j in 0..tau {
        let global = window.start + t_len + j;
        let steps_back = (global - last_observed).div_ceil(period);
        let need = steps_back * period;
        if need > global {
            return Err(Error::InsufficientData(format!(
                "seasonal-naive needs {need} steps of lookback at forecast step {}",
                j + 1
            )));
        }
        let src = global - need;
        let value = if src >= window.start {
            window.x.at2(target_sensor_row, src - window.start)
        } else {
            panel_target[src]
        };
        out.push(value);
    }
    Ok(out)
}

/// OLS autoregression fitted on the training windows' target lags.
#[derive(Clone, Debug)]
pub struct LinearAr {
    pub order: usize,
    /// `order` lag coefficients (lag 1 first) followed by the intercept.
    pub coefficients: Vec<f64>,
}

impl LinearAr {
    pub fn fit(windows: &[Window], target_row: usize, order: usize) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        for w in windows {
            let t_len = w.x.shape()[1];
            if t_len < order {
                return Err(Error::InsufficientData(format!(
                    "window length {t_len} shorter than AR order {order}"
                )));
            }
            let lags: Vec<f64> = (0..t_len).map(|t| w.x.at2(target_row, t)).collect();
            // one regression row per forecast step that has fully observed lags
            let first = &w.targets[0];
            let mut feats = Vec::with_capacity(order + 1);
            for lag in 1..=order {
                feats.push(lags[t_len - lag]);
            }
            feats.push(1.0);
            rows.push(feats);
            ys.push(*first);
        }
        if rows.len() <= order {
            return Err(Error::InsufficientData(format!(
                "{} training rows cannot identify {order} AR coefficients",
                rows.len()
            )));
        }
        // constant lag features carry no information; fall back to an
        // intercept-only fit instead of failing on the singular system
        let informative = (0..order).any(|c| {
            let first = rows[0][c];
            rows.iter().any(|r| r[c] != first)
        });
        let coefficients = if informative {
            solve_least_squares(&rows, &ys)?
        } else {
            let mut c = vec![0.0; order + 1];
            c[order] = ys.iter().sum::<f64>() / ys.len() as f64;
            c
        };
        Ok(Self {
            order,
            coefficients,
        })
    }

    /// Recursive multi-step forecast from the window's trailing lags.
    pub fn forecast(&self, window: &Window, target_row: usize, tau: usize) -> Vec<f64> {
        let t_len = window.x.shape()[1];
        let mut history: Vec<f64> = (0..t_len).map(|t| window.x.at2(target_row, t)).collect();
        let mut out = Vec::with_capacity(tau);
        for _ in 0..tau {
            let mut v = self.coefficients[self.order];
            for lag in 1..=self.order {
                v += self.coefficients[lag - 1] * history[history.len() - lag];
            }
            history.push(v);
            out.push(v);
        }
        out
    }
}

/// Solve `min ||X b - y||` through the normal equations with partial-pivot
/// Gaussian elimination.
fn solve_least_squares(rows: &[Vec<f64>], ys: &[f64]) -> Result<Vec<f64>> {
    let p = rows[0].len();
    let mut ata = vec![vec![0.0; p]; p];
    let mut aty = vec![0.0; p];
    for (row, &y) in rows.iter().zip(ys) {
        for i in 0..p {
            aty[i] += row[i] * y;
            for j in 0..p {
                ata[i][j] += row[i] * row[j];
            }
        }
    }
    let scale: f64 = ata
        .iter()
        .flat_map(|r| r.iter().map(|v| v.abs()))
        .fold(0.0, f64::max);
    for col in 0..p {
        let (pivot_row, pivot) = (col..p)
            .map(|r| (r, ata[r][col].abs()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        if pivot <= scale * 1e-12 {
            return Err(Error::RankDeficient(format!(
                "normal equations singular at column {col}"
            )));
        }
        ata.swap(col, pivot_row);
        aty.swap(col, pivot_row);
        for r in 0..p {
            if r == col {
                continue;
            }
            let f = ata[r][col] / ata[col][col];
            for c in col..p {
                ata[r][c] -= f * ata[col][c];
            }
            aty[r] -= f * aty[col];
        }
    }
    Ok((0..p).map(|i| aty[i] / ata[i][i]).collect())
}

/// Flattened-window MLP: `n*T -> hidden (tanh) ... -> tau`.
#[derive(Debug, Clone)]
pub struct MlpForecaster {
    store: ParamStore,
    layers: Vec<AffineLayer>,
    tau: usize,
}

impl MlpForecaster {
    pub fn new(
        n_sensors: usize,
        t_len: usize,
        tau: usize,
        hidden: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut store = ParamStore::new();
        let mut dims = vec![n_sensors * t_len];
        dims.extend_from_slice(hidden);
        dims.push(tau);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| AffineLayer::new(&mut store, &format!("mlp.layer{i}"), d[0], d[1], rng))
            .collect();
        Self { store, layers, tau }
    }
}

impl Forecaster for MlpForecaster {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn build_predictions(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        window: &Window,
        _ctx: &mut PassCtx,
    ) -> Result<Vec<NodeId>> {
        let flat = Tensor::vector(window.x.data().to_vec())?;
        let mut h = tape.leaf(flat);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(tape, bound, h)?;
            if i + 1 < self.layers.len() {
                h = tape.tanh(h);
            }
        }
        (0..self.tau).map(|j| tape.element(h, j)).collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BaselineReport {
    pub kind: String,
    pub outcome: EvalOutcome,
}

impl BaselineReport {
    pub fn to_json_file(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Evaluate a baseline on the test split of a prepared window set.
pub fn run_baseline(
    spec: &BaselineSpec,
    data: &PreparedData,
    windows: &WindowSet,
    train: &TrainConfig,
) -> Result<BaselineReport> {
    spec.validate()?;
    let tau = windows.tau;
    let target = windows.target_sensor;
    let outcome = match spec {
        BaselineSpec::Persistence => {
            let preds: Vec<Vec<f64>> = windows
                .test
                .iter()
                .map(|w| persistence_forecast(w, tau))
                .collect();
            evaluate_precomputed(&preds, &windows.test, data, target)?
        }
        BaselineSpec::SeasonalNaive { period } => {
            let series = data.processed.series(target);
            let preds: Vec<Vec<f64>> = windows
                .test
                .iter()
                .map(|w| seasonal_naive_forecast(w, series, target, tau, *period))
                .collect::<Result<_>>()?;
            evaluate_precomputed(&preds, &windows.test, data, target)?
        }
        BaselineSpec::LinearAr { order } => {
            let model = LinearAr::fit(&windows.train, target, *order)?;
            let preds: Vec<Vec<f64>> = windows
                .test
                .iter()
                .map(|w| model.forecast(w, target, tau))
                .collect();
            evaluate_precomputed(&preds, &windows.test, data, target)?
        }
        BaselineSpec::Mlp { hidden } => {
            let mut rng = ChaCha8Rng::seed_from_u64(train.rng_seed);
            let model = MlpForecaster::new(
                data.processed.n_sensors(),
                windows.t_len,
                tau,
                hidden,
                &mut rng,
            );
            let (model, _) = fit_forecaster(model, windows, train, false)?;
            evaluate_forecaster(&model, &windows.test, Some(&data.decomp), target)?
        }
        BaselineSpec::Seq2Seq => {
            let mut config = ModelConfig::seq2seq(data.processed.n_sensors(), target);
            config.encoder_length = windows.t_len;
            config.decoder_length = tau;
            config.hidden_dim = 32;
            config.dropout = 0.0;
            let mut rng = ChaCha8Rng::seed_from_u64(train.rng_seed);
            let model = HdsRnn::new(config, &mut rng)?;
            let (model, _) = fit_forecaster(model, windows, train, false)?;
            evaluate_forecaster(&model, &windows.test, Some(&data.decomp), target)?
        }
    };
    Ok(BaselineReport {
        kind: spec.name().to_string(),
        outcome,
    })
}

fn evaluate_precomputed(
    preds: &[Vec<f64>],
    windows: &[Window],
    data: &PreparedData,
    target: usize,
) -> Result<EvalOutcome> {
    if windows.is_empty() {
        return Err(Error::InsufficientData("no test windows".into()));
    }
    crate::eval::evaluate_predictions(preds, windows, Some(&data.decomp), target)
}
