//! Pretreatment pipeline: first-order differencing, additive seasonal
//! decomposition fitted on the training split, z-scoring of residuals,
//! sliding-window extraction, and exact reconstruction back to raw scale.
//!
//! The model is trained on the normalized residual series. Every fitted
//! statistic (seasonal profile, mean, std) is computed from the training
//! split only and applied unchanged to validation and test data. Windows
//! never straddle a split boundary.

use std::path::Path;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fixed sampling interval of all panels.
pub const CADENCE_SECS: i64 = 1800;

/// Slots per day at the 30-minute cadence.
pub const DEFAULT_PERIOD: usize = 48;

pub const DEFAULT_SPLIT_RATIO: (usize, usize, usize) = (4, 1, 1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SensorKind {
    Flow,
    Pressure,
}

impl SensorKind {
    /// Convention used by the CSV format: ids starting with `P` are pressure
    /// sensors, everything else is flow.
    pub fn from_id(id: &str) -> Self {
        if id.starts_with('P') || id.starts_with('p') {
            SensorKind::Pressure
        } else {
            SensorKind::Flow
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorMeta {
    pub id: String,
    pub kind: SensorKind,
}

/// `[0, train_end)` train, `[train_end, val_end)` validation, rest test.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBounds {
    pub train_end: usize,
    pub val_end: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Aligned multivariate panel at fixed 30-minute cadence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesPanel {
    sensors: Vec<SensorMeta>,
    start: DateTime<Utc>,
    cadence_secs: i64,
    values: Vec<Vec<f64>>,
    split: SplitBounds,
}

impl SeriesPanel {
    /// Build a panel with the default 4:1:1 split.
    pub fn new(
        sensors: Vec<SensorMeta>,
        start: DateTime<Utc>,
        values: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let len = values.first().map_or(0, Vec::len);
        let split = split_from_ratio(len, DEFAULT_SPLIT_RATIO)?;
        Self::with_split(sensors, start, values, split)
    }

    pub fn with_split(
        sensors: Vec<SensorMeta>,
        start: DateTime<Utc>,
        values: Vec<Vec<f64>>,
        split: SplitBounds,
    ) -> Result<Self> {
        if sensors.is_empty() || sensors.len() != values.len() {
            return Err(Error::Config(format!(
                "{} sensors vs {} value rows",
                sensors.len(),
                values.len()
            )));
        }
        for (i, s) in sensors.iter().enumerate() {
            if sensors[..i].iter().any(|o| o.id == s.id) {
                return Err(Error::Config(format!("duplicate sensor id {}", s.id)));
            }
        }
        let len = values[0].len();
        if len == 0 {
            return Err(Error::InsufficientData("panel has no rows".into()));
        }
        for (meta, row) in sensors.iter().zip(&values) {
            if row.len() != len {
                return Err(Error::Config(format!(
                    "sensor {} has {} values, expected {len}",
                    meta.id,
                    row.len()
                )));
            }
            if !row.iter().all(|v| v.is_finite()) {
                return Err(Error::Config(format!(
                    "sensor {} contains missing or non-finite values",
                    meta.id
                )));
            }
        }
        if start.timestamp() % CADENCE_SECS != 0 {
            return Err(Error::Alignment(format!(
                "start {} is not on the {CADENCE_SECS}s cadence grid",
                start
            )));
        }
        if split.train_end < 1 || split.val_end < split.train_end || split.val_end > len {
            return Err(Error::Config(format!(
                "split bounds {split:?} invalid for length {len}"
            )));
        }
        Ok(Self {
            sensors,
            start,
            cadence_secs: CADENCE_SECS,
            values,
            split,
        })
    }

    pub fn n_sensors(&self) -> usize {
        self.sensors.len()
    }

    pub fn len(&self) -> usize {
        self.values[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sensors(&self) -> &[SensorMeta] {
        &self.sensors
    }

    pub fn sensor_index(&self, id: &str) -> Result<usize> {
        self.sensors
            .iter()
            .position(|s| s.id == id)
            .ok_or_else(|| Error::Config(format!("unknown sensor id {id}")))
    }

    pub fn split(&self) -> SplitBounds {
        self.split
    }

    pub fn set_split(&mut self, split: SplitBounds) -> Result<()> {
        if split.train_end < 1 || split.val_end < split.train_end || split.val_end > self.len() {
            return Err(Error::Config(format!(
                "split bounds {split:?} invalid for length {}",
                self.len()
            )));
        }
        self.split = split;
        Ok(())
    }

    pub fn split_range(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Train => 0..self.split.train_end,
            Split::Val => self.split.train_end..self.split.val_end,
            Split::Test => self.split.val_end..self.len(),
        }
    }

    pub fn start(&self) -> DateTime<Utc> {
        self.start
    }

    pub fn timestamp(&self, i: usize) -> DateTime<Utc> {
        self.start + chrono::Duration::seconds(self.cadence_secs * i as i64)
    }

    pub fn series(&self, sensor: usize) -> &[f64] {
        &self.values[sensor]
    }

    pub fn series_mut(&mut self, sensor: usize) -> &mut [f64] {
        &mut self.values[sensor]
    }

    pub fn value(&self, sensor: usize, i: usize) -> f64 {
        self.values[sensor][i]
    }

    /// Seasonal slot of row `i`: position in the repeating `period`-step cycle.
    pub fn slot(&self, i: usize, period: usize) -> usize {
        let step = self.start.timestamp() / self.cadence_secs + i as i64;
        (step.rem_euclid(period as i64)) as usize
    }

    /// Read the `timestamp,<id>,...` CSV format. Enforces the 30-minute grid.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
        let headers = reader.headers().map_err(csv_err)?.clone();
        if headers.is_empty() || headers.get(0) != Some("timestamp") {
            return Err(Error::Parse("first CSV column must be 'timestamp'".into()));
        }
        let sensors: Vec<SensorMeta> = headers
            .iter()
            .skip(1)
            .map(|id| SensorMeta {
                id: id.to_string(),
                kind: SensorKind::from_id(id),
            })
            .collect();
        if sensors.is_empty() {
            return Err(Error::Parse("CSV has no sensor columns".into()));
        }
        let mut values: Vec<Vec<f64>> = vec![Vec::new(); sensors.len()];
        let mut start: Option<DateTime<Utc>> = None;
        let mut prev: Option<DateTime<Utc>> = None;
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(csv_err)?;
            if record.len() != sensors.len() + 1 {
                return Err(Error::Parse(format!(
                    "row {line}: {} fields, expected {}",
                    record.len(),
                    sensors.len() + 1
                )));
            }
            let ts = DateTime::parse_from_rfc3339(&record[0])
                .map_err(|e| Error::Parse(format!("row {line}: bad timestamp: {e}")))?
                .with_timezone(&Utc);
            if let Some(p) = prev {
                if (ts - p).num_seconds() != CADENCE_SECS {
                    return Err(Error::Alignment(format!(
                        "rows must be {CADENCE_SECS}s apart, got {} -> {}",
                        p, ts
                    )));
                }
            } else {
                start = Some(ts);
            }
            prev = Some(ts);
            for (k, field) in record.iter().skip(1).enumerate() {
                let v: f64 = field
                    .parse()
                    .map_err(|e| Error::Parse(format!("row {line}, {}: {e}", sensors[k].id)))?;
                values[k].push(v);
            }
        }
        let start = start.ok_or_else(|| Error::InsufficientData("CSV has no data rows".into()))?;
        Self::new(sensors, start, values)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header = vec!["timestamp".to_string()];
        header.extend(self.sensors.iter().map(|s| s.id.clone()));
        writer.write_record(&header).map_err(csv_err)?;
        for i in 0..self.len() {
            let mut row = vec![self
                .timestamp(i)
                .to_rfc3339_opts(SecondsFormat::Secs, true)];
            for k in 0..self.n_sensors() {
                row.push(format!("{}", self.values[k][i]));
            }
            writer.write_record(&row).map_err(csv_err)?;
        }
        writer.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

pub fn split_from_ratio(len: usize, ratio: (usize, usize, usize)) -> Result<SplitBounds> {
    let total = ratio.0 + ratio.1 + ratio.2;
    if total == 0 || ratio.0 == 0 {
        return Err(Error::Config(format!("invalid split ratio {ratio:?}")));
    }
    Ok(SplitBounds {
        train_end: len * ratio.0 / total,
        val_end: len * (ratio.0 + ratio.1) / total,
    })
}

/// Trained seasonal profile and residual moments; everything needed to map
/// residual-scale forecasts back to raw readings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionModel {
    pub period: usize,
    pub cadence_secs: i64,
    pub sensor_ids: Vec<String>,
    /// Per-sensor mean differenced value per seasonal slot, `[n][period]`.
    pub profiles: Vec<Vec<f64>>,
    /// Per-sensor residual mean over the training split; empty until
    /// [`normalize`] has run.
    pub residual_mean: Vec<f64>,
    pub residual_std: Vec<f64>,
}

impl DecompositionModel {
    pub fn has_moments(&self) -> bool {
        !self.residual_std.is_empty()
    }

    pub fn to_json_file(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// First-order difference: `d_t = x_{t+1} - x_t`, length `L-1`. The output
/// panel starts one cadence step later so slot arithmetic stays aligned; its
/// split bounds shrink by one so no differenced point mixes raw splits.
pub fn difference(panel: &SeriesPanel) -> Result<SeriesPanel> {
    if panel.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 rows to difference, got {}",
            panel.len()
        )));
    }
    let values: Vec<Vec<f64>> = panel
        .values
        .iter()
        .map(|row| row.windows(2).map(|w| w[1] - w[0]).collect())
        .collect();
    SeriesPanel::with_split(
        panel.sensors.clone(),
        panel.timestamp(1),
        values,
        {
            let train_end = panel.split.train_end.saturating_sub(1).max(1);
            SplitBounds {
                train_end,
                val_end: panel.split.val_end.saturating_sub(1).max(train_end),
            }
        },
    )
}

/// Invert [`difference`] given each sensor's first raw value.
pub fn integrate(diff: &SeriesPanel, anchors: &[f64]) -> Result<Vec<Vec<f64>>> {
    if anchors.len() != diff.n_sensors() {
        return Err(Error::Config(format!(
            "{} anchors for {} sensors",
            anchors.len(),
            diff.n_sensors()
        )));
    }
    Ok(diff
        .values
        .iter()
        .zip(anchors)
        .map(|(row, &a)| {
            let mut out = Vec::with_capacity(row.len() + 1);
            out.push(a);
            let mut acc = a;
            for d in row {
                acc += d;
                out.push(acc);
            }
            out
        })
        .collect())
}

/// Per-slot mean of the differenced training split.
pub fn fit_seasonal(diff: &SeriesPanel, period: usize) -> Result<DecompositionModel> {
    if period == 0 {
        return Err(Error::Config("period must be positive".into()));
    }
    let train_len = diff.split.train_end;
    if train_len < 2 * period {
        return Err(Error::InsufficientData(format!(
            "training split has {train_len} rows, need at least two full periods ({})",
            2 * period
        )));
    }
    let mut profiles = Vec::with_capacity(diff.n_sensors());
    for k in 0..diff.n_sensors() {
        let mut sums = vec![0.0; period];
        let mut counts = vec![0usize; period];
        for i in 0..train_len {
            let s = diff.slot(i, period);
            sums[s] += diff.values[k][i];
            counts[s] += 1;
        }
        profiles.push(
            sums.iter()
                .zip(&counts)
                .map(|(s, &c)| s / c as f64)
                .collect(),
        );
    }
    Ok(DecompositionModel {
        period,
        cadence_secs: diff.cadence_secs,
        sensor_ids: diff.sensors.iter().map(|s| s.id.clone()).collect(),
        profiles,
        residual_mean: Vec::new(),
        residual_std: Vec::new(),
    })
}

fn check_alignment(panel: &SeriesPanel, model: &DecompositionModel, op: &str) -> Result<()> {
    if panel.cadence_secs != model.cadence_secs {
        return Err(Error::Alignment(format!(
            "{op}: panel cadence {}s vs model cadence {}s",
            panel.cadence_secs, model.cadence_secs
        )));
    }
    if panel.n_sensors() != model.profiles.len() {
        return Err(Error::Config(format!(
            "{op}: panel has {} sensors, model has {}",
            panel.n_sensors(),
            model.profiles.len()
        )));
    }
    Ok(())
}

/// Subtract the fitted slot profile from every split.
pub fn deseasonalize(diff: &SeriesPanel, model: &DecompositionModel) -> Result<SeriesPanel> {
    check_alignment(diff, model, "deseasonalize")?;
    let mut out = diff.clone();
    for k in 0..out.n_sensors() {
        for i in 0..out.len() {
            let s = diff.slot(i, model.period);
            out.values[k][i] -= model.profiles[k][s];
        }
    }
    Ok(out)
}

/// Z-score residuals using training-split moments, which are stored into the
/// model for later reconstruction.
pub fn normalize(residual: &SeriesPanel, model: &mut DecompositionModel) -> Result<SeriesPanel> {
    check_alignment(residual, model, "normalize")?;
    let train_len = residual.split.train_end;
    let mut means = Vec::with_capacity(residual.n_sensors());
    let mut stds = Vec::with_capacity(residual.n_sensors());
    for (k, meta) in residual.sensors.iter().enumerate() {
        let train = &residual.values[k][..train_len];
        let mean = train.iter().sum::<f64>() / train_len as f64;
        let var = train.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / train_len as f64;
        let std = var.sqrt();
        if std == 0.0 {
            return Err(Error::DegenerateSensor {
                sensor: meta.id.clone(),
                msg: "zero variance on the training split".into(),
            });
        }
        means.push(mean);
        stds.push(std);
    }
    let mut out = residual.clone();
    for k in 0..out.n_sensors() {
        for v in &mut out.values[k] {
            *v = (*v - means[k]) / stds[k];
        }
    }
    model.residual_mean = means;
    model.residual_std = stds;
    Ok(out)
}

/// Raw panel plus its fully pretreated counterpart. Index `p` of `processed`
/// corresponds to raw index `p + 1`.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub raw: SeriesPanel,
    pub processed: SeriesPanel,
    pub decomp: DecompositionModel,
}

/// Run the whole pretreatment chain, fitting on the training split only.
pub fn prepare(raw: &SeriesPanel, period: usize) -> Result<PreparedData> {
    let diff = difference(raw)?;
    let mut decomp = fit_seasonal(&diff, period)?;
    let residual = deseasonalize(&diff, &decomp)?;
    let processed = normalize(&residual, &mut decomp)?;
    Ok(PreparedData {
        raw: raw.clone(),
        processed,
        decomp,
    })
}

/// Pretreat a panel with an already-fitted model: nothing is re-estimated,
/// so a saved checkpoint evaluates new data exactly as it saw training data.
pub fn apply_pretreatment(raw: &SeriesPanel, decomp: &DecompositionModel) -> Result<PreparedData> {
    if !decomp.has_moments() {
        return Err(Error::Contract(
            "decomposition model has no residual moments; it was never fitted".into(),
        ));
    }
    let diff = difference(raw)?;
    let residual = deseasonalize(&diff, decomp)?;
    let mut processed = residual;
    for k in 0..processed.n_sensors() {
        let (mean, std) = (decomp.residual_mean[k], decomp.residual_std[k]);
        for v in &mut processed.values[k] {
            *v = (*v - mean) / std;
        }
    }
    Ok(PreparedData {
        raw: raw.clone(),
        processed,
        decomp: decomp.clone(),
    })
}

/// Everything needed to reconstruct one forecast window back to raw scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconInfo {
    /// Raw target reading aligned with the last encoder step.
    pub raw_anchor: f64,
    /// Raw target readings over the forecast horizon.
    pub raw_targets: Vec<f64>,
    /// Seasonal slot of each forecast step.
    pub slots: Vec<usize>,
}

/// One supervised example: an `[n, T]` input block and its targets.
#[derive(Clone, Debug)]
pub struct Window {
    pub x: Tensor,
    /// Target-sensor value at the last encoder step; seeds the decoder.
    pub y_seed: f64,
    /// Targets on the panel's own scale, length tau.
    pub targets: Vec<f64>,
    /// Panel index of the first encoder step.
    pub start: usize,
    pub split: Split,
    pub recon: Option<ReconInfo>,
}

#[derive(Clone, Debug)]
pub struct WindowSet {
    pub t_len: usize,
    pub tau: usize,
    pub target_sensor: usize,
    pub train: Vec<Window>,
    pub val: Vec<Window>,
    pub test: Vec<Window>,
}

impl WindowSet {
    pub fn of(&self, split: Split) -> &[Window] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Stride-1 sliding windows over each split of a bare panel.
pub fn windowize_panel(
    panel: &SeriesPanel,
    t_len: usize,
    tau: usize,
    target_sensor: usize,
) -> Result<WindowSet> {
    if t_len == 0 || tau == 0 {
        return Err(Error::Config("window lengths must be positive".into()));
    }
    if target_sensor >= panel.n_sensors() {
        return Err(Error::IndexOutOfRange {
            what: "target sensor",
            index: target_sensor,
            len: panel.n_sensors(),
        });
    }
    let mut sets = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let range = panel.split_range(split);
        let span = range.end - range.start;
        if span < t_len + tau {
            return Err(Error::InsufficientData(format!(
                "{split:?} split has {span} rows, need at least {}",
                t_len + tau
            )));
        }
        let mut windows = Vec::with_capacity(span - t_len - tau + 1);
        for w in range.start..=range.end - t_len - tau {
            let mut x = Tensor::zeros(vec![panel.n_sensors(), t_len]);
            for k in 0..panel.n_sensors() {
                for t in 0..t_len {
                    x.set2(k, t, panel.values[k][w + t]);
                }
            }
            windows.push(Window {
                x,
                y_seed: panel.values[target_sensor][w + t_len - 1],
                targets: panel.values[target_sensor][w + t_len..w + t_len + tau].to_vec(),
                start: w,
                split,
                recon: None,
            });
        }
        sets.push(windows);
    }
    let mut it = sets.into_iter();
    Ok(WindowSet {
        t_len,
        tau,
        target_sensor,
        train: it.next().unwrap(),
        val: it.next().unwrap(),
        test: it.next().unwrap(),
    })
}

/// Windows over the pretreated panel, annotated with raw-scale anchors so
/// forecasts can be reconstructed.
pub fn windowize(
    data: &PreparedData,
    t_len: usize,
    tau: usize,
    target_sensor: usize,
) -> Result<WindowSet> {
    let mut set = windowize_panel(&data.processed, t_len, tau, target_sensor)?;
    for windows in [&mut set.train, &mut set.val, &mut set.test] {
        for win in windows.iter_mut() {
            let w = win.start;
            // processed index p corresponds to raw index p + 1
            let anchor_raw = w + t_len;
            win.recon = Some(ReconInfo {
                raw_anchor: data.raw.values[target_sensor][anchor_raw],
                raw_targets: data.raw.values[target_sensor][anchor_raw + 1..anchor_raw + 1 + tau]
                    .to_vec(),
                slots: (0..tau)
                    .map(|j| data.processed.slot(w + t_len + j, data.decomp.period))
                    .collect(),
            });
        }
    }
    Ok(set)
}

/// Map a residual-scale forecast back to raw readings: invert the z-score,
/// re-add the seasonal profile, and integrate from the anchor.
pub fn reconstruct(
    y_res: &[f64],
    model: &DecompositionModel,
    sensor: usize,
    slots: &[usize],
    anchor_value: f64,
) -> Result<Vec<f64>> {
    if !model.has_moments() {
        return Err(Error::Contract(
            "reconstruct needs residual moments; run normalize first".into(),
        ));
    }
    if sensor >= model.profiles.len() {
        return Err(Error::IndexOutOfRange {
            what: "sensor",
            index: sensor,
            len: model.profiles.len(),
        });
    }
    if slots.len() != y_res.len() {
        return Err(Error::Alignment(format!(
            "{} slots for {} forecast steps",
            slots.len(),
            y_res.len()
        )));
    }
    let mut out = Vec::with_capacity(y_res.len());
    let mut acc = anchor_value;
    for (r, &s) in y_res.iter().zip(slots) {
        if s >= model.period {
            return Err(Error::Alignment(format!(
                "slot {s} outside period {}",
                model.period
            )));
        }
        let residual = r * model.residual_std[sensor] + model.residual_mean[sensor];
        let d = residual + model.profiles[sensor][s];
        acc += d;
        out.push(acc);
    }
    Ok(out)
}
