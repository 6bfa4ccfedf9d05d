//! The full forecaster: spatial-attention encoder, temporal-attention
//! decoder, and the affine maps that stitch them together.
//!
//! Decoder wiring per step t': the context vector is computed from the
//! decoder state left by step t'-1, the previous output and the context form
//! a scalar decoder input through an affine map, the decoder LSTM advances,
//! and the step's forecast is an affine readout of `[h_d; context]`. Decoding
//! is autoregressive; teacher forcing can replace the fed-back output with
//! ground truth during training.
//!
//! With `spatial_variant = none` and `temporal_attention = false` the model
//! degenerates to a plain Seq2Seq encoder-decoder whose context is pinned to
//! the final encoder state.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    apply_weights, attention_weights, default_spatial_width, temporal_context_over_cols,
    SpatialAttention, SpatialVariant, TemporalAttention,
};
use crate::error::{Error, Result};
use crate::layers::{AffineLayer, Dropout, LstmCell, Mode};
use crate::pipeline::DecompositionModel;
use crate::tensor::{BoundParams, NodeId, ParamStore, Tape, Tensor};

/// Spatial-attention selection, including the attention-free degeneration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SpatialMode {
    None,
    TemporalInput,
    SpatialInput,
    #[default]
    Hybrid,
}

impl SpatialMode {
    pub fn variant(self) -> Option<SpatialVariant> {
        match self {
            SpatialMode::None => None,
            SpatialMode::TemporalInput => Some(SpatialVariant::TemporalInput),
            SpatialMode::SpatialInput => Some(SpatialVariant::SpatialInput),
            SpatialMode::Hybrid => Some(SpatialVariant::Hybrid),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_sensors: usize,
    /// Encoder window length T.
    pub encoder_length: usize,
    /// Forecast horizon tau.
    pub decoder_length: usize,
    /// LSTM hidden size m, shared by encoder and decoder.
    pub hidden_dim: usize,
    pub layer_count: usize,
    pub spatial_variant: SpatialMode,
    pub temporal_attention: bool,
    pub dropout: f64,
    pub target_sensor: usize,
    pub teacher_forcing: bool,
    /// Spatial attention width l; `None` picks T for the temporal-input
    /// variant and m otherwise.
    pub attention_width: Option<usize>,
}

impl ModelConfig {
    /// Full hybrid model with the selected defaults: T=60, tau=4, m=64, one
    /// stacked layer, dropout 0.2.
    pub fn new(n_sensors: usize, target_sensor: usize) -> Self {
        Self {
            n_sensors,
            encoder_length: 60,
            decoder_length: 4,
            hidden_dim: 64,
            layer_count: 1,
            spatial_variant: SpatialMode::Hybrid,
            temporal_attention: true,
            dropout: 0.2,
            target_sensor,
            teacher_forcing: false,
            attention_width: None,
        }
    }

    /// The attention-free Seq2Seq baseline configuration.
    pub fn seq2seq(n_sensors: usize, target_sensor: usize) -> Self {
        Self {
            spatial_variant: SpatialMode::None,
            temporal_attention: false,
            ..Self::new(n_sensors, target_sensor)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sensors == 0
            || self.encoder_length == 0
            || self.decoder_length == 0
            || self.hidden_dim == 0
            || self.layer_count == 0
        {
            return Err(Error::Config(
                "n_sensors, encoder_length, decoder_length, hidden_dim, and layer_count must be positive"
                    .into(),
            ));
        }
        if self.target_sensor >= self.n_sensors {
            return Err(Error::Config(format!(
                "target sensor {} out of range for {} sensors",
                self.target_sensor, self.n_sensors
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if let Some(w) = self.attention_width {
            if w == 0 {
                return Err(Error::Config("attention_width must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn spatial_width(&self) -> usize {
        match (self.attention_width, self.spatial_variant.variant()) {
            (Some(w), _) => w,
            (None, Some(v)) => default_spatial_width(v, self.encoder_length, self.hidden_dim),
            (None, None) => 0,
        }
    }
}

/// One forecast with its attention traces.
#[derive(Clone, Debug)]
pub struct Forecast {
    /// Predicted target readings, length tau, on the model's input scale.
    pub values: Vec<f64>,
    /// Spatial weights per encoder step, `[T, n]`; uniform rows when spatial
    /// attention is disabled.
    pub spatial_weights: Tensor,
    /// Temporal weights per decoder step, `[tau, T]`; one-hot on the final
    /// encoder step when temporal attention is disabled.
    pub temporal_weights: Tensor,
}

/// Encoder output for one window.
pub struct Encoded {
    /// Hidden-state columns z_t, each `[m]`, dropout already applied.
    pub z_cols: Vec<NodeId>,
    /// Spatial weight trace `[T, n]`.
    pub spatial_trace: Tensor,
}

/// Decoder output for one window.
pub struct Decoded {
    /// Scalar prediction nodes, length tau.
    pub preds: Vec<NodeId>,
    /// Temporal weight trace `[tau, T]`.
    pub temporal_trace: Tensor,
}

/// Inputs controlling one forward pass.
pub struct PassCtx<'a> {
    pub mode: Mode,
    pub rng: &'a mut ChaCha8Rng,
    /// Ground-truth targets for teacher forcing; used only when the config
    /// enables it and `mode` is `Train`.
    pub teacher: Option<&'a [f64]>,
}

#[derive(Debug, Clone)]
pub struct HdsRnn {
    config: ModelConfig,
    store: ParamStore,
    spatial: Option<SpatialAttention>,
    temporal: Option<TemporalAttention>,
    enc_cells: Vec<LstmCell>,
    dec_cells: Vec<LstmCell>,
    /// `[y_prev; context] -> 1`, the decoder input map.
    input_proj: AffineLayer,
    /// `[h_d; context] -> 1`, the emission map.
    output_proj: AffineLayer,
    dropout: Dropout,
}

impl HdsRnn {
    pub fn new(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let m = config.hidden_dim;
        let n = config.n_sensors;
        let t_len = config.encoder_length;

        let spatial = config.spatial_variant.variant().map(|variant| {
            SpatialAttention::new(
                &mut store,
                "encoder.spatial",
                variant,
                n,
                t_len,
                m,
                config.spatial_width(),
                rng,
            )
        });
        let enc_cells = (0..config.layer_count)
            .map(|layer| {
                let input_dim = if layer == 0 { n } else { m };
                LstmCell::new(&mut store, &format!("encoder.lstm{layer}"), input_dim, m, rng)
            })
            .collect();
        let temporal = config
            .temporal_attention
            .then(|| TemporalAttention::new(&mut store, "decoder.temporal", m, rng));
        let dec_cells = (0..config.layer_count)
            .map(|layer| {
                let input_dim = if layer == 0 { 1 } else { m };
                LstmCell::new(&mut store, &format!("decoder.lstm{layer}"), input_dim, m, rng)
            })
            .collect();
        let input_proj = AffineLayer::new(&mut store, "decoder.input_proj", 1 + m, 1, rng);
        let output_proj = AffineLayer::new(&mut store, "decoder.output_proj", 2 * m, 1, rng);
        let dropout = Dropout::new(config.dropout)?;

        Ok(Self {
            config,
            store,
            spatial,
            temporal,
            enc_cells,
            dec_cells,
            input_proj,
            output_proj,
            dropout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn spatial(&self) -> Option<&SpatialAttention> {
        self.spatial.as_ref()
    }

    pub fn temporal(&self) -> Option<&TemporalAttention> {
        self.temporal.as_ref()
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    /// Run the encoder over an `[n, T]` input matrix.
    pub fn encode(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: &Tensor,
        ctx: &mut PassCtx,
    ) -> Result<Encoded> {
        let (n, t_len) = (self.config.n_sensors, self.config.encoder_length);
        if x.shape() != [n, t_len] {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: x.shape().to_vec(),
                rhs: vec![n, t_len],
            });
        }
        let x_node = tape.leaf(x.clone());
        let spatial_ctx = match &self.spatial {
            Some(attn) => Some(attn.prepare(tape, bound, x_node)?),
            None => None,
        };

        let mut states: Vec<(NodeId, NodeId)> =
            self.enc_cells.iter().map(|c| c.zero_state(tape)).collect();
        let mut z_cols = Vec::with_capacity(t_len);
        let mut spatial_trace = Tensor::zeros(vec![t_len, n]);
        for t in 0..t_len {
            let x_t = tape.col(x_node, t)?;
            let weighted = match (&self.spatial, &spatial_ctx) {
                (Some(attn), Some(sctx)) => {
                    let (h_prev, s_prev) = states[0];
                    let scores = attn.scores(tape, bound, sctx, t, h_prev, s_prev)?;
                    let weights = attention_weights(tape, scores)?;
                    for k in 0..n {
                        spatial_trace.set2(t, k, tape.value(weights).data()[k]);
                    }
                    apply_weights(tape, weights, x_t)?
                }
                _ => {
                    for k in 0..n {
                        spatial_trace.set2(t, k, 1.0 / n as f64);
                    }
                    x_t
                }
            };
            let mut layer_in = weighted;
            for (cell, state) in self.enc_cells.iter().zip(states.iter_mut()) {
                let (h, s) = cell.step(tape, bound, layer_in, state.0, state.1)?;
                *state = (h, s);
                layer_in = h;
            }
            let z_t = self.dropout.apply(tape, layer_in, ctx.mode, ctx.rng)?;
            z_cols.push(z_t);
        }
        Ok(Encoded {
            z_cols,
            spatial_trace,
        })
    }

    /// Run the decoder for `tau` steps, seeded with the last observed target.
    pub fn decode(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        encoded: &Encoded,
        y_seed: f64,
        ctx: &mut PassCtx,
    ) -> Result<Decoded> {
        let (t_len, tau, m) = (
            self.config.encoder_length,
            self.config.decoder_length,
            self.config.hidden_dim,
        );
        if encoded.z_cols.len() != t_len {
            return Err(Error::Dimension {
                op: "decode",
                msg: format!("encoder produced {} states, expected {t_len}", encoded.z_cols.len()),
            });
        }
        let mut states: Vec<(NodeId, NodeId)> =
            self.dec_cells.iter().map(|c| c.zero_state(tape)).collect();
        let mut prev_y = tape.leaf_scalar(y_seed);
        let mut preds = Vec::with_capacity(tau);
        let mut temporal_trace = Tensor::zeros(vec![tau, t_len]);
        let teach = ctx.mode == Mode::Train && self.config.teacher_forcing;
        for j in 0..tau {
            let context = match &self.temporal {
                Some(attn) => {
                    let (h_prev, s_prev) = states[0];
                    let scores =
                        attn.scores_over_cols(tape, bound, &encoded.z_cols, h_prev, s_prev)?;
                    let beta = attention_weights(tape, scores)?;
                    for t in 0..t_len {
                        temporal_trace.set2(j, t, tape.value(beta).data()[t]);
                    }
                    temporal_context_over_cols(tape, beta, &encoded.z_cols)?
                }
                None => {
                    temporal_trace.set2(j, t_len - 1, 1.0);
                    encoded.z_cols[t_len - 1]
                }
            };
            debug_assert_eq!(tape.value(context).shape(), [m]);
            let joined = tape.concat(prev_y, context, 0)?;
            let dec_in = self.input_proj.apply(tape, bound, joined)?;
            let mut layer_in = dec_in;
            for (cell, state) in self.dec_cells.iter().zip(states.iter_mut()) {
                let (h, s) = cell.step(tape, bound, layer_in, state.0, state.1)?;
                *state = (h, s);
                layer_in = h;
            }
            let h_top = self.dropout.apply(tape, layer_in, ctx.mode, ctx.rng)?;
            let readout = tape.concat(h_top, context, 0)?;
            let y_hat = self.output_proj.apply(tape, bound, readout)?;
            preds.push(y_hat);
            prev_y = match (teach, ctx.teacher) {
                (true, Some(truth)) if j + 1 < tau => tape.leaf_scalar(truth[j]),
                _ => y_hat,
            };
        }
        Ok(Decoded {
            preds,
            temporal_trace,
        })
    }

    /// Encode then decode on a fresh context; graph-building entry point.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: &Tensor,
        y_seed: f64,
        ctx: &mut PassCtx,
    ) -> Result<(Encoded, Decoded)> {
        let encoded = self.encode(tape, bound, x, ctx)?;
        let decoded = self.decode(tape, bound, &encoded, y_seed, ctx)?;
        Ok((encoded, decoded))
    }

    /// Deterministic inference pass on a private tape.
    pub fn forward(&self, x: &Tensor, y_seed: f64) -> Result<Forecast> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = PassCtx {
            mode: Mode::Infer,
            rng: &mut rng,
            teacher: None,
        };
        let (encoded, decoded) = self.forward_on_tape(&mut tape, &bound, x, y_seed, &mut ctx)?;
        Ok(Forecast {
            values: decoded
                .preds
                .iter()
                .map(|&p| tape.value(p).data()[0])
                .collect(),
            spatial_weights: encoded.spatial_trace,
            temporal_weights: decoded.temporal_trace,
        })
    }

    pub fn to_checkpoint(&self, preprocessing: Option<CheckpointPreprocessing>) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self
                .store
                .iter()
                .map(|(name, value)| NamedParam {
                    name: name.to_string(),
                    value: value.clone(),
                })
                .collect(),
            preprocessing,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint version {}",
                ckpt.format_version
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(ckpt.config.clone(), &mut rng)?;
        if ckpt.params.len() != model.store.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model expects {}",
                ckpt.params.len(),
                model.store.len()
            )));
        }
        for p in &ckpt.params {
            let id = model.store.id_by_name(&p.name).ok_or_else(|| {
                Error::Config(format!("checkpoint parameter {} unknown to model", p.name))
            })?;
            if model.store.get(id).shape() != p.value.shape() {
                return Err(Error::Config(format!(
                    "checkpoint parameter {} has shape {:?}, model expects {:?}",
                    p.name,
                    p.value.shape(),
                    model.store.get(id).shape()
                )));
            }
            *model.store.get_mut(id) = p.value.clone();
        }
        Ok(model)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub value: Tensor,
}

/// Pretreatment state embedded in a checkpoint so a saved model can be
/// evaluated against raw CSV data.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointPreprocessing {
    pub decomposition: DecompositionModel,
    pub target_sensor_id: String,
    pub split_ratio: [usize; 3],
}

/// Versioned JSON container for a trained model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: Vec<NamedParam>,
    pub preprocessing: Option<CheckpointPreprocessing>,
}

impl Checkpoint {
    pub fn to_json_file(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            n_sensors: 3,
            encoder_length: 5,
            decoder_length: 2,
            hidden_dim: 4,
            layer_count: 1,
            spatial_variant: SpatialMode::Hybrid,
            temporal_attention: true,
            dropout: 0.0,
            target_sensor: 0,
            teacher_forcing: false,
            attention_width: None,
        }
    }

    fn infer_ctx(rng: &mut ChaCha8Rng) -> PassCtx<'_> {
        PassCtx {
            mode: Mode::Infer,
            rng,
            teacher: None,
        }
    }

    fn copy_shared_params(src: &HdsRnn, dst: &mut HdsRnn) {
        let names: Vec<String> = src.store.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            if let Some(dst_id) = dst.store.id_by_name(&name) {
                let src_id = src.store.id_by_name(&name).unwrap();
                *dst.store.get_mut(dst_id) = src.store.get(src_id).clone();
            }
        }
    }

    #[test]
    fn forward_shape_contract_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = small_config();
        let model = HdsRnn::new(cfg.clone(), &mut rng).unwrap();
        let x = Tensor::uniform(vec![3, 5], -1.0, 1.0, &mut rng);
        let f1 = model.forward(&x, 0.3).unwrap();
        let f2 = model.forward(&x, 0.3).unwrap();
        assert_eq!(f1.values.len(), cfg.decoder_length);
        assert_eq!(f1.spatial_weights.shape(), &[5, 3]);
        assert_eq!(f1.temporal_weights.shape(), &[2, 5]);
        for (a, b) in f1.values.iter().zip(&f2.values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // convex trace rows
        for t in 0..5 {
            let row: f64 = (0..3).map(|k| f1.spatial_weights.at2(t, k)).sum();
            assert!((row - 1.0).abs() < 1e-12);
        }
        for j in 0..2 {
            let row: f64 = (0..5).map(|t| f1.temporal_weights.at2(j, t)).sum();
            assert!((row - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_parameters_forecast_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = HdsRnn::new(small_config(), &mut rng).unwrap();
        for t in model.store.values_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let x = Tensor::uniform(vec![3, 5], -1.0, 1.0, &mut rng);
        let f = model.forward(&x, 0.7).unwrap();
        assert_eq!(f.values, vec![0.0, 0.0]);
    }

    #[test]
    fn single_sensor_encoder_equals_plain_lstm_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut with_attn = small_config();
        with_attn.n_sensors = 1;
        let model_a = HdsRnn::new(with_attn.clone(), &mut rng).unwrap();
        let mut plain_cfg = with_attn;
        plain_cfg.spatial_variant = SpatialMode::None;
        let mut model_b = HdsRnn::new(plain_cfg, &mut rng).unwrap();
        copy_shared_params(&model_a, &mut model_b);

        let x = Tensor::uniform(vec![1, 5], -1.0, 1.0, &mut rng);
        let run = |model: &HdsRnn| {
            let mut tape = Tape::new();
            let bound = model.store.bind(&mut tape);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut ctx = infer_ctx(&mut rng);
            let enc = model.encode(&mut tape, &bound, &x, &mut ctx).unwrap();
            enc.z_cols
                .iter()
                .map(|&z| tape.value(z).data().to_vec())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(&model_a), run(&model_b));
    }

    #[test]
    fn encode_matches_scripted_composition_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = HdsRnn::new(small_config(), &mut rng).unwrap();
        let x = Tensor::uniform(vec![3, 5], -1.0, 1.0, &mut rng);

        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = infer_ctx(&mut r);
        let enc = model.encode(&mut tape, &bound, &x, &mut ctx).unwrap();

        // straight-line script over the public layer/attention operations
        let mut tape2 = Tape::new();
        let bound2 = model.store.bind(&mut tape2);
        let attn = model.spatial().unwrap();
        let cell = &model.enc_cells[0];
        let xn = tape2.leaf(x.clone());
        let sctx = attn.prepare(&mut tape2, &bound2, xn).unwrap();
        let (mut h, mut s) = cell.zero_state(&mut tape2);
        for t in 0..5 {
            let e = attn.scores(&mut tape2, &bound2, &sctx, t, h, s).unwrap();
            let a = attention_weights(&mut tape2, e).unwrap();
            let x_t = tape2.col(xn, t).unwrap();
            let w = apply_weights(&mut tape2, a, x_t).unwrap();
            let (hn, sn) = cell.step(&mut tape2, &bound2, w, h, s).unwrap();
            h = hn;
            s = sn;
            for (got, want) in tape.value(enc.z_cols[t]).data().iter().zip(tape2.value(h).data()) {
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decode_matches_scripted_composition_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cfg = small_config();
        cfg.encoder_length = 4;
        cfg.hidden_dim = 3;
        let model = HdsRnn::new(cfg, &mut rng).unwrap();
        let x = Tensor::uniform(vec![3, 4], -1.0, 1.0, &mut rng);
        let y_seed = 0.42;

        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = infer_ctx(&mut r);
        let (enc, dec) = model
            .forward_on_tape(&mut tape, &bound, &x, y_seed, &mut ctx)
            .unwrap();

        // script the decoder from the same encoder columns
        let z_vals: Vec<Vec<f64>> = enc.z_cols.iter().map(|&z| tape.value(z).data().to_vec()).collect();
        let mut tape2 = Tape::new();
        let bound2 = model.store.bind(&mut tape2);
        let z_cols: Vec<NodeId> = z_vals
            .iter()
            .map(|v| tape2.leaf(Tensor::vector(v.clone()).unwrap()))
            .collect();
        let attn = model.temporal().unwrap();
        let cell = &model.dec_cells[0];
        let (mut h, mut s) = cell.zero_state(&mut tape2);
        let mut prev = tape2.leaf_scalar(y_seed);
        for j in 0..2 {
            let f = attn
                .scores_over_cols(&mut tape2, &bound2, &z_cols, h, s)
                .unwrap();
            let beta = attention_weights(&mut tape2, f).unwrap();
            let zeta = temporal_context_over_cols(&mut tape2, beta, &z_cols).unwrap();
            let joined = tape2.concat(prev, zeta, 0).unwrap();
            let din = model.input_proj.apply(&mut tape2, &bound2, joined).unwrap();
            let (hn, sn) = cell.step(&mut tape2, &bound2, din, h, s).unwrap();
            h = hn;
            s = sn;
            let read = tape2.concat(h, zeta, 0).unwrap();
            let y = model.output_proj.apply(&mut tape2, &bound2, read).unwrap();
            let got = tape.value(dec.preds[j]).data()[0];
            let want = tape2.value(y).data()[0];
            assert!((got - want).abs() < 1e-12, "step {j}: {got} vs {want}");
            prev = y;
        }
    }

    #[test]
    fn seq2seq_mode_matches_scripted_seq2seq_and_counts_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut cfg = small_config();
        cfg.spatial_variant = SpatialMode::None;
        cfg.temporal_attention = false;
        let model = HdsRnn::new(cfg.clone(), &mut rng).unwrap();

        let (n, m, t_len) = (cfg.n_sensors, cfg.hidden_dim, cfg.encoder_length);
        let lstm = |input: usize| 4 * (m * (input + m) + m);
        let expected = lstm(n) + lstm(1) + (1 + m + 1) + (2 * m + 1);
        assert_eq!(model.param_count(), expected);

        let hybrid = HdsRnn::new(small_config(), &mut rng).unwrap();
        let l = small_config().spatial_width();
        let spatial = l + l * 2 * m + l * t_len + l * n + l;
        let temporal = m + m * 2 * m + m * m + m;
        assert_eq!(hybrid.param_count(), expected + spatial + temporal);

        // scripted plain Seq2Seq: encoder LSTM, context pinned to final state
        let x = Tensor::uniform(vec![3, 5], -1.0, 1.0, &mut rng);
        let y_seed = -0.8;
        let forecast = model.forward(&x, y_seed).unwrap();

        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let xn = tape.leaf(x.clone());
        let cell = &model.enc_cells[0];
        let (mut h, mut s) = cell.zero_state(&mut tape);
        for t in 0..5 {
            let x_t = tape.col(xn, t).unwrap();
            let (hn, sn) = cell.step(&mut tape, &bound, x_t, h, s).unwrap();
            h = hn;
            s = sn;
        }
        let ctx_fixed = h;
        let dcell = &model.dec_cells[0];
        let (mut hd, mut sd) = dcell.zero_state(&mut tape);
        let mut prev = tape.leaf_scalar(y_seed);
        for j in 0..2 {
            let joined = tape.concat(prev, ctx_fixed, 0).unwrap();
            let din = model.input_proj.apply(&mut tape, &bound, joined).unwrap();
            let (hn, sn) = dcell.step(&mut tape, &bound, din, hd, sd).unwrap();
            hd = hn;
            sd = sn;
            let read = tape.concat(hd, ctx_fixed, 0).unwrap();
            let y_node = model.output_proj.apply(&mut tape, &bound, read).unwrap();
            let y = tape.value(y_node).data()[0];
            assert_eq!(forecast.values[j].to_bits(), y.to_bits(), "step {j}");
            prev = tape.leaf_scalar(y);
        }
        // temporal trace is one-hot on the last encoder step
        for j in 0..2 {
            assert_eq!(forecast.temporal_weights.at2(j, t_len - 1), 1.0);
        }
    }

    #[test]
    fn hybrid_degeneracies_hold_end_to_end() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut cfg = small_config();
        cfg.attention_width = Some(4);
        let hybrid = HdsRnn::new(cfg.clone(), &mut rng).unwrap();
        let x = Tensor::uniform(vec![3, 5], -1.0, 1.0, &mut rng);

        let mut zeroed = hybrid.clone();
        let attn = zeroed.spatial.as_ref().unwrap();
        let snap_id = attn.u_snapshot.unwrap();
        for v in zeroed.store.get_mut(snap_id).data_mut() {
            *v = 0.0;
        }
        let mut plain_cfg = cfg.clone();
        plain_cfg.spatial_variant = SpatialMode::TemporalInput;
        let mut plain = HdsRnn::new(plain_cfg, &mut rng).unwrap();
        copy_shared_params(&zeroed, &mut plain);
        let a = zeroed.forward(&x, 0.1).unwrap();
        let b = plain.forward(&x, 0.1).unwrap();
        for (x1, x2) in a.values.iter().zip(&b.values) {
            assert!((x1 - x2).abs() < 1e-12);
        }

        let mut zeroed = hybrid.clone();
        let u_id = zeroed.spatial.as_ref().unwrap().u;
        for v in zeroed.store.get_mut(u_id).data_mut() {
            *v = 0.0;
        }
        let mut snap_cfg = cfg;
        snap_cfg.spatial_variant = SpatialMode::SpatialInput;
        let mut snap = HdsRnn::new(snap_cfg, &mut rng).unwrap();
        copy_shared_params(&zeroed, &mut snap);
        // the hybrid's snapshot projection becomes the spatial variant's u
        let src = zeroed.store.id_by_name("encoder.spatial.u_snapshot").unwrap();
        let dst = snap.store.id_by_name("encoder.spatial.u").unwrap();
        *snap.store.get_mut(dst) = zeroed.store.get(src).clone();
        let a = zeroed.forward(&x, 0.1).unwrap();
        let b = snap.forward(&x, 0.1).unwrap();
        for (x1, x2) in a.values.iter().zip(&b.values) {
            assert!((x1 - x2).abs() < 1e-12);
        }
    }

    #[test]
    fn sensor_permutation_leaves_forecast_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut cfg = small_config();
        cfg.n_sensors = 4;
        let model = HdsRnn::new(cfg, &mut rng).unwrap();
        let x = Tensor::uniform(vec![4, 5], -1.0, 1.0, &mut rng);
        let base = model.forward(&x, 0.2).unwrap();

        // permute non-target sensors: 0 (target) fixed, 1 -> 3, 2 -> 1, 3 -> 2
        let perm = [0usize, 3, 1, 2];
        let mut xp = Tensor::zeros(vec![4, 5]);
        for k in 0..4 {
            for t in 0..5 {
                xp.set2(k, t, x.at2(perm[k], t));
            }
        }
        let mut permuted = model.clone();
        let attn = permuted.spatial.as_ref().unwrap();
        let snap_id = attn.u_snapshot.unwrap();
        let old = permuted.store.get(snap_id).clone();
        let l = old.shape()[0];
        let new = permuted.store.get_mut(snap_id);
        for li in 0..l {
            for k in 0..4 {
                new.set2(li, k, old.at2(li, perm[k]));
            }
        }
        let cell = permuted.enc_cells[0].clone();
        for w_id in [cell.w_input, cell.w_forget, cell.w_cell, cell.w_output] {
            let old = permuted.store.get(w_id).clone();
            let new = permuted.store.get_mut(w_id);
            for r in 0..old.shape()[0] {
                for k in 0..4 {
                    new.set2(r, k, old.at2(r, perm[k]));
                }
            }
        }
        let shuffled = permuted.forward(&xp, 0.2).unwrap();
        for (a, b) in base.values.iter().zip(&shuffled.values) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn full_model_gradient_passes_finite_difference_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = HdsRnn::new(small_config(), &mut rng).unwrap();
        let x = Tensor::uniform(vec![3, 5], -1.0, 1.0, &mut rng);
        let truth: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut store = model.store.clone();
        let report = grad_check(&mut store, 1e-5, 1e-4, |tape, bound| {
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let mut ctx = PassCtx {
                mode: Mode::Infer,
                rng: &mut r,
                teacher: None,
            };
            let (_, dec) = model.forward_on_tape(tape, bound, &x, 0.5, &mut ctx)?;
            let mut preds = dec.preds[0];
            for &p in &dec.preds[1..] {
                preds = tape.concat(preds, p, 0)?;
            }
            let t = tape.leaf(Tensor::vector(truth.clone()).unwrap());
            tape.mse_loss(preds, t)
        })
        .unwrap();
        assert!(report.passed(), "worst {:?}", report.worst());
    }

    #[test]
    fn checkpoint_round_trip_is_value_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let model = HdsRnn::new(small_config(), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.to_checkpoint(None).to_json_file(&path).unwrap();
        let loaded = HdsRnn::from_checkpoint(&Checkpoint::from_json_file(&path).unwrap()).unwrap();
        for ((na, ta), (nb, tb)) in model.store.iter().zip(loaded.store.iter()) {
            assert_eq!(na, nb);
            for (a, b) in ta.data().iter().zip(tb.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        let x = Tensor::uniform(vec![3, 5], -1.0, 1.0, &mut rng);
        let fa = model.forward(&x, 0.0).unwrap();
        let fb = loaded.forward(&x, 0.0).unwrap();
        for (a, b) in fa.values.iter().zip(&fb.values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut cfg = small_config();
        cfg.target_sensor = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = small_config();
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = small_config();
        cfg.hidden_dim = 0;
        assert!(cfg.validate().is_err());
    }
}
