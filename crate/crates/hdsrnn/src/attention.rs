//! The two attention stages: spatial attention over input sensors in the
//! encoder, temporal attention over encoder states in the decoder.
//!
//! Three spatial score functions are supported. `TemporalInput` scores sensor
//! k from its own history `X^k` (the DS-RNN form), `SpatialInput` scores from
//! the cross-sensor snapshot `X^t` (DS-RNN-II), and `Hybrid` sums both terms.
//! Zeroing the hybrid's snapshot projection reproduces `TemporalInput`
//! exactly, and zeroing its history projection reproduces `SpatialInput`; the
//! additions below are ordered so those degeneracies hold bitwise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BoundParams, NodeId, ParamId, ParamStore, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpatialVariant {
    /// Score from the sensor's own history `X^k` over the window.
    TemporalInput,
    /// Score from the cross-sensor snapshot `X^t` at the current step.
    SpatialInput,
    /// Score from both `X^k` and `X^t`.
    Hybrid,
}

/// Default width of the attention hidden layer: the window length when the
/// score consumes per-sensor histories, the LSTM hidden size otherwise.
pub fn default_spatial_width(variant: SpatialVariant, t_len: usize, hidden_dim: usize) -> usize {
    match variant {
        SpatialVariant::TemporalInput => t_len,
        _ => hidden_dim,
    }
}

/// Encoder spatial attention parameters.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub variant: SpatialVariant,
    pub n_sensors: usize,
    pub t_len: usize,
    pub hidden_dim: usize,
    /// Attention hidden width `l`.
    pub width: usize,
    /// Score projection, `[l]`.
    pub v: ParamId,
    /// State projection, `[l, 2m]`.
    pub w: ParamId,
    /// History projection `[l, T]` for TemporalInput/Hybrid, snapshot
    /// projection `[l, n]` for SpatialInput.
    pub u: ParamId,
    /// Snapshot projection `[l, n]`, hybrid only.
    pub u_snapshot: Option<ParamId>,
    /// Bias, `[l]`.
    pub b: ParamId,
}

/// Per-window precomputation for spatial scoring: the input matrix leaf and,
/// when the variant consumes histories, the step-invariant `U_e X^k` columns.
pub struct SpatialCtx {
    pub x: NodeId,
    history_proj: Option<NodeId>,
}

impl SpatialAttention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        variant: SpatialVariant,
        n_sensors: usize,
        t_len: usize,
        hidden_dim: usize,
        width: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        let l = width;
        let v = store.register(format!("{prefix}.v"), Tensor::uniform(vec![l], -0.5, 0.5, rng));
        let w = store.register(format!("{prefix}.w"), Tensor::glorot(l, 2 * hidden_dim, rng));
        let u_cols = match variant {
            SpatialVariant::SpatialInput => n_sensors,
            _ => t_len,
        };
        let u = store.register(format!("{prefix}.u"), Tensor::glorot(l, u_cols, rng));
        let u_snapshot = match variant {
            SpatialVariant::Hybrid => Some(
                store.register(format!("{prefix}.u_snapshot"), Tensor::glorot(l, n_sensors, rng)),
            ),
            _ => None,
        };
        let b = store.register(format!("{prefix}.b"), Tensor::zeros(vec![l]));
        Self {
            variant,
            n_sensors,
            t_len,
            hidden_dim,
            width,
            v,
            w,
            u,
            u_snapshot,
            b,
        }
    }

    /// Stage the input matrix (shape `[n, T]`) for per-step scoring.
    pub fn prepare(&self, tape: &mut Tape, bound: &BoundParams, x: NodeId) -> Result<SpatialCtx> {
        let xv = tape.value(x);
        if xv.shape() != [self.n_sensors, self.t_len] {
            return Err(Error::ShapeMismatch {
                op: "spatial_scores input",
                lhs: xv.shape().to_vec(),
                rhs: vec![self.n_sensors, self.t_len],
            });
        }
        let history_proj = match self.variant {
            SpatialVariant::SpatialInput => None,
            _ => {
                let xt = tape.transpose(x)?;
                Some(tape.matmul(bound.node(self.u), xt)?)
            }
        };
        Ok(SpatialCtx { x, history_proj })
    }

    /// Score vector `e_t` over sensors at encoder step `t` (0-based).
    pub fn scores(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        ctx: &SpatialCtx,
        t: usize,
        h_prev: NodeId,
        s_prev: NodeId,
    ) -> Result<NodeId> {
        if t >= self.t_len {
            return Err(Error::IndexOutOfRange {
                what: "encoder step",
                index: t,
                len: self.t_len,
            });
        }
        let hs = tape.concat(h_prev, s_prev, 0)?;
        let base = tape.matmul(bound.node(self.w), hs)?;
        let snapshot_term = match self.variant {
            SpatialVariant::TemporalInput => None,
            SpatialVariant::SpatialInput => {
                let x_t = tape.col(ctx.x, t)?;
                Some(tape.matmul(bound.node(self.u), x_t)?)
            }
            SpatialVariant::Hybrid => {
                let x_t = tape.col(ctx.x, t)?;
                Some(tape.matmul(bound.node(self.u_snapshot.unwrap()), x_t)?)
            }
        };
        let mut per_sensor = Vec::with_capacity(self.n_sensors);
        for k in 0..self.n_sensors {
            let mut acc = match &ctx.history_proj {
                Some(proj) => {
                    let uxk = tape.col(*proj, k)?;
                    tape.add(base, uxk)?
                }
                None => base,
            };
            if let Some(term) = snapshot_term {
                acc = tape.add(acc, term)?;
            }
            let pre = tape.add(acc, bound.node(self.b))?;
            let act = tape.tanh(pre);
            per_sensor.push(tape.matmul(bound.node(self.v), act)?);
        }
        concat_all(tape, &per_sensor)
    }
}

/// Normalize a score vector into convex attention weights (Eq. softmax form).
pub fn attention_weights(tape: &mut Tape, scores: NodeId) -> Result<NodeId> {
    tape.softmax(scores)
}

/// Scale the sensor snapshot by its attention weights; the encoder LSTM input.
pub fn apply_weights(tape: &mut Tape, weights: NodeId, x_t: NodeId) -> Result<NodeId> {
    let (wv, xv) = (tape.value(weights), tape.value(x_t));
    if wv.shape() != xv.shape() {
        return Err(Error::ShapeMismatch {
            op: "apply_spatial",
            lhs: wv.shape().to_vec(),
            rhs: xv.shape().to_vec(),
        });
    }
    tape.mul(weights, x_t)
}

/// Decoder temporal attention parameters.
#[derive(Debug, Clone)]
pub struct TemporalAttention {
    pub hidden_dim: usize,
    /// Score projection, `[m]`.
    pub v: ParamId,
    /// Decoder-state projection, `[m, 2m]`.
    pub w: ParamId,
    /// Encoder-state projection, `[m, m]`.
    pub u: ParamId,
    /// Bias, `[m]`.
    pub b: ParamId,
}

impl TemporalAttention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        hidden_dim: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        let m = hidden_dim;
        let v = store.register(format!("{prefix}.v"), Tensor::uniform(vec![m], -0.5, 0.5, rng));
        let w = store.register(format!("{prefix}.w"), Tensor::glorot(m, 2 * m, rng));
        let u = store.register(format!("{prefix}.u"), Tensor::glorot(m, m, rng));
        let b = store.register(format!("{prefix}.b"), Tensor::zeros(vec![m]));
        Self {
            hidden_dim,
            v,
            w,
            u,
            b,
        }
    }

    /// Scores `f_{t',t}` over all encoder steps, from encoder state columns.
    pub fn scores_over_cols(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        z_cols: &[NodeId],
        h_d_prev: NodeId,
        s_d_prev: NodeId,
    ) -> Result<NodeId> {
        if z_cols.is_empty() {
            return Err(Error::Dimension {
                op: "temporal_scores",
                msg: "encoder output sequence is empty".into(),
            });
        }
        let hs = tape.concat(h_d_prev, s_d_prev, 0)?;
        let base = tape.matmul(bound.node(self.w), hs)?;
        let mut per_step = Vec::with_capacity(z_cols.len());
        for &z_t in z_cols {
            let zv = tape.value(z_t);
            if zv.shape() != [self.hidden_dim] {
                return Err(Error::ShapeMismatch {
                    op: "temporal_scores",
                    lhs: zv.shape().to_vec(),
                    rhs: vec![self.hidden_dim],
                });
            }
            let uz = tape.matmul(bound.node(self.u), z_t)?;
            let sum = tape.add(base, uz)?;
            let pre = tape.add(sum, bound.node(self.b))?;
            let act = tape.tanh(pre);
            per_step.push(tape.matmul(bound.node(self.v), act)?);
        }
        concat_all(tape, &per_step)
    }

    /// Same scores, taking the encoder output as an `[m, T]` matrix.
    pub fn scores(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        z: NodeId,
        h_d_prev: NodeId,
        s_d_prev: NodeId,
    ) -> Result<NodeId> {
        let cols = matrix_cols(tape, z, self.hidden_dim)?;
        self.scores_over_cols(tape, bound, &cols, h_d_prev, s_d_prev)
    }
}

/// Context vector: convex combination of encoder state columns under `beta`.
pub fn temporal_context_over_cols(
    tape: &mut Tape,
    beta: NodeId,
    z_cols: &[NodeId],
) -> Result<NodeId> {
    let bv = tape.value(beta);
    if bv.rank() != 1 || bv.numel() != z_cols.len() {
        return Err(Error::ShapeMismatch {
            op: "temporal_context",
            lhs: bv.shape().to_vec(),
            rhs: vec![z_cols.len()],
        });
    }
    let mut acc: Option<NodeId> = None;
    for (t, &z_t) in z_cols.iter().enumerate() {
        let b_t = tape.element(beta, t)?;
        let term = tape.mul(b_t, z_t)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one column"))
}

/// Context vector from an `[m, T]` encoder output matrix.
pub fn temporal_context(tape: &mut Tape, beta: NodeId, z: NodeId) -> Result<NodeId> {
    let m = tape.value(z).shape()[0];
    let cols = matrix_cols(tape, z, m)?;
    temporal_context_over_cols(tape, beta, &cols)
}

fn matrix_cols(tape: &mut Tape, z: NodeId, rows: usize) -> Result<Vec<NodeId>> {
    let zv = tape.value(z);
    if zv.rank() != 2 || zv.shape()[0] != rows {
        return Err(Error::Dimension {
            op: "matrix_cols",
            msg: format!("expected [{rows}, T], got {:?}", zv.shape()),
        });
    }
    let t_len = zv.shape()[1];
    (0..t_len).map(|t| tape.col(z, t)).collect()
}

fn concat_all(tape: &mut Tape, parts: &[NodeId]) -> Result<NodeId> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = tape.concat(acc, p, 0)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        store: ParamStore,
        attn: SpatialAttention,
        x: Tensor,
        h: Tensor,
        s: Tensor,
    }

    fn fixture(variant: SpatialVariant, seed: u64) -> Fixture {
        let (n, t_len, m, l) = (3, 4, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let attn = SpatialAttention::new(&mut store, "spatial", variant, n, t_len, m, l, &mut rng);
        // biases are zero-initialized; randomize for the oracle comparison
        *store.get_mut(attn.b) = Tensor::uniform(vec![l], -0.5, 0.5, &mut rng);
        Fixture {
            store,
            attn,
            x: Tensor::uniform(vec![n, t_len], -1.0, 1.0, &mut rng),
            h: Tensor::uniform(vec![m], -1.0, 1.0, &mut rng),
            s: Tensor::uniform(vec![m], -1.0, 1.0, &mut rng),
        }
    }

    fn run_scores(fx: &Fixture, t: usize) -> Vec<f64> {
        let mut tape = Tape::new();
        let bound = fx.store.bind(&mut tape);
        let x = tape.leaf(fx.x.clone());
        let h = tape.leaf(fx.h.clone());
        let s = tape.leaf(fx.s.clone());
        let ctx = fx.attn.prepare(&mut tape, &bound, x).unwrap();
        let e = fx.attn.scores(&mut tape, &bound, &ctx, t, h, s).unwrap();
        tape.value(e).data().to_vec()
    }

    // Termwise evaluation of the printed score formula, scalar loops only.
    fn scores_oracle(fx: &Fixture, t: usize) -> Vec<f64> {
        let attn = &fx.attn;
        let l = attn.width;
        let hs: Vec<f64> = fx.h.data().iter().chain(fx.s.data()).copied().collect();
        let w = fx.store.get(attn.w);
        let b = fx.store.get(attn.b);
        let v = fx.store.get(attn.v);
        let u = fx.store.get(attn.u);
        let mut out = Vec::with_capacity(attn.n_sensors);
        for k in 0..attn.n_sensors {
            let mut e = 0.0;
            for li in 0..l {
                let mut pre = b.data()[li];
                for (j, hsj) in hs.iter().enumerate() {
                    pre += w.at2(li, j) * hsj;
                }
                match attn.variant {
                    SpatialVariant::TemporalInput => {
                        for j in 0..attn.t_len {
                            pre += u.at2(li, j) * fx.x.at2(k, j);
                        }
                    }
                    SpatialVariant::SpatialInput => {
                        for j in 0..attn.n_sensors {
                            pre += u.at2(li, j) * fx.x.at2(j, t);
                        }
                    }
                    SpatialVariant::Hybrid => {
                        for j in 0..attn.t_len {
                            pre += u.at2(li, j) * fx.x.at2(k, j);
                        }
                        let up = fx.store.get(attn.u_snapshot.unwrap());
                        for j in 0..attn.n_sensors {
                            pre += up.at2(li, j) * fx.x.at2(j, t);
                        }
                    }
                }
                e += v.data()[li] * pre.tanh();
            }
            out.push(e);
        }
        out
    }

    #[test]
    fn zero_parameters_give_zero_scores() {
        for variant in [
            SpatialVariant::TemporalInput,
            SpatialVariant::SpatialInput,
            SpatialVariant::Hybrid,
        ] {
            let mut fx = fixture(variant, 1);
            for t in fx.store.values_mut() {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
            assert_eq!(run_scores(&fx, 2), vec![0.0; 3]);
        }
    }

    #[test]
    fn scores_match_termwise_oracle_per_variant() {
        for (variant, seed) in [
            (SpatialVariant::TemporalInput, 10),
            (SpatialVariant::SpatialInput, 11),
            (SpatialVariant::Hybrid, 12),
        ] {
            let fx = fixture(variant, seed);
            for t in 0..4 {
                let got = run_scores(&fx, t);
                let want = scores_oracle(&fx, t);
                for (a, b) in got.iter().zip(&want) {
                    assert!((a - b).abs() < 1e-12, "{variant:?} step {t}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn hybrid_with_zero_snapshot_term_is_temporal_input() {
        let mut hybrid = fixture(SpatialVariant::Hybrid, 20);
        for v in hybrid.store.get_mut(hybrid.attn.u_snapshot.unwrap()).data_mut() {
            *v = 0.0;
        }
        let mut plain = fixture(SpatialVariant::TemporalInput, 999);
        plain.x = hybrid.x.clone();
        plain.h = hybrid.h.clone();
        plain.s = hybrid.s.clone();
        for (name, dst) in [("v", plain.attn.v), ("w", plain.attn.w), ("u", plain.attn.u), ("b", plain.attn.b)] {
            let src = hybrid.store.id_by_name(&format!("spatial.{name}")).unwrap();
            *plain.store.get_mut(dst) = hybrid.store.get(src).clone();
        }
        for t in 0..4 {
            let a = run_scores(&hybrid, t);
            let b = run_scores(&plain, t);
            assert_eq!(a, b, "step {t}");
        }
    }

    #[test]
    fn hybrid_with_zero_history_term_is_spatial_input() {
        let mut hybrid = fixture(SpatialVariant::Hybrid, 21);
        for v in hybrid.store.get_mut(hybrid.attn.u).data_mut() {
            *v = 0.0;
        }
        let mut plain = fixture(SpatialVariant::SpatialInput, 998);
        plain.x = hybrid.x.clone();
        plain.h = hybrid.h.clone();
        plain.s = hybrid.s.clone();
        for (name, dst) in [("v", plain.attn.v), ("w", plain.attn.w), ("b", plain.attn.b)] {
            let src = hybrid.store.id_by_name(&format!("spatial.{name}")).unwrap();
            *plain.store.get_mut(dst) = hybrid.store.get(src).clone();
        }
        // hybrid's snapshot projection plays the spatial variant's u role
        let src = hybrid.store.id_by_name("spatial.u_snapshot").unwrap();
        *plain.store.get_mut(plain.attn.u) = hybrid.store.get(src).clone();
        for t in 0..4 {
            let a = run_scores(&hybrid, t);
            let b = run_scores(&plain, t);
            assert_eq!(a, b, "step {t}");
        }
    }

    #[test]
    fn step_out_of_range_is_an_index_error() {
        let fx = fixture(SpatialVariant::Hybrid, 30);
        let mut tape = Tape::new();
        let bound = fx.store.bind(&mut tape);
        let x = tape.leaf(fx.x.clone());
        let h = tape.leaf(fx.h.clone());
        let s = tape.leaf(fx.s.clone());
        let ctx = fx.attn.prepare(&mut tape, &bound, x).unwrap();
        let err = fx.attn.scores(&mut tape, &bound, &ctx, 4, h, s).unwrap_err();
        assert!(matches!(err, Error::IndexOutOfRange { .. }));
    }

    #[test]
    fn weights_are_convex_and_saturate() {
        let mut tape = Tape::new();
        let zero = tape.leaf(Tensor::vector(vec![0.0; 5]).unwrap());
        let w = attention_weights(&mut tape, zero).unwrap();
        for v in tape.value(w).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
        let spread = tape.leaf(Tensor::vector(vec![10.0, -10.0]).unwrap());
        let w = attention_weights(&mut tape, spread).unwrap();
        assert!((tape.value(w).data()[0] - 1.0).abs() < 1e-4);

        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..100 {
            let e: Vec<f64> = (0..6).map(|_| rng.random_range(-5.0..5.0)).collect();
            let c = rng.random_range(-50.0..50.0);
            let mut tape = Tape::new();
            let n = tape.leaf(Tensor::vector(e.clone()).unwrap());
            let shifted = tape.leaf(Tensor::vector(e.iter().map(|v| v + c).collect()).unwrap());
            let w = attention_weights(&mut tape, n).unwrap();
            let ws = attention_weights(&mut tape, shifted).unwrap();
            let sum: f64 = tape.value(w).data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for (a, b) in tape.value(w).data().iter().zip(tape.value(ws).data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn apply_weights_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0, -6.0, 9.0]).unwrap());
        let uniform = tape.leaf(Tensor::filled(vec![3], 1.0 / 3.0));
        let y = apply_weights(&mut tape, uniform, x).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(&[1.0, -2.0, 3.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        let onehot = tape.leaf(Tensor::vector(vec![0.0, 1.0, 0.0]).unwrap());
        let y = apply_weights(&mut tape, onehot, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, -6.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::uniform(vec![5], 0.0, 1.0, &mut rng);
        let b = Tensor::uniform(vec![5], -2.0, 2.0, &mut rng);
        let na = tape.leaf(a.clone());
        let nb = tape.leaf(b.clone());
        let y = apply_weights(&mut tape, na, nb).unwrap();
        for i in 0..5 {
            assert_eq!(tape.value(y).data()[i], a.data()[i] * b.data()[i]);
        }

        let short = tape.leaf(Tensor::vector(vec![1.0]).unwrap());
        assert!(apply_weights(&mut tape, short, x).is_err());
    }

    struct TempFixture {
        store: ParamStore,
        attn: TemporalAttention,
        z: Tensor,
        h: Tensor,
        s: Tensor,
    }

    fn temporal_fixture(seed: u64) -> TempFixture {
        let (m, t_len) = (3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let attn = TemporalAttention::new(&mut store, "temporal", m, &mut rng);
        *store.get_mut(attn.b) = Tensor::uniform(vec![m], -0.5, 0.5, &mut rng);
        TempFixture {
            store,
            attn,
            z: Tensor::uniform(vec![m, t_len], -1.0, 1.0, &mut rng),
            h: Tensor::uniform(vec![m], -1.0, 1.0, &mut rng),
            s: Tensor::uniform(vec![m], -1.0, 1.0, &mut rng),
        }
    }

    fn run_temporal_scores(fx: &TempFixture) -> Vec<f64> {
        let mut tape = Tape::new();
        let bound = fx.store.bind(&mut tape);
        let z = tape.leaf(fx.z.clone());
        let h = tape.leaf(fx.h.clone());
        let s = tape.leaf(fx.s.clone());
        let f = fx.attn.scores(&mut tape, &bound, z, h, s).unwrap();
        tape.value(f).data().to_vec()
    }

    #[test]
    fn temporal_zero_parameters_give_zero_scores() {
        let mut fx = temporal_fixture(40);
        for t in fx.store.values_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        assert_eq!(run_temporal_scores(&fx), vec![0.0; 4]);
    }

    #[test]
    fn temporal_zero_projection_annihilates_scores() {
        let mut fx = temporal_fixture(41);
        for v in fx.store.get_mut(fx.attn.v).data_mut() {
            *v = 0.0;
        }
        assert_eq!(run_temporal_scores(&fx), vec![0.0; 4]);
    }

    #[test]
    fn temporal_scores_match_termwise_oracle() {
        let fx = temporal_fixture(42);
        let got = run_temporal_scores(&fx);
        let m = fx.attn.hidden_dim;
        let hs: Vec<f64> = fx.h.data().iter().chain(fx.s.data()).copied().collect();
        let (w, u, b, v) = (
            fx.store.get(fx.attn.w),
            fx.store.get(fx.attn.u),
            fx.store.get(fx.attn.b),
            fx.store.get(fx.attn.v),
        );
        for t in 0..4 {
            let mut f = 0.0;
            for li in 0..m {
                let mut pre = b.data()[li];
                for (j, hsj) in hs.iter().enumerate() {
                    pre += w.at2(li, j) * hsj;
                }
                for j in 0..m {
                    pre += u.at2(li, j) * fx.z.at2(j, t);
                }
                f += v.data()[li] * pre.tanh();
            }
            assert!((got[t] - f).abs() < 1e-12, "step {t}: {} vs {f}", got[t]);
        }
    }

    #[test]
    fn context_selects_and_averages_columns() {
        let fx = temporal_fixture(43);
        let mut tape = Tape::new();
        let z = tape.leaf(fx.z.clone());
        let onehot = tape.leaf(Tensor::vector(vec![0.0, 0.0, 1.0, 0.0]).unwrap());
        let c = temporal_context(&mut tape, onehot, z).unwrap();
        for (i, v) in tape.value(c).data().iter().enumerate() {
            assert_eq!(*v, fx.z.at2(i, 2));
        }

        // all columns equal -> context equals that column for any convex beta
        let same = Tensor::matrix(3, 4, vec![7.0, 7.0, 7.0, 7.0, -1.0, -1.0, -1.0, -1.0, 0.5, 0.5, 0.5, 0.5]).unwrap();
        let zs = tape.leaf(same);
        let beta = tape.leaf(Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let c = temporal_context(&mut tape, beta, zs).unwrap();
        for (v, want) in tape.value(c).data().iter().zip(&[7.0, -1.0, 0.5]) {
            assert!((v - want).abs() < 1e-14);
        }

        // random instance vs loop oracle + convex hull bound
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let raw: Vec<f64> = (0..4).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let bvec: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let beta = tape.leaf(Tensor::vector(bvec.clone()).unwrap());
        let zn = tape.leaf(fx.z.clone());
        let c = temporal_context(&mut tape, beta, zn).unwrap();
        for i in 0..3 {
            let mut want = 0.0;
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for t in 0..4 {
                want += bvec[t] * fx.z.at2(i, t);
                lo = lo.min(fx.z.at2(i, t));
                hi = hi.max(fx.z.at2(i, t));
            }
            let got = tape.value(c).data()[i];
            assert!((got - want).abs() < 1e-14);
            assert!(got >= lo - 1e-14 && got <= hi + 1e-14);
        }
    }

    #[test]
    fn all_attention_ops_pass_finite_difference_check() {
        for (variant, seed) in [
            (SpatialVariant::TemporalInput, 50),
            (SpatialVariant::SpatialInput, 51),
            (SpatialVariant::Hybrid, 52),
        ] {
            let mut fx = fixture(variant, seed);
            let x = fx.store.register("input.x", fx.x.clone());
            let h = fx.store.register("input.h", fx.h.clone());
            let s = fx.store.register("input.s", fx.s.clone());
            let attn = fx.attn.clone();
            let report = grad_check(&mut fx.store, 1e-5, 1e-4, move |tape, bound| {
                let ctx = attn.prepare(tape, bound, bound.node(x))?;
                let e = attn.scores(tape, bound, &ctx, 1, bound.node(h), bound.node(s))?;
                let a = attention_weights(tape, e)?;
                let x_t = tape.col(ctx.x, 1)?;
                let weighted = apply_weights(tape, a, x_t)?;
                let sq = tape.mul(weighted, weighted)?;
                Ok(tape.sum(sq))
            })
            .unwrap();
            assert!(report.passed(), "{variant:?} worst {:?}", report.worst());
        }

        let mut fx = temporal_fixture(53);
        let z = fx.store.register("input.z", fx.z.clone());
        let h = fx.store.register("input.h", fx.h.clone());
        let s = fx.store.register("input.s", fx.s.clone());
        let attn = fx.attn.clone();
        let report = grad_check(&mut fx.store, 1e-5, 1e-4, move |tape, bound| {
            let f = attn.scores(tape, bound, bound.node(z), bound.node(h), bound.node(s))?;
            let beta = attention_weights(tape, f)?;
            let c = temporal_context(tape, beta, bound.node(z))?;
            let sq = tape.mul(c, c)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(report.passed(), "temporal worst {:?}", report.worst());
    }
}
