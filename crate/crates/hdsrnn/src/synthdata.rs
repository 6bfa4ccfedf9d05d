//! Synthetic water-distribution sensor panels with known ground truth.
//!
//! Flow sensors ride a daily harmonic demand curve; pressure sensors sit on a
//! flat baseline disturbed by a random walk. Sensors influence each other
//! through a gain/lag coupling matrix: each sensor's deviation from its mean
//! level propagates (single hop) into coupled sensors after the configured
//! lag, added for same-kind targets and subtracted across kinds, mirroring
//! the inverse flow/pressure relation. Pump events inject box impulses at
//! their source sensor. Everything is a pure function of `(spec, config,
//! seed)`.

use chrono::{DateTime, Utc};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::{SensorKind, SensorMeta, SeriesPanel, DEFAULT_PERIOD};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SensorSpec {
    pub id: String,
    pub kind: SensorKind,
    /// Planar coordinates, arbitrary distance units.
    pub x: f64,
    pub y: f64,
}

/// A pump/booster event: a box impulse on the source sensor's signal.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EventSpec {
    pub step: usize,
    pub sensor: usize,
    pub magnitude: f64,
    pub duration: usize,
}

/// Sensor layout plus the coupling structure that generates spatial
/// correlation: `coupling[dst][src]` is the gain applied to `src`'s deviation
/// after `lags[dst][src]` steps.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub sensors: Vec<SensorSpec>,
    pub coupling: Vec<Vec<f64>>,
    pub lags: Vec<Vec<usize>>,
    pub events: Vec<EventSpec>,
    /// Additional randomly scheduled pump events per day.
    pub event_rate_per_day: f64,
    /// Sensors eligible for random events (booster-station outlets);
    /// empty means every flow sensor.
    #[serde(default)]
    pub event_sources: Vec<usize>,
}

impl NetworkSpec {
    /// Build coupling gains from planar distance: `gain0 * exp(-d / scale)`,
    /// so gain decays monotonically with distance; lags grow linearly.
    pub fn from_distance_kernel(
        sensors: Vec<SensorSpec>,
        gain0: f64,
        length_scale: f64,
        lag_steps_per_unit: f64,
    ) -> Self {
        let n = sensors.len();
        let mut coupling = vec![vec![0.0; n]; n];
        let mut lags = vec![vec![0usize; n]; n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    coupling[i][j] = 1.0;
                } else {
                    let d = planar_distance(&sensors[i], &sensors[j]);
                    coupling[i][j] = gain0 * (-d / length_scale).exp();
                    lags[i][j] = (d * lag_steps_per_unit).round() as usize;
                }
            }
        }
        Self {
            sensors,
            coupling,
            lags,
            events: Vec::new(),
            event_rate_per_day: 0.0,
            event_sources: Vec::new(),
        }
    }

    pub fn n_sensors(&self) -> usize {
        self.sensors.len()
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        planar_distance(&self.sensors[a], &self.sensors[b])
    }

    pub fn sensor_index(&self, id: &str) -> Option<usize> {
        self.sensors.iter().position(|s| s.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.sensors.len();
        if n == 0 {
            return Err(Error::Config("network needs at least one sensor".into()));
        }
        if self.coupling.len() != n
            || self.lags.len() != n
            || self.coupling.iter().any(|r| r.len() != n)
            || self.lags.iter().any(|r| r.len() != n)
        {
            return Err(Error::Config(
                "coupling and lag matrices must be n x n".into(),
            ));
        }
        for (i, row) in self.coupling.iter().enumerate() {
            if row[i] != 1.0 {
                return Err(Error::Config(format!(
                    "coupling diagonal must be 1, sensor {i} has {}",
                    row[i]
                )));
            }
            if row.iter().any(|g| !g.is_finite()) {
                return Err(Error::Config(format!("non-finite coupling gain in row {i}")));
            }
        }
        for e in &self.events {
            if e.sensor >= n {
                return Err(Error::Config(format!(
                    "event source sensor {} out of range",
                    e.sensor
                )));
            }
            if e.duration == 0 {
                return Err(Error::Config("event duration must be at least 1 step".into()));
            }
        }
        if self.event_rate_per_day < 0.0 || !self.event_rate_per_day.is_finite() {
            return Err(Error::Config("event rate must be non-negative".into()));
        }
        if self.event_sources.iter().any(|&k| k >= n) {
            return Err(Error::Config("event source sensor out of range".into()));
        }
        Ok(())
    }

    pub fn metas(&self) -> Vec<SensorMeta> {
        self.sensors
            .iter()
            .map(|s| SensorMeta {
                id: s.id.clone(),
                kind: s.kind,
            })
            .collect()
    }

    pub fn to_json_file(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: Self = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }
}

fn planar_distance(a: &SensorSpec, b: &SensorSpec) -> f64 {
    ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt()
}

/// Structural disturbance driving a sensor on top of its base pattern.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Disturbance {
    None,
    White { std: f64 },
    /// First-order autoregressive with stationary deviation `std`.
    Ar1 { std: f64, rho: f64 },
    RandomWalk { std: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub length: usize,
    pub seed: u64,
    /// Measurement noise std per sensor; empty selects per-kind defaults
    /// (0.5 flow, 0.3 pressure).
    pub noise_std: Vec<f64>,
    /// Structural disturbance per sensor; empty selects per-kind defaults
    /// (none for flow, a gentle random walk for pressure).
    pub disturbances: Vec<Disturbance>,
    pub start: DateTime<Utc>,
}

impl GeneratorConfig {
    pub fn new(length: usize, seed: u64) -> Self {
        Self {
            length,
            seed,
            noise_std: Vec::new(),
            disturbances: Vec::new(),
            start: default_start(),
        }
    }

    /// Noise-free variant for structural tests.
    pub fn noiseless(length: usize) -> Self {
        Self {
            length,
            seed: 0,
            noise_std: vec![0.0],
            disturbances: vec![Disturbance::None],
            start: default_start(),
        }
    }
}

pub fn default_start() -> DateTime<Utc> {
    DateTime::parse_from_rfc3339("2024-01-01T00:00:00Z")
        .expect("constant timestamp")
        .with_timezone(&Utc)
}

fn per_sensor<T: Clone>(list: &[T], n: usize, what: &str) -> Result<Option<Vec<T>>> {
    match list.len() {
        0 => Ok(None),
        1 => Ok(Some(vec![list[0].clone(); n])),
        len if len == n => Ok(Some(list.to_vec())),
        len => Err(Error::Config(format!(
            "{what} has {len} entries for {n} sensors (want 0, 1, or {n})"
        ))),
    }
}

struct SensorShape {
    /// Constant mean level; deviations from it are what propagates.
    level: f64,
    amp: f64,
    phase: f64,
}

fn shape_for(spec: &SensorSpec, index: usize, n: usize) -> SensorShape {
    match spec.kind {
        SensorKind::Flow => SensorShape {
            level: 40.0 + 5.0 * index as f64,
            amp: 8.0 + (index % 5) as f64,
            phase: std::f64::consts::TAU * index as f64 / n.max(1) as f64,
        },
        SensorKind::Pressure => SensorShape {
            level: 30.0 + 2.0 * index as f64,
            amp: 0.0,
            phase: 0.0,
        },
    }
}

fn base_value(shape: &SensorShape, slot: usize) -> f64 {
    let phase = std::f64::consts::TAU * slot as f64 / DEFAULT_PERIOD as f64;
    shape.level
        + shape.amp * (0.8 * (phase - shape.phase).sin() + 0.3 * (2.0 * phase + 0.5 * shape.phase).sin())
}

/// Generate a panel. Fully determined by `(spec, config)`; the same seed
/// yields a bitwise-identical panel.
pub fn generate_panel(spec: &NetworkSpec, config: &GeneratorConfig) -> Result<SeriesPanel> {
    spec.validate()?;
    let n = spec.n_sensors();
    let len = config.length;
    if len < 4 * DEFAULT_PERIOD {
        return Err(Error::Config(format!(
            "panel length {len} must cover at least 4 daily periods ({})",
            4 * DEFAULT_PERIOD
        )));
    }
    let noise = per_sensor(&config.noise_std, n, "noise_std")?.unwrap_or_else(|| {
        spec.sensors
            .iter()
            .map(|s| match s.kind {
                SensorKind::Flow => 0.5,
                SensorKind::Pressure => 0.3,
            })
            .collect()
    });
    let disturbances = per_sensor(&config.disturbances, n, "disturbances")?.unwrap_or_else(|| {
        spec.sensors
            .iter()
            .map(|s| match s.kind {
                SensorKind::Flow => Disturbance::None,
                SensorKind::Pressure => Disturbance::RandomWalk { std: 0.15 },
            })
            .collect()
    });

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");

    // scheduled events plus randomly drawn pump starts at flow sensors
    let mut events = spec.events.clone();
    let sources: Vec<usize> = if spec.event_sources.is_empty() {
        (0..n)
            .filter(|&k| spec.sensors[k].kind == SensorKind::Flow)
            .collect()
    } else {
        spec.event_sources.clone()
    };
    if spec.event_rate_per_day > 0.0 && !sources.is_empty() {
        let days = len as f64 / DEFAULT_PERIOD as f64;
        let count = (spec.event_rate_per_day * days).round() as usize;
        for _ in 0..count {
            events.push(EventSpec {
                step: rng.random_range(0..len),
                sensor: sources[rng.random_range(0..sources.len())],
                magnitude: rng.random_range(1.0..3.0),
                duration: rng.random_range(2..6),
            });
        }
    }

    let shapes: Vec<SensorShape> = spec
        .sensors
        .iter()
        .enumerate()
        .map(|(k, s)| shape_for(s, k, n))
        .collect();

    let start_step = config.start.timestamp() / 1800;
    let mut intrinsic = vec![vec![0.0; len]; n];
    for k in 0..n {
        let mut disturb_state = 0.0;
        for t in 0..len {
            let slot = ((start_step + t as i64).rem_euclid(DEFAULT_PERIOD as i64)) as usize;
            let mut v = base_value(&shapes[k], slot);
            disturb_state = match disturbances[k] {
                Disturbance::None => 0.0,
                Disturbance::White { std } => std * gauss.sample(&mut rng),
                Disturbance::Ar1 { std, rho } => {
                    rho * disturb_state + std * (1.0 - rho * rho).sqrt() * gauss.sample(&mut rng)
                }
                Disturbance::RandomWalk { std } => disturb_state + std * gauss.sample(&mut rng),
            };
            v += disturb_state;
            if noise[k] > 0.0 {
                v += noise[k] * gauss.sample(&mut rng);
            }
            intrinsic[k][t] = v;
        }
    }
    for e in &events {
        for t in e.step..(e.step + e.duration).min(len) {
            intrinsic[e.sensor][t] += e.magnitude;
        }
    }

    // single-hop propagation of deviations from the mean level
    let mut values = intrinsic.clone();
    for dst in 0..n {
        for src in 0..n {
            if dst == src || spec.coupling[dst][src] == 0.0 {
                continue;
            }
            let gain = spec.coupling[dst][src];
            let lag = spec.lags[dst][src];
            let sign = if spec.sensors[dst].kind == spec.sensors[src].kind {
                1.0
            } else {
                -1.0
            };
            for t in lag..len {
                let dev = intrinsic[src][t - lag] - shapes[src].level;
                values[dst][t] += sign * gain * dev;
            }
        }
    }

    SeriesPanel::new(spec.metas(), config.start, values)
}

/// The built-in 18-sensor layout: 11 flow and 7 pressure sensors, three
/// booster stations (F1/P1 and F2/P2 remote, F3/P3 nearest the target), F4
/// directly coupled to the target F8, F5/F6 far away, and P7 an isolated
/// stub that carries pure noise.
pub fn default_wds_spec() -> NetworkSpec {
    let place = |id: &str, x: f64, y: f64| SensorSpec {
        id: id.to_string(),
        kind: SensorKind::from_id(id),
        x,
        y,
    };
    let sensors = vec![
        place("F1", 9.0, 6.0),
        place("F2", 11.0, -5.0),
        place("F3", 2.0, 1.0),
        place("F4", 1.2, 0.3),
        place("F5", 8.0, 4.5),
        place("F6", 9.5, -4.0),
        place("F7", 3.5, -1.0),
        place("F8", 0.0, 0.0),
        place("F9", 4.0, 2.2),
        place("F10", 5.0, 0.5),
        place("F11", 5.5, -2.5),
        place("P1", 9.2, 6.2),
        place("P2", 11.2, -5.2),
        place("P3", 2.2, 1.2),
        place("P4", 3.0, 2.8),
        place("P5", 1.5, -1.8),
        place("P6", 6.0, 1.5),
        place("P7", 13.0, 8.0),
    ];
    let mut spec = NetworkSpec::from_distance_kernel(sensors, 0.8, 3.0, 1.5);
    let f8 = spec.sensor_index("F8").unwrap();
    let f4 = spec.sensor_index("F4").unwrap();
    let p7 = spec.sensor_index("P7").unwrap();
    // F4 feeds the target through a direct main
    spec.coupling[f8][f4] = 0.9;
    spec.lags[f8][f4] = 2;
    // P7 is an isolated stub: no influence in either direction
    for k in 0..spec.n_sensors() {
        if k != p7 {
            spec.coupling[p7][k] = 0.0;
            spec.coupling[k][p7] = 0.0;
        }
    }
    spec.event_rate_per_day = 2.0;
    spec.event_sources = ["F1", "F2", "F3"]
        .iter()
        .map(|id| spec.sensor_index(id).unwrap())
        .collect();
    spec
}

/// Generator settings matching [`default_wds_spec`]: kind-default noise, an
/// autoregressive demand disturbance on F4 so the target's driver carries
/// signal, and loud pure noise on the decoupled P7.
pub fn default_wds_generator(length: usize, seed: u64) -> GeneratorConfig {
    let spec = default_wds_spec();
    let n = spec.n_sensors();
    let mut noise = Vec::with_capacity(n);
    let mut disturbances = Vec::with_capacity(n);
    for s in &spec.sensors {
        match s.id.as_str() {
            "F4" => {
                noise.push(0.3);
                disturbances.push(Disturbance::Ar1 { std: 2.0, rho: 0.7 });
            }
            "F8" => {
                noise.push(0.25);
                disturbances.push(Disturbance::None);
            }
            "P7" => {
                noise.push(1.0);
                disturbances.push(Disturbance::White { std: 2.0 });
            }
            _ => match s.kind {
                SensorKind::Flow => {
                    noise.push(0.4);
                    disturbances.push(Disturbance::None);
                }
                SensorKind::Pressure => {
                    noise.push(0.25);
                    disturbances.push(Disturbance::RandomWalk { std: 0.1 });
                }
            },
        }
    }
    GeneratorConfig {
        length,
        seed,
        noise_std: noise,
        disturbances,
        start: default_start(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lone_flow_spec() -> NetworkSpec {
        NetworkSpec {
            sensors: vec![SensorSpec {
                id: "F1".into(),
                kind: SensorKind::Flow,
                x: 0.0,
                y: 0.0,
            }],
            coupling: vec![vec![1.0]],
            lags: vec![vec![0]],
            events: Vec::new(),
            event_rate_per_day: 0.0,
            event_sources: Vec::new(),
        }
    }

    #[test]
    fn lone_noiseless_flow_is_exactly_periodic() {
        let panel = generate_panel(&lone_flow_spec(), &GeneratorConfig::noiseless(48 * 6)).unwrap();
        let s = panel.series(0);
        for t in 0..s.len() - 48 {
            assert_eq!(s[t].to_bits(), s[t + 48].to_bits(), "step {t}");
        }
    }

    #[test]
    fn unit_impulse_propagates_with_gain_and_lag() {
        let sensors = vec![
            SensorSpec { id: "F1".into(), kind: SensorKind::Flow, x: 0.0, y: 0.0 },
            SensorSpec { id: "F2".into(), kind: SensorKind::Flow, x: 1.0, y: 0.0 },
        ];
        let mut spec = NetworkSpec {
            sensors,
            coupling: vec![vec![1.0, 0.0], vec![0.7, 1.0]],
            lags: vec![vec![0, 0], vec![5, 0]],
            events: Vec::new(),
            event_rate_per_day: 0.0,
            event_sources: Vec::new(),
        };
        let mut cfg = GeneratorConfig::noiseless(48 * 5);
        let quiet = generate_panel(&spec, &cfg).unwrap();
        spec.events.push(EventSpec { step: 100, sensor: 0, magnitude: 1.0, duration: 1 });
        cfg.seed = 0;
        let pulsed = generate_panel(&spec, &cfg).unwrap();
        for t in 0..quiet.len() {
            let d0 = pulsed.value(0, t) - quiet.value(0, t);
            let d1 = pulsed.value(1, t) - quiet.value(1, t);
            match t {
                100 => assert!((d0 - 1.0).abs() < 1e-12),
                _ => assert_eq!(d0, 0.0),
            }
            match t {
                105 => assert!((d1 - 0.7).abs() < 1e-12, "got {d1}"),
                _ => assert_eq!(d1, 0.0, "step {t}"),
            }
        }
    }

    #[test]
    fn same_seed_gives_bitwise_identical_panels() {
        let spec = default_wds_spec();
        let cfg = default_wds_generator(48 * 5, 77);
        let a = generate_panel(&spec, &cfg).unwrap();
        let b = generate_panel(&spec, &cfg).unwrap();
        for k in 0..a.n_sensors() {
            for t in 0..a.len() {
                assert_eq!(a.value(k, t).to_bits(), b.value(k, t).to_bits());
            }
        }
        let other = generate_panel(&spec, &default_wds_generator(48 * 5, 78)).unwrap();
        assert!((0..a.len()).any(|t| a.value(0, t) != other.value(0, t)));
    }

    #[test]
    fn default_spec_matches_the_documented_layout() {
        let spec = default_wds_spec();
        spec.validate().unwrap();
        let flows = spec.sensors.iter().filter(|s| s.kind == SensorKind::Flow).count();
        let pressures = spec.sensors.iter().filter(|s| s.kind == SensorKind::Pressure).count();
        assert_eq!((flows, pressures), (11, 7));
        assert_eq!(spec.n_sensors(), 18);

        let f8 = spec.sensor_index("F8").unwrap();
        let f4 = spec.sensor_index("F4").unwrap();
        let f5 = spec.sensor_index("F5").unwrap();
        let p7 = spec.sensor_index("P7").unwrap();
        assert!(spec.coupling[f8][f4] > spec.coupling[f8][f5]);
        assert!(spec.coupling[f8][p7] == 0.0 && spec.coupling[p7][f8] == 0.0);

        // distance-kernel gains decay monotonically with distance
        let kernel = NetworkSpec::from_distance_kernel(spec.sensors.clone(), 0.8, 3.0, 1.5);
        let mut pairs: Vec<(f64, f64)> = (0..18)
            .filter(|&k| k != f8)
            .map(|k| (kernel.distance(f8, k), kernel.coupling[f8][k]))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in pairs.windows(2) {
            assert!(w[0].1 >= w[1].1);
        }
    }

    #[test]
    fn flow_autocorrelation_peaks_at_the_daily_lag() {
        let spec = default_wds_spec();
        let panel = generate_panel(&spec, &default_wds_generator(48 * 20, 3)).unwrap();
        let f8 = 7;
        let s = panel.series(f8);
        let n = s.len();
        let mean = s.iter().sum::<f64>() / n as f64;
        let autocorr = |lag: usize| {
            let mut num = 0.0;
            let mut den = 0.0;
            for t in 0..n - lag {
                num += (s[t] - mean) * (s[t + lag] - mean);
            }
            for t in 0..n {
                den += (s[t] - mean) * (s[t] - mean);
            }
            num / den
        };
        let daily = autocorr(48);
        for lag in 30..=40 {
            assert!(daily > autocorr(lag), "lag {lag}");
        }
    }

    #[test]
    fn pressure_opposes_coupled_flow() {
        let sensors = vec![
            SensorSpec { id: "F1".into(), kind: SensorKind::Flow, x: 0.0, y: 0.0 },
            SensorSpec { id: "P1".into(), kind: SensorKind::Pressure, x: 0.1, y: 0.0 },
        ];
        let spec = NetworkSpec {
            sensors,
            coupling: vec![vec![1.0, 0.0], vec![0.9, 1.0]],
            lags: vec![vec![0, 0], vec![0, 0]],
            events: Vec::new(),
            event_rate_per_day: 0.0,
            event_sources: Vec::new(),
        };
        let cfg = GeneratorConfig {
            length: 48 * 10,
            seed: 5,
            noise_std: vec![0.2, 0.05],
            disturbances: vec![Disturbance::None, Disturbance::None],
            start: default_start(),
        };
        let panel = generate_panel(&spec, &cfg).unwrap();
        let (f, p) = (panel.series(0), panel.series(1));
        let n = f.len() as f64;
        let (mf, mp) = (
            f.iter().sum::<f64>() / n,
            p.iter().sum::<f64>() / n,
        );
        let mut cov = 0.0;
        let (mut vf, mut vp) = (0.0, 0.0);
        for t in 0..f.len() {
            cov += (f[t] - mf) * (p[t] - mp);
            vf += (f[t] - mf) * (f[t] - mf);
            vp += (p[t] - mp) * (p[t] - mp);
        }
        let r = cov / (vf.sqrt() * vp.sqrt());
        assert!(r < 0.0, "pearson r {r}");
    }

    #[test]
    fn config_validation() {
        let spec = lone_flow_spec();
        assert!(matches!(
            generate_panel(&spec, &GeneratorConfig::noiseless(48 * 3)),
            Err(Error::Config(_))
        ));
        let mut bad = spec.clone();
        bad.coupling[0][0] = 0.5;
        assert!(bad.validate().is_err());
        let mut bad = spec.clone();
        bad.events.push(EventSpec { step: 0, sensor: 3, magnitude: 1.0, duration: 1 });
        assert!(bad.validate().is_err());
        let mut cfg = GeneratorConfig::noiseless(48 * 4);
        cfg.noise_std = vec![0.1, 0.2];
        assert!(generate_panel(&spec, &cfg).is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.json");
        let spec = default_wds_spec();
        spec.to_json_file(&path).unwrap();
        let loaded = NetworkSpec::from_json_file(&path).unwrap();
        assert_eq!(loaded.n_sensors(), 18);
        assert_eq!(loaded.coupling, spec.coupling);
        assert_eq!(loaded.lags, spec.lags);
    }
}
