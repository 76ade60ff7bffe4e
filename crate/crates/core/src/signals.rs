//! Weight-update signals and per-input-channel importance.
//!
//! The central idea: channels whose fine-tuning updates sit at either end of
//! the global update distribution (the smallest positive updates and the
//! largest ones) matter most. Two restricted quadratics, pinned at the global
//! median, map each update to a score in `[y_min, y_max]`; the column mean of
//! those scores, multiplied by `(zero updates + 1)`, is the channel importance.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::store::{check_compatible, Tensor, TensorMap};
use crate::toy::{CalibrationSet, ModuleCalib};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Signal {
    /// Column mean of the raw update magnitude.
    Magnitude,
    /// Column mean of the two-branch quadratic, zeros folded into the fit.
    BothEnds,
    /// Zero updates handled separately and counted into the score.
    BothEndsZero,
    /// Reflection of `BothEnds`: intermediate updates score highest.
    Mid,
    /// Mean squared calibration activation.
    ActivationSq,
}

impl Signal {
    pub const ALL: [Signal; 5] = [
        Signal::Magnitude,
        Signal::BothEnds,
        Signal::BothEndsZero,
        Signal::Mid,
        Signal::ActivationSq,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Signal::Magnitude => "magnitude",
            Signal::BothEnds => "both-ends",
            Signal::BothEndsZero => "both-ends-zero",
            Signal::Mid => "mid",
            Signal::ActivationSq => "activation-sq",
        }
    }

    pub fn needs_deltas(self) -> bool {
        !matches!(self, Signal::ActivationSq)
    }
}

impl fmt::Display for Signal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Signal {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().replace('_', "-");
        Signal::ALL
            .into_iter()
            .find(|sig| sig.as_str() == norm)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown signal `{s}` (expected one of magnitude, both-ends, both-ends-zero, mid, activation-sq)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MappingConfig {
    pub y_min: f64,
    pub y_max: f64,
    pub signal: Signal,
    /// Updates `<= zero_epsilon` count as zero.
    pub zero_epsilon: f64,
    /// Row bands used when averaging zero counts.
    pub slices: usize,
    /// Multiply the final score by the mean absolute calibration input.
    pub multiply_activation: bool,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            y_min: 1.0,
            y_max: 10.0,
            signal: Signal::BothEndsZero,
            zero_epsilon: 0.0,
            slices: 1,
            multiply_activation: false,
        }
    }
}

impl MappingConfig {
    pub fn with_signal(signal: Signal) -> Self {
        Self {
            signal,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.y_min > 0.0 && self.y_max > self.y_min && self.y_max.is_finite()) {
            return Err(Error::Config(format!(
                "mapping requires y_max > y_min > 0, got y_min={} y_max={}",
                self.y_min, self.y_max
            )));
        }
        if self.zero_epsilon.is_nan() || self.zero_epsilon < 0.0 {
            return Err(Error::Config("mapping.zero_epsilon must be >= 0".into()));
        }
        if self.slices < 1 {
            return Err(Error::Config("mapping.slices must be >= 1".into()));
        }
        Ok(())
    }

    pub fn needs_calibration(&self) -> bool {
        self.signal == Signal::ActivationSq || self.multiply_activation
    }

    fn write_meta(&self, map: &mut TensorMap) {
        map.set_meta("signal", self.signal);
        map.set_meta("y_min", self.y_min);
        map.set_meta("y_max", self.y_max);
        map.set_meta("slices", self.slices);
        map.set_meta("zero_epsilon", self.zero_epsilon);
        map.set_meta("multiply_activation", self.multiply_activation);
    }

    fn read_meta(map: &TensorMap) -> Result<Self> {
        fn field<T: FromStr>(map: &TensorMap, key: &str) -> Result<T> {
            let raw = map
                .meta_get(key)
                .ok_or_else(|| Error::Header(format!("importance container lacks meta `{key}`")))?;
            raw.parse()
                .map_err(|_| Error::Header(format!("meta `{key}` has invalid value `{raw}`")))
        }
        Ok(Self {
            y_min: field(map, "y_min")?,
            y_max: field(map, "y_max")?,
            signal: field(map, "signal")?,
            zero_epsilon: field(map, "zero_epsilon")?,
            slices: field(map, "slices")?,
            multiply_activation: field(map, "multiply_activation")?,
        })
    }
}

/// Global statistics over the union of all module updates.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaStats {
    /// Smallest positive update (left anchor when zeros are excluded).
    pub min_positive: f64,
    /// Lower median of the positive updates.
    pub median_positive: f64,
    pub max: f64,
    /// Smallest update including zeros (0 whenever a zero exists).
    pub min_all: f64,
    /// Lower median of all updates, zeros included.
    pub median_all: f64,
    pub zero_count: usize,
    pub total_count: usize,
    pub zero_fraction: f64,
}

/// `|post - pre|` for every `.weight` tensor.
pub fn compute_delta(pre: &TensorMap, post: &TensorMap) -> Result<TensorMap> {
    check_compatible(pre, post)?;
    let mut out = TensorMap::new();
    for module in post.weight_modules() {
        let name = format!("{module}.weight");
        let a = pre.matrix(&name)?;
        let b = post.matrix(&name)?;
        let d: Vec<f32> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&w, &w2)| (w2 - w).abs())
            .collect();
        out.insert(name, Tensor::matrix(&Matrix::from_vec(a.rows(), a.cols(), d)?))?;
    }
    Ok(out)
}

/// Statistics over every delta tensor in `deltas`. Updates `<= zero_epsilon`
/// count as zero; medians take the lower middle element.
pub fn global_delta_stats(deltas: &TensorMap, zero_epsilon: f64) -> Result<DeltaStats> {
    let mut values = Vec::new();
    for (name, t) in deltas.iter() {
        let v = t.as_f32().ok_or_else(|| Error::InvalidTensor {
            name: name.to_string(),
            reason: "delta tensors must be f32".into(),
        })?;
        values.extend(v.iter().map(|&x| x as f64));
    }
    stats_from_values(values, zero_epsilon)
}

pub(crate) fn stats_from_values(mut values: Vec<f64>, zero_epsilon: f64) -> Result<DeltaStats> {
    if values.is_empty() {
        return Err(Error::DegenerateDeltas);
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::NonFinite(format!("delta value {bad}")));
    }
    for v in &mut values {
        if *v <= zero_epsilon {
            *v = 0.0;
        }
    }
    values.sort_by(f64::total_cmp);
    let total_count = values.len();
    let zero_count = values.partition_point(|&v| v == 0.0);
    let positive = &values[zero_count..];
    if positive.is_empty() {
        return Err(Error::DegenerateDeltas);
    }
    Ok(DeltaStats {
        min_positive: positive[0],
        median_positive: positive[(positive.len() - 1) / 2],
        max: *values.last().unwrap(),
        min_all: values[0],
        median_all: values[(total_count - 1) / 2],
        zero_count,
        total_count,
        zero_fraction: zero_count as f64 / total_count as f64,
    })
}

/// Two restricted quadratics meeting at `mid` with value `y_min` and reaching
/// `y_max` at `lo` and `hi`. A branch of zero width yields `y_max` at its
/// single point.
fn restricted_quadratic(d: f64, lo: f64, mid: f64, hi: f64, cfg: &MappingConfig) -> f64 {
    let span = cfg.y_max - cfg.y_min;
    if hi == mid && d >= hi {
        return cfg.y_max;
    }
    if d <= mid {
        if mid == lo {
            return cfg.y_max;
        }
        let t = (mid - d) / (mid - lo);
        cfg.y_min + span * t * t
    } else {
        let t = (d - mid) / (hi - mid);
        cfg.y_min + span * t * t
    }
}

/// Quadratic mapping fitted over all updates, zeros included.
pub fn map_both_ends(delta: f64, stats: &DeltaStats, cfg: &MappingConfig) -> f64 {
    let d = if delta <= cfg.zero_epsilon { 0.0 } else { delta };
    let d = d.clamp(stats.min_all, stats.max);
    restricted_quadratic(d, stats.min_all, stats.median_all, stats.max, cfg)
}

/// Zero-excluded quadratic mapping: zeros map to `y_min`, the left branch is
/// anchored at the smallest positive update.
pub fn map_both_ends_zero(delta: f64, stats: &DeltaStats, cfg: &MappingConfig) -> f64 {
    if delta <= cfg.zero_epsilon {
        return cfg.y_min;
    }
    let d = delta.clamp(stats.min_positive, stats.max);
    restricted_quadratic(d, stats.min_positive, stats.median_positive, stats.max, cfg)
}

pub fn map_mid(delta: f64, stats: &DeltaStats, cfg: &MappingConfig) -> f64 {
    cfg.y_min + cfg.y_max - map_both_ends(delta, stats, cfg)
}

/// Mean number of zero updates per input channel across `slices` contiguous
/// row bands. Bands differ in size by at most one row, larger bands first.
pub fn count_zeros_per_channel(delta: &Matrix, zero_epsilon: f64, slices: usize) -> Result<Vec<f64>> {
    let rows = delta.rows();
    if slices == 0 || slices > rows {
        return Err(Error::Config(format!(
            "slices must be in 1..={rows} for a weight with {rows} rows, got {slices}"
        )));
    }
    let (base, extra) = (rows / slices, rows % slices);
    let mut sums = vec![0f64; delta.cols()];
    let mut start = 0;
    for band in 0..slices {
        let len = base + usize::from(band < extra);
        let mut counts = vec![0usize; delta.cols()];
        for r in start..start + len {
            for (c, &v) in delta.row(r).iter().enumerate() {
                if (v as f64) <= zero_epsilon {
                    counts[c] += 1;
                }
            }
        }
        for (s, n) in sums.iter_mut().zip(counts) {
            *s += n as f64;
        }
        start += len;
    }
    Ok(sums.into_iter().map(|s| s / slices as f64).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceVector {
    pub module: String,
    /// One strictly positive score per input channel.
    pub scores: Vec<f64>,
    pub signal: MappingConfig,
}

impl ImportanceVector {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

fn column_mean(delta: &Matrix, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut sums = vec![0f64; delta.cols()];
    for r in 0..delta.rows() {
        for (s, &v) in sums.iter_mut().zip(delta.row(r)) {
            *s += f(v as f64);
        }
    }
    let n = delta.rows().max(1) as f64;
    sums.into_iter().map(|s| s / n).collect()
}

/// Lifts non-positive scores to `1e-6 × max` (or 1 when nothing is
/// positive) so that every score can serve as a scaling base.
pub(crate) fn floor_scores(scores: &mut [f64]) {
    let max = scores.iter().copied().fold(0f64, f64::max);
    let floor = if max > 0.0 { max * 1e-6 } else { 1.0 };
    for s in scores.iter_mut() {
        if *s <= 0.0 || s.is_nan() {
            *s = floor;
        }
    }
}

/// Per-input-channel importance of one module.
pub fn importance(
    module: &str,
    weight_delta: &Matrix,
    stats: Option<&DeltaStats>,
    cfg: &MappingConfig,
    calib: Option<&ModuleCalib>,
) -> Result<ImportanceVector> {
    cfg.validate()?;
    let in_features = weight_delta.cols();
    let calib = if cfg.needs_calibration() {
        let c = calib.ok_or_else(|| Error::MissingCalibration(module.to_string()))?;
        if c.mean_square.len() != in_features || c.mean_abs.len() != in_features {
            return Err(Error::ShapeMismatch {
                name: format!("{module} calibration"),
                left: vec![c.mean_square.len()],
                right: vec![in_features],
            });
        }
        Some(c)
    } else {
        None
    };
    let stats = || stats.ok_or(Error::DegenerateDeltas);

    let mut scores = match cfg.signal {
        Signal::Magnitude => column_mean(weight_delta, |d| d),
        Signal::ActivationSq => calib
            .unwrap()
            .mean_square
            .iter()
            .map(|&v| v as f64)
            .collect(),
        Signal::BothEnds => {
            let st = stats()?;
            column_mean(weight_delta, |d| map_both_ends(d, st, cfg))
        }
        Signal::Mid => {
            let st = stats()?;
            column_mean(weight_delta, |d| map_mid(d, st, cfg))
        }
        Signal::BothEndsZero => {
            let st = stats()?;
            let zeros = count_zeros_per_channel(weight_delta, cfg.zero_epsilon, cfg.slices)?;
            column_mean(weight_delta, |d| map_both_ends_zero(d, st, cfg))
                .into_iter()
                .zip(zeros)
                .map(|(f, z)| f * (z + 1.0))
                .collect()
        }
    };
    if let Some(c) = calib.filter(|_| cfg.multiply_activation) {
        for (s, &a) in scores.iter_mut().zip(&c.mean_abs) {
            *s *= a as f64;
        }
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("importance score {bad} in `{module}`")));
    }
    floor_scores(&mut scores);
    Ok(ImportanceVector {
        module: module.to_string(),
        scores,
        signal: cfg.clone(),
    })
}

/// Importance for every module of a checkpoint pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceSet {
    pub config: MappingConfig,
    /// Global update statistics; absent for activation-only signals.
    pub stats: Option<DeltaStats>,
    pub vectors: BTreeMap<String, ImportanceVector>,
}

pub fn importance_all(
    pre: &TensorMap,
    post: &TensorMap,
    cfg: &MappingConfig,
    calib: Option<&CalibrationSet>,
) -> Result<ImportanceSet> {
    cfg.validate()?;
    let deltas = compute_delta(pre, post)?;
    let stats = if cfg.signal.needs_deltas() {
        Some(global_delta_stats(&deltas, cfg.zero_epsilon)?)
    } else {
        None
    };
    if cfg.needs_calibration() && calib.is_none() {
        return Err(Error::MissingCalibration(
            "all modules (signal needs --calib)".into(),
        ));
    }
    let modules = post.weight_modules();
    let vectors = modules
        .par_iter()
        .map(|m| {
            let delta = deltas.matrix(&format!("{m}.weight"))?;
            let c = match calib {
                Some(set) if cfg.needs_calibration() => Some(set.get(m)?),
                _ => None,
            };
            importance(m, &delta, stats.as_ref(), cfg, c).map(|v| (m.clone(), v))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ImportanceSet {
        config: cfg.clone(),
        stats,
        vectors: vectors.into_iter().collect(),
    })
}

impl ImportanceSet {
    pub fn to_tensor_map(&self) -> Result<TensorMap> {
        let mut map = TensorMap::new();
        for (m, v) in &self.vectors {
            map.insert(
                format!("{m}.importance"),
                Tensor::vector(v.scores.iter().map(|&s| s as f32).collect()),
            )?;
        }
        self.config.write_meta(&mut map);
        if let Some(st) = &self.stats {
            map.set_meta("zero_fraction", st.zero_fraction);
        }
        Ok(map)
    }

    pub fn from_tensor_map(map: &TensorMap) -> Result<Self> {
        let config = MappingConfig::read_meta(map)?;
        let mut vectors = BTreeMap::new();
        for name in map.names() {
            if let Some(m) = name.strip_suffix(".importance") {
                let scores: Vec<f64> = map.vector(name)?.into_iter().map(f64::from).collect();
                if scores.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                    return Err(Error::InvalidTensor {
                        name: name.to_string(),
                        reason: "importance scores must be finite and > 0".into(),
                    });
                }
                vectors.insert(
                    m.to_string(),
                    ImportanceVector {
                        module: m.to_string(),
                        scores,
                        signal: config.clone(),
                    },
                );
            }
        }
        Ok(Self {
            config,
            stats: None,
            vectors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{init_model, train, TrainConfig};

    fn stats(min_pos: f64, mid: f64, max: f64) -> DeltaStats {
        DeltaStats {
            min_positive: min_pos,
            median_positive: mid,
            max,
            min_all: min_pos,
            median_all: mid,
            zero_count: 0,
            total_count: 1,
            zero_fraction: 0.0,
        }
    }

    #[test]
    fn delta_identity_and_zero_cases() {
        let m = init_model(&[4, 4], 1).unwrap().to_checkpoint(0).unwrap();
        let d = compute_delta(&m, &m).unwrap();
        assert!(d.matrix("layer0.weight").unwrap().data().iter().all(|&v| v == 0.0));

        let mut zero = m.clone();
        zero.insert("layer0.weight", Tensor::matrix(&Matrix::zeros(4, 4)))
            .unwrap();
        let d = compute_delta(&zero, &m).unwrap();
        let w = m.matrix("layer0.weight").unwrap();
        for (a, b) in d.matrix("layer0.weight").unwrap().data().iter().zip(w.data()) {
            assert_eq!(*a, b.abs());
        }
        assert!(d.get("layer0.bias").is_none());
    }

    #[test]
    fn delta_matches_loop_oracle() {
        let a = init_model(&[4, 4], 1).unwrap().to_checkpoint(0).unwrap();
        let b = init_model(&[4, 4], 2).unwrap().to_checkpoint(0).unwrap();
        let d = compute_delta(&a, &b).unwrap().matrix("layer0.weight").unwrap();
        let (wa, wb) = (a.matrix("layer0.weight").unwrap(), b.matrix("layer0.weight").unwrap());
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(d.get(r, c), (wb.get(r, c) - wa.get(r, c)).abs());
            }
        }
    }

    #[test]
    fn delta_rejects_incompatible() {
        let a = init_model(&[4, 4], 1).unwrap().to_checkpoint(0).unwrap();
        let b = init_model(&[4, 5], 1).unwrap().to_checkpoint(0).unwrap();
        assert!(compute_delta(&a, &b).is_err());
    }

    #[test]
    fn stats_sort_and_index() {
        let s = stats_from_values(vec![0.0, 1.0, 2.0, 3.0], 0.0).unwrap();
        assert_eq!(s.min_positive, 1.0);
        assert_eq!(s.median_positive, 2.0);
        assert_eq!(s.max, 3.0);
        assert_eq!(s.zero_count, 1);
        assert_eq!(s.total_count, 4);
        assert_eq!(s.zero_fraction, 0.25);
        assert_eq!(s.min_all, 0.0);
        assert_eq!(s.median_all, 1.0);

        let single = stats_from_values(vec![0.0, 0.0, 5.0], 0.0).unwrap();
        assert_eq!(
            (single.min_positive, single.median_positive, single.max),
            (5.0, 5.0, 5.0)
        );

        assert!(matches!(
            stats_from_values(vec![0.0; 4], 0.0),
            Err(Error::DegenerateDeltas)
        ));
        let eps = stats_from_values(vec![1e-9, 1.0, 2.0], 1e-6).unwrap();
        assert_eq!(eps.zero_count, 1);
    }

    #[test]
    fn both_ends_endpoints_and_right_branch() {
        let cfg = MappingConfig::default();
        let mut s = stats(0.5, 2.0, 6.0);
        s.min_all = 0.0;
        s.median_all = 2.0;
        assert_eq!(map_both_ends(2.0, &s, &cfg), 1.0);
        assert_eq!(map_both_ends(6.0, &s, &cfg), 10.0);
        assert_eq!(map_both_ends(0.0, &s, &cfg), 10.0);
        assert_eq!(map_both_ends(4.0, &s, &cfg), 3.25);
        assert_eq!(map_mid(4.0, &s, &cfg), 7.75);
        assert_eq!(map_mid(2.0, &s, &cfg), 10.0);
        assert_eq!(map_mid(6.0, &s, &cfg), 1.0);
    }

    #[test]
    fn both_ends_zero_branches() {
        let cfg = MappingConfig::default();
        let s = stats(1.0, 3.0, 7.0);
        assert_eq!(map_both_ends_zero(0.0, &s, &cfg), 1.0);
        assert_eq!(map_both_ends_zero(1.0, &s, &cfg), 10.0);
        assert_eq!(map_both_ends_zero(3.0, &s, &cfg), 1.0);
        assert_eq!(map_both_ends_zero(7.0, &s, &cfg), 10.0);
        assert_eq!(map_both_ends_zero(2.0, &s, &cfg), 3.25);
        // clamped outside the fitted range
        assert_eq!(map_both_ends_zero(0.5, &s, &cfg), 10.0);
        assert_eq!(map_both_ends_zero(9.0, &s, &cfg), 10.0);
    }

    #[test]
    fn collapsed_branches_return_y_max() {
        let cfg = MappingConfig::default();
        let s = stats(5.0, 5.0, 5.0);
        assert_eq!(map_both_ends_zero(5.0, &s, &cfg), 10.0);
        let left = stats(2.0, 2.0, 4.0);
        assert_eq!(map_both_ends_zero(2.0, &left, &cfg), 10.0);
        assert_eq!(map_both_ends_zero(3.0, &left, &cfg), 3.25);
        let right = stats(1.0, 4.0, 4.0);
        assert_eq!(map_both_ends_zero(4.0, &right, &cfg), 10.0);
    }

    #[test]
    fn zero_counts() {
        let all_zero = Matrix::zeros(4, 3);
        assert_eq!(count_zeros_per_channel(&all_zero, 0.0, 1).unwrap(), vec![4.0; 3]);
        let none = Matrix::from_fn(4, 3, |_, _| 1.0);
        assert_eq!(count_zeros_per_channel(&none, 0.0, 1).unwrap(), vec![0.0; 3]);
        let banded = Matrix::from_fn(4, 2, |r, c| if c == 0 && r < 2 { 0.0 } else { 1.0 });
        assert_eq!(count_zeros_per_channel(&banded, 0.0, 2).unwrap(), vec![1.0, 0.0]);
        assert!(count_zeros_per_channel(&banded, 0.0, 5).is_err());
        assert!(count_zeros_per_channel(&banded, 0.0, 0).is_err());
    }

    #[test]
    fn importance_eq6_worked_example() {
        let s = stats(0.5, 2.0, 6.0);
        let delta = Matrix::from_vec(4, 1, vec![0.0, 2.0, 6.0, 0.0]).unwrap();
        let v = importance("m", &delta, Some(&s), &MappingConfig::default(), None).unwrap();
        assert_eq!(v.scores, vec![9.75]);

        let zeros = Matrix::zeros(6, 2);
        let v = importance("m", &zeros, Some(&s), &MappingConfig::default(), None).unwrap();
        assert_eq!(v.scores, vec![7.0, 7.0]);
    }

    #[test]
    fn importance_requires_calibration_for_activation_signals() {
        let s = stats(0.5, 2.0, 6.0);
        let delta = Matrix::zeros(2, 2);
        let cfg = MappingConfig::with_signal(Signal::ActivationSq);
        assert!(matches!(
            importance("m", &delta, Some(&s), &cfg, None),
            Err(Error::MissingCalibration(_))
        ));
        let cfg = MappingConfig {
            multiply_activation: true,
            ..MappingConfig::default()
        };
        assert!(importance("m", &delta, Some(&s), &cfg, None).is_err());
    }

    #[test]
    fn activation_signals_use_capture_stats() {
        let calib = ModuleCalib::from_inputs(Matrix::from_vec(2, 2, vec![1.0, -2.0, 3.0, 0.0]).unwrap());
        let cfg = MappingConfig::with_signal(Signal::ActivationSq);
        let v = importance("m", &Matrix::zeros(3, 2), None, &cfg, Some(&calib)).unwrap();
        assert_eq!(v.scores, vec![5.0, 2.0]);

        let s = stats(0.5, 2.0, 6.0);
        let cfg = MappingConfig {
            multiply_activation: true,
            ..MappingConfig::default()
        };
        let v = importance("m", &Matrix::zeros(3, 2), Some(&s), &cfg, Some(&calib)).unwrap();
        assert_eq!(v.scores, vec![4.0 * 2.0, 4.0 * 1.0]);
    }

    #[test]
    fn zero_scores_are_lifted() {
        let delta = Matrix::from_vec(2, 2, vec![0.0, 1.0, 0.0, 3.0]).unwrap();
        let cfg = MappingConfig::with_signal(Signal::Magnitude);
        let v = importance("m", &delta, None, &cfg, None).unwrap();
        assert_eq!(v.scores, vec![2e-6, 2.0]);
    }

    #[test]
    fn importance_all_on_identical_checkpoints_is_degenerate() {
        let m = init_model(&[4, 6, 3], 1).unwrap().to_checkpoint(0).unwrap();
        let err = importance_all(&m, &m, &MappingConfig::default(), None).unwrap_err();
        assert!(matches!(err, Error::DegenerateDeltas));
    }

    #[test]
    fn importance_all_on_trained_toy() {
        let m = init_model(&[8, 16, 8], 1).unwrap();
        let out = train(&m, &TrainConfig::default()).unwrap();
        let pre = &out.snapshots[0].1;
        let post = &out.snapshots.last().unwrap().1;
        for signal in [Signal::Magnitude, Signal::BothEnds, Signal::BothEndsZero, Signal::Mid] {
            let set = importance_all(pre, post, &MappingConfig::with_signal(signal), None).unwrap();
            assert_eq!(set.vectors.len(), 2);
            assert_eq!(set.vectors["layer0"].len(), 8);
            assert_eq!(set.vectors["layer1"].len(), 16);
            assert!(set
                .vectors
                .values()
                .flat_map(|v| &v.scores)
                .all(|s| s.is_finite() && *s > 0.0));
        }
    }

    #[test]
    fn importance_container_round_trip() {
        let m = init_model(&[8, 16, 8], 1).unwrap();
        let out = train(&m, &TrainConfig::default()).unwrap();
        let set = importance_all(
            &out.snapshots[0].1,
            &out.snapshots.last().unwrap().1,
            &MappingConfig::default(),
            None,
        )
        .unwrap();
        let map = set.to_tensor_map().unwrap();
        assert_eq!(map.meta_get("y_min"), Some("1"));
        assert_eq!(map.meta_get("y_max"), Some("10"));
        assert_eq!(map.meta_get("signal"), Some("both-ends-zero"));
        let back = ImportanceSet::from_tensor_map(&map).unwrap();
        assert_eq!(back.config, set.config);
        for (m, v) in &set.vectors {
            for (a, b) in v.scores.iter().zip(&back.vectors[m].scores) {
                assert_eq!(*a as f32 as f64, *b);
            }
        }
    }

    #[test]
    fn signal_names_parse() {
        for s in Signal::ALL {
            assert_eq!(s.as_str().parse::<Signal>().unwrap(), s);
        }
        assert_eq!("both_ends_zero".parse::<Signal>().unwrap(), Signal::BothEndsZero);
        assert!("nope".parse::<Signal>().is_err());
    }
}
