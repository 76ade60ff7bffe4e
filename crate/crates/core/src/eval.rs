//! Measurement harness: per-module reconstruction error, end-to-end output
//! divergence, protection-signal ablations and the pseudo-fine-tuning curve.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::quant::{dequantize, quantize_weight, rtn_quantize, select_protected, weight_mse, QuantArtifact, QuantConfig};
use crate::search::{quantize_model, SearchConfig};
use crate::signals::{importance_all, MappingConfig};
use crate::store::TensorMap;
use crate::toy::{gaussian_batch, stream, CalibrationSet, ToyModel};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalOptions {
    /// Leading calibration rows used for per-module errors; match the search.
    pub max_calib_rows: usize,
    pub held_out_rows: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            max_calib_rows: SearchConfig::default().max_calib_rows,
            held_out_rows: 256,
            seed: 0,
        }
    }
}

impl EvalOptions {
    pub fn held_out_batch(&self, input_dim: usize) -> Matrix {
        gaussian_batch(self.held_out_rows, input_dim, self.seed, stream::HELD_OUT)
    }
}

/// Output MSE on calibration inputs for three variants of one module:
/// plain round-to-nearest, the searched channel scale without protection,
/// and the stored artifact (scale plus protection).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModuleEval {
    pub rtn_mse: f64,
    pub searched_mse: f64,
    pub protected_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EndToEnd {
    pub output_mse_fp32_vs_quant: f64,
    pub relative_frobenius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalConfigSnapshot {
    pub bits: u8,
    pub group_size: usize,
    pub protect_fraction: f64,
    pub max_calib_rows: usize,
    pub held_out_rows: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub per_module: BTreeMap<String, ModuleEval>,
    pub end_to_end: EndToEnd,
    pub config: EvalConfigSnapshot,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Computes `x·ŵᵀ` and `x·wᵀ` separately and compares them. Deliberately a
/// different route than [`crate::search::output_mse`].
fn separate_output_mse(weight: &Matrix, approx: &Matrix, inputs: &Matrix) -> f64 {
    let project = |w: &Matrix| -> Vec<f64> {
        let mut out = Vec::with_capacity(inputs.rows() * w.rows());
        for r in 0..inputs.rows() {
            for o in 0..w.rows() {
                out.push(
                    w.row(o)
                        .iter()
                        .zip(inputs.row(r))
                        .map(|(&a, &b)| a as f64 * b as f64)
                        .sum::<f64>(),
                );
            }
        }
        out
    };
    let (y, yq) = (project(weight), project(approx));
    if y.is_empty() {
        return 0.0;
    }
    y.iter().zip(&yq).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64
}

fn end_to_end(post: &TensorMap, weights: &BTreeMap<String, Matrix>, opts: &EvalOptions) -> Result<EndToEnd> {
    let model = ToyModel::from_checkpoint(post)?;
    let quant = model.with_weights(weights)?;
    let x = opts.held_out_batch(model.input_dim());
    let (y, _) = model.forward(&x)?;
    let (yq, _) = quant.forward(&x)?;
    let mse = crate::toy::mse(y.data(), yq.data());
    let norm: f64 = y.data().iter().map(|&v| (v as f64).powi(2)).sum();
    let diff: f64 = y
        .data()
        .iter()
        .zip(yq.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(EndToEnd {
        output_mse_fp32_vs_quant: mse,
        relative_frobenius: if norm > 0.0 { (diff / norm).sqrt() } else { diff.sqrt() },
    })
}

pub fn layer_report(
    post: &TensorMap,
    artifact: &QuantArtifact,
    calib: &CalibrationSet,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let modules = post.weight_modules();
    let rtn_cfg = QuantConfig {
        protect_fraction: 0.0,
        ..artifact.config.clone()
    };
    let rows = modules
        .par_iter()
        .map(|m| {
            let q = artifact
                .modules
                .get(m)
                .ok_or_else(|| Error::MissingTensor(format!("{m}.codes")))?;
            let w = post.matrix(&format!("{m}.weight"))?;
            let x = calib.get(m)?.inputs.leading_rows(opts.max_calib_rows);
            let rtn = dequantize(&rtn_quantize(m, &w, &rtn_cfg)?)?;
            let searched = dequantize(&quantize_weight(m, &w, Some(&q.channel_scale), None, &rtn_cfg)?)?;
            let stored = dequantize(q)?;
            let e = ModuleEval {
                rtn_mse: separate_output_mse(&w, &rtn, &x),
                searched_mse: separate_output_mse(&w, &searched, &x),
                protected_mse: separate_output_mse(&w, &stored, &x),
            };
            Ok((m.clone(), stored, e))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut weights = BTreeMap::new();
    let mut per_module = BTreeMap::new();
    for (m, stored, e) in rows {
        weights.insert(m.clone(), stored);
        per_module.insert(m, e);
    }
    Ok(EvalReport {
        per_module,
        end_to_end: end_to_end(post, &weights, opts)?,
        config: EvalConfigSnapshot {
            bits: artifact.config.bits,
            group_size: artifact.config.group_size,
            protect_fraction: artifact.config.protect_fraction,
            max_calib_rows: opts.max_calib_rows,
            held_out_rows: opts.held_out_rows,
            seed: opts.seed,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub signal: String,
    pub protect_fraction: f64,
    /// Weight reconstruction MSE per module.
    pub per_module: BTreeMap<String, f64>,
    pub mean_mse: f64,
    pub end_to_end_mse: f64,
}

/// Short label for a mapping configuration, e.g. `both-ends-zero+act`.
pub fn signal_label(cfg: &MappingConfig) -> String {
    let mut s = cfg.signal.to_string();
    if cfg.slices > 1 {
        let _ = write!(s, "+slices{}", cfg.slices);
    }
    if cfg.multiply_activation {
        s.push_str("+act");
    }
    s
}

/// Mixed-precision protection with plain round-to-nearest (no scale search)
/// for every `(signal, fraction)` pair, in input order.
pub fn ablate_signals(
    pre: &TensorMap,
    post: &TensorMap,
    calib: &CalibrationSet,
    signals: &[MappingConfig],
    fractions: &[f64],
    qcfg: &QuantConfig,
    opts: &EvalOptions,
) -> Result<Vec<AblationRow>> {
    if signals.is_empty() {
        return Err(Error::Config("ablation needs at least one signal".into()));
    }
    if fractions.is_empty() {
        return Err(Error::Config("ablation needs at least one protection fraction".into()));
    }
    let modules = post.weight_modules();
    let weights: BTreeMap<String, Matrix> = modules
        .iter()
        .map(|m| Ok((m.clone(), post.matrix(&format!("{m}.weight"))?)))
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(signals.len() * fractions.len());
    for mcfg in signals {
        let set = importance_all(pre, post, mcfg, Some(calib))?;
        let per_fraction = fractions
            .par_iter()
            .map(|&f| {
                let cfg = QuantConfig {
                    protect_fraction: f,
                    ..qcfg.clone()
                };
                cfg.validate()?;
                let mut per_module = BTreeMap::new();
                let mut recon = BTreeMap::new();
                for (m, w) in &weights {
                    let mask = select_protected(&set.vectors[m].scores, f);
                    let approx = dequantize(&quantize_weight(m, w, None, Some(&mask), &cfg)?)?;
                    per_module.insert(m.clone(), weight_mse(w, &approx));
                    recon.insert(m.clone(), approx);
                }
                let mean_mse = per_module.values().sum::<f64>() / per_module.len().max(1) as f64;
                Ok(AblationRow {
                    signal: signal_label(mcfg),
                    protect_fraction: f,
                    per_module,
                    mean_mse,
                    end_to_end_mse: end_to_end(post, &recon, opts)?.output_mse_fp32_vs_quant,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.extend(per_fraction);
    }
    Ok(rows)
}

/// CSV with columns `signal,fraction,module,mse,end_to_end_mse`: one line per
/// module plus a `mean` line per row.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("signal,fraction,module,mse,end_to_end_mse\n");
    for r in rows {
        for (m, mse) in &r.per_module {
            let _ = writeln!(out, "{},{},{},{},{}", r.signal, r.protect_fraction, m, mse, r.end_to_end_mse);
        }
        let _ = writeln!(
            out,
            "{},{},mean,{},{}",
            r.signal, r.protect_fraction, r.mean_mse, r.end_to_end_mse
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub step: usize,
    /// `None` when the snapshot has no positive update yet.
    pub mean_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveReport {
    pub points: Vec<CurvePoint>,
    /// Least-squares slope of mean loss against step.
    pub slope: Option<f64>,
}

/// Searched quantization loss of `final_ref` when importance comes from the
/// updates between the first snapshot and each later one.
pub fn pseudo_ft_curve(
    snapshots: &[(usize, TensorMap)],
    final_ref: &TensorMap,
    calib: &CalibrationSet,
    mcfg: &MappingConfig,
    scfg: &SearchConfig,
    qcfg: &QuantConfig,
) -> Result<CurveReport> {
    if snapshots.len() < 2 {
        return Err(Error::Config("the curve needs at least two snapshots".into()));
    }
    let (first_step, base) = &snapshots[0];
    if *first_step != 0 {
        return Err(Error::Config(format!(
            "the first snapshot must be step 0, got step {first_step}"
        )));
    }
    let mut points = Vec::new();
    for (step, snap) in &snapshots[1..] {
        let mean_loss = match importance_all(base, snap, mcfg, Some(calib)) {
            Ok(set) => {
                let (_, report) = quantize_model(final_ref, &set.vectors, calib, scfg, qcfg)?;
                Some(report.iter().map(|r| r.best_loss).sum::<f64>() / report.len().max(1) as f64)
            }
            Err(Error::DegenerateDeltas) => None,
            Err(e) => return Err(e),
        };
        points.push(CurvePoint {
            step: *step,
            mean_loss,
        });
    }
    let slope = least_squares_slope(
        &points
            .iter()
            .filter_map(|p| p.mean_loss.map(|l| (p.step as f64, l)))
            .collect::<Vec<_>>(),
    );
    Ok(CurveReport { points, slope })
}

pub fn least_squares_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// CSV with columns `step,mean_loss,slope`; the slope repeats on every row.
pub fn curve_csv(curve: &CurveReport) -> String {
    let slope = curve
        .slope
        .map(|s| s.to_string())
        .unwrap_or_else(|| "nan".into());
    let mut out = String::from("step,mean_loss,slope\n");
    for p in &curve.points {
        let loss = p
            .mean_loss
            .map(|l| l.to_string())
            .unwrap_or_else(|| "degenerate".into());
        let _ = writeln!(out, "{},{},{}", p.step, loss, slope);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signals::Signal;
    use crate::toy::{init_model, train, TrainConfig, TrainOutcome};

    fn trained() -> (TrainOutcome, CalibrationSet) {
        let m = init_model(&[8, 16, 8], 7).unwrap();
        let out = train(
            &m,
            &TrainConfig {
                steps: 200,
                data_seed: 7,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let (_, calib) = out
            .model
            .forward(&gaussian_batch(64, 8, 7, stream::CALIB))
            .unwrap();
        (out, calib)
    }

    fn search_pipeline(out: &TrainOutcome, calib: &CalibrationSet, qcfg: &QuantConfig) -> (QuantArtifact, Vec<crate::SearchResult>) {
        let pre = &out.snapshots[0].1;
        let post = &out.snapshots.last().unwrap().1;
        let set = importance_all(pre, post, &MappingConfig::default(), Some(calib)).unwrap();
        quantize_model(post, &set.vectors, calib, &SearchConfig::default(), qcfg).unwrap()
    }

    #[test]
    fn report_cross_checks_search() {
        let (out, calib) = trained();
        let post = &out.snapshots.last().unwrap().1;
        let qcfg = QuantConfig::default();
        let (art, results) = search_pipeline(&out, &calib, &qcfg);
        let rep = layer_report(post, &art, &calib, &EvalOptions::default()).unwrap();
        for r in &results {
            let e = &rep.per_module[&r.module];
            assert!((e.rtn_mse - r.rtn_loss).abs() <= 1e-9);
            assert!((e.searched_mse - r.best_loss).abs() <= 1e-9);
            assert!(e.searched_mse <= e.rtn_mse + 1e-12);
        }
        assert!(rep.end_to_end.output_mse_fp32_vs_quant > 0.0);
    }

    #[test]
    fn full_protection_report_is_zero() {
        let (out, calib) = trained();
        let post = &out.snapshots.last().unwrap().1;
        let qcfg = QuantConfig {
            protect_fraction: 1.0,
            ..QuantConfig::default()
        };
        let (art, _) = search_pipeline(&out, &calib, &qcfg);
        let rep = layer_report(post, &art, &calib, &EvalOptions::default()).unwrap();
        for e in rep.per_module.values() {
            assert!(e.protected_mse <= 1e-10);
        }
        assert!(rep.end_to_end.output_mse_fp32_vs_quant <= 1e-10);
        assert_eq!(rep.end_to_end.relative_frobenius, 0.0);
    }

    #[test]
    fn four_bits_beat_three_bits() {
        let (out, calib) = trained();
        let post = &out.snapshots.last().unwrap().1;
        let r3 = layer_report(post, &search_pipeline(&out, &calib, &QuantConfig::default()).0, &calib, &EvalOptions::default()).unwrap();
        let q4 = QuantConfig {
            bits: 4,
            ..QuantConfig::default()
        };
        let r4 = layer_report(post, &search_pipeline(&out, &calib, &q4).0, &calib, &EvalOptions::default()).unwrap();
        for (m, e3) in &r3.per_module {
            let e4 = &r4.per_module[m];
            assert!(e4.rtn_mse <= e3.rtn_mse && e4.searched_mse <= e3.searched_mse, "{m}");
        }
    }

    #[test]
    fn ablation_rows_and_monotonicity() {
        let (out, calib) = trained();
        let pre = &out.snapshots[0].1;
        let post = &out.snapshots.last().unwrap().1;
        let signals: Vec<_> = Signal::ALL.iter().map(|&s| MappingConfig::with_signal(s)).collect();
        let fractions = [0.0, 0.05, 0.3, 1.0];
        let rows = ablate_signals(pre, post, &calib, &signals, &fractions, &QuantConfig::default(), &EvalOptions::default()).unwrap();
        assert_eq!(rows.len(), 20);
        let zero_rows: Vec<_> = rows.iter().filter(|r| r.protect_fraction == 0.0).collect();
        for r in &zero_rows {
            assert_eq!(r.per_module, zero_rows[0].per_module);
        }
        for chunk in rows.chunks(4) {
            for pair in chunk.windows(2) {
                for (m, mse) in &pair[1].per_module {
                    assert!(*mse <= pair[0].per_module[m], "{} {m}", pair[1].signal);
                }
            }
            assert!(chunk[3].per_module.values().all(|&v| v == 0.0));
        }
        let csv = ablation_csv(&rows);
        assert_eq!(csv.lines().count(), 1 + 20 * 3);
        assert!(csv.starts_with("signal,fraction,module,mse,end_to_end_mse\n"));
    }

    #[test]
    fn ablation_requires_signals() {
        let (out, calib) = trained();
        let pre = &out.snapshots[0].1;
        let post = &out.snapshots.last().unwrap().1;
        assert!(ablate_signals(pre, post, &calib, &[], &[0.05], &QuantConfig::default(), &EvalOptions::default()).is_err());
    }

    #[test]
    fn curve_marks_degenerate_steps() {
        let (out, calib) = trained();
        let post = out.snapshots.last().unwrap().1.clone();
        let mut snaps = out.snapshots.clone();
        snaps.insert(1, (0, snaps[0].1.clone()));
        let curve = pseudo_ft_curve(&snaps, &post, &calib, &MappingConfig::default(), &SearchConfig::default(), &QuantConfig::default()).unwrap();
        assert_eq!(curve.points.len(), 3);
        assert_eq!(curve.points[0].mean_loss, None);
        assert!(curve.points[1..].iter().all(|p| p.mean_loss.unwrap().is_finite()));
        assert!(curve.slope.is_some());
        let csv = curve_csv(&curve);
        assert!(csv.lines().nth(1).unwrap().starts_with("0,degenerate,"));
    }

    #[test]
    fn slope_of_a_line() {
        assert_eq!(least_squares_slope(&[(0.0, 1.0), (1.0, 3.0), (2.0, 5.0)]), Some(2.0));
        assert_eq!(least_squares_slope(&[(0.0, 1.0)]), None);
    }
}
