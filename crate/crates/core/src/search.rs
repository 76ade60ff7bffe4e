//! Importance-driven scaling search.
//!
//! For each module the weight columns are scaled by `s = I^α`, quantized, and
//! scaled back; `α` is picked from an evenly spaced grid by minimizing the
//! output error on calibration inputs.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::quant::{dequantize, quantize_weight, select_protected, QuantArtifact, QuantConfig};
use crate::signals::ImportanceVector;
use crate::store::TensorMap;
use crate::toy::CalibrationSet;

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub grid_points: usize,
    pub alpha_lo: f64,
    pub alpha_hi: f64,
    pub normalize_scale: bool,
    pub max_calib_rows: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            grid_points: 20,
            alpha_lo: 0.0,
            alpha_hi: 1.0,
            normalize_scale: true,
            max_calib_rows: 512,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_points < 2 {
            return Err(Error::Config("search.grid_points must be >= 2".into()));
        }
        if self.alpha_lo >= self.alpha_hi || !self.alpha_lo.is_finite() || !self.alpha_hi.is_finite() {
            return Err(Error::Config(format!(
                "search requires alpha_lo < alpha_hi, got {} and {}",
                self.alpha_lo, self.alpha_hi
            )));
        }
        if self.max_calib_rows < 1 {
            return Err(Error::Config("search.max_calib_rows must be >= 1".into()));
        }
        Ok(())
    }

    /// `alpha_lo + k · (alpha_hi - alpha_lo) / (grid_points - 1)`, both ends included.
    pub fn grid(&self) -> Vec<f64> {
        let step = (self.alpha_hi - self.alpha_lo) / (self.grid_points - 1) as f64;
        (0..self.grid_points)
            .map(|k| {
                if k == self.grid_points - 1 {
                    self.alpha_hi
                } else {
                    self.alpha_lo + k as f64 * step
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub module: String,
    pub alpha_star: f64,
    pub scale: Vec<f32>,
    pub loss_curve: Vec<(f64, f64)>,
    /// Loss with the all-ones scale.
    pub rtn_loss: f64,
    pub best_loss: f64,
}

/// One JSON line of the search report.
#[derive(Debug, Serialize)]
pub struct SearchReportLine<'a> {
    pub module: &'a str,
    pub alpha_star: f64,
    pub rtn_loss: f64,
    pub best_loss: f64,
    pub loss_curve: Vec<[f64; 2]>,
}

impl SearchResult {
    pub fn report_line(&self) -> SearchReportLine<'_> {
        SearchReportLine {
            module: &self.module,
            alpha_star: self.alpha_star,
            rtn_loss: self.rtn_loss,
            best_loss: self.best_loss,
            loss_curve: self.loss_curve.iter().map(|&(a, l)| [a, l]).collect(),
        }
    }
}

/// Search report as JSON lines, one module per line.
pub fn report_jsonl(results: &[SearchResult]) -> Result<String> {
    let mut out = String::new();
    for r in results {
        out.push_str(
            &serde_json::to_string(&r.report_line()).map_err(|e| Error::Config(e.to_string()))?,
        );
        out.push('\n');
    }
    Ok(out)
}

/// Mean squared error between `x·ŵᵀ` and `x·wᵀ`, accumulated in a fixed order.
pub fn output_mse(weight: &Matrix, approx: &Matrix, inputs: &Matrix) -> Result<f64> {
    if weight.shape() != approx.shape() || inputs.cols() != weight.cols() {
        return Err(Error::ShapeMismatch {
            name: "output_mse".into(),
            left: vec![weight.rows(), weight.cols(), inputs.cols()],
            right: vec![approx.rows(), approx.cols(), weight.cols()],
        });
    }
    let diff: Vec<f64> = approx
        .data()
        .iter()
        .zip(weight.data())
        .map(|(&a, &w)| a as f64 - w as f64)
        .collect();
    let (out, d) = (weight.rows(), weight.cols());
    let mut total = 0f64;
    for r in 0..inputs.rows() {
        let x = inputs.row(r);
        for o in 0..out {
            let e = &diff[o * d..(o + 1) * d];
            let y: f64 = e.iter().zip(x).map(|(&a, &b)| a * b as f64).sum();
            total += y * y;
        }
    }
    Ok(total / (inputs.rows() * out).max(1) as f64)
}

/// Output error of scaled round-to-nearest quantization (no protection).
pub fn quant_loss(weight: &Matrix, calib_inputs: &Matrix, scale: &[f32], qcfg: &QuantConfig) -> Result<f64> {
    if calib_inputs.rows() == 0 {
        return Err(Error::Config("quant_loss needs at least one calibration row".into()));
    }
    let q = quantize_weight("loss", weight, Some(scale), None, qcfg)?;
    output_mse(weight, &dequantize(&q)?, calib_inputs)
}

/// Divides by `sqrt(max · min)`, centering the range around 1.
pub fn normalize_scale(raw: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = raw.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::Config(format!("scale entries must be finite and > 0, got {bad}")));
    }
    let max = raw.iter().copied().fold(f64::MIN, f64::max);
    let min = raw.iter().copied().fold(f64::MAX, f64::min);
    let center = (max * min).sqrt();
    Ok(raw.iter().map(|v| v / center).collect())
}

fn scale_for(base: &[f64], alpha: f64) -> Result<Vec<f32>> {
    base.iter()
        .map(|&b| {
            let s = b.powf(alpha) as f32;
            if s.is_finite() && s > 0.0 {
                Ok(s)
            } else {
                Err(Error::NonFinite(format!("scale {b}^{alpha} leaves f32 range")))
            }
        })
        .collect()
}

pub fn search_scale(
    weight: &Matrix,
    importance: &ImportanceVector,
    calib_inputs: &Matrix,
    scfg: &SearchConfig,
    qcfg: &QuantConfig,
) -> Result<SearchResult> {
    scfg.validate()?;
    if importance.len() != weight.cols() {
        return Err(Error::ShapeMismatch {
            name: format!("{}.importance", importance.module),
            left: vec![importance.len()],
            right: vec![weight.cols()],
        });
    }
    let inputs = calib_inputs.leading_rows(scfg.max_calib_rows);
    // I^α normalized equals (normalized I)^α, and normalizing first keeps the
    // result independent of any constant factor on I.
    let base = if scfg.normalize_scale {
        normalize_scale(&importance.scores)?
    } else {
        if let Some(bad) = importance.scores.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Config(format!("importance must be > 0, got {bad}")));
        }
        importance.scores.clone()
    };

    let ones = vec![1f32; weight.cols()];
    let rtn_loss = quant_loss(weight, &inputs, &ones, qcfg)?;

    let evaluated = scfg
        .grid()
        .into_par_iter()
        .map(|alpha| {
            let s = scale_for(&base, alpha)?;
            let loss = quant_loss(weight, &inputs, &s, qcfg)?;
            Ok((alpha, loss, s))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut best = 0;
    for (i, (_, loss, _)) in evaluated.iter().enumerate() {
        if *loss < evaluated[best].1 {
            best = i;
        }
    }
    let (alpha_star, best_loss, scale) = evaluated[best].clone();
    Ok(SearchResult {
        module: importance.module.clone(),
        alpha_star,
        scale,
        loss_curve: evaluated.iter().map(|(a, l, _)| (*a, *l)).collect(),
        rtn_loss,
        best_loss,
    })
}

/// Searches every module, applies the winning scale, protects the top
/// channels and quantizes.
pub fn quantize_model(
    post: &TensorMap,
    importances: &BTreeMap<String, ImportanceVector>,
    calib: &CalibrationSet,
    scfg: &SearchConfig,
    qcfg: &QuantConfig,
) -> Result<(QuantArtifact, Vec<SearchResult>)> {
    scfg.validate()?;
    qcfg.validate()?;
    let modules = post.weight_modules();
    let done = modules
        .par_iter()
        .map(|m| {
            let imp = importances
                .get(m)
                .ok_or_else(|| Error::MissingImportance(m.clone()))?;
            let inputs = &calib.get(m)?.inputs;
            let weight = post.matrix(&format!("{m}.weight"))?;
            let result = search_scale(&weight, imp, inputs, scfg, qcfg)?;
            let mask = select_protected(&imp.scores, qcfg.protect_fraction);
            let q = quantize_weight(m, &weight, Some(&result.scale), Some(&mask), qcfg)?;
            Ok((q, result))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut artifact = QuantArtifact {
        config: qcfg.clone(),
        modules: BTreeMap::new(),
    };
    let mut report = Vec::with_capacity(done.len());
    for (q, r) in done {
        artifact.modules.insert(q.module.clone(), q);
        report.push(r);
    }
    Ok((artifact, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::rtn_quantize;
    use crate::signals::MappingConfig;
    use crate::toy::gaussian_batch;

    fn imp(scores: Vec<f64>) -> ImportanceVector {
        ImportanceVector {
            module: "m".into(),
            scores,
            signal: MappingConfig::default(),
        }
    }

    fn qcfg() -> QuantConfig {
        QuantConfig {
            bits: 3,
            group_size: 4,
            protect_fraction: 0.0,
        }
    }

    #[test]
    fn unit_scale_matches_plain_rtn() {
        let w = gaussian_batch(8, 8, 1, 0);
        let x = gaussian_batch(16, 8, 2, 0);
        let loss = quant_loss(&w, &x, &[1.0; 8], &qcfg()).unwrap();
        let plain = dequantize(&rtn_quantize("m", &w, &qcfg()).unwrap()).unwrap();
        assert_eq!(loss, output_mse(&w, &plain, &x).unwrap());
        assert!(loss > 0.0);
    }

    #[test]
    fn representable_weight_has_zero_loss() {
        let w = Matrix::from_fn(4, 8, |r, _| r as f32 - 1.5);
        let x = gaussian_batch(5, 8, 2, 0);
        let cfg = QuantConfig {
            group_size: 1,
            ..qcfg()
        };
        let pow2: Vec<f32> = (0..8).map(|i| 2f32.powi(i - 3)).collect();
        assert_eq!(quant_loss(&w, &x, &pow2, &cfg).unwrap(), 0.0);
        assert_eq!(quant_loss(&w, &x, &[1.0; 8], &qcfg()).unwrap(), 0.0);
        // arbitrary scales only lose the rounding of w·s/s
        let s: Vec<f32> = (0..8).map(|i| 0.5 + 0.3 * i as f32).collect();
        assert!(quant_loss(&w, &x, &s, &cfg).unwrap() < 1e-12);
    }

    #[test]
    fn quant_loss_matches_loop_oracle() {
        let w = gaussian_batch(8, 8, 3, 0);
        let x = gaussian_batch(16, 8, 4, 0);
        let s: Vec<f32> = [0.5, 2.0, 1.0, 1.5, 0.8, 3.0, 1.2, 0.9].to_vec();
        let loss = quant_loss(&w, &x, &s, &qcfg()).unwrap();

        let scaled = Matrix::from_fn(8, 8, |r, c| w.get(r, c) * s[c]);
        let q = dequantize(&rtn_quantize("m", &scaled, &qcfg()).unwrap()).unwrap();
        let mut total = 0f64;
        for n in 0..16 {
            for o in 0..8 {
                let (mut yq, mut y) = (0f64, 0f64);
                for c in 0..8 {
                    yq += q.get(o, c) as f64 * (x.get(n, c) as f64 / s[c] as f64);
                    y += w.get(o, c) as f64 * x.get(n, c) as f64;
                }
                total += (yq - y).powi(2);
            }
        }
        let oracle = total / 128.0;
        assert!((loss - oracle).abs() <= 1e-6 * oracle, "{loss} vs {oracle}");
    }

    #[test]
    fn quant_loss_rejects_bad_scale() {
        let w = gaussian_batch(2, 2, 3, 0);
        let x = gaussian_batch(2, 2, 4, 0);
        assert!(quant_loss(&w, &x, &[1.0, -1.0], &qcfg()).is_err());
        assert!(quant_loss(&w, &gaussian_batch(2, 3, 4, 0), &[1.0, 1.0], &qcfg()).is_err());
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_scale(&[1.0; 4]).unwrap(), vec![1.0; 4]);
        assert_eq!(normalize_scale(&[3.7; 3]).unwrap(), vec![1.0; 3]);
        assert_eq!(normalize_scale(&[1.0, 100.0]).unwrap(), vec![0.1, 10.0]);
        assert!(normalize_scale(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn grid_includes_both_ends() {
        let cfg = SearchConfig::default();
        let g = cfg.grid();
        assert_eq!(g.len(), 20);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[19], 1.0);
        let two = SearchConfig {
            grid_points: 2,
            ..cfg
        };
        assert_eq!(two.grid(), vec![0.0, 1.0]);
    }

    #[test]
    fn constant_importance_picks_alpha_zero() {
        let w = gaussian_batch(8, 8, 5, 0);
        let x = gaussian_batch(16, 8, 6, 0);
        let r = search_scale(&w, &imp(vec![4.0; 8]), &x, &SearchConfig::default(), &qcfg()).unwrap();
        assert_eq!(r.alpha_star, 0.0);
        assert_eq!(r.scale, vec![1.0; 8]);
        assert_eq!(r.best_loss, r.rtn_loss);
        assert!(r.loss_curve.iter().all(|&(_, l)| l == r.rtn_loss));
    }

    #[test]
    fn search_matches_brute_force() {
        let w = gaussian_batch(8, 8, 7, 0);
        let x = gaussian_batch(16, 8, 8, 0);
        let scores: Vec<f64> = (0..8).map(|i| 1.0 + (i * i) as f64).collect();
        let cfg = SearchConfig::default();
        let r = search_scale(&w, &imp(scores.clone()), &x, &cfg, &qcfg()).unwrap();

        let max = scores.iter().cloned().fold(f64::MIN, f64::max);
        let min = scores.iter().cloned().fold(f64::MAX, f64::min);
        let mut best = (f64::INFINITY, -1.0);
        for k in 0..20 {
            let a = k as f64 / 19.0;
            let s: Vec<f32> = scores
                .iter()
                .map(|&v| (v.powf(a) / (max.powf(a) * min.powf(a)).sqrt()) as f32)
                .collect();
            let l = quant_loss(&w, &x, &s, &qcfg()).unwrap();
            if l < best.0 {
                best = (l, a);
            }
        }
        assert!((r.alpha_star - best.1).abs() < 1e-12);
        assert!(r.best_loss <= r.rtn_loss);
    }

    #[test]
    fn rescaled_importance_gives_same_result() {
        let w = gaussian_batch(8, 8, 9, 0);
        let x = gaussian_batch(16, 8, 10, 0);
        let scores: Vec<f64> = (0..8).map(|i| 0.3 + i as f64 * 1.7).collect();
        let a = search_scale(&w, &imp(scores.clone()), &x, &SearchConfig::default(), &qcfg()).unwrap();
        let b = search_scale(
            &w,
            &imp(scores.iter().map(|s| s * 1024.0).collect()),
            &x,
            &SearchConfig::default(),
            &qcfg(),
        )
        .unwrap();
        assert_eq!(a.alpha_star, b.alpha_star);
        assert_eq!(a.scale, b.scale);
    }

    #[test]
    fn report_lines_have_expected_fields() {
        let w = gaussian_batch(4, 4, 9, 0);
        let x = gaussian_batch(8, 4, 10, 0);
        let r = search_scale(&w, &imp(vec![1.0, 2.0, 3.0, 4.0]), &x, &SearchConfig::default(), &qcfg())
            .unwrap();
        let text = report_jsonl(&[r]).unwrap();
        let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(v["module"], "m");
        assert_eq!(v["loss_curve"].as_array().unwrap().len(), 20);
        for key in ["alpha_star", "rtn_loss", "best_loss"] {
            assert!(v[key].is_number());
        }
    }
}
