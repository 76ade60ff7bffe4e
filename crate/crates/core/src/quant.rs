//! Asymmetric round-to-nearest group quantization with channel protection.
//!
//! Each output row is split into groups of consecutive input channels. A group
//! is mapped onto `2^bits` evenly spaced levels spanning `[min(lo, 0),
//! max(hi, 0)]`, so the zero point always lies inside the code range.
//!
//! Scales are snapped to `24 - bits` significant bits. With that, every
//! dequantized value `(code - zero) · scale` is exact in `f32`, and quantizing
//! a dequantized tensor reproduces the same codes, scales and zero points.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::pack::{pack_codes, packed_len, unpack_codes};
use crate::store::{Tensor, TensorMap};

#[derive(Debug, Clone, PartialEq)]
pub struct QuantConfig {
    pub bits: u8,
    pub group_size: usize,
    pub protect_fraction: f64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bits: 3,
            group_size: 128,
            protect_fraction: 0.0,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.bits) {
            return Err(Error::Config(format!("quant.bits must be in 1..=8, got {}", self.bits)));
        }
        if self.group_size < 1 {
            return Err(Error::Config("quant.group_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.protect_fraction) {
            return Err(Error::Config(format!(
                "quant.protect_fraction must be in [0, 1], got {}",
                self.protect_fraction
            )));
        }
        Ok(())
    }

    /// Group size actually used for a weight with `in_features` columns.
    pub fn effective_group(&self, in_features: usize) -> usize {
        self.group_size.min(in_features).max(1)
    }

    fn max_code(&self) -> u8 {
        ((1u16 << self.bits) - 1) as u8
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub module: String,
    pub bits: u8,
    pub group_size: usize,
    pub rows: usize,
    pub cols: usize,
    /// Packed codes, row-major `[rows, cols]`.
    pub codes: Vec<u8>,
    /// `[rows, n_groups]`
    pub scales: Vec<f32>,
    /// `[rows, n_groups]`
    pub zero_points: Vec<u8>,
    /// Per-input-channel multiplier applied before quantization.
    pub channel_scale: Vec<f32>,
    pub protected: Vec<bool>,
    /// Original (unscaled) columns of the protected channels, `[rows, n_protected]`.
    pub protected_values: Matrix,
}

impl QuantizedTensor {
    pub fn n_groups(&self) -> usize {
        self.cols.div_ceil(self.group_size)
    }

    pub fn unpacked_codes(&self) -> Result<Vec<u8>> {
        unpack_codes(&self.codes, self.rows * self.cols, self.bits)
    }

    pub fn protected_count(&self) -> usize {
        self.protected.iter().filter(|&&p| p).count()
    }
}

/// Keeps `significant` leading bits of `x > 0`, rounding down, up and to nearest.
fn snap(x: f64, significant: u32) -> [f64; 3] {
    let mut e = x.log2().floor() as i32;
    while 2f64.powi(e) > x {
        e -= 1;
    }
    while 2f64.powi(e + 1) <= x {
        e += 1;
    }
    let ulp = 2f64.powi(e - (significant as i32 - 1));
    let q = x / ulp;
    [q.round() * ulp, q.floor() * ulp, q.ceil() * ulp]
}

struct GroupCode {
    scale: f32,
    zero: u8,
}

fn fit_range(lo: f64, hi: f64, bits: u8) -> GroupCode {
    let maxq = ((1u16 << bits) - 1) as f64;
    let candidates = snap((hi - lo) / maxq, 24 - bits as u32);
    for &s in &candidates {
        let s32 = s as f32;
        if s32 > 0.0 && (hi / s).round() + (-lo / s).round() == maxq {
            return GroupCode {
                scale: s32,
                zero: (-lo / s).round() as u8,
            };
        }
    }
    // Both rounding directions miss by one level; the upper snap never needs
    // clamping.
    let s = candidates[2];
    GroupCode {
        scale: s as f32,
        zero: (-lo / s).round().clamp(0.0, maxq) as u8,
    }
}

fn quantize_group(values: &[f32], bits: u8, codes: &mut [u8]) -> GroupCode {
    let maxq = (1u16 << bits) - 1;
    let raw_lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let raw_hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);

    if raw_lo == raw_hi {
        let c = raw_lo;
        if c == 0.0 {
            codes.fill(0);
            return GroupCode { scale: 1.0, zero: 0 };
        }
        let regular = fit_range((c as f64).min(0.0), (c as f64).max(0.0), bits);
        let code = ((c as f64 / regular.scale as f64).round() + regular.zero as f64)
            .clamp(0.0, maxq as f64);
        if (code - regular.zero as f64) as f32 * regular.scale == c {
            codes.fill(code as u8);
            return regular;
        }
        codes.fill(1);
        return GroupCode { scale: c, zero: 0 };
    }

    let gc = fit_range((raw_lo as f64).min(0.0), (raw_hi as f64).max(0.0), bits);
    let s = gc.scale as f64;
    for (code, &w) in codes.iter_mut().zip(values) {
        *code = ((w as f64 / s).round() + gc.zero as f64).clamp(0.0, maxq as f64) as u8;
    }
    gc
}

/// Quantizes `weight · diag(channel_scale)` and keeps the protected channels'
/// original columns verbatim.
pub fn quantize_weight(
    module: &str,
    weight: &Matrix,
    channel_scale: Option<&[f32]>,
    protected: Option<&[bool]>,
    cfg: &QuantConfig,
) -> Result<QuantizedTensor> {
    cfg.validate()?;
    let (rows, cols) = (weight.rows(), weight.cols());
    if cols == 0 {
        return Err(Error::Config(format!("`{module}` has no input channels")));
    }
    if !weight.is_finite() {
        return Err(Error::NonFinite(format!("weight of `{module}`")));
    }
    let channel_scale = match channel_scale {
        Some(s) => {
            if s.len() != cols {
                return Err(Error::ShapeMismatch {
                    name: format!("{module}.channel_scale"),
                    left: vec![s.len()],
                    right: vec![cols],
                });
            }
            if let Some(bad) = s.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                return Err(Error::Config(format!(
                    "channel scale entries must be finite and > 0, got {bad}"
                )));
            }
            s.to_vec()
        }
        None => vec![1.0; cols],
    };
    let protected = match protected {
        Some(p) if p.len() != cols => {
            return Err(Error::ShapeMismatch {
                name: format!("{module}.protected"),
                left: vec![p.len()],
                right: vec![cols],
            })
        }
        Some(p) => p.to_vec(),
        None => vec![false; cols],
    };

    let group = cfg.effective_group(cols);
    let n_groups = cols.div_ceil(group);
    let mut codes = vec![0u8; rows * cols];
    let mut scales = Vec::with_capacity(rows * n_groups);
    let mut zero_points = Vec::with_capacity(rows * n_groups);
    let mut scaled = vec![0f32; cols];
    for r in 0..rows {
        for ((dst, &w), &s) in scaled.iter_mut().zip(weight.row(r)).zip(&channel_scale) {
            *dst = w * s;
        }
        if !scaled.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("scaled weight of `{module}`")));
        }
        for g in 0..n_groups {
            let span = g * group..((g + 1) * group).min(cols);
            let gc = quantize_group(
                &scaled[span.clone()],
                cfg.bits,
                &mut codes[r * cols + span.start..r * cols + span.end],
            );
            scales.push(gc.scale);
            zero_points.push(gc.zero);
        }
    }

    let kept: Vec<usize> = (0..cols).filter(|&c| protected[c]).collect();
    let protected_values = Matrix::from_fn(rows, kept.len(), |r, k| weight.get(r, kept[k]));

    Ok(QuantizedTensor {
        module: module.to_string(),
        bits: cfg.bits,
        group_size: group,
        rows,
        cols,
        codes: pack_codes(&codes, cfg.bits)?,
        scales,
        zero_points,
        channel_scale,
        protected,
        protected_values,
    })
}

/// Plain round-to-nearest: unit channel scale, no protection.
pub fn rtn_quantize(module: &str, weight: &Matrix, cfg: &QuantConfig) -> Result<QuantizedTensor> {
    quantize_weight(module, weight, None, None, cfg)
}

/// Reconstructs the (unscaled) weight.
pub fn dequantize(q: &QuantizedTensor) -> Result<Matrix> {
    let codes = q.unpacked_codes()?;
    let n_groups = q.n_groups();
    if q.scales.len() != q.rows * n_groups || q.zero_points.len() != q.rows * n_groups {
        return Err(Error::Config(format!(
            "`{}`: expected {} scales/zero points",
            q.module,
            q.rows * n_groups
        )));
    }
    if q.channel_scale.len() != q.cols || q.protected.len() != q.cols {
        return Err(Error::Config(format!("`{}`: per-channel vectors have wrong length", q.module)));
    }
    if q.protected_values.shape() != [q.rows, q.protected_count()] {
        return Err(Error::Config(format!(
            "`{}`: protected values shape {:?} does not match mask",
            q.module,
            q.protected_values.shape()
        )));
    }
    let mut slot = vec![usize::MAX; q.cols];
    for (k, c) in (0..q.cols).filter(|&c| q.protected[c]).enumerate() {
        slot[c] = k;
    }
    let mut out = Matrix::zeros(q.rows, q.cols);
    for r in 0..q.rows {
        for c in 0..q.cols {
            let v = if q.protected[c] {
                q.protected_values.get(r, slot[c])
            } else {
                let g = r * n_groups + c / q.group_size;
                let level = codes[r * q.cols + c] as i32 - q.zero_points[g] as i32;
                (level as f32 * q.scales[g]) / q.channel_scale[c]
            };
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("dequantized `{}`[{r}, {c}]", q.module)));
            }
            out.set(r, c, v);
        }
    }
    Ok(out)
}

/// Marks the `round(fraction · n)` highest-scoring channels; ties go to the
/// lower index.
pub fn select_protected(scores: &[f64], fraction: f64) -> Vec<bool> {
    let n = scores.len();
    let k = ((fraction.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut mask = vec![false; n];
    for &c in &order[..k] {
        mask[c] = true;
    }
    mask
}

/// Mean squared difference between two equally shaped matrices.
pub fn weight_mse(a: &Matrix, b: &Matrix) -> f64 {
    crate::toy::mse(a.data(), b.data())
}

/// A quantized model: one [`QuantizedTensor`] per module.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantArtifact {
    pub config: QuantConfig,
    pub modules: BTreeMap<String, QuantizedTensor>,
}

impl QuantArtifact {
    pub fn to_tensor_map(&self) -> Result<TensorMap> {
        let mut map = TensorMap::new();
        for (m, q) in &self.modules {
            let n_groups = q.n_groups();
            map.insert(format!("{m}.codes"), Tensor::packed(vec![q.rows, q.cols], q.codes.clone()))?;
            map.insert(
                format!("{m}.scales"),
                Tensor::matrix(&Matrix::from_vec(q.rows, n_groups, q.scales.clone())?),
            )?;
            map.insert(
                format!("{m}.zeros"),
                Tensor::matrix(&Matrix::from_vec(
                    q.rows,
                    n_groups,
                    q.zero_points.iter().map(|&z| z as f32).collect(),
                )?),
            )?;
            map.insert(format!("{m}.channel_scale"), Tensor::vector(q.channel_scale.clone()))?;
            let mask: Vec<u8> = q.protected.iter().map(|&p| u8::from(p)).collect();
            map.insert(format!("{m}.protected"), Tensor::packed(vec![q.cols], pack_codes(&mask, 1)?))?;
            map.insert(format!("{m}.protected_values"), Tensor::matrix(&q.protected_values))?;
        }
        map.set_meta("bits", self.config.bits);
        map.set_meta("group_size", self.config.group_size);
        map.set_meta("protect_fraction", self.config.protect_fraction);
        Ok(map)
    }

    pub fn from_tensor_map(map: &TensorMap) -> Result<Self> {
        let meta = |key: &str| {
            map.meta_get(key)
                .ok_or_else(|| Error::Header(format!("quantized container lacks meta `{key}`")))
        };
        let parse_err = |key: &str| Error::Header(format!("meta `{key}` is malformed"));
        let config = QuantConfig {
            bits: meta("bits")?.parse().map_err(|_| parse_err("bits"))?,
            group_size: meta("group_size")?.parse().map_err(|_| parse_err("group_size"))?,
            protect_fraction: meta("protect_fraction")?
                .parse()
                .map_err(|_| parse_err("protect_fraction"))?,
        };
        config.validate()?;

        let mut modules = BTreeMap::new();
        for name in map.names() {
            let Some(m) = name.strip_suffix(".codes") else {
                continue;
            };
            let codes_t = map.require(name)?;
            let [rows, cols] = match codes_t.shape() {
                &[r, c] => [r, c],
                other => {
                    return Err(Error::InvalidTensor {
                        name: name.to_string(),
                        reason: format!("codes must be rank 2, got {other:?}"),
                    })
                }
            };
            let codes = codes_t
                .as_u8()
                .ok_or_else(|| Error::InvalidTensor {
                    name: name.to_string(),
                    reason: "codes must be u8".into(),
                })?
                .to_vec();
            if codes.len() != packed_len(rows * cols, config.bits) {
                return Err(Error::PackedLength {
                    expected: packed_len(rows * cols, config.bits),
                    actual: codes.len(),
                });
            }
            let group_size = config.effective_group(cols);
            let n_groups = cols.div_ceil(group_size);
            let scales = map.matrix(&format!("{m}.scales"))?;
            let zeros = map.matrix(&format!("{m}.zeros"))?;
            for (t, tname) in [(&scales, "scales"), (&zeros, "zeros")] {
                if t.shape() != [rows, n_groups] {
                    return Err(Error::ShapeMismatch {
                        name: format!("{m}.{tname}"),
                        left: t.shape().to_vec(),
                        right: vec![rows, n_groups],
                    });
                }
            }
            let maxq = config.max_code() as f32;
            let zero_points = zeros
                .data()
                .iter()
                .map(|&z| {
                    if z.fract() == 0.0 && (0.0..=maxq).contains(&z) {
                        Ok(z as u8)
                    } else {
                        Err(Error::InvalidTensor {
                            name: format!("{m}.zeros"),
                            reason: format!("zero point {z} outside 0..={maxq}"),
                        })
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let channel_scale = map.vector(&format!("{m}.channel_scale"))?;
            let mask_t = map.require(&format!("{m}.protected"))?;
            let mask_bytes = mask_t.as_u8().ok_or_else(|| Error::InvalidTensor {
                name: format!("{m}.protected"),
                reason: "mask must be u8".into(),
            })?;
            let protected: Vec<bool> = unpack_codes(mask_bytes, cols, 1)?
                .into_iter()
                .map(|b| b == 1)
                .collect();
            let protected_values = map.matrix(&format!("{m}.protected_values"))?;
            let q = QuantizedTensor {
                module: m.to_string(),
                bits: config.bits,
                group_size,
                rows,
                cols,
                codes,
                scales: scales.into_vec(),
                zero_points,
                channel_scale,
                protected,
                protected_values,
            };
            // validates every remaining shape
            dequantize(&q)?;
            modules.insert(m.to_string(), q);
        }
        Ok(Self { config, modules })
    }
}
