//! Integer quantization.
//!
//! Asymmetric affine quantization of reals onto unsigned `bitwidth`-bit
//! integers: `q = round(x / scale) + z`. The real scale is itself stored as
//! an integer multiplier and shift (`scale ≈ m / 2^k`, `m` a 31-bit integer),
//! so inference needs only integer multiply, add, and shift — the
//! requantization step maps a wide signed accumulator back to the output
//! format as `((acc·m + 2^(k−1)) >> k) + z`. Rounding is half-up everywhere
//! (the hardware add-then-shift idiom). The module also provides the
//! fake-quantization used by quantization-aware training and the fully
//! integer evaluation of one folded convolution layer.

use thiserror::Error;

/// Quantization parameters of one tensor.
///
/// `real_scale() = m / 2^k` approximates the calibrated float scale to 31
/// significant bits; `z` is the zero point (`quantize(0) == z` exactly when
/// the calibrated range includes zero).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantParams {
    pub bitwidth: u32,
    /// Scale multiplier, `2^30 ≤ m < 2^31` (unless clamped at the extremes).
    pub m: u32,
    /// Scale shift: `real_scale = m / 2^k`.
    pub k: u32,
    /// Zero point, `< 2^bitwidth`.
    pub z: u32,
}

impl QuantParams {
    pub fn real_scale(&self) -> f64 {
        debug_assert!(self.k < 63);
        self.m as f64 / (1u64 << self.k) as f64
    }

    /// Largest representable quantized value, `2^bitwidth − 1`.
    pub fn qmax(&self) -> u32 {
        if self.bitwidth >= 32 {
            u32::MAX
        } else {
            (1u32 << self.bitwidth) - 1
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("degenerate calibration range [{min}, {max}]")]
    DegenerateRange { min: f64, max: f64 },
    #[error("accumulator overflow: {0}")]
    AccumulatorOverflow(String),
}

/// Round half toward +∞, the integer add-then-shift rounding.
pub fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

/// Approximate a positive real scale as `(m, k)` with `m` the best 31-bit
/// multiplier: relative error ≤ 2⁻³⁰.
pub fn approx_scale(scale: f64) -> (u32, u32) {
    assert!(scale > 0.0 && scale.is_finite(), "scale must be positive");
    let mut k = 0u32;
    let mut m_f = scale;
    while m_f < (1u64 << 30) as f64 && k < 62 {
        m_f *= 2.0;
        k += 1;
    }
    let m = round_half_up(m_f).min((u32::MAX >> 1) as f64) as u32; // < 2^31
    (m.max(1), k)
}

/// Calibrate asymmetric affine parameters over `[min_val, max_val]`. The
/// range is widened to include zero so the zero point is exact.
pub fn calibrate(min_val: f64, max_val: f64, bitwidth: u32) -> Result<QuantParams, QuantError> {
    let min_val = min_val.min(0.0);
    let max_val = max_val.max(0.0);
    if !min_val.is_finite() || !max_val.is_finite() || max_val <= min_val {
        return Err(QuantError::DegenerateRange {
            min: min_val,
            max: max_val,
        });
    }
    let levels = ((1u64 << bitwidth) - 1) as f64;
    let real_scale = (max_val - min_val) / levels;
    let z = round_half_up(-min_val / real_scale) as u32;
    let (m, k) = approx_scale(real_scale);
    Ok(QuantParams { bitwidth, m, k, z })
}

/// `clamp(round(x/scale) + z, 0, 2^bitwidth − 1)`; saturating, never errors.
pub fn quantize(x: f64, qp: &QuantParams) -> u32 {
    let q = round_half_up(x / qp.real_scale()) + qp.z as f64;
    q.clamp(0.0, qp.qmax() as f64) as u32
}

/// Inverse affine map back to reals: `(q − z) · scale`.
pub fn dequantize(q: u32, qp: &QuantParams) -> f64 {
    (q as f64 - qp.z as f64) * qp.real_scale()
}

/// Rescale a signed accumulator to the output format entirely in integers:
/// `clamp(((acc·m + 2^(k−1)) >> k) + z, 0, 2^bitwidth − 1)`.
///
/// `qp` encodes the *combined* scale (input·weight/output) as `m, k` and the
/// output zero point as `z`.
pub fn requantize(acc: i32, qp: &QuantParams) -> Result<u32, QuantError> {
    requantize_wide(acc as i64, qp)
}

/// [`requantize`] for accumulators already held in 64 bits; errors when
/// `acc·m` would not fit the 63-bit headroom.
pub fn requantize_wide(acc: i64, qp: &QuantParams) -> Result<u32, QuantError> {
    let prod = acc as i128 * qp.m as i128;
    if prod.unsigned_abs() >> 63 != 0 {
        return Err(QuantError::AccumulatorOverflow(format!(
            "acc {acc} × m {} exceeds 63-bit headroom",
            qp.m
        )));
    }
    let rounded = if qp.k == 0 {
        prod
    } else {
        (prod + (1i128 << (qp.k - 1))) >> qp.k
    };
    let shifted = rounded + qp.z as i128;
    Ok(shifted.clamp(0, qp.qmax() as i128) as u32)
}

/// Quantize-then-dequantize: projects onto the representable grid. Forward
/// only — the trainer backpropagates through it as identity.
pub fn fake_quant(x: f64, qp: &QuantParams) -> f64 {
    dequantize(quantize(x, qp), qp)
}

/// Quantized self-loop position: the zero displacement normalizes to
/// `(0, 0.5)`, so its integer form under an input format is fixed per layer.
pub fn pn_self_quantized(qp_in: &QuantParams) -> [u16; 2] {
    [quantize(0.0, qp_in) as u16, quantize(0.5, qp_in) as u16]
}

/// One folded convolution layer in integer form.
///
/// Weights are 8-bit unsigned with zero point `qp_w.z`; activations
/// (including the two position dims appended to each candidate) are unsigned
/// in the layer's input format `qp_in`. The bias is pre-scaled onto the
/// accumulator grid `s_in·s_w`. `qp_requant` holds the combined rescale
/// `s_in·s_w / s_out` plus the output zero point; `qp_out` is the plain
/// output-activation format (used to dequantize downstream).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim × (in_dim + 2)` quantized weights.
    pub w_int: Vec<u16>,
    /// Bias on the accumulator grid, `round(b / (s_in·s_w))`.
    pub b_acc: Vec<i64>,
    pub qp_in: QuantParams,
    pub qp_w: QuantParams,
    pub qp_requant: QuantParams,
    pub qp_out: QuantParams,
}

impl QuantizedLayer {
    pub fn ext_in(&self) -> usize {
        self.in_dim + 2
    }

    /// Integer dot product of one weight row with one candidate input:
    /// `Σ_j (w_int − z_w)(x_int − z_in)`.
    pub fn acc_row(&self, o: usize, x: &[u16]) -> i64 {
        debug_assert_eq!(x.len(), self.ext_in());
        let row = &self.w_int[o * self.ext_in()..(o + 1) * self.ext_in()];
        let z_w = self.qp_w.z as i64;
        let z_in = self.qp_in.z as i64;
        let mut acc = 0i64;
        for (w, x) in row.iter().zip(x) {
            acc += (*w as i64 - z_w) * (*x as i64 - z_in);
        }
        acc
    }

    /// Max-aggregate + bias + requantize + integer ReLU over candidate input
    /// vectors (self-loop first). The bias is common to every candidate, so
    /// it is added once after the max — identical to per-candidate addition.
    /// Requantization is monotone, so taking the max on accumulators equals
    /// taking it after requantization.
    pub fn forward_max(&self, candidates: &[Vec<u16>]) -> Result<Vec<u16>, QuantError> {
        debug_assert!(!candidates.is_empty());
        let mut out = Vec::with_capacity(self.out_dim);
        for o in 0..self.out_dim {
            let mut best = i64::MIN;
            for cand in candidates {
                best = best.max(self.acc_row(o, cand));
            }
            let acc = best + self.b_acc[o];
            let acc32 = i32::try_from(acc).map_err(|_| {
                QuantError::AccumulatorOverflow(format!(
                    "accumulator {acc} exceeds 32 bits in output row {o}"
                ))
            })?;
            let y = requantize(acc32, &self.qp_requant)?;
            out.push(y.max(self.qp_requant.z) as u16); // integer ReLU
        }
        Ok(out)
    }

    /// Calibration-time guarantee that no input can overflow the 32-bit
    /// accumulator: worst-case `Σ_j |w−z_w|·max(z_in, qmax−z_in) + |b|`.
    pub fn check_accumulator_headroom(&self) -> Result<(), QuantError> {
        let z_in = self.qp_in.z as i64;
        let x_mag = z_in.max(self.qp_in.qmax() as i64 - z_in);
        for o in 0..self.out_dim {
            let row = &self.w_int[o * self.ext_in()..(o + 1) * self.ext_in()];
            let sum: i64 = row
                .iter()
                .map(|&w| (w as i64 - self.qp_w.z as i64).abs() * x_mag)
                .sum();
            let worst = sum + self.b_acc[o].abs();
            if worst > i32::MAX as i64 {
                return Err(QuantError::AccumulatorOverflow(format!(
                    "worst-case accumulator {worst} of output row {o} exceeds 32 bits \
                     (mis-sized bitwidths)"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn calibrate_unit_range() {
        let qp = calibrate(0.0, 1.0, 8).unwrap();
        assert_eq!(qp.z, 0);
        let rel = (qp.real_scale() - 1.0 / 255.0).abs() / (1.0 / 255.0);
        assert!(rel <= 2f64.powi(-15), "scale error {rel}");
    }

    #[test]
    fn calibrate_symmetric_range_rounds_zero_point_half_up() {
        let qp = calibrate(-1.0, 1.0, 8).unwrap();
        assert_eq!(qp.z, 128); // round(127.5) half-up
        let target = 2.0 / 255.0;
        assert!((qp.real_scale() - target).abs() / target <= 2f64.powi(-15));
    }

    #[test]
    fn calibrate_rejects_degenerate_range() {
        assert!(matches!(
            calibrate(0.0, 0.0, 8),
            Err(QuantError::DegenerateRange { .. })
        ));
    }

    #[test]
    fn zero_quantizes_to_zero_point() {
        for (lo, hi, bw) in [
            (-1.0, 1.0, 8),
            (-0.3, 2.7, 16),
            (0.0, 5.0, 8),
            (-4.0, 0.0, 8),
        ] {
            let qp = calibrate(lo, hi, bw).unwrap();
            assert_eq!(quantize(0.0, &qp), qp.z, "range [{lo},{hi}] bw {bw}");
        }
    }

    #[test]
    fn quantize_saturates_and_hits_full_scale() {
        let qp = calibrate(0.0, 1.0, 8).unwrap();
        assert_eq!(quantize(1.0, &qp), 255);
        assert_eq!(quantize(5.0, &qp), 255);
        assert_eq!(quantize(-5.0, &qp), 0);
    }

    #[test]
    fn requantize_zero_accumulator_gives_zero_point() {
        let qp = QuantParams {
            bitwidth: 8,
            m: 1 << 30,
            k: 35,
            z: 17,
        };
        assert_eq!(requantize(0, &qp).unwrap(), 17);
    }

    #[test]
    fn requantize_divides_by_256() {
        // m/2^k = 2^20/256 / 2^20 = 1/256.
        let qp = QuantParams {
            bitwidth: 8,
            m: 1 << 20,
            k: 28,
            z: 0,
        };
        assert_eq!(requantize(1000, &qp).unwrap(), 4); // round(3.90625)
        assert_eq!(requantize(128, &qp).unwrap(), 1); // exact half rounds up
        assert_eq!(requantize(127, &qp).unwrap(), 0);
    }

    #[test]
    fn requantize_detects_headroom_overflow() {
        let qp = QuantParams {
            bitwidth: 8,
            m: u32::MAX >> 1,
            k: 10,
            z: 0,
        };
        assert!(matches!(
            requantize_wide(i64::MAX / 2, &qp),
            Err(QuantError::AccumulatorOverflow(_))
        ));
    }

    proptest! {
        /// Integer requantization tracks the float reference within one step.
        #[test]
        fn requantize_matches_float_reference(
            acc in -2_000_000i32..2_000_000,
            scale_num in 1u32..5000,
            scale_den in 1u32..5000,
            z in 0u32..200,
        ) {
            let scale = scale_num as f64 / scale_den as f64 / 64.0;
            let (m, k) = approx_scale(scale);
            let qp = QuantParams { bitwidth: 8, m, k, z };
            let int = requantize(acc, &qp).unwrap() as f64;
            let float_ref = round_half_up(acc as f64 * scale + z as f64)
                .clamp(0.0, 255.0);
            prop_assert!((int - float_ref).abs() <= 1.0,
                "acc {acc} scale {scale}: integer {int} vs float {float_ref}");
        }

        /// quantize∘dequantize is idempotent: grid values are fixed points.
        #[test]
        fn fake_quant_is_idempotent(
            x in -3.0f64..3.0,
            lo in -2.0f64..-0.01,
            hi in 0.01f64..2.0,
            bw in prop_oneof![Just(8u32), Just(16u32)],
        ) {
            let qp = calibrate(lo, hi, bw).unwrap();
            let once = fake_quant(x, &qp);
            prop_assert_eq!(once, fake_quant(once, &qp));
            // Rounding bound on the clamped value.
            let clamped = x.clamp(dequantize(0, &qp), dequantize(qp.qmax(), &qp));
            prop_assert!((once - clamped).abs() <= qp.real_scale() / 2.0 + 1e-12);
        }
    }

    #[test]
    fn fake_quant_rounds_half_up() {
        // Best 31-bit approximation of 1/255 (2^38/255 rounds *down*, so the
        // stored scale is a hair below 1/255): 0.5/scale lands just above
        // 127.5 and half-up rounding picks grid point 128, not 127.
        let (m, k) = approx_scale(1.0 / 255.0);
        let qp = QuantParams {
            bitwidth: 8,
            m,
            k,
            z: 0,
        };
        assert_eq!(quantize(0.5, &qp), 128);
        let got = fake_quant(0.5, &qp);
        let want = 128.0 * qp.real_scale();
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
    }

    #[test]
    fn approx_scale_is_31_bit_accurate() {
        for scale in [1.0 / 255.0, 2.0 / 65535.0, 0.37, 1.0, 12.5, 1e-6] {
            let (m, k) = approx_scale(scale);
            let rel = (m as f64 / (k as f64).exp2() - scale).abs() / scale;
            assert!(rel <= 2f64.powi(-15), "scale {scale}: rel error {rel}");
            assert!(m >= 1 && (m as u64) < (1u64 << 31));
        }
    }

    fn toy_quant_layer() -> QuantizedLayer {
        let qp_in = calibrate(0.0, 1.0, 8).unwrap();
        let qp_w = calibrate(-1.0, 1.0, 8).unwrap();
        let qp_out = calibrate(0.0, 2.0, 8).unwrap();
        let combined = qp_in.real_scale() * qp_w.real_scale() / qp_out.real_scale();
        let (m, k) = approx_scale(combined);
        let w = [0.5f64, -0.25, 0.125]; // 1 output row, in_dim 1 (+2 pos)
        QuantizedLayer {
            in_dim: 1,
            out_dim: 1,
            w_int: w.iter().map(|&x| quantize(x, &qp_w) as u16).collect(),
            b_acc: vec![round_half_up(0.1 / (qp_in.real_scale() * qp_w.real_scale())) as i64],
            qp_in,
            qp_w,
            qp_requant: QuantParams {
                bitwidth: 8,
                m,
                k,
                z: qp_out.z,
            },
            qp_out,
        }
    }

    #[test]
    fn integer_layer_tracks_float_math() {
        let layer = toy_quant_layer();
        layer.check_accumulator_headroom().unwrap();
        let xs = [[10u16, 100, 200], [0, 0, 0], [255, 255, 255], [7, 93, 41]];
        for x in xs {
            let y_int = layer.forward_max(&[x.to_vec()]).unwrap()[0] as f64;
            // Float twin from the dequantized tensors.
            let xf: Vec<f64> = x
                .iter()
                .map(|&q| dequantize(q as u32, &layer.qp_in))
                .collect();
            let wf: Vec<f64> = layer
                .w_int
                .iter()
                .map(|&q| dequantize(q as u32, &layer.qp_w))
                .collect();
            let bf = layer.b_acc[0] as f64 * layer.qp_in.real_scale() * layer.qp_w.real_scale();
            let yf: f64 = wf.iter().zip(&xf).map(|(w, x)| w * x).sum::<f64>() + bf;
            let y_ref = quantize(yf.max(0.0), &layer.qp_out) as f64;
            assert!(
                (y_int - y_ref).abs() <= 1.0,
                "integer {y_int} vs float reference {y_ref}"
            );
        }
    }

    #[test]
    fn max_commutes_with_requantization() {
        let layer = toy_quant_layer();
        let cands: Vec<Vec<u16>> = vec![vec![3, 9, 27], vec![200, 4, 90], vec![55, 255, 0]];
        let joint = layer.forward_max(&cands).unwrap()[0];
        let singles: Vec<u16> = cands
            .iter()
            .map(|c| layer.forward_max(std::slice::from_ref(c)).unwrap()[0])
            .collect();
        assert_eq!(joint, *singles.iter().max().unwrap());
    }

    #[test]
    fn headroom_check_flags_missized_layer() {
        let mut layer = toy_quant_layer();
        // 16-bit inputs with full-magnitude weights on a wide row:
        // 132 · 255 · 65535 ≈ 2.21e9 > i32::MAX.
        layer.qp_in = calibrate(0.0, 1.0, 16).unwrap();
        layer.qp_w = calibrate(0.0, 2.0, 8).unwrap(); // z_w = 0
        layer.in_dim = 130;
        layer.w_int = vec![255u16; 132];
        layer.b_acc = vec![0];
        assert!(matches!(
            layer.check_accumulator_headroom(),
            Err(QuantError::AccumulatorOverflow(_))
        ));
    }
}
