//! Weight binarization: sign quantization with a straight-through gradient,
//! the tanh-based progressive quantizer whose backward is its exact
//! derivative, dual scaling, and merging of scales for inference.

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomGrad, Graph, Var};
use crate::error::{dim_err, domain_err, Result};
use crate::packed::PackedBinaryMatrix;
use crate::tensor::Tensor;

/// Substitute for an all-zero row's analytic scale.
pub const ZERO_SCALE_EPS: f64 = 1e-12;

/// How a layer turns master weights into the weights used in its matmul.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    #[default]
    FullPrecision,
    /// Sign forward, straight-through backward.
    SignSte,
    /// Sign forward, progressive-derivative backward (IR-Net-style baseline).
    SignProgressiveGrad,
    /// Progressive forward and its exact derivative in backward.
    Progressive,
}

impl QuantMode {
    pub fn is_binary(self) -> bool {
        !matches!(self, QuantMode::FullPrecision)
    }
}

/// Which per-row scales multiply the quantized weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Analytic mean-absolute scale only; the learnable scale is frozen at 1.
    Analytic,
    /// Learnable scale only, initialized from the analytic scale.
    Learned,
    /// Learnable scale times analytic scale; learnable starts at 1.
    #[default]
    Dual,
}

/// Mean absolute value of a weight row.
pub fn scale_sa(row: &[f64]) -> Result<f64> {
    if row.is_empty() {
        return Err(domain_err!("analytic scale of an empty row"));
    }
    Ok(row.iter().map(|x| x.abs()).sum::<f64>() / row.len() as f64)
}

/// Per-row analytic scales of a 2-D weight.
pub fn row_scales(w: &Tensor) -> Result<Vec<f64>> {
    let (rows, _) = w.as_matrix_dims();
    (0..rows).map(|i| scale_sa(w.row(i))).collect()
}

/// `+1` for `x ≥ 0`, `−1` otherwise.
#[inline]
pub fn sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// `S[i]·sign(W[i,j])`.
pub fn sign_quantize(w: &Tensor, scale: &[f64]) -> Result<Tensor> {
    let (rows, cols) = w.as_matrix_dims();
    if scale.len() != rows {
        return Err(dim_err!("{} scales for {} rows", scale.len(), rows));
    }
    let mut out = w.data().to_vec();
    for (row, &s) in out.chunks_mut(cols.max(1)).zip(scale) {
        row.iter_mut().for_each(|v| *v = s * sign(*v));
    }
    Tensor::new(w.shape(), out)
}

#[inline]
pub(crate) fn f_unchecked(x: f64, t: f64) -> f64 {
    (t * x).tanh() / t.tanh()
}

#[inline]
pub(crate) fn f_grad_unchecked(x: f64, t: f64) -> f64 {
    // sech²(u) = 4e^{-2|u|} / (1 + e^{-2|u|})²
    let e = (-2.0 * (t * x).abs()).exp();
    t * 4.0 * e / ((1.0 + e) * (1.0 + e) * t.tanh())
}

fn check_t(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(domain_err!(
            "temperature must be positive and finite, got {t}"
        ))
    }
}

/// `tanh(t·x) / tanh(t)`.
pub fn progressive_f(x: f64, t: f64) -> Result<f64> {
    check_t(t)?;
    Ok(f_unchecked(x, t))
}

/// `t·(1 − tanh²(t·x)) / tanh(t)`, the derivative of [`progressive_f`] in `x`.
pub fn progressive_f_grad(x: f64, t: f64) -> Result<f64> {
    check_t(t)?;
    Ok(f_grad_unchecked(x, t))
}

/// Sign with the straight-through estimator: upstream gradient passes unchanged.
pub struct SignSte;

impl CustomGrad for SignSte {
    fn forward(&self, input: &Tensor) -> Tensor {
        input.map(sign)
    }
    fn backward(&self, _input: &Tensor, _output: &Tensor, upstream: &Tensor) -> Tensor {
        upstream.clone()
    }
}

/// Sign forward with the progressive derivative as surrogate gradient.
pub struct SignProgressiveGrad {
    pub t: f64,
}

impl CustomGrad for SignProgressiveGrad {
    fn forward(&self, input: &Tensor) -> Tensor {
        input.map(sign)
    }
    fn backward(&self, input: &Tensor, _output: &Tensor, upstream: &Tensor) -> Tensor {
        progressive_backward(input, upstream, self.t)
    }
}

/// Progressive function with its exact derivative in backward.
pub struct Progressive {
    pub t: f64,
}

impl CustomGrad for Progressive {
    fn forward(&self, input: &Tensor) -> Tensor {
        let t = self.t;
        input.map(|x| f_unchecked(x, t))
    }
    fn backward(&self, input: &Tensor, _output: &Tensor, upstream: &Tensor) -> Tensor {
        progressive_backward(input, upstream, self.t)
    }
}

fn progressive_backward(input: &Tensor, upstream: &Tensor, t: f64) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| g * f_grad_unchecked(x, t))
        .collect();
    Tensor::new(input.shape(), data).expect("same shape")
}

/// Analytic scales with zero rows replaced by [`ZERO_SCALE_EPS`].
pub fn guarded_row_scales(w: &Tensor, name: &str) -> Result<Vec<f64>> {
    let mut sa = row_scales(w)?;
    for (i, s) in sa.iter_mut().enumerate() {
        if *s == 0.0 {
            log::warn!("{name}: row {i} is all zero; using analytic scale {ZERO_SCALE_EPS:e}");
            *s = ZERO_SCALE_EPS;
        }
    }
    Ok(sa)
}

/// Records the quantized weight of one layer on `g`.
///
/// `w` is the master weight node and `s_l` the learnable scale node. The
/// analytic scale is read from the current value of `w` and enters the graph
/// as a constant.
pub fn quantized_weight(
    g: &mut Graph,
    w: Var,
    s_l: Var,
    mode: QuantMode,
    scale_mode: ScaleMode,
    t: f64,
) -> Result<Var> {
    if mode == QuantMode::FullPrecision {
        return Ok(w);
    }
    if matches!(
        mode,
        QuantMode::Progressive | QuantMode::SignProgressiveGrad
    ) {
        check_t(t)?;
    }
    let sa = guarded_row_scales(g.value(w), "weight")?;
    let inv = g.constant(Tensor::from_vec(sa.iter().map(|s| 1.0 / s).collect()));
    let x = g.scale_rows(w, inv)?;
    let q = match mode {
        QuantMode::SignSte => g.custom(x, Box::new(SignSte)),
        QuantMode::SignProgressiveGrad => g.custom(x, Box::new(SignProgressiveGrad { t })),
        QuantMode::Progressive => g.custom(x, Box::new(Progressive { t })),
        QuantMode::FullPrecision => unreachable!(),
    };
    match scale_mode {
        ScaleMode::Learned => g.scale_rows(q, s_l),
        ScaleMode::Analytic | ScaleMode::Dual => {
            let sa = g.constant(Tensor::from_vec(sa));
            let y = g.scale_rows(q, sa)?;
            if scale_mode == ScaleMode::Dual {
                g.scale_rows(y, s_l)
            } else {
                Ok(y)
            }
        }
    }
}

/// A linear layer with full-precision master weights and binarization state.
#[derive(Clone, Debug, PartialEq)]
pub struct BinLinear {
    /// Master weights, `[out × in]`.
    pub weight: Tensor,
    /// Learnable per-output-row scale, `[out]`.
    pub s_l: Tensor,
    /// Folded per-input-channel scale applied to the input, `[in]`.
    pub input_scale: Option<Tensor>,
    pub mode: QuantMode,
    pub scale_mode: ScaleMode,
}

impl BinLinear {
    pub fn new(weight: Tensor) -> Self {
        let rows = weight.rows();
        Self {
            weight,
            s_l: Tensor::full(&[rows], 1.0),
            input_scale: None,
            mode: QuantMode::FullPrecision,
            scale_mode: ScaleMode::Dual,
        }
    }

    pub fn out_features(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_features(&self) -> usize {
        self.weight.cols()
    }

    /// Switches quantizer and scale scheme. `Learned` re-seeds `S_l` from the
    /// analytic scale; the other schemes reset it to 1.
    pub fn set_quantization(&mut self, mode: QuantMode, scale_mode: ScaleMode) -> Result<()> {
        self.mode = mode;
        self.scale_mode = scale_mode;
        let sl = match scale_mode {
            ScaleMode::Learned => row_scales(&self.weight)?,
            _ => vec![1.0; self.out_features()],
        };
        self.s_l = Tensor::from_vec(sl);
        Ok(())
    }

    /// Whether `S_l` is a trainable parameter in the current scheme.
    pub fn s_l_trainable(&self) -> bool {
        self.mode.is_binary() && self.scale_mode != ScaleMode::Analytic
    }

    /// The dense weight actually used in the matmul at temperature `t`.
    pub fn effective_weight(&self, t: f64) -> Result<Tensor> {
        let mut g = Graph::new();
        let w = g.constant(self.weight.clone());
        let s = g.constant(self.s_l.clone());
        let out = quantized_weight(&mut g, w, s, self.mode, self.scale_mode, t)?;
        Ok(g.value(out).clone())
    }

    /// Per-row scale that multiplies `sign(W)` once training is over.
    pub fn merged_scale(&self) -> Result<Vec<f64>> {
        let sa = row_scales(&self.weight)?;
        Ok(match self.scale_mode {
            ScaleMode::Analytic => sa,
            ScaleMode::Learned => self.s_l.data().to_vec(),
            ScaleMode::Dual => sa.iter().zip(self.s_l.data()).map(|(a, l)| a * l).collect(),
        })
    }
}

/// `S_l·S_a·F(W/S_a, t)` row by row, for a layer in progressive mode.
pub fn progressive_forward(layer: &BinLinear, t: f64) -> Result<Tensor> {
    if layer.mode != QuantMode::Progressive {
        return Err(domain_err!(
            "layer is in {:?} mode, not progressive",
            layer.mode
        ));
    }
    layer.effective_weight(t)
}

/// Merges the learnable and analytic scales and packs the sign bits.
pub fn merge_scales(layer: &BinLinear) -> Result<PackedBinaryMatrix> {
    let scale = layer.merged_scale()?;
    PackedBinaryMatrix::pack(&layer.weight, &scale)
}

/// Relative Frobenius error `‖W − W_q‖ / ‖W‖`.
pub fn quantization_error(w: &Tensor, w_q: &Tensor) -> Result<f64> {
    if w.shape() != w_q.shape() {
        return Err(dim_err!("{:?} vs {:?}", w.shape(), w_q.shape()));
    }
    let norm = w.l2_norm();
    if norm == 0.0 {
        return Err(domain_err!("quantization error of a zero-norm tensor"));
    }
    let diff: f64 = w
        .data()
        .iter()
        .zip(w_q.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(diff.sqrt() / norm)
}
