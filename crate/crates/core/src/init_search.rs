//! Binary-aware initialization: per-input-channel scales `S_t` searched end
//! to end on the autoregressive loss while all weights stay frozen, plus a
//! layerwise activation-aware grid search used as a baseline.

use std::collections::BTreeMap;

use crate::binquant::{row_scales, sign, QuantMode, ScaleMode};
use crate::error::{dim_err, domain_err, Result};
use crate::model::{ForwardOptions, TinyLm, Trainable};
use crate::optim::AdamW;
use crate::tensor::Tensor;

/// Learning rate of the end-to-end scale search.
pub const SEARCH_LR: f64 = 1e-2;

/// Per-layer input-channel scales, stored as their logarithms so that `S_t = exp(u) > 0`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct InitScales {
    log: BTreeMap<String, Tensor>,
}

impl InitScales {
    /// `S_t ≡ 1` for every block linear of `model`.
    pub fn ones(model: &TinyLm) -> Self {
        let log = model
            .linears()
            .into_iter()
            .map(|(n, l)| (n, Tensor::zeros(&[l.in_features()])))
            .collect();
        Self { log }
    }

    pub fn log_scale(&self, name: &str) -> Option<&Tensor> {
        self.log.get(name)
    }

    pub fn set_log_scale(&mut self, name: &str, u: Tensor) {
        self.log.insert(name.to_string(), u);
    }

    /// `(layer, S_t)` pairs.
    pub fn scales(&self) -> Vec<(String, Tensor)> {
        self.log
            .iter()
            .map(|(n, u)| (n.clone(), u.map(f64::exp)))
            .collect()
    }

    pub fn log_scales(&self) -> &BTreeMap<String, Tensor> {
        &self.log
    }

    pub fn from_log_scales(log: BTreeMap<String, Tensor>) -> Self {
        Self { log }
    }

    pub fn is_empty(&self) -> bool {
        self.log.is_empty()
    }
}

/// Result of [`search_init`].
#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub scales: InitScales,
    /// Batch loss before each update.
    pub step_losses: Vec<f64>,
    /// Mean loss over all batches with `S_t ≡ 1`.
    pub initial_objective: f64,
    /// Mean loss over all batches with the searched scales.
    pub final_objective: f64,
}

fn sign_model(model: &TinyLm) -> Result<TinyLm> {
    let mut m = model.clone();
    m.set_quantization(QuantMode::SignSte, ScaleMode::Analytic)?;
    Ok(m)
}

/// Mean sign-quantized loss over `batches` with the given scales.
pub fn search_objective(
    model: &TinyLm,
    scales: &InitScales,
    batches: &[Vec<usize>],
    batch: usize,
    seq: usize,
) -> Result<f64> {
    let m = sign_model(model)?;
    let mut total = 0.0;
    for b in batches {
        let opts = ForwardOptions {
            init_scales: Some(scales),
            ..Default::default()
        };
        let (fp, loss) = m.loss_pass(b, batch, seq, opts)?;
        total += fp.graph.value(loss).data()[0];
    }
    Ok(total / batches.len() as f64)
}

/// Searches `S_t` for `steps` optimizer steps, cycling through `batches`.
///
/// Each batch holds `batch` windows of `seq + 1` tokens. Weights are never
/// modified; the forward binarizes `W·S_t⁻¹` with sign and multiplies the
/// layer input by `S_t`. Since `sign(W·S_t⁻¹) = sign(W)`, the gradient with
/// respect to `u = ln S_t` flows through the input scaling and the analytic
/// scale only.
pub fn search_init(
    model: &TinyLm,
    batches: &[Vec<usize>],
    batch: usize,
    seq: usize,
    steps: usize,
    lr: f64,
) -> Result<SearchOutcome> {
    if batches.is_empty() {
        return Err(domain_err!("init search needs at least one batch"));
    }
    let m = sign_model(model)?;
    let mut scales = InitScales::ones(model);
    let mut opt = AdamW::new(0.0);
    let initial_objective = search_objective(model, &scales, batches, batch, seq)?;
    let mut step_losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let opts = ForwardOptions {
            trainable: Trainable::InitScales,
            init_scales: Some(&scales),
            ..Default::default()
        };
        let (mut fp, loss) = m.loss_pass(&batches[step % batches.len()], batch, seq, opts)?;
        step_losses.push(fp.graph.value(loss).data()[0]);
        fp.graph.backward(loss)?;
        let grads: Vec<(String, Vec<f64>)> = fp
            .trainable
            .iter()
            .map(|(n, v)| {
                (
                    n.clone(),
                    fp.graph.grad(*v).map(<[f64]>::to_vec).unwrap_or_default(),
                )
            })
            .collect();
        opt.begin_step();
        for (name, g) in grads {
            let u = scales.log.get_mut(&name).expect("bound scale exists");
            opt.update(&name, u.data_mut(), &g, lr, false)?;
        }
    }
    let final_objective = search_objective(model, &scales, batches, batch, seq)?;
    Ok(SearchOutcome {
        scales,
        step_losses,
        initial_objective,
        final_objective,
    })
}

/// Outcome of the layerwise grid search.
#[derive(Clone, Debug, PartialEq)]
pub struct AwqSearch {
    pub alpha: f64,
    pub scale: Vec<f64>,
    pub error: f64,
    /// Error of plain binarization (`α = 0`).
    pub baseline_error: f64,
}

/// `‖B(W·S⁻¹)·(S·A) − W·A‖` for one candidate scale, with `A` given row-major as `[n × in]`.
pub fn scaled_binarization_error(w: &Tensor, acts: &Tensor, s: &[f64]) -> Result<f64> {
    let (rows, cols) = w.as_matrix_dims();
    let (n, ac) = acts.as_matrix_dims();
    if ac != cols || s.len() != cols {
        return Err(dim_err!(
            "weight {:?}, activations {:?}, {} scales",
            w.shape(),
            acts.shape(),
            s.len()
        ));
    }
    let mut scaled = w.clone();
    for row in scaled.data_mut().chunks_mut(cols) {
        row.iter_mut().zip(s).for_each(|(v, si)| *v /= si);
    }
    let sa = row_scales(&scaled)?;
    let mut err = 0.0;
    for r in 0..n {
        let a = acts.row(r);
        for i in 0..rows {
            let exact: f64 = w.row(i).iter().zip(a).map(|(x, y)| x * y).sum();
            let approx: f64 = scaled
                .row(i)
                .iter()
                .zip(a)
                .zip(s)
                .map(|((x, y), si)| sa[i] * sign(*x) * y * si)
                .sum();
            err += (approx - exact).powi(2);
        }
    }
    Ok(err.sqrt())
}

/// Grid search over `α ∈ {0, 0.05, …, 1}` with `S = (mean|A| per channel)^α`.
pub fn awq_layerwise_scale(w: &Tensor, acts: &Tensor) -> Result<AwqSearch> {
    let (n, cols) = acts.as_matrix_dims();
    if acts.numel() == 0 || n == 0 {
        return Err(domain_err!("empty calibration set"));
    }
    let mean_abs: Vec<f64> = (0..cols)
        .map(|j| {
            let m = (0..n).map(|r| acts.row(r)[j].abs()).sum::<f64>() / n as f64;
            if m > 0.0 {
                m
            } else {
                1.0
            }
        })
        .collect();
    let mut best: Option<AwqSearch> = None;
    let mut baseline = 0.0;
    for k in 0..=20 {
        let alpha = k as f64 * 0.05;
        let s: Vec<f64> = mean_abs.iter().map(|m| m.powf(alpha)).collect();
        let err = scaled_binarization_error(w, acts, &s)?;
        if k == 0 {
            baseline = err;
        }
        if best.as_ref().map_or(true, |b| err < b.error) {
            best = Some(AwqSearch {
                alpha,
                scale: s,
                error: err,
                baseline_error: 0.0,
            });
        }
    }
    let mut best = best.expect("grid is non-empty");
    best.baseline_error = baseline;
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> TinyLm {
        let cfg = ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 8,
        };
        TinyLm::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    fn batches(k: usize, batch: usize, seq: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k)
            .map(|_| {
                (0..batch * (seq + 1))
                    .map(|i| (i * 3 + rng.gen_range(0..2)) % 16)
                    .collect()
            })
            .collect()
    }

    #[test]
    fn zero_steps_gives_unit_scales() {
        let m = tiny();
        let out = search_init(&m, &batches(2, 2, 6, 1), 2, 6, 0, SEARCH_LR).unwrap();
        assert!(out
            .scales
            .scales()
            .iter()
            .all(|(_, s)| s.data().iter().all(|&v| v == 1.0)));
        assert_eq!(out.initial_objective, out.final_objective);
    }

    #[test]
    fn unit_scales_reproduce_plain_sign_loss() {
        let m = tiny();
        let b = batches(1, 2, 6, 2);
        let with = search_objective(&m, &InitScales::ones(&m), &b, 2, 6).unwrap();
        let mut plain = m.clone();
        plain
            .set_quantization(QuantMode::SignSte, ScaleMode::Analytic)
            .unwrap();
        let (fp, loss) = plain
            .loss_pass(&b[0], 2, 6, ForwardOptions::default())
            .unwrap();
        assert_eq!(with, fp.graph.value(loss).data()[0]);
    }

    #[test]
    fn search_keeps_weights_and_rejects_empty() {
        let m = tiny();
        let before = m.clone();
        let _ = search_init(&m, &batches(2, 2, 6, 3), 2, 6, 5, SEARCH_LR).unwrap();
        assert_eq!(m, before);
        assert!(search_init(&m, &[], 2, 6, 5, SEARCH_LR).is_err());
    }

    #[test]
    fn search_gradient_matches_finite_differences() {
        let m = sign_model(&tiny()).unwrap();
        let b = batches(1, 2, 6, 5);
        let mut scales = InitScales::ones(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for name in m.linear_names() {
            let n = m.linear(&name).unwrap().in_features();
            let u: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect();
            scales.set_log_scale(&name, Tensor::from_vec(u));
        }
        let opts = ForwardOptions {
            trainable: Trainable::InitScales,
            init_scales: Some(&scales),
            ..Default::default()
        };
        let (mut fp, loss) = m.loss_pass(&b[0], 2, 6, opts).unwrap();
        fp.graph.backward(loss).unwrap();
        let (name, var) = fp.trainable[2].clone();
        let grad = fp.graph.grad(var).unwrap().to_vec();
        let h = 1e-6;
        for j in 0..grad.len() {
            let eval = |d: f64| {
                let mut s = scales.clone();
                let mut u = s.log_scale(&name).unwrap().clone();
                u.data_mut()[j] += d;
                s.set_log_scale(&name, u);
                search_objective(&m, &s, &b, 2, 6).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!(
                (fd - grad[j]).abs() < 1e-6 * (1.0 + fd.abs()),
                "{j}: {fd} vs {}",
                grad[j]
            );
        }
    }

    #[test]
    fn awq_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut w = Tensor::randn(&[8, 12], 1.0, &mut rng);
        let mut acts = Tensor::randn(&[64, 12], 1.0, &mut rng);
        for r in 0..64 {
            acts.row_mut(r)[3] *= 100.0;
        }
        // the dominant channel also carries above-average weights
        for r in 0..8 {
            w.row_mut(r)[3] *= 3.0;
        }
        let res = awq_layerwise_scale(&w, &acts).unwrap();
        let plain = scaled_binarization_error(&w, &acts, &[1.0; 12]).unwrap();
        assert_eq!(res.baseline_error, plain);
        assert!(res.error <= res.baseline_error);
        assert!(res.error < plain, "{} vs {}", res.error, plain);
        assert!(res.alpha > 0.0);
        assert!(awq_layerwise_scale(&w, &Tensor::zeros(&[0, 12])).is_err());
    }
}
