//! Effective-bit memory and bit-level cycle estimates.
//!
//! Memory counts block linears at their average bit width and every other
//! parameter at 16 bits. A multiply-accumulate between operands of `a` and
//! `b` bits costs `a·b` cycles.

use serde::{Deserialize, Serialize};

use crate::error::{domain_err, Result};
use crate::model::ModelConfig;

/// Bytes per reported gigabyte.
pub const BYTES_PER_GB: f64 = 1e9;
/// Storage and activation width of everything that is not a quantized linear.
pub const BASE_BITS: f64 = 16.0;

/// `count` linear layers of shape `rows × cols`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearGroup {
    pub name: String,
    pub rows: u64,
    pub cols: u64,
    pub count: u64,
}

impl LinearGroup {
    pub fn params(&self) -> u64 {
        self.rows * self.cols * self.count
    }
}

/// Activation-by-activation attention matmuls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSpec {
    pub layers: u64,
    pub d_model: u64,
    /// Context length attended per generated token.
    pub context: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub name: String,
    pub linear: Vec<LinearGroup>,
    /// Embeddings, norms and head.
    pub other_params: u64,
    /// MACs per token outside the block linears; defaults to `other_params`.
    #[serde(default)]
    pub other_macs_per_token: Option<u64>,
    /// Attention score/value matmuls; omitted by default.
    #[serde(default)]
    pub attention: Option<AttentionSpec>,
    #[serde(default = "one")]
    pub tokens: u64,
}

fn one() -> u64 {
    1
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.linear.is_empty() {
            return Err(domain_err!("{}: no linear layers", self.name));
        }
        if self.linear.iter().any(|g| g.params() == 0) {
            return Err(domain_err!("{}: empty linear group", self.name));
        }
        if self.other_params == 0 || self.tokens == 0 {
            return Err(domain_err!("{}: counts must be positive", self.name));
        }
        Ok(())
    }

    pub fn linear_params(&self) -> u64 {
        self.linear.iter().map(LinearGroup::params).sum()
    }

    pub fn linear_rows(&self) -> u64 {
        self.linear.iter().map(|g| g.rows * g.count).sum()
    }

    pub fn other_macs(&self) -> u64 {
        self.other_macs_per_token.unwrap_or(self.other_params)
    }

    pub fn attention_macs(&self) -> u64 {
        self.attention
            .as_ref()
            .map_or(0, |a| a.layers * 2 * a.context * a.d_model)
    }

    /// Average bit of 1-bit signs plus one 16-bit scale per output row.
    pub fn binary_average_bit(&self) -> f64 {
        1.0 + BASE_BITS * self.linear_rows() as f64 / self.linear_params() as f64
    }

    pub fn with_tokens(&self, tokens: u64) -> Self {
        Self {
            tokens,
            ..self.clone()
        }
    }

    /// LLaMA2-7B: 32 layers, d_model 4096, d_ff 11008, vocab 32000, untied head.
    pub fn llama2_7b() -> Self {
        let (d, ff, layers, vocab) = (4096u64, 11008u64, 32u64, 32000u64);
        Self {
            name: "llama2-7b".into(),
            linear: vec![
                LinearGroup {
                    name: "attn_qkvo".into(),
                    rows: d,
                    cols: d,
                    count: 4 * layers,
                },
                LinearGroup {
                    name: "mlp_gate_up".into(),
                    rows: ff,
                    cols: d,
                    count: 2 * layers,
                },
                LinearGroup {
                    name: "mlp_down".into(),
                    rows: d,
                    cols: ff,
                    count: layers,
                },
            ],
            other_params: 2 * vocab * d + 2 * layers * d + d,
            other_macs_per_token: None,
            attention: None,
            tokens: 1,
        }
    }

    /// The desk-scale transformer described by `cfg`.
    pub fn from_model(cfg: &ModelConfig) -> Self {
        let (d, ff, n, v) = (
            cfg.d_model as u64,
            cfg.d_ff as u64,
            cfg.n_layers as u64,
            cfg.vocab_size as u64,
        );
        Self {
            name: "tiny-lm".into(),
            linear: vec![
                LinearGroup {
                    name: "attn_qkvo".into(),
                    rows: d,
                    cols: d,
                    count: 4 * n,
                },
                LinearGroup {
                    name: "mlp_up".into(),
                    rows: ff,
                    cols: d,
                    count: n,
                },
                LinearGroup {
                    name: "mlp_down".into(),
                    rows: d,
                    cols: ff,
                    count: n,
                },
            ],
            other_params: 2 * v * d + cfg.max_seq_len as u64 * d + 2 * n * d + d,
            other_macs_per_token: None,
            attention: None,
            tokens: 1,
        }
    }
}

/// Effective memory in gigabytes with block linears at `linear_bits`.
pub fn estimate_memory(arch: &ArchSpec, linear_bits: f64) -> Result<f64> {
    if !(linear_bits > 0.0 && linear_bits <= BASE_BITS) {
        return Err(domain_err!(
            "linear bit width {linear_bits} outside (0, 16]"
        ));
    }
    let bits = arch.linear_params() as f64 * linear_bits + arch.other_params as f64 * BASE_BITS;
    Ok(bits / 8.0 / BYTES_PER_GB)
}

/// Bit-level cycles for `arch.tokens` tokens.
pub fn estimate_cycles(arch: &ArchSpec, bit_w: f64, bit_a: f64) -> Result<f64> {
    if !(bit_w > 0.0 && bit_a > 0.0) {
        return Err(domain_err!("bit widths must be positive"));
    }
    let per_token = arch.linear_params() as f64 * bit_w * bit_a
        + arch.other_macs() as f64 * BASE_BITS * bit_a
        + arch.attention_macs() as f64 * bit_a * bit_a;
    Ok(per_token * arch.tokens as f64)
}

/// A quantization method as seen by the estimators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Method {
    pub name: String,
    pub weight_bits: f64,
    #[serde(default = "sixteen")]
    pub act_bits: f64,
}

fn sixteen() -> f64 {
    BASE_BITS
}

impl Method {
    pub fn new(name: &str, weight_bits: f64) -> Self {
        Self {
            name: name.into(),
            weight_bits,
            act_bits: BASE_BITS,
        }
    }

    /// Rows of the published comparison.
    pub fn reference_rows() -> Vec<Method> {
        vec![
            Method::new("fp16", 16.0),
            Method::new("int4", 4.0),
            Method::new("ternary", 1.58),
            Method::new("binary-residual", 1.08),
            Method::new("binary", 1.01),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub arch: String,
    pub method: String,
    pub average_bit: f64,
    pub memory_gb: f64,
    pub cycles: f64,
}

pub fn report(arch: &ArchSpec, method: &Method) -> Result<CostReport> {
    arch.validate()?;
    Ok(CostReport {
        arch: arch.name.clone(),
        method: method.name.clone(),
        average_bit: method.weight_bits,
        memory_gb: estimate_memory(arch, method.weight_bits)?,
        cycles: estimate_cycles(arch, method.weight_bits, method.act_bits)?,
    })
}

/// Aligned text table: method, average bit, memory (GB), cycles (T).
pub fn render_table(rows: &[CostReport]) -> String {
    let mut s = format!(
        "{:<18} {:>11} {:>12} {:>11}\n",
        "method", "average_bit", "memory_gb", "cycles_t"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<18} {:>11.2} {:>12.2} {:>11.2}\n",
            r.method,
            r.average_bit,
            r.memory_gb,
            r.cycles / 1e12
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn llama_memory_rows() {
        let a = ArchSpec::llama2_7b();
        assert!(rel(estimate_memory(&a, 16.0).unwrap(), 13.48) < 0.02);
        assert!(rel(estimate_memory(&a, 4.0).unwrap(), 3.76) < 0.02);
        assert!(rel(estimate_memory(&a, 1.01).unwrap(), 1.34) < 0.02);
        assert!(estimate_memory(&a, 0.0).is_err());
        assert!(estimate_memory(&a, 17.0).is_err());
    }

    #[test]
    fn llama_cycle_rows() {
        let a = ArchSpec::llama2_7b();
        assert!(rel(estimate_cycles(&a, 16.0, 16.0).unwrap(), 1.72e12) < 0.05);
        assert!(rel(estimate_cycles(&a, 4.0, 16.0).unwrap(), 0.48e12) < 0.05);
        assert!(rel(estimate_cycles(&a, 1.01, 16.0).unwrap(), 0.17e12) < 0.05);
    }

    #[test]
    fn cycles_linear_in_tokens() {
        let a = ArchSpec::llama2_7b();
        let one = estimate_cycles(&a, 1.01, 16.0).unwrap();
        let two = estimate_cycles(&a.with_tokens(2), 1.01, 16.0).unwrap();
        assert_eq!(two, 2.0 * one);
    }

    #[test]
    fn attention_flag_adds_activation_products() {
        let mut a = ArchSpec::llama2_7b();
        let base = estimate_cycles(&a, 16.0, 16.0).unwrap();
        a.attention = Some(AttentionSpec {
            layers: 32,
            d_model: 4096,
            context: 128,
        });
        let with = estimate_cycles(&a, 16.0, 16.0).unwrap();
        assert_eq!(with - base, (32 * 2 * 128 * 4096) as f64 * 256.0);
    }

    #[test]
    fn reports_are_monotone_in_bits() {
        let a = ArchSpec::llama2_7b();
        let r = |b| report(&a, &Method::new("x", b)).unwrap();
        assert!(r(1.01).memory_gb < r(1.58).memory_gb);
        assert!(r(1.58).memory_gb < r(4.0).memory_gb);
        assert!(r(1.01).cycles < r(1.58).cycles);
        assert_eq!(r(16.0).average_bit, 16.0);
        assert_eq!(
            report(&a, &Method::new("x", 4.0)).unwrap(),
            report(&a, &Method::new("x", 4.0)).unwrap()
        );
    }

    #[test]
    fn desk_model_hand_arithmetic() {
        let cfg = ModelConfig::default();
        let a = ArchSpec::from_model(&cfg);
        // 4 layers × (4·128² + 2·512·128) linear weights
        assert_eq!(a.linear_params(), 4 * (4 * 128 * 128 + 2 * 512 * 128));
        // token + head tables, positions, two norms per layer, final norm
        assert_eq!(a.other_params, 2 * 256 * 128 + 256 * 128 + 8 * 128 + 128);
        let mem = estimate_memory(&a, 1.0).unwrap();
        assert_eq!(mem, (786_432.0 + 99_456.0 * 16.0) / 8.0 / 1e9);
        let cyc = estimate_cycles(&a, 1.0, 16.0).unwrap();
        assert_eq!(cyc, 786_432.0 * 16.0 + 99_456.0 * 256.0);
    }

    #[test]
    fn binary_average_bit_from_rows() {
        let a = ArchSpec {
            name: "one".into(),
            linear: vec![LinearGroup {
                name: "l".into(),
                rows: 1024,
                cols: 1024,
                count: 1,
            }],
            other_params: 1,
            other_macs_per_token: None,
            attention: None,
            tokens: 1,
        };
        assert!((a.binary_average_bit() - (1.0 + 16.0 / 1024.0)).abs() < 1e-15);
    }

    #[test]
    fn table_has_header_and_rows() {
        let a = ArchSpec::llama2_7b();
        let rows: Vec<_> = Method::reference_rows()
            .iter()
            .map(|m| report(&a, m).unwrap())
            .collect();
        let t = render_table(&rows);
        assert_eq!(t.lines().count(), 6);
        assert!(t.contains("13.48"));
    }
}
