use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::container::{read_container, write_container, Tensor, TensorContainer};
use crate::error::{Error, Result};
use crate::inter::AllocationSolution;
use crate::intra::{CandidateKind, CompressedWeight};
use crate::quantizer::{QuantParams, QuantizedMatrix};

pub const REPORT_FILE: &str = "solution.txt";
pub const RECORD_FILE: &str = "solution.json";
pub const COMPRESSED_FILE: &str = "compressed.mlrq";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub name: String,
    pub kind: CandidateKind,
    pub front_index: usize,
    pub memory_bits: u64,
    pub phi: f64,
    pub interpolated: bool,
}

/// Machine-readable form of an allocation, persisted next to the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionRecord {
    pub model_name: String,
    pub layers: Vec<LayerRecord>,
    pub total_memory_bits: u64,
    pub budget_bits: u64,
    pub objective: f64,
    #[serde(default)]
    pub activation_bits: BTreeMap<String, u8>,
    /// True when the stored codes come from adaptive rounding.
    #[serde(default)]
    pub refined: bool,
}

impl SolutionRecord {
    pub fn from_allocation(
        model_name: &str,
        layer_names: &[String],
        solution: &AllocationSolution,
    ) -> Result<Self> {
        if layer_names.len() != solution.choices.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} layer names for {} choices",
                layer_names.len(),
                solution.choices.len()
            )));
        }
        Ok(SolutionRecord {
            model_name: model_name.to_string(),
            layers: layer_names
                .iter()
                .zip(&solution.choices)
                .map(|(name, c)| LayerRecord {
                    name: name.clone(),
                    kind: c.candidate.kind,
                    front_index: c.front_index,
                    memory_bits: c.candidate.memory_bits,
                    phi: c.metric.phi,
                    interpolated: c.metric.interpolated,
                })
                .collect(),
            total_memory_bits: solution.total_memory_bits,
            budget_bits: solution.budget_bits,
            objective: solution.objective,
            activation_bits: solution.activation_bits.clone(),
            refined: false,
        })
    }
}

/// Tab-separated text report: one line per layer, then totals.
pub fn solution_report(record: &SolutionRecord) -> String {
    let dash = || "-".to_string();
    let mut out = String::new();
    writeln!(out, "model\t{}", record.model_name).unwrap();
    writeln!(
        out,
        "layer\tkind\trank\tbits_w\tbits_a\tbits_b\tmemory_bits\tphi\tinterpolated"
    )
    .unwrap();
    for l in &record.layers {
        let (kind, rank, bw, ba, bb) = match l.kind {
            CandidateKind::QuantOnly { bits } => ("quant_only", dash(), bits.to_string(), dash(), dash()),
            CandidateKind::LowRank {
                rank,
                bits_a,
                bits_b,
            } => (
                "low_rank",
                rank.to_string(),
                dash(),
                bits_a.to_string(),
                bits_b.to_string(),
            ),
        };
        writeln!(
            out,
            "{}\t{kind}\t{rank}\t{bw}\t{ba}\t{bb}\t{}\t{:.6e}\t{}",
            l.name, l.memory_bits, l.phi, l.interpolated
        )
        .unwrap();
    }
    writeln!(out, "total_memory_bits\t{}", record.total_memory_bits).unwrap();
    writeln!(out, "budget_bits\t{}", record.budget_bits).unwrap();
    writeln!(out, "objective\t{:.6e}", record.objective).unwrap();
    if !record.activation_bits.is_empty() {
        let acts: Vec<String> = record
            .activation_bits
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        writeln!(out, "activation_bits\t{}", acts.join(" ")).unwrap();
    }
    writeln!(out, "refined\t{}", record.refined).unwrap();
    out
}

fn insert_quantized(c: &mut TensorContainer, prefix: &str, q: &QuantizedMatrix) -> Result<()> {
    let (rows, cols) = q.codes.shape();
    let row_major: Vec<i32> = q.codes.transpose().iter().copied().collect();
    c.insert(format!("{prefix}.codes"), Tensor::from_i32(&[rows, cols], &row_major)?)?;
    let scales: Vec<f32> = q.params.scales.iter().map(|&s| s as f32).collect();
    c.insert(format!("{prefix}.scales"), Tensor::from_f32(&[rows], &scales)?)?;
    c.insert(
        format!("{prefix}.zero_points"),
        Tensor::from_i32(&[rows], &q.params.zero_points)?,
    )?;
    c.insert(
        format!("{prefix}.bits"),
        Tensor::from_i32(&[1], &[q.params.bits as i32])?,
    )?;
    Ok(())
}

fn read_quantized(c: &TensorContainer, prefix: &str) -> Result<QuantizedMatrix> {
    let codes_t = c.require(&format!("{prefix}.codes"))?;
    let shape = codes_t.shape();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch(format!("{prefix}.codes is not a matrix")));
    }
    let (rows, cols) = (shape[0] as usize, shape[1] as usize);
    let codes = DMatrix::from_row_slice(rows, cols, &codes_t.to_i32()?);
    let scales = c.require(&format!("{prefix}.scales"))?.to_f64_vec()?;
    let zero_points = c.require(&format!("{prefix}.zero_points"))?.to_i32()?;
    let bits = c.require(&format!("{prefix}.bits"))?.to_i32()?;
    let bits = match bits.as_slice() {
        [b] if (2..=16).contains(b) => *b as u8,
        _ => return Err(Error::ShapeMismatch(format!("{prefix}.bits is malformed"))),
    };
    if scales.len() != rows {
        return Err(Error::ShapeMismatch(format!(
            "{prefix}: {} scales for {rows} rows",
            scales.len()
        )));
    }
    Ok(QuantizedMatrix {
        codes,
        params: QuantParams::new(scales, zero_points, bits)?,
    })
}

/// Integer codes and parameters of every layer, keyed `<layer>.W.*` for
/// dense weights and `<layer>.A.*`, `<layer>.B.*` for factored ones.
pub fn compressed_container(
    layer_names: &[String],
    weights: &[CompressedWeight],
) -> Result<TensorContainer> {
    let mut c = TensorContainer::new();
    for (name, w) in layer_names.iter().zip(weights) {
        match w {
            CompressedWeight::Dense(q) => insert_quantized(&mut c, &format!("{name}.W"), q)?,
            CompressedWeight::Factored { a, b } => {
                insert_quantized(&mut c, &format!("{name}.A"), a)?;
                insert_quantized(&mut c, &format!("{name}.B"), b)?;
            }
        }
    }
    Ok(c)
}

pub fn load_compressed(c: &TensorContainer, layer_names: &[String]) -> Result<Vec<CompressedWeight>> {
    layer_names
        .iter()
        .map(|name| {
            if c.get(&format!("{name}.W.codes")).is_some() {
                Ok(CompressedWeight::Dense(read_quantized(c, &format!("{name}.W"))?))
            } else {
                Ok(CompressedWeight::Factored {
                    a: read_quantized(c, &format!("{name}.A"))?,
                    b: read_quantized(c, &format!("{name}.B"))?,
                })
            }
        })
        .collect()
}

/// Writes the text report, its JSON record and the compressed container.
pub fn save_solution(
    record: &SolutionRecord,
    weights: &[CompressedWeight],
    out_dir: impl AsRef<Path>,
) -> Result<()> {
    if weights.len() != record.layers.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} compressed weights for {} layers",
            weights.len(),
            record.layers.len()
        )));
    }
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let names: Vec<String> = record.layers.iter().map(|l| l.name.clone()).collect();
    let container = compressed_container(&names, weights)?;
    fs::write(out_dir.join(REPORT_FILE), solution_report(record))?;
    let json = serde_json::to_string_pretty(record)
        .map_err(|e| Error::InvalidConfig(format!("cannot encode solution: {e}")))?;
    fs::write(out_dir.join(RECORD_FILE), json + "\n")?;
    write_container(&container, out_dir.join(COMPRESSED_FILE))?;
    Ok(())
}

pub fn load_solution(dir: impl AsRef<Path>) -> Result<(SolutionRecord, Vec<CompressedWeight>)> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(RECORD_FILE))?;
    let record: SolutionRecord = serde_json::from_str(&text)
        .map_err(|e| Error::Manifest(format!("{}: {e}", RECORD_FILE)))?;
    let container = read_container(dir.join(COMPRESSED_FILE))?;
    let names: Vec<String> = record.layers.iter().map(|l| l.name.clone()).collect();
    let weights = load_compressed(&container, &names)?;
    Ok((record, weights))
}
