//! Text and CSV renderings for the command-line front end.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::inter::MetricTable;
use crate::intra::{joint_candidate_count, CandidateKind, ParetoFront};
use crate::pipeline::EvalReport;
use crate::quantizer::BitSet;
use crate::store::{Model, SolutionRecord};

fn kind_columns(kind: CandidateKind) -> [String; 5] {
    let blank = String::new;
    match kind {
        CandidateKind::QuantOnly { bits } => {
            ["quant_only".into(), blank(), bits.to_string(), blank(), blank()]
        }
        CandidateKind::LowRank {
            rank,
            bits_a,
            bits_b,
        } => [
            "low_rank".into(),
            rank.to_string(),
            blank(),
            bits_a.to_string(),
            bits_b.to_string(),
        ],
    }
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// One row per front member. Metric columns are left empty without a table.
pub fn fronts_csv(
    names: &[String],
    fronts: &[&ParetoFront],
    table: Option<&MetricTable>,
) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "layer", "index", "kind", "rank", "bits_w", "bits_a", "bits_b", "local_loss",
        "memory_bits", "phi", "interpolated",
    ])
    .map_err(csv_err)?;
    for (l, (name, front)) in names.iter().zip(fronts).enumerate() {
        for (k, c) in front.candidates.iter().enumerate() {
            let [kind, rank, bw, ba, bb] = kind_columns(c.kind);
            let (phi, interp) = match table {
                Some(t) => {
                    let e = t.layers[l].entries[k];
                    (e.phi.to_string(), e.interpolated.to_string())
                }
                None => (String::new(), String::new()),
            };
            w.write_record([
                name.clone(),
                k.to_string(),
                kind,
                rank,
                bw,
                ba,
                bb,
                c.local_loss.to_string(),
                c.memory_bits.to_string(),
                phi,
                interp,
            ])
            .map_err(csv_err)?;
        }
    }
    finish(w)
}

pub fn solution_csv(record: &SolutionRecord) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "layer", "kind", "rank", "bits_w", "bits_a", "bits_b", "memory_bits", "phi",
        "interpolated",
    ])
    .map_err(csv_err)?;
    for l in &record.layers {
        let [kind, rank, bw, ba, bb] = kind_columns(l.kind);
        w.write_record([
            l.name.clone(),
            kind,
            rank,
            bw,
            ba,
            bb,
            l.memory_bits.to_string(),
            l.phi.to_string(),
            l.interpolated.to_string(),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

/// Candidate count of one layer's full (stride 1) search space.
pub fn layer_candidate_count(n_bits: usize, max_rank: usize, compressible: bool) -> usize {
    if compressible {
        joint_candidate_count(n_bits, max_rank)
    } else {
        n_bits
    }
}

pub fn inspect_report(model: &Model, bitset: &BitSet) -> String {
    let mut out = String::new();
    writeln!(out, "model\t{}", model.name).unwrap();
    writeln!(out, "calibration_samples\t{}", model.calibration.nrows()).unwrap();
    writeln!(out, "bitset\t{bitset}").unwrap();
    writeln!(
        out,
        "layer\tn_out\tn_in\tmax_rank\tactivation\tcompressible\tcandidates\tfloat_bits"
    )
    .unwrap();
    let mut total_candidates = 0;
    for l in &model.layers {
        let count = layer_candidate_count(bitset.len(), l.max_rank(), l.spec.compressible);
        total_candidates += count;
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            l.spec.name,
            l.n_out(),
            l.n_in(),
            l.max_rank(),
            l.spec.activation_after,
            l.spec.compressible,
            count,
            32 * (l.n_out() * l.n_in()) as u64
        )
        .unwrap();
    }
    writeln!(out, "total_candidates\t{total_candidates}").unwrap();
    writeln!(out, "total_weights\t{}", model.weight_count()).unwrap();
    writeln!(out, "total_float_bits\t{}", 32 * model.weight_count()).unwrap();
    out
}

pub fn eval_report(report: &EvalReport) -> String {
    let mut out = String::new();
    writeln!(out, "layer\tkind\tmemory_bits\tfloat_bits").unwrap();
    for l in &report.layers {
        writeln!(out, "{}\t{}\t{}\t{}", l.name, l.kind, l.memory_bits, l.float_bits).unwrap();
    }
    writeln!(out, "total_memory_bits\t{}", report.total_memory_bits).unwrap();
    writeln!(out, "avg_bits\t{:.6}", report.avg_bits).unwrap();
    writeln!(out, "mse\t{:.6e}", report.mse).unwrap();
    writeln!(out, "nmse\t{:.6e}", report.nmse).unwrap();
    out
}
