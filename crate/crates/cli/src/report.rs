//! Benchmark report shared by the CSV and JSON writers.

use std::fmt::Write as _;

use obmreg_core::geometry::RegistrationMetrics;
use obmreg_core::train::median;
use serde::{Deserialize, Serialize};

pub const CSV_FILE: &str = "bench.csv";
pub const JSON_FILE: &str = "bench.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub method: String,
    pub split: String,
    /// Position of the pair within the manifest.
    pub index: usize,
    pub id: usize,
    pub mae_r: f64,
    pub mae_t: f64,
    pub mie_r: f64,
    pub mie_t: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub pairs: usize,
    pub mae_r: f64,
    pub mae_t: f64,
    pub mie_r: f64,
    pub mie_t: f64,
    pub median_mie_r: f64,
    pub median_mie_t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<PairRow>,
    pub aggregates: Vec<Aggregate>,
}

impl PairRow {
    pub fn new(method: &str, split: &str, index: usize, id: usize, m: &RegistrationMetrics) -> Self {
        Self {
            method: method.to_string(),
            split: split.to_string(),
            index,
            id,
            mae_r: m.mae_r,
            mae_t: m.mae_t,
            mie_r: m.mie_r,
            mie_t: m.mie_t,
            wall_ms: None,
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean and median summaries per method, in order of first appearance.
pub fn aggregate(rows: &[PairRow]) -> Vec<Aggregate> {
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    methods
        .into_iter()
        .map(|method| {
            let rs: Vec<&PairRow> = rows.iter().filter(|r| r.method == method).collect();
            let col = |f: fn(&PairRow) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<f64>>();
            Aggregate {
                method: method.to_string(),
                pairs: rs.len(),
                mae_r: mean(&col(|r| r.mae_r)),
                mae_t: mean(&col(|r| r.mae_t)),
                mie_r: mean(&col(|r| r.mie_r)),
                mie_t: mean(&col(|r| r.mie_t)),
                median_mie_r: median(&col(|r| r.mie_r)),
                median_mie_t: median(&col(|r| r.mie_t)),
            }
        })
        .collect()
}

impl BenchReport {
    /// Sorts rows by method order then manifest index and derives the aggregates.
    pub fn new(mut rows: Vec<PairRow>) -> Self {
        let order: Vec<String> = aggregate(&rows).into_iter().map(|a| a.method).collect();
        rows.sort_by_key(|r| (order.iter().position(|m| *m == r.method), r.index));
        let aggregates = aggregate(&rows);
        Self { rows, aggregates }
    }

    pub fn aggregate_for(&self, method: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.method == method)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// One `pair` line per row, then `mean` and `median` lines per method.
    /// Numbers use the shortest representation that parses back exactly.
    pub fn to_csv(&self) -> String {
        let timed = self.rows.iter().any(|r| r.wall_ms.is_some());
        let mut out = String::from("kind,method,split,index,id,mae_r,mae_t,mie_r,mie_t");
        out.push_str(if timed { ",wall_ms\n" } else { "\n" });
        for r in &self.rows {
            write!(out, "pair,{},{},{},{},{},{},{},{}", r.method, r.split, r.index, r.id, r.mae_r, r.mae_t, r.mie_r, r.mie_t).unwrap();
            if timed {
                write!(out, ",{}", r.wall_ms.map_or(String::new(), |w| w.to_string())).unwrap();
            }
            out.push('\n');
        }
        let split = self.rows.first().map_or("", |r| r.split.as_str());
        for a in &self.aggregates {
            let tail = if timed { "," } else { "" };
            writeln!(out, "mean,{},{split},,,{},{},{},{}{tail}", a.method, a.mae_r, a.mae_t, a.mie_r, a.mie_t).unwrap();
            writeln!(out, "median,{},{split},,,,,{},{}{tail}", a.method, a.median_mie_r, a.median_mie_t).unwrap();
        }
        out
    }

    /// Fixed-width summary for the terminal.
    pub fn summary(&self) -> String {
        let mut out = format!(
            "{:<8} {:>5} {:>10} {:>10} {:>10} {:>10} {:>12} {:>12}\n",
            "method", "pairs", "MAE(R)", "MAE(t)", "MIE(R)", "MIE(t)", "med MIE(R)", "med MIE(t)"
        );
        for a in &self.aggregates {
            writeln!(
                out,
                "{:<8} {:>5} {:>10.4} {:>10.5} {:>10.4} {:>10.5} {:>12.4} {:>12.5}",
                a.method, a.pairs, a.mae_r, a.mae_t, a.mie_r, a.mie_t, a.median_mie_r, a.median_mie_t
            )
            .unwrap();
        }
        out
    }
}
