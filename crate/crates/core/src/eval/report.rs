//! Plain-text tables and CSVs rendered from persisted reports.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::runner::{ExperimentReport, Transcript};
use super::stats::{OrderSensitivity, RankHistogram};

fn invalid(e: serde_json::Error) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, e)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(invalid)?;
    s.push('\n');
    fs::write(path, s)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> io::Result<T> {
    serde_json::from_str(&fs::read_to_string(path)?).map_err(invalid)
}

pub fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for t in items {
        serde_json::to_writer(&mut w, t).map_err(invalid)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> io::Result<Vec<T>> {
    let mut out = Vec::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(invalid)?);
        }
    }
    Ok(out)
}

pub fn write_transcripts(path: &Path, transcripts: &[Transcript]) -> io::Result<()> {
    write_jsonl(path, transcripts)
}

pub fn read_transcripts(path: &Path) -> io::Result<Vec<Transcript>> {
    read_jsonl(path)
}

/// Method rows with mean EM/F1, one line per report.
pub fn summary_table(reports: &[ExperimentReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<14} {:<9} {:>5} {:<10} {:>7} {:>7} {:>6} {:>8}", "Method", "Retriever", "Shots", "Order", "EM", "F1", "N", "Complete");
    for r in reports {
        let complete = r.per_seed.iter().all(|s| s.complete);
        let _ = writeln!(
            s,
            "{:<14} {:<9} {:>5} {:<10} {:>7.2} {:>7.2} {:>6} {:>8}",
            r.method.as_str(),
            r.retriever,
            r.shots,
            r.ordering.to_string(),
            r.mean.em,
            r.mean.f1,
            r.mean.n,
            if complete { "yes" } else { "no" }
        );
    }
    s
}

/// Orderings as rows, methods as EM/F1 column pairs, STD as the last row.
pub fn order_table(t: &OrderSensitivity) -> String {
    let methods: Vec<&String> = t.std.keys().collect();
    let mut s = format!("{:<12}", "Order");
    for m in &methods {
        let _ = write!(s, " {:>14} {:>14}", format!("{m} EM"), format!("{m} F1"));
    }
    s.push('\n');
    for (order, cols) in &t.rows {
        let _ = write!(s, "{order:<12}");
        for m in &methods {
            match cols.get(*m) {
                Some(v) => {
                    let _ = write!(s, " {:>14.2} {:>14.2}", v.em, v.f1);
                }
                None => {
                    let _ = write!(s, " {:>14} {:>14}", "-", "-");
                }
            }
        }
        s.push('\n');
    }
    let _ = write!(s, "{:<12}", "STD");
    for m in &methods {
        let (em, f1) = t.std[*m];
        let _ = write!(s, " {em:>14.2} {f1:>14.2}");
    }
    s.push('\n');
    s
}

pub fn shot_curve_csv(reports: &[ExperimentReport]) -> String {
    let mut s = String::from("method,retriever,shots,em,f1\n");
    for r in reports {
        let _ = writeln!(s, "{},{},{},{:.4},{:.4}", r.method, r.retriever, r.shots, r.mean.em, r.mean.f1);
    }
    s
}

pub fn rank_histogram_csv(histograms: &[(String, RankHistogram)]) -> String {
    let mut s = String::from("retriever,rank,count\n");
    for (label, h) in histograms {
        for (rank, count) in &h.buckets {
            let _ = writeln!(s, "{label},{rank},{count}");
        }
        let _ = writeln!(s, "{label},none,{}", h.none);
    }
    s
}
