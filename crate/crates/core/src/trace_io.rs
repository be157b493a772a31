//! CSV trace output and input.

use std::io::{Read, Write};
use std::path::Path;

use crate::composition::{PlantSample, SimTrace, TraceLayout, TraceRow};
use crate::error::{Error, Result};
use crate::topology::LinkId;

fn header(layout: &TraceLayout, plant: bool) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    let paths = || {
        layout
            .source_ids
            .iter()
            .zip(&layout.path_counts)
            .flat_map(|(id, &n)| (1..=n).map(move |j| (*id, j)))
    };
    h.extend(paths().map(|(i, j)| format!("r_s{i}_p{j}")));
    h.extend(paths().map(|(i, j)| format!("q_s{i}_p{j}")));
    for prefix in ["rl", "delay", "mit", "drop", "detect"] {
        h.extend(layout.link_ids.iter().map(|l| format!("{prefix}_{l}")));
    }
    h.push("x_compromise".into());
    h.push("adversary".into());
    if plant {
        h.extend(["x_plant", "u", "tau", "dropped"].map(String::from));
    }
    h
}

fn flag(b: bool) -> String {
    if b { "1" } else { "0" }.to_string()
}

/// Writes the trace as CSV. Floats use their shortest round-trip form and
/// flags are written as 0/1.
pub fn write_trace<W: Write>(trace: &SimTrace, out: W) -> Result<()> {
    let plant = trace.has_plant();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(&trace.layout, plant))?;
    for row in &trace.rows {
        let mut rec: Vec<String> = vec![row.t.to_string()];
        for v in [&row.rates, &row.delays, &row.link_rates, &row.link_delays, &row.mitigation, &row.drop] {
            rec.extend(v.iter().map(f64::to_string));
        }
        rec.extend(row.detect.iter().map(|&b| flag(b)));
        rec.push(row.x_compromise.to_string());
        rec.push(flag(row.adversary_triggered));
        if plant {
            let p = row
                .plant
                .ok_or_else(|| Error::input("plant columns missing from some rows"))?;
            rec.extend([p.x.to_string(), p.u.to_string(), p.tau.to_string(), flag(p.dropped)]);
        }
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_trace(trace: &SimTrace, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_trace(trace, std::io::BufWriter::new(file))
}

fn parse_path_column(name: &str, prefix: &str) -> Option<(u32, usize)> {
    let rest = name.strip_prefix(prefix)?;
    let (s, p) = rest.split_once("_p")?;
    Some((s.parse().ok()?, p.parse().ok()?))
}

/// Reads a trace written by [`write_trace`]. Experienced delays are not
/// stored, so they are read back equal to the routing delays; events are
/// not stored either.
pub fn read_trace_from<R: Read>(input: R) -> Result<SimTrace> {
    let mut rdr = csv::Reader::from_reader(input);
    let head: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    let bad = |m: String| Error::input(format!("malformed trace: {m}"));

    let mut source_ids: Vec<u32> = Vec::new();
    let mut path_counts: Vec<usize> = Vec::new();
    for name in &head {
        if let Some((s, p)) = parse_path_column(name, "r_s") {
            match source_ids.last() {
                Some(&last) if last == s => {
                    *path_counts.last_mut().unwrap() += 1;
                }
                _ => {
                    source_ids.push(s);
                    path_counts.push(1);
                }
            }
            if p != *path_counts.last().unwrap() {
                return Err(bad(format!("unexpected column {name}")));
            }
        }
    }
    let link_ids: Vec<LinkId> = head
        .iter()
        .filter_map(|n| n.strip_prefix("rl_").and_then(|s| s.parse().ok()).map(LinkId))
        .collect();
    let layout = TraceLayout { source_ids, path_counts, link_ids };
    let plant = head.iter().any(|n| n == "x_plant");
    if head != header(&layout, plant) {
        return Err(bad("unexpected column layout".into()));
    }

    let np: usize = layout.path_counts.iter().sum();
    let nl = layout.link_ids.len();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |k: usize| -> Result<f64> {
            rec.get(k)
                .ok_or_else(|| bad(format!("row {i} is short")))?
                .parse::<f64>()
                .map_err(|e| bad(format!("row {i} column {k}: {e}")))
        };
        let flag = |k: usize| -> Result<bool> {
            match rec.get(k) {
                Some("0") => Ok(false),
                Some("1") => Ok(true),
                other => Err(bad(format!("row {i} column {k}: expected 0/1, got {other:?}"))),
            }
        };
        let span = |start: usize, n: usize| -> Result<Vec<f64>> { (start..start + n).map(num).collect() };
        let mut c = 1;
        let rates = span(c, np)?;
        c += np;
        let delays = span(c, np)?;
        c += np;
        let link_rates = span(c, nl)?;
        c += nl;
        let link_delays = span(c, nl)?;
        c += nl;
        let mitigation = span(c, nl)?;
        c += nl;
        let drop = span(c, nl)?;
        c += nl;
        let detect = (c..c + nl).map(flag).collect::<Result<Vec<_>>>()?;
        c += nl;
        let x_compromise = num(c)?;
        let adversary_triggered = flag(c + 1)?;
        c += 2;
        let plant = if plant {
            Some(PlantSample { x: num(c)?, u: num(c + 1)?, tau: num(c + 2)?, dropped: flag(c + 3)? })
        } else {
            None
        };
        rows.push(TraceRow {
            t: num(0)?,
            experienced: delays.clone(),
            rates,
            delays,
            link_rates,
            link_delays,
            mitigation,
            drop,
            detect,
            x_compromise,
            adversary_triggered,
            plant,
        });
    }
    let first = rows.first().ok_or_else(|| bad("no rows".into()))?;
    let totals = (0..layout.source_ids.len())
        .map(|s| first.rates[layout.path_range(s)].iter().sum())
        .collect();
    Ok(SimTrace { layout, totals, rows, events: Vec::new() })
}

pub fn read_trace(path: &Path) -> Result<SimTrace> {
    read_trace_from(std::fs::File::open(path)?)
}
