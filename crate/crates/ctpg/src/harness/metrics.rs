//! Metrics CSV serialization. The schema is fixed: header exactly
//! `seed,env_steps_per_task,task,metric,value`, task either an index or
//! "mean". Formatting goes through f64's shortest round-trip display so two
//! identical runs produce byte-identical files.

use crate::error::{Error, Result};
use crate::trainer::MetricEvent;
use std::path::Path;

pub const CSV_HEADER: &str = "seed,env_steps_per_task,task,metric,value";

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub seed: u64,
    pub env_steps_per_task: u64,
    pub task: Option<usize>,
    pub metric: String,
    pub value: f64,
}

pub fn format_csv(seed: u64, events: &[MetricEvent]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for e in events {
        let task = match e.task {
            Some(i) => i.to_string(),
            None => "mean".to_string(),
        };
        out.push_str(&format!(
            "{seed},{},{task},{},{}\n",
            e.env_steps_per_task, e.metric, e.value
        ));
    }
    out
}

pub fn write_csv(path: &Path, seed: u64, events: &[MetricEvent]) -> Result<()> {
    std::fs::write(path, format_csv(seed, events))?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<Row>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Config(format!("{}: empty metrics file", path.display())))?;
    if header != CSV_HEADER {
        return Err(Error::Config(format!(
            "{}: unexpected header '{header}'",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Config(format!(
                "{}: line {}: expected 5 fields, got {}",
                path.display(),
                lineno + 2,
                fields.len()
            )));
        }
        let bad = |what: &str| {
            Error::Config(format!("{}: line {}: bad {what}", path.display(), lineno + 2))
        };
        rows.push(Row {
            seed: fields[0].parse().map_err(|_| bad("seed"))?,
            env_steps_per_task: fields[1].parse().map_err(|_| bad("step"))?,
            task: if fields[2] == "mean" {
                None
            } else {
                Some(fields[2].parse().map_err(|_| bad("task"))?)
            },
            metric: fields[3].to_string(),
            value: fields[4].parse().map_err(|_| bad("value"))?,
        });
    }
    Ok(rows)
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    assert!(!values.is_empty());
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut s = values.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).expect("finite metric values"));
    let mid = s.len() / 2;
    if s.len() % 2 == 1 {
        s[mid]
    } else {
        0.5 * (s[mid - 1] + s[mid])
    }
}
