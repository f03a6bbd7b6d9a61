//! File formats: panels, kernels, CDFs and tables as CSV; results as JSON.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DdcError, Result};
use crate::metrics::StepCdf;
use crate::model::{StateGrid, TransitionKernel};
use crate::simulator::Panel;
use crate::solver::{CcpTable, ValueFunction};

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    Ok(csv::Writer::from_path(path)?)
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?)
}

fn parse_err(path: &Path, line: u64, msg: impl std::fmt::Display) -> DdcError {
    DdcError::Parse(format!("{}:{line}: {msg}", path.display()))
}

fn field<T: std::str::FromStr>(path: &Path, rec: &csv::StringRecord, k: usize, name: &str) -> Result<T> {
    let line = rec.position().map_or(0, |p| p.line());
    let raw = rec.get(k).ok_or_else(|| parse_err(path, line, format!("missing column {name}")))?;
    raw.parse().map_err(|_| parse_err(path, line, format!("bad {name} value `{raw}`")))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| DdcError::Parse(format!("{}: at `{}`: {}", path.display(), e.path(), e.inner())))
}

/// Panel CSV `id,t,x1..xk,a`; `id` and `t` start at 1.
pub fn write_panel_csv(path: &Path, panel: &Panel, grid: &StateGrid<f64>) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec![String::from("id"), String::from("t")];
    header.extend((1..=grid.dim()).map(|d| format!("x{d}")));
    header.push("a".into());
    w.write_record(&header)?;
    for i in 0..panel.n() {
        for t in 0..panel.periods() {
            let mut rec = vec![(i + 1).to_string(), (t + 1).to_string()];
            rec.extend(grid.point(panel.state(i, t)).iter().map(|x| x.to_string()));
            rec.push(panel.action(i, t).to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a panel CSV, mapping state coordinates to grid points exactly.
/// Rows may come in any order but every individual needs periods `1..T`.
pub fn read_panel_csv(path: &Path, grid: &StateGrid<f64>) -> Result<Panel> {
    let mut r = reader(path)?;
    let k = grid.dim();
    let header = r.headers()?.clone();
    let mut expected = vec![String::from("id"), String::from("t")];
    expected.extend((1..=k).map(|d| format!("x{d}")));
    expected.push("a".into());
    if header.iter().collect::<Vec<_>>() != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(parse_err(path, 1, format!("header must be `{}`", expected.join(","))));
    }
    let mut rows: Vec<(usize, usize, usize, usize)> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let id: usize = field(path, &rec, 0, "id")?;
        let t: usize = field(path, &rec, 1, "t")?;
        let x: Vec<f64> = (0..k).map(|d| field(path, &rec, 2 + d, &format!("x{}", d + 1))).collect::<Result<_>>()?;
        let a: usize = field(path, &rec, 2 + k, "a")?;
        let s = grid
            .index_of(&x)
            .ok_or_else(|| parse_err(path, line, format!("state {x:?} is not a grid point")))?;
        if t == 0 {
            return Err(parse_err(path, line, "periods start at 1"));
        }
        rows.push((id, t, s, a));
    }
    if rows.is_empty() {
        return Err(parse_err(path, 1, "panel is empty"));
    }
    rows.sort_unstable();
    let periods = rows.iter().map(|r| r.1).max().unwrap_or(0);
    let mut ids: Vec<usize> = rows.iter().map(|r| r.0).collect();
    ids.dedup();
    if rows.len() != ids.len() * periods {
        return Err(parse_err(path, 0, "panel is not rectangular (every id needs periods 1..T once)"));
    }
    for (chunk, &id) in rows.chunks(periods).zip(&ids) {
        if chunk.iter().enumerate().any(|(t, r)| r.0 != id || r.1 != t + 1) {
            return Err(parse_err(path, 0, format!("id {id} does not have periods 1..{periods} exactly once")));
        }
    }
    Panel::new(ids.len(), periods, rows.iter().map(|r| r.2).collect(), rows.iter().map(|r| r.3).collect())
}

/// Kernel CSV `a,from,to,prob`, every entry.
pub fn write_kernel_csv(path: &Path, kernel: &TransitionKernel<f64>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["a", "from", "to", "prob"])?;
    for a in 0..kernel.num_actions() {
        for from in 0..kernel.num_states() {
            for to in 0..kernel.num_states() {
                w.write_record(&[a.to_string(), from.to_string(), to.to_string(), kernel.prob(a, from, to).to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a kernel CSV; omitted entries are zero.
pub fn read_kernel_csv(path: &Path, num_actions: usize, num_states: usize) -> Result<TransitionKernel<f64>> {
    let mut r = reader(path)?;
    let header = r.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["a", "from", "to", "prob"] {
        return Err(parse_err(path, 1, "header must be `a,from,to,prob`"));
    }
    let mut probs = vec![0.0; num_actions * num_states * num_states];
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let a: usize = field(path, &rec, 0, "a")?;
        let from: usize = field(path, &rec, 1, "from")?;
        let to: usize = field(path, &rec, 2, "to")?;
        let p: f64 = field(path, &rec, 3, "prob")?;
        if a >= num_actions || from >= num_states || to >= num_states {
            return Err(parse_err(path, line, format!("entry ({a},{from},{to}) out of range")));
        }
        probs[(a * num_states + from) * num_states + to] = p;
    }
    TransitionKernel::new(num_actions, num_states, probs)
}

/// Kernel JSON `{num_actions, num_states, probs: [a][from][to]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelJson {
    pub num_actions: usize,
    pub num_states: usize,
    pub probs: Vec<Vec<Vec<f64>>>,
}

impl KernelJson {
    pub fn from_kernel(k: &TransitionKernel<f64>) -> Self {
        let s = k.num_states();
        Self {
            num_actions: k.num_actions(),
            num_states: s,
            probs: (0..k.num_actions())
                .map(|a| (0..s).map(|from| k.row(a, from).to_vec()).collect())
                .collect(),
        }
    }

    pub fn into_kernel(self) -> Result<TransitionKernel<f64>> {
        let (na, s) = (self.num_actions, self.num_states);
        if self.probs.len() != na || self.probs.iter().any(|m| m.len() != s || m.iter().any(|r| r.len() != s)) {
            return Err(DdcError::Dimension {
                context: "kernel json",
                expected: na * s * s,
                got: self.probs.iter().flatten().map(Vec::len).sum(),
            });
        }
        TransitionKernel::new(na, s, self.probs.into_iter().flatten().flatten().collect())
    }
}

/// CDF CSV `b,cdf`, one row per jump (value after the jump).
pub fn write_cdf_csv(path: &Path, cdf: &StepCdf) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["b", "cdf"])?;
    for (b, c) in cdf.steps() {
        w.write_record(&[b.to_string(), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cdf_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut r = reader(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        out.push((field(path, &rec, 0, "b")?, field(path, &rec, 1, "cdf")?));
    }
    Ok(out)
}

/// Values CSV `t,state,x1..xk,value`; `t = 0` marks a stationary solution.
pub fn write_values_csv(path: &Path, v: &ValueFunction<f64>, grid: &StateGrid<f64>) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec![String::from("t"), String::from("state")];
    header.extend((1..=grid.dim()).map(|d| format!("x{d}")));
    header.push("value".into());
    w.write_record(&header)?;
    let stationary = v.horizon.periods().is_none();
    for (t, values) in v.periods.iter().enumerate() {
        let label = if stationary { 0 } else { t + 1 };
        for (s, value) in values.iter().enumerate() {
            let mut rec = vec![label.to_string(), s.to_string()];
            rec.extend(grid.point(s).iter().map(|x| x.to_string()));
            rec.push(value.to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// CCP CSV `t,state,x1..xk,a,prob`; `t = 0` marks stationary CCPs.
pub fn write_ccp_csv(path: &Path, ccps: &[CcpTable<f64>], stationary: bool, grid: &StateGrid<f64>) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec![String::from("t"), String::from("state")];
    header.extend((1..=grid.dim()).map(|d| format!("x{d}")));
    header.extend(["a".to_string(), "prob".to_string()]);
    w.write_record(&header)?;
    for (t, table) in ccps.iter().enumerate() {
        let label = if stationary { 0 } else { t + 1 };
        for s in 0..table.num_states() {
            for a in 0..table.num_actions() {
                let mut rec = vec![label.to_string(), s.to_string()];
                rec.extend(grid.point(s).iter().map(|x| x.to_string()));
                rec.extend([a.to_string(), table.prob(s, a).to_string()]);
                w.write_record(&rec)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Types CSV `id,b1..bd`.
pub fn write_betas_csv(path: &Path, betas: &[Vec<f64>]) -> Result<()> {
    let mut w = writer(path)?;
    let d = betas.first().map_or(0, Vec::len);
    let mut header = vec![String::from("id")];
    header.extend((1..=d).map(|k| format!("b{k}")));
    w.write_record(&header)?;
    for (i, b) in betas.iter().enumerate() {
        let mut rec = vec![(i + 1).to_string()];
        rec.extend(b.iter().map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Table CSV: `metric` then one column per sample size.
pub fn write_table_csv(path: &Path, sizes: &[usize], rows: &[(String, Vec<f64>)]) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec![String::from("metric")];
    header.extend(sizes.iter().map(|n| format!("n={n}")));
    w.write_record(&header)?;
    for (name, values) in rows {
        let mut rec = vec![name.clone()];
        rec.extend(values.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
