//! File formats: demonstration and query CSV, model JSON, trace CSV with a
//! JSON sidecar.
//!
//! Demonstration CSV has the header `demo,t,in_0..in_{D_I-1},out_0..out_{D_O-1}`;
//! rows are grouped into demonstrations by `demo` in order of first
//! appearance. Query CSV has the header `in_0..in_{D_I-1}`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::kmp::{KmpHyperparams, KmpModel};
use crate::lqr::ControlGains;
use crate::reference::{Demonstration, ReferenceTrajectory};
use crate::sim::{GainSchedule, ScenarioConfig, TraceRecord};

pub const MODEL_FORMAT_VERSION: u32 = 1;

fn parse_err(line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Checks that `names` reads `{prefix}0, {prefix}1, ...` and returns its length.
fn indexed_columns(names: &[&str], prefix: &str) -> Result<usize> {
    for (i, n) in names.iter().enumerate() {
        if *n != format!("{prefix}{i}") {
            return Err(parse_err(1, format!("expected column '{prefix}{i}', found '{n}'")));
        }
    }
    Ok(names.len())
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(r)
}

fn parse_cell(cell: &str, line: u64, column: &str) -> Result<f64> {
    let v: f64 = cell
        .parse()
        .map_err(|_| parse_err(line, format!("column '{column}': '{cell}' is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("column '{column}' is not finite")));
    }
    Ok(v)
}

/// Reads rows after the header, yielding `(line, record)` with width checks.
fn data_rows<R: Read>(
    rdr: &mut csv::Reader<R>,
    width: usize,
) -> impl Iterator<Item = Result<(u64, csv::StringRecord)>> + '_ {
    rdr.records().filter_map(move |rec| {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                return Some(Err(parse_err(line, e.to_string())));
            }
        };
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() == 1 && rec[0].is_empty() {
            return None;
        }
        if rec.len() != width {
            return Some(Err(parse_err(
                line,
                format!("expected {width} fields, found {}", rec.len()),
            )));
        }
        Some(Ok((line, rec)))
    })
}

fn header<R: Read>(rdr: &mut csv::Reader<R>) -> Result<Vec<String>> {
    let mut rec = csv::StringRecord::new();
    let got = rdr
        .read_record(&mut rec)
        .map_err(|e| parse_err(1, e.to_string()))?;
    if !got {
        return Err(parse_err(1, "missing header"));
    }
    Ok(rec.iter().map(|s| s.to_string()).collect())
}

pub fn read_demonstrations<R: Read>(r: R) -> Result<Vec<Demonstration>> {
    let mut rdr = reader(r);
    let names = header(&mut rdr)?;
    let names: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    if names.len() < 4 || names[0] != "demo" || names[1] != "t" {
        return Err(parse_err(1, "header must start with 'demo,t' followed by in_* and out_* columns"));
    }
    let split = names
        .iter()
        .position(|n| n.starts_with("out_"))
        .ok_or_else(|| parse_err(1, "no out_* columns"))?;
    let d_i = indexed_columns(&names[2..split], "in_")?;
    let d_o = indexed_columns(&names[split..], "out_")?;
    if d_i == 0 {
        return Err(parse_err(1, "no in_* columns"));
    }

    let mut ids: Vec<i64> = Vec::new();
    let mut groups: Vec<(Vec<DVector<f64>>, Vec<DVector<f64>>)> = Vec::new();
    for row in data_rows(&mut rdr, names.len()) {
        let (line, rec) = row?;
        let id: i64 = rec[0]
            .parse()
            .map_err(|_| parse_err(line, format!("demo id '{}' is not an integer", &rec[0])))?;
        parse_cell(&rec[1], line, "t")?;
        let x = (0..d_i)
            .map(|i| parse_cell(&rec[2 + i], line, names[2 + i]))
            .collect::<Result<Vec<_>>>()?;
        let y = (0..d_o)
            .map(|i| parse_cell(&rec[split + i], line, names[split + i]))
            .collect::<Result<Vec<_>>>()?;
        let g = match ids.iter().position(|&d| d == id) {
            Some(g) => g,
            None => {
                ids.push(id);
                groups.push((Vec::new(), Vec::new()));
                groups.len() - 1
            }
        };
        groups[g].0.push(DVector::from_vec(x));
        groups[g].1.push(DVector::from_vec(y));
    }
    if groups.is_empty() {
        return Err(parse_err(2, "no data rows"));
    }
    groups
        .into_iter()
        .map(|(x, y)| Demonstration::new(x, y))
        .collect()
}

pub fn parse_demonstrations(path: impl AsRef<Path>) -> Result<Vec<Demonstration>> {
    read_demonstrations(BufReader::new(File::open(path)?))
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// Writes demonstrations with `t` set to the sample index times `sample_period`.
pub fn write_demonstrations<W: Write>(w: W, demos: &[Demonstration], sample_period: f64) -> Result<()> {
    let first = demos
        .first()
        .ok_or_else(|| Error::InvalidArgument("no demonstrations to write".into()))?;
    let mut wtr = csv::Writer::from_writer(w);
    let mut head = vec!["demo".to_string(), "t".to_string()];
    head.extend((0..first.dim_in()).map(|i| format!("in_{i}")));
    head.extend((0..first.dim_out()).map(|i| format!("out_{i}")));
    wtr.write_record(&head).map_err(csv_io)?;
    for (h, d) in demos.iter().enumerate() {
        for (j, (x, y)) in d.samples().enumerate() {
            let mut row = vec![h.to_string(), num(j as f64 * sample_period)];
            row.extend(x.iter().map(|v| num(*v)));
            row.extend(y.iter().map(|v| num(*v)));
            wtr.write_record(&row).map_err(csv_io)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

pub fn read_queries<R: Read>(r: R) -> Result<Vec<DVector<f64>>> {
    let mut rdr = reader(r);
    let names = header(&mut rdr)?;
    let names: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    let d = indexed_columns(&names, "in_")?;
    if d == 0 {
        return Err(parse_err(1, "no in_* columns"));
    }
    let mut out = Vec::new();
    for row in data_rows(&mut rdr, d) {
        let (line, rec) = row?;
        let x = (0..d)
            .map(|i| parse_cell(&rec[i], line, names[i]))
            .collect::<Result<Vec<_>>>()?;
        out.push(DVector::from_vec(x));
    }
    if out.is_empty() {
        return Err(parse_err(2, "no query rows"));
    }
    Ok(out)
}

pub fn write_queries<W: Write>(w: W, queries: &[DVector<f64>]) -> Result<()> {
    let d = queries
        .first()
        .ok_or_else(|| Error::InvalidArgument("no queries to write".into()))?
        .len();
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record((0..d).map(|i| format!("in_{i}"))).map_err(csv_io)?;
    for q in queries {
        if q.len() != d {
            return Err(Error::Dimension(format!("query has dim {}, expected {d}", q.len())));
        }
        wtr.write_record(q.iter().map(|v| num(*v))).map_err(csv_io)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn parse_queries(path: impl AsRef<Path>) -> Result<Vec<DVector<f64>>> {
    read_queries(BufReader::new(File::open(path)?))
}

#[derive(Serialize, Deserialize)]
struct ReferenceFile {
    inputs: Vec<Vec<f64>>,
    means: Vec<Vec<f64>>,
    /// Row-major.
    covariances: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    hyperparams: KmpHyperparams,
    reference: ReferenceFile,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

pub fn model_to_json(model: &KmpModel) -> Result<String> {
    let r = model.reference();
    let file = ModelFile {
        version: MODEL_FORMAT_VERSION,
        hyperparams: *model.hyper(),
        reference: ReferenceFile {
            inputs: r.inputs().iter().map(|v| v.as_slice().to_vec()).collect(),
            means: r.means().iter().map(|v| v.as_slice().to_vec()).collect(),
            covariances: r.covariances().iter().map(row_major).collect(),
        },
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

/// Rebuilds a model, including its factorizations, from JSON.
pub fn model_from_json(text: &str) -> Result<KmpModel> {
    let file: ModelFile = serde_json::from_str(text)?;
    if file.version != MODEL_FORMAT_VERSION {
        return Err(Error::InvalidArgument(format!(
            "unsupported model version {} (expected {MODEL_FORMAT_VERSION})",
            file.version
        )));
    }
    let ReferenceFile {
        inputs,
        means,
        covariances,
    } = file.reference;
    let d_o = means.first().map(|m| m.len()).unwrap_or(0);
    let covs = covariances
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            if c.len() != d_o * d_o {
                return Err(Error::Dimension(format!(
                    "covariance {i} has {} entries, expected {}",
                    c.len(),
                    d_o * d_o
                )));
            }
            Ok(DMatrix::from_row_slice(d_o, d_o, &c))
        })
        .collect::<Result<Vec<_>>>()?;
    let reference = ReferenceTrajectory::new(
        inputs.into_iter().map(DVector::from_vec).collect(),
        means.into_iter().map(DVector::from_vec).collect(),
        covs,
    )?;
    KmpModel::train(reference, file.hyperparams)
}

pub fn save_model(path: impl AsRef<Path>, model: &KmpModel) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(model_to_json(model)?.as_bytes())?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<KmpModel> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    model_from_json(&text)
}

fn matrix_columns(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).flat_map(move |r| (0..n).map(move |c| format!("{prefix}_{r}{c}")))
}

/// Per-query mean, row-major covariance and uncertainty ratio.
pub fn write_predictions<W: Write>(w: W, model: &KmpModel, queries: &[DVector<f64>]) -> Result<()> {
    let (d_i, d_o) = (model.dim_in(), model.dim_out());
    let mut wtr = csv::Writer::from_writer(w);
    let mut head: Vec<String> = (0..d_i).map(|i| format!("in_{i}")).collect();
    head.extend((0..d_o).map(|i| format!("mean_{i}")));
    head.extend(matrix_columns("cov", d_o));
    head.push("uncertainty_ratio".into());
    wtr.write_record(&head).map_err(csv_io)?;
    for (i, q) in queries.iter().enumerate() {
        let p = model.predict(q).map_err(|e| Error::at(i, e))?;
        let mut row: Vec<String> = q.iter().map(|v| num(*v)).collect();
        row.extend(p.mean.iter().map(|v| num(*v)));
        row.extend(row_major(&p.covariance).into_iter().map(num));
        row.push(num(p.uncertainty_ratio));
        wtr.write_record(&row).map_err(csv_io)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Per-query stiffness and damping, row-major.
pub fn write_gains<W: Write>(w: W, queries: &[DVector<f64>], gains: &[ControlGains]) -> Result<()> {
    let (d_i, n_c) = (
        queries.first().map(|q| q.len()).unwrap_or(0),
        gains.first().map(|g| g.kp.nrows()).unwrap_or(0),
    );
    let mut wtr = csv::Writer::from_writer(w);
    let mut head: Vec<String> = (0..d_i).map(|i| format!("in_{i}")).collect();
    head.extend(matrix_columns("kp", n_c));
    head.extend(matrix_columns("kv", n_c));
    wtr.write_record(&head).map_err(csv_io)?;
    for (q, g) in queries.iter().zip(gains) {
        let mut row: Vec<String> = q.iter().map(|v| num(*v)).collect();
        row.extend(row_major(&g.kp).into_iter().map(num));
        row.extend(row_major(&g.kv).into_iter().map(num));
        wtr.write_record(&row).map_err(csv_io)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Column names of [`write_trace`], in order.
pub fn trace_columns(trace: &TraceRecord) -> Vec<String> {
    let (d_i, n) = (trace.dim_in, trace.dim_out);
    let mut cols = vec!["time".to_string()];
    cols.extend((0..d_i).map(|i| format!("in_{i}")));
    for label in &trace.labels {
        cols.extend((0..n).map(|i| format!("{label}_mean_{i}")));
        cols.push(format!("{label}_sigma1"));
        cols.push(format!("{label}_uncertainty_ratio"));
        cols.extend((0..n).map(|i| format!("{label}_u_{i}")));
        cols.extend(matrix_columns(&format!("{label}_kp"), n));
        cols.extend(matrix_columns(&format!("{label}_kv"), n));
        cols.push(format!("{label}_share"));
    }
    cols.extend((0..n).map(|i| format!("fused_u_{i}")));
    cols.push("no_confidence".into());
    cols.extend((0..n).map(|i| format!("x_{i}")));
    cols.extend((0..n).map(|i| format!("v_{i}")));
    cols.push("tracking_error".into());
    cols
}

pub fn write_trace<W: Write>(w: W, trace: &TraceRecord) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(trace_columns(trace)).map_err(csv_io)?;
    for s in &trace.steps {
        let mut row = vec![num(s.time)];
        row.extend(s.input.iter().map(|v| num(*v)));
        for c in &s.controllers {
            row.extend(c.mean.iter().map(|v| num(*v)));
            row.push(num(c.sigma1()));
            row.push(num(c.uncertainty_ratio));
            row.extend(c.command.iter().map(|v| num(*v)));
            row.extend(row_major(&c.gains.kp).into_iter().map(num));
            row.extend(row_major(&c.gains.kv).into_iter().map(num));
            row.push(num(c.share));
        }
        row.extend(s.fused.iter().map(|v| num(*v)));
        row.push(u8::from(s.no_confidence).to_string());
        row.extend(s.state.position.iter().map(|v| num(*v)));
        row.extend(s.state.velocity.iter().map(|v| num(*v)));
        row.push(num(s.tracking_error));
        wtr.write_record(&row).map_err(csv_io)?;
    }
    wtr.flush()?;
    Ok(())
}

/// JSON description of the run that produced a trace.
pub fn trace_sidecar(config: &ScenarioConfig, scenario: Option<&str>) -> serde_json::Value {
    let controllers: Vec<_> = config
        .controllers
        .iter()
        .map(|c| {
            json!({
                "label": c.label,
                "hyperparams": c.model.hyper(),
                "reference_points": c.model.len(),
                "r": row_major(&c.r),
                "velocity_weight": c.velocity_weight,
            })
        })
        .collect();
    let signal: Vec<_> = config
        .input_signal
        .samples()
        .map(|(t, v)| json!({ "t": t, "input": v.as_slice() }))
        .collect();
    json!({
        "scenario": scenario,
        "seed": config.seed,
        "dt": config.dt,
        "duration": config.duration,
        "steps": config.steps(),
        "gain_schedule": match config.schedule {
            GainSchedule::InfiniteHorizon => "infinite_horizon",
            GainSchedule::FiniteHorizon => "finite_horizon",
        },
        "initial_state": {
            "position": config.initial_state.position.as_slice(),
            "velocity": config.initial_state.velocity.as_slice(),
        },
        "controllers": controllers,
        "input_signal": signal,
    })
}

pub fn write_sidecar<W: Write>(mut w: W, config: &ScenarioConfig, scenario: Option<&str>) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, &trace_sidecar(config, scenario))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_demonstration_file() {
        let text = "demo,t,in_0,out_0\n0,0.0,0.1,1.0\n0,0.1,0.2,1.5\n";
        let d = read_demonstrations(text.as_bytes()).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].len(), 2);
        assert_eq!((d[0].dim_in(), d[0].dim_out()), (1, 1));
        assert_eq!(d[0].outputs()[1][0], 1.5);
    }

    #[test]
    fn splits_on_demo_id() {
        let text = "demo,t,in_0,in_1,out_0\n3,0,1,2,3\n1,0,4,5,6\n3,1,7,8,9\n";
        let d = read_demonstrations(text.as_bytes()).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].len(), 2);
        assert_eq!(d[0].inputs()[1].as_slice(), &[7.0, 8.0]);
        assert_eq!(d[1].outputs()[0][0], 6.0);
    }

    fn line_of(r: Result<Vec<Demonstration>>) -> u64 {
        match r {
            Err(Error::Parse { line, .. }) => line,
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert_eq!(line_of(read_demonstrations("demo,t,in_0,out_0\n".as_bytes())), 2);
        assert_eq!(line_of(read_demonstrations("".as_bytes())), 1);
        assert_eq!(line_of(read_demonstrations("demo,t,in_0,out_0\n0,0,1,2\n0,1,x,2\n".as_bytes())), 3);
        assert_eq!(line_of(read_demonstrations("demo,t,in_0,out_0\n0,0,1,2\n0,1,1\n".as_bytes())), 3);
        assert_eq!(line_of(read_demonstrations("demo,t,in_1,out_0\n0,0,1,2\n".as_bytes())), 1);
        assert_eq!(line_of(read_demonstrations("t,demo,in_0,out_0\n0,0,1,2\n".as_bytes())), 1);
    }

    #[test]
    fn queries() {
        let q = read_queries("in_0,in_1\n1,2\n3,4\n".as_bytes()).unwrap();
        assert_eq!(q.len(), 2);
        assert_eq!(q[1].as_slice(), &[3.0, 4.0]);
        assert!(read_queries("in_0\n".as_bytes()).is_err());
    }

    #[test]
    fn demonstrations_round_trip() {
        let d = Demonstration::new(
            vec![DVector::from_vec(vec![0.1, 0.2]), DVector::from_vec(vec![1.0 / 3.0, 0.0])],
            vec![DVector::from_vec(vec![-2.5]), DVector::from_vec(vec![1e-17])],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_demonstrations(&mut buf, std::slice::from_ref(&d), 0.02).unwrap();
        let back = read_demonstrations(buf.as_slice()).unwrap();
        assert_eq!(back, vec![d]);
    }
}
