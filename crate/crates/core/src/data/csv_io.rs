//! Trace CSV: header `session_id,content_id,pattern_id,t,stsq,pi,qoe`, one
//! row per second, `qoe` empty for unlabeled traces. Lines starting with `#`
//! are comments. Floats are written with 17 significant digits.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::trace::{check_score, Sample, SessionTrace};
use crate::error::{QoeError, Result};

pub const TRACE_HEADER: [&str; 7] = ["session_id", "content_id", "pattern_id", "t", "stsq", "pi", "qoe"];

/// Renders `v` with 17 significant digits in positional notation, enough
/// for an exact `f64` round trip.
pub fn fmt_sig17(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let int_digits = v.abs().log10().floor() as i32 + 1;
    let decimals = (17 - int_digits).max(0) as usize;
    let s = format!("{v:.decimals$}");
    // log10 can land one off near powers of ten; trust the parse check.
    debug_assert_eq!(s.parse::<f64>().ok(), Some(v));
    s
}

fn csv_err(line: u64, message: impl Into<String>) -> QoeError {
    QoeError::Csv {
        line,
        message: message.into(),
    }
}

fn from_csv_error(e: csv::Error) -> QoeError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => QoeError::Io(io),
        other => csv_err(line, format!("malformed CSV ({other:?})")),
    }
}

/// Reads every session in a CSV stream; rows of one session must be contiguous.
pub fn read_traces<R: Read>(reader: R) -> Result<Vec<SessionTrace>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(from_csv_error)?.clone();
    // the reader sits on the line after the header (comments included)
    let header_line = rdr.position().line().saturating_sub(1).max(1);
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| csv_err(header_line, format!("missing column '{name}'")))
    };
    let idx: Vec<usize> = TRACE_HEADER.iter().map(|n| col(n)).collect::<Result<_>>()?;
    let [c_sid, c_content, c_pattern, c_t, c_stsq, c_pi, c_qoe] = idx[..] else {
        unreachable!()
    };

    let mut sessions: Vec<SessionTrace> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(from_csv_error)?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| record.get(i).unwrap_or("");
        let sid = field(c_sid);
        if sid.is_empty() {
            return Err(csv_err(line, "empty session_id"));
        }
        let t: u32 = field(c_t)
            .parse()
            .map_err(|_| csv_err(line, format!("invalid timestamp '{}' (whole seconds expected)", field(c_t))))?;
        let number = |name: &str, i: usize| -> Result<f64> {
            let v: f64 = field(i)
                .parse()
                .map_err(|_| csv_err(line, format!("invalid number '{}' in column '{name}'", field(i))))?;
            check_score(name, v).map_err(|m| csv_err(line, m))?;
            Ok(v)
        };
        let stsq = number("stsq", c_stsq)?;
        let pi = match field(c_pi) {
            "0" => false,
            "1" => true,
            other => return Err(csv_err(line, format!("pi must be 0 or 1, got '{other}'"))),
        };
        let qoe = if field(c_qoe).is_empty() {
            None
        } else {
            Some(number("qoe", c_qoe)?)
        };
        let optional = |i: usize| Some(field(i).to_string()).filter(|s| !s.is_empty());

        let start_new = sessions.last().map_or(true, |s| s.session_id != sid);
        if start_new {
            if sessions.iter().any(|s| s.session_id == sid) {
                return Err(csv_err(line, format!("rows of session '{sid}' are not contiguous")));
            }
            sessions.push(SessionTrace {
                session_id: sid.to_string(),
                content_id: optional(c_content),
                pattern_id: optional(c_pattern),
                samples: Vec::new(),
            });
        }
        let current = sessions.last_mut().unwrap();
        let expected = current.samples.len() as u32;
        if t != expected {
            return Err(csv_err(
                line,
                format!("timestamp gap (expected t={expected}, found t={t}; sampling must be 1 s)"),
            ));
        }
        current.samples.push(Sample { t, stsq, pi, qoe });
    }
    if sessions.is_empty() {
        return Err(csv_err(header_line, "no data rows"));
    }
    Ok(sessions)
}

pub fn load_traces_csv(path: impl AsRef<Path>) -> Result<Vec<SessionTrace>> {
    read_traces(File::open(path)?)
}

/// Loads a file holding exactly one session.
pub fn load_trace_csv(path: impl AsRef<Path>) -> Result<SessionTrace> {
    let path = path.as_ref();
    let mut sessions = load_traces_csv(path)?;
    if sessions.len() != 1 {
        return Err(QoeError::Trace(format!(
            "{} holds {} sessions, expected one",
            path.display(),
            sessions.len()
        )));
    }
    Ok(sessions.pop().unwrap())
}

/// Every `*.csv` in a directory, sorted by session id.
pub fn load_traces_dir(dir: impl AsRef<Path>) -> Result<Vec<SessionTrace>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    let mut sessions = Vec::new();
    for p in paths {
        let loaded = load_traces_csv(&p).map_err(|e| match e {
            QoeError::Csv { line, message } => QoeError::Csv {
                line,
                message: format!("{}: {message}", p.display()),
            },
            other => other,
        })?;
        sessions.extend(loaded);
    }
    sessions.sort_by(|a, b| a.session_id.cmp(&b.session_id));
    Ok(sessions)
}

pub fn write_traces_csv<W: Write>(writer: W, traces: &[&SessionTrace]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| QoeError::Io(e.into());
    w.write_record(TRACE_HEADER).map_err(io)?;
    for trace in traces {
        for s in &trace.samples {
            w.write_record([
                trace.session_id.as_str(),
                trace.content_id.as_deref().unwrap_or(""),
                trace.pattern_id.as_deref().unwrap_or(""),
                &s.t.to_string(),
                &fmt_sig17(s.stsq),
                if s.pi { "1" } else { "0" },
                &s.qoe.map(fmt_sig17).unwrap_or_default(),
            ])
            .map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_trace_csv(path: impl AsRef<Path>, trace: &SessionTrace) -> Result<()> {
    write_traces_csv(File::create(path)?, &[trace])
}
