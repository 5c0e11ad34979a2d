//! Trace records: one line each, `tick \t replica \t kind \t detail`, where
//! replica is `-` for harness records and detail is space-separated
//! `key=value` pairs. Values never contain spaces, tabs or `=`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::types::ProcessId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("trace line {line}: {reason}")]
pub struct ParseError {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub tick: u64,
    pub replica: Option<ProcessId>,
    pub kind: String,
    pub fields: Vec<(String, String)>,
}

impl TraceRecord {
    pub fn new(tick: u64, replica: Option<ProcessId>, kind: &str) -> Self {
        TraceRecord {
            tick,
            replica,
            kind: kind.to_string(),
            fields: Vec::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl fmt::Display) -> Self {
        self.fields.push((key.to_string(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Parses field `key`, reporting a missing or malformed value.
    pub fn field<T: FromStr>(&self, key: &str) -> Result<T, String> {
        let raw = self
            .get(key)
            .ok_or_else(|| format!("{} record lacks {key}", self.kind))?;
        raw.parse()
            .map_err(|_| format!("{} record has bad {key}={raw:?}", self.kind))
    }

    pub fn render(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t", self.tick)?;
        match self.replica {
            Some(p) => write!(f, "{p}")?,
            None => f.write_str("-")?,
        }
        write!(f, "\t{}\t", self.kind)?;
        for (i, (k, v)) in self.fields.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

pub fn parse_line(line: &str, lineno: usize) -> Result<TraceRecord, ParseError> {
    let err = |reason: String| ParseError {
        line: lineno,
        reason,
    };
    let mut cols = line.split('\t');
    let (Some(tick), Some(replica), Some(kind), Some(detail), None) = (
        cols.next(),
        cols.next(),
        cols.next(),
        cols.next(),
        cols.next(),
    ) else {
        return Err(err("expected four tab-separated columns".into()));
    };
    let tick = tick
        .parse()
        .map_err(|_| err(format!("bad tick {tick:?}")))?;
    let replica = match replica {
        "-" => None,
        r => Some(
            r.parse::<ProcessId>()
                .map_err(|_| err(format!("bad replica {r:?}")))?,
        ),
    };
    if kind.is_empty() || kind.contains(' ') {
        return Err(err(format!("bad kind {kind:?}")));
    }
    let mut fields = Vec::new();
    for pair in detail.split(' ').filter(|s| !s.is_empty()) {
        let Some((k, v)) = pair.split_once('=') else {
            return Err(err(format!("field {pair:?} is not key=value")));
        };
        if k.is_empty() || v.contains('=') {
            return Err(err(format!("field {pair:?} is not key=value")));
        }
        fields.push((k.to_string(), v.to_string()));
    }
    Ok(TraceRecord {
        tick,
        replica,
        kind: kind.to_string(),
        fields,
    })
}

/// Parses a whole trace; blank lines are ignored, line numbers are 1-based.
pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>, ParseError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, i + 1))
        .collect()
}

pub fn render_trace(records: &[TraceRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.render());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let r = TraceRecord::new(12, Some(ProcessId(2)), "decide")
            .with("bid", "(0,0.1,p1)")
            .with("slot", 4)
            .with("cmd", "user:c1#3");
        let line = r.render();
        assert_eq!(line, "12\tp2\tdecide\tbid=(0,0.1,p1) slot=4 cmd=user:c1#3");
        assert_eq!(parse_line(&line, 1).unwrap(), r);
        let bare = TraceRecord::new(0, None, "end");
        assert_eq!(parse_line(&bare.render(), 1).unwrap(), bare);
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse_line("x\tp1\tdecide\t", 1).is_err());
        assert!(parse_line("1\tp1\tdecide", 1).is_err());
        assert!(parse_line("1\tp1\tdecide\tslot", 1).is_err());
        assert!(parse_line("1\tq\tdecide\tslot=1", 1).is_err());
        let e = parse_trace("0\t-\tend\t\nbad\n").unwrap_err();
        assert_eq!(e.line, 2);
    }
}
