//! Trace event records and the TAB-separated trace file.
//!
//! One event per line: `seq TAB time TAB kind TAB txn TAB obj TAB detail`.
//! Empty columns are written as `-`. The detail column is a space-separated
//! list of `key=value` tokens. A trace file ends with a `dump` line followed
//! by the stable state dump.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::object_store::{parse_dump_line, DumpEntry};
use crate::txn_engine::TransactionId;

macro_rules! kinds {
    ($($variant:ident => $text:literal),* $(,)?) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum Kind {
            $($variant),*
        }

        impl Kind {
            pub const ALL: &'static [Kind] = &[$(Kind::$variant),*];

            pub fn as_str(self) -> &'static str {
                match self {
                    $(Kind::$variant => $text),*
                }
            }
        }

        impl FromStr for Kind {
            type Err = ();
            fn from_str(s: &str) -> Result<Self, ()> {
                match s {
                    $($text => Ok(Kind::$variant),)*
                    _ => Err(()),
                }
            }
        }
    };
}

kinds! {
    Create => "create",
    Submit => "submit",
    Register => "register",
    LineRecovery => "line_recovery",
    Begin => "begin",
    Grant => "grant",
    Queue => "queue",
    Read => "read",
    Write => "write",
    SyncEmit => "sync_emit",
    SyncAwait => "sync_await",
    Step => "step",
    TestLine => "test_line",
    Commit1 => "commit1",
    Commit2 => "commit2",
    Abort => "abort",
    Outcome => "outcome",
    Crash => "crash",
    Recover => "recover",
    MsgSend => "msg_send",
    MsgRecv => "msg_recv",
    Drop => "drop",
}

impl Kind {
    /// Kinds emitted by the transaction engine.
    pub fn is_txn_kind(self) -> bool {
        matches!(
            self,
            Kind::Begin | Kind::Grant | Kind::Queue | Kind::Read | Kind::Write | Kind::Commit1 | Kind::Commit2 | Kind::Abort
        )
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Detail(Vec<(String, String)>);

impl Detail {
    pub fn new() -> Self {
        Detail(Vec::new())
    }

    pub fn with(mut self, key: &str, value: impl fmt::Display) -> Self {
        self.0.push((key.to_owned(), value.to_string()));
        self
    }

    pub fn extend(mut self, other: &Detail) -> Self {
        self.0.extend(other.0.iter().cloned());
        self
    }

    pub fn flag(self, key: &str) -> Self {
        self.with(key, 1)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_u64(&self, key: &str) -> Option<u64> {
        self.get(key).and_then(|v| v.parse().ok())
    }

    pub fn has(&self, key: &str) -> bool {
        self.get(key).is_some()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn parse(s: &str) -> Option<Self> {
        if s == "-" {
            return Some(Detail::new());
        }
        let mut out = Vec::new();
        for tok in s.split(' ') {
            let (k, v) = tok.split_once('=')?;
            if k.is_empty() {
                return None;
            }
            out.push((k.to_owned(), v.to_owned()));
        }
        Some(Detail(out))
    }
}

impl fmt::Display for Detail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("-");
        }
        for (i, (k, v)) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub seq: u64,
    pub time: u64,
    pub kind: Kind,
    pub txn: Option<TransactionId>,
    pub obj: Option<String>,
    pub detail: Detail,
}

impl Event {
    pub fn inst(&self) -> Option<u64> {
        self.detail.get_u64("inst")
    }

    pub fn thread(&self) -> Option<u64> {
        self.detail.get_u64("thr")
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let txn = self.txn.map_or_else(|| "-".to_owned(), |t| t.to_string());
        let obj = self.obj.as_deref().unwrap_or("-");
        write!(f, "{}\t{}\t{}\t{}\t{}\t{}", self.seq, self.time, self.kind, txn, obj, self.detail)
    }
}

/// Append-only event log with a virtual clock owned by the caller.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    events: Vec<Event>,
    now: u64,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    /// Advances the clock. Time never moves backwards.
    pub fn set_time(&mut self, t: u64) {
        debug_assert!(t >= self.now, "virtual time went backwards");
        self.now = self.now.max(t);
    }

    pub fn push(&mut self, kind: Kind, txn: Option<TransactionId>, obj: Option<&str>, detail: Detail) -> u64 {
        let seq = self.events.len() as u64;
        self.events.push(Event { seq, time: self.now, kind, txn, obj: obj.map(str::to_owned), detail });
        seq
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&e.to_string());
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("malformed trace at line {line}: {msg}")]
pub struct TraceError {
    pub line: usize,
    pub msg: String,
}

/// A trace file read back from text.
#[derive(Debug, Clone, Default)]
pub struct TraceFile {
    pub events: Vec<Event>,
    pub dump: Vec<DumpEntry>,
}

pub fn write_trace_file(trace: &Trace, stable_dump: &str) -> String {
    let mut out = trace.to_text();
    out.push_str("dump\n");
    out.push_str(stable_dump);
    out
}

pub fn parse_trace_file(text: &str) -> Result<TraceFile, TraceError> {
    let mut file = TraceFile::default();
    let mut in_dump = false;
    let mut last_time = 0;
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let err = |msg: &str| TraceError { line: lineno, msg: msg.to_owned() };
        if line.is_empty() {
            continue;
        }
        if in_dump {
            file.dump.push(parse_dump_line(line).ok_or_else(|| err("bad dump record"))?);
            continue;
        }
        if line == "dump" {
            in_dump = true;
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            return Err(err("expected 6 tab-separated columns"));
        }
        let seq: u64 = cols[0].parse().map_err(|_| err("bad seq"))?;
        if seq != file.events.len() as u64 {
            return Err(err("seq not consecutive"));
        }
        let time: u64 = cols[1].parse().map_err(|_| err("bad time"))?;
        if time < last_time {
            return Err(err("time decreased"));
        }
        last_time = time;
        let kind = cols[2].parse().map_err(|_| err("unknown kind"))?;
        let txn = match cols[3] {
            "-" => None,
            t => Some(t.parse().map_err(|_| err("bad txn"))?),
        };
        let obj = match cols[4] {
            "-" => None,
            o => Some(o.to_owned()),
        };
        let detail = Detail::parse(cols[5]).ok_or_else(|| err("bad detail"))?;
        file.events.push(Event { seq, time, kind, txn, obj, detail });
    }
    if !in_dump {
        return Err(TraceError { line: text.lines().count() + 1, msg: "missing dump section".into() });
    }
    Ok(file)
}
