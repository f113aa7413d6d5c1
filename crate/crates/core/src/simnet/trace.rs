use std::fmt::Write as _;
use std::io;
use std::path::Path;

use serde_json::Value;

use crate::app::ProcessId;

/// One trace line: time, emitting process (none for the simulator itself),
/// event name and ordered fields.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub t: u64,
    pub proc: Option<ProcessId>,
    pub ev: String,
    pub fields: Vec<(String, Value)>,
}

impl TraceRecord {
    pub fn get(&self, key: &str) -> Option<&Value> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.get(key).and_then(Value::as_str)
    }

    pub fn get_u64(&self, key: &str) -> Option<u64> {
        self.get(key).and_then(Value::as_u64)
    }

    /// `{"t":..,"proc":..,"ev":..,<fields in emission order>}`
    pub fn to_json_line(&self) -> String {
        let mut out = String::with_capacity(64);
        write!(out, "{{\"t\":{},\"proc\":", self.t).unwrap();
        match self.proc {
            Some(p) => write!(out, "{}", p.0).unwrap(),
            None => out.push_str("null"),
        }
        out.push_str(",\"ev\":");
        out.push_str(&Value::String(self.ev.clone()).to_string());
        for (k, v) in &self.fields {
            out.push(',');
            out.push_str(&Value::String(k.clone()).to_string());
            out.push(':');
            out.push_str(&v.to_string());
        }
        out.push('}');
        out
    }
}

#[derive(Debug, Clone, Default)]
pub struct Trace {
    records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: TraceRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn events<'a>(&'a self, ev: &'a str) -> impl Iterator<Item = &'a TraceRecord> + 'a {
        self.records.iter().filter(move |r| r.ev == ev)
    }

    pub fn of_process(&self, p: ProcessId) -> impl Iterator<Item = &TraceRecord> + '_ {
        self.records.iter().filter(move |r| r.proc == Some(p))
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.to_json_line());
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.to_jsonl())
    }
}
