//! Trace records: `time_ns<TAB>node<TAB>event<TAB>key=value,...`.

use std::fmt;
use std::io::{self, Write};

use crate::network::NodeId;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRecord {
    pub time_ns: u64,
    /// `None` is the environment.
    pub node: Option<NodeId>,
    pub event: String,
    pub detail: Vec<(String, String)>,
}

impl TraceRecord {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.detail.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t", self.time_ns)?;
        match self.node {
            Some(n) => write!(f, "{n}")?,
            None => f.write_str("env")?,
        }
        write!(f, "\t{}\t", self.event)?;
        for (i, (k, v)) in self.detail.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Trace {
    pub header: Vec<String>,
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn push(&mut self, time_ns: u64, node: Option<NodeId>, event: &str, detail: Vec<(&str, String)>) {
        debug_assert!(self.records.last().is_none_or(|r| r.time_ns <= time_ns));
        self.records.push(TraceRecord {
            time_ns,
            node,
            event: event.to_string(),
            detail: detail.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        });
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        for h in &self.header {
            writeln!(w, "# {h}")?;
        }
        for r in &self.records {
            writeln!(w, "{r}")?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("trace is UTF-8")
    }

    pub fn events<'a>(&'a self, event: &'a str) -> impl Iterator<Item = &'a TraceRecord> + 'a {
        self.records.iter().filter(move |r| r.event == event)
    }

    pub fn first<'a>(&'a self, event: &'a str) -> Option<&'a TraceRecord> {
        self.events(event).next()
    }
}
