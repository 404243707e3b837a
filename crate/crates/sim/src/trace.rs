//! JSON-lines trace records.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use swarmlink_core::middleware::sim::NetEvent;
use swarmlink_core::middleware::BusEvent;
use swarmlink_core::model::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Telemetry,
    Command,
    Transition,
    Membership,
    Network,
    Audit,
}

/// One line of a trace. Fields other than `t_us` and `kind` are flat and
/// serialized in key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t_us: u64,
    pub kind: TraceKind,
    #[serde(flatten)]
    pub fields: Map<String, Value>,
}

impl TraceRecord {
    /// `fields` must be a JSON object; anything else yields an empty record.
    pub fn new(t_us: u64, kind: TraceKind, fields: Value) -> Self {
        let fields = match fields {
            Value::Object(m) => m,
            _ => Map::new(),
        };
        TraceRecord { t_us, kind, fields }
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.fields.get(key)
    }

    pub fn str(&self, key: &str) -> Option<&str> {
        self.fields.get(key).and_then(Value::as_str)
    }

    pub fn u64(&self, key: &str) -> Option<u64> {
        self.fields.get(key).and_then(Value::as_u64)
    }

    pub fn bool(&self, key: &str) -> Option<bool> {
        self.fields.get(key).and_then(Value::as_bool)
    }

    pub fn is(&self, kind: TraceKind, event: &str) -> bool {
        self.kind == kind && self.str("event") == Some(event)
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("trace records always serialize")
    }
}

pub fn write_jsonl<W: Write>(out: &mut W, records: &[TraceRecord]) -> io::Result<()> {
    for r in records {
        writeln!(out, "{}", r.to_line())?;
    }
    Ok(())
}

/// Reads a trace back. Errors name the 1-based line.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<TraceRecord>, String> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| format!("line {}: {e}", i + 1))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", i + 1))?);
    }
    Ok(out)
}

/// Trace record for a bus event observed at `node`.
pub fn bus_record(t_us: u64, node: NodeId, ev: &BusEvent) -> TraceRecord {
    use serde_json::json;
    let v = match ev {
        BusEvent::Published { topic, seq, reliable, payload_len } => json!({
            "event": "publish", "node": node, "topic": topic.as_str(), "seq": seq,
            "reliable": reliable, "len": payload_len,
        }),
        BusEvent::Retransmitted { topic, seq, attempt } => json!({
            "event": "retransmit", "node": node, "topic": topic.as_str(), "seq": seq, "attempt": attempt,
        }),
        BusEvent::Expired { topic, seq } => json!({
            "event": "expire", "node": node, "topic": topic.as_str(), "seq": seq,
        }),
        BusEvent::Delivered { from, topic, seq, reliable, sent_us } => json!({
            "event": "deliver", "node": node, "from": from, "topic": topic.as_str(), "seq": seq,
            "reliable": reliable, "sent_us": sent_us,
        }),
        BusEvent::Duplicate { from, topic, seq } => json!({
            "event": "duplicate", "node": node, "from": from, "topic": topic.as_str(), "seq": seq,
        }),
        BusEvent::GapSkipped { from, topic, missing_from, resume_at } => json!({
            "event": "gap_skipped", "node": node, "from": from, "topic": topic.as_str(),
            "missing_from": missing_from, "resume_at": resume_at,
        }),
        BusEvent::DecodeFailed { error } => json!({ "event": "decode_failed", "node": node, "error": error }),
    };
    TraceRecord::new(t_us, TraceKind::Network, v)
}

pub fn net_record(t_us: u64, ev: &NetEvent) -> TraceRecord {
    use serde_json::json;
    match ev {
        NetEvent::Dropped { from, to, partitioned, frame } => {
            let mut v = json!({ "event": "drop", "from": from, "to": to, "partitioned": partitioned });
            if let Some(f) = frame {
                v["topic"] = json!(f.topic);
                v["seq"] = json!(f.seq);
                v["ack"] = json!(f.ack);
            }
            TraceRecord::new(t_us, TraceKind::Network, v)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn line_layout_is_stable() {
        let r = TraceRecord::new(5, TraceKind::Membership, json!({ "zeta": 1, "event": "joined", "alpha": true }));
        assert_eq!(r.to_line(), r#"{"t_us":5,"kind":"membership","alpha":true,"event":"joined","zeta":1}"#);
        let back = read_jsonl(io::Cursor::new(format!("{}\n\n", r.to_line()))).unwrap();
        assert_eq!(back, vec![r]);
    }

    #[test]
    fn bad_line_is_located() {
        let e = read_jsonl(io::Cursor::new("{\"t_us\":1,\"kind\":\"audit\"}\nnope\n")).unwrap_err();
        assert!(e.starts_with("line 2"), "{e}");
    }
}
