//! Newline-delimited JSON messages shared by trainers, compute nodes and the
//! controller.
//!
//! ```text
//! job      {"id":3,"codes":[[1,1,3,0,0],[2,7,0,0,0]],"epochs":12,"seed":7}
//! result   {"id":3,"status":"ok","curve":[...],"flops":9437184,"density":0.6666666666666666,"params":9280}
//! failure  {"id":3,"status":"failed","reason":"structure error: ...","retriable":false}
//! control  {"type":"health"} | {"type":"shutdown"}
//! ```
//!
//! A line that is neither a job nor a control message is answered with
//! `{"id":null,"status":"protocol_error","reason":...}` and the connection stays open.

use std::io::{self, BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::evaluation::{EvalError, EvalRequest, EvalResult};

/// Upper bound on one message line.
pub const MAX_LINE_BYTES: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResultStatus {
    Ok,
    Failed,
    ProtocolError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultMessage {
    pub id: Option<u64>,
    pub status: ResultStatus,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub curve: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flops: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub retriable: bool,
}

impl ResultMessage {
    pub fn ok(id: u64, result: &EvalResult) -> Self {
        ResultMessage {
            id: Some(id),
            status: ResultStatus::Ok,
            curve: result.accuracy_curve.clone(),
            flops: Some(result.complexity.flops),
            density: Some(result.complexity.density),
            params: Some(result.complexity.params),
            reason: None,
            retriable: false,
        }
    }

    pub fn failed(id: u64, error: &EvalError) -> Self {
        ResultMessage {
            id: Some(id),
            status: ResultStatus::Failed,
            curve: Vec::new(),
            flops: None,
            density: None,
            params: None,
            reason: Some(error.to_string()),
            retriable: error.is_retriable(),
        }
    }

    pub fn protocol_error(id: Option<u64>, reason: impl Into<String>) -> Self {
        ResultMessage {
            id,
            status: ResultStatus::ProtocolError,
            curve: Vec::new(),
            flops: None,
            density: None,
            params: None,
            reason: Some(reason.into()),
            retriable: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ControlMessage {
    Shutdown,
    Health,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthReply {
    #[serde(rename = "type")]
    pub kind: String,
    pub status: String,
    pub in_flight: usize,
    pub served: u64,
}

/// Anything a compute node may receive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Inbound {
    Control(ControlMessage),
    Job(EvalRequest),
}

/// Parses one inbound line, returning a ready-made protocol-error reply on failure.
pub fn parse_inbound(line: &str) -> Result<Inbound, ResultMessage> {
    match serde_json::from_str::<Inbound>(line) {
        Ok(m) => Ok(m),
        Err(_) => {
            // salvage the id when the line is an object with a numeric id
            let id = serde_json::from_str::<serde_json::Value>(line).ok().and_then(|v| v.get("id")?.as_u64());
            let reason = match serde_json::from_str::<serde_json::Value>(line) {
                Err(e) => format!("malformed JSON: {e}"),
                Ok(_) => "not a job or control message".to_string(),
            };
            Err(ResultMessage::protocol_error(id, reason))
        }
    }
}

pub fn write_message<W: Write, T: Serialize>(out: &mut W, message: &T) -> io::Result<()> {
    let mut line = serde_json::to_vec(message).map_err(io::Error::other)?;
    line.push(b'\n');
    out.write_all(&line)?;
    out.flush()
}

/// Reads one line without the trailing newline. `None` at end of stream.
pub fn read_line<R: BufRead>(input: &mut R) -> io::Result<Option<String>> {
    let mut buf = Vec::new();
    let n = input.by_ref().take(MAX_LINE_BYTES as u64 + 1).read_until(b'\n', &mut buf)?;
    if n == 0 {
        return Ok(None);
    }
    if buf.len() > MAX_LINE_BYTES {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "message line too long"));
    }
    while matches!(buf.last(), Some(b'\n' | b'\r')) {
        buf.pop();
    }
    String::from_utf8(buf).map(Some).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}
