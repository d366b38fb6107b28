use std::io::{self, BufReader};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use super::{EvalError, EvalRequest, EvalResult, Evaluator};
use crate::protocol::{read_line, write_message, ResultMessage, ResultStatus};

/// Client for a trainer speaking the job/result line protocol. Each call opens
/// one connection, sends one job and waits for its result.
#[derive(Debug, Clone)]
pub struct ExternalEvaluator {
    pub endpoint: String,
    pub timeout: Duration,
}

impl ExternalEvaluator {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        ExternalEvaluator { endpoint: endpoint.into(), timeout }
    }

    fn io_error(&self, e: io::Error) -> EvalError {
        match e.kind() {
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => EvalError::Timeout(self.timeout),
            _ => EvalError::Io(format!("{}: {e}", self.endpoint)),
        }
    }

    fn exchange(&self, request: &EvalRequest) -> Result<String, EvalError> {
        let addr = self
            .endpoint
            .to_socket_addrs()
            .map_err(|e| self.io_error(e))?
            .next()
            .ok_or_else(|| EvalError::Io(format!("{} resolves to no address", self.endpoint)))?;
        let stream = TcpStream::connect_timeout(&addr, self.timeout).map_err(|e| self.io_error(e))?;
        stream.set_read_timeout(Some(self.timeout)).map_err(|e| self.io_error(e))?;
        stream.set_write_timeout(Some(self.timeout)).map_err(|e| self.io_error(e))?;
        let mut writer = stream.try_clone().map_err(|e| self.io_error(e))?;
        write_message(&mut writer, request).map_err(|e| self.io_error(e))?;
        let mut reader = BufReader::new(stream);
        match read_line(&mut reader).map_err(|e| self.io_error(e))? {
            Some(line) => Ok(line),
            None => Err(EvalError::Io(format!("{} closed the connection without a result", self.endpoint))),
        }
    }
}

/// Checks a trainer reply against its request and turns it into a result.
pub(crate) fn result_from_message(
    request: &EvalRequest,
    message: ResultMessage,
    wall_time: Duration,
) -> Result<EvalResult, EvalError> {
    if message.id != Some(request.id) {
        return Err(EvalError::Protocol(format!("reply for job {:?} while waiting for {}", message.id, request.id)));
    }
    match message.status {
        ResultStatus::Ok => {}
        ResultStatus::Failed => {
            return Err(EvalError::Remote {
                reason: message.reason.unwrap_or_default(),
                retriable: message.retriable,
            })
        }
        ResultStatus::ProtocolError => {
            return Err(EvalError::Protocol(message.reason.unwrap_or_else(|| "rejected by peer".into())))
        }
    }
    let mut complexity = request.complexity()?;
    if let Some(flops) = message.flops {
        complexity.flops = flops;
    }
    let result = EvalResult::new(message.curve, complexity, wall_time)?;
    result.check_epochs(request.epochs)?;
    Ok(result)
}

impl Evaluator for ExternalEvaluator {
    fn evaluate(&self, request: &EvalRequest) -> Result<EvalResult, EvalError> {
        request.check()?;
        let start = Instant::now();
        let line = self.exchange(request)?;
        let message: ResultMessage =
            serde_json::from_str(&line).map_err(|e| EvalError::Protocol(format!("malformed result: {e}")))?;
        result_from_message(request, message, start.elapsed())
    }

    fn name(&self) -> &str {
        "external"
    }
}
