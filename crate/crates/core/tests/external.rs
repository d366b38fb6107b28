use std::io::BufReader;
use std::net::TcpListener;
use std::thread;
use std::time::{Duration, Instant};

use blockqnn::evaluation::{EvalError, EvalRequest, Evaluator, ExternalEvaluator};
use blockqnn::nsc::parse_block;
use blockqnn::protocol::read_line;

/// A one-shot trainer that answers the first job with whatever `reply` makes of it.
fn fake_trainer(reply: impl FnOnce(EvalRequest) -> Option<String> + Send + 'static) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let line = read_line(&mut reader).unwrap().unwrap();
        let job: EvalRequest = serde_json::from_str(&line).unwrap();
        match reply(job) {
            Some(text) => {
                let mut w = stream;
                std::io::Write::write_all(&mut w, text.as_bytes()).unwrap();
                std::io::Write::write_all(&mut w, b"\n").unwrap();
            }
            // hold the connection open without answering
            None => thread::sleep(Duration::from_secs(3)),
        }
    });
    addr
}

fn job(id: u64) -> EvalRequest {
    EvalRequest::block(id, parse_block("1,1,3,0,0;2,7,0,0,0").unwrap(), 4, 1)
}

#[test]
fn echo_trainer_result_is_taken_as_is() {
    let addr = fake_trainer(|j| Some(format!(r#"{{"id":{},"status":"ok","curve":[0.1,0.2,0.3,0.4]}}"#, j.id)));
    let r = ExternalEvaluator::new(addr, Duration::from_secs(5)).evaluate(&job(7)).unwrap();
    assert_eq!(r.accuracy_curve, vec![0.1, 0.2, 0.3, 0.4]);
    assert_eq!(r.complexity, job(7).complexity().unwrap());
}

#[test]
fn trainer_failure_is_not_retriable_unless_flagged() {
    let addr = fake_trainer(|j| Some(format!(r#"{{"id":{},"status":"failed","reason":"out of memory"}}"#, j.id)));
    let e = ExternalEvaluator::new(addr, Duration::from_secs(5)).evaluate(&job(1)).unwrap_err();
    assert!(matches!(&e, EvalError::Remote { reason, retriable: false } if reason == "out of memory"));
    assert!(!e.is_retriable());

    let addr = fake_trainer(|j| Some(format!(r#"{{"id":{},"status":"failed","reason":"gpu busy","retriable":true}}"#, j.id)));
    let e = ExternalEvaluator::new(addr, Duration::from_secs(5)).evaluate(&job(2)).unwrap_err();
    assert!(e.is_retriable());
}

#[test]
fn mismatched_or_short_replies_are_protocol_errors() {
    let addr = fake_trainer(|_| Some(r#"{"id":99,"status":"ok","curve":[0.1,0.2,0.3,0.4]}"#.into()));
    let e = ExternalEvaluator::new(addr, Duration::from_secs(5)).evaluate(&job(3)).unwrap_err();
    assert!(matches!(e, EvalError::Protocol(_)), "{e:?}");

    let addr = fake_trainer(|j| Some(format!(r#"{{"id":{},"status":"ok","curve":[0.5]}}"#, j.id)));
    assert!(ExternalEvaluator::new(addr, Duration::from_secs(5)).evaluate(&job(4)).is_err());

    let addr = fake_trainer(|_| Some("garbage".into()));
    let e = ExternalEvaluator::new(addr, Duration::from_secs(5)).evaluate(&job(5)).unwrap_err();
    assert!(matches!(e, EvalError::Protocol(_)), "{e:?}");
}

#[test]
fn silent_trainer_times_out_retriably() {
    let addr = fake_trainer(|_| None);
    let start = Instant::now();
    let e = ExternalEvaluator::new(addr, Duration::from_millis(300)).evaluate(&job(6)).unwrap_err();
    assert!(matches!(e, EvalError::Timeout(_)), "{e:?}");
    assert!(e.is_retriable());
    assert!(start.elapsed() < Duration::from_secs(2));
}

#[test]
fn refused_connection_is_an_io_error() {
    let dead = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let e = ExternalEvaluator::new(dead.to_string(), Duration::from_secs(2)).evaluate(&job(8)).unwrap_err();
    assert!(matches!(e, EvalError::Io(_)), "{e:?}");
    assert!(e.is_retriable());
}
