//! A toy trainer speaking the job/result line protocol, used through
//! `ExternalEvaluator`. A real trainer would build the network from the job's
//! codes and train it for `epochs` epochs.

use std::io::{BufReader, Write};
use std::net::TcpListener;
use std::thread;
use std::time::Duration;

use blockqnn::complexity::ComplexityReport;
use blockqnn::evaluation::{EvalError, EvalRequest, EvalResult, Evaluator, ExternalEvaluator};
use blockqnn::nsc::parse_block;
use blockqnn::protocol::{parse_inbound, read_line, write_message, Inbound, ResultMessage};

fn train(job: &EvalRequest) -> Result<EvalResult, EvalError> {
    let complexity = ComplexityReport::of_block(&job.codes)?;
    // deeper blocks learn a little more, in this toy
    let ceiling = 0.5 + 0.02 * job.codes.len().min(10) as f64;
    let curve = (1..=job.epochs).map(|t| ceiling * t as f64 / job.epochs as f64).collect();
    EvalResult::new(curve, complexity, Duration::from_millis(1))
}

fn main() -> std::io::Result<()> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            let mut out = stream.try_clone().unwrap();
            let mut input = BufReader::new(stream);
            while let Ok(Some(line)) = read_line(&mut input) {
                let reply = match parse_inbound(&line) {
                    Ok(Inbound::Job(job)) => match train(&job) {
                        Ok(r) => ResultMessage::ok(job.id, &r),
                        Err(e) => ResultMessage::failed(job.id, &e),
                    },
                    Ok(Inbound::Control(_)) => continue,
                    Err(reply) => reply,
                };
                write_message(&mut out, &reply).unwrap();
                out.flush().unwrap();
            }
        }
    });

    let trainer = ExternalEvaluator::new(addr.to_string(), Duration::from_secs(5));
    for (id, text) in ["1,7,0,0,0", "1,1,3,0,0;2,1,3,1,0;3,7,0,0,0", "1,1,3,0,0;2,5,0,1,1;3,7,0,0,0"].iter().enumerate() {
        let job = EvalRequest::block(id as u64, parse_block(text).unwrap(), 12, 0);
        match trainer.evaluate(&job) {
            Ok(r) => println!("{text}: accuracy {:.3}, {} FLOPs", r.early_stop_accuracy, r.complexity.flops),
            Err(e) => println!("{text}: {e} (retriable: {})", e.is_retriable()),
        }
    }
    Ok(())
}
