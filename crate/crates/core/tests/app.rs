use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use blockqnn::app::{self, parse_schedule, ArchitectureDoc, AppError, Mode, RunConfig, TopEntry};
use blockqnn::search::Master;
use tempfile::TempDir;

fn small(mode: Mode, seed: u64, out: impl Into<PathBuf>) -> RunConfig {
    let mut c = RunConfig::new(mode, seed, out);
    c.search.schedule = parse_schedule("1.0:6,0.5:4").unwrap();
    c.search.batch_size = 16;
    c.checkpoint_every = 3;
    c
}

/// Every file under `dir` with its bytes.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn read(path: impl AsRef<Path>) -> String {
    fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

#[test]
fn same_seed_writes_identical_artifacts() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    app::run(&small(Mode::SearchBlock, 5, &a)).unwrap();
    app::run(&small(Mode::SearchBlock, 5, &b)).unwrap();
    for f in ["iterations.csv", "top.json", "events.jsonl", "replay.jsonl", "qtable.json", "checkpoint.json"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f} differs");
    }
    let csv = read(a.join("iterations.csv"));
    assert!(csv.starts_with("iteration,epsilon,mean_reward,max_reward,mean_accuracy,max_accuracy,completed,failed\n"));
    assert_eq!(csv.lines().count(), 11);

    let c = tmp.path().join("c");
    app::run(&small(Mode::SearchBlock, 6, &c)).unwrap();
    assert_ne!(read(a.join("iterations.csv")), read(c.join("iterations.csv")));
}

#[test]
fn an_existing_run_is_not_overwritten() {
    let tmp = TempDir::new().unwrap();
    let c = small(Mode::SearchBlock, 1, tmp.path().join("run"));
    app::run(&c).unwrap();
    let before = snapshot(&c.output);
    let e = app::run(&c).unwrap_err();
    assert!(matches!(&e, AppError::Usage { field, .. } if field == "output"), "{e}");
    assert_eq!(e.exit_code(), 2);
    assert_eq!(snapshot(&c.output), before);
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let tmp = TempDir::new().unwrap();
    let whole = small(Mode::SearchBlock, 11, tmp.path().join("whole"));
    app::run(&whole).unwrap();

    // leave a run the way a crash after iteration 4 would
    let cut = small(Mode::SearchBlock, 11, tmp.path().join("cut"));
    fs::create_dir_all(&cut.output).unwrap();
    fs::write(cut.output.join("config.json"), serde_json::to_string_pretty(&cut).unwrap()).unwrap();
    let cluster = cut.transport.build(cut.evaluator.build(), cut.search.seed).unwrap();
    let mut master = Master::new(cut.search.clone(), cluster).unwrap();
    for _ in 0..4 {
        master.step().unwrap();
    }
    fs::write(cut.output.join("checkpoint.json"), serde_json::to_string(&master.checkpoint()).unwrap()).unwrap();

    let mut resumed = cut.clone();
    resumed.resume = true;
    app::run(&resumed).unwrap();
    for f in ["iterations.csv", "top.json", "qtable.json", "replay.jsonl"] {
        assert_eq!(read(whole.output.join(f)), read(cut.output.join(f)), "{f} differs after resuming");
    }
}

#[test]
fn resume_refuses_a_different_configuration() {
    let tmp = TempDir::new().unwrap();
    let c = small(Mode::SearchBlock, 2, tmp.path().join("run"));
    app::run(&c).unwrap();
    let mut other = c.clone();
    other.search.batch_size = 8;
    other.resume = true;
    let e = app::run(&other).unwrap_err();
    assert!(matches!(&e, AppError::Usage { field, .. } if field == "resume"), "{e}");

    let mut fresh = small(Mode::SearchBlock, 2, tmp.path().join("nothing"));
    fresh.resume = true;
    assert_eq!(app::run(&fresh).unwrap_err().exit_code(), 2);
}

#[test]
fn export_writes_documents_that_rebuild_exactly() {
    let tmp = TempDir::new().unwrap();
    let run = small(Mode::SearchBlock, 4, tmp.path().join("run"));
    app::run(&run).unwrap();
    let mut ex = RunConfig::new(Mode::Export, 0, tmp.path().join("export"));
    ex.source = Some(run.output.clone());
    ex.top = 2;
    ex.repeats = 3;
    app::run(&ex).unwrap();

    let top: Vec<TopEntry> = serde_json::from_str(&read(run.output.join("top.json"))).unwrap();
    for rank in 1..=2 {
        let doc = ArchitectureDoc::read(&ex.output.join(format!("arch-{rank:02}.json"))).unwrap();
        doc.verify().unwrap();
        assert_eq!(doc.rank, rank);
        assert_eq!(doc.repeats, Some(3));
        assert_eq!(doc.codes, top[rank - 1].codes);
        assert_eq!(doc.text, top[rank - 1].text);
        assert_eq!(doc.reward, top[rank - 1].reward);
    }
    assert!(!ex.output.join("arch-03.json").exists());

    // a tampered document fails verification
    let mut doc = ArchitectureDoc::read(&ex.output.join("arch-01.json")).unwrap();
    doc.network.nodes.pop();
    assert!(doc.verify().is_err());
}

#[test]
fn report_leaves_the_run_untouched() {
    let tmp = TempDir::new().unwrap();
    let c = small(Mode::CompareRandom, 3, tmp.path().join("cmp"));
    app::run(&c).unwrap();
    let before = snapshot(&c.output);
    let mut r = RunConfig::new(Mode::Report, 0, PathBuf::new());
    r.source = Some(c.output.clone());
    let text = app::run(&r).unwrap().text;
    assert_eq!(snapshot(&c.output), before);
    assert!(text.contains("[qlearning]") && text.contains("[random]"), "{text}");
    assert!(text.contains("top-5 after 10 iterations"), "{text}");

    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    r.source = Some(empty);
    assert_eq!(app::run(&r).unwrap_err().exit_code(), 2);
}

#[test]
fn compare_writes_one_row_per_iteration() {
    let tmp = TempDir::new().unwrap();
    let c = small(Mode::CompareRandom, 8, tmp.path().join("cmp"));
    app::run(&c).unwrap();
    let csv = read(c.output.join("compare.csv"));
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "iteration,epsilon,qlearning_top5_reward,random_top5_reward,qlearning_top5_accuracy,random_top5_accuracy"
    );
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|f| f.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 10);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0], (i + 1) as f64);
        assert!(r.iter().all(|v| v.is_finite()));
    }
    // running top-5 means never decrease
    for w in rows.windows(2) {
        assert!(w[1][2] >= w[0][2] && w[1][3] >= w[0][3]);
    }
    for arm in ["qlearning", "random"] {
        assert_eq!(read(c.output.join(arm).join("iterations.csv")).lines().count(), 11);
    }
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_blockqnn"));
    c.env_remove("BLOCKQNN_OUTPUT_ROOT").env_remove("RUST_LOG");
    c
}

const QUICK: [&str; 4] = ["--schedule", "1.0:3,0.5:2", "--batch-size", "8"];

#[test]
fn bin_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("run");
    let ok = bin().args(["search-block", "--seed", "1", "--out"]).arg(&out).args(QUICK).output().unwrap();
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("best reward"));

    let again = bin().args(["search-block", "--seed", "1", "--out"]).arg(&out).args(QUICK).output().unwrap();
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("output"));

    let zero = bin()
        .args(["search-block", "--batch-size", "0", "--out"])
        .arg(tmp.path().join("z"))
        .output()
        .unwrap();
    assert_eq!(zero.status.code(), Some(2));
    assert!(!tmp.path().join("z").exists());

    assert_eq!(bin().arg("no-such-mode").output().unwrap().status.code(), Some(2));
    assert_eq!(bin().args(["search-block", "--schedule", "fast"]).output().unwrap().status.code(), Some(2));

    let corrupt = tmp.path().join("corrupt");
    fs::create_dir(&corrupt).unwrap();
    fs::write(corrupt.join("checkpoint.json"), "{").unwrap();
    let bad = bin().args(["export", "--from"]).arg(&corrupt).output().unwrap();
    assert_eq!(bad.status.code(), Some(3), "{}", String::from_utf8_lossy(&bad.stderr));
}

#[test]
fn bin_honors_the_output_root_and_reruns_snapshots() {
    let tmp = TempDir::new().unwrap();
    let ok = bin()
        .env("BLOCKQNN_OUTPUT_ROOT", tmp.path())
        .args(["search-block", "--seed", "3"])
        .args(QUICK)
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let run = tmp.path().join("search-block-seed3");
    assert!(run.join("iterations.csv").is_file());

    let again = tmp.path().join("again");
    let rerun = bin().args(["rerun", "--config"]).arg(run.join("config.json")).arg("--out").arg(&again).output().unwrap();
    assert_eq!(rerun.status.code(), Some(0), "{}", String::from_utf8_lossy(&rerun.stderr));
    assert_eq!(read(run.join("iterations.csv")), read(again.join("iterations.csv")));
    assert_eq!(read(run.join("top.json")), read(again.join("top.json")));
}
