//! Drive the run modes through `RunConfig`, as the `blockqnn` binary does:
//! a short search, an export of its two best blocks, and a report.

use blockqnn::agent::EpsilonSchedule;
use blockqnn::app::{self, ArchitectureDoc, Mode, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = tempfile::tempdir()?;
    let run_dir = root.path().join("search");

    let mut search = RunConfig::new(Mode::SearchBlock, 7, &run_dir);
    search.search.schedule = EpsilonSchedule::new(vec![(1.0, 10), (0.5, 5), (0.1, 5)])?;
    print!("{}", app::run(&search)?.text);

    let mut export = RunConfig::new(Mode::Export, 7, root.path().join("export"));
    export.source = Some(run_dir.clone());
    export.top = 2;
    let exported = app::run(&export)?;
    for path in exported.files.iter().filter(|p| p.ends_with("arch-01.json") || p.ends_with("arch-02.json")) {
        let doc = ArchitectureDoc::read(path)?;
        doc.verify()?;
        println!("{} rebuilds: {} network nodes", path.display(), doc.network.nodes.len());
    }

    let mut report = RunConfig::new(Mode::Report, 0, "");
    report.source = Some(run_dir);
    print!("{}", app::run(&report)?.text);
    println!("snapshot:\n{}", std::fs::read_to_string(root.path().join("search/config.json"))?.lines().take(12).collect::<Vec<_>>().join("\n"));
    Ok(())
}
