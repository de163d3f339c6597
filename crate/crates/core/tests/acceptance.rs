//! Runs the ten acceptance criteria and prints one PASS/FAIL line each.

use std::time::{Duration, Instant};

use fiocalc::cli::{execute, Command};
use fiocalc::validate::{run_criterion, SuiteOptions, CRITERIA};

/// Wall-clock limits for the criteria that carry one.
fn limit(id: u32) -> Option<Duration> {
    match id {
        1 => Some(Duration::from_secs(1)),
        2 => Some(Duration::from_secs(10)),
        3 => Some(Duration::from_secs(60)),
        _ => None,
    }
}

const DETERMINISM_CONFIG: &str = "[validate]\ncriteria = [1, 2, 3, 4, 5, 7, 9]\n";

#[test]
fn acceptance() {
    let opts = SuiteOptions::default();
    let mut failed = Vec::new();
    for &(id, name) in &CRITERIA {
        let start = Instant::now();
        let (pass, detail) = if id == 10 {
            // Two full `validate` invocations must render identical bytes.
            let a = execute(Command::Validate, DETERMINISM_CONFIG, opts.seed).expect("validate runs");
            let b = execute(Command::Validate, DETERMINISM_CONFIG, opts.seed).expect("validate runs");
            let (ra, rb) = (a.report.render(), b.report.render());
            (ra == rb && a.pass, format!("{} bytes, identical: {}", ra.len(), ra == rb))
        } else {
            let c = run_criterion(id, &opts);
            (c.pass, c.details.to_string())
        };
        let elapsed = start.elapsed();
        let in_time = limit(id).is_none_or(|l| elapsed <= l);
        let ok = pass && in_time;
        println!("{} criterion {id} ({name}) in {:.2}s", if ok { "PASS" } else { "FAIL" }, elapsed.as_secs_f64());
        if !ok {
            println!("    {detail}");
            if !in_time {
                println!("    over the {:?} limit", limit(id).unwrap());
            }
            failed.push(id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
