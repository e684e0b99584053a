//! Batch runs: every crash point of a scenario, or a range of seeds.

use std::fmt::Write as _;

use super::{run, CrashPoint, Scenario, SimOptions, ValidationError};
use crate::report::Report;

/// Ticks between an injected crash and the matching recovery.
pub const RECOVER_DELAY: u64 = 15;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepRow {
    /// `k=12 node=n2` or `seed=7`.
    pub params: String,
    pub events: usize,
    pub committed: usize,
    pub aborted: usize,
    pub unfinished: usize,
    /// Crashes that happened, each checked against stable storage.
    pub crashes: usize,
    pub passed: bool,
    pub failures: Vec<String>,
    pub dump: String,
}

fn row(params: String, sc: &Scenario, opts: &SimOptions) -> Result<SweepRow, ValidationError> {
    let r = run(sc, opts)?;
    let (passed, failures, committed, aborted, unfinished) = match Report::from_run(&r) {
        Ok(rep) => (rep.passed(), rep.failures(), rep.committed(), rep.aborted(), rep.unfinished()),
        Err(e) => (false, vec![format!("malformed trace: {e}")], 0, 0, 0),
    };
    let crashes = r.live.crashes;
    Ok(SweepRow { params, events: r.trace.len(), committed, aborted, unfinished, crashes, passed, failures, dump: r.dump })
}

fn parallel<T: Send, R: Send>(items: Vec<T>, f: impl Fn(T) -> R + Sync) -> Vec<R> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    let chunk = items.len().div_ceil(workers).max(1);
    let mut chunks: Vec<Vec<T>> = Vec::new();
    let mut it = items.into_iter().peekable();
    while it.peek().is_some() {
        chunks.push(it.by_ref().take(chunk).collect());
    }
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|c| s.spawn(move || c.into_iter().map(f).collect::<Vec<R>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("sweep worker panicked")).collect()
    })
}

/// Crashes each node once the trace of the crash-free run reaches each
/// event position, recovering it `recover_after` ticks later.
pub fn crash_sweep(sc: &Scenario, opts: &SimOptions, recover_after: Option<u64>) -> Result<Vec<SweepRow>, ValidationError> {
    let base = run(sc, opts)?;
    let mut points = Vec::new();
    for k in 0..base.trace.len() {
        for n in &sc.nodes {
            points.push(CrashPoint { after_events: k, node: n.clone(), recover_after });
        }
    }
    parallel(points, |cp| {
        let params = format!("k={} node={}", cp.after_events, cp.node);
        let o = SimOptions { crash_point: Some(cp), ..opts.clone() };
        row(params, sc, &o)
    })
    .into_iter()
    .collect()
}

/// One run per seed in `from..=to`.
pub fn seed_sweep(sc: &Scenario, opts: &SimOptions, from: u64, to: u64) -> Result<Vec<SweepRow>, ValidationError> {
    sc.validate()?;
    parallel((from..=to).collect(), |seed| {
        let o = SimOptions { seed: Some(seed), ..opts.clone() };
        row(format!("seed={seed}"), sc, &o)
    })
    .into_iter()
    .collect()
}

pub fn format_table(rows: &[SweepRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<20} {:>6} {:>9} {:>7} {:>10}  verdict", "run", "events", "committed", "aborted", "unfinished");
    for r in rows {
        let v = if r.passed { "ok" } else { "FAIL" };
        let _ = writeln!(s, "{:<20} {:>6} {:>9} {:>7} {:>10}  {v}", r.params, r.events, r.committed, r.aborted, r.unfinished);
        for f in &r.failures {
            let _ = writeln!(s, "    {f}");
        }
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    let _ = writeln!(s, "{} runs, {} failed", rows.len(), failed);
    s
}
