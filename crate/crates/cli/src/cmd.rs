use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Lines, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;
use serde_json::json;

use planforge_core::evalharness::{
    evaluate_bleu, load_jsonl, top1, FreeFormGold, McqGold, PredictionRecord, BLEU_PROTOCOL, DEFAULT_CATEGORIES,
};
use planforge_core::ingest::{ingest_manifest, CorpusManifest, IngestOptions, Strictness};
use planforge_core::monitor::{coalesce, Alert};
use planforge_core::orchestrator::{
    self, write_task_shards, RunConfig, RunOptions, SimulatedTrainer, TaskData, ALERTS_LOG,
};
use planforge_core::rng::SplitMix64;
use planforge_core::schema::{validate_sample, Sample, TaskType};

use crate::fail::{CmdResult, Failure};
use crate::{EvalArgs, Globals, IngestArgs, KillTestArgs, ReportArgs, ShardArgs, TrainArgs};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const INGEST_REPORT: &str = "ingest_report.json";
pub const RUN_SUMMARY: &str = "run_summary.json";
pub const KILL_TEST_REPORT: &str = "kill_test.json";
pub const EVAL_REPORT: &str = "eval_report.json";

fn io_fail(path: &Path) -> impl FnOnce(io::Error) -> Failure + '_ {
    move |e| Failure::io(e).context(format!("{}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("json");
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(io_fail(path))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(io_fail(dir))
}

pub fn ingest(a: &IngestArgs, g: &Globals) -> CmdResult {
    if let Some(f) = a.adversarial {
        if !(0.0..=1.0).contains(&f) {
            return Err(Failure::usage("--adversarial must lie in [0, 1]"));
        }
    }
    let manifest = CorpusManifest::load(&a.manifest)?;
    let base = a.manifest.parent().unwrap_or(Path::new("."));
    create_dir(&a.out)?;
    let corpus_path = a.out.join(CORPUS_FILE);
    let mut w = BufWriter::new(File::create(&corpus_path).map_err(io_fail(&corpus_path))?);
    let opts = IngestOptions {
        strictness: if a.lenient {
            Strictness::Lenient
        } else {
            Strictness::Strict
        },
        seed: g.seed.unwrap_or(0),
        adversarial_fraction: a.adversarial,
        ..Default::default()
    };
    let report = ingest_manifest(&manifest, base, &opts, &mut |s: Sample| {
        w.write_all(s.to_json_line().as_bytes())?;
        w.write_all(b"\n")
    })?;
    w.flush().map_err(io_fail(&corpus_path))?;
    let report_path = a.out.join(INGEST_REPORT);
    write_json(&report_path, &report)?;

    if !report.is_conserved() {
        return Err(Failure::data(anyhow::anyhow!("ingest counts are not conserved")));
    }
    let mismatches: Vec<_> = report
        .expected_count_mismatches()
        .into_iter()
        .map(|(name, expected, read)| {
            warn!("{name}: manifest declares {expected} records, read {read}");
            json!({"dataset": name, "expected": expected, "read": read})
        })
        .collect();
    let total = report.total();
    info!(
        "ingested {} records: {} accepted, {} derived multiple-choice items",
        total.read, total.accepted, total.derived_mcq
    );
    Ok(json!({
        "corpus": corpus_path,
        "report": report_path,
        "total": total,
        "emitted": total.emitted(),
        "expected_count_mismatches": mismatches,
    }))
}

/// Lines of a corpus file restricted to one task. The first read or parse
/// error stops the stream and is parked in `err`.
struct TaskLines<'a> {
    lines: Option<Lines<BufReader<File>>>,
    task: TaskType,
    err: &'a RefCell<Option<Failure>>,
}

impl Iterator for TaskLines<'_> {
    type Item = Sample;

    fn next(&mut self) -> Option<Sample> {
        let lines = self.lines.as_mut()?;
        loop {
            let line = match lines.next()? {
                Ok(l) => l,
                Err(e) => {
                    *self.err.borrow_mut() = Some(Failure::io(e));
                    self.lines = None;
                    return None;
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            match Sample::from_json(&line) {
                Ok(s) if s.task == self.task => return Some(s),
                Ok(_) => continue,
                Err(e) => {
                    *self.err.borrow_mut() = Some(Failure::data(e));
                    self.lines = None;
                    return None;
                }
            }
        }
    }
}

fn open_lines(path: &Path) -> Result<Lines<BufReader<File>>, Failure> {
    Ok(BufReader::new(File::open(path).map_err(io_fail(path))?).lines())
}

pub fn shard(a: &ShardArgs, g: &Globals) -> CmdResult {
    if a.shard_size == 0 {
        return Err(Failure::usage("--shard-size must be at least 1"));
    }
    // Validation pass, so the per-task passes below cannot half-fail.
    let mut per_task: BTreeMap<TaskType, u64> = BTreeMap::new();
    for (i, line) in open_lines(&a.input)?.enumerate() {
        let line = line.map_err(io_fail(&a.input))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = || format!("{}:{}", a.input.display(), i + 1);
        let s = Sample::from_json(&line).map_err(|e| Failure::data(e).context(at()))?;
        let verdict = validate_sample(&s);
        if !verdict.is_ok() {
            let codes: Vec<&str> = verdict.violations.iter().map(|v| v.code()).collect();
            return Err(Failure::data(anyhow::anyhow!("SCHEMA_VIOLATION: {}", codes.join(","))).context(at()));
        }
        *per_task.entry(s.task).or_default() += 1;
    }
    if per_task.is_empty() {
        return Err(Failure::data(anyhow::anyhow!("{} holds no samples", a.input.display())));
    }

    create_dir(&a.out)?;
    let err = RefCell::new(None);
    let manifests = write_task_shards(
        |task| TaskLines {
            lines: if per_task.contains_key(&task) {
                open_lines(&a.input).map_err(|f| *err.borrow_mut() = Some(f)).ok()
            } else {
                None
            },
            task,
            err: &err,
        },
        a.shard_size,
        &a.out,
        g.seed.unwrap_or(0),
    )?;
    if let Some(f) = err.into_inner() {
        return Err(f.context(format!("{}", a.input.display())));
    }
    let tasks: BTreeMap<&str, serde_json::Value> = manifests
        .iter()
        .map(|(t, m)| {
            (
                t.as_str(),
                json!({"records": m.total_records, "shards": m.shard_count()}),
            )
        })
        .collect();
    let total: u64 = manifests.values().map(|m| m.total_records).sum();
    info!("wrote {total} records in {} task shard sets", manifests.len());
    Ok(json!({"out": a.out, "tasks": tasks, "total_records": total}))
}

fn load_config(path: &Path, g: &Globals) -> Result<RunConfig, Failure> {
    let text = fs::read_to_string(path).map_err(io_fail(path))?;
    let mut config: RunConfig =
        serde_json::from_str(&text).map_err(|e| Failure::data(e).context(format!("{}", path.display())))?;
    if let Some(seed) = g.seed {
        config.seed = seed;
    }
    config.check()?;
    Ok(config)
}

fn read_alerts(path: &Path) -> Result<Vec<Alert>, Failure> {
    let mut out = Vec::new();
    let lines = match File::open(path) {
        Ok(f) => BufReader::new(f).lines(),
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(io_fail(path)(e)),
    };
    for line in lines {
        let line = line.map_err(io_fail(path))?;
        out.push(serde_json::from_str(&line).map_err(|e| Failure::data(e).context(format!("{}", path.display())))?);
    }
    Ok(out)
}

pub fn train(a: &TrainArgs, g: &Globals) -> CmdResult {
    let config = load_config(&a.config, g)?;
    let mut data = TaskData::open(&a.data)?;
    let mut trainer = SimulatedTrainer::new(config.trainer.clone(), config.seed);
    if let Some(step) = a.fail_at_step {
        trainer = trainer.fail_at(step);
    }
    let opts = RunOptions {
        stop_after: a.stop_after,
        ..Default::default()
    };
    let outcome = if a.resume {
        orchestrator::resume(&config, &mut trainer, &mut data, &a.out, opts)?
    } else {
        orchestrator::run(&config, &mut trainer, &mut data, &a.out, opts)?
    };
    let record = json!({
        "resumed_from": outcome.resumed_from,
        "stopped_at": outcome.stopped_at,
        "summary": outcome.summary,
    });
    write_json(&a.out.join(RUN_SUMMARY), &record)?;
    let alerts = coalesce(&read_alerts(&a.out.join(ALERTS_LOG))?);
    for alert in &alerts {
        warn!(
            "{:?} steps {}..={}{}",
            alert.kind,
            alert.step_start,
            alert.step_end,
            alert.task.map(|t| format!(" ({t})")).unwrap_or_default()
        );
    }
    let s = &outcome.summary;
    info!(
        "{} of {} steps done; {} checkpoints; final checkpoint {}",
        s.steps_completed,
        s.total_steps,
        s.checkpoints_written.len(),
        s.final_checkpoint.as_deref().unwrap_or("none")
    );
    let mut v = record;
    v["out"] = json!(a.out);
    v["alerts"] = json!(alerts);
    Ok(v)
}

pub fn kill_test(a: &KillTestArgs, g: &Globals) -> CmdResult {
    let config = load_config(&a.config, g)?;
    let mut kills = a.at_step.clone();
    if let Some(k) = a.random_kills {
        if config.total_steps < 2 {
            return Err(Failure::usage("--random-kills needs total_steps of at least 2"));
        }
        let mut rng = SplitMix64::new(g.seed.unwrap_or(config.seed) ^ 0x6b69_6c6c);
        kills.extend((0..k).map(|_| 1 + rng.below(config.total_steps - 1)));
    }
    create_dir(&a.out)?;
    let report = orchestrator::kill_test(&config, &a.data, &a.out, &kills, a.crash_boundary)?;
    let path = a.out.join(KILL_TEST_REPORT);
    write_json(&path, &report)?;
    let v = json!({
        "report": path,
        "equivalent": report.equivalent,
        "kills": report.kills.len(),
        "traces_match": report.traces_match,
        "losses_match": report.losses_match,
        "final_checkpoint_match": report.final_checkpoint_match,
        "max_reprocessed_samples": report.max_reprocessed_samples,
        "reprocess_bound": report.reprocess_bound,
    });
    if !report.equivalent {
        return Err(Failure::data(anyhow::anyhow!(
            "interrupted run diverged from the reference (first divergent step {:?})",
            report.first_divergent_step
        )));
    }
    info!("{} kills, runs equivalent", report.kills.len());
    Ok(v)
}

pub fn eval(a: &EvalArgs, _g: &Globals) -> CmdResult {
    let preds: Vec<PredictionRecord> = load_jsonl(&a.pred)?;
    let report = if a.protocol == BLEU_PROTOCOL {
        let gold: Vec<FreeFormGold> = load_jsonl(&a.gold)?;
        evaluate_bleu(&preds, &gold)?
    } else {
        let gold: Vec<McqGold> = load_jsonl(&a.gold)?;
        let cats: Vec<&str> = if a.categories.is_empty() {
            DEFAULT_CATEGORIES.to_vec()
        } else {
            a.categories.iter().map(String::as_str).collect()
        };
        top1(&preds, &gold, &cats)?
    };
    report
        .check_invariants()
        .map_err(|e| Failure::data(anyhow::anyhow!("report invariant failed: {e}")))?;
    create_dir(&a.out)?;
    let path = a.out.join(EVAL_REPORT);
    write_json(&path, &report)?;
    if report.audit.fallback > 0 || report.audit.unparseable > 0 {
        info!(
            "normalization: {} text fallbacks, {} unparseable",
            report.audit.fallback, report.audit.unparseable
        );
    }
    Ok(json!({
        "report": path,
        "protocol": report.protocol,
        "counts": report.counts,
        "bleu": report.bleu,
        "top1": report.top1.as_ref().map(|t| json!({"overall": t.overall, "correct": t.correct, "total": t.total})),
    }))
}

pub fn report(a: &ReportArgs, g: &Globals) -> CmdResult {
    if !a.labels.is_empty() && a.labels.len() != a.inputs.len() {
        return Err(Failure::usage("--labels must give one label per input"));
    }
    let mut rows = Vec::new();
    for (i, input) in a.inputs.iter().enumerate() {
        let label = a.labels.get(i).cloned();
        rows.push(crate::report::load_row(input, label)?);
    }
    let table = crate::report::Table::build(rows);
    let text = table.render();
    if !g.quiet {
        eprint!("{text}");
    }
    let mut v = serde_json::to_value(&table).expect("json");
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_json(&out.join("report.json"), &table)?;
        let txt: PathBuf = out.join("report.txt");
        fs::write(&txt, &text).map_err(io_fail(&txt))?;
        v["out"] = json!(out);
    }
    Ok(v)
}
