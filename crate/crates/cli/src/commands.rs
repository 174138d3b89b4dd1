//! Subcommand implementations. Each writes its files and returns a short
//! summary for stdout.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use lmtrack::cascade::CascadeModel;
use lmtrack::dataio::{list_sequences, load_sequence, save_sequence, synth_sequence, SequenceBundle};
use lmtrack::evalbench::{
    aggregate_report, evaluate_sequence, format_track_csv, fps_benchmark, parse_track_csv, score_tracks, track_sequence,
    LandmarkErrors, TrackReport,
};
use lmtrack::trainer::{extract_training_pairs, five_fold_split, format_loss_csv, train_full, FullReport, PairSet};

use crate::{CliError, Failure, RunConfig};

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::new(Failure::Other, e.to_string()).in_file(dir))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::new(Failure::Other, e.to_string()).in_file(path))
}

fn load_model(path: &Path) -> Result<CascadeModel, CliError> {
    CascadeModel::load(path).map_err(|e| CliError::from(e).in_file(path))
}

/// Every sequence under `root` (or `root` itself when it holds one).
fn load_all(root: &Path) -> Result<Vec<SequenceBundle>, CliError> {
    let dirs = list_sequences(root)?;
    if dirs.is_empty() {
        return Err(CliError::data(format!("{}: no sequence directories found", root.display())));
    }
    dirs.iter().map(|d| load_sequence(d).map_err(|e| CliError::from(e).in_file(d))).collect()
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    let mut summary = String::new();
    for i in 0..cfg.count {
        let mut sc = cfg.synth.clone();
        sc.seed = cfg.synth.seed.wrapping_add(i as u64);
        let seq = synth_sequence(&sc)?;
        let dir = out.join(format!("seq_{i:03}"));
        save_sequence(&seq, &dir).map_err(|e| CliError::new(Failure::Other, e.to_string()))?;
        let _ = writeln!(summary, "{} {} frames -> {}", seq.name, seq.frames.len(), dir.display());
    }
    Ok(summary)
}

fn train_on(cfg: &RunConfig, seqs: &[&SequenceBundle]) -> Result<(CascadeModel, FullReport), CliError> {
    let mut pairs = PairSet::default();
    for (i, s) in seqs.iter().enumerate() {
        pairs.extend(extract_training_pairs(s, i, &cfg.arch, cfg.train.include_reference, cfg.train.mask_radius)?);
    }
    if pairs.dropped > 0 {
        log::warn!("{} annotations fell outside their search patch and were skipped", pairs.dropped);
    }
    Ok(train_full(cfg.arch.clone(), &pairs.pairs, &cfg.train)?)
}

pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, loss_csv: &Path) -> Result<String, CliError> {
    let seqs = load_all(data)?;
    let (model, report) = train_on(cfg, &seqs.iter().collect::<Vec<_>>())?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::new(Failure::Other, e.to_string()).in_file(dir))?;
    }
    model.save(out)?;
    let history = report.combined_history();
    write(loss_csv, &format_loss_csv(&history))?;
    let mut s = format!("trained on {} sequences\n", seqs.len());
    for st in &report.stages {
        let last = st.history.last().map_or(f64::NAN, |h| h.total);
        let _ = writeln!(s, "  {:<9} {:>4} epochs, final loss {last:.6}", st.stage.name(), st.epochs());
    }
    let _ = writeln!(s, "checkpoint {}\nloss history {}", out.display(), loss_csv.display());
    Ok(s)
}

pub fn cmd_track(cfg: &RunConfig, model: &Path, seq: &Path, out: &Path) -> Result<String, CliError> {
    let model = load_model(model)?;
    let bundle = load_sequence(seq).map_err(|e| CliError::from(e).in_file(seq))?;
    let rows = track_sequence(&model, &bundle, &cfg.track)?;
    write(out, &format_track_csv(&rows))?;
    Ok(format!(
        "{}: {} landmarks over {} frames -> {}\n",
        bundle.name,
        bundle.landmarks.len(),
        bundle.frames.len(),
        out.display()
    ))
}

/// Aggregates landmarks that have at least one scored frame.
fn report(cfg: &RunConfig, landmarks: Vec<LandmarkErrors>) -> Result<TrackReport, CliError> {
    let scored: Vec<LandmarkErrors> = landmarks
        .into_iter()
        .filter(|l| {
            if l.errors.is_empty() {
                log::warn!("{} landmark {}: no annotations after the first; left out of the report", l.sequence, l.landmark_id);
            }
            !l.errors.is_empty()
        })
        .collect();
    if scored.is_empty() {
        return Err(CliError::data("no landmark has annotations to score beyond its first frame"));
    }
    Ok(aggregate_report(&scored, cfg.std_kind)?)
}

fn write_report(dir: &Path, r: &TrackReport) -> Result<(), CliError> {
    write(&dir.join("report.csv"), &r.to_csv())?;
    write(&dir.join("report.txt"), &r.to_text())?;
    write(&dir.join("landmarks.csv"), &r.landmarks_csv())
}

pub fn cmd_eval(cfg: &RunConfig, tracks: &[PathBuf], seqs: &[PathBuf], out_dir: &Path) -> Result<String, CliError> {
    if tracks.len() != seqs.len() {
        return Err(CliError::config(format!(
            "{} --tracks files but {} --seq directories; give one of each per sequence",
            tracks.len(),
            seqs.len()
        )));
    }
    let mut all = Vec::new();
    for (t, d) in tracks.iter().zip(seqs) {
        let text = std::fs::read_to_string(t).map_err(|e| CliError::data(e.to_string()).in_file(t))?;
        let rows = parse_track_csv(&text).map_err(|e| CliError::from(e).in_file(t))?;
        let bundle = load_sequence(d).map_err(|e| CliError::from(e).in_file(d))?;
        all.extend(score_tracks(&bundle, &rows).map_err(|e| CliError::from(e).in_file(t))?);
    }
    let r = report(cfg, all)?;
    write_report(out_dir, &r)?;
    Ok(r.to_text())
}

struct FoldOutcome {
    landmarks: Vec<LandmarkErrors>,
    report: FullReport,
}

pub fn cmd_xval(cfg: &RunConfig, data: &Path, out_dir: &Path, jobs: usize) -> Result<String, CliError> {
    let seqs = load_all(data)?;
    let ids: Vec<String> = seqs.iter().map(|s| s.name.clone()).collect();
    for (i, id) in ids.iter().enumerate() {
        if ids[..i].contains(id) {
            return Err(CliError::data(format!("two sequences share the name '{id}'")));
        }
    }
    let folds = five_fold_split(&ids, cfg.train.seed)?;
    let by_name = |names: &[String]| -> Vec<&SequenceBundle> { seqs.iter().filter(|s| names.contains(&s.name)).collect() };

    let run_fold = |k: usize| -> Result<FoldOutcome, CliError> {
        let f = &folds[k];
        let (model, report) = train_on(cfg, &by_name(&f.train))?;
        let mut landmarks = Vec::new();
        for s in by_name(&f.test) {
            landmarks.extend(evaluate_sequence(&model, s, &cfg.track)?.0);
        }
        Ok(FoldOutcome { landmarks, report })
    };

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<FoldOutcome, CliError>>>> = Mutex::new((0..folds.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, folds.len()) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                if k >= folds.len() {
                    break;
                }
                let r = run_fold(k);
                results.lock().unwrap_or_else(|e| e.into_inner())[k] = Some(r);
            });
        }
    });

    let mut folds_csv = String::from("fold,sequence\n");
    let mut pooled = Vec::new();
    let mut summary = String::new();
    let outcomes = results.into_inner().unwrap_or_else(|e| e.into_inner());
    for (k, outcome) in outcomes.into_iter().enumerate() {
        let outcome = outcome.expect("every fold ran")?;
        let dir = out_dir.join(format!("fold_{}", k + 1));
        let r = report(cfg, outcome.landmarks.clone())?;
        write_report(&dir, &r)?;
        write(&dir.join("loss.csv"), &format_loss_csv(&outcome.report.combined_history()))?;
        for id in &folds[k].test {
            let _ = writeln!(folds_csv, "{},{id}", k + 1);
        }
        let all = r.rows.last().expect("report has an ALL row");
        let _ = writeln!(summary, "fold {}: {} test sequences, mean {:.3} mm, p95 {:.3} mm", k + 1, folds[k].test.len(), all.mean, all.p95);
        pooled.extend(outcome.landmarks);
    }
    write(&out_dir.join("folds.csv"), &folds_csv)?;
    let r = report(cfg, pooled)?;
    write_report(out_dir, &r)?;
    summary.push_str(&r.to_text());
    Ok(summary)
}

pub fn cmd_bench(cfg: &RunConfig, model: &Path, seq: &Path, out: Option<&Path>) -> Result<String, CliError> {
    let model = load_model(model)?;
    let bundle = load_sequence(seq).map_err(|e| CliError::from(e).in_file(seq))?;
    let r = fps_benchmark(&model, &bundle, &cfg.track, &cfg.bench)?;
    let mut s = String::new();
    let _ = writeln!(s, "frames = {}", r.frames);
    let _ = writeln!(s, "landmarks = {}", r.landmarks);
    let _ = writeln!(s, "repeats = {}", cfg.bench.repeats);
    let _ = writeln!(s, "exclusive_fps = {:.2}", r.exclusive_fps);
    let _ = writeln!(s, "mean_fps = {:.2}", r.mean_fps);
    let _ = writeln!(s, "inclusive_fps = {:.2}", r.inclusive_fps);
    let _ = writeln!(s, "latency_p50_ms = {:.3}", r.latency_p50_ms);
    let _ = writeln!(s, "latency_p95_ms = {:.3}", r.latency_p95_ms);
    let _ = writeln!(s, "latency_max_ms = {:.3}", r.latency_max_ms);
    if let Some(p) = r.parallel_fps {
        let _ = writeln!(s, "parallel_fps = {p:.2}");
    }
    if let Some(path) = out {
        write(path, &s)?;
    }
    Ok(s)
}
