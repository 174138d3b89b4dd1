use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lmtrack_cli::config::KEYS;

const QUICK: &str = "\
# small data and one epoch per stage
synth.count = 5
synth.frames = 12
train.max_epochs = 1
train.min_epochs = 1
train.audit_entries = 0
";

fn lmtrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmtrack")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = lmtrack(args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    let out = lmtrack(args);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success() || !stderr.trim().is_empty(), "{args:?} failed without a diagnostic");
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Quick {
    dir: tempfile::TempDir,
}

impl Quick {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("quick.cfg"), QUICK).unwrap();
        Quick { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn cfg(&self) -> String {
        s(&self.path("quick.cfg")).to_string()
    }

    fn synth(&self, out: &str) -> PathBuf {
        let p = self.path(out);
        ok(&["synth", "--config", &self.cfg(), "--out", s(&p)]);
        p
    }

    fn train(&self, data: &Path, out: &str) -> PathBuf {
        let p = self.path(out);
        ok(&["train", "--config", &self.cfg(), "--data", s(data), "--out", s(&p)]);
        p
    }
}

#[test]
fn default_pipeline_runs_end_to_end() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    let model = d.path().join("model.bin");
    let tracks = d.path().join("tracks.csv");
    let report = d.path().join("report");
    ok(&["synth", "--out", s(&data)]);
    ok(&["train", "--data", s(&data), "--out", s(&model)]);
    let seq = data.join("seq_011");
    ok(&["track", "--model", s(&model), "--seq", s(&seq), "--out", s(&tracks)]);
    let text = ok(&["eval", "--tracks", s(&tracks), "--seq", s(&seq), "--out-dir", s(&report)]);
    assert!(text.lines().any(|l| l.starts_with("ALL")), "{text}");
    for f in ["report.csv", "report.txt", "landmarks.csv"] {
        assert!(report.join(f).is_file(), "{f}");
    }
    let loss = fs::read_to_string(d.path().join("model.loss.csv")).unwrap();
    assert!(loss.starts_with("epoch,L,Lcls,Lmask,Lbox,Latt\n"));
}

#[test]
fn identical_invocations_give_identical_bytes() {
    let q = Quick::new();
    let a = q.synth("a");
    let b = q.synth("b");
    for f in ["manifest.txt", "landmark_1.csv", "frame_00007.png"] {
        assert_eq!(fs::read(a.join("seq_002").join(f)).unwrap(), fs::read(b.join("seq_002").join(f)).unwrap(), "{f}");
    }
    let ma = q.train(&a, "a.bin");
    let mb = q.train(&b, "b.bin");
    assert_eq!(fs::read(&ma).unwrap(), fs::read(&mb).unwrap());
    assert_eq!(fs::read(q.path("a.loss.csv")).unwrap(), fs::read(q.path("b.loss.csv")).unwrap());
    let seq = a.join("seq_004");
    let (ta, tb) = (q.path("ta.csv"), q.path("tb.csv"));
    ok(&["track", "--model", s(&ma), "--seq", s(&seq), "--out", s(&ta)]);
    ok(&["track", "--model", s(&mb), "--seq", s(&seq), "--out", s(&tb)]);
    assert_eq!(fs::read(&ta).unwrap(), fs::read(&tb).unwrap());

    let other = q.path("c");
    ok(&["synth", "--config", &q.cfg(), "--seed", "9", "--out", s(&other)]);
    assert_ne!(
        fs::read(a.join("seq_002/frame_00007.png")).unwrap(),
        fs::read(other.join("seq_002/frame_00007.png")).unwrap()
    );
}

#[test]
fn eval_of_ground_truth_reports_zero_error() {
    let q = Quick::new();
    let data = q.synth("data");
    let seq = data.join("seq_000");
    let gt = fs::read_to_string(seq.join("landmark_1.csv")).unwrap();
    let mut tracks = String::from("frame,landmark_id,x,y,score\n");
    for line in gt.lines().filter(|l| l.chars().next().is_some_and(|c| c.is_ascii_digit())) {
        tracks.push_str(&format!("{},1,{},1\n", line.split(',').next().unwrap(), line.split_once(',').unwrap().1));
    }
    let t = q.path("gt.csv");
    fs::write(&t, tracks).unwrap();
    let out = q.path("report");
    ok(&["eval", "--tracks", s(&t), "--seq", s(&seq), "--out-dir", s(&out)]);
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "source,N,mean_mm,std_mm,p95_mm,ave_max_mm");
    assert_eq!(rows[1..], ["SYN,1,0,0,0,0", "ALL,1,0,0,0,0"]);
}

#[test]
fn track_requires_first_frame_annotation() {
    let q = Quick::new();
    let data = q.synth("data");
    let model = q.train(&data, "m.bin");
    let seq = data.join("seq_001");
    let ann = seq.join("landmark_1.csv");
    let text = fs::read_to_string(&ann).unwrap();
    let kept: Vec<&str> = text.lines().filter(|l| !l.starts_with("0,")).collect();
    fs::write(&ann, kept.join("\n")).unwrap();
    let out = lmtrack(&["track", "--model", s(&model), "--seq", s(&seq), "--out", s(&q.path("t.csv"))]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.contains("frame 0"), "{err}");
}

#[test]
fn xval_bench_and_parallel_folds() {
    let q = Quick::new();
    let data = q.synth("data");
    let (one, two) = (q.path("x1"), q.path("x2"));
    ok(&["xval", "--config", &q.cfg(), "--data", s(&data), "--out-dir", s(&one)]);
    ok(&["xval", "--config", &q.cfg(), "--data", s(&data), "--out-dir", s(&two), "--jobs", "3"]);
    let folds = fs::read_to_string(one.join("folds.csv")).unwrap();
    assert_eq!(folds.lines().count(), 6);
    for k in 1..=5 {
        for f in ["report.csv", "landmarks.csv", "loss.csv"] {
            let p = format!("fold_{k}/{f}");
            assert_eq!(fs::read(one.join(&p)).unwrap(), fs::read(two.join(&p)).unwrap(), "{p}");
        }
    }
    assert_eq!(fs::read(one.join("report.csv")).unwrap(), fs::read(two.join("report.csv")).unwrap());

    let model = q.train(&data, "m.bin");
    let report = q.path("bench.txt");
    let text = ok(&["bench", "--model", s(&model), "--seq", s(&data.join("seq_000")), "--out", s(&report), "--set", "bench.repeats=2"]);
    assert_eq!(fs::read_to_string(&report).unwrap(), text);
    let fps: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("exclusive_fps = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(fps > 0.0);
}

#[test]
fn help_documents_every_key() {
    for sub in ["synth", "train", "track", "eval", "xval", "bench"] {
        let text = ok(&[sub, "--help"]);
        for k in KEYS {
            assert!(text.contains(k.name), "{sub} --help lacks {}", k.name);
        }
    }
    assert!(ok(&["--help"]).contains("synth.count"));
}

#[test]
fn configuration_errors_exit_2() {
    let q = Quick::new();
    let out = s(&q.path("o")).to_string();
    assert_eq!(code(&["synth", "--out", &out, "--set", "synth.colour=red"]), 2);
    assert_eq!(code(&["synth", "--out", &out, "--set", "synth.width"]), 2);
    assert_eq!(code(&["synth", "--out", &out, "--set", "synth.jump_prob=1.5"]), 2);
    assert_eq!(code(&["synth", "--out", &out, "--set", "synth.amplitude=80"]), 2);
    let bad = q.path("bad.cfg");
    fs::write(&bad, "train.learning_rate = 0.1\nnot a pair\n").unwrap();
    assert_eq!(code(&["synth", "--out", &out, "--config", s(&bad)]), 2);
    assert_eq!(code(&["synth", "--out", &out, "--config", s(&q.path("missing.cfg"))]), 2);
    assert_eq!(code(&["track", "--out", &out]), 2);
    assert_eq!(code(&["eval", "--tracks", "a.csv", "--tracks", "b.csv", "--seq", "s", "--out-dir", &out]), 2);
}

#[test]
fn data_errors_exit_3() {
    let q = Quick::new();
    let data = q.synth("data");
    let empty = q.path("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(code(&["train", "--config", &q.cfg(), "--data", s(&empty), "--out", s(&q.path("m.bin"))]), 3);
    let t = q.path("t.csv");
    fs::write(&t, "frame,landmark_id,x,y,score\n1,1,abc,0,1\n").unwrap();
    let seq = data.join("seq_000");
    assert_eq!(code(&["eval", "--tracks", s(&t), "--seq", s(&seq), "--out-dir", s(&q.path("r"))]), 3);
    fs::write(&t, "frame,landmark_id,x,y,score\n0,1,3,4,1\n").unwrap();
    assert_eq!(code(&["eval", "--tracks", s(&t), "--seq", s(&seq), "--out-dir", s(&q.path("r"))]), 3);
    let few = q.path("few");
    ok(&["synth", "--config", &q.cfg(), "--set", "synth.count=3", "--out", s(&few)]);
    assert_eq!(code(&["xval", "--config", &q.cfg(), "--data", s(&few), "--out-dir", s(&q.path("x"))]), 3);
}

#[test]
fn divergence_exits_4_and_bad_checkpoint_exits_1() {
    let q = Quick::new();
    let data = q.synth("data");
    let m = q.path("m.bin");
    assert_eq!(code(&["train", "--config", &q.cfg(), "--set", "train.learning_rate=1e9", "--data", s(&data), "--out", s(&m)]), 4);
    fs::write(&m, b"not a checkpoint").unwrap();
    assert_eq!(code(&["track", "--model", s(&m), "--seq", s(&data.join("seq_000")), "--out", s(&q.path("t.csv"))]), 1);
}
