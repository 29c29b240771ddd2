use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_w2v2-speaker");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn corpus(dir: &Path) {
    let o = run(&[
        "generate-corpus",
        "--out",
        p(dir),
        "--speakers",
        "5",
        "--utts",
        "8",
        "--duration",
        "0.4",
        "--trials-per-class",
        "10",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let text = format!(
        "variant = aam
iterations = 4
files_per_batch = 4
crop_seconds = 0.2
encoder.conv_channels = 8
encoder.group_norm_groups = 8
encoder.model_dim = 16
encoder.ffn_dim = 32
encoder.layers = 1
encoder.heads = 2
encoder.pos_conv_kernel = 8
encoder.pos_conv_groups = 4
corpus = corpus
validation_trials = corpus/trials_val.txt
test_trials = corpus/trials_test.txt
out = runs
range_test.steps = 20
{extra}"
    );
    let path = dir.join("run.cfg");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn generate_corpus_writes_lists_and_refuses_non_empty_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("corpus");
    corpus(&dir);
    let wavs = fs::read_dir(dir.join("wav")).unwrap().count();
    assert_eq!(wavs, 40);
    for list in ["trials_val.txt", "trials_test.txt"] {
        let text = fs::read_to_string(dir.join(list)).unwrap();
        let same = text.lines().filter(|l| l.starts_with("1 ")).count();
        let diff = text.lines().filter(|l| l.starts_with("0 ")).count();
        assert_eq!(same, diff, "{list}");
        assert!(same > 0);
    }
    let before = fs::read(dir.join("wav/spk004-utt007.wav")).unwrap();
    let o = run(&["generate-corpus", "--out", p(&dir), "--speakers", "5", "--utts", "8"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--force"), "{}", stderr(&o));

    let o = run(&[
        "generate-corpus",
        "--out",
        p(&dir),
        "--speakers",
        "5",
        "--utts",
        "8",
        "--duration",
        "0.4",
        "--trials-per-class",
        "10",
        "--force",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(dir.join("wav/spk004-utt007.wav")).unwrap(), before);

    let o = run(&["generate-corpus", "--out", p(&tmp.path().join("one")), "--speakers", "1"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("2 speakers"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["train"])), 2);
    let o = run(&["evaluate", "--checkpoint", "x", "--pooling", "median"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("first+cls"), "{}", stderr(&o));
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn config_problems_are_all_listed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "colour = red\nencoder.heads = 3\n");
    let o = run(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("colour") && err.contains("heads"), "{err}");
}

#[test]
fn train_then_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    corpus(&tmp.path().join("corpus"));
    let cfg = config(tmp.path(), "validation_interval = 2\n");
    let o = run(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let runs = tmp.path().join("runs");
    let metrics = fs::read_to_string(runs.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = metrics.lines().collect();
    assert_eq!(rows[0], "step,loss,lr,validation_eer");
    assert_eq!(rows.len(), 5);
    assert!(rows[1].ends_with(','));
    assert!(!rows[2].ends_with(','));
    for dir in ["best", "final"] {
        assert!(runs.join(dir).join("checkpoint.txt").is_file());
        assert!(runs.join(dir).join("config.txt").is_file());
    }

    let best = runs.join("best");
    let o = run(&["evaluate", "--checkpoint", p(&best), "--repeats", "2", "--pooling", "random"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("eer ")).count(), 2);
    let eval = best.join("evaluation");
    let report = fs::read_to_string(eval.join("report.txt")).unwrap();
    assert_eq!(report.matches("eer ").count(), 2);
    let trials = fs::read_to_string(tmp.path().join("corpus/trials_test.txt")).unwrap();
    let scores = fs::read_to_string(eval.join("scores_1.txt")).unwrap();
    assert_eq!(scores.lines().count(), trials.lines().count());

    // Same inputs, same scores.
    let again = tmp.path().join("again");
    let o = run(&["evaluate", "--checkpoint", p(&best), "--out", p(&again)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(&["evaluate", "--checkpoint", p(&best), "--out", p(&tmp.path().join("again2"))]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        fs::read(again.join("scores.txt")).unwrap(),
        fs::read(tmp.path().join("again2/scores.txt")).unwrap()
    );

    let other = tmp.path().join("other.cfg");
    fs::write(&other, fs::read_to_string(&cfg).unwrap().replace("encoder.layers = 1", "encoder.layers = 2")).unwrap();
    let o = run(&["evaluate", "--checkpoint", p(&best), "--config", p(&other)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("fingerprint"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_with_three_and_keeps_the_log() {
    let tmp = tempfile::tempdir().unwrap();
    corpus(&tmp.path().join("corpus"));
    let cfg = config(tmp.path(), "schedule.kind = constant\nschedule.lr = 1e300\n");
    let o = run(&["train", "--config", p(&cfg), "--out", p(&tmp.path().join("div"))]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
    let metrics = fs::read_to_string(tmp.path().join("div/metrics.csv")).unwrap();
    assert!(metrics.lines().count() >= 2);
}

#[test]
fn range_test_suggests_a_grid_or_reports_no_descent() {
    let tmp = tempfile::tempdir().unwrap();
    corpus(&tmp.path().join("corpus"));
    let cfg = config(tmp.path(), "");
    let out = tmp.path().join("rt");
    let o = run(&["lr-range-test", "--config", p(&cfg), "--out", p(&out)]);
    let csv = fs::read_to_string(out.join("range_test.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("step,lr,raw_loss,smoothed_loss"));
    match code(&o) {
        0 => {
            let grid = stdout(&o).lines().find(|l| l.starts_with("grid ")).unwrap().to_string();
            assert_eq!(grid.split_whitespace().count(), 8, "{grid}");
        }
        4 => assert!(stderr(&o).contains("no-descent")),
        c => panic!("exit {c}: {}", stderr(&o)),
    }

    let cfg = config(tmp.path(), "range_test.lr_min = 1e100\nrange_test.lr_max = 1e200\n");
    let o = run(&["lr-range-test", "--config", p(&cfg), "--out", p(&tmp.path().join("rt2"))]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("no-descent"));
}

#[test]
fn ablate_trains_and_evaluates_under_its_name() {
    let tmp = tempfile::tempdir().unwrap();
    corpus(&tmp.path().join("corpus"));
    let cfg = config(tmp.path(), "");
    let o = run(&["ablate", "--config", p(&cfg), "lr_constant_1e-5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let dir = tmp.path().join("runs/lr_constant_1e-5");
    let resolved = fs::read_to_string(dir.join("config.txt")).unwrap();
    assert!(resolved.contains("schedule.kind = constant"), "{resolved}");
    assert!(resolved.contains("schedule.lr = 0.00001") || resolved.contains("schedule.lr = 1e-5"), "{resolved}");
    assert!(dir.join("evaluation/report.txt").is_file());

    let o = run(&["ablate", "--config", p(&cfg), "nonsense"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("lr_tri_stage"));
}
