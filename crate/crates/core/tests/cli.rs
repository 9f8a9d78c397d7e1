use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use hafformer::cli::gradcheck_outcome;
use hafformer::data::{save_dataset_dir, Dataset, EmbeddingRecord, Split};
use hafformer::gradcheck::{grad_check, GradCheckOptions};
use hafformer::graph::Graph;
use hafformer::verify::GradCheckCase;
use hafformer::FrameMatrix;
use tempfile::tempdir;

const TINY: &str = "\
# small geometry for fast end-to-end runs
input_dim = 16
seq_len = 64
epochs = 3
batch_size = 4
synthetic = true
synth_train_per_class = 4
synth_test_per_class = 3
";

fn hafformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hafformer"))
        .args(args)
        .env_remove("HAFF_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

/// Number before `unit` in the first line containing `marker`.
fn number_before(text: &str, marker: &str, unit: &str) -> f64 {
    let line = text.lines().find(|l| l.contains(marker)).unwrap_or_else(|| panic!("no `{marker}` in {text}"));
    let end = line.find(unit).unwrap();
    let start = line[..end].rfind(' ').unwrap() + 1;
    line[start..end].parse().unwrap()
}

#[test]
fn analyze_all_combos_prints_the_grid() {
    let dir = tempdir().unwrap();
    let json = dir.path().join("grid.json");
    let out = hafformer(&["analyze", "--all-combos", "--json", json.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    let rows: Vec<&str> = text
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with("warning"))
        .collect();
    assert_eq!(rows.len(), 24);
    let best = rows
        .iter()
        .find(|l| l.starts_with("MSDW ") && l.contains("GEGLU"))
        .unwrap();
    let macs: f64 = best.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!((macs - 1.44).abs() <= 0.02 + 1e-9, "{best}");
    assert!(text.contains("warning:"));

    let parsed: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(parsed.as_array().unwrap().len(), 24);
}

#[test]
fn analyze_self_attention_reports_projection_total() {
    let dir = tempdir().unwrap();
    let cfg = write(dir.path(), "sa.cfg", "token_mixer = self_attention\nchannel_mixer = ffn\n");
    let out = hafformer(&["analyze", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    let total = number_before(&text, "total incl. projection:", "M MACs");
    assert!((total - 107.15).abs() <= 0.03, "{text}");
    let excl = number_before(&text, "total excl. projection:", "K params");
    assert_eq!(excl, 5.09);
}

#[test]
fn unknown_key_is_a_usage_error() {
    let dir = tempdir().unwrap();
    let cfg = write(dir.path(), "bad.cfg", "seed = 1\ndropout = 0.1\n");
    let out = hafformer(&["analyze", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("dropout"), "{err}");
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn invalid_values_and_arguments_exit_two() {
    let dir = tempdir().unwrap();
    let cfg = write(dir.path(), "bad.cfg", "seq_len = 100\n");
    assert_eq!(hafformer(&["analyze", "--config", &cfg]).status.code(), Some(2));
    assert_eq!(hafformer(&["analyze", "--config", "/nonexistent.cfg"]).status.code(), Some(2));
    assert_eq!(hafformer(&["analyze", "--scale", "huge"]).status.code(), Some(2));
    assert_eq!(hafformer(&[]).status.code(), Some(2));
    assert_eq!(hafformer(&["--help"]).status.code(), Some(0));
}

#[test]
fn gradcheck_small_scale_passes_quickly() {
    let start = Instant::now();
    let out = hafformer(&["gradcheck", "--scale", "small"]);
    let secs = start.elapsed().as_secs_f64();
    assert_eq!(out.status.code(), Some(0), "{}{}", stdout(&out), stderr(&out));
    let text = stdout(&out);
    let cases: Vec<&str> = text.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).collect();
    assert_eq!(cases.len(), 25, "{text}");
    assert!(cases.iter().all(|l| l.starts_with("PASS")), "{text}");
    assert!(secs < 60.0, "{secs}");
}

fn corrupted_case() -> GradCheckCase {
    GradCheckCase::new("corrupted square", || {
        let theta = [FrameMatrix::from_rows(&[vec![0.3, -0.7, 1.1]]).unwrap()];
        grad_check(
            |g: &mut Graph, leaves: &[hafformer::NodeId]| {
                let x = g.value(leaves[0]).clone();
                let value = x.map(|v| v * v);
                // the correct rule is 2x; this one drops the factor 2
                let sq = g.custom(
                    &[leaves[0]],
                    value,
                    Box::new(|up: &FrameMatrix, parents: &[&FrameMatrix]| {
                        let x = parents[0];
                        vec![FrameMatrix::from_fn(x.rows(), x.cols(), |r, c| up.get(r, c) * x.get(r, c))]
                    }),
                );
                Ok(g.sum(sq))
            },
            &theta,
            GradCheckOptions::default(),
        )
    })
}

fn honest_case() -> GradCheckCase {
    GradCheckCase::new("honest gelu", || {
        let theta = [FrameMatrix::from_rows(&[vec![0.3, -0.7, 1.1]]).unwrap()];
        grad_check(
            |g: &mut Graph, leaves: &[hafformer::NodeId]| {
                let y = g.gelu(leaves[0]);
                Ok(g.sum(y))
            },
            &theta,
            GradCheckOptions::default(),
        )
    })
}

#[test]
fn corrupted_backward_rule_fails_the_check() {
    let outcome = gradcheck_outcome(&[honest_case(), corrupted_case()]);
    assert_eq!(outcome.code, 1);
    assert!(outcome.stdout.contains("PASS honest gelu"), "{}", outcome.stdout);
    assert!(outcome.stdout.contains("FAIL corrupted square"), "{}", outcome.stdout);
    assert!(outcome.stderr.contains("corrupted square"));
    assert!(!outcome.stderr.contains("honest"));

    assert_eq!(gradcheck_outcome(&[honest_case()]).code, 0);
}

fn train_in(dir: &Path, cfg: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", cfg, "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    hafformer(&args)
}

fn log_without_timing(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            assert!(v.as_object_mut().unwrap().remove("wall_ms").is_some());
            v
        })
        .collect()
}

#[test]
fn train_and_eval_are_reproducible() {
    let dir = tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.cfg", TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = train_in(out, &cfg, &["--seed", "7"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let ckpt_a = std::fs::read(a.join("model.hafc")).unwrap();
    assert_eq!(ckpt_a, std::fs::read(b.join("model.hafc")).unwrap());
    let log_a = log_without_timing(&a.join("train_log.jsonl"));
    assert_eq!(log_a.len(), 3);
    assert_eq!(log_a, log_without_timing(&b.join("train_log.jsonl")));

    let eval = |out: &Path| {
        let o = hafformer(&["eval", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "7"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        stdout(&o)
    };
    let ea = eval(&a);
    assert_eq!(ea, eval(&b));
    let metrics: serde_json::Value = serde_json::from_str(&ea).unwrap();
    let acc = metrics["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let confusion = metrics["confusion"].as_array().unwrap();
    let total: u64 = confusion
        .iter()
        .flat_map(|r| r.as_array().unwrap().iter().map(|v| v.as_u64().unwrap()))
        .sum();
    assert_eq!(total, 6);

    let other = dir.path().join("c");
    assert_eq!(train_in(&other, &cfg, &["--seed", "8"]).status.code(), Some(0));
    assert_ne!(ckpt_a, std::fs::read(other.join("model.hafc")).unwrap());
}

#[test]
fn thread_count_does_not_change_the_checkpoint() {
    let dir = tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.cfg", TINY);
    let serial = dir.path().join("serial");
    assert_eq!(train_in(&serial, &cfg, &[]).status.code(), Some(0));
    let threaded = dir.path().join("threaded");
    let o = Command::new(env!("CARGO_BIN_EXE_hafformer"))
        .args(["train", "--config", &cfg, "--out", threaded.to_str().unwrap()])
        .env("HAFF_THREADS", "3")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(serial.join("model.hafc")).unwrap(),
        std::fs::read(threaded.join("model.hafc")).unwrap()
    );

    let bad = Command::new(env!("CARGO_BIN_EXE_hafformer"))
        .args(["train", "--config", &cfg, "--out", threaded.to_str().unwrap()])
        .env("HAFF_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

/// Records whose class is the sign of a constant offset on every channel.
fn separable_dataset() -> Dataset {
    let records = (0..8)
        .map(|i| {
            let label = i % 2;
            let offset = if label == 1 { 1.0 } else { -1.0 };
            EmbeddingRecord {
                id: format!("rec{i}"),
                features: FrameMatrix::from_fn(64, 16, |r, c| {
                    offset + 0.1 * (((r * 7 + c * 3 + i * 11) % 13) as f64 / 13.0 - 0.5)
                }),
                label: Some(label),
            }
        })
        .collect();
    Dataset::new(records, Split::Train).unwrap()
}

#[test]
fn eval_on_memorized_data_is_perfect() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    save_dataset_dir(&separable_dataset(), &data).unwrap();
    let cfg = write(dir.path(), "fit.cfg", "input_dim = 16\nseq_len = 64\nepochs = 40\nbatch_size = 4\nlr = 0.01\n");
    let out = dir.path().join("out");
    let data_arg = data.to_str().unwrap();
    let o = hafformer(&["train", "--config", &cfg, "--data", data_arg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let json = dir.path().join("metrics.json");
    let o = hafformer(&[
        "eval",
        "--config",
        &cfg,
        "--data",
        data_arg,
        "--out",
        out.to_str().unwrap(),
        "--json",
        json.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(m["accuracy"].as_f64(), Some(1.0), "{m}");
    assert_eq!(m["f1"].as_f64(), Some(1.0), "{m}");
    assert_eq!(std::fs::read_to_string(&json).unwrap(), stdout(&o));
}

#[test]
fn synth_writes_both_splits() {
    let dir = tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.cfg", TINY);
    let out = dir.path().join("synth");
    let o = hafformer(&["synth", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let train = hafformer::data::load_dataset_dir(&out.join("train"), Split::Train, 16).unwrap();
    let test = hafformer::data::load_dataset_dir(&out.join("test"), Split::Test, 16).unwrap();
    assert_eq!((train.len(), test.len()), (8, 6));
    assert!(train.records.iter().all(|r| r.features.rows() <= 64));
    assert_ne!(train.records[0].features, test.records[0].features);

    // the written split is directly usable as training data
    let from_dir = dir.path().join("from_dir");
    let o = hafformer(&[
        "train",
        "--config",
        &cfg,
        "--data",
        out.join("train").to_str().unwrap(),
        "--out",
        from_dir.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn broken_checkpoints_exit_two() {
    let dir = tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.cfg", TINY);
    let out = dir.path().join("run");
    assert_eq!(train_in(&out, &cfg, &[]).status.code(), Some(0));
    let ckpt = out.join("model.hafc");
    let good = std::fs::read(&ckpt).unwrap();
    let eval = || hafformer(&["eval", "--config", &cfg, "--out", out.to_str().unwrap()]);

    let mut magic = good.clone();
    magic[..4].copy_from_slice(b"XXXX");
    std::fs::write(&ckpt, &magic).unwrap();
    let o = eval();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("format error"), "{}", stderr(&o));

    std::fs::write(&ckpt, &good[..good.len() / 3]).unwrap();
    let o = eval();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("corrupted"), "{}", stderr(&o));

    std::fs::remove_file(&ckpt).unwrap();
    assert_eq!(eval().status.code(), Some(2));
}

#[test]
fn missing_data_exits_two() {
    let dir = tempdir().unwrap();
    let cfg = write(dir.path(), "plain.cfg", "input_dim = 16\nseq_len = 64\nepochs = 1\n");
    let out = dir.path().join("out");
    let o = hafformer(&[
        "train",
        "--config",
        &cfg,
        "--data",
        dir.path().join("missing").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("manifest.csv"), "{}", stderr(&o));
    // neither --data nor a synthetic source
    assert_eq!(train_in(&out, &cfg, &[]).status.code(), Some(2));
}

#[test]
fn corrupted_embedding_exits_two() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    save_dataset_dir(&separable_dataset(), &data).unwrap();
    let victim = data.join("rec3.hafe");
    let bytes = std::fs::read(&victim).unwrap();
    std::fs::write(&victim, &bytes[..bytes.len() - 5]).unwrap();
    let cfg = write(dir.path(), "plain.cfg", "input_dim = 16\nseq_len = 64\nepochs = 1\n");
    let out = dir.path().join("out");
    let o = hafformer(&["train", "--config", &cfg, "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("rec3.hafe"), "{}", stderr(&o));
}

#[test]
fn diverging_training_exits_one() {
    let dir = tempdir().unwrap();
    let cfg = write(dir.path(), "hot.cfg", &format!("{TINY}lr = 1e300\n"));
    let o = train_in(&dir.path().join("out"), &cfg, &[]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("epoch"), "{}", stderr(&o));
}
