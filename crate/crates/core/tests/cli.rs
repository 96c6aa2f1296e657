use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

use sadda::networks::ArchitecturePreset;
use sadda::tensor::gradcheck::op_checks;

const MOONS: &str = "\
run.seed = 3
data.task = two_moons
data.noise_sigma = 0.1
data.samples = 300
data.shift = rotate
shift.rotate_degrees = 30
model.kind = mlp_vector
model.input_shape = 2
model.num_classes = 2
train.batch_size = 32
train.pretrain_epochs = 6
train.adapt_max_epochs = 5
train.pretrain_lr = 0.01
train.adapt_lr = 0.0005
export.per_label = 7
";

fn sadda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sadda")).args(args).env("SADDA_THREADS", "1").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

struct Run {
    _dir: tempfile::TempDir,
    cfg: PathBuf,
    out: PathBuf,
}

impl Run {
    fn new(config: &str) -> Run {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        fs::write(&cfg, config).unwrap();
        let out = dir.path().join("out");
        Run { _dir: dir, cfg, out }
    }

    fn cmd(&self, cmd: &str) -> Output {
        sadda(&[cmd, "--config", self.cfg.to_str().unwrap(), "--out", self.out.to_str().unwrap()])
    }

    fn ok(&self, cmd: &str) -> Output {
        let o = self.cmd(cmd);
        assert_eq!(o.status.code(), Some(0), "{cmd}: {}", stderr(&o));
        o
    }

    fn read(&self, name: &str) -> Vec<u8> {
        fs::read(self.out.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
    }

    fn text(&self, name: &str) -> String {
        String::from_utf8(self.read(name)).unwrap()
    }
}

fn data_rows(csv: &str) -> usize {
    csv.lines().count() - 1
}

#[test]
fn pretrain_writes_its_artifacts() {
    let r = Run::new(MOONS);
    let o = r.ok("pretrain");
    assert!(stdout(&o).contains("source test accuracy"));
    for name in ["m_s.ckpt", "c_s.ckpt", "pretrain_metrics.csv", "pretrain_loss.svg", "manifest_pretrain.txt"] {
        assert!(r.out.join(name).is_file(), "{name}");
    }
    let csv = r.text("pretrain_metrics.csv");
    assert!(csv.starts_with("epoch,loss,source_acc\n"));
    assert_eq!(data_rows(&csv), 6);
    assert_eq!(r.text("pretrain_loss.svg").matches("<polyline").count(), 1);
}

#[test]
fn full_run_is_reproducible() {
    let names = ["m_s.ckpt", "c_s.ckpt", "m_t.ckpt", "d.ckpt", "pretrain_metrics.csv", "adapt_metrics.csv", "report.csv"];
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let r = Run::new(MOONS);
        for cmd in ["pretrain", "adapt", "eval"] {
            r.ok(cmd);
        }
        outputs.push(names.map(|n| r.read(n)));
    }
    for (i, n) in names.iter().enumerate() {
        assert!(outputs[0][i] == outputs[1][i], "{n} differs between runs");
    }
}

#[test]
fn adapt_eval_and_export_chain() {
    let r = Run::new(MOONS);
    r.ok("pretrain");
    let o = r.ok("adapt");
    assert!(stdout(&o).contains("stopped:"));
    let csv = r.text("adapt_metrics.csv");
    assert!(csv.starts_with("epoch,disc_loss,adv_loss,sup_disc_loss,source_acc,target_acc\n"));
    assert!((1..=5).contains(&data_rows(&csv)));
    let reason = r.text("stop_reason.txt");
    assert!(["converged", "max_epochs", "failure_mode"].iter().any(|s| reason.starts_with(s)), "{reason}");

    let svg = r.text("adapt_loss.svg");
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert!(svg.contains(">discriminator</text>") && svg.contains(">adversarial</text>"));

    r.ok("eval");
    let report = r.text("report.csv");
    let models: Vec<_> = report.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(models, ["source_only", "sadda", "train_on_target"]);
    for line in report.lines().skip(1) {
        let acc: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
    assert!(r.text("report.txt").contains("sadda - source_only:"));

    r.ok("export-embeddings");
    let width = ArchitecturePreset::mlp_vector(2, 2).feature_shape().iter().product::<usize>();
    for name in ["embeddings_source.csv", "embeddings_target.csv"] {
        let csv = r.text(name);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap().split(',').count(), width + 1, "{name}");
        let labels: Vec<usize> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
        assert!(labels.len() <= 7 * 2, "{name}: {} rows", labels.len());
        for c in 0..2 {
            assert!(labels.iter().filter(|&&l| l == c).count() <= 7);
        }
    }
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nowhere.cfg");
    let o = sadda(&["pretrain", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere.cfg"), "{}", stderr(&o));

    let o = sadda(&["pretrain"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_syntax_error_names_the_line() {
    let r = Run::new("run.seed = 1\ndata.task two_moons\n");
    let o = r.cmd("pretrain");
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn adapt_without_checkpoints_is_a_usage_error() {
    let r = Run::new(MOONS);
    let o = r.cmd("adapt");
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("m_s.ckpt"), "{}", stderr(&o));
}

#[test]
fn bad_thread_count_is_rejected() {
    let r = Run::new(MOONS);
    let o = Command::new(env!("CARGO_BIN_EXE_sadda"))
        .args(["pretrain", "--config", r.cfg.to_str().unwrap()])
        .env("SADDA_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

fn listed_ops(out: &str) -> Vec<&str> {
    out.lines().filter(|l| l.ends_with(" ok") || l.ends_with(" FAIL")).map(|l| l.split_whitespace().next().unwrap()).collect()
}

#[test]
fn gradcheck_lists_every_op_once() {
    let o = sadda(&["gradcheck", "--trials", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let listed = listed_ops(&out);
    for c in op_checks() {
        assert_eq!(listed.iter().filter(|&&n| n == c.name).count(), 1, "{}", c.name);
    }
    assert!(!out.contains("FAIL"));
}

#[test]
fn injected_fault_fails_verification() {
    let o = sadda(&["gradcheck", "--trials", "5", "--inject-fault", "conv2d_transpose"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("conv2d_transpose"), "{}", stderr(&o));
    let out = stdout(&o);
    let failed: Vec<_> = out.lines().filter(|l| l.ends_with(" FAIL")).collect();
    assert!(failed.iter().any(|l| l.starts_with("conv2d_transpose ")), "{out}");

    let o = sadda(&["gradcheck", "--inject-fault", "no_such_op"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn fault_flag_is_rejected_outside_gradcheck() {
    let r = Run::new(MOONS);
    let o = sadda(&["pretrain", "--config", r.cfg.to_str().unwrap(), "--inject-fault", "log"]);
    assert_eq!(o.status.code(), Some(2));
}
