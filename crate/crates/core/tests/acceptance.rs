//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any failed.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sadda::config::load_config;
use sadda::data::checkpoint::{encode, load_checkpoint, save_checkpoint};
use sadda::data::idx::{parse_idx, IdxData, IdxError};
use sadda::data::{apply_shift, gen_two_moons, ShiftKind, ShiftSpec};
use sadda::experiment::{build_datasets, train_on_target};
use sadda::networks::{unsupervised_score, ArchitecturePreset};
use sadda::objectives::{cross_entropy, disc_adversarial_loss, encoder_adversarial_loss, OneHotLabels};
use sadda::pipeline::{
    adapt, compose_and_evaluate, detect_convergence, detect_failure, pretrain, AdaptInputs, Comparison, EpochMetrics,
    TrainConfig,
};
use sadda::report::{adapt_csv, pretrain_csv};
use sadda::tensor::{Graph, Padding, Tensor};
use sadda::verify::{run_suite, TOLERANCE};

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);
/// Checkpoint bytes, metrics CSVs, and whether M_s/C_s survived adaptation.
type RunArtifacts = (Vec<Vec<u8>>, [String; 2], bool);


fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn unsup_scores() -> Outcome {
    let rows = [([9.0, 1.0, 1.0], 0.9999), ([5.0, 1.0, 1.0], 0.9935), ([-5.0, -5.0, -5.0], 0.0198)];
    let logits = Tensor::new(vec![3, 3], rows.iter().flat_map(|(r, _)| *r).collect()).unwrap();
    let got = unsupervised_score(&logits).map_err(|e| e.to_string())?;
    let got = got.data();
    let msg = format!("D_unsup = {:.4} {:.4} {:.4}", got[0], got[1], got[2]);
    if rows.iter().zip(got).all(|((_, want), &g)| close(g, *want, 1e-4)) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let outcomes = run_suite(100, 0, None).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let worst = outcomes.iter().max_by(|a, b| a.worst.total_cmp(&b.worst)).unwrap();
    let failing: Vec<_> = outcomes.iter().filter(|o| !o.passed()).map(|o| o.name).collect();
    let msg = format!(
        "{} checks x 100 trials, worst {} at {:.2e} (< {TOLERANCE:e}), {secs:.1} s",
        outcomes.len(),
        worst.name,
        worst.worst
    );
    if failing.is_empty() && secs < 120.0 {
        Ok(msg)
    } else {
        Err(format!("{msg}; failing: {failing:?}"))
    }
}

fn adjoint_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (b, s, k) = (rng.random_range(1..3), rng.random_range(1..5), rng.random_range(1..6));
        let (stride, ci, co) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5));
        let same = rng.random_bool(0.5);
        let (pad, big) = if same { (Padding::Same, s * stride) } else { (Padding::Valid, (s - 1) * stride + k) };
        let mut draw = |dims: Vec<usize>| Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0)).unwrap();
        let x: Tensor<f64> = draw(vec![b, big, big, ci]);
        let kern = draw(vec![k, k, ci, co]);
        let y = draw(vec![b, s, s, co]);
        let mut g = Graph::new();
        let (xi, ki, yi) = (g.constant(x.clone()), g.constant(kern), g.constant(y.clone()));
        let cx = g.conv2d(xi, ki, stride, pad).map_err(|e| e.to_string())?;
        let ty = g.conv2d_transpose(yi, ki, stride, pad).map_err(|e| e.to_string())?;
        let lhs = g.value(cx).dot(&y).unwrap();
        let rhs = x.dot(g.value(ty)).unwrap();
        worst = worst.max((lhs - rhs).abs() / (1.0 + lhs.abs()));
    }
    let msg = format!("50 configurations, worst relative gap {worst:.2e}");
    if worst <= 1e-9 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn loss_identities() -> Outcome {
    let n = 10;
    let mut g = Graph::<f64>::new();
    let probs = g.constant(Tensor::full(vec![4, n], 1.0 / n as f64).unwrap());
    let labels = OneHotLabels::from_indices(vec![0, 3, 7, 9], n).unwrap();
    let ce = cross_entropy(&mut g, probs, &labels).map_err(|e| e.to_string())?;
    let half = g.constant(Tensor::full(vec![4], 0.5).unwrap());
    let disc = disc_adversarial_loss(&mut g, half, half).map_err(|e| e.to_string())?;
    let enc = encoder_adversarial_loss(&mut g, half).map_err(|e| e.to_string())?;
    let got = [g.value(ce).data()[0], g.value(disc).data()[0], g.value(enc).data()[0]];
    let want = [(n as f64).ln(), 2.0 * 2f64.ln(), 2f64.ln()];
    let msg = format!("CE {:.10} disc {:.10} enc {:.10}", got[0], got[1], got[2]);
    if got.iter().zip(want).all(|(&a, b)| close(a, b, 1e-9)) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Same steps as `pretrain`, `adapt` and `eval` on the command line.
fn benchmark(cfg_name: &str, seed: u64) -> Result<Comparison, String> {
    let mut cfg = load_config(&configs().join(cfg_name)).map_err(|e| e.to_string())?;
    cfg.train.seed = seed;
    let data = build_datasets(&cfg).map_err(|e| e.to_string())?;
    let t = &cfg.train;
    let (m_s, c_s, _) = pretrain(&data.source_train, t).map_err(|e| e.to_string())?;
    let unlabeled = data.target_train.unlabeled();
    let inputs = AdaptInputs {
        source_encoder: &m_s,
        source_classifier: &c_s,
        source: &data.source_train,
        target: &unlabeled,
        target_eval: None,
    };
    let (m_t, _, _) = adapt(&inputs, t).map_err(|e| e.to_string())?;
    let eval = |enc| compose_and_evaluate(&t.preset, enc, &c_s, &data.target_test).map_err(|e| e.to_string());
    Ok(Comparison {
        source_only: eval(&m_s)?,
        sadda: eval(&m_t)?,
        train_on_target: train_on_target(&data, t, 1).map_err(|e| e.to_string())?,
    })
}

fn mean_over(cfg_name: &str, seeds: std::ops::RangeInclusive<u64>) -> Result<Comparison, String> {
    let runs = seeds.map(|s| benchmark(cfg_name, s)).collect::<Result<Vec<_>, _>>()?;
    let n = runs.len() as f64;
    let avg = |f: fn(&Comparison) -> f64| runs.iter().map(f).sum::<f64>() / n;
    Ok(Comparison {
        source_only: avg(|c| c.source_only),
        sadda: avg(|c| c.sadda),
        train_on_target: avg(|c| c.train_on_target),
    })
}

fn shift_benchmark() -> Outcome {
    let c = mean_over("glyphs_shift.cfg", 1..=5)?;
    let msg = format!(
        "5 seeds: source_only {:.3}, sadda {:.3}, train_on_target {:.3}",
        c.source_only, c.sadda, c.train_on_target
    );
    if c.sadda >= c.source_only + 0.05 && c.train_on_target >= c.sadda && c.sadda >= c.source_only {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn no_shift_control() -> Outcome {
    let c = mean_over("glyphs_noshift.cfg", 1..=3)?;
    let diff = c.sadda - c.source_only;
    let msg = format!("3 seeds: source_only {:.3}, sadda {:.3}, diff {diff:+.4}", c.source_only, c.sadda);
    if diff.abs() <= 0.02 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn metrics(disc: f64, adv: f64) -> EpochMetrics {
    EpochMetrics {
        epoch: 0,
        disc_loss: disc,
        adv_loss: adv,
        sup_disc_loss: 0.5,
        source_accuracy: 0.9,
        target_accuracy: None,
    }
}

fn stopping_rules() -> Outcome {
    let cfg = TrainConfig::new(ArchitecturePreset::mlp_vector(2, 2));
    let w = cfg.early_stop_window;
    let flat = vec![metrics(0.33, 2.30); w];
    let mut problems = Vec::new();
    if !detect_convergence(&flat, &cfg) {
        problems.push("flat history not converged".to_string());
    }
    for (d, a) in [(0.33 * 1.02, 2.30), (0.33, 2.30 * 1.02)] {
        let mut h = flat.clone();
        h[w / 2] = metrics(d, a);
        if detect_convergence(&h, &cfg) {
            problems.push(format!("converged despite a 2% swing ({d}, {a})"));
        }
    }
    if detect_convergence(&flat[1..], &cfg) {
        problems.push("converged on a short history".into());
    }
    for (d, a, want) in [(5e-5, 2.3, true), (0.33, 9e-5, true), (1e-4, 1e-4, false), (0.33, 2.30, false)] {
        if detect_failure(&[metrics(0.5, 0.5), metrics(d, a)], &cfg) != want {
            problems.push(format!("failure detector wrong on ({d}, {a})"));
        }
    }
    if problems.is_empty() {
        Ok(format!("window {w}, relative change {}, loss floor {:e}", cfg.early_stop_rel_change, cfg.failure_loss_floor))
    } else {
        Err(problems.join("; "))
    }
}

fn isolation_and_determinism() -> Outcome {
    let run = || -> Result<RunArtifacts, String> {
        let mut cfg = TrainConfig::new(ArchitecturePreset::mlp_vector(2, 2));
        cfg.seed = 5;
        cfg.adapt_max_epochs = 6;
        let source = gen_two_moons(300, 0.1, 5).map_err(|e| e.to_string())?;
        let target = gen_two_moons(300, 0.1, 6).map_err(|e| e.to_string())?;
        let target = apply_shift(&target, &ShiftSpec::new(ShiftKind::Rotate { degrees: 30.0 }, 5)).map_err(|e| e.to_string())?;
        let (m_s, c_s, pre) = pretrain(&source, &cfg).map_err(|e| e.to_string())?;
        let before = (m_s.digest(), c_s.digest());
        let unlabeled = target.unlabeled();
        let inputs = AdaptInputs {
            source_encoder: &m_s,
            source_classifier: &c_s,
            source: &source,
            target: &unlabeled,
            target_eval: Some(&target),
        };
        let (m_t, d, report) = adapt(&inputs, &cfg).map_err(|e| e.to_string())?;
        let untouched = before == (m_s.digest(), c_s.digest());
        let bytes = [&m_s, &c_s, &m_t, &d].map(encode).to_vec();
        Ok((bytes, [pretrain_csv(&pre.history), adapt_csv(&report.history)], untouched))
    };
    let (a, b) = (run()?, run()?);
    let mut problems = Vec::new();
    if !(a.2 && b.2) {
        problems.push("source networks changed during adaptation");
    }
    if a.0 != b.0 {
        problems.push("checkpoints differ between runs");
    }
    if a.1 != b.1 {
        problems.push("metrics CSVs differ between runs");
    }
    if problems.is_empty() {
        Ok("M_s/C_s digests unchanged; 4 checkpoints and 2 CSVs byte-identical across runs".into())
    } else {
        Err(problems.join("; "))
    }
}

fn codecs() -> Outcome {
    let mut problems = Vec::new();

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let preset = ArchitecturePreset::conv_image(16, 3, 4);
    let p = sadda::networks::init_params::<f32>(&preset, sadda::networks::NetworkRole::Encoder, 2).map_err(|e| e.to_string())?;
    let (first, second) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&p, &first).map_err(|e| e.to_string())?;
    let back = load_checkpoint(&first).map_err(|e| e.to_string())?;
    save_checkpoint(&back, &second).map_err(|e| e.to_string())?;
    if back != p || std::fs::read(&first).ok() != std::fs::read(&second).ok() {
        problems.push("checkpoint save/load/save not byte-identical".to_string());
    }

    let mut img = vec![0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2];
    img.extend([0, 128, 255, 64]);
    match parse_idx(&img) {
        Ok(IdxData::Images(t)) => {
            let want = [0.0, 0.50196, 1.0, 0.25098];
            if t.dims() != [1, 2, 2] || !t.data().iter().zip(want).all(|(&g, w)| close(g as f64, w, 1e-5)) {
                problems.push(format!("IDX fixture decoded to {:?}", t.data()));
            }
        }
        other => problems.push(format!("IDX fixture: {other:?}")),
    }
    let mut magic = img.clone();
    magic[2..4].copy_from_slice(&[0x08, 0x04]);
    match parse_idx(&magic) {
        Err(e @ IdxError::UnsupportedMagic { .. }) if e.to_string().contains("unsupported magic") => {}
        other => problems.push(format!("magic 0x804: {other:?}")),
    }
    if !matches!(parse_idx(&img[..img.len() - 1]), Err(IdxError::Truncated { .. })) {
        problems.push("truncated file accepted".into());
    }
    let mut long = img.clone();
    long.push(7);
    if !matches!(parse_idx(&long), Err(IdxError::TrailingBytes { .. })) {
        problems.push("trailing bytes accepted".into());
    }
    if problems.is_empty() {
        Ok("checkpoint round trip byte-identical; IDX fixture, bad magic, truncation, trailing bytes".into())
    } else {
        Err(problems.join("; "))
    }
}

fn main() {
    let criteria: [Check; 9] = [
        ("unsupervised discriminator score", unsup_scores),
        ("gradient check suite", gradient_suite),
        ("conv transpose adjoint", adjoint_identity),
        ("loss identities", loss_identities),
        ("glyph shift benchmark", shift_benchmark),
        ("no-shift control", no_shift_control),
        ("convergence and failure detection", stopping_rules),
        ("isolation and determinism", isolation_and_determinism),
        ("checkpoint and IDX codecs", codecs),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("criterion {} PASS  {name}: {msg} [{secs:.1}s]", i + 1),
            Err(msg) => {
                failed += 1;
                println!("criterion {} FAIL  {name}: {msg} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
