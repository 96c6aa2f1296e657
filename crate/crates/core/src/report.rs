//! Run artifacts: metrics CSVs, loss-curve SVGs, the comparison report and
//! the per-command manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pipeline::{Comparison, EpochMetrics, PretrainMetrics, TrainConfig};

pub fn pretrain_csv(history: &[PretrainMetrics]) -> String {
    let mut out = String::from("epoch,loss,source_acc\n");
    for m in history {
        let _ = writeln!(out, "{},{},{}", m.epoch, m.loss, m.source_accuracy);
    }
    out
}

/// Target accuracy is left empty when no labeled target data was supplied.
pub fn adapt_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,disc_loss,adv_loss,sup_disc_loss,source_acc,target_acc\n");
    for m in history {
        let target = m.target_accuracy.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{target}",
            m.epoch, m.disc_loss, m.adv_loss, m.sup_disc_loss, m.source_accuracy
        );
    }
    out
}

pub struct Series<'a> {
    pub name: &'a str,
    pub color: &'a str,
    pub values: Vec<f64>,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 32.0;
const BOTTOM: f64 = 48.0;

fn tidy(v: f64) -> String {
    let s = format!("{v:.3}");
    if s == "-0.000" {
        "0.000".into()
    } else {
        s
    }
}

/// Line chart of per-epoch values, one polyline per series, with a legend.
/// Non-finite values are dropped from both the scale and the line.
pub fn loss_svg(title: &str, series: &[Series<'_>]) -> String {
    let finite = || series.iter().flat_map(|s| s.values.iter().copied()).filter(|v| v.is_finite());
    let mut lo = finite().fold(f64::INFINITY, f64::min);
    let mut hi = finite().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let epochs = series.iter().map(|s| s.values.len()).max().unwrap_or(0);
    let span = (epochs.max(2) - 1) as f64;
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let x = |i: usize| LEFT + pw * i as f64 / span;
    let y = |v: f64| TOP + ph * (1.0 - (v - lo) / (hi - lo));

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {W} {H}" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        out,
        r#"<path d="M{LEFT} {TOP} V{} H{}" fill="none" stroke="black"/>"#,
        TOP + ph,
        LEFT + pw
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            y(v) + 4.0,
            tidy(v)
        );
    }
    let ticks = epochs.clamp(1, 6);
    for k in 0..ticks {
        let e = if ticks == 1 { 0 } else { k * (epochs - 1) / (ticks - 1) };
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            x(e),
            TOP + ph + 16.0,
            e + 1
        );
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#, LEFT + pw / 2.0, H - 8.0);

    for s in series {
        let pts: Vec<String> = s
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| format!("{:.2},{:.2}", x(i), y(v)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            s.color,
            pts.join(" ")
        );
    }
    let _ = writeln!(out, r#"<g class="legend">"#);
    for (k, s) in series.iter().enumerate() {
        let ly = TOP + 8.0 + 16.0 * k as f64;
        let lx = LEFT + pw - 140.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{}" stroke-width="2"/>"#,
            lx + 20.0,
            s.color
        );
        let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, escape(s.name));
    }
    out.push_str("</g>\n</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn pretrain_svg(history: &[PretrainMetrics]) -> String {
    loss_svg(
        "pre-training",
        &[Series {
            name: "classification",
            color: "#1f77b4",
            values: history.iter().map(|m| m.loss).collect(),
        }],
    )
}

/// Discriminator and adversarial loss per epoch.
pub fn adapt_svg(history: &[EpochMetrics]) -> String {
    loss_svg(
        "adaptation",
        &[
            Series {
                name: "discriminator",
                color: "#1f77b4",
                values: history.iter().map(|m| m.disc_loss).collect(),
            },
            Series {
                name: "adversarial",
                color: "#d62728",
                values: history.iter().map(|m| m.adv_loss).collect(),
            },
        ],
    )
}

fn rows(c: &Comparison) -> [(&'static str, f64); 3] {
    [
        ("source_only", c.source_only),
        ("sadda", c.sadda),
        ("train_on_target", c.train_on_target),
    ]
}

pub fn report_csv(c: &Comparison) -> String {
    let mut out = String::from("model,target_accuracy\n");
    for (name, acc) in rows(c) {
        let _ = writeln!(out, "{name},{acc}");
    }
    out
}

pub fn report_txt(c: &Comparison, test_samples: usize) -> String {
    let mut out = format!("target test accuracy ({test_samples} samples)\n\n");
    for (name, acc) in rows(c) {
        let _ = writeln!(out, "{name:<16} {:6.2}%", 100.0 * acc);
    }
    let _ = writeln!(out, "\nsadda - source_only: {:+.2} points", 100.0 * (c.sadda - c.source_only));
    out
}

/// What one command read and wrote.
#[derive(Clone, Debug)]
pub struct RunManifest {
    pub command: String,
    pub config_path: PathBuf,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
    /// Seconds since the Unix epoch.
    pub started: u64,
    pub finished: u64,
    pub artifacts: Vec<PathBuf>,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "command = {}", self.command);
        let _ = writeln!(out, "config = {}", self.config_path.display());
        let _ = writeln!(out, "out = {}", self.out_dir.display());
        let _ = writeln!(out, "started = {}", self.started);
        let _ = writeln!(out, "finished = {}", self.finished);
        for a in &self.artifacts {
            let _ = writeln!(out, "artifact = {}", a.display());
        }
        let _ = writeln!(out, "\n# resolved training config\n{:#?}", self.train);
        out
    }

    /// Fails if a listed artifact is missing.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(missing) = self.artifacts.iter().find(|a| !a.exists()) {
            return Err(Error::contract(format!("manifest lists missing artifact {}", missing.display())));
        }
        write_file(path, &self.to_text())
    }
}

pub fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
