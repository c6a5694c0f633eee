use std::fmt::Write as _;
use std::path::Path;

use super::measure::BenchReport;
use crate::error::{Error, Result};
use crate::sampler::ExecMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
    Markdown,
}

impl Format {
    /// From a file extension: `json`, `csv`, `md`.
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        ext.parse()
    }
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            "md" | "markdown" => Ok(Format::Markdown),
            _ => Err(Error::UnknownFormat(s.to_string())),
        }
    }
}

fn row_label(mode: ExecMode) -> &'static str {
    match mode {
        ExecMode::UncachedJoint => "w/o KV cache",
        ExecMode::FullAttention => "w/ full attention",
        ExecMode::Cached => "cached",
    }
}

/// The `ratio` column is mean time relative to the cached mode; empty when
/// cached was not measured.
pub fn emit_report(report: &BenchReport, format: Format) -> Result<String> {
    let cached = report.mode(ExecMode::Cached).map(|m| m.mean_s);
    let ratio = |mean: f64| cached.map(|c| mean / c);
    let mut out = String::new();
    match format {
        Format::Json => out = serde_json::to_string_pretty(report)?,
        Format::Csv => {
            out.push_str("mode,runs,mean_s,stdev_s,flops,ratio\n");
            for m in &report.modes {
                let r = ratio(m.mean_s).map(|r| r.to_string()).unwrap_or_default();
                writeln!(out, "{},{},{},{},{},{}", m.mode.name(), m.runs, m.mean_s, m.stdev_s, m.flops, r).unwrap();
            }
        }
        Format::Markdown => {
            let w = &report.workload;
            writeln!(
                out,
                "{} references ({} tokens), {} steps, guidance {}, {:?}, {} runs after {} warmup\n",
                w.ref_lengths.len(),
                w.ref_lengths.iter().sum::<usize>(),
                w.steps,
                if w.classifier_free { "on" } else { "off" },
                report.dtype,
                report.config.runs,
                report.warmup,
            )
            .unwrap();
            out.push_str("| Variant | Time (s) | Stdev (s) | Step (ms) | MACs | Ratio | Peak workspace (MiB) |\n");
            out.push_str("|---|---|---|---|---|---|---|\n");
            for m in &report.modes {
                let r = ratio(m.mean_s).map(|r| format!("{r:.2}")).unwrap_or_else(|| "-".into());
                let peak = m
                    .peak_workspace_bytes
                    .map(|b| format!("{:.2}", b as f64 / (1 << 20) as f64))
                    .unwrap_or_else(|| "-".into());
                writeln!(
                    out,
                    "| {} | {:.4} | {:.4} | {:.3} | {:.3e} | {} | {} |",
                    row_label(m.mode),
                    m.mean_s,
                    m.stdev_s,
                    m.step_mean_s * 1e3,
                    m.flops as f64,
                    r,
                    peak
                )
                .unwrap();
            }
            writeln!(out, "\nAnalytical uncached/cached: {:.3}", report.analytical_ratio).unwrap();
            if let Some(r) = report.measured_ratio {
                writeln!(out, "Measured uncached/cached: {r:.3}").unwrap();
            }
            if !report.valid {
                out.push_str("\nWARNING: a mode exceeds the variation bound; timings are unreliable.\n");
            }
        }
    }
    Ok(out)
}

pub fn load_report(json: &str) -> Result<BenchReport> {
    Ok(serde_json::from_str(json)?)
}
