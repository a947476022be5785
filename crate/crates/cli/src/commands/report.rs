//! Re-emit tables and plots from a stored evaluation report. The same
//! writer backs `genmark evaluate`, so regenerated artifacts are identical.

use std::path::{Path, PathBuf};

use genmark_core::evaluation::EvalReport;
use genmark_core::Result;

use crate::commands::missing_artifact;
use crate::config::CommonArgs;

#[derive(Debug, clap::Args)]
pub struct ReportArgs {
    /// Stored report (report.json) to re-emit.
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Directory for the regenerated tables and plots.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

pub fn run(_common: &CommonArgs, args: ReportArgs) -> Result<()> {
    if !args.input.is_file() {
        return Err(missing_artifact(&args.input, "expected a stored report.json"));
    }
    let report = EvalReport::from_json(&std::fs::read_to_string(&args.input)?)?;
    for path in write_artifacts(&report, &args.out)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Validate, then write the report JSON plus every derived table and plot.
pub fn write_artifacts(report: &EvalReport, out: &Path) -> Result<Vec<PathBuf>> {
    report.validate()?;
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let mut emit = |name: &str, text: String| -> Result<()> {
        let path = out.join(name);
        std::fs::write(&path, text)?;
        written.push(path);
        Ok(())
    };
    emit("report.json", report.to_json()?)?;
    emit("scenario_table.csv", report.scenario_csv())?;
    emit("partial_curve.csv", report.partial_csv())?;
    emit("countermeasure_table.csv", report.countermeasure_csv())?;

    if !report.scenarios.is_empty() {
        let path = out.join("scenario_accuracy.png");
        let values: Vec<f64> = report.scenarios.iter().map(|c| c.accuracy).collect();
        crate::plot::bar_chart(&values, &path)?;
        written.push(path);
    }
    if !report.partial_watermarking.is_empty() {
        let path = out.join("partial_curve.png");
        let points: Vec<(f64, f64)> = report
            .partial_watermarking
            .iter()
            .map(|o| (o.fraction, o.accuracy))
            .collect();
        crate::plot::line_chart(&points, &path)?;
        written.push(path);
    }
    Ok(written)
}
