//! Persistence of experiment results: the results CSV (deterministic bytes),
//! a manifest with the full configuration and derived constants, and a
//! gnuplot-compatible plot script.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::experiments::{ExperimentConfig, RunRecord};

/// Format a float with 17 significant digits, stable across runs.
fn fmt(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.16e}")
    }
}

pub const CSV_HEADER: &str =
    "experiment_id,epsilon,norm_family,level_ell,delta_schedule_M,time_T,error_value,fit_group";

/// Write results.csv with the fixed column set, rows sorted by
/// (experiment_id, epsilon, norm_family). Identical records produce
/// byte-identical files.
pub fn write_results_csv(records: &[RunRecord], path: &Path) -> Result<()> {
    let mut rows: Vec<_> = records.iter().flat_map(|r| r.rows.iter()).collect();
    rows.sort_by(|a, b| {
        a.experiment_id
            .cmp(&b.experiment_id)
            .then(a.epsilon.partial_cmp(&b.epsilon).expect("finite eps"))
            .then(a.norm_family.cmp(&b.norm_family))
    });
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push_str("\r\n");
    for r in rows {
        // norm_family labels contain no quotes/commas by construction
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\r\n",
            r.experiment_id,
            fmt(r.epsilon),
            r.norm_family,
            fmt(r.level_ell),
            fmt(r.delta_schedule_m),
            fmt(r.time_t),
            fmt(r.error_value),
            r.fit_group
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Manifest: configuration, derived constants, fits, failures, versions.
pub fn write_manifest(
    records: &[RunRecord],
    cfg: &ExperimentConfig,
    path: &Path,
) -> Result<()> {
    let manifest = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "config": cfg,
        "phi_background_sign": "phi = phi_in - lambda * t * psi_in + increment",
        "records": records,
    });
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| crate::error::Error::Config(format!("manifest serialization: {e}")))?;
    fs::write(path, text)?;
    Ok(())
}

/// Minimal gnuplot script plotting error against epsilon per fit group.
pub fn write_plot_script(records: &[RunRecord], csv_name: &str, path: &Path) -> Result<()> {
    let mut families: Vec<String> = records
        .iter()
        .flat_map(|r| r.rows.iter())
        .filter(|r| r.fit_group != "none" && r.fit_group != "error")
        .map(|r| r.norm_family.clone())
        .collect();
    families.sort();
    families.dedup();
    let mut f = fs::File::create(path)?;
    writeln!(f, "set logscale xy")?;
    writeln!(f, "set datafile separator ','")?;
    writeln!(f, "set key outside")?;
    writeln!(f, "set xlabel 'epsilon'")?;
    writeln!(f, "set ylabel 'error'")?;
    if families.is_empty() {
        writeln!(f, "# no fit-group rows to plot")?;
        return Ok(());
    }
    let mut parts = Vec::new();
    for fam in &families {
        parts.push(format!(
            "'{csv_name}' using 2:(strcol(3) eq '{fam}' ? $7 : NaN) with linespoints title '{fam}'"
        ));
    }
    writeln!(f, "plot {}", parts.join(", \\\n     "))?;
    Ok(())
}

/// Write all artifacts into `out_dir`; returns the paths written.
pub fn emit_outputs(
    records: &[RunRecord],
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let csv = out_dir.join("results.csv");
    write_results_csv(records, &csv)?;
    let manifest = out_dir.join("manifest.json");
    write_manifest(records, cfg, &manifest)?;
    let plot = out_dir.join("plot.gp");
    write_plot_script(records, "results.csv", &plot)?;
    Ok(vec![csv, manifest, plot])
}
