//! Tab-separated report files for a simulation result.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{SimError, SimResult, SweepTable};

fn write(path: PathBuf, text: String) -> Result<PathBuf, SimError> {
    std::fs::write(&path, text).map_err(|e| SimError::DestinationUnwritable {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    Ok(path)
}

fn series_table(res: &SimResult, series: &std::collections::BTreeMap<String, Vec<f64>>) -> String {
    let mut out = String::from("bin\tstart_s");
    for node in series.keys() {
        out.push('\t');
        out.push_str(node);
    }
    out.push('\n');
    let bins = series.values().map(Vec::len).max().unwrap_or(0);
    for k in 0..bins {
        let _ = write!(out, "{k}\t{}", k as f64 * res.sample_interval_s);
        for values in series.values() {
            let _ = write!(out, "\t{}", values.get(k).copied().unwrap_or(0.0));
        }
        out.push('\n');
    }
    out
}

/// Writes summary.tsv, egress.tsv, ingress.tsv, io_wait_ms.tsv,
/// timeline.tsv and transfers.tsv under `out`. Egress and ingress hold
/// bytes per sample bin, so column sums are byte totals.
pub fn report(res: &SimResult, out: &Path) -> Result<Vec<PathBuf>, SimError> {
    std::fs::create_dir_all(out).map_err(|e| SimError::DestinationUnwritable {
        path: out.display().to_string(),
        reason: e.to_string(),
    })?;
    let mut summary = String::from("metric\tvalue\n");
    let _ = writeln!(summary, "makespan_s\t{}", res.makespan_s);
    let _ = writeln!(summary, "sample_interval_s\t{}", res.sample_interval_s);
    let _ = writeln!(summary, "total_egress_bytes\t{}", res.total_egress());
    let _ = writeln!(summary, "total_ingress_bytes\t{}", res.total_ingress());
    let _ = writeln!(summary, "network_transfer_bytes\t{}", res.network_bytes());
    let _ = writeln!(summary, "image_loads\t{}", res.image_loads);
    let _ = writeln!(summary, "image_load_hits\t{}", res.image_load_hits);
    for (kind, n) in &res.transfer_count_by_kind {
        let _ = writeln!(summary, "transfers_{kind:?}\t{n}");
    }
    for (kind, n) in &res.transfer_bytes_by_kind {
        let _ = writeln!(summary, "bytes_{kind:?}\t{n}");
    }

    let mut timeline = String::from("job\tnode\tstart_s\tend_s\n");
    for s in &res.job_timeline {
        let _ = writeln!(timeline, "{}\t{}\t{}\t{}", s.job, s.node, s.start_s, s.end_s);
    }
    let mut transfers = String::from("job\tname\tkind\tsrc\tdst\tbytes\tstart_s\tend_s\n");
    for t in &res.transfers {
        let _ = writeln!(
            transfers,
            "{}\t{}\t{:?}\t{}\t{}\t{}\t{}\t{}",
            t.job, t.name, t.kind, t.src, t.dst, t.bytes, t.start_s, t.end_s
        );
    }

    Ok(vec![
        write(out.join("summary.tsv"), summary)?,
        write(out.join("egress.tsv"), series_table(res, &res.egress_bytes))?,
        write(out.join("ingress.tsv"), series_table(res, &res.ingress_bytes))?,
        write(out.join("io_wait_ms.tsv"), series_table(res, &res.io_wait_ms))?,
        write(out.join("timeline.tsv"), timeline)?,
        write(out.join("transfers.tsv"), transfers)?,
    ])
}

pub fn write_sweep_table(table: &SweepTable, path: &Path) -> Result<PathBuf, SimError> {
    if let Some(parent) = path.parent() {
        let _ = std::fs::create_dir_all(parent);
    }
    write(path.to_path_buf(), table.to_tsv())
}
