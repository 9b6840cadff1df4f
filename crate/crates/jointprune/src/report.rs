//! Plot-data emission from run traces: per-entry pruning-ratio convergence,
//! cost and Lipschitz-bound curves, and the final architecture as bar-chart
//! rows. CSV only; rendering is out of scope.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::optimizer::TraceRecord;

#[derive(Debug, Clone)]
pub struct ReportSummary {
    pub records: usize,
    pub files: Vec<PathBuf>,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(contents.as_bytes())?;
    Ok(())
}

/// Emit all report CSVs for a trace into `out_dir`.
pub fn emit(trace: &[TraceRecord], out_dir: &Path) -> Result<ReportSummary> {
    if trace.is_empty() {
        return Err(Error::InvalidArgument("trace has no records".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let dim = trace[0].mu.len();
    let mut files = Vec::new();

    let mut ratios = String::from("outer_step");
    for i in 0..dim {
        ratios.push_str(&format!(",v{i}"));
    }
    ratios.push('\n');
    for r in trace {
        ratios.push_str(&r.outer_step.to_string());
        for v in &r.mu {
            ratios.push_str(&format!(",{v}"));
        }
        ratios.push('\n');
    }
    let p = out_dir.join("pruning_ratio.csv");
    write_file(&p, &ratios)?;
    files.push(p);

    let mut cost = String::from("outer_step,mu_cost,config_cost\n");
    for r in trace {
        let cc = r
            .config_cost
            .map(|c| c.to_string())
            .unwrap_or_default();
        cost.push_str(&format!("{},{},{}\n", r.outer_step, r.mu_cost, cc));
    }
    let p = out_dir.join("cost.csv");
    write_file(&p, &cost)?;
    files.push(p);

    let mut kb = String::from("outer_step,k_bound,grad_norm\n");
    for r in trace {
        kb.push_str(&format!("{},{},{}\n", r.outer_step, r.k_bound, r.grad_norm));
    }
    let p = out_dir.join("k_bound.csv");
    write_file(&p, &kb)?;
    files.push(p);

    if let Some(config) = &trace.last().unwrap().config {
        let mut arch = String::from("name,value\n");
        for (i, c) in config.out_channels.iter().enumerate() {
            arch.push_str(&format!("channels_{i},{c}\n"));
        }
        arch.push_str(&format!("spatial,{}\n", config.spatial));
        arch.push_str(&format!("depth,{}\n", config.depth));
        let p = out_dir.join("final_architecture.csv");
        write_file(&p, &arch)?;
        files.push(p);
    }

    Ok(ReportSummary {
        records: trace.len(),
        files,
    })
}
