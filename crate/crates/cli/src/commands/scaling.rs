// SPDX-License-Identifier: MIT OR Apache-2.0

//! `scaling-report`: loss frontiers, power-law fits and FLOPs to an
//! explained-variance threshold from SAE training histories.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use stitchkit::scaling::{fit_power_law, flops_to_threshold_at, frontier};

use super::{f, first_issue, parsed};
use crate::config::{check_files, paths_or, Config, Issue};
use crate::error::{CliError, CliResult};
use crate::run::Run;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalingStage {
    pub histories: Option<Vec<PathBuf>>,
    pub run_ids: Option<Vec<String>>,
    pub threshold: f64,
}

impl Default for ScalingStage {
    fn default() -> Self {
        Self {
            histories: None,
            run_ids: None,
            threshold: 0.9,
        }
    }
}

fn resolve(cfg: &Config, s: &ScalingStage) -> (Vec<PathBuf>, Vec<String>) {
    let histories = paths_or(cfg, &s.histories, &["sae_history.csv"]);
    let ids = s.run_ids.clone().unwrap_or_else(|| {
        histories
            .iter()
            .map(|p| p.file_stem().map(|x| x.to_string_lossy().into_owned()).unwrap_or_default())
            .collect()
    });
    (histories, ids)
}

pub fn check(cfg: &Config) -> Vec<Issue> {
    let s: ScalingStage = match parsed(cfg, "scaling") {
        Ok(s) => s,
        Err(i) => return i,
    };
    let (h, ids) = resolve(cfg, &s);
    let mut out = Vec::new();
    check_files("scaling.histories", &h, &mut out);
    if ids.len() != h.len() {
        out.push(Issue::new("scaling.run_ids", "must name every entry of scaling.histories"));
    }
    if !(s.threshold > 0.0 && s.threshold <= 1.0) {
        out.push(Issue::new("scaling.threshold", "must lie in (0, 1]"));
    }
    out
}

/// `(flops, mse, explained variance)` per log entry.
fn read_history(run: &mut Run, path: &std::path::Path) -> CliResult<Vec<(f64, f64, f64)>> {
    let (header, rows) = run.read_csv("scaling.histories", path)?;
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::data(format!("{} lacks a {name} column", path.display())).with_key("scaling.histories"))
    };
    let (fc, mc, ec) = (col("flops")?, col("mse")?, col("explained_variance")?);
    rows.iter()
        .map(|r| {
            let parse = |i: usize| {
                r.get(i)
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| CliError::data(format!("malformed row {r:?}")).with_key("scaling.histories"))
            };
            Ok((parse(fc)?, parse(mc)?, parse(ec)?))
        })
        .collect()
}

pub fn run(run: &mut Run) -> CliResult<()> {
    first_issue(check(&run.cfg))?;
    let s: ScalingStage = run.cfg.stage("scaling")?;
    let (paths, ids) = resolve(&run.cfg, &s);
    let mut frontier_rows = Vec::new();
    let mut fit_rows = Vec::new();
    let mut threshold_rows = Vec::new();
    for (path, id) in paths.iter().zip(&ids) {
        let hist = read_history(run, path)?;
        let losses: Vec<(f64, f64)> = hist.iter().map(|&(c, mse, _)| (c, mse)).collect();
        let front = frontier(&losses, id).map_err(|e| CliError::from(e).with_key("scaling.histories"))?;
        for p in &front {
            frontier_rows.push(vec![p.run_id.clone(), f(p.flops), f(p.loss)]);
        }
        let positive: Vec<_> = front.iter().filter(|p| p.flops > 0.0 && p.loss > 0.0).cloned().collect();
        match fit_power_law(&positive) {
            Ok(fit) => fit_rows.push(vec![id.clone(), f(fit.a), f(fit.beta), f(fit.r_squared)]),
            Err(_) => fit_rows.push(vec![id.clone(), String::new(), String::new(), String::new()]),
        }
        let ev: Vec<(f64, f64)> = hist.iter().map(|&(c, _, ev)| (c, ev)).collect();
        let reached = flops_to_threshold_at(&ev, s.threshold, 0.0);
        threshold_rows.push(vec![id.clone(), f(s.threshold), stitchkit::report::fmt_opt(reached)]);
    }
    run.write_csv(run.cfg.out("frontier.csv"), &["run_id", "flops", "loss"], &frontier_rows)?;
    run.write_csv(run.cfg.out("fit.csv"), &["model", "a", "beta", "r_squared"], &fit_rows)?;
    run.write_csv(run.cfg.out("threshold.csv"), &["run_id", "threshold", "flops"], &threshold_rows)?;
    for r in &threshold_rows {
        if r[2].is_empty() {
            println!("{}: never reaches {}", r[0], r[1]);
        } else {
            println!("{}: reaches {} at {} FLOPs", r[0], r[1], r[2]);
        }
    }
    Ok(())
}
