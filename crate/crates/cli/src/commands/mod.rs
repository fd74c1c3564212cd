// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod analysis;
pub mod sae;
pub mod scaling;
pub mod stitch;
pub mod synth;

use stitchkit::tensor_store::ActivationShard;
use stitchkit::Mat;

use crate::config::{Config, Issue};
use crate::error::{CliError, CliResult};
use crate::run::Run;

/// A pipeline stage: its config table name, a static check and a runner.
pub struct Stage {
    pub subcommand: &'static str,
    pub table: &'static str,
    pub check: fn(&Config) -> Vec<Issue>,
    pub run: fn(&mut Run) -> CliResult<()>,
}

pub const ALL: &[Stage] = &[
    Stage { subcommand: "gen-synth", table: "synth", check: synth::check, run: synth::run },
    Stage { subcommand: "select-layer", table: "select_layer", check: stitch::check_select, run: stitch::run_select },
    Stage { subcommand: "train-stitch", table: "stitch", check: stitch::check_train, run: stitch::run_train },
    Stage { subcommand: "train-sae", table: "sae", check: sae::check_train, run: sae::run_train },
    Stage { subcommand: "transfer-sae", table: "transfer", check: stitch::check_transfer, run: stitch::run_transfer },
    Stage { subcommand: "eval-sae", table: "eval", check: sae::check_eval, run: sae::run_eval },
    Stage { subcommand: "probe", table: "probe", check: analysis::check_probe, run: analysis::run_probe },
    Stage { subcommand: "steer-vector", table: "steer", check: analysis::check_steer, run: analysis::run_steer },
    Stage { subcommand: "analyze-features", table: "features", check: analysis::check_features, run: analysis::run_features },
    Stage { subcommand: "scaling-report", table: "scaling", check: scaling::check, run: scaling::run },
];

pub fn by_subcommand(name: &str) -> Option<&'static Stage> {
    ALL.iter().find(|s| s.subcommand == name)
}

/// Parse a stage table, turning a parse failure into a single issue.
pub(crate) fn parsed<T>(cfg: &Config, table: &str) -> Result<T, Vec<Issue>>
where
    T: serde::de::DeserializeOwned + serde::Serialize,
{
    cfg.stage(table).map_err(|e| vec![Issue::new(e.key.unwrap_or_else(|| table.into()), e.message)])
}

/// First issue as an error, if any.
pub(crate) fn first_issue(issues: Vec<Issue>) -> CliResult<()> {
    match issues.into_iter().next() {
        Some(i) => Err(i.into()),
        None => Ok(()),
    }
}

/// Concatenate shard rows (row order preserved) along with token ids and
/// special flags.
pub(crate) fn concat(shards: &[ActivationShard]) -> (Mat, Vec<u32>, Vec<bool>) {
    let d = shards[0].d_model;
    let n: usize = shards.iter().map(ActivationShard::n_tokens).sum();
    let mut m = Mat::zeros(n, d);
    let mut ids = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    let mut r0 = 0;
    for s in shards {
        m.rows_mut(r0, s.n_tokens()).copy_from(&s.to_mat());
        r0 += s.n_tokens();
        ids.extend_from_slice(&s.token_ids);
        mask.extend_from_slice(&s.special_mask);
    }
    (m, ids, mask)
}

pub(crate) fn select_rows(m: &Mat, rows: &[usize]) -> Mat {
    m.select_rows(rows.iter())
}

pub(crate) fn require_aligned(key: &str, a: usize, b: usize) -> CliResult<()> {
    if a != b {
        return Err(CliError::data(format!("row counts differ ({a} vs {b})")).with_key(key));
    }
    Ok(())
}

/// `(start, len, label)` spans from an examples table with header
/// `example,start,len,label`.
pub(crate) fn parse_examples(key: &str, rows: &[Vec<String>]) -> CliResult<Vec<(usize, usize, bool)>> {
    rows.iter()
        .map(|r| {
            let bad = || CliError::data(format!("malformed example row {r:?}")).with_key(key);
            if r.len() != 4 {
                return Err(bad());
            }
            let start = r[1].parse().map_err(|_| bad())?;
            let len = r[2].parse().map_err(|_| bad())?;
            let label = match r[3].as_str() {
                "1" | "true" => true,
                "0" | "false" => false,
                _ => return Err(bad()),
            };
            Ok((start, len, label))
        })
        .collect()
}

pub(crate) fn f(x: f64) -> String {
    x.to_string()
}
