// SPDX-License-Identifier: MIT OR Apache-2.0

//! `select-layer`, `train-stitch` and `transfer-sae`.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::json;
use stitchkit::scaling::{estimate_flops, FlopModel};
use stitchkit::stitch::{train_stitch, StitchTrainConfig};
use stitchkit::svcca::{select_layer, DEFAULT_SAMPLE_TOKENS, DEFAULT_VARIANCE_THRESHOLD};
use stitchkit::tensor_store::ActivationShard;
use stitchkit::transfer::{transfer_sae, ZeroShotReport};
use stitchkit::{sae, Mat};

use super::synth::{layer_file, SynthStage};
use super::{concat, f, first_issue, parsed, require_aligned, select_rows};
use crate::config::{check_files, path_or, paths_or, Config, Issue};
use crate::error::{CliError, CliResult};
use crate::run::{sha256_file, Run};

// ---------------------------------------------------------------------------
// select-layer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectStage {
    pub fixed: Option<PathBuf>,
    pub candidates: Option<Vec<PathBuf>>,
    pub variance_threshold: f64,
    pub sample_tokens: usize,
}

impl Default for SelectStage {
    fn default() -> Self {
        Self {
            fixed: None,
            candidates: None,
            variance_threshold: DEFAULT_VARIANCE_THRESHOLD,
            sample_tokens: DEFAULT_SAMPLE_TOKENS,
        }
    }
}

fn select_paths(cfg: &Config, s: &SelectStage) -> (PathBuf, Vec<PathBuf>) {
    let fixed = path_or(cfg, &s.fixed, "synth_a.axt");
    let candidates = s.candidates.clone().unwrap_or_else(|| {
        let n = cfg.stage::<SynthStage>("synth").map(|s| s.n_layers).unwrap_or(4);
        (0..n).map(|j| cfg.out(&layer_file(j))).collect()
    });
    (fixed, candidates)
}

pub fn check_select(cfg: &Config) -> Vec<Issue> {
    let s: SelectStage = match parsed(cfg, "select_layer") {
        Ok(s) => s,
        Err(i) => return i,
    };
    let mut out = Vec::new();
    let (fixed, candidates) = select_paths(cfg, &s);
    check_files("select_layer.fixed", &[fixed], &mut out);
    check_files("select_layer.candidates", &candidates, &mut out);
    if !(s.variance_threshold > 0.0 && s.variance_threshold <= 1.0) {
        out.push(Issue::new("select_layer.variance_threshold", "must lie in (0, 1]"));
    }
    if s.sample_tokens < 2 {
        out.push(Issue::new("select_layer.sample_tokens", "must be at least 2"));
    }
    out
}

pub fn run_select(run: &mut Run) -> CliResult<()> {
    first_issue(check_select(&run.cfg))?;
    let s: SelectStage = run.cfg.stage("select_layer")?;
    let (fixed_path, cand_paths) = select_paths(&run.cfg, &s);
    let (fixed, _, fixed_mask) = concat(&[run.read_shard("select_layer.fixed", &fixed_path)?]);
    let mut cands = Vec::new();
    let mut keep: Vec<bool> = fixed_mask.iter().map(|m| !m).collect();
    for p in &cand_paths {
        let (m, _, mask) = concat(&[run.read_shard("select_layer.candidates", p)?]);
        require_aligned("select_layer.candidates", m.nrows(), fixed.nrows())?;
        for (k, sp) in keep.iter_mut().zip(&mask) {
            *k &= !sp;
        }
        cands.push(m);
    }
    let rows: Vec<usize> = (0..fixed.nrows()).filter(|&r| keep[r]).take(s.sample_tokens).collect();
    let fixed = select_rows(&fixed, &rows);
    let cands: Vec<Mat> = cands.iter().map(|m| select_rows(m, &rows)).collect();
    let report = select_layer(&fixed, &cands, s.variance_threshold)?;
    let table: Vec<Vec<String>> = report
        .scores
        .iter()
        .enumerate()
        .map(|(j, sc)| vec![j.to_string(), f(*sc), u8::from(j == report.chosen_layer).to_string()])
        .collect();
    run.write_csv(run.cfg.out("select_layer.csv"), &["layer", "score", "chosen"], &table)?;
    println!("chosen layer {} (score {:.4})", report.chosen_layer, report.scores[report.chosen_layer]);
    Ok(())
}

// ---------------------------------------------------------------------------
// train-stitch
// ---------------------------------------------------------------------------

#[derive(Default, Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StitchStage {
    pub a: Option<Vec<PathBuf>>,
    pub b: Option<Vec<PathBuf>>,
    #[serde(flatten)]
    pub train: StitchTrainConfig,
}

pub fn check_train(cfg: &Config) -> Vec<Issue> {
    let s: StitchStage = match parsed(cfg, "stitch") {
        Ok(s) => s,
        Err(i) => return i,
    };
    let mut out = Vec::new();
    let a = paths_or(cfg, &s.a, &["synth_a.axt"]);
    let b = paths_or(cfg, &s.b, &["synth_b.axt"]);
    check_files("stitch.a", &a, &mut out);
    check_files("stitch.b", &b, &mut out);
    if a.len() != b.len() {
        out.push(Issue::new("stitch.b", "must list as many shards as stitch.a"));
    }
    if let Err(e) = s.train.validate() {
        out.push(Issue::new("stitch", e.to_string()));
    }
    out
}

pub fn run_train(run: &mut Run) -> CliResult<()> {
    first_issue(check_train(&run.cfg))?;
    let mut s: StitchStage = run.cfg.stage("stitch")?;
    if !run.cfg.table("stitch").contains_key("seed") {
        s.train.seed = run.seed;
    }
    let a = run.read_shards("stitch.a", &paths_or(&run.cfg, &s.a, &["synth_a.axt"]))?;
    let b = run.read_shards("stitch.b", &paths_or(&run.cfg, &s.b, &["synth_b.axt"]))?;
    for (x, y) in a.iter().zip(&b) {
        require_aligned("stitch.b", x.n_tokens(), y.n_tokens())?;
    }
    let (stitch, history) = train_stitch(&s.train, &a, &b)?;
    run.flops = estimate_flops(&FlopModel::stitch(stitch.d_a(), stitch.d_b()), history.tokens_processed) as f64;
    run.write_bundle(&stitch.to_bundle(), run.cfg.out("stitch.axt"))?;
    let opt = |p: Option<f64>| p.map(f).unwrap_or_default();
    let rows: Vec<Vec<String>> = history
        .entries
        .iter()
        .map(|e| {
            let h = e.heldout.as_ref();
            vec![
                e.step.to_string(),
                e.tokens.to_string(),
                f(e.lr),
                f(e.train.total),
                f(e.train.up_mse),
                f(e.train.down_mse),
                f(e.train.inv_a_mse),
                f(e.train.inv_b_mse),
                opt(h.map(|p| p.total)),
                opt(h.map(|p| p.up_mse)),
                opt(h.map(|p| p.down_mse)),
                opt(h.map(|p| p.inv_a_mse + p.inv_b_mse)),
            ]
        })
        .collect();
    run.write_csv(
        run.cfg.out("stitch_history.csv"),
        &[
            "step", "tokens", "lr", "train_total", "train_up", "train_down", "train_inv_a", "train_inv_b",
            "heldout_total", "heldout_up", "heldout_down", "heldout_inv",
        ],
        &rows,
    )?;
    if let Some(h) = &history.final_heldout {
        println!("held-out loss {:.3e} (up {:.3e}, down {:.3e})", h.total, h.up_mse, h.down_mse);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// transfer-sae
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferStage {
    pub sae: Option<PathBuf>,
    pub stitch: Option<PathBuf>,
    /// Shards of the source model for the "original" column. Empty skips it.
    pub source_shards: Option<Vec<PathBuf>>,
    /// Shards of the target model for zero-shot evaluation. Empty skips it.
    pub target_shards: Option<Vec<PathBuf>>,
    pub batch_tokens: usize,
}

impl Default for TransferStage {
    fn default() -> Self {
        Self {
            sae: None,
            stitch: None,
            source_shards: None,
            target_shards: None,
            batch_tokens: 1024,
        }
    }
}

struct TransferPaths {
    sae: PathBuf,
    stitch: PathBuf,
    source: Vec<PathBuf>,
    target: Vec<PathBuf>,
}

fn transfer_paths(cfg: &Config, s: &TransferStage) -> TransferPaths {
    TransferPaths {
        sae: path_or(cfg, &s.sae, "synth_sae_a.axt"),
        stitch: path_or(cfg, &s.stitch, "stitch.axt"),
        source: paths_or(cfg, &s.source_shards, &["synth_a.axt"]),
        target: paths_or(cfg, &s.target_shards, &["synth_b.axt"]),
    }
}

pub fn check_transfer(cfg: &Config) -> Vec<Issue> {
    let s: TransferStage = match parsed(cfg, "transfer") {
        Ok(s) => s,
        Err(i) => return i,
    };
    let p = transfer_paths(cfg, &s);
    let mut out = Vec::new();
    check_files("transfer.sae", &[p.sae], &mut out);
    check_files("transfer.stitch", &[p.stitch], &mut out);
    if !p.source.is_empty() {
        check_files("transfer.source_shards", &p.source, &mut out);
    }
    if !p.target.is_empty() {
        check_files("transfer.target_shards", &p.target, &mut out);
    }
    if s.batch_tokens == 0 {
        out.push(Issue::new("transfer.batch_tokens", "must be positive"));
    }
    out
}

pub fn run_transfer(run: &mut Run) -> CliResult<()> {
    first_issue(check_transfer(&run.cfg))?;
    let s: TransferStage = run.cfg.stage("transfer")?;
    let p = transfer_paths(&run.cfg, &s);
    let theta = run.read_sae("transfer.sae", &p.sae)?;
    let stitch = run.read_stitch("transfer.stitch", &p.stitch)?;
    let t = transfer_sae(&theta, &stitch)
        .map_err(|e| CliError::from(e).with_key("transfer.stitch"))?
        .with_provenance(sha256_file(&p.sae)?, sha256_file(&p.stitch)?);
    let mut attrs: BTreeMap<String, serde_json::Value> = BTreeMap::new();
    attrs.insert("source_id".into(), json!(t.source_id));
    attrs.insert("stitch_id".into(), json!(t.stitch_id));
    attrs.insert("rank_bound".into(), json!(t.rank_bound));
    if let Some(m) = &stitch.target {
        attrs.insert("source_model".into(), json!(m.model_name));
        attrs.insert("layer".into(), json!(m.layer));
    }
    run.write_bundle(&t.params.to_bundle(&attrs), run.cfg.out("sae_transferred.axt"))?;
    let (ex_e, ex_d) = t.excess_rank();
    run.write_csv(
        run.cfg.out("transfer.csv"),
        &["key", "value"],
        &[
            vec!["rank_bound".into(), t.rank_bound.to_string()],
            vec!["excess_rank_encoder".into(), f(ex_e)],
            vec!["excess_rank_decoder".into(), f(ex_d)],
        ],
    )?;

    if !p.target.is_empty() {
        let target = run.read_shards("transfer.target_shards", &p.target)?;
        let transfer = eval_on(&t.params, &target, s.batch_tokens)?;
        let original = if p.source.is_empty() {
            None
        } else {
            let source = run.read_shards("transfer.source_shards", &p.source)?;
            Some(eval_on(&theta, &source, s.batch_tokens)?)
        };
        let report = ZeroShotReport { original, transfer };
        let pick = |m: &sae::SaeMetrics, i: usize| [m.l0, m.fuv, m.dead_fraction][i];
        let rows: Vec<Vec<String>> = report
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, (name, shown))| {
                vec![
                    name,
                    report.original.as_ref().map(|o| f(pick(o, i))).unwrap_or_default(),
                    f(pick(&report.transfer, i)),
                    shown,
                ]
            })
            .collect();
        run.write_csv(run.cfg.out("zero_shot.csv"), &["metric", "original", "transfer", "display"], &rows)?;
        for r in &rows {
            println!("{}: {}", r[0], r[3]);
        }
    }
    Ok(())
}

fn eval_on(p: &sae::SaeParams, shards: &[ActivationShard], batch: usize) -> CliResult<sae::SaeMetrics> {
    if shards[0].d_model != p.d() {
        return Err(CliError::data(format!(
            "SAE expects width {}, shards have {}",
            p.d(),
            shards[0].d_model
        )));
    }
    Ok(sae::eval_sae_shards(p, shards, batch)?)
}
