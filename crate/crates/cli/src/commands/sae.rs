// SPDX-License-Identifier: MIT OR Apache-2.0

//! `train-sae` and `eval-sae`.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::json;
use stitchkit::sae::{eval_sae_shards, train_sae, Activation, SaeInit, SaeTrainConfig};

use super::{f, first_issue, parsed};
use crate::config::{check_files, path_or, paths_or, Config, Issue};
use crate::error::{CliError, CliResult};
use crate::run::Run;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SaeStage {
    pub shards: Option<Vec<PathBuf>>,
    /// Warm-start parameters (e.g. a transferred SAE). Random tied init
    /// when absent.
    pub init: Option<PathBuf>,
    /// FLOPs already spent before training (e.g. the stitch); added to the
    /// cumulative FLOP column.
    pub extra_flops: f64,
    #[serde(flatten)]
    pub train: SaeTrainConfig,
}

impl Default for SaeStage {
    fn default() -> Self {
        Self {
            shards: None,
            init: None,
            extra_flops: 0.0,
            train: SaeTrainConfig::default(),
        }
    }
}

pub fn check_train(cfg: &Config) -> Vec<Issue> {
    let s: SaeStage = match parsed(cfg, "sae") {
        Ok(s) => s,
        Err(i) => return i,
    };
    let mut out = Vec::new();
    check_files("sae.shards", &paths_or(cfg, &s.shards, &["synth_b.axt"]), &mut out);
    if let Some(p) = &s.init {
        check_files("sae.init", std::slice::from_ref(p), &mut out);
    }
    let t = &s.train;
    if t.k == 0 {
        out.push(Issue::new("sae.k", "must be positive"));
    }
    if t.k > t.latent_size {
        out.push(Issue::new(
            "sae.k",
            format!("k ({}) must not exceed latent_size ({})", t.k, t.latent_size),
        ));
    }
    if t.latent_size == 0 {
        out.push(Issue::new("sae.latent_size", "must be positive"));
    }
    if !(t.learning_rate >= 0.0 && t.learning_rate.is_finite()) {
        out.push(Issue::new("sae.learning_rate", "must be finite and non-negative"));
    }
    if t.batch_tokens == 0 {
        out.push(Issue::new("sae.batch_tokens", "must be positive"));
    }
    if t.log_every == 0 {
        out.push(Issue::new("sae.log_every", "must be positive"));
    }
    if t.total_tokens < t.batch_tokens as u64 {
        out.push(Issue::new("sae.total_tokens", "must be at least batch_tokens"));
    }
    if !(s.extra_flops >= 0.0 && s.extra_flops.is_finite()) {
        out.push(Issue::new("sae.extra_flops", "must be finite and non-negative"));
    }
    out
}

pub fn run_train(run: &mut Run) -> CliResult<()> {
    first_issue(check_train(&run.cfg))?;
    let mut s: SaeStage = run.cfg.stage("sae")?;
    if !run.cfg.table("sae").contains_key("seed") {
        s.train.seed = run.seed;
    }
    let shards = run.read_shards("sae.shards", &paths_or(&run.cfg, &s.shards, &["synth_b.axt"]))?;
    if let Some(p) = &s.init {
        let mut init = run.read_sae("sae.init", p)?;
        if init.m() != s.train.latent_size {
            return Err(CliError::config(
                "sae.latent_size",
                format!("warm-start SAE has {} latents, latent_size is {}", init.m(), s.train.latent_size),
            ));
        }
        init.activation = Activation::TopK(s.train.k);
        s.train.init = SaeInit::FromParams(Box::new(init));
    }
    let result = train_sae(&s.train, &shards)?;
    run.flops = result.flops_consumed + s.extra_flops;
    let mut attrs: BTreeMap<String, serde_json::Value> = BTreeMap::new();
    attrs.insert("source_model".into(), json!(shards[0].meta.model_name));
    attrs.insert("layer".into(), json!(shards[0].meta.layer));
    run.write_bundle(&result.params.to_bundle(&attrs), run.cfg.out("sae.axt"))?;
    let rows: Vec<Vec<String>> = result
        .history
        .iter()
        .map(|e| {
            vec![
                e.step.to_string(),
                e.tokens.to_string(),
                f(e.flops + s.extra_flops),
                f(e.mse),
                f(e.explained_variance),
                f(e.l0),
            ]
        })
        .collect();
    run.write_csv(
        run.cfg.out("sae_history.csv"),
        &["step", "tokens", "flops", "mse", "explained_variance", "l0"],
        &rows,
    )?;
    if let Some(last) = result.history.last() {
        println!("final explained variance {:.4}, L0 {:.2}", last.explained_variance, last.l0);
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalStage {
    pub sae: Option<PathBuf>,
    pub shards: Option<Vec<PathBuf>>,
    pub batch_tokens: usize,
}

impl Default for EvalStage {
    fn default() -> Self {
        Self {
            sae: None,
            shards: None,
            batch_tokens: 1024,
        }
    }
}

pub fn check_eval(cfg: &Config) -> Vec<Issue> {
    let s: EvalStage = match parsed(cfg, "eval") {
        Ok(s) => s,
        Err(i) => return i,
    };
    let mut out = Vec::new();
    check_files("eval.sae", &[path_or(cfg, &s.sae, "sae.axt")], &mut out);
    check_files("eval.shards", &paths_or(cfg, &s.shards, &["synth_b.axt"]), &mut out);
    if s.batch_tokens == 0 {
        out.push(Issue::new("eval.batch_tokens", "must be positive"));
    }
    out
}

pub fn run_eval(run: &mut Run) -> CliResult<()> {
    first_issue(check_eval(&run.cfg))?;
    let s: EvalStage = run.cfg.stage("eval")?;
    let p = run.read_sae("eval.sae", &path_or(&run.cfg, &s.sae, "sae.axt"))?;
    let shards = run.read_shards("eval.shards", &paths_or(&run.cfg, &s.shards, &["synth_b.axt"]))?;
    if shards[0].d_model != p.d() {
        return Err(CliError::data(format!("SAE expects width {}, shards have {}", p.d(), shards[0].d_model))
            .with_key("eval.shards"));
    }
    let m = eval_sae_shards(&p, &shards, s.batch_tokens)?;
    let rows = vec![
        vec!["l0".into(), f(m.l0)],
        vec!["fuv".into(), f(m.fuv)],
        vec!["explained_variance".into(), f(m.explained_variance)],
        vec!["dead_fraction".into(), f(m.dead_fraction)],
        vec!["mse".into(), f(m.mse)],
        vec!["n_tokens".into(), m.n_tokens.to_string()],
    ];
    run.write_csv(run.cfg.out("eval.csv"), &["metric", "value"], &rows)?;
    println!("L0 {:.2}  FUV {:.4}  dead {:.1}%", m.l0, m.fuv, 100.0 * m.dead_fraction);
    Ok(())
}
