// SPDX-License-Identifier: MIT OR Apache-2.0

//! `probe`, `steer-vector` and `analyze-features`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stitchkit::analysis::features::{activation_sets_from_codes, score_with, DEFAULT_TAIL_FRACTION};
use stitchkit::analysis::probe::{example_means, restrict};
use stitchkit::analysis::steering::{apply_clamp_rows, transfer_steering_vector};
use stitchkit::analysis::{
    attribution_correlation, classify_semantic_structural,
    compute_steering_vector, eval_probe, relative_transfer_gap, select_features, train_probe, AttributionInputs,
    NullSpace, ProbeConfig, TokenSet,
};
use stitchkit::tensor_store::{find, DenseMatrix};
use stitchkit::transfer::Direction;
use stitchkit::{rng, Mat, SaeParams};

use super::{concat, f, first_issue, parse_examples, parsed, require_aligned, select_rows};
use crate::config::{check_files, path_or, paths_or, Config, Issue};
use crate::error::{CliError, CliResult};
use crate::run::Run;

// ---------------------------------------------------------------------------
// probe
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeStage {
    pub data: Option<PathBuf>,
    pub examples: Option<PathBuf>,
    pub saes: Option<Vec<PathBuf>>,
    pub methods: Option<Vec<String>>,
    pub dataset: String,
    pub k: usize,
    pub train_fraction: f64,
    #[serde(flatten)]
    pub fit: ProbeConfig,
}

impl Default for ProbeStage {
    fn default() -> Self {
        Self {
            data: None,
            examples: None,
            saes: None,
            methods: None,
            dataset: "synthetic".into(),
            k: 1,
            train_fraction: 0.5,
            fit: ProbeConfig::default(),
        }
    }
}

struct ProbePaths {
    data: PathBuf,
    examples: PathBuf,
    saes: Vec<PathBuf>,
    methods: Vec<String>,
}

fn probe_paths(cfg: &Config, s: &ProbeStage) -> ProbePaths {
    let saes = paths_or(cfg, &s.saes, &["synth_sae_b.axt", "sae_transferred.axt"]);
    let methods = s.methods.clone().unwrap_or_else(|| {
        if s.saes.is_none() {
            vec!["ground_truth".into(), "transfer".into()]
        } else {
            saes.iter()
                .map(|p| p.file_stem().map(|x| x.to_string_lossy().into_owned()).unwrap_or_default())
                .collect()
        }
    });
    ProbePaths {
        data: path_or(cfg, &s.data, "synth_probe_b.axt"),
        examples: path_or(cfg, &s.examples, "synth_probe.csv"),
        saes,
        methods,
    }
}

pub fn check_probe(cfg: &Config) -> Vec<Issue> {
    let s: ProbeStage = match parsed(cfg, "probe") {
        Ok(s) => s,
        Err(i) => return i,
    };
    let p = probe_paths(cfg, &s);
    let mut out = Vec::new();
    check_files("probe.data", &[p.data], &mut out);
    check_files("probe.examples", &[p.examples], &mut out);
    check_files("probe.saes", &p.saes, &mut out);
    if p.methods.len() != p.saes.len() {
        out.push(Issue::new("probe.methods", "must name every entry of probe.saes"));
    }
    if s.k == 0 {
        out.push(Issue::new("probe.k", "must be positive"));
    }
    if !(s.train_fraction > 0.0 && s.train_fraction < 1.0) {
        out.push(Issue::new("probe.train_fraction", "must lie in (0, 1)"));
    }
    if !(s.fit.l2 >= 0.0) {
        out.push(Issue::new("probe.l2", "must be non-negative"));
    }
    out
}

pub fn run_probe(run: &mut Run) -> CliResult<()> {
    first_issue(check_probe(&run.cfg))?;
    let s: ProbeStage = run.cfg.stage("probe")?;
    let p = probe_paths(&run.cfg, &s);
    let (x, _, _) = concat(&[run.read_shard("probe.data", &p.data)?]);
    let (_, rows) = run.read_csv("probe.examples", &p.examples)?;
    let examples = parse_examples("probe.examples", &rows)?;
    let n_train = ((examples.len() as f64) * s.train_fraction).round() as usize;
    if n_train == 0 || n_train >= examples.len() {
        return Err(CliError::data("too few examples for a train/test split").with_key("probe.examples"));
    }
    let spans: Vec<(usize, usize)> = examples.iter().map(|&(st, len, _)| (st, len)).collect();
    let labels: Vec<bool> = examples.iter().map(|e| e.2).collect();
    let mut table = Vec::new();
    for (path, method) in p.saes.iter().zip(&p.methods) {
        let sae = run.read_sae("probe.saes", path)?;
        if sae.d() != x.ncols() {
            return Err(CliError::data(format!("{} expects width {}", path.display(), sae.d())).with_key("probe.saes"));
        }
        if s.k > sae.m() {
            return Err(CliError::config("probe.k", format!("exceeds the latent size {} of {}", sae.m(), path.display())));
        }
        let means = example_means(&sae.encode(&x)?, &spans).map_err(|e| CliError::from(e).with_key("probe.examples"))?;
        let (train_rows, test_rows): (Vec<usize>, Vec<usize>) = (0..examples.len()).partition(|&i| i < n_train);
        let pick = |want: bool| -> Vec<usize> { train_rows.iter().copied().filter(|&i| labels[i] == want).collect() };
        let (pos, neg) = (pick(true), pick(false));
        if pos.is_empty() || neg.is_empty() {
            return Err(CliError::data("training split lacks one class").with_key("probe.examples"));
        }
        let feats = select_features(&select_rows(&means, &pos), &select_rows(&means, &neg), s.k)?;
        let xtr = restrict(&select_rows(&means, &train_rows), &feats);
        let ytr: Vec<bool> = train_rows.iter().map(|&i| labels[i]).collect();
        let mut probe = train_probe(&xtr, &ytr, &s.fit)?;
        probe.feature_indices.clone_from(&feats);
        probe.trained_on.clone_from(method);
        let xte = restrict(&select_rows(&means, &test_rows), &feats);
        let yte: Vec<bool> = test_rows.iter().map(|&i| labels[i]).collect();
        let train_acc = eval_probe(&probe, &xtr, &ytr)?;
        let test_acc = eval_probe(&probe, &xte, &yte)?;
        let feat_list = feats.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ");
        println!("{method}: features [{feat_list}] test accuracy {test_acc:.3}");
        table.push(vec![
            s.dataset.clone(),
            method.clone(),
            s.k.to_string(),
            feat_list,
            f(train_acc),
            f(test_acc),
        ]);
    }
    run.write_csv(
        run.cfg.out("probe.csv"),
        &["dataset", "method", "k", "features", "train_accuracy", "test_accuracy"],
        &table,
    )
}

// ---------------------------------------------------------------------------
// steer-vector
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SteerStage {
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub examples: Option<PathBuf>,
    pub stitch: Option<PathBuf>,
    pub label: String,
    pub layer: u32,
}

struct SteerPaths {
    source: PathBuf,
    target: PathBuf,
    examples: PathBuf,
    stitch: PathBuf,
}

fn steer_paths(cfg: &Config, s: &SteerStage) -> SteerPaths {
    SteerPaths {
        source: path_or(cfg, &s.source, "synth_probe_a.axt"),
        target: path_or(cfg, &s.target, "synth_probe_b.axt"),
        examples: path_or(cfg, &s.examples, "synth_probe.csv"),
        stitch: path_or(cfg, &s.stitch, "stitch.axt"),
    }
}

pub fn check_steer(cfg: &Config) -> Vec<Issue> {
    let s: SteerStage = match parsed(cfg, "steer") {
        Ok(s) => s,
        Err(i) => return i,
    };
    let p = steer_paths(cfg, &s);
    let mut out = Vec::new();
    check_files("steer.source", &[p.source], &mut out);
    check_files("steer.target", &[p.target], &mut out);
    check_files("steer.examples", &[p.examples], &mut out);
    check_files("steer.stitch", &[p.stitch], &mut out);
    out
}

/// Token rows of the examples carrying `label`.
fn token_rows(examples: &[(usize, usize, bool)], label: bool, n: usize) -> CliResult<Vec<usize>> {
    let mut rows = Vec::new();
    for &(st, len, l) in examples {
        if st + len > n {
            return Err(CliError::data(format!("example span ({st}, {len}) out of range")).with_key("steer.examples"));
        }
        if l == label {
            rows.extend(st..st + len);
        }
    }
    Ok(rows)
}

/// Share of negative examples whose mean projection onto `native` passes the
/// midpoint between the class means once every token is clamped.
fn steer_success(
    h: &Mat,
    examples: &[(usize, usize, bool)],
    sv: &stitchkit::analysis::SteeringVector,
    native: &stitchkit::Vector,
    midpoint: f64,
) -> f64 {
    let negs: Vec<_> = examples.iter().filter(|e| !e.2).collect();
    let hits = negs
        .iter()
        .filter(|&&&(st, len, _)| {
            let clamped = apply_clamp_rows(&h.rows(st, len).into_owned(), sv);
            (clamped * native).mean() > midpoint
        })
        .count();
    hits as f64 / negs.len().max(1) as f64
}

pub fn run_steer(run: &mut Run) -> CliResult<()> {
    first_issue(check_steer(&run.cfg))?;
    let s: SteerStage = run.cfg.stage("steer")?;
    let p = steer_paths(&run.cfg, &s);
    let (ha, _, _) = concat(&[run.read_shard("steer.source", &p.source)?]);
    let (hb, _, _) = concat(&[run.read_shard("steer.target", &p.target)?]);
    require_aligned("steer.target", hb.nrows(), ha.nrows())?;
    let (_, rows) = run.read_csv("steer.examples", &p.examples)?;
    let examples = parse_examples("steer.examples", &rows)?;
    let stitch = run.read_stitch("steer.stitch", &p.stitch)?;
    if stitch.d_a() != ha.ncols() || stitch.d_b() != hb.ncols() {
        return Err(CliError::data("stitch dimensions do not match the activations").with_key("steer.stitch"));
    }
    let pos = token_rows(&examples, true, ha.nrows())?;
    let neg = token_rows(&examples, false, ha.nrows())?;
    let mut source = compute_steering_vector(&select_rows(&ha, &pos), &select_rows(&ha, &neg))?;
    source.layer = s.layer;
    source.label.clone_from(&s.label);
    let (bpos, bneg) = (select_rows(&hb, &pos), select_rows(&hb, &neg));
    let transferred = transfer_steering_vector(&source, &stitch, Direction::Up, &bpos)?;
    let native = compute_steering_vector(&bpos, &bneg)?;
    let nv = native.direction();
    let midpoint = 0.5 * ((&bpos * &nv).mean() + (&bneg * &nv).mean());
    let native_perf = steer_success(&hb, &examples, &native, &nv, midpoint);
    let transfer_perf = steer_success(&hb, &examples, &transferred, &nv, midpoint);
    let gap = relative_transfer_gap(transfer_perf, native_perf)?;
    let cosine = transferred.direction().dot(&nv);

    let vec_mat = |sv: &stitchkit::analysis::SteeringVector| {
        DenseMatrix::from_vector(&sv.direction(), "steering")
            .with_attr("z_bar", sv.z_bar)
            .with_attr("layer", sv.layer)
            .with_attr("label", sv.label.clone())
    };
    run.write_bundle(&[vec_mat(&source)], run.cfg.out("steering_source.axt"))?;
    run.write_bundle(&[vec_mat(&transferred)], run.cfg.out("steering_transfer.axt"))?;
    run.write_csv(
        run.cfg.out("steer.csv"),
        &[
            "label", "z_bar_source", "z_bar_transfer", "cosine_to_native", "native_success", "transfer_success", "gap",
        ],
        &[vec![
            s.label.clone(),
            f(source.z_bar),
            f(transferred.z_bar),
            f(cosine),
            f(native_perf),
            f(transfer_perf),
            f(gap),
        ]],
    )?;
    println!("cosine to native {cosine:.4}, gap {gap:.3}");
    Ok(())
}

// ---------------------------------------------------------------------------
// analyze-features
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FeaturesStage {
    pub data_a: Option<PathBuf>,
    pub data_b: Option<PathBuf>,
    pub groups: Option<PathBuf>,
    pub sae_a: Option<PathBuf>,
    pub sae_b: Option<PathBuf>,
    pub unembed_a: Option<PathBuf>,
    pub unembed_b: Option<PathBuf>,
    pub tail_fraction: f64,
    /// Correlate over every token instead of active plus sampled tokens.
    pub all_tokens: bool,
}

impl Default for FeaturesStage {
    fn default() -> Self {
        Self {
            data_a: None,
            data_b: None,
            groups: None,
            sae_a: None,
            sae_b: None,
            unembed_a: None,
            unembed_b: None,
            tail_fraction: DEFAULT_TAIL_FRACTION,
            all_tokens: false,
        }
    }
}

struct FeaturePaths {
    data_a: PathBuf,
    data_b: PathBuf,
    groups: PathBuf,
    sae_a: PathBuf,
    sae_b: PathBuf,
    unembed_a: PathBuf,
    unembed_b: PathBuf,
}

fn feature_paths(cfg: &Config, s: &FeaturesStage) -> FeaturePaths {
    FeaturePaths {
        data_a: path_or(cfg, &s.data_a, "synth_groups_a.axt"),
        data_b: path_or(cfg, &s.data_b, "synth_groups_b.axt"),
        groups: path_or(cfg, &s.groups, "synth_groups.csv"),
        sae_a: path_or(cfg, &s.sae_a, "synth_sae_a.axt"),
        sae_b: path_or(cfg, &s.sae_b, "sae_transferred.axt"),
        unembed_a: path_or(cfg, &s.unembed_a, "synth_unembed_a.axt"),
        unembed_b: path_or(cfg, &s.unembed_b, "synth_unembed_b.axt"),
    }
}

pub fn check_features(cfg: &Config) -> Vec<Issue> {
    let s: FeaturesStage = match parsed(cfg, "features") {
        Ok(s) => s,
        Err(i) => return i,
    };
    let p = feature_paths(cfg, &s);
    let mut out = Vec::new();
    for (k, path) in [
        ("features.data_a", p.data_a),
        ("features.data_b", p.data_b),
        ("features.groups", p.groups),
        ("features.sae_a", p.sae_a),
        ("features.sae_b", p.sae_b),
        ("features.unembed_a", p.unembed_a),
        ("features.unembed_b", p.unembed_b),
    ] {
        check_files(k, &[path], &mut out);
    }
    if !(s.tail_fraction > 0.0 && s.tail_fraction < 1.0) {
        out.push(Issue::new("features.tail_fraction", "must lie in (0, 1)"));
    }
    out
}

fn read_unembedding(run: &mut Run, key: &str, path: &Path, sae: &SaeParams) -> CliResult<Mat> {
    let mats = run.read_bundle(key, path)?;
    let m = find(&mats, "unembedding")
        .or_else(|_| mats.first().ok_or_else(|| stitchkit::Error::Format("empty bundle".into())))
        .map_err(|e| CliError::from(e).with_key(key))?
        .to_mat();
    if m.nrows() != sae.d() {
        return Err(CliError::data(format!("unembedding has {} rows, SAE width is {}", m.nrows(), sae.d())).with_key(key));
    }
    Ok(m)
}

fn parse_groups(rows: &[Vec<String>]) -> CliResult<Vec<Vec<(usize, usize)>>> {
    let mut groups: Vec<Vec<(usize, usize)>> = Vec::new();
    for r in rows {
        let bad = || CliError::data(format!("malformed group row {r:?}")).with_key("features.groups");
        if r.len() != 4 {
            return Err(bad());
        }
        let g: usize = r[0].parse().map_err(|_| bad())?;
        let st: usize = r[2].parse().map_err(|_| bad())?;
        let len: usize = r[3].parse().map_err(|_| bad())?;
        if g >= groups.len() {
            groups.resize(g + 1, Vec::new());
        }
        groups[g].push((st, len));
    }
    groups.retain(|g| !g.is_empty());
    Ok(groups)
}

pub fn run_features(run: &mut Run) -> CliResult<()> {
    first_issue(check_features(&run.cfg))?;
    let s: FeaturesStage = run.cfg.stage("features")?;
    let p = feature_paths(&run.cfg, &s);
    let (ha, ids, _) = concat(&[run.read_shard("features.data_a", &p.data_a)?]);
    let (hb, _, _) = concat(&[run.read_shard("features.data_b", &p.data_b)?]);
    require_aligned("features.data_b", hb.nrows(), ha.nrows())?;
    let (_, rows) = run.read_csv("features.groups", &p.groups)?;
    let groups = parse_groups(&rows)?;
    let sae_a = run.read_sae("features.sae_a", &p.sae_a)?;
    let sae_b = run.read_sae("features.sae_b", &p.sae_b)?;
    if sae_a.m() != sae_b.m() {
        return Err(CliError::data("SAEs differ in latent size").with_key("features.sae_b"));
    }
    if sae_a.d() != ha.ncols() || sae_b.d() != hb.ncols() {
        return Err(CliError::data("SAE widths do not match the activations").with_key("features.sae_b"));
    }
    let ua = read_unembedding(run, "features.unembed_a", &p.unembed_a, &sae_a)?;
    let ub = read_unembedding(run, "features.unembed_b", &p.unembed_b, &sae_b)?;

    let codes_a = sae_a.encode(&ha)?;
    let codes_b = sae_b.encode(&hb)?;
    let sets = activation_sets_from_codes(&codes_a, &groups).map_err(|e| CliError::from(e).with_key("features.groups"))?;
    let labels = classify_semantic_structural(&sets, sae_a.m()).map_err(|e| CliError::from(e).with_key("features.groups"))?;

    // Next-token attribution needs a successor, so the last row is dropped.
    let n = ha.nrows().saturating_sub(1);
    let keep: Vec<usize> = (0..n).collect();
    let features: Vec<usize> = (0..sae_a.m()).collect();
    let inputs = AttributionInputs::from_decoders(
        &select_rows(&codes_a, &keep),
        &select_rows(&codes_b, &keep),
        &sae_a.w_d,
        &sae_b.w_d,
        &ua,
        &ub,
        &ids[1..=n],
        &features,
    )
    .map_err(|e| CliError::from(e).with_key("features.data_a"))?;
    let token_set = if s.all_tokens {
        TokenSet::All
    } else {
        TokenSet::ActivePlusSample {
            seed: rng::substream(run.seed, "attribution"),
        }
    };
    let corr = attribution_correlation(&inputs, token_set)?;
    let ns = NullSpace::from_unembedding(&ub, s.tail_fraction)?;

    let mut table = Vec::new();
    let mut counts = std::collections::BTreeMap::<&str, usize>::new();
    for (l, c) in labels.iter().zip(&corr) {
        let row = sae_b.w_d.row(l.feature).transpose();
        let (comp, proxy) = match score_with(&ns, &row) {
            Ok(sc) => (f(sc.nullspace_composition), f(sc.max_activation_proxy)),
            Err(_) => (String::new(), f(0.0)),
        };
        *counts.entry(l.label.as_str()).or_default() += 1;
        table.push(vec![
            l.feature.to_string(),
            l.label.as_str().to_string(),
            stitchkit::report::fmt_opt(*c),
            comp,
            proxy,
        ]);
    }
    run.write_csv(
        run.cfg.out("features.csv"),
        &["feature", "label", "attribution_corr", "nullspace_composition", "max_activation_proxy"],
        &table,
    )?;
    let summary: Vec<Vec<String>> = counts.iter().map(|(k, v)| vec![k.to_string(), v.to_string()]).collect();
    run.write_csv(run.cfg.out("features_summary.csv"), &["label", "count"], &summary)?;
    for r in &summary {
        println!("{}: {}", r[0], r[1]);
    }
    Ok(())
}
