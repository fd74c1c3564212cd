// SPDX-License-Identifier: MIT OR Apache-2.0

//! `gen-synth`: a planted world and every dataset the later stages read.

use serde::{Deserialize, Serialize};
use serde_json::json;
use stitchkit::synthgen::{generate_world, WorldConfig};
use stitchkit::tensor_store::{ActivationShard, DenseMatrix};
use stitchkit::{rng, stitch, Mat};

use super::{f, first_issue, parsed};
use crate::config::{Config, Issue};
use crate::error::CliResult;
use crate::run::Run;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthStage {
    #[serde(flatten)]
    pub world: WorldConfig,
    pub n_tokens: usize,
    /// k of the dictionary SAEs written alongside the data.
    pub sae_k: usize,
    pub n_layers: usize,
    pub planted_layer: usize,
    pub probe_examples: usize,
    pub probe_tokens: usize,
    pub probe_feature: usize,
    pub probe_rate: f64,
    pub groups: usize,
    pub variants: usize,
    pub group_tokens: usize,
    /// Features `0..structural` fire only as group-wide structure.
    pub structural: usize,
    pub per_group: usize,
}

impl Default for SynthStage {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            n_tokens: 20_000,
            sae_k: 8,
            n_layers: 4,
            planted_layer: 2,
            probe_examples: 200,
            probe_tokens: 16,
            probe_feature: 0,
            probe_rate: 0.5,
            groups: 40,
            variants: 4,
            group_tokens: 4,
            structural: 8,
            per_group: 2,
        }
    }
}

pub fn layer_file(j: usize) -> String {
    format!("synth_layer{j}.axt")
}

pub fn check(cfg: &Config) -> Vec<Issue> {
    let s: SynthStage = match parsed(cfg, "synth") {
        Ok(s) => s,
        Err(i) => return i,
    };
    let mut out = Vec::new();
    if let Err(e) = s.world.validate() {
        out.push(Issue::new("synth", e.to_string()));
    }
    let m = s.world.m_true;
    let pos = [
        ("synth.n_tokens", s.n_tokens),
        ("synth.sae_k", s.sae_k),
        ("synth.n_layers", s.n_layers),
        ("synth.probe_tokens", s.probe_tokens),
        ("synth.groups", s.groups),
        ("synth.variants", s.variants),
        ("synth.group_tokens", s.group_tokens),
    ];
    for (k, v) in pos {
        if v == 0 {
            out.push(Issue::new(k, "must be positive"));
        }
    }
    if s.sae_k > m {
        out.push(Issue::new("synth.sae_k", format!("must not exceed m_true ({m})")));
    }
    if s.planted_layer >= s.n_layers {
        out.push(Issue::new("synth.planted_layer", "must be below n_layers"));
    }
    if s.probe_examples < 2 {
        out.push(Issue::new("synth.probe_examples", "must be at least 2"));
    }
    if s.probe_feature >= m {
        out.push(Issue::new("synth.probe_feature", format!("must be below m_true ({m})")));
    }
    if !(0.0..=1.0).contains(&s.probe_rate) {
        out.push(Issue::new("synth.probe_rate", "must lie in [0, 1]"));
    }
    if s.structural > m {
        out.push(Issue::new("synth.structural", format!("must not exceed m_true ({m})")));
    }
    if s.per_group > s.structural {
        out.push(Issue::new("synth.per_group", "must not exceed structural"));
    }
    out
}

pub fn run(run: &mut Run) -> CliResult<()> {
    first_issue(check(&run.cfg))?;
    let s: SynthStage = run.cfg.stage("synth")?;
    let seed = run.seed;
    let world = generate_world(&s.world, rng::substream(seed, "world"))?;
    let pair = world.sample_pair(s.n_tokens, rng::substream(seed, "pair"))?;

    let dir = run.cfg.out_dir.clone();
    let out = |f: &str| dir.join(f);
    let (pa, pb) = (out("synth_a.axt"), out("synth_b.axt"));
    run.write_shard(&pair.a, pa)?;
    run.write_shard(&pair.b, pb)?;
    run.write_bundle(&[DenseMatrix::from_mat(&pair.codes, "codes")], out("synth_codes.axt"))?;
    run.write_bundle(
        &[
            DenseMatrix::from_mat(&world.dict_a, "dict_a").with_attr("seed", world.seed),
            DenseMatrix::from_mat(&world.embed, "embed"),
            DenseMatrix::from_vector(&world.offset, "offset"),
        ],
        out("synth_world.axt"),
    )?;
    let attrs = |model: &str| {
        [("source_model".to_string(), json!(model))]
            .into_iter()
            .collect()
    };
    run.write_bundle(&world.dictionary_sae_a(s.sae_k).to_bundle(&attrs("synth-A")), out("synth_sae_a.axt"))?;
    run.write_bundle(&world.dictionary_sae_b(s.sae_k).to_bundle(&attrs("synth-B")), out("synth_sae_b.axt"))?;
    let (ua, ub) = world.unembeddings(rng::substream(seed, "unembed"));
    run.write_bundle(&[DenseMatrix::from_mat(&ua, "unembedding")], out("synth_unembed_a.axt"))?;
    run.write_bundle(&[DenseMatrix::from_mat(&ub, "unembedding")], out("synth_unembed_b.axt"))?;

    // Candidate layers of B: the planted one is B itself, the others mix in
    // an unrelated sample more strongly the further they sit from it.
    let h_b = pair.b.to_mat();
    let other = world.sample_pair(s.n_tokens, rng::substream(seed, "layers"))?.b.to_mat();
    for j in 0..s.n_layers {
        let lambda = (0.3 * j.abs_diff(s.planted_layer) as f64).min(0.95);
        let m: Mat = &h_b * (1.0 - lambda * lambda).sqrt() + &other * lambda;
        let mut meta = pair.b.meta.clone();
        meta.layer = j as u32;
        let mut shard = ActivationShard::from_mat(&m, meta)?;
        shard.token_ids.clone_from(&pair.b.token_ids);
        run.write_shard(&shard, out(&layer_file(j)))?;
    }

    let task = world.sample_probe_task(
        s.probe_examples,
        s.probe_tokens,
        s.probe_feature,
        s.probe_rate,
        rng::substream(seed, "probe"),
    )?;
    run.write_shard(&task.sample.a, out("synth_probe_a.axt"))?;
    run.write_shard(&task.sample.b, out("synth_probe_b.axt"))?;
    let rows: Vec<Vec<String>> = task
        .spans
        .iter()
        .zip(&task.labels)
        .enumerate()
        .map(|(i, (&(st, len), &l))| vec![i.to_string(), st.to_string(), len.to_string(), u8::from(l).to_string()])
        .collect();
    run.write_csv(out("synth_probe.csv"), &["example", "start", "len", "label"], &rows)?;

    let structural: Vec<usize> = (0..s.structural).collect();
    let groups = world.sample_augmented_groups(
        s.groups,
        s.variants,
        s.group_tokens,
        &structural,
        s.per_group,
        rng::substream(seed, "groups"),
    )?;
    run.write_shard(&groups.sample.a, out("synth_groups_a.axt"))?;
    run.write_shard(&groups.sample.b, out("synth_groups_b.axt"))?;
    let rows: Vec<Vec<String>> = groups
        .groups
        .iter()
        .enumerate()
        .flat_map(|(g, vs)| {
            vs.iter()
                .enumerate()
                .map(move |(v, &(st, len))| vec![g.to_string(), v.to_string(), st.to_string(), len.to_string()])
        })
        .collect();
    run.write_csv(out("synth_groups.csv"), &["group", "variant", "start", "len"], &rows)?;

    let l0 = pair.codes.iter().filter(|&&c| c > 0.0).count() as f64 / s.n_tokens as f64;
    let exact = stitch::stitch_loss(&world.exact_stitch(), &pair.a.to_mat(), &h_b, 1.0)?;
    let summary = vec![
        vec!["d_a".into(), s.world.d_a.to_string()],
        vec!["d_b".into(), s.world.d_b.to_string()],
        vec!["m_true".into(), s.world.m_true.to_string()],
        vec!["n_tokens".into(), s.n_tokens.to_string()],
        vec!["mean_l0".into(), f(l0)],
        vec!["planted_layer".into(), s.planted_layer.to_string()],
        vec!["probe_feature".into(), s.probe_feature.to_string()],
        vec!["structural_features".into(), s.structural.to_string()],
        vec!["exact_stitch_loss".into(), f(exact.total)],
    ];
    run.write_csv(out("synth_summary.csv"), &["key", "value"], &summary)?;
    Ok(())
}
