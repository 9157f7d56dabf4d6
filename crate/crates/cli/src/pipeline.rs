//! The `run` pipeline: gen → annotate(base) → train baselines → embed →
//! plan → annotate(planned) → train planned → eval → attention analysis →
//! seed-aggregated comparison, with a content-hash manifest for stage
//! skipping and full reproducibility.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use plantok_core::corpus::{generate_corpus, Split};
use plantok_core::eval::{
    plan_marginals, top_heads, tv_distance, write_attention_csv, write_attention_diff_svg,
    write_attention_map_svg, EvalReport,
};
use plantok_core::io::sha256_file;
use plantok_core::model::forward;
use plantok_core::model::ForwardOpts;
use plantok_core::planner::StepEmbeddings;
use plantok_core::tokenizer::{AnnotatedSequence, Vocabulary};
use plantok_core::train::load_checkpoint;
use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, PipelineConfig};
use crate::stages;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Artifact {
    pub path: String,
    pub hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    /// hash of stage name, seed, and input hashes; equal key + intact
    /// outputs means the stage can be skipped
    pub key: String,
    pub seed: u64,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub skipped: bool,
    pub status: String,
    pub unix_time: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    pub config_hash: String,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)
            .with_context(|| format!("parsing manifest {}", path.display()))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// All output artifacts whose file name matches a prefix.
    pub fn outputs_with_prefix(&self, prefix: &str) -> Vec<&Artifact> {
        self.stages
            .iter()
            .flat_map(|s| &s.outputs)
            .filter(|a| {
                Path::new(&a.path)
                    .file_name()
                    .and_then(|f| f.to_str())
                    .map(|f| f.starts_with(prefix))
                    .unwrap_or(false)
            })
            .collect()
    }
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

struct Runner {
    out_dir: PathBuf,
    force: bool,
    previous: Option<RunManifest>,
    manifest: RunManifest,
}

impl Runner {
    fn new(out_dir: &Path, config_hash: String, seed: u64, force: bool) -> Result<Self> {
        std::fs::create_dir_all(out_dir)?;
        let manifest_path = out_dir.join("manifest.json");
        let previous = if manifest_path.exists() && !force {
            Some(RunManifest::load(&manifest_path)?)
        } else {
            None
        };
        Ok(Runner {
            out_dir: out_dir.to_path_buf(),
            force,
            previous,
            manifest: RunManifest {
                tool_version: TOOL_VERSION.into(),
                seed,
                config_hash,
                stages: Vec::new(),
            },
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn stage_key(&self, name: &str, seed: u64, inputs: &[Artifact]) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.manifest.config_hash.as_bytes());
        h.update(name.as_bytes());
        h.update(seed.to_le_bytes());
        for a in inputs {
            h.update(a.path.as_bytes());
            h.update(a.hash.as_bytes());
        }
        hex(&h.finalize())
    }

    /// Runs one stage with hash gating. `body` must create every path in
    /// `outputs`.
    fn stage(
        &mut self,
        name: &str,
        seed: u64,
        input_paths: &[PathBuf],
        output_paths: &[PathBuf],
        body: impl FnOnce() -> Result<()>,
    ) -> Result<()> {
        let inputs: Vec<Artifact> = input_paths
            .iter()
            .map(|p| {
                Ok(Artifact {
                    path: p.display().to_string(),
                    hash: sha256_file(p)?,
                })
            })
            .collect::<Result<_>>()
            .with_context(|| format!("hashing inputs of stage {name}"))?;
        let key = self.stage_key(name, seed, &inputs);

        if !self.force {
            if let Some(prev) = self.previous.as_ref().and_then(|m| m.stage(name)) {
                let outputs_intact = prev.key == key
                    && prev
                        .outputs
                        .iter()
                        .all(|a| sha256_file(Path::new(&a.path)).map(|h| h == a.hash).unwrap_or(false));
                if outputs_intact {
                    self.manifest.stages.push(StageRecord {
                        name: name.into(),
                        key,
                        seed,
                        inputs,
                        outputs: prev.outputs.clone(),
                        skipped: true,
                        status: "ok".into(),
                        unix_time: now_unix(),
                    });
                    eprintln!("[skip] {name}");
                    return Ok(());
                }
            }
        }

        eprintln!("[run ] {name}");
        let started = std::time::Instant::now();
        if let Err(e) = body() {
            self.manifest.stages.push(StageRecord {
                name: name.into(),
                key,
                seed,
                inputs,
                outputs: vec![],
                skipped: false,
                status: format!("failed: {e:#}"),
                unix_time: now_unix(),
            });
            let _ = self.manifest.save(&self.path("manifest.json"));
            return Err(e.context(format!("stage {name}")));
        }
        let outputs: Vec<Artifact> = output_paths
            .iter()
            .map(|p| {
                Ok(Artifact {
                    path: p.display().to_string(),
                    hash: sha256_file(p)?,
                })
            })
            .collect::<Result<_>>()
            .with_context(|| format!("hashing outputs of stage {name}"))?;
        self.manifest.stages.push(StageRecord {
            name: name.into(),
            key,
            seed,
            inputs,
            outputs,
            skipped: false,
            status: "ok".into(),
            unix_time: now_unix(),
        });
        eprintln!("[done] {name} ({:.1}s)", started.elapsed().as_secs_f64());
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn config_hash(cfg: &PipelineConfig) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_string(cfg).expect("config serializes");
    hex(&Sha256::digest(json.as_bytes()))
}

pub fn run_pipeline(cfg: &PipelineConfig, out_dir: &Path, force: bool) -> Result<RunManifest> {
    cfg.validate()?;
    let method = cfg.plan.method.as_str();
    let mut r = Runner::new(out_dir, config_hash(cfg), cfg.seed, force)?;

    // ---- corpus ----
    let data_path = r.path("data.jsonl");
    let gen_seed = derive_seed(cfg.seed, "gen");
    r.stage("gen", gen_seed, &[], std::slice::from_ref(&data_path), || {
        let ds = generate_corpus(gen_seed, &cfg.corpus.gen_params())?;
        ds.save_jsonl(&data_path)?;
        Ok(())
    })?;
    let dataset = stages::load_dataset(&data_path)?;
    let base_vocab = stages::base_vocab(&dataset)?;

    // ---- baseline annotation ----
    let vocab_base_path = r.path("vocab_base.json");
    let seqs_none_path = r.path("seqs_none_train.jsonl");
    r.stage(
        "annotate_none",
        0,
        std::slice::from_ref(&data_path),
        &[vocab_base_path.clone(), seqs_none_path.clone()],
        || {
            base_vocab.save(&vocab_base_path)?;
            let seqs = stages::annotate_split(
                &dataset,
                Split::Train,
                &base_vocab,
                stages::annotation_mode("none"),
                None,
            )?;
            AnnotatedSequence::save_jsonl(&seqs, &seqs_none_path)?;
            Ok(())
        },
    )?;

    // ---- baseline training, one model per comparison seed ----
    let seeds = cfg.compare.seeds.clone();
    let mut ck_none_paths = Vec::new();
    for &s in &seeds {
        let ck_path = r.path(&format!("ck_none_{s}.bin"));
        let log_path = r.path(&format!("log_none_{s}.json"));
        let stage_seed = derive_seed(cfg.seed, &format!("train_none_{s}"));
        let cfg2 = cfg.clone();
        let seqs_path = seqs_none_path.clone();
        let vb = base_vocab.clone();
        r.stage(
            &format!("train_none_{s}"),
            stage_seed,
            &[seqs_none_path.clone(), vocab_base_path.clone()],
            &[ck_path.clone(), log_path.clone()],
            || {
                let data = AnnotatedSequence::load_jsonl(&seqs_path)?;
                let tc = cfg2.train.train_config(stage_seed)?;
                let out = stages::train_stage(
                    &cfg2,
                    &vb,
                    &vb,
                    &data,
                    &tc,
                    derive_seed(stage_seed, "init"),
                    None,
                    |_, _| Ok(false),
                )?;
                stages::checkpoint_out(&ck_path.parent().unwrap().to_path_buf(), ck_path.file_name().unwrap().to_str().unwrap(), &out.state)?;
                stages::write_json(&log_path, &out.record)?;
                Ok(())
            },
        )?;
        ck_none_paths.push(ck_path);
    }

    // baseline-only pipeline: evaluate and finish without planning stages
    let planned = method != "none";

    // ---- step embeddings from the first baseline checkpoint ----
    let emb_path = r.path("emb.bin");
    let plans_path = r.path("plans.json");
    let vocab_planned_path = r.path("vocab_planned.json");
    let seqs_planned_train = r.path("seqs_planned_train.jsonl");
    let seqs_planned_test = r.path("seqs_planned_test.jsonl");
    let needs_embeddings = matches!(method, "kmeans" | "sqvae");
    let mut vocab_planned: Option<Vocabulary> = None;
    if planned {
        if needs_embeddings {
            let ck0 = ck_none_paths[0].clone();
            let emb_out = emb_path.clone();
            let ds = &dataset;
            let vb = base_vocab.clone();
            r.stage(
                "embed",
                0,
                &[ck0.clone(), vocab_base_path.clone()],
                std::slice::from_ref(&emb_path),
                || {
                    let ts = load_checkpoint::<f32>(&ck0, Some(&vb.hash()))?;
                    let emb = stages::embed_stage(&ts.model, &vb, ds)?;
                    emb.save(&emb_out)?;
                    Ok(())
                },
            )?;
        }

        // ---- plan inference ----
        let plan_seed = derive_seed(cfg.seed, "plan");
        let plan_inputs: Vec<PathBuf> = if needs_embeddings {
            vec![data_path.clone(), emb_path.clone()]
        } else {
            vec![data_path.clone()]
        };
        {
            let cfg2 = cfg.clone();
            let ds = &dataset;
            let emb_in = emb_path.clone();
            let plans_out = plans_path.clone();
            r.stage(
                "plan",
                plan_seed,
                &plan_inputs,
                std::slice::from_ref(&plans_path),
                || {
                    let emb = if needs_embeddings {
                        Some(StepEmbeddings::load(&emb_in)?)
                    } else {
                        None
                    };
                    let (asg, _) = stages::plan_stage(
                        &cfg2.plan.method,
                        ds,
                        emb.as_ref(),
                        cfg2.plan.n_plans,
                        plan_seed,
                        &cfg2.sqvae.params(),
                    )?;
                    stages::save_assignments(&plans_out, &asg)?;
                    Ok(())
                },
            )?;
        }

        // ---- planned annotation ----
        let vp = stages::vocab_for_mode(
            &base_vocab,
            method,
            cfg.plan.n_plans,
            cfg.plan.n_prefix,
            cfg.plan.n_special,
        )?;
        {
            let vp2 = vp.clone();
            let ds = &dataset;
            let cfg2 = cfg.clone();
            let plans_in = plans_path.clone();
            let vout = vocab_planned_path.clone();
            let strain = seqs_planned_train.clone();
            let stest = seqs_planned_test.clone();
            r.stage(
                "annotate_planned",
                0,
                &[data_path.clone(), plans_path.clone()],
                &[
                    vocab_planned_path.clone(),
                    seqs_planned_train.clone(),
                    seqs_planned_test.clone(),
                ],
                || {
                    let asg = stages::load_assignments(&plans_in)?;
                    let mode = stages::annotation_mode(&cfg2.plan.method);
                    let need = mode == plantok_core::tokenizer::AnnotationMode::Planned;
                    let asg_opt = need.then_some(asg.as_slice());
                    vp2.save(&vout)?;
                    let train = stages::annotate_split(ds, Split::Train, &vp2, mode, asg_opt)?;
                    AnnotatedSequence::save_jsonl(&train, &strain)?;
                    let test = stages::annotate_split(ds, Split::Test, &vp2, mode, asg_opt)?;
                    AnnotatedSequence::save_jsonl(&test, &stest)?;
                    Ok(())
                },
            )?;
        }
        vocab_planned = Some(vp);
    }

    // ---- planned training ----
    let mut ck_planned_paths = Vec::new();
    if planned {
        let vp = vocab_planned.as_ref().unwrap();
        for (i, &s) in seeds.iter().enumerate() {
            let ck_path = r.path(&format!("ck_planned_{s}.bin"));
            let log_path = r.path(&format!("log_planned_{s}.json"));
            let stage_seed = derive_seed(cfg.seed, &format!("train_planned_{s}"));
            let cfg2 = cfg.clone();
            let vp2 = vp.clone();
            let vb = base_vocab.clone();
            let strain = seqs_planned_train.clone();
            let adapter = cfg.train.is_adapter()?;
            let base_ck = ck_none_paths[i].clone();
            r.stage(
                &format!("train_planned_{s}"),
                stage_seed,
                &[seqs_planned_train.clone(), vocab_planned_path.clone()],
                &[ck_path.clone(), log_path.clone()],
                || {
                    let data = AnnotatedSequence::load_jsonl(&strain)?;
                    let tc = cfg2.train.train_config(stage_seed)?;
                    // adapter mode treats the trained baseline as the frozen
                    // pretrained base; full mode trains from fresh init
                    let base_state = if adapter {
                        Some(load_checkpoint::<f32>(&base_ck, Some(&vb.hash()))?.model)
                    } else {
                        None
                    };
                    let out = stages::train_stage(
                        &cfg2,
                        &vp2,
                        &vb,
                        &data,
                        &tc,
                        derive_seed(stage_seed, "init"),
                        base_state.as_ref(),
                        |_, _| Ok(false),
                    )?;
                    stages::checkpoint_out(&ck_path.parent().unwrap().to_path_buf(), ck_path.file_name().unwrap().to_str().unwrap(), &out.state)?;
                    stages::write_json(&log_path, &out.record)?;
                    Ok(())
                },
            )?;
            ck_planned_paths.push(ck_path);
        }
    }

    // ---- evaluation ----
    let mut eval_pairs: Vec<(String, PathBuf, PathBuf, Vocabulary, PathBuf)> = Vec::new();
    for (i, &s) in seeds.iter().enumerate() {
        eval_pairs.push((
            format!("eval_none_{s}"),
            ck_none_paths[i].clone(),
            vocab_base_path.clone(),
            base_vocab.clone(),
            r.path(&format!("eval_none_{s}.json")),
        ));
        if planned {
            eval_pairs.push((
                format!("eval_planned_{s}"),
                ck_planned_paths[i].clone(),
                vocab_planned_path.clone(),
                vocab_planned.clone().unwrap(),
                r.path(&format!("eval_planned_{s}.json")),
            ));
        }
    }
    for (name, ck, vpath, vocab, out_path) in &eval_pairs {
        let ds = &dataset;
        let max_new = cfg.eval.max_new;
        let ck2 = ck.clone();
        let v2 = vocab.clone();
        let op = out_path.clone();
        r.stage(
            name,
            0,
            &[ck.clone(), vpath.clone()],
            std::slice::from_ref(out_path),
            || {
                let ts = load_checkpoint::<f32>(&ck2, Some(&v2.hash()))?;
                let report = stages::eval_stage(&ts.model, &v2, ds, Split::Test, max_new)?;
                stages::write_json(&op, &report)?;
                Ok(())
            },
        )?;
    }

    // ---- attention analysis on the first planned model ----
    if planned {
        let ck0 = ck_planned_paths[0].clone();
        let vp = vocab_planned.clone().unwrap();
        let stest = seqs_planned_test.clone();
        let stats_json = r.path("attn_stats.json");
        let stats_csv = r.path("attn_stats.csv");
        let diff_svg = r.path("attn_diff.svg");
        let map_svg = r.path("attn_map_top_head.svg");
        let outs = vec![stats_json.clone(), stats_csv.clone(), diff_svg.clone(), map_svg.clone()];
        r.stage(
            "attn",
            0,
            &[ck0.clone(), seqs_planned_test.clone()],
            &outs,
            || {
                let ts = load_checkpoint::<f32>(&ck0, Some(&vp.hash()))?;
                let seqs = AnnotatedSequence::load_jsonl(&stest)?;
                let sample: Vec<_> = seqs.iter().take(32).cloned().collect();
                let stats = stages::attention_stage(&ts.model, &sample)?;
                stages::write_json(&stats_json, &stats)?;
                write_attention_csv(&stats, &stats_csv)?;
                write_attention_diff_svg(&stats, &diff_svg)?;
                let top = top_heads(&stats, 1);
                let f = forward(
                    &ts.model,
                    &sample[0].token_ids,
                    ForwardOpts {
                        capture_attention: true,
                        capture_hidden: false,
                    },
                )?;
                let (l, h) = top
                    .first()
                    .map(|t| (t.layer, t.head))
                    .unwrap_or((0, 0));
                write_attention_map_svg(f.attention.as_ref().unwrap(), l, h, &map_svg)?;
                Ok(())
            },
        )?;
    }

    // ---- comparison table ----
    {
        let compare_csv = r.path("compare.csv");
        let compare_json = r.path("compare.json");
        let mut inputs: Vec<PathBuf> = eval_pairs.iter().map(|e| e.4.clone()).collect();
        if planned {
            inputs.push(plans_path.clone());
        }
        let seeds2 = seeds.clone();
        let out_dir2 = r.out_dir.clone();
        let cfg2 = cfg.clone();
        r.stage(
            "compare",
            0,
            &inputs,
            &[compare_csv.clone(), compare_json.clone()],
            || {
                let load = |prefix: &str| -> Result<Vec<EvalReport>> {
                    seeds2
                        .iter()
                        .map(|s| {
                            let p = out_dir2.join(format!("{prefix}_{s}.json"));
                            Ok(serde_json::from_str(&std::fs::read_to_string(&p)?)?)
                        })
                        .collect()
                };
                let none_reports = load("eval_none")?;
                let planned_reports = if planned { load("eval_planned")? } else { vec![] };
                let annotation_marginal = if planned {
                    let asg = stages::load_assignments(&out_dir2.join("plans.json"))?;
                    let n_content = match cfg2.plan.method.as_str() {
                        "general" | "pause" => 1,
                        "arithmetic" => 4,
                        _ => cfg2.plan.n_plans,
                    };
                    Some(plan_marginals(&asg, n_content))
                } else {
                    None
                };
                let table = compare_reports(
                    "none",
                    &none_reports,
                    &cfg2.plan.method,
                    &planned_reports,
                    annotation_marginal.as_deref(),
                );
                std::fs::write(&compare_csv, table.to_csv())?;
                stages::write_json(&compare_json, &table)?;
                Ok(())
            },
        )?;
    }

    r.manifest.save(&r.path("manifest.json"))?;
    Ok(r.manifest)
}

// ---------------------------------------------------------------- compare

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareRow {
    pub metric: String,
    pub a_mean: f64,
    pub a_std: f64,
    pub b_mean: f64,
    pub b_std: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareTable {
    pub label_a: String,
    pub label_b: String,
    pub n_seeds_a: usize,
    pub n_seeds_b: usize,
    pub rows: Vec<CompareRow>,
}

impl CompareTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "metric,{}_mean,{}_std,{}_mean,{}_std,delta\n",
            self.label_a, self.label_a, self.label_b, self.label_b
        );
        for row in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                row.metric, row.a_mean, row.a_std, row.b_mean, row.b_std, row.delta
            ));
        }
        out
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
    (m, var.sqrt())
}

/// Side-by-side seed-aggregated comparison of two report sets: overall
/// accuracy, per-step-count accuracy, and (when available) the TV distance
/// between annotated and generated plan marginals for set B.
pub fn compare_reports(
    label_a: &str,
    a: &[EvalReport],
    label_b: &str,
    b: &[EvalReport],
    annotation_marginal: Option<&[f64]>,
) -> CompareTable {
    let mut rows = Vec::new();
    let acc = |rs: &[EvalReport]| rs.iter().map(|r| r.exact_match).collect::<Vec<_>>();
    let (am, astd) = mean_std(&acc(a));
    let (bm, bstd) = mean_std(&acc(b));
    rows.push(CompareRow {
        metric: "exact_match".into(),
        a_mean: am,
        a_std: astd,
        b_mean: bm,
        b_std: bstd,
        delta: bm - am,
    });
    let mut buckets: Vec<usize> = a
        .iter()
        .chain(b)
        .flat_map(|r| r.by_length.keys().copied())
        .collect();
    buckets.sort_unstable();
    buckets.dedup();
    for s in buckets {
        let pick = |rs: &[EvalReport]| {
            rs.iter()
                .filter_map(|r| r.by_length.get(&s).map(|&(n, c)| c as f64 / n.max(1) as f64))
                .collect::<Vec<_>>()
        };
        let (am, astd) = mean_std(&pick(a));
        let (bm, bstd) = mean_std(&pick(b));
        rows.push(CompareRow {
            metric: format!("exact_match_steps_{s}"),
            a_mean: am,
            a_std: astd,
            b_mean: bm,
            b_std: bstd,
            delta: bm - am,
        });
    }
    if let Some(ann) = annotation_marginal {
        let tvs: Vec<f64> = b
            .iter()
            .filter_map(|r| {
                r.plan_marginal_generation
                    .as_ref()
                    .filter(|g| g.len() == ann.len())
                    .map(|g| tv_distance(ann, g))
            })
            .collect();
        if !tvs.is_empty() {
            let (m, s) = mean_std(&tvs);
            rows.push(CompareRow {
                metric: "plan_marginal_tv".into(),
                a_mean: f64::NAN,
                a_std: f64::NAN,
                b_mean: m,
                b_std: s,
                delta: m,
            });
        }
    }
    CompareTable {
        label_a: label_a.into(),
        label_b: label_b.into(),
        n_seeds_a: a.len(),
        n_seeds_b: b.len(),
        rows,
    }
}

/// Loads every eval report with a file-name prefix from a manifest.
pub fn reports_from_manifest(manifest: &RunManifest, prefix: &str) -> Result<Vec<EvalReport>> {
    let arts = manifest.outputs_with_prefix(prefix);
    if arts.is_empty() {
        bail!("manifest has no eval reports with prefix {prefix:?}");
    }
    arts.iter()
        .map(|a| {
            let text = std::fs::read_to_string(&a.path)
                .with_context(|| format!("reading {}", a.path))?;
            Ok(serde_json::from_str(&text)?)
        })
        .collect()
}
