//! `plantok`: corpus generation, plan inference, planning-token annotation,
//! training, evaluation, and analysis for small arithmetic reasoning models.

mod config;
mod pipeline;
mod stages;

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use plantok_core::corpus::{generate_corpus, ingest_jsonl, IngestFormat, Split};
use plantok_core::eval::{
    permute_labels, plan_marginals, probe_accuracy, probe_fit, split_token_budget, top_heads,
    write_attention_csv, write_attention_diff_svg, write_attention_map_svg, ProbeArch,
    ProbeParams,
};
use plantok_core::io::sha256_hex;
use plantok_core::model::{forward, ForwardOpts};
use plantok_core::planner::StepEmbeddings;
use plantok_core::tokenizer::{AnnotatedSequence, Vocabulary};
use plantok_core::train::load_checkpoint;
use serde::{Deserialize, Serialize};

use config::{derive_seed, plantok_threads, CorpusSection, PipelineConfig};

#[derive(Parser)]
#[command(
    name = "plantok",
    version,
    about = "Planning-token training and analysis for small reasoning models",
    after_help = "Honors PLANTOK_THREADS (default 1; results are only \
                  guaranteed deterministic at 1)."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multi-step arithmetic corpus (JSONL)
    Gen {
        /// top-level RNG seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// number of examples
        #[arg(long, default_value_t = 2000)]
        n: usize,
        /// reasoning steps per example, as MIN:MAX
        #[arg(long, default_value = "2:5")]
        steps: String,
        /// operand value range, as LO:HI
        #[arg(long, default_value = "1:99")]
        values: String,
        /// train/dev/test split fractions, as A:B:C
        #[arg(long, default_value = "0.8:0.1:0.1")]
        fracs: String,
        /// output dataset path (JSONL)
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert an external dataset into the native JSONL format
    Ingest {
        /// input format: gsm8k | native
        #[arg(long, default_value = "gsm8k")]
        format: String,
        /// input file path
        #[arg(long = "in")]
        input: PathBuf,
        /// output dataset path (JSONL)
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract per-step hidden-state embeddings from a trained checkpoint
    Embed {
        /// trained model checkpoint
        #[arg(long)]
        checkpoint: PathBuf,
        /// vocabulary file matching the checkpoint
        #[arg(long)]
        vocab: PathBuf,
        /// dataset path (JSONL)
        #[arg(long)]
        data: PathBuf,
        /// output embeddings container
        #[arg(long)]
        out: PathBuf,
    },
    /// Infer a discrete plan for every reasoning step
    Plan {
        /// inference method: general | arithmetic | kmeans | sqvae
        #[arg(long)]
        method: String,
        /// number of content plans (arithmetic fixes this at 4)
        #[arg(long = "P", default_value_t = 5)]
        p: usize,
        /// dataset path (JSONL)
        #[arg(long)]
        data: PathBuf,
        /// step embeddings (required for kmeans/sqvae)
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// optional pipeline config for SQ-VAE hyperparameters
        #[arg(long)]
        config: Option<PathBuf>,
        /// output plan assignments (JSON)
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a dataset into token sequences with planning tokens inserted
    Annotate {
        /// dataset path (JSONL)
        #[arg(long)]
        data: PathBuf,
        /// annotation method: none | general | pause | arithmetic | kmeans | sqvae
        #[arg(long)]
        method: String,
        /// plan assignments (required for arithmetic/kmeans/sqvae)
        #[arg(long)]
        plans: Option<PathBuf>,
        /// number of content plans the assignments use
        #[arg(long = "P", default_value_t = 5)]
        p: usize,
        /// shared prefix tokens per plan slot
        #[arg(long, default_value_t = 3)]
        n_prefix: usize,
        /// plan-specific tokens per plan slot
        #[arg(long, default_value_t = 3)]
        n_special: usize,
        /// split to annotate: train | dev | test
        #[arg(long, default_value = "train")]
        split: String,
        /// output annotated sequences (JSONL)
        #[arg(long)]
        out: PathBuf,
        /// output vocabulary path
        #[arg(long)]
        vocab_out: PathBuf,
    },
    /// Train a model on annotated sequences
    Train {
        /// pipeline config (model/train/adapter sections are used)
        #[arg(long)]
        config: PathBuf,
        /// annotated sequences (JSONL)
        #[arg(long)]
        data: PathBuf,
        /// vocabulary matching the data
        #[arg(long)]
        vocab: PathBuf,
        /// base vocabulary before planning-token extension (defaults to --vocab)
        #[arg(long)]
        base_vocab: Option<PathBuf>,
        /// checkpoint to start from (required for adapter mode)
        #[arg(long)]
        base_checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// output directory for ck.bin and log.json
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// dataset path (JSONL)
        #[arg(long)]
        data: PathBuf,
        /// split to evaluate: train | dev | test
        #[arg(long, default_value = "test")]
        split: String,
        /// generation budget per example
        #[arg(long, default_value_t = 128)]
        max_new: usize,
        /// output report (JSON)
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention statistics over planning-token vs normal positions
    Attn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// annotated sequences to analyze (JSONL)
        #[arg(long)]
        seqs: PathBuf,
        /// report the K heads with the largest plan-vs-normal gap
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        /// output directory for stats JSON/CSV and SVGs
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a probe predicting plan labels from step embeddings
    Probe {
        /// step embeddings container
        #[arg(long)]
        embeddings: PathBuf,
        /// plan assignments providing the labels (JSON)
        #[arg(long)]
        plans: PathBuf,
        /// probe architecture: linear | mlp2 | mlp6
        #[arg(long, default_value = "linear")]
        arch: String,
        /// shuffle labels before fitting (chance-level control)
        #[arg(long, default_value_t = false)]
        permute: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// output report (JSON)
        #[arg(long)]
        out: PathBuf,
    },
    /// Enumerate the plan-count x token-budget annotation grid
    Ablate {
        /// grid config (TOML; see `plantok ablate --help`)
        #[arg(long)]
        grid: PathBuf,
        /// step embeddings (required for kmeans/sqvae grids)
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// dataset path (JSONL)
        #[arg(long)]
        data: PathBuf,
        /// output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline under a manifest with content-hash stage skipping
    Run {
        /// pipeline config (TOML)
        #[arg(long)]
        config: PathBuf,
        /// run directory (manifest.json plus all artifacts)
        #[arg(long)]
        out: PathBuf,
        /// re-run every stage even when inputs are unchanged
        #[arg(long, default_value_t = false)]
        force: bool,
    },
    /// Compare evaluation results between two run directories
    Compare {
        /// first run directory (containing manifest.json)
        #[arg(long)]
        a: PathBuf,
        /// second run directory
        #[arg(long)]
        b: PathBuf,
        /// eval-report file-name prefix in run A
        #[arg(long, default_value = "eval_none")]
        prefix_a: String,
        /// eval-report file-name prefix in run B
        #[arg(long, default_value = "eval_planned")]
        prefix_b: String,
        /// output CSV path
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_pair<T: std::str::FromStr>(s: &str, what: &str) -> Result<(T, T)>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    let (a, b) = s
        .split_once(':')
        .with_context(|| format!("{what} must be LO:HI, got {s:?}"))?;
    Ok((
        a.trim().parse().with_context(|| format!("bad {what} low bound {a:?}"))?,
        b.trim().parse().with_context(|| format!("bad {what} high bound {b:?}"))?,
    ))
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "dev" => Ok(Split::Dev),
        "test" => Ok(Split::Test),
        other => bail!("split must be train/dev/test, got {other:?}"),
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let _threads = plantok_threads()?;
    match cli.cmd {
        Cmd::Gen {
            seed,
            n,
            steps,
            values,
            fracs,
            out,
        } => {
            let step_range = parse_pair::<usize>(&steps, "--steps")?;
            let value_range = parse_pair::<i64>(&values, "--values")?;
            let parts: Vec<&str> = fracs.split(':').collect();
            if parts.len() != 3 {
                bail!("--fracs must be A:B:C, got {fracs:?}");
            }
            let f: Vec<f64> = parts
                .iter()
                .map(|p| p.trim().parse().with_context(|| format!("bad fraction {p:?}")))
                .collect::<Result<_>>()?;
            let ds = generate_corpus(
                seed,
                &plantok_core::corpus::GenParams {
                    n_examples: n,
                    step_range,
                    value_range,
                    split_fracs: (f[0], f[1], f[2]),
                },
            )?;
            ds.save_jsonl(&out)?;
            println!("wrote {} examples to {}", ds.examples.len(), out.display());
        }
        Cmd::Ingest { format, input, out } => {
            let fmt = match format.as_str() {
                "gsm8k" => IngestFormat::Gsm8kStyle,
                "native" => IngestFormat::Native,
                other => bail!("--format must be gsm8k or native, got {other:?}"),
            };
            let report = ingest_jsonl(&input, fmt)?;
            report.dataset.save_jsonl(&out)?;
            println!(
                "ingested {} examples ({} lines skipped) to {}",
                report.dataset.examples.len(),
                report.skipped.len(),
                out.display()
            );
            for (line, why) in report.skipped.iter().take(5) {
                eprintln!("  skipped line {line}: {why}");
            }
        }
        Cmd::Embed {
            checkpoint,
            vocab,
            data,
            out,
        } => {
            let vocab = Vocabulary::load(&vocab)?;
            let ts = load_checkpoint::<f32>(&checkpoint, Some(&vocab.hash()))?;
            let ds = stages::load_dataset(&data)?;
            let emb = stages::embed_stage(&ts.model, &vocab, &ds)?;
            emb.save(&out)?;
            println!(
                "wrote {} step embeddings (d={}) to {}",
                emb.keys.len(),
                emb.d,
                out.display()
            );
        }
        Cmd::Plan {
            method,
            p,
            data,
            embeddings,
            seed,
            config,
            out,
        } => {
            let ds = stages::load_dataset(&data)?;
            let emb = embeddings.map(|p| StepEmbeddings::load(&p)).transpose()?;
            let sqvae = match config {
                Some(path) => PipelineConfig::load(&path)?.sqvae.params(),
                None => Default::default(),
            };
            let (asg, n_content) = stages::plan_stage(&method, &ds, emb.as_ref(), p, seed, &sqvae)?;
            stages::save_assignments(&out, &asg)?;
            let marginal = plan_marginals(&asg, n_content);
            println!(
                "assigned plans for {} examples ({} content plans) to {}",
                asg.len(),
                n_content,
                out.display()
            );
            println!("plan marginal: {marginal:?}");
        }
        Cmd::Annotate {
            data,
            method,
            plans,
            p,
            n_prefix,
            n_special,
            split,
            out,
            vocab_out,
        } => {
            let ds = stages::load_dataset(&data)?;
            let base = stages::base_vocab(&ds)?;
            let vocab = stages::vocab_for_mode(&base, &method, p, n_prefix, n_special)?;
            let mode = stages::annotation_mode(&method);
            let asg = plans.map(|p| stages::load_assignments(&p)).transpose()?;
            if mode == plantok_core::tokenizer::AnnotationMode::Planned && asg.is_none() {
                bail!("--plans is required for method {method:?}");
            }
            let use_asg = (mode == plantok_core::tokenizer::AnnotationMode::Planned)
                .then(|| asg.as_deref().unwrap());
            let seqs = stages::annotate_split(&ds, parse_split(&split)?, &vocab, mode, use_asg)?;
            vocab.save(&vocab_out)?;
            AnnotatedSequence::save_jsonl(&seqs, &out)?;
            println!(
                "annotated {} sequences (vocab {}) to {}",
                seqs.len(),
                vocab.len(),
                out.display()
            );
        }
        Cmd::Train {
            config,
            data,
            vocab,
            base_vocab,
            base_checkpoint,
            seed,
            out,
        } => {
            let cfg = PipelineConfig::load(&config)?;
            let vocab = Vocabulary::load(&vocab)?;
            let base = match base_vocab {
                Some(p) => Vocabulary::load(&p)?,
                None => vocab.clone(),
            };
            let seqs = AnnotatedSequence::load_jsonl(&data)?;
            let base_state = match &base_checkpoint {
                Some(p) => Some(load_checkpoint::<f32>(p, Some(&base.hash()))?.model),
                None => None,
            };
            if cfg.train.is_adapter()? && base_state.is_none() {
                bail!("adapter mode needs --base-checkpoint (a trained base model)");
            }
            std::fs::create_dir_all(&out)?;
            let tc = cfg.train.train_config(derive_seed(seed, "train"))?;
            let outcome = stages::train_stage(
                &cfg,
                &vocab,
                &base,
                &seqs,
                &tc,
                derive_seed(seed, "init"),
                base_state.as_ref(),
                |log, _| {
                    if log.step % 50 == 0 {
                        eprintln!(
                            "step {} epoch {} loss {:.4} grad_norm {:.3}",
                            log.step, log.epoch, log.loss, log.grad_norm
                        );
                    }
                    Ok(false)
                },
            )?;
            let ck = stages::checkpoint_out(&out, "ck.bin", &outcome.state)?;
            stages::write_json(&out.join("log.json"), &outcome.record)?;
            println!(
                "trained {} steps, checkpoint at {}",
                outcome.record.steps.len(),
                ck.display()
            );
        }
        Cmd::Eval {
            checkpoint,
            vocab,
            data,
            split,
            max_new,
            out,
        } => {
            let vocab = Vocabulary::load(&vocab)?;
            let ts = load_checkpoint::<f32>(&checkpoint, Some(&vocab.hash()))?;
            let ds = stages::load_dataset(&data)?;
            let report = stages::eval_stage(&ts.model, &vocab, &ds, parse_split(&split)?, max_new)?;
            stages::write_json(&out, &report)?;
            println!(
                "exact match {}/{} = {:.4} (report at {})",
                report.correct,
                report.n,
                report.exact_match,
                out.display()
            );
        }
        Cmd::Attn {
            checkpoint,
            vocab,
            seqs,
            top_k,
            out,
        } => {
            let vocab = Vocabulary::load(&vocab)?;
            let ts = load_checkpoint::<f32>(&checkpoint, Some(&vocab.hash()))?;
            let seqs = AnnotatedSequence::load_jsonl(&seqs)?;
            std::fs::create_dir_all(&out)?;
            let stats = stages::attention_stage(&ts.model, &seqs)?;
            stages::write_json(&out.join("attn_stats.json"), &stats)?;
            write_attention_csv(&stats, &out.join("attn_stats.csv"))?;
            write_attention_diff_svg(&stats, &out.join("attn_diff.svg"))?;
            let top = top_heads(&stats, top_k);
            stages::write_json(&out.join("top_heads.json"), &top)?;
            if let Some(best) = top.first() {
                let f = forward(
                    &ts.model,
                    &seqs[0].token_ids,
                    ForwardOpts {
                        capture_attention: true,
                        capture_hidden: false,
                    },
                )?;
                write_attention_map_svg(
                    f.attention.as_ref().unwrap(),
                    best.layer,
                    best.head,
                    &out.join("attn_map_top_head.svg"),
                )?;
            }
            for h in &top {
                println!(
                    "layer {} head {}: plan {:.4} normal {:.4} diff {:+.4}",
                    h.layer, h.head, h.mean_plan, h.mean_normal, h.diff
                );
            }
        }
        Cmd::Probe {
            embeddings,
            plans,
            arch,
            permute,
            seed,
            out,
        } => {
            let emb = StepEmbeddings::load(&embeddings)?;
            let asg = stages::load_assignments(&plans)?;
            let mut labels = Vec::with_capacity(emb.keys.len());
            for key in &emb.keys {
                let a = asg
                    .iter()
                    .find(|a| a.example_id == key.example_id)
                    .with_context(|| format!("no assignment for example {}", key.example_id))?;
                let plan = *a
                    .step_plans
                    .get(key.step_idx)
                    .and_then(|s| s.first())
                    .with_context(|| {
                        format!("no plan for step {} of {}", key.step_idx, key.example_id)
                    })?;
                if plan == 0 {
                    bail!("plan ids start at 1, got 0 for {}", key.example_id);
                }
                labels.push((plan - 1) as usize);
            }
            let k = labels.iter().max().copied().unwrap_or(0) + 1;
            let labels = if permute {
                permute_labels(&labels, derive_seed(seed, "permute"))
            } else {
                labels
            };
            let arch: ProbeArch = arch.parse().map_err(anyhow::Error::msg)?;
            let x = emb.rows();
            let result = probe_fit(&x, &labels, k, arch, seed, &ProbeParams::default())?;
            let acc = probe_accuracy(&result.model, &x, &labels);
            let report = serde_json::json!({
                "arch": format!("{arch:?}"),
                "n": x.len(),
                "k": k,
                "permuted": permute,
                "accuracy": acc,
            });
            std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
            println!("probe accuracy {acc:.4} over {} steps, {k} classes", x.len());
        }
        Cmd::Ablate {
            grid,
            embeddings,
            data,
            out,
        } => {
            run_ablation(&grid, embeddings.as_deref(), &data, &out)?;
        }
        Cmd::Run { config, out, force } => {
            let cfg = PipelineConfig::load(&config)?;
            let manifest = pipeline::run_pipeline(&cfg, &out, force)?;
            let skipped = manifest.stages.iter().filter(|s| s.skipped).count();
            println!(
                "run complete: {} stages ({} skipped), manifest at {}",
                manifest.stages.len(),
                skipped,
                out.join("manifest.json").display()
            );
        }
        Cmd::Compare {
            a,
            b,
            prefix_a,
            prefix_b,
            out,
        } => {
            let ma = pipeline::RunManifest::load(&a.join("manifest.json"))?;
            let mb = pipeline::RunManifest::load(&b.join("manifest.json"))?;
            let ra = pipeline::reports_from_manifest(&ma, &prefix_a)?;
            let rb = pipeline::reports_from_manifest(&mb, &prefix_b)?;
            let table = pipeline::compare_reports(&prefix_a, &ra, &prefix_b, &rb, None);
            std::fs::write(&out, table.to_csv())?;
            print!("{}", table.to_csv());
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- ablate

/// Grid config for `plantok ablate`:
///
/// ```toml
/// seed          = 0
/// method        = "kmeans"       # general | arithmetic | kmeans | sqvae
/// p_values      = [1, 3, 5, 7, 10]
/// token_budgets = [2, 6, 10]     # total tokens per plan slot, split evenly
/// ```
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridConfig {
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_grid_method")]
    method: String,
    #[serde(default = "default_p_values")]
    p_values: Vec<usize>,
    #[serde(default = "default_token_budgets")]
    token_budgets: Vec<usize>,
    #[serde(default)]
    corpus: Option<CorpusSection>,
}

fn default_grid_method() -> String {
    "kmeans".into()
}

fn default_p_values() -> Vec<usize> {
    plantok_core::eval::ablation_grid()
        .iter()
        .map(|&(p, _)| p)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn default_token_budgets() -> Vec<usize> {
    plantok_core::eval::ablation_grid()
        .iter()
        .map(|&(_, b)| b)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect()
}

#[derive(Debug, Serialize)]
struct AblationCell {
    p: usize,
    token_budget: usize,
    n_prefix: usize,
    n_special: usize,
    vocab_size: usize,
    mean_seq_len: f64,
    plan_marginal: Vec<f64>,
    assignments_hash: String,
    seqs_path: String,
}

fn run_ablation(
    grid_path: &std::path::Path,
    embeddings: Option<&std::path::Path>,
    data: &std::path::Path,
    out: &std::path::Path,
) -> Result<()> {
    let grid: GridConfig = toml::from_str(&std::fs::read_to_string(grid_path)?)
        .with_context(|| format!("parsing grid config {}", grid_path.display()))?;
    if grid.corpus.is_some() {
        bail!("grid configs take the dataset via --data, not a [corpus] section");
    }
    let ds = stages::load_dataset(data)?;
    let base = stages::base_vocab(&ds)?;
    let emb = embeddings.map(StepEmbeddings::load).transpose()?;
    std::fs::create_dir_all(out)?;

    let mut cells = Vec::new();
    for &p in &grid.p_values {
        // plan inference depends only on P, not the token budget
        let (asg, n_content) = stages::plan_stage(
            &grid.method,
            &ds,
            emb.as_ref(),
            p,
            derive_seed(grid.seed, &format!("ablate_p{p}")),
            &Default::default(),
        )?;
        let asg_hash = sha256_hex(serde_json::to_string(&asg)?.as_bytes());
        for &budget in &grid.token_budgets {
            let (n_prefix, n_special) = split_token_budget(budget)?;
            let vocab =
                stages::vocab_for_mode(&base, &grid.method, n_content, n_prefix, n_special)?;
            let seqs = stages::annotate_split(
                &ds,
                Split::Train,
                &vocab,
                stages::annotation_mode(&grid.method),
                Some(&asg),
            )?;
            let seqs_path = out.join(format!("seqs_p{p}_b{budget}.jsonl"));
            AnnotatedSequence::save_jsonl(&seqs, &seqs_path)?;
            let mean_len =
                seqs.iter().map(|s| s.token_ids.len()).sum::<usize>() as f64 / seqs.len() as f64;
            cells.push(AblationCell {
                p,
                token_budget: budget,
                n_prefix,
                n_special,
                vocab_size: vocab.len(),
                mean_seq_len: mean_len,
                plan_marginal: plan_marginals(&asg, n_content),
                assignments_hash: asg_hash.clone(),
                seqs_path: seqs_path.display().to_string(),
            });
            println!(
                "P={p} budget={budget}: vocab {} mean_len {:.1}",
                vocab.len(),
                mean_len
            );
        }
    }
    stages::write_json(&out.join("cells.json"), &cells)?;
    let mut csv = String::from("p,token_budget,n_prefix,n_special,vocab_size,mean_seq_len\n");
    for c in &cells {
        csv.push_str(&format!(
            "{},{},{},{},{},{:.2}\n",
            c.p, c.token_budget, c.n_prefix, c.n_special, c.vocab_size, c.mean_seq_len
        ));
    }
    std::fs::write(out.join("cells.csv"), csv)?;
    println!("{} cells written to {}", cells.len(), out.display());
    Ok(())
}
