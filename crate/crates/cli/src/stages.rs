//! Reusable stage implementations shared by the standalone subcommands and
//! the `run` pipeline.

use std::path::Path;

use anyhow::{bail, Context, Result};
use plantok_core::corpus::{ingest_jsonl, Dataset, IngestFormat, Split};
use plantok_core::eval::{evaluate, AttentionAccumulator, AttentionStats, EvalReport};
use plantok_core::model::{
    apply_lora, extend_embeddings, forward, init_model, ForwardOpts, ModelState, NewTokenInit,
};
use plantok_core::planner::{
    arithmetic_assignments, assignments_from_clusters, extract_step_embeddings, kmeans_fit,
    sqvae_fit, KMeansParams, PlanMethod, SqVaeParams, StepEmbeddings, ARITH_PLANS,
};
use plantok_core::tokenizer::{
    annotate, build_vocab, extend_with_planning_tokens, AnnotatedSequence, AnnotationMode,
    PlanAssignment, Vocabulary,
};
use plantok_core::train::{save_checkpoint, train_loop, RunRecord, TrainConfig, TrainState};

use crate::config::PipelineConfig;

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let report = ingest_jsonl(path, IngestFormat::Native)
        .with_context(|| format!("loading dataset {}", path.display()))?;
    if !report.skipped.is_empty() {
        bail!(
            "{}: {} malformed lines (first: line {}: {})",
            path.display(),
            report.skipped.len(),
            report.skipped[0].0,
            report.skipped[0].1
        );
    }
    Ok(report.dataset)
}

pub fn save_assignments(path: &Path, a: &[PlanAssignment]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(a)?)?;
    Ok(())
}

pub fn load_assignments(path: &Path) -> Result<Vec<PlanAssignment>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)
        .with_context(|| format!("parsing plan assignments {}", path.display()))?)
}

/// Runs a plan-inference method. Returns the per-example assignments and the
/// number of content plans.
pub fn plan_stage(
    method: &str,
    dataset: &Dataset,
    embeddings: Option<&StepEmbeddings>,
    n_plans: usize,
    seed: u64,
    sqvae: &SqVaeParams,
) -> Result<(Vec<PlanAssignment>, usize)> {
    match method {
        "general" => {
            let asg = dataset
                .examples
                .iter()
                .map(|ex| PlanAssignment {
                    example_id: ex.id.clone(),
                    step_plans: vec![vec![1]; ex.steps.len()],
                    answer_plan: 2,
                })
                .collect();
            Ok((asg, 1))
        }
        "arithmetic" | "arith" => Ok((arithmetic_assignments(dataset), ARITH_PLANS)),
        "kmeans" => {
            let emb = embeddings.context("kmeans planning requires step embeddings")?;
            let fit = kmeans_fit(&emb.rows(), n_plans, seed, &KMeansParams::default())?;
            let asg = assignments_from_clusters(dataset, &emb.keys, &fit.assignments, n_plans)?;
            Ok((asg, n_plans))
        }
        "sqvae" => {
            let emb = embeddings.context("sqvae planning requires step embeddings")?;
            let fit = sqvae_fit(&emb.rows(), n_plans, seed, sqvae)?;
            let asg = assignments_from_clusters(dataset, &emb.keys, &fit.assignments, n_plans)?;
            Ok((asg, n_plans))
        }
        other => bail!("plan method {other:?} does not produce assignments"),
    }
}

/// Vocabulary for a mode: the base vocabulary for "none", otherwise the base
/// extended with planning tokens under the mode's scheme tag.
pub fn vocab_for_mode(
    base: &Vocabulary,
    method: &str,
    n_content: usize,
    n_prefix: usize,
    n_special: usize,
) -> Result<Vocabulary> {
    let scheme = match method {
        "none" => return Ok(base.clone()),
        "general" => "general",
        "pause" => "pause",
        "arithmetic" | "arith" => PlanMethod::Arithmetic.scheme(),
        "kmeans" => PlanMethod::KMeans.scheme(),
        "sqvae" => PlanMethod::SqVae.scheme(),
        other => bail!("unknown plan method {other:?}"),
    };
    let n = match method {
        "general" | "pause" => 1,
        "arithmetic" | "arith" => ARITH_PLANS,
        _ => n_content,
    };
    Ok(extend_with_planning_tokens(base, n, n_prefix, n_special, scheme)?)
}

pub fn annotation_mode(method: &str) -> AnnotationMode {
    match method {
        "none" => AnnotationMode::Plain,
        "general" => AnnotationMode::General,
        "pause" => AnnotationMode::Pause,
        _ => AnnotationMode::Planned,
    }
}

pub fn annotate_split(
    dataset: &Dataset,
    split: Split,
    vocab: &Vocabulary,
    mode: AnnotationMode,
    assignments: Option<&[PlanAssignment]>,
) -> Result<Vec<AnnotatedSequence>> {
    let mut out = Vec::new();
    for ex in dataset.of_split(split) {
        let a = match assignments {
            Some(list) => Some(
                list.iter()
                    .find(|a| a.example_id == ex.id)
                    .with_context(|| format!("no plan assignment for example {}", ex.id))?,
            ),
            None => None,
        };
        out.push(annotate(ex, a, vocab, mode)?);
    }
    if out.is_empty() {
        bail!("split {split:?} is empty");
    }
    Ok(out)
}

pub struct TrainOutcome {
    pub state: TrainState<f32>,
    pub record: RunRecord,
}

/// Initializes a model for the vocabulary and trains it. In adapter mode the
/// base transformer is frozen (after planning-token rows are added) and
/// low-rank adapters carry the update. `base_init` reuses an existing base
/// checkpoint's weights for the unextended vocabulary.
#[allow(clippy::too_many_arguments)]
pub fn train_stage(
    cfg: &PipelineConfig,
    vocab: &Vocabulary,
    base_vocab: &Vocabulary,
    data: &[AnnotatedSequence],
    train_cfg: &TrainConfig,
    init_seed: u64,
    base_init: Option<&ModelState<f32>>,
    on_step: impl FnMut(&plantok_core::train::StepLog, &TrainState<f32>) -> plantok_core::Result<bool>,
) -> Result<TrainOutcome> {
    let model_cfg = cfg.model.model_config();
    let adapter = cfg.train.is_adapter()?;
    let mut model: ModelState<f32> = match base_init {
        Some(base) => {
            if base.vocab_hash != base_vocab.hash() {
                bail!("base checkpoint does not match the base vocabulary");
            }
            base.clone()
        }
        None => init_model(&model_cfg, base_vocab.len(), &base_vocab.hash(), init_seed)?,
    };
    if adapter {
        // adapters constrain the update; new embedding rows stay trainable
        apply_lora(&mut model, cfg.adapter.lora_config(), init_seed ^ 0xada9)?;
    }
    if vocab.hash() != base_vocab.hash() {
        extend_embeddings(
            &mut model,
            vocab.len(),
            &vocab.hash(),
            NewTokenInit::MeanOfBase,
            init_seed ^ 0xe77,
        )?;
    }
    let mut state = TrainState::new(model);
    let record = train_loop(&mut state, data, train_cfg, on_step)?;
    Ok(TrainOutcome { state, record })
}

pub fn eval_stage(
    model: &ModelState<f32>,
    vocab: &Vocabulary,
    dataset: &Dataset,
    split: Split,
    max_new: usize,
) -> Result<EvalReport> {
    let examples: Vec<_> = dataset.of_split(split).cloned().collect();
    Ok(evaluate(model, vocab, &examples, max_new)?)
}

/// Attention statistics over annotated sequences (teacher-forced forward
/// passes with map capture).
pub fn attention_stage(
    model: &ModelState<f32>,
    seqs: &[AnnotatedSequence],
) -> Result<AttentionStats> {
    let mut acc = AttentionAccumulator::new(model.config.n_layers, model.config.n_heads);
    for seq in seqs {
        let f = forward(
            model,
            &seq.token_ids,
            ForwardOpts {
                capture_attention: true,
                capture_hidden: false,
            },
        )?;
        acc.add(f.attention.as_ref().unwrap(), &seq.role_mask)?;
    }
    Ok(acc.finish())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn checkpoint_out(dir: &Path, name: &str, ts: &TrainState<f32>) -> Result<std::path::PathBuf> {
    let path = dir.join(name);
    save_checkpoint(&path, ts)?;
    Ok(path)
}

/// Convenience: base vocabulary from a dataset.
pub fn base_vocab(dataset: &Dataset) -> Result<Vocabulary> {
    Ok(build_vocab(dataset)?)
}

/// Step embeddings from a base checkpoint.
pub fn embed_stage(
    model: &ModelState<f32>,
    vocab: &Vocabulary,
    dataset: &Dataset,
) -> Result<StepEmbeddings> {
    Ok(extract_step_embeddings(model, vocab, dataset)?)
}
