//! Pipeline configuration: a TOML file with one section per stage. Every
//! key has a default, so a minimal config can be `seed = 42`.
//!
//! Key grammar:
//!
//! ```toml
//! seed = 42                 # top-level seed; stages derive their own streams
//!
//! [corpus]
//! n_examples = 2000
//! min_steps  = 2            # 1..=8
//! max_steps  = 5
//! min_value  = 1            # 1..=9999
//! max_value  = 99
//! fracs      = [0.8, 0.1, 0.1]   # train/dev/test, sums to 1
//!
//! [plan]
//! method    = "sqvae"       # none | general | pause | arithmetic | kmeans | sqvae
//! n_plans   = 5             # content plans (arithmetic fixes this at 4)
//! n_prefix  = 3             # shared prefix tokens per plan slot
//! n_special = 3             # plan-specific tokens per plan slot
//!
//! [model]
//! d_model = 128
//! n_layers = 4
//! n_heads = 4
//! d_ff = 512
//! context_len = 256
//! dropout = 0.0
//! tie_embeddings = false
//!
//! [train]
//! mode = "full"             # full | adapter
//! lr = 2e-5                 # default 2e-5 (full) / 2e-4 (adapter)
//! epochs = 10
//! batch_size = 32
//! grad_clip = 1.0
//! weight_decay = 0.01
//!
//! [adapter]
//! rank = 16
//! dropout = 0.05
//!
//! [sqvae]
//! hidden = 32
//! beta = 1.0
//! lr = 0.01
//! epochs = 150
//! batch = 32
//!
//! [eval]
//! max_new = 128
//!
//! [compare]
//! seeds = [0, 1, 2]
//! ```

use anyhow::{bail, Context};
use plantok_core::corpus::GenParams;
use plantok_core::model::{LoraConfig, ModelConfig};
use plantok_core::planner::SqVaeParams;
use plantok_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

fn default_seed() -> u64 {
    0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub plan: PlanSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub adapter: AdapterSection,
    #[serde(default)]
    pub sqvae: SqVaeSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub compare: CompareSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub n_examples: usize,
    pub min_steps: usize,
    pub max_steps: usize,
    pub min_value: i64,
    pub max_value: i64,
    pub fracs: [f64; 3],
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            n_examples: 2000,
            min_steps: 2,
            max_steps: 5,
            min_value: 1,
            max_value: 99,
            fracs: [0.8, 0.1, 0.1],
        }
    }
}

impl CorpusSection {
    pub fn gen_params(&self) -> GenParams {
        GenParams {
            n_examples: self.n_examples,
            step_range: (self.min_steps, self.max_steps),
            value_range: (self.min_value, self.max_value),
            split_fracs: (self.fracs[0], self.fracs[1], self.fracs[2]),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanSection {
    pub method: String,
    pub n_plans: usize,
    pub n_prefix: usize,
    pub n_special: usize,
}

impl Default for PlanSection {
    fn default() -> Self {
        PlanSection {
            method: "sqvae".into(),
            n_plans: 5,
            n_prefix: 3,
            n_special: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub dropout: f64,
    pub tie_embeddings: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::desk();
        ModelSection {
            d_model: d.d_model,
            n_layers: d.n_layers,
            n_heads: d.n_heads,
            d_ff: d.d_ff,
            context_len: d.context_len,
            dropout: d.dropout_rate,
            tie_embeddings: d.tie_embeddings,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            context_len: self.context_len,
            dropout_rate: self.dropout,
            tie_embeddings: self.tie_embeddings,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub mode: String,
    /// learning rate; when absent, 2e-5 for full fine-tuning and 2e-4 for
    /// adapters
    pub lr: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub weight_decay: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            mode: "full".into(),
            lr: None,
            epochs: 10,
            batch_size: 32,
            grad_clip: 1.0,
            weight_decay: 0.01,
        }
    }
}

impl TrainSection {
    pub fn is_adapter(&self) -> anyhow::Result<bool> {
        match self.mode.as_str() {
            "full" => Ok(false),
            "adapter" => Ok(true),
            other => bail!("train.mode must be \"full\" or \"adapter\", got {other:?}"),
        }
    }

    pub fn effective_lr(&self) -> anyhow::Result<f64> {
        Ok(self
            .lr
            .unwrap_or(if self.is_adapter()? { 2e-4 } else { 2e-5 }))
    }

    pub fn train_config(&self, seed: u64) -> anyhow::Result<TrainConfig> {
        Ok(TrainConfig {
            lr: self.effective_lr()?,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
            ..Default::default()
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSection {
    pub rank: usize,
    pub dropout: f64,
}

impl Default for AdapterSection {
    fn default() -> Self {
        let d = LoraConfig::default();
        AdapterSection {
            rank: d.rank,
            dropout: d.dropout,
        }
    }
}

impl AdapterSection {
    pub fn lora_config(&self) -> LoraConfig {
        LoraConfig {
            rank: self.rank,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SqVaeSection {
    pub hidden: usize,
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
}

impl Default for SqVaeSection {
    fn default() -> Self {
        let d = SqVaeParams::default();
        SqVaeSection {
            hidden: d.hidden,
            beta: d.beta,
            lr: d.lr,
            epochs: d.epochs,
            batch: d.batch,
        }
    }
}

impl SqVaeSection {
    pub fn params(&self) -> SqVaeParams {
        SqVaeParams {
            hidden: self.hidden,
            beta: self.beta,
            lr: self.lr,
            weight_decay: 0.0,
            epochs: self.epochs,
            batch: self.batch,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub max_new: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { max_new: 128 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    pub seeds: Vec<u64>,
}

impl Default for CompareSection {
    fn default() -> Self {
        CompareSection {
            seeds: vec![0, 1, 2],
        }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            corpus: Default::default(),
            plan: Default::default(),
            model: Default::default(),
            train: Default::default(),
            adapter: Default::default(),
            sqvae: Default::default(),
            eval: Default::default(),
            compare: Default::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: PipelineConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.model
            .model_config()
            .validate()
            .context("model section")?;
        self.train.is_adapter()?;
        match self.plan.method.as_str() {
            "none" | "general" | "pause" | "arithmetic" | "kmeans" | "sqvae" => {}
            other => bail!(
                "plan.method must be one of none/general/pause/arithmetic/kmeans/sqvae, got {other:?}"
            ),
        }
        if self.plan.n_prefix + self.plan.n_special == 0 && self.plan.method != "none" {
            bail!("plan.n_prefix + plan.n_special must be >= 1");
        }
        if self.plan.n_plans == 0 {
            bail!("plan.n_plans must be >= 1");
        }
        if self.compare.seeds.is_empty() {
            bail!("compare.seeds must not be empty");
        }
        Ok(())
    }
}

/// Deterministic per-stage seed derivation from the top-level seed: the
/// first 8 bytes of sha256(seed_le || tag).
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Worker-count cap from PLANTOK_THREADS (default 1; determinism is only
/// guaranteed at 1, which is also all the current kernels use).
pub fn plantok_threads() -> anyhow::Result<usize> {
    match std::env::var("PLANTOK_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => {
            let n: usize = v
                .parse()
                .with_context(|| format!("PLANTOK_THREADS={v:?} is not a positive integer"))?;
            if n == 0 {
                bail!("PLANTOK_THREADS must be >= 1");
            }
            Ok(n)
        }
    }
}
