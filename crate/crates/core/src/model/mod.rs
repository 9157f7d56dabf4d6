//! From-scratch decoder-only transformer with exact gradients, inspectable
//! attention, planning-token embedding extension, and optional low-rank
//! adapters on the MLP projections.
//!
//! Blocks are pre-norm (parameter-free RMSNorm), positions are learned,
//! activations GELU. Weights are stored [out, in].

pub mod tensor;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{AnnotatedSequence, TokenId};
pub use tensor::{Real, Tensor, Trainability};
use tensor::*;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub dropout_rate: f64,
    pub tie_embeddings: bool,
}

impl ModelConfig {
    /// Desk-scale default: small enough to train on one CPU core in minutes,
    /// deep enough to show head specialization.
    pub fn desk() -> Self {
        ModelConfig {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            context_len: 256,
            dropout_rate: 0.0,
            tie_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub dropout: f64,
}

impl Default for LoraConfig {
    /// rank 16, dropout 0.05.
    fn default() -> Self {
        LoraConfig {
            rank: 16,
            dropout: 0.05,
        }
    }
}

pub type Grads<T> = BTreeMap<String, Vec<T>>;

#[derive(Debug, Clone)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub vocab_hash: String,
    /// Vocabulary size before planning-token extension.
    pub base_vocab_size: usize,
    pub lora: Option<LoraConfig>,
    pub params: BTreeMap<String, Tensor<T>>,
}

const INIT_STD: f64 = 0.02;

fn layer_names(l: usize) -> [String; 6] {
    [
        format!("l{l}.wq"),
        format!("l{l}.wk"),
        format!("l{l}.wv"),
        format!("l{l}.wo"),
        format!("l{l}.fc1"),
        format!("l{l}.fc2"),
    ]
}

/// Deterministic initialization: scaled normal (std 0.02) in a fixed tensor
/// order so equal seeds give identical parameters.
pub fn init_model<T: Real>(
    config: &ModelConfig,
    vocab_size: usize,
    vocab_hash: &str,
    seed: u64,
) -> Result<ModelState<T>> {
    config.validate()?;
    if vocab_size == 0 {
        return Err(Error::Config("vocab_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let mut params = BTreeMap::new();
    params.insert("wte".to_string(), Tensor::randn(vocab_size, d, INIT_STD, &mut rng));
    params.insert(
        "wpe".to_string(),
        Tensor::randn(config.context_len, d, INIT_STD, &mut rng),
    );
    for l in 0..config.n_layers {
        let [wq, wk, wv, wo, fc1, fc2] = layer_names(l);
        params.insert(wq, Tensor::randn(d, d, INIT_STD, &mut rng));
        params.insert(wk, Tensor::randn(d, d, INIT_STD, &mut rng));
        params.insert(wv, Tensor::randn(d, d, INIT_STD, &mut rng));
        params.insert(wo, Tensor::randn(d, d, INIT_STD, &mut rng));
        params.insert(fc1, Tensor::randn(config.d_ff, d, INIT_STD, &mut rng));
        params.insert(fc2, Tensor::randn(d, config.d_ff, INIT_STD, &mut rng));
    }
    if !config.tie_embeddings {
        params.insert("wout".to_string(), Tensor::randn(vocab_size, d, INIT_STD, &mut rng));
    }
    Ok(ModelState {
        config: config.clone(),
        vocab_size,
        vocab_hash: vocab_hash.to_string(),
        base_vocab_size: vocab_size,
        lora: None,
        params,
    })
}

impl<T: Real> ModelState<T> {
    pub fn tensor(&self, name: &str) -> &Tensor<T> {
        &self.params[name]
    }

    fn output_name(&self) -> &'static str {
        if self.config.tie_embeddings {
            "wte"
        } else {
            "wout"
        }
    }
}

/// Attention probabilities for one sequence: [layers x heads x query x key].
#[derive(Debug, Clone)]
pub struct AttentionMaps {
    pub n_layers: usize,
    pub n_heads: usize,
    pub t: usize,
    data: Vec<f64>,
}

impl AttentionMaps {
    pub fn new(n_layers: usize, n_heads: usize, t: usize) -> Self {
        AttentionMaps {
            n_layers,
            n_heads,
            t,
            data: vec![0.0; n_layers * n_heads * t * t],
        }
    }

    pub fn get(&self, layer: usize, head: usize, query: usize, key: usize) -> f64 {
        self.data[((layer * self.n_heads + head) * self.t + query) * self.t + key]
    }

    pub fn row(&self, layer: usize, head: usize, query: usize) -> &[f64] {
        let base = ((layer * self.n_heads + head) * self.t + query) * self.t;
        &self.data[base..base + self.t]
    }

    pub fn set_row(&mut self, layer: usize, head: usize, query: usize, row: &[f64]) {
        let base = ((layer * self.n_heads + head) * self.t + query) * self.t;
        self.data[base..base + self.t].copy_from_slice(row);
    }
}

pub struct Forward<T> {
    pub t: usize,
    pub vocab: usize,
    /// Row-major [t x vocab].
    pub logits: Vec<T>,
    pub attention: Option<AttentionMaps>,
    /// Final (normed) hidden states, [t x d_model].
    pub hidden: Option<Vec<T>>,
}

#[derive(Default, Clone, Copy)]
pub struct ForwardOpts {
    pub capture_attention: bool,
    pub capture_hidden: bool,
}

struct LayerCache<T> {
    x_in: Vec<T>,
    a: Vec<T>,
    r1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>, // [heads x t x t]
    ctx: Vec<T>,
    attn_mask: Option<Vec<T>>,
    x_mid: Vec<T>,
    b: Vec<T>,
    r2: Vec<T>,
    lora1_in: Option<Vec<T>>,
    lora1_mask: Option<Vec<T>>,
    u1: Vec<T>,
    h1: Vec<T>,
    lora2_in: Option<Vec<T>>,
    lora2_mask: Option<Vec<T>>,
    mlp_mask: Option<Vec<T>>,
}

struct Cache<T> {
    ids: Vec<TokenId>,
    layers: Vec<LayerCache<T>>,
    xf: Vec<T>,
    f: Vec<T>,
    rf: Vec<T>,
    logits: Vec<T>,
}

fn dropout_mask<T: Real>(len: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<T> {
    use rand::Rng;
    let keep = T::from_f64(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| {
            if rng.gen::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect()
}

fn apply_mask<T: Real>(x: &mut [T], mask: &[T]) {
    for (xi, &m) in x.iter_mut().zip(mask) {
        *xi *= m;
    }
}

fn forward_cached<T: Real>(
    state: &ModelState<T>,
    ids: &[TokenId],
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<Cache<T>> {
    let cfg = &state.config;
    let (d, h, t) = (cfg.d_model, cfg.n_heads, ids.len());
    let dh = d / h;
    if t == 0 {
        return Err(Error::Shape("empty sequence".into()));
    }
    if t > cfg.context_len {
        return Err(Error::Shape(format!(
            "sequence length {t} exceeds context length {}",
            cfg.context_len
        )));
    }
    let wte = state.tensor("wte");
    let wpe = state.tensor("wpe");
    for &id in ids {
        if id as usize >= state.vocab_size {
            return Err(Error::Vocab(format!(
                "token id {id} out of range (vocab {})",
                state.vocab_size
            )));
        }
    }

    let mut x = vec![T::zero(); t * d];
    for (pos, &id) in ids.iter().enumerate() {
        let row = &mut x[pos * d..(pos + 1) * d];
        for ((xi, &e), &p) in row.iter_mut().zip(wte.row(id as usize)).zip(wpe.row(pos)) {
            *xi = e + p;
        }
    }

    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let [nwq, nwk, nwv, nwo, nfc1, nfc2] = layer_names(l);
        let x_in = x.clone();
        let mut a = vec![T::zero(); t * d];
        let mut r1 = vec![T::zero(); t];
        for p in 0..t {
            r1[p] = rmsnorm(&x_in[p * d..(p + 1) * d], &mut a[p * d..(p + 1) * d]);
        }
        let mut q = vec![T::zero(); t * d];
        let mut k = vec![T::zero(); t * d];
        let mut v = vec![T::zero(); t * d];
        matmul_nt(&a, &state.tensor(&nwq).data, t, d, d, &mut q);
        matmul_nt(&a, &state.tensor(&nwk).data, t, d, d, &mut k);
        matmul_nt(&a, &state.tensor(&nwv).data, t, d, d, &mut v);

        let mut probs = vec![T::zero(); h * t * t];
        let mut ctx = vec![T::zero(); t * d];
        for head in 0..h {
            let off = head * dh;
            for tq in 0..t {
                let qrow = &q[tq * d + off..tq * d + off + dh];
                let prow = &mut probs[(head * t + tq) * t..(head * t + tq) * t + t];
                for tk in 0..=tq {
                    prow[tk] = dot(qrow, &k[tk * d + off..tk * d + off + dh]) * scale;
                }
                softmax_inplace(&mut prow[..=tq]);
                let crow = &mut ctx[tq * d + off..tq * d + off + dh];
                for tk in 0..=tq {
                    axpy(prow[tk], &v[tk * d + off..tk * d + off + dh], crow);
                }
            }
        }

        let mut o = vec![T::zero(); t * d];
        matmul_nt(&ctx, &state.tensor(&nwo).data, t, d, d, &mut o);
        let attn_mask = match &mut dropout {
            Some(rng) if cfg.dropout_rate > 0.0 => {
                let m = dropout_mask::<T>(t * d, cfg.dropout_rate, rng);
                apply_mask(&mut o, &m);
                Some(m)
            }
            _ => None,
        };
        let mut x_mid = x_in.clone();
        for (xm, oi) in x_mid.iter_mut().zip(&o) {
            *xm += *oi;
        }

        let mut b = vec![T::zero(); t * d];
        let mut r2 = vec![T::zero(); t];
        for p in 0..t {
            r2[p] = rmsnorm(&x_mid[p * d..(p + 1) * d], &mut b[p * d..(p + 1) * d]);
        }
        let mut u1 = vec![T::zero(); t * cfg.d_ff];
        matmul_nt(&b, &state.tensor(&nfc1).data, t, d, cfg.d_ff, &mut u1);
        let (lora1_in, lora1_mask) = if let Some(lc) = &state.lora {
            let (inp, mask) = lora_input(&b, lc.dropout, &mut dropout);
            let a1 = &state.tensor(&format!("{nfc1}.lora_a")).data;
            let b1 = &state.tensor(&format!("{nfc1}.lora_b")).data;
            let mut ha = vec![T::zero(); t * lc.rank];
            matmul_nt(&inp, a1, t, d, lc.rank, &mut ha);
            let mut delta = vec![T::zero(); t * cfg.d_ff];
            matmul_nt(&ha, b1, t, lc.rank, cfg.d_ff, &mut delta);
            for (ui, di) in u1.iter_mut().zip(&delta) {
                *ui += *di;
            }
            (Some(inp), mask)
        } else {
            (None, None)
        };
        let h1: Vec<T> = u1.iter().map(|&u| gelu(u)).collect();
        let mut u2 = vec![T::zero(); t * d];
        matmul_nt(&h1, &state.tensor(&nfc2).data, t, cfg.d_ff, d, &mut u2);
        let (lora2_in, lora2_mask) = if let Some(lc) = &state.lora {
            let (inp, mask) = lora_input(&h1, lc.dropout, &mut dropout);
            let a2 = &state.tensor(&format!("{nfc2}.lora_a")).data;
            let b2 = &state.tensor(&format!("{nfc2}.lora_b")).data;
            let mut ha = vec![T::zero(); t * lc.rank];
            matmul_nt(&inp, a2, t, cfg.d_ff, lc.rank, &mut ha);
            let mut delta = vec![T::zero(); t * d];
            matmul_nt(&ha, b2, t, lc.rank, d, &mut delta);
            for (ui, di) in u2.iter_mut().zip(&delta) {
                *ui += *di;
            }
            (Some(inp), mask)
        } else {
            (None, None)
        };
        let mlp_mask = match &mut dropout {
            Some(rng) if cfg.dropout_rate > 0.0 => {
                let m = dropout_mask::<T>(t * d, cfg.dropout_rate, rng);
                apply_mask(&mut u2, &m);
                Some(m)
            }
            _ => None,
        };
        let mut x_out = x_mid.clone();
        for (xo, ui) in x_out.iter_mut().zip(&u2) {
            *xo += *ui;
        }

        layers.push(LayerCache {
            x_in,
            a,
            r1,
            q,
            k,
            v,
            probs,
            ctx,
            attn_mask,
            x_mid,
            b,
            r2,
            lora1_in,
            lora1_mask,
            u1,
            h1,
            lora2_in,
            lora2_mask,
            mlp_mask,
        });
        x = x_out;
    }

    let xf = x;
    let mut f = vec![T::zero(); t * d];
    let mut rf = vec![T::zero(); t];
    for p in 0..t {
        rf[p] = rmsnorm(&xf[p * d..(p + 1) * d], &mut f[p * d..(p + 1) * d]);
    }
    let wout = state.tensor(state.output_name());
    let mut logits = vec![T::zero(); t * state.vocab_size];
    matmul_nt(&f, &wout.data, t, d, state.vocab_size, &mut logits);

    Ok(Cache {
        ids: ids.to_vec(),
        layers,
        xf,
        f,
        rf,
        logits,
    })
}

fn lora_input<T: Real>(
    x: &[T],
    rate: f64,
    dropout: &mut Option<&mut ChaCha8Rng>,
) -> (Vec<T>, Option<Vec<T>>) {
    match dropout {
        Some(rng) if rate > 0.0 => {
            let mask = dropout_mask::<T>(x.len(), rate, rng);
            let mut inp = x.to_vec();
            apply_mask(&mut inp, &mask);
            (inp, Some(mask))
        }
        _ => (x.to_vec(), None),
    }
}

/// Full forward pass in evaluation mode (dropout off).
pub fn forward<T: Real>(
    state: &ModelState<T>,
    ids: &[TokenId],
    opts: ForwardOpts,
) -> Result<Forward<T>> {
    let cache = forward_cached(state, ids, None)?;
    let t = ids.len();
    let attention = if opts.capture_attention {
        let cfg = &state.config;
        let mut maps = AttentionMaps::new(cfg.n_layers, cfg.n_heads, t);
        for (l, lc) in cache.layers.iter().enumerate() {
            for head in 0..cfg.n_heads {
                for tq in 0..t {
                    for tk in 0..t {
                        let p = lc.probs[(head * t + tq) * t + tk].to_f64();
                        maps.data[((l * cfg.n_heads + head) * t + tq) * t + tk] = p;
                    }
                }
            }
        }
        Some(maps)
    } else {
        None
    };
    Ok(Forward {
        t,
        vocab: state.vocab_size,
        logits: cache.logits,
        attention,
        hidden: opts.capture_hidden.then_some(cache.f),
    })
}

/// Masked next-token cross-entropy: the mean over positions whose *target*
/// is loss-masked true. Question targets never contribute.
pub fn loss<T: Real>(state: &ModelState<T>, seq: &AnnotatedSequence) -> Result<f64> {
    let (total, count) = sequence_loss_sum(state, seq, None)?;
    Ok(total / count as f64)
}

fn masked_targets(seq: &AnnotatedSequence) -> Result<Vec<usize>> {
    if seq.loss_mask.len() != seq.token_ids.len() {
        return Err(Error::Shape(format!(
            "sequence {}: loss mask length {} != {} tokens",
            seq.id,
            seq.loss_mask.len(),
            seq.token_ids.len()
        )));
    }
    let targets: Vec<usize> = (1..seq.token_ids.len()).filter(|&i| seq.loss_mask[i]).collect();
    if targets.is_empty() {
        return Err(Error::Config(format!(
            "sequence {}: loss mask selects no target positions",
            seq.id
        )));
    }
    Ok(targets)
}

fn sequence_loss_sum<T: Real>(
    state: &ModelState<T>,
    seq: &AnnotatedSequence,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<(f64, usize)> {
    let targets = masked_targets(seq)?;
    let cache = forward_cached(state, &seq.token_ids, dropout)?;
    let v = state.vocab_size;
    let mut total = 0.0;
    for &i in &targets {
        let row = &cache.logits[(i - 1) * v..i * v];
        total += cross_entropy(row, seq.token_ids[i] as usize);
    }
    Ok((total, targets.len()))
}

fn cross_entropy<T: Real>(logits: &[T], target: usize) -> f64 {
    let mut m = T::neg_infinity();
    for &v in logits {
        if v > m {
            m = v;
        }
    }
    let mut s = 0.0f64;
    for &v in logits {
        s += (v - m).to_f64().exp();
    }
    s.ln() - (logits[target] - m).to_f64()
}

/// Mean masked cross-entropy over a batch plus exact gradients for every
/// trainable tensor. Frozen tensors are absent from the returned map.
pub fn gradients<T: Real>(
    state: &ModelState<T>,
    batch: &[AnnotatedSequence],
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Grads<T>)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut n_targets = 0usize;
    let mut per_seq_targets = Vec::with_capacity(batch.len());
    for seq in batch {
        let t = masked_targets(seq)?;
        n_targets += t.len();
        per_seq_targets.push(t);
    }
    let inv_n = 1.0 / n_targets as f64;

    let mut grads: Grads<T> = state
        .params
        .iter()
        .filter(|(_, t)| t.trainable != Trainability::Frozen)
        .map(|(n, t)| (n.clone(), vec![T::zero(); t.numel()]))
        .collect();
    let mut total_loss = 0.0;

    for (seq, targets) in batch.iter().zip(&per_seq_targets) {
        let cache = forward_cached(state, &seq.token_ids, dropout.as_deref_mut())?;
        let t = seq.token_ids.len();
        let v = state.vocab_size;
        let mut dlogits = vec![T::zero(); t * v];
        for &i in targets {
            let row = &cache.logits[(i - 1) * v..i * v];
            total_loss += cross_entropy(row, seq.token_ids[i] as usize) * inv_n;
            let drow = &mut dlogits[(i - 1) * v..i * v];
            drow.copy_from_slice(row);
            softmax_inplace(drow);
            let w = T::from_f64(inv_n);
            for dv in drow.iter_mut() {
                *dv *= w;
            }
            drow[seq.token_ids[i] as usize] -= w;
        }
        backward(state, &cache, &dlogits, &mut grads)?;
    }

    // row-level trainable masks: zero gradient on frozen rows
    for (name, g) in grads.iter_mut() {
        let tensor = &state.params[name];
        if let Trainability::RowsFrom(k) = tensor.trainable {
            for x in g[..k * tensor.cols].iter_mut() {
                *x = T::zero();
            }
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    Ok((total_loss, grads))
}

fn backward<T: Real>(
    state: &ModelState<T>,
    cache: &Cache<T>,
    dlogits: &[T],
    grads: &mut Grads<T>,
) -> Result<()> {
    let cfg = &state.config;
    let (d, h, ff) = (cfg.d_model, cfg.n_heads, cfg.d_ff);
    let t = cache.ids.len();
    let dh = d / h;
    let v = state.vocab_size;
    let out_name = state.output_name();

    // output head
    let wout = state.tensor(out_name);
    if let Some(g) = grads.get_mut(out_name) {
        matmul_tn_acc(dlogits, &cache.f, t, v, d, g);
    }
    let mut df = vec![T::zero(); t * d];
    matmul_nn_acc(dlogits, &wout.data, t, v, d, &mut df);

    let mut dx = vec![T::zero(); t * d];
    for p in 0..t {
        rmsnorm_backward(
            &df[p * d..(p + 1) * d],
            &cache.xf[p * d..(p + 1) * d],
            cache.rf[p],
            &mut dx[p * d..(p + 1) * d],
        );
    }

    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    for (l, lc) in cache.layers.iter().enumerate().rev() {
        let [nwq, nwk, nwv, nwo, nfc1, nfc2] = layer_names(l);

        // ---- MLP block ----
        let mut du2 = dx.clone();
        if let Some(m) = &lc.mlp_mask {
            apply_mask(&mut du2, m);
        }
        let mut dh1 = vec![T::zero(); t * ff];
        matmul_nn_acc(&du2, &state.tensor(&nfc2).data, t, d, ff, &mut dh1);
        if let Some(g) = grads.get_mut(&nfc2) {
            matmul_tn_acc(&du2, &lc.h1, t, d, ff, g);
        }
        if let Some(lc2_in) = &lc.lora2_in {
            let rank = state.lora.as_ref().unwrap().rank;
            let na = format!("{nfc2}.lora_a");
            let nb = format!("{nfc2}.lora_b");
            let a2 = &state.tensor(&na).data;
            let b2 = &state.tensor(&nb).data;
            let mut ha = vec![T::zero(); t * rank];
            matmul_nt(lc2_in, a2, t, ff, rank, &mut ha);
            if let Some(g) = grads.get_mut(&nb) {
                matmul_tn_acc(&du2, &ha, t, d, rank, g);
            }
            let mut dha = vec![T::zero(); t * rank];
            matmul_nn_acc(&du2, b2, t, d, rank, &mut dha);
            if let Some(g) = grads.get_mut(&na) {
                matmul_tn_acc(&dha, lc2_in, t, rank, ff, g);
            }
            let mut dlin = vec![T::zero(); t * ff];
            matmul_nn_acc(&dha, a2, t, rank, ff, &mut dlin);
            if let Some(m) = &lc.lora2_mask {
                apply_mask(&mut dlin, m);
            }
            for (di, li) in dh1.iter_mut().zip(&dlin) {
                *di += *li;
            }
        }
        let mut du1 = dh1;
        for (du, &u) in du1.iter_mut().zip(&lc.u1) {
            *du *= gelu_derivative(u);
        }
        let mut db = vec![T::zero(); t * d];
        matmul_nn_acc(&du1, &state.tensor(&nfc1).data, t, ff, d, &mut db);
        if let Some(g) = grads.get_mut(&nfc1) {
            matmul_tn_acc(&du1, &lc.b, t, ff, d, g);
        }
        if let Some(lc1_in) = &lc.lora1_in {
            let rank = state.lora.as_ref().unwrap().rank;
            let na = format!("{nfc1}.lora_a");
            let nb = format!("{nfc1}.lora_b");
            let a1 = &state.tensor(&na).data;
            let b1 = &state.tensor(&nb).data;
            let mut ha = vec![T::zero(); t * rank];
            matmul_nt(lc1_in, a1, t, d, rank, &mut ha);
            if let Some(g) = grads.get_mut(&nb) {
                matmul_tn_acc(&du1, &ha, t, ff, rank, g);
            }
            let mut dha = vec![T::zero(); t * rank];
            matmul_nn_acc(&du1, b1, t, ff, rank, &mut dha);
            if let Some(g) = grads.get_mut(&na) {
                matmul_tn_acc(&dha, lc1_in, t, rank, d, g);
            }
            let mut dlin = vec![T::zero(); t * d];
            matmul_nn_acc(&dha, a1, t, rank, d, &mut dlin);
            if let Some(m) = &lc.lora1_mask {
                apply_mask(&mut dlin, m);
            }
            for (di, li) in db.iter_mut().zip(&dlin) {
                *di += *li;
            }
        }
        // rmsnorm 2 backward; residual carries dx through
        let mut dx_mid = dx;
        for p in 0..t {
            rmsnorm_backward(
                &db[p * d..(p + 1) * d],
                &lc.x_mid[p * d..(p + 1) * d],
                lc.r2[p],
                &mut dx_mid[p * d..(p + 1) * d],
            );
        }

        // ---- attention block ----
        let mut do_ = dx_mid.clone();
        if let Some(m) = &lc.attn_mask {
            apply_mask(&mut do_, m);
        }
        if let Some(g) = grads.get_mut(&nwo) {
            matmul_tn_acc(&do_, &lc.ctx, t, d, d, g);
        }
        let mut dctx = vec![T::zero(); t * d];
        matmul_nn_acc(&do_, &state.tensor(&nwo).data, t, d, d, &mut dctx);

        let mut dq = vec![T::zero(); t * d];
        let mut dk = vec![T::zero(); t * d];
        let mut dv = vec![T::zero(); t * d];
        for head in 0..h {
            let off = head * dh;
            for tq in 0..t {
                let dctx_row = &dctx[tq * d + off..tq * d + off + dh];
                let prow = &lc.probs[(head * t + tq) * t..(head * t + tq) * t + t];
                // dprobs and softmax backward over keys 0..=tq
                let mut ds = vec![T::zero(); tq + 1];
                let mut inner = T::zero();
                for tk in 0..=tq {
                    let dp = dot(dctx_row, &lc.v[tk * d + off..tk * d + off + dh]);
                    ds[tk] = dp;
                    inner += prow[tk] * dp;
                }
                for tk in 0..=tq {
                    ds[tk] = prow[tk] * (ds[tk] - inner);
                    // dv
                    axpy(
                        prow[tk],
                        dctx_row,
                        &mut dv[tk * d + off..tk * d + off + dh],
                    );
                }
                for tk in 0..=tq {
                    let s = ds[tk] * scale;
                    axpy(
                        s,
                        &lc.k[tk * d + off..tk * d + off + dh],
                        &mut dq[tq * d + off..tq * d + off + dh],
                    );
                    axpy(
                        s,
                        &lc.q[tq * d + off..tq * d + off + dh],
                        &mut dk[tk * d + off..tk * d + off + dh],
                    );
                }
            }
        }
        let mut da = vec![T::zero(); t * d];
        matmul_nn_acc(&dq, &state.tensor(&nwq).data, t, d, d, &mut da);
        matmul_nn_acc(&dk, &state.tensor(&nwk).data, t, d, d, &mut da);
        matmul_nn_acc(&dv, &state.tensor(&nwv).data, t, d, d, &mut da);
        if let Some(g) = grads.get_mut(&nwq) {
            matmul_tn_acc(&dq, &lc.a, t, d, d, g);
        }
        if let Some(g) = grads.get_mut(&nwk) {
            matmul_tn_acc(&dk, &lc.a, t, d, d, g);
        }
        if let Some(g) = grads.get_mut(&nwv) {
            matmul_tn_acc(&dv, &lc.a, t, d, d, g);
        }
        let mut dx_in = dx_mid;
        for p in 0..t {
            rmsnorm_backward(
                &da[p * d..(p + 1) * d],
                &lc.x_in[p * d..(p + 1) * d],
                lc.r1[p],
                &mut dx_in[p * d..(p + 1) * d],
            );
        }
        dx = dx_in;
    }

    // embeddings
    if let Some(g) = grads.get_mut("wte") {
        for (pos, &id) in cache.ids.iter().enumerate() {
            axpy(
                T::one(),
                &dx[pos * d..(pos + 1) * d],
                &mut g[id as usize * d..(id as usize + 1) * d],
            );
        }
    }
    if let Some(g) = grads.get_mut("wpe") {
        for pos in 0..t {
            axpy(T::one(), &dx[pos * d..(pos + 1) * d], &mut g[pos * d..(pos + 1) * d]);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NewTokenInit {
    MeanOfBase,
    ScaledNormal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtendReport {
    pub n_new: usize,
    pub delta_params: usize,
    pub total_params: usize,
    pub overhead_fraction: f64,
}

/// Appends embedding rows for newly added vocabulary tokens. The output
/// matrix (when untied) grows by the same rows, so old-token logits are
/// unchanged for sequences without new tokens.
pub fn extend_embeddings<T: Real>(
    state: &mut ModelState<T>,
    new_vocab_size: usize,
    new_vocab_hash: &str,
    init: NewTokenInit,
    seed: u64,
) -> Result<ExtendReport> {
    if new_vocab_size < state.vocab_size {
        return Err(Error::Config(format!(
            "cannot shrink vocabulary {} -> {new_vocab_size}",
            state.vocab_size
        )));
    }
    let n_new = new_vocab_size - state.vocab_size;
    let d = state.config.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adapter_mode = state.lora.is_some();
    let old_rows = state.vocab_size;
    let names: Vec<&str> = if state.config.tie_embeddings {
        vec!["wte"]
    } else {
        vec!["wte", "wout"]
    };
    for name in names {
        let tensor = state.params.get_mut(name).expect("embedding tensor");
        let mut mean = vec![T::zero(); d];
        for r in 0..tensor.rows {
            axpy(T::one(), tensor.row(r), &mut mean);
        }
        let inv = T::from_f64(1.0 / tensor.rows as f64);
        for m in mean.iter_mut() {
            *m *= inv;
        }
        for _ in 0..n_new {
            for j in 0..d {
                let val = match init {
                    NewTokenInit::MeanOfBase => mean[j] + T::from_f64(gauss(&mut rng) * 1e-3),
                    NewTokenInit::ScaledNormal => T::from_f64(gauss(&mut rng) * INIT_STD),
                };
                tensor.data.push(val);
            }
        }
        tensor.rows += n_new;
        if adapter_mode {
            // base rows stay frozen, new rows train
            tensor.trainable = Trainability::RowsFrom(old_rows.min(match tensor.trainable {
                Trainability::RowsFrom(k) => k,
                _ => old_rows,
            }));
        }
    }
    state.vocab_size = new_vocab_size;
    state.vocab_hash = new_vocab_hash.to_string();
    let counts = count_trainable(state);
    let delta = n_new * d * if state.config.tie_embeddings { 1 } else { 2 };
    Ok(ExtendReport {
        n_new,
        delta_params: delta,
        total_params: counts.total,
        overhead_fraction: delta as f64 / counts.total as f64,
    })
}

/// Freezes the base weights and adds zero-initialized rank decompositions on
/// each MLP projection. Extended embedding rows stay trainable.
pub fn apply_lora<T: Real>(state: &mut ModelState<T>, lora: LoraConfig, seed: u64) -> Result<()> {
    if lora.rank < 1 {
        return Err(Error::Config("lora rank must be >= 1".into()));
    }
    if state.lora.is_some() {
        return Err(Error::Config("adapters already applied".into()));
    }
    let extended_from = (state.vocab_size > state.base_vocab_size).then_some(state.base_vocab_size);
    for (name, tensor) in state.params.iter_mut() {
        if (name == "wte" || name == "wout") && extended_from.is_some() {
            tensor.trainable = Trainability::RowsFrom(extended_from.unwrap());
        } else {
            tensor.trainable = Trainability::Frozen;
        }
    }
    let d = state.config.d_model;
    let ff = state.config.d_ff;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in 0..state.config.n_layers {
        // B is zero so the initial function equals the frozen base
        let fc1_a = Tensor::randn(lora.rank, d, INIT_STD, &mut rng);
        let fc1_b = Tensor::zeros(ff, lora.rank);
        let fc2_a = Tensor::randn(lora.rank, ff, INIT_STD, &mut rng);
        let fc2_b = Tensor::zeros(d, lora.rank);
        state.params.insert(format!("l{l}.fc1.lora_a"), fc1_a);
        state.params.insert(format!("l{l}.fc1.lora_b"), fc1_b);
        state.params.insert(format!("l{l}.fc2.lora_a"), fc2_a);
        state.params.insert(format!("l{l}.fc2.lora_b"), fc2_b);
    }
    state.lora = Some(lora);
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainableReport {
    pub total: usize,
    pub trainable: usize,
    pub fraction: f64,
    /// group -> (total, trainable)
    pub by_group: BTreeMap<String, (usize, usize)>,
}

pub fn count_trainable<T: Real>(state: &ModelState<T>) -> TrainableReport {
    let mut by_group: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut total = 0;
    let mut trainable = 0;
    for (name, tensor) in &state.params {
        let group = if name.contains("lora") {
            "lora"
        } else if name == "wte" || name == "wpe" || name == "wout" {
            "embeddings"
        } else if name.contains(".w") {
            "attention"
        } else {
            "mlp"
        };
        let e = by_group.entry(group.to_string()).or_insert((0, 0));
        e.0 += tensor.numel();
        e.1 += tensor.trainable_count();
        total += tensor.numel();
        trainable += tensor.trainable_count();
    }
    TrainableReport {
        total,
        trainable,
        fraction: trainable as f64 / total as f64,
        by_group,
    }
}

/// Incremental greedy-decoding session with cached keys/values per layer.
/// Produces the same logits as a full forward pass.
pub struct Decoder<'a, T: Real> {
    state: &'a ModelState<T>,
    pos: usize,
    k_cache: Vec<Vec<T>>,
    v_cache: Vec<Vec<T>>,
}

impl<'a, T: Real> Decoder<'a, T> {
    pub fn new(state: &'a ModelState<T>) -> Self {
        Decoder {
            state,
            pos: 0,
            k_cache: vec![Vec::new(); state.config.n_layers],
            v_cache: vec![Vec::new(); state.config.n_layers],
        }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    /// Feeds one token; returns the logits for the next position.
    pub fn feed(&mut self, id: TokenId) -> Result<Vec<T>> {
        let cfg = &self.state.config;
        let (d, h, ff) = (cfg.d_model, cfg.n_heads, cfg.d_ff);
        let dh = d / h;
        if self.pos >= cfg.context_len {
            return Err(Error::Shape("context length exceeded".into()));
        }
        if id as usize >= self.state.vocab_size {
            return Err(Error::Vocab(format!("token id {id} out of range")));
        }
        let wte = self.state.tensor("wte");
        let wpe = self.state.tensor("wpe");
        let mut x: Vec<T> = wte
            .row(id as usize)
            .iter()
            .zip(wpe.row(self.pos))
            .map(|(&e, &p)| e + p)
            .collect();
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        for l in 0..cfg.n_layers {
            let [nwq, nwk, nwv, nwo, nfc1, nfc2] = layer_names(l);
            let mut a = vec![T::zero(); d];
            rmsnorm(&x, &mut a);
            let mut q = vec![T::zero(); d];
            let mut k = vec![T::zero(); d];
            let mut v = vec![T::zero(); d];
            matmul_nt(&a, &self.state.tensor(&nwq).data, 1, d, d, &mut q);
            matmul_nt(&a, &self.state.tensor(&nwk).data, 1, d, d, &mut k);
            matmul_nt(&a, &self.state.tensor(&nwv).data, 1, d, d, &mut v);
            self.k_cache[l].extend_from_slice(&k);
            self.v_cache[l].extend_from_slice(&v);
            let n_keys = self.pos + 1;
            let mut ctx = vec![T::zero(); d];
            for head in 0..h {
                let off = head * dh;
                let mut scores = vec![T::zero(); n_keys];
                for (tk, s) in scores.iter_mut().enumerate() {
                    *s = dot(&q[off..off + dh], &self.k_cache[l][tk * d + off..tk * d + off + dh])
                        * scale;
                }
                softmax_inplace(&mut scores);
                for (tk, &p) in scores.iter().enumerate() {
                    axpy(
                        p,
                        &self.v_cache[l][tk * d + off..tk * d + off + dh],
                        &mut ctx[off..off + dh],
                    );
                }
            }
            let mut o = vec![T::zero(); d];
            matmul_nt(&ctx, &self.state.tensor(&nwo).data, 1, d, d, &mut o);
            let x_mid: Vec<T> = x.iter().zip(&o).map(|(&a, &b)| a + b).collect();
            let mut b = vec![T::zero(); d];
            rmsnorm(&x_mid, &mut b);
            let mut u1 = vec![T::zero(); ff];
            matmul_nt(&b, &self.state.tensor(&nfc1).data, 1, d, ff, &mut u1);
            if let Some(lc) = &self.state.lora {
                let a1 = &self.state.tensor(&format!("{nfc1}.lora_a")).data;
                let b1 = &self.state.tensor(&format!("{nfc1}.lora_b")).data;
                let mut ha = vec![T::zero(); lc.rank];
                matmul_nt(&b, a1, 1, d, lc.rank, &mut ha);
                let mut delta = vec![T::zero(); ff];
                matmul_nt(&ha, b1, 1, lc.rank, ff, &mut delta);
                for (u, dl) in u1.iter_mut().zip(&delta) {
                    *u += *dl;
                }
            }
            let h1: Vec<T> = u1.iter().map(|&u| gelu(u)).collect();
            let mut u2 = vec![T::zero(); d];
            matmul_nt(&h1, &self.state.tensor(&nfc2).data, 1, ff, d, &mut u2);
            if let Some(lc) = &self.state.lora {
                let a2 = &self.state.tensor(&format!("{nfc2}.lora_a")).data;
                let b2 = &self.state.tensor(&format!("{nfc2}.lora_b")).data;
                let mut ha = vec![T::zero(); lc.rank];
                matmul_nt(&h1, a2, 1, ff, lc.rank, &mut ha);
                let mut delta = vec![T::zero(); d];
                matmul_nt(&ha, b2, 1, lc.rank, d, &mut delta);
                for (u, dl) in u2.iter_mut().zip(&delta) {
                    *u += *dl;
                }
            }
            x = x_mid.iter().zip(&u2).map(|(&a, &b)| a + b).collect();
        }
        let mut f = vec![T::zero(); d];
        rmsnorm(&x, &mut f);
        let wout = self.state.tensor(self.state.output_name());
        let mut logits = vec![T::zero(); self.state.vocab_size];
        matmul_nt(&f, &wout.data, 1, d, self.state.vocab_size, &mut logits);
        self.pos += 1;
        Ok(logits)
    }
}

pub fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
