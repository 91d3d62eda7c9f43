//! Unified denoising schedules and two-phase generation.
//!
//! A schedule is an ordered partition of the positions into steps. The leading
//! steps come from the diffusion phase and may unmask several positions at
//! once; the trailing steps are ascending singletons decoded left to right.
//! The concatenation of the steps is the ordering `sigma` that the sampling
//! biases use.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::bias::SamplingLayout;
use crate::masking::TokenId;
use crate::model::{ops::log_softmax, Denoiser, KvCache, Logits};
use crate::ordering::Ordering;
use crate::rng::Rng;
use crate::schedule::{LogLinearSchedule, NoiseSchedule};
use crate::{bias::AttentionBias, Error, Result, Variant};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenoisingSchedule {
    len: usize,
    steps: Vec<Vec<usize>>,
    n_mdm: usize,
}

impl DenoisingSchedule {
    /// Validates that `steps` partitions `0..len`, that the first `n_mdm`
    /// positions fill non-empty diffusion steps, and that the rest are
    /// ascending singletons.
    pub fn new(len: usize, steps: Vec<Vec<usize>>, n_mdm: usize) -> Result<Self> {
        let mut seen = vec![false; len];
        let mut count = 0;
        let mut mdm_steps = 0;
        for step in &steps {
            if step.is_empty() {
                return Err(Error::NotAPartition {
                    len,
                    detail: "empty step".into(),
                });
            }
            for &i in step {
                if i >= len || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::NotAPartition {
                        len,
                        detail: format!("position {} repeated or out of range", i + 1),
                    });
                }
            }
            if count < n_mdm {
                mdm_steps += 1;
            }
            count += step.len();
        }
        if count != len {
            return Err(Error::NotAPartition {
                len,
                detail: format!("{count} positions scheduled"),
            });
        }
        let prefix: usize = steps[..mdm_steps].iter().map(Vec::len).sum();
        if prefix != n_mdm {
            return Err(Error::NotAPartition {
                len,
                detail: format!("diffusion steps hold {prefix} positions, expected {n_mdm}"),
            });
        }
        let tail = &steps[mdm_steps..];
        if tail.iter().any(|s| s.len() != 1) || tail.windows(2).any(|w| w[0][0] >= w[1][0]) {
            return Err(Error::NotAPartition {
                len,
                detail: "sequential steps must be ascending singletons".into(),
            });
        }
        Ok(Self { len, steps, n_mdm })
    }

    /// Rebuilds a schedule from its random draws: the non-zero per-step
    /// counts and the permuted diffusion positions (0-based).
    pub fn from_draws(len: usize, counts: &[usize], permuted: &[usize]) -> Result<Self> {
        let n_mdm: usize = counts.iter().sum();
        if permuted.len() != n_mdm {
            return Err(Error::LengthMismatch {
                expected: n_mdm,
                got: permuted.len(),
            });
        }
        let mut steps = Vec::new();
        let mut at = 0;
        for &c in counts.iter().filter(|&&c| c > 0) {
            steps.push(permuted[at..at + c].to_vec());
            at += c;
        }
        let mut in_mdm = vec![false; len];
        for &i in permuted {
            if i >= len {
                return Err(Error::NotAPartition {
                    len,
                    detail: format!("position {} out of range", i + 1),
                });
            }
            in_mdm[i] = true;
        }
        steps.extend((0..len).filter(|&i| !in_mdm[i]).map(|i| vec![i]));
        Self::new(len, steps, n_mdm)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn steps(&self) -> &[Vec<usize>] {
        &self.steps
    }

    pub fn n_mdm(&self) -> usize {
        self.n_mdm
    }

    pub fn n_ar(&self) -> usize {
        self.len - self.n_mdm
    }

    /// Number of diffusion-phase steps.
    pub fn mdm_steps(&self) -> usize {
        self.steps.len() - self.n_ar()
    }

    pub fn nfe(&self) -> usize {
        self.steps.len()
    }

    /// The concatenation of the steps.
    pub fn sigma(&self) -> Ordering {
        Ordering::from_perm(self.steps.concat()).expect("validated partition")
    }

    /// 1-based rendering, e.g. `((3, 1), (6), (2))`.
    pub fn to_one_based_string(&self) -> String {
        let inner: Vec<String> = self
            .steps
            .iter()
            .map(|s| {
                let items: Vec<String> = s.iter().map(|i| (i + 1).to_string()).collect();
                format!("({})", items.join(", "))
            })
            .collect();
        format!("({})", inner.join(", "))
    }
}

/// First-hitting schedule: `T` binomial unmask counts on the grid
/// `t = 1, 1 - 1/T, ...`, zero counts dropped, diffusion positions chosen
/// uniformly, remaining positions appended as ascending singletons.
pub fn build_schedule(len: usize, t_steps: usize, schedule: &LogLinearSchedule, rng: &mut Rng) -> Result<DenoisingSchedule> {
    if len == 0 || t_steps == 0 {
        return Err(Error::Config(format!("need L >= 1 and T >= 1, got L = {len}, T = {t_steps}")));
    }
    let mut remaining = len as u64;
    let mut counts = Vec::new();
    for i in 0..t_steps {
        let t = 1.0 - i as f64 / t_steps as f64;
        let s = (t - 1.0 / t_steps as f64).max(0.0);
        let (a_t, a_s) = (schedule.alpha(t)?, schedule.alpha(s)?);
        let p = if a_t >= 1.0 { 1.0 } else { ((a_s - a_t) / (1.0 - a_t)).clamp(0.0, 1.0) };
        let n = if remaining == 0 || p == 0.0 {
            0
        } else {
            Binomial::new(remaining, p)
                .map_err(|e| Error::Config(format!("binomial draw: {e}")))?
                .sample(rng)
        };
        remaining -= n;
        if n > 0 {
            counts.push(n as usize);
        }
    }
    let n_mdm: usize = counts.iter().sum();
    let mut all: Vec<usize> = (0..len).collect();
    all.shuffle(rng);
    all.truncate(n_mdm);
    DenoisingSchedule::from_draws(len, &counts, &all)
}

/// Which execution path [`generate`] uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Executor {
    /// Recomputes every active position at every step, no cache.
    Reference,
    /// Baseline: a full bidirectional pass over all `L` positions per step.
    FullPass,
    /// Variant B caches in both phases; variant A in the sequential phase.
    Cached,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub variant: Variant,
    pub executor: Executor,
    /// `0` means greedy decoding.
    pub temperature: f64,
    pub nucleus: Option<f64>,
    /// Keep the logit rows used at every step.
    pub record_logits: bool,
}

impl SamplerConfig {
    pub fn new(variant: Variant, executor: Executor) -> Self {
        Self {
            variant,
            executor,
            temperature: 1.0,
            nucleus: None,
            record_logits: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub nfe: u64,
    pub query_tokens_total: u64,
    /// Sum over fed query rows of their permitted-key counts.
    pub attention_pairs_total: u64,
    /// Permitted (query, key) pairs whose key was read from the cache.
    pub cache_hits: u64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    pub stats: GenerationStats,
    /// Per step, the logit rows of that step's positions in step order.
    pub step_logits: Vec<Vec<Vec<f64>>>,
}

/// Keeps the smallest highest-probability set whose mass reaches `p` and
/// renormalizes. Ties are ranked by ascending token id.
pub fn nucleus_filter_probs(probs: &[f64], p: f64) -> Result<Vec<f64>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Config(format!("nucleus p must lie in (0, 1], got {p}")));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut out = vec![0.0; probs.len()];
    let mut mass = 0.0;
    for &i in &order {
        if probs[i] <= 0.0 {
            break;
        }
        out[i] = probs[i];
        mass += probs[i];
        if mass >= p - 1e-12 {
            break;
        }
    }
    for v in out.iter_mut() {
        *v /= mass;
    }
    Ok(out)
}

/// Softmax of `logits` followed by [`nucleus_filter_probs`].
pub fn nucleus_filter(logits: &[f64], p: f64) -> Result<Vec<f64>> {
    let probs: Vec<f64> = log_softmax(logits).into_iter().map(f64::exp).collect();
    nucleus_filter_probs(&probs, p)
}

/// Draws one token from a logit row; the mask id is never produced.
fn sample_token(row: &[f64], mask_id: TokenId, cfg: &SamplerConfig, rng: &mut Rng) -> Result<TokenId> {
    let mut logits = row.to_vec();
    logits[mask_id as usize] = f64::NEG_INFINITY;
    if cfg.temperature == 0.0 {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return Ok(best as TokenId);
    }
    logits.iter_mut().for_each(|v| *v /= cfg.temperature);
    let probs = match cfg.nucleus {
        Some(p) => nucleus_filter(&logits, p)?,
        None => log_softmax(&logits).into_iter().map(f64::exp).collect(),
    };
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return Ok(i as TokenId);
            }
        }
    }
    Ok(last as TokenId)
}

/// Mutable state shared by the executors.
struct Decode<'a> {
    model: &'a Denoiser,
    cfg: &'a SamplerConfig,
    schedule: &'a DenoisingSchedule,
    sigma: Ordering,
    tokens: Vec<TokenId>,
    d_mdm: Vec<usize>,
    d_ar: Vec<usize>,
    stats: GenerationStats,
    step_logits: Vec<Vec<Vec<f64>>>,
}

impl Decode<'_> {
    fn layout(&self, s_k: &[usize]) -> Result<SamplingLayout<'_>> {
        SamplingLayout::new(self.cfg.variant, &self.d_mdm, &self.d_ar, s_k, &self.sigma)
    }

    /// Samples the step's positions from their rows (row `r` of `rows_of`).
    fn commit(&mut self, k: usize, logits: &Logits, row_of: impl Fn(usize) -> usize, rng: &mut Rng) -> Result<()> {
        let s_k = &self.schedule.steps()[k];
        let mask_id = self.model.config().vocab.mask_id();
        let mut recorded = Vec::new();
        for (idx, &pos) in s_k.iter().enumerate() {
            let row = logits.row(row_of(idx));
            if self.cfg.record_logits {
                recorded.push(row.to_vec());
            }
            self.tokens[pos] = sample_token(row, mask_id, self.cfg, rng)?;
        }
        if self.cfg.record_logits {
            self.step_logits.push(recorded);
        }
        if k < self.schedule.mdm_steps() {
            self.d_mdm.extend_from_slice(s_k);
        } else {
            self.d_ar.extend_from_slice(s_k);
        }
        Ok(())
    }

    fn reference_step(&mut self, k: usize, rng: &mut Rng) -> Result<()> {
        let s_k = self.schedule.steps()[k].clone();
        let compact = self.layout(&s_k)?.compact();
        let toks: Vec<TokenId> = compact.positions.iter().map(|&p| self.tokens[p]).collect();
        let logits = self.model.forward(&toks, &compact.positions, &compact.bias)?;
        self.stats.nfe += 1;
        self.stats.query_tokens_total += compact.positions.len() as u64;
        self.stats.attention_pairs_total += compact.bias.count() as u64;
        let slots: Vec<usize> = s_k
            .iter()
            .map(|p| compact.positions.binary_search(p).expect("step position is active"))
            .collect();
        self.commit(k, &logits, |i| slots[i], rng)
    }

    fn full_pass_step(&mut self, k: usize, rng: &mut Rng) -> Result<()> {
        let len = self.schedule.len();
        let positions: Vec<usize> = (0..len).collect();
        let toks = self.tokens.clone();
        let logits = self.model.forward(&toks, &positions, &AttentionBias::full(len))?;
        self.stats.nfe += 1;
        self.stats.query_tokens_total += len as u64;
        self.stats.attention_pairs_total += (len * len) as u64;
        let s_k = self.schedule.steps()[k].clone();
        self.commit(k, &logits, |i| s_k[i], rng)
    }

    /// Feeds `build` (written to the cache) then the step's positions.
    fn cached_step(&mut self, k: usize, build: &[usize], cache: &mut KvCache, rng: &mut Rng) -> Result<()> {
        let s_k = self.schedule.steps()[k].clone();
        let layout = self.layout(&s_k)?;
        let fed: Vec<usize> = build.iter().chain(&s_k).copied().collect();
        let rows: Vec<Vec<usize>> = fed.iter().map(|&p| layout.row(p)).collect();
        let write: Vec<bool> = (0..fed.len()).map(|i| i < build.len()).collect();
        let toks: Vec<TokenId> = fed.iter().map(|&p| self.tokens[p]).collect();
        let logits = self.model.forward_cached(&toks, &fed, &rows, cache, &write)?;
        self.stats.nfe += 1;
        self.stats.query_tokens_total += fed.len() as u64;
        // Every permitted key that was not fed this call came from the cache.
        let mut is_fed = vec![false; self.schedule.len()];
        fed.iter().for_each(|&p| is_fed[p] = true);
        for row in &rows {
            self.stats.attention_pairs_total += row.len() as u64;
            self.stats.cache_hits += row.iter().filter(|&&p| !is_fed[p]).count() as u64;
        }
        let offset = build.len();
        self.commit(k, &logits, |i| offset + i, rng)
    }
}

/// Runs the whole schedule from an all-mask start.
pub fn generate(model: &Denoiser, schedule: &DenoisingSchedule, cfg: &SamplerConfig, rng: &mut Rng) -> Result<Generation> {
    let len = schedule.len();
    if len > model.config().max_positions {
        return Err(Error::LengthMismatch {
            expected: model.config().max_positions,
            got: len,
        });
    }
    let start = Instant::now();
    let mut st = Decode {
        model,
        cfg,
        schedule,
        sigma: schedule.sigma(),
        tokens: vec![model.config().vocab.mask_id(); len],
        d_mdm: Vec::new(),
        d_ar: Vec::new(),
        stats: GenerationStats::default(),
        step_logits: Vec::new(),
    };
    let steps = schedule.nfe();
    match (cfg.executor, cfg.variant) {
        (Executor::Reference, _) => {
            for k in 0..steps {
                st.reference_step(k, rng)?;
            }
        }
        (Executor::FullPass, _) => {
            for k in 0..steps {
                st.full_pass_step(k, rng)?;
            }
        }
        (Executor::Cached, Variant::B) => {
            let mut cache = KvCache::new(model, len);
            for k in 0..steps {
                let build = if k == 0 { Vec::new() } else { schedule.steps()[k - 1].clone() };
                st.cached_step(k, &build, &mut cache, rng)?;
            }
        }
        (Executor::Cached, Variant::A) => {
            let mut cache = KvCache::new(model, len);
            let first_seq = schedule.mdm_steps();
            for k in 0..steps {
                if k < first_seq {
                    st.reference_step(k, rng)?;
                } else if k == first_seq {
                    let build = st.d_mdm.clone();
                    st.cached_step(k, &build, &mut cache, rng)?;
                } else {
                    let build = schedule.steps()[k - 1].clone();
                    st.cached_step(k, &build, &mut cache, rng)?;
                }
            }
        }
    }
    st.stats.wall_seconds = start.elapsed().as_secs_f64();
    debug_assert!(!st.tokens.contains(&model.config().vocab.mask_id()));
    Ok(Generation {
        tokens: st.tokens,
        stats: st.stats,
        step_logits: st.step_logits,
    })
}
