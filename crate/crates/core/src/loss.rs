//! The hybrid bound: an AR term over the positions masked by `q_0`, computed
//! in one pass over `z_0 ⊕ x`, plus a weighted masked-diffusion term.

use crate::bias::{
    bias_a_diffusion_train, bias_a_sequential_train, bias_b_diffusion_train, bias_b_sequential_train, AttentionBias,
    UnconsumedRows,
};
use crate::masking::{concat, forward_mask, forward_mask_size_biased, MaskedSequence, TokenId, Vocab};
use crate::model::{weighted_cross_entropy, Denoiser, Params};
use crate::ordering::{sample_diffusion_ordering, sample_sequential_ordering, Ordering};
use crate::rng::{streams, SeedTree};
use crate::schedule::{low_discrepancy_times, LogLinearSchedule, NoiseSchedule, MIN_TIME};
use crate::{Error, Result, Variant};

fn check_len(x: &[TokenId], z: &MaskedSequence) -> Result<()> {
    if x.len() != z.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            got: z.len(),
        });
    }
    Ok(())
}

/// Input, bias and per-row targets for one loss evaluation.
struct Pass {
    tokens: Vec<TokenId>,
    positions: Vec<usize>,
    bias: AttentionBias,
    targets: Vec<(usize, TokenId, f64)>,
}

fn ar_pass(x: &[TokenId], z0: &MaskedSequence, variant: Variant, sigma: &Ordering, unconsumed: UnconsumedRows) -> Result<Pass> {
    check_len(x, z0)?;
    let (clean, mask) = (z0.clean_indices(), z0.mask_indices());
    let bias = match variant {
        Variant::A => bias_a_sequential_train(&clean, &mask, unconsumed)?,
        Variant::B => bias_b_sequential_train(&clean, &mask, sigma, unconsumed)?,
    };
    let c = concat(z0, x)?;
    let targets = mask.iter().map(|&l| (l, x[l], 1.0)).collect();
    Ok(Pass {
        tokens: c.tokens,
        positions: c.positions,
        bias,
        targets,
    })
}

fn mdm_pass(x: &[TokenId], z_t: &MaskedSequence, variant: Variant, sigma: &Ordering, weight: f64) -> Result<Pass> {
    check_len(x, z_t)?;
    let (clean, mask) = (z_t.clean_indices(), z_t.mask_indices());
    let bias = match variant {
        Variant::A => bias_a_diffusion_train(&clean, &mask, sigma)?,
        Variant::B => {
            if !sigma.is_clean_first(&clean, &mask) {
                return Err(Error::OrderingConstraint { constraint: "clean-first" });
            }
            bias_b_diffusion_train(sigma)?
        }
    };
    let targets = mask.iter().map(|&l| (l, x[l], weight)).collect();
    Ok(Pass {
        tokens: z_t.tokens().to_vec(),
        positions: (0..x.len()).collect(),
        bias,
        targets,
    })
}

fn run(model: &Denoiser, pass: &Pass) -> Result<f64> {
    if pass.targets.is_empty() {
        return Ok(0.0);
    }
    let logits = model.forward(&pass.tokens, &pass.positions, &pass.bias)?;
    Ok(weighted_cross_entropy(&logits, &pass.targets).0)
}

fn run_grad(model: &Denoiser, pass: &Pass, scale: f64) -> Result<(f64, Params)> {
    if pass.targets.is_empty() {
        return Ok((0.0, model.params().zeros_like()));
    }
    let (logits, tape) = model.forward_train(&pass.tokens, &pass.positions, &pass.bias)?;
    let (loss, mut dl) = weighted_cross_entropy(&logits, &pass.targets);
    if scale != 1.0 {
        dl.iter_mut().for_each(|g| *g *= scale);
    }
    Ok((loss, model.backward(&tape, &dl)?))
}

/// `-sum_{l in M(z0)} log p_theta(x^l | z0 ⊕ x)` read at the first-half slots.
///
/// `sigma` is only consulted for variant B, where it must put clean positions
/// first and masked positions in natural order.
pub fn ar_loss(
    model: &Denoiser,
    x: &[TokenId],
    z0: &MaskedSequence,
    variant: Variant,
    sigma: &Ordering,
    unconsumed: UnconsumedRows,
) -> Result<f64> {
    run(model, &ar_pass(x, z0, variant, sigma, unconsumed)?)
}

/// [`ar_loss`] and the gradient of `scale * loss`.
pub fn ar_loss_grad(
    model: &Denoiser,
    x: &[TokenId],
    z0: &MaskedSequence,
    variant: Variant,
    sigma: &Ordering,
    unconsumed: UnconsumedRows,
    scale: f64,
) -> Result<(f64, Params)> {
    run_grad(model, &ar_pass(x, z0, variant, sigma, unconsumed)?, scale)
}

/// Unweighted `-sum_{l in M(z_t)} log p_theta(x^l | z_t)` under the diffusion bias.
pub fn mdm_nll(model: &Denoiser, x: &[TokenId], z_t: &MaskedSequence, variant: Variant, sigma: &Ordering) -> Result<f64> {
    run(model, &mdm_pass(x, z_t, variant, sigma, 1.0)?)
}

fn mdm_weight(schedule: &LogLinearSchedule, t: f64, variance_reduced: bool) -> Result<f64> {
    // The loss is weight * sum log p with weight <= 0; as a sum of NLLs the
    // per-token coefficient is -weight.
    Ok(-schedule.diffusion_weight(t, variance_reduced)?)
}

/// `w(t) * sum_{l in M(z_t)} log p_theta(x^l | z_t)`, non-negative.
#[allow(clippy::too_many_arguments)]
pub fn mdm_loss(
    model: &Denoiser,
    x: &[TokenId],
    z_t: &MaskedSequence,
    t: f64,
    schedule: &LogLinearSchedule,
    variant: Variant,
    sigma: &Ordering,
    variance_reduced: bool,
) -> Result<f64> {
    let w = mdm_weight(schedule, t, variance_reduced)?;
    if w == 0.0 {
        return Ok(0.0);
    }
    run(model, &mdm_pass(x, z_t, variant, sigma, w)?)
}

/// [`mdm_loss`] and the gradient of `scale * loss`.
#[allow(clippy::too_many_arguments)]
pub fn mdm_loss_grad(
    model: &Denoiser,
    x: &[TokenId],
    z_t: &MaskedSequence,
    t: f64,
    schedule: &LogLinearSchedule,
    variant: Variant,
    sigma: &Ordering,
    variance_reduced: bool,
    scale: f64,
) -> Result<(f64, Params)> {
    let w = mdm_weight(schedule, t, variance_reduced)?;
    if w == 0.0 {
        return Ok((0.0, model.params().zeros_like()));
    }
    run_grad(model, &mdm_pass(x, z_t, variant, sigma, w)?, scale)
}

/// How a batch is split between the two loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainBatchPlan {
    pub batch_size: usize,
    /// Fraction of examples taking the MDM term; the rest take the AR term.
    pub mdm_fraction: f64,
}

impl TrainBatchPlan {
    pub fn new(batch_size: usize, mdm_fraction: f64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&mdm_fraction) {
            return Err(Error::Config(format!("mdm_fraction must lie in [0, 1], got {mdm_fraction}")));
        }
        Ok(Self {
            batch_size,
            mdm_fraction,
        })
    }

    /// Examples taking the MDM term. `alpha0 = 1` forces all of them (the AR
    /// term vanishes) and `alpha0 = 0` forces none (the MDM term vanishes).
    pub fn mdm_count(&self, alpha0: f64) -> usize {
        if alpha0 >= 1.0 {
            self.batch_size
        } else if alpha0 <= 0.0 {
            0
        } else {
            (self.batch_size as f64 * self.mdm_fraction).round() as usize
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub alpha0: f64,
    pub plan: TrainBatchPlan,
    pub lr: f64,
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub variance_reduced: bool,
    pub unconsumed: UnconsumedRows,
}

impl TrainConfig {
    pub fn new(variant: Variant, alpha0: f64, plan: TrainBatchPlan) -> Self {
        Self {
            variant,
            alpha0,
            plan,
            lr: 3e-4,
            warmup: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            variance_reduced: false,
            unconsumed: UnconsumedRows::Extra,
        }
    }

    /// Linear warmup to `lr`, then constant.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup as f64).min(1.0)
        }
    }
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Params,
    v: Params,
    t: u64,
}

impl AdamW {
    pub fn new(params: &Params) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut Params, grads: &Params, cfg: &TrainConfig, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let tensors = params.tensors_mut().into_iter().zip(grads.tensors());
        let moments = self.m.tensors_mut().into_iter().zip(self.v.tensors_mut());
        for ((p, g), (m, v)) in tensors.zip(moments) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * gi;
                v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= lr * (mh / (vh.sqrt() + cfg.eps) + cfg.weight_decay * p.data[i]);
            }
        }
    }
}

/// Per-token losses from one training step.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct StepStats {
    pub step: u64,
    pub ar_loss: f64,
    pub mdm_loss: f64,
    pub nelbo: f64,
    pub ar_examples: usize,
    pub mdm_examples: usize,
}

/// Owns the model and optimizer; each step draws its randomness from a
/// sub-tree keyed by the step number, so runs are reproducible.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Denoiser,
    pub config: TrainConfig,
    opt: AdamW,
    step: u64,
    seeds: SeedTree,
}

impl Trainer {
    pub fn new(model: Denoiser, config: TrainConfig, seed: u64) -> Result<Self> {
        LogLinearSchedule::new(config.alpha0)?;
        let opt = AdamW::new(model.params());
        Ok(Self {
            model,
            config,
            opt,
            step: 0,
            seeds: SeedTree::new(seed),
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One optimizer step on `mean AR + mean MDM`, both per token. The first
    /// `plan.mdm_count(alpha0)` examples take the MDM term.
    pub fn train_step(&mut self, batch: &[Vec<TokenId>]) -> Result<StepStats> {
        let cfg = &self.config;
        if batch.len() != cfg.plan.batch_size {
            return Err(Error::LengthMismatch {
                expected: cfg.plan.batch_size,
                got: batch.len(),
            });
        }
        let schedule = LogLinearSchedule::new(cfg.alpha0)?;
        let vocab = self.model.config().vocab;
        let tree = self.seeds.child("step", self.step);
        let mut mask_rng = tree.stream(streams::MASKING);
        let mut order_rng = tree.stream(streams::ORDERINGS);
        let mut time_rng = tree.stream(streams::TIMES);

        let n_mdm = cfg.plan.mdm_count(cfg.alpha0);
        let n_ar = batch.len() - n_mdm;
        let times = if n_mdm > 0 {
            low_discrepancy_times(n_mdm, &mut time_rng)?
        } else {
            Vec::new()
        };

        let mut grads = self.model.params().zeros_like();
        let (mut ar_sum, mut mdm_sum) = (0.0, 0.0);
        for (i, x) in batch.iter().enumerate() {
            let len = x.len() as f64;
            if i < n_mdm {
                let t = times[i].max(MIN_TIME);
                let z = forward_mask(x, vocab, schedule.alpha(t)?, &mut mask_rng)?;
                let sigma = sample_diffusion_ordering(&z.clean_indices(), &z.mask_indices(), &mut order_rng)?;
                let scale = 1.0 / (n_mdm as f64 * len);
                let (loss, g) = mdm_loss_grad(
                    &self.model,
                    x,
                    &z,
                    t,
                    &schedule,
                    cfg.variant,
                    &sigma,
                    cfg.variance_reduced,
                    scale,
                )?;
                mdm_sum += loss / len;
                grads.add_assign(&g);
            } else {
                let z = forward_mask(x, vocab, cfg.alpha0, &mut mask_rng)?;
                let sigma = sample_sequential_ordering(&z.clean_indices(), &z.mask_indices(), &mut order_rng)?;
                let scale = 1.0 / (n_ar as f64 * len);
                let (loss, g) = ar_loss_grad(&self.model, x, &z, cfg.variant, &sigma, cfg.unconsumed, scale)?;
                ar_sum += loss / len;
                grads.add_assign(&g);
            }
        }
        let ar = if n_ar > 0 { ar_sum / n_ar as f64 } else { 0.0 };
        let mdm = if n_mdm > 0 { mdm_sum / n_mdm as f64 } else { 0.0 };
        let finite_grads = grads.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()));
        if !ar.is_finite() || !mdm.is_finite() || !finite_grads {
            return Err(Error::Divergence {
                step: self.step,
                ar,
                mdm,
            });
        }
        let lr = cfg.lr_at(self.step);
        self.opt.update(self.model.params_mut(), &grads, cfg, lr);
        let stats = StepStats {
            step: self.step,
            ar_loss: ar,
            mdm_loss: mdm,
            nelbo: ar + mdm,
            ar_examples: n_ar,
            mdm_examples: n_mdm,
        };
        self.step += 1;
        Ok(stats)
    }
}

/// Likelihood bound over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct EvalReport {
    /// `exp` of the per-token bound.
    pub perplexity: f64,
    pub nelbo_per_token: f64,
    pub ar_per_token: f64,
    pub mdm_per_token: f64,
    pub examples: usize,
    pub tokens: usize,
}

/// Single-sample bound per example.
///
/// The MDM term draws one `t` per example from the stratified sampler and
/// masks with one position forced, so `alpha0 * L * mean_masked_nll` is an
/// unbiased estimate of the time integral. The AR term uses the same forced
/// masking at keep-probability `alpha0`, estimating
/// `(1 - alpha0) * L * mean_masked_nll`. A model with uniform logits yields
/// exactly `log K` per token from both.
pub fn eval_nelbo(
    model: &Denoiser,
    dataset: &[Vec<TokenId>],
    alpha0: f64,
    variant: Variant,
    seed: u64,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let schedule = LogLinearSchedule::new(alpha0)?;
    let vocab: Vocab = model.config().vocab;
    let tree = SeedTree::new(seed);
    let times = low_discrepancy_times(dataset.len(), &mut tree.stream(streams::TIMES))?;
    let mut mask_rng = tree.stream(streams::MASKING);
    let mut order_rng = tree.stream(streams::ORDERINGS);

    let (mut ar_total, mut mdm_total, mut tokens) = (0.0, 0.0, 0usize);
    for (x, &t) in dataset.iter().zip(&times) {
        if x.is_empty() {
            return Err(Error::Empty("evaluation sequence"));
        }
        let len = x.len() as f64;
        tokens += x.len();
        if alpha0 > 0.0 {
            let t = t.max(MIN_TIME);
            let z = forward_mask_size_biased(x, vocab, schedule.alpha(t)?, &mut mask_rng)?;
            let (clean, mask) = (z.clean_indices(), z.mask_indices());
            let sigma = sample_diffusion_ordering(&clean, &mask, &mut order_rng)?;
            let nll = mdm_nll(model, x, &z, variant, &sigma)?;
            mdm_total += alpha0 * len * nll / mask.len() as f64;
        }
        if alpha0 < 1.0 {
            let z = forward_mask_size_biased(x, vocab, alpha0, &mut mask_rng)?;
            let (clean, mask) = (z.clean_indices(), z.mask_indices());
            let sigma = sample_sequential_ordering(&clean, &mask, &mut order_rng)?;
            let nll = ar_loss(model, x, &z, variant, &sigma, UnconsumedRows::Extra)?;
            ar_total += (1.0 - alpha0) * len * nll / mask.len() as f64;
        }
    }
    let n = tokens as f64;
    let nelbo = (ar_total + mdm_total) / n;
    Ok(EvalReport {
        perplexity: nelbo.exp(),
        nelbo_per_token: nelbo,
        ar_per_token: ar_total / n,
        mdm_per_token: mdm_total / n,
        examples: dataset.len(),
        tokens,
    })
}

/// Independent reference for the AR term: one ordinary `L`-length pass per
/// masked position `l` over `z0` with every masked position before `l`
/// replaced by its clean token.
pub mod oracle {
    use super::*;

    pub fn ar_loss_by_substitution(
        model: &Denoiser,
        x: &[TokenId],
        z0: &MaskedSequence,
        variant: Variant,
        sigma: &Ordering,
    ) -> Result<f64> {
        check_len(x, z0)?;
        let len = x.len();
        let masked = z0.mask_indices();
        let positions: Vec<usize> = (0..len).collect();
        let mut total = 0.0;
        for &l in &masked {
            let mut tokens = z0.tokens().to_vec();
            for &j in masked.iter().filter(|&&j| j < l) {
                tokens[j] = x[j];
            }
            let substituted = |j: usize| z0.is_masked(j) && j < l;
            let bias = AttentionBias::from_fn(len, |i, j| {
                if i == l {
                    j == l || !z0.is_masked(j) || substituted(j)
                } else if substituted(i) {
                    !z0.is_masked(j) || (substituted(j) && j <= i)
                } else if !z0.is_masked(i) {
                    !z0.is_masked(j)
                        && match variant {
                            Variant::A => true,
                            Variant::B => sigma.rank(i) >= sigma.rank(j),
                        }
                } else {
                    false
                }
            });
            let logits = model.forward(&tokens, &positions, &bias)?;
            total += weighted_cross_entropy(&logits, &[(l, x[l], 1.0)]).0;
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DenoiserConfig;
    use crate::rng::seeded;

    fn vocab() -> Vocab {
        Vocab::new(6, 4).unwrap()
    }

    fn model(zero_head: bool) -> Denoiser {
        let cfg = DenoiserConfig {
            layers: 1,
            model_dim: 8,
            heads: 2,
            vocab: vocab(),
            max_positions: 16,
            position_encoding: crate::model::PositionEncoding::Rotary,
        };
        Denoiser::init(cfg, 0.3, zero_head, &mut seeded(2)).unwrap()
    }

    #[test]
    fn endpoint_terms_vanish() {
        let m = model(false);
        let x = [0, 1, 2, 3, 0];
        let sch1 = LogLinearSchedule::new(1.0).unwrap();
        let z0 = MaskedSequence::new(x.to_vec(), vocab()).unwrap();
        let id = Ordering::identity(5);
        assert_eq!(ar_loss(&m, &x, &z0, Variant::B, &id, UnconsumedRows::Extra).unwrap(), 0.0);
        let sch0 = LogLinearSchedule::new(0.0).unwrap();
        let zt = MaskedSequence::new(vec![5; 5], vocab()).unwrap();
        assert_eq!(mdm_loss(&m, &x, &zt, 0.4, &sch0, Variant::A, &id, false).unwrap(), 0.0);
        let clean = MaskedSequence::new(x.to_vec(), vocab()).unwrap();
        assert_eq!(mdm_loss(&m, &x, &clean, 0.4, &sch1, Variant::A, &id, false).unwrap(), 0.0);
    }

    #[test]
    fn single_masked_token_is_plain_nll() {
        let m = model(false);
        let z0 = MaskedSequence::new(vec![5], vocab()).unwrap();
        let got = ar_loss(&m, &[2], &z0, Variant::B, &Ordering::identity(1), UnconsumedRows::Extra).unwrap();
        let logits = m.forward(&[5], &[0], &AttentionBias::full(1)).unwrap();
        let expected = -crate::model::ops::log_softmax(logits.row(0))[2];
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn uniform_model_gives_log_k_per_masked_token() {
        let m = model(true);
        let sch = LogLinearSchedule::new(1.0).unwrap();
        let x = [0, 1, 2, 3, 0, 1];
        let z = MaskedSequence::new(vec![0, 5, 2, 5, 5, 1], vocab()).unwrap();
        let sigma = Ordering::from_perm(vec![0, 2, 5, 4, 1, 3]).unwrap();
        let l = mdm_loss(&m, &x, &z, 0.3, &sch, Variant::A, &sigma, true).unwrap();
        assert!((l / 3.0 - (6f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn plan_split() {
        let p = TrainBatchPlan::new(8, 0.5).unwrap();
        assert_eq!(p.mdm_count(0.5), 4);
        assert_eq!(p.mdm_count(1.0), 8);
        assert_eq!(p.mdm_count(0.0), 0);
        assert_eq!(TrainBatchPlan::new(8, 0.125).unwrap().mdm_count(0.3), 1);
        assert!(TrainBatchPlan::new(8, 1.5).is_err());
    }

    #[test]
    fn train_steps_are_reproducible() {
        let batch = vec![vec![0, 1, 2, 3]; 4];
        let cfg = TrainConfig::new(Variant::B, 0.5, TrainBatchPlan::new(4, 0.5).unwrap());
        let mut a = Trainer::new(model(false), cfg.clone(), 11).unwrap();
        let mut b = Trainer::new(model(false), cfg, 11).unwrap();
        for _ in 0..2 {
            assert_eq!(a.train_step(&batch).unwrap(), b.train_step(&batch).unwrap());
        }
        assert_eq!(a.model.params(), b.model.params());
    }

    #[test]
    fn uniform_model_perplexity_is_k() {
        let m = model(true);
        let data = vec![vec![0, 1, 2, 3, 0, 1, 2, 3]; 5];
        for &a0 in &[0.0, 0.3, 1.0] {
            let r = eval_nelbo(&m, &data, a0, Variant::B, 4).unwrap();
            assert!((r.perplexity - 6.0).abs() / 6.0 < 1e-9, "{r:?}");
        }
        assert!(eval_nelbo(&m, &[], 0.5, Variant::A, 0).is_err());
    }
}
