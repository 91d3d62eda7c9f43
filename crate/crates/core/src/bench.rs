//! Closed-form cost accounting and measured counters.
//!
//! Costs are counted as query rows fed to the denoiser and permitted
//! (query, key) pairs, summed over every step. Both follow from the schedule
//! alone, so the predictions below must match the executor counters exactly.

use serde::{Deserialize, Serialize};

use crate::model::Denoiser;
use crate::rng::seeded;
use crate::sampler::{generate, DenoisingSchedule, Executor, GenerationStats, SamplerConfig};
use crate::{Error, Result, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    /// Full bidirectional pass over all `L` positions per step.
    MdlmFullPass,
    /// Variant A, every active position recomputed per step.
    EsolmA,
    /// Variant B, every active position recomputed per step.
    EsolmB,
    /// Variant A with the sequential phase cached.
    EsolmACached,
    /// Variant B cached in both phases.
    EsolmBCached,
}

impl CostMode {
    pub const ALL: [CostMode; 5] = [
        CostMode::MdlmFullPass,
        CostMode::EsolmA,
        CostMode::EsolmB,
        CostMode::EsolmACached,
        CostMode::EsolmBCached,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CostMode::MdlmFullPass => "mdlm_full_pass",
            CostMode::EsolmA => "esolm_a",
            CostMode::EsolmB => "esolm_b",
            CostMode::EsolmACached => "esolm_a_cached",
            CostMode::EsolmBCached => "esolm_b_cached",
        }
    }

    /// Executor and variant that realize this mode.
    pub fn sampler(&self) -> (Variant, Executor) {
        match self {
            CostMode::MdlmFullPass => (Variant::B, Executor::FullPass),
            CostMode::EsolmA => (Variant::A, Executor::Reference),
            CostMode::EsolmB => (Variant::B, Executor::Reference),
            CostMode::EsolmACached => (Variant::A, Executor::Cached),
            CostMode::EsolmBCached => (Variant::B, Executor::Cached),
        }
    }
}

impl std::str::FromStr for CostMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CostMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown bench mode `{s}`")))
    }
}

impl std::fmt::Display for CostMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Costs {
    pub query_tokens: u64,
    pub attention_pairs: u64,
}

fn tri(n: u64) -> u64 {
    n * (n + 1) / 2
}

/// Per-step sizes: decoded diffusion positions, decoded sequential
/// positions, and the step's own size.
fn step_sizes(schedule: &DenoisingSchedule) -> Vec<(u64, u64, u64)> {
    let m = schedule.mdm_steps();
    let (mut dm, mut da) = (0u64, 0u64);
    schedule
        .steps()
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let out = (dm, da, s.len() as u64);
            if k < m {
                dm += s.len() as u64;
            } else {
                da += s.len() as u64;
            }
            out
        })
        .collect()
}

/// Costs of one uncached step over `D^MDM ∪ D^AR ∪ S_k`.
fn uncached_step(variant: Variant, dm: u64, da: u64, s: u64) -> Costs {
    let mdm_rows = match variant {
        Variant::A => dm * dm,
        Variant::B => tri(dm),
    };
    Costs {
        query_tokens: dm + da + s,
        attention_pairs: mdm_rows + da * dm + tri(da) + s * (dm + da) + tri(s),
    }
}

pub fn predict_costs(mode: CostMode, schedule: &DenoisingSchedule) -> Costs {
    let len = schedule.len() as u64;
    let nfe = schedule.nfe() as u64;
    let sizes = step_sizes(schedule);
    let mut c = Costs::default();
    let mut add = |x: Costs| {
        c.query_tokens += x.query_tokens;
        c.attention_pairs += x.attention_pairs;
    };
    match mode {
        CostMode::MdlmFullPass => add(Costs {
            query_tokens: nfe * len,
            attention_pairs: nfe * len * len,
        }),
        CostMode::EsolmA | CostMode::EsolmB => {
            let variant = if mode == CostMode::EsolmA { Variant::A } else { Variant::B };
            for &(dm, da, s) in &sizes {
                add(uncached_step(variant, dm, da, s));
            }
        }
        CostMode::EsolmBCached => {
            // Every fed row attends exactly its rank in sigma. At step k the
            // previous step's rows (rebuilt for the cache) hold ranks
            // |D_{k-1}| + 1 ..= |D_k| and the step's own rows |D_k| + 1 ..= |D_k| + s.
            let mut prev: Option<(u64, u64)> = None; // (|D_{k-1}|, |S_{k-1}|)
            for &(dm, da, s) in &sizes {
                let d = dm + da;
                if let Some((dp, sp)) = prev {
                    add(Costs {
                        query_tokens: sp,
                        attention_pairs: sp * dp + tri(sp),
                    });
                }
                add(Costs {
                    query_tokens: s,
                    attention_pairs: s * d + tri(s),
                });
                prev = Some((d, s));
            }
        }
        CostMode::EsolmACached => {
            let m = schedule.mdm_steps();
            let n_mdm = schedule.n_mdm() as u64;
            for (k, &(dm, da, s)) in sizes.iter().enumerate() {
                if k < m {
                    add(uncached_step(Variant::A, dm, da, s));
                } else if k == m {
                    // all diffusion outputs plus the first singleton
                    add(Costs {
                        query_tokens: n_mdm + 1,
                        attention_pairs: n_mdm * n_mdm + n_mdm + 1,
                    });
                } else {
                    // rebuilt previous singleton plus the new one
                    add(Costs {
                        query_tokens: 2,
                        attention_pairs: (n_mdm + da) + (n_mdm + da + 1),
                    });
                }
            }
        }
    }
    c
}

/// Permitted pairs whose key is read from the cache rather than fed.
pub fn predict_cache_hits(mode: CostMode, schedule: &DenoisingSchedule) -> u64 {
    let sizes = step_sizes(schedule);
    match mode {
        CostMode::MdlmFullPass | CostMode::EsolmA | CostMode::EsolmB => 0,
        CostMode::EsolmBCached => {
            // Each fed row at step k sees all of D_{k-1} through the cache.
            let mut hits = 0;
            for k in 1..sizes.len() {
                let (dm, da, sp) = sizes[k - 1];
                hits += (sp + sizes[k].2) * (dm + da);
            }
            hits
        }
        CostMode::EsolmACached => {
            let m = schedule.mdm_steps();
            let n_mdm = schedule.n_mdm() as u64;
            sizes
                .iter()
                .enumerate()
                .skip(m + 1)
                .map(|(_, &(_, da, _))| 2 * (n_mdm + da - 1))
                .sum()
        }
    }
}

/// Counters from one run plus wall-clock spread over all repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub mode: CostMode,
    pub len: usize,
    pub nfe: u64,
    pub query_tokens: u64,
    pub attention_pairs: u64,
    pub cache_hits: u64,
    pub wall_median_s: f64,
    pub wall_std_s: f64,
}

impl Measurement {
    pub const CSV_HEADER: &'static str = "mode,L,T,alpha0,nfe,query_tokens,attention_pairs,wall_median_s,wall_std_s";

    pub fn csv_row(&self, t_steps: usize, alpha0: f64) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.6},{:.6}",
            self.mode, self.len, t_steps, alpha0, self.nfe, self.query_tokens, self.attention_pairs, self.wall_median_s, self.wall_std_s
        )
    }
}

/// Median and population standard deviation.
pub fn median_std(samples: &[f64]) -> (f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0);
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
    let mean = s.iter().sum::<f64>() / n as f64;
    let var = s.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    (median, var.sqrt())
}

/// Runs `repeats` generations of `schedule` with the mode's executor. Every
/// repeat uses the same sampling seed, so counters are identical across runs.
pub fn measure(model: &Denoiser, schedule: &DenoisingSchedule, mode: CostMode, repeats: usize, seed: u64) -> Result<Measurement> {
    if repeats == 0 {
        return Err(Error::Config("bench needs at least one repeat".into()));
    }
    let (variant, executor) = mode.sampler();
    let cfg = SamplerConfig::new(variant, executor);
    let mut walls = Vec::with_capacity(repeats);
    let mut first: Option<GenerationStats> = None;
    for _ in 0..repeats {
        let g = generate(model, schedule, &cfg, &mut seeded(seed))?;
        walls.push(g.stats.wall_seconds);
        first.get_or_insert(g.stats);
    }
    let stats = first.expect("at least one repeat");
    let (wall_median_s, wall_std_s) = median_std(&walls);
    Ok(Measurement {
        mode,
        len: schedule.len(),
        nfe: stats.nfe,
        query_tokens: stats.query_tokens_total,
        attention_pairs: stats.attention_pairs_total,
        cache_hits: stats.cache_hits,
        wall_median_s,
        wall_std_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn singletons(len: usize) -> DenoisingSchedule {
        let steps: Vec<Vec<usize>> = (0..len).map(|i| vec![(i * 5) % len]).collect();
        DenoisingSchedule::new(len, steps, len).unwrap()
    }

    #[test]
    fn singleton_schedule_counts() {
        let s = singletons(8);
        assert_eq!(predict_costs(CostMode::MdlmFullPass, &s).attention_pairs, 512);
        let b = predict_costs(CostMode::EsolmBCached, &s);
        assert_eq!(b.attention_pairs, 64);
        assert!(b.attention_pairs <= 72);
        assert_eq!(b.query_tokens, 15);
    }

    #[test]
    fn length_one_costs_one() {
        let s = DenoisingSchedule::new(1, vec![vec![0]], 1).unwrap();
        for mode in CostMode::ALL {
            assert_eq!(
                predict_costs(mode, &s),
                Costs {
                    query_tokens: 1,
                    attention_pairs: 1
                },
                "{mode}"
            );
        }
    }

    #[test]
    fn pure_sequential_cached_queries() {
        let s = DenoisingSchedule::new(6, (0..6).map(|i| vec![i]).collect(), 0).unwrap();
        assert_eq!(predict_costs(CostMode::EsolmBCached, &s).query_tokens, 11);
        assert_eq!(predict_costs(CostMode::EsolmACached, &s).query_tokens, 11);
    }

    #[test]
    fn query_ordering_between_modes() {
        let s = DenoisingSchedule::from_draws(8, &[2, 1, 2], &[2, 0, 5, 3, 6]).unwrap();
        let q = |m| predict_costs(m, &s).query_tokens;
        assert!(q(CostMode::EsolmBCached) <= q(CostMode::EsolmA));
        assert!(q(CostMode::EsolmA) <= q(CostMode::MdlmFullPass));
    }

    #[test]
    fn median_and_std() {
        assert_eq!(median_std(&[3.0, 1.0, 2.0]).0, 2.0);
        assert_eq!(median_std(&[1.0, 1.0]).1, 0.0);
    }
}
