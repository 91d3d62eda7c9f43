//! Brute-force reference for every bias builder.
//!
//! Each entry is re-derived by evaluating the case conditions literally on
//! 1-based labels, with set membership through hash sets and ranks found by a
//! linear scan of `sigma`. Nothing here shares code with the builders.

use std::collections::HashSet;

use super::{AttentionBias, UnconsumedRows};
use crate::ordering::Ordering;

/// A builder together with the inputs it was called with (0-based positions).
#[derive(Debug, Clone)]
pub enum BiasCase {
    ADiffusionTrain {
        clean: Vec<usize>,
        mask: Vec<usize>,
        sigma: Ordering,
    },
    BDiffusionTrain {
        sigma: Ordering,
    },
    ASequentialTrain {
        clean: Vec<usize>,
        mask: Vec<usize>,
        unconsumed: UnconsumedRows,
    },
    BSequentialTrain {
        clean: Vec<usize>,
        mask: Vec<usize>,
        sigma: Ordering,
        unconsumed: UnconsumedRows,
    },
    ASampling {
        d_mdm: Vec<usize>,
        d_ar: Vec<usize>,
        s_k: Vec<usize>,
        sigma: Ordering,
    },
    BSampling {
        d_mdm: Vec<usize>,
        d_ar: Vec<usize>,
        s_k: Vec<usize>,
        sigma: Ordering,
    },
}

/// A disagreeing entry, as 0-based (row, column) of the bias under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mismatch {
    pub row: usize,
    pub col: usize,
    pub expected: bool,
}

fn labels(v: &[usize]) -> HashSet<usize> {
    v.iter().map(|&i| i + 1).collect()
}

fn sigma_labels(s: &Ordering) -> Vec<usize> {
    s.perm().iter().map(|&i| i + 1).collect()
}

/// `sigma^{-1}(i)` by scanning the tuple.
fn rank_of(sigma: &[usize], item: usize) -> usize {
    sigma.iter().position(|&x| x == item).expect("item in sigma") + 1
}

impl BiasCase {
    /// Side of the matrix this case describes.
    pub fn side(&self) -> usize {
        match self {
            BiasCase::ADiffusionTrain { clean, mask, .. } => clean.len() + mask.len(),
            BiasCase::BDiffusionTrain { sigma } => sigma.len(),
            BiasCase::ASequentialTrain { clean, mask, .. } | BiasCase::BSequentialTrain { clean, mask, .. } => {
                2 * (clean.len() + mask.len())
            }
            BiasCase::ASampling { d_mdm, d_ar, s_k, .. } | BiasCase::BSampling { d_mdm, d_ar, s_k, .. } => {
                d_mdm.len() + d_ar.len() + s_k.len()
            }
        }
    }

    /// Dense expected matrix, row-major, indexed like the builder's output.
    pub fn expected(&self) -> Vec<Vec<bool>> {
        match self {
            BiasCase::ADiffusionTrain { clean, mask, sigma } => {
                let (c, m, s) = (labels(clean), labels(mask), sigma_labels(sigma));
                let n = s.len();
                grid(n, |i, j| {
                    // clean x clean, or mask row with sigma^{-1}(i) >= sigma^{-1}(j)
                    (c.contains(&i) && c.contains(&j)) || (m.contains(&i) && rank_of(&s, i) >= rank_of(&s, j))
                })
            }
            BiasCase::BDiffusionTrain { sigma } => {
                let s = sigma_labels(sigma);
                grid(s.len(), |i, j| rank_of(&s, i) >= rank_of(&s, j))
            }
            BiasCase::ASequentialTrain { clean, mask, unconsumed } => {
                sequential(&labels(clean), &labels(mask), None, *unconsumed)
            }
            BiasCase::BSequentialTrain {
                clean,
                mask,
                sigma,
                unconsumed,
            } => sequential(&labels(clean), &labels(mask), Some(sigma_labels(sigma)), *unconsumed),
            BiasCase::ASampling { d_mdm, d_ar, s_k, sigma } => sampling(d_mdm, d_ar, s_k, sigma, false),
            BiasCase::BSampling { d_mdm, d_ar, s_k, sigma } => sampling(d_mdm, d_ar, s_k, sigma, true),
        }
    }
}

/// 1-based grid evaluation.
fn grid(n: usize, f: impl Fn(usize, usize) -> bool) -> Vec<Vec<bool>> {
    (1..=n).map(|i| (1..=n).map(|j| f(i, j)).collect()).collect()
}

fn sequential(
    c: &HashSet<usize>,
    m: &HashSet<usize>,
    sigma: Option<Vec<usize>>,
    unconsumed: UnconsumedRows,
) -> Vec<Vec<bool>> {
    let l = c.len() + m.len();
    let clean_pair = |i: usize, j: usize| match &sigma {
        None => true,
        Some(s) => rank_of(s, i) >= rank_of(s, j),
    };
    // Rows and columns are 1-based over 1..=2L; "i + L" is the x-half copy of i.
    let x_half = |r: usize, col: usize| -> bool {
        let (i, j) = (r - l, col - l);
        (c.contains(&i) && c.contains(&j) && clean_pair(i, j))
            || (m.contains(&i) && c.contains(&j))
            || (m.contains(&i) && m.contains(&j) && i >= j)
    };
    grid(2 * l, |r, col| {
        if r <= l {
            let i = r;
            if m.contains(&i) {
                (col <= l && col == i && m.contains(&col))
                    || (col > l && c.contains(&(col - l)))
                    || (col > l && m.contains(&(col - l)) && i > col - l)
            } else {
                match unconsumed {
                    UnconsumedRows::Blocked => false,
                    UnconsumedRows::Extra => col == r || (col > l && x_half(r + l, col)),
                }
            }
        } else {
            col > l && x_half(r, col)
        }
    })
}

fn sampling(d_mdm: &[usize], d_ar: &[usize], s_k: &[usize], sigma: &Ordering, causal_mdm: bool) -> Vec<Vec<bool>> {
    let (dm, da, sk) = (labels(d_mdm), labels(d_ar), labels(s_k));
    let s = sigma_labels(sigma);
    let mut active: Vec<usize> = dm.iter().chain(&da).chain(&sk).copied().collect();
    active.sort_unstable();
    active
        .iter()
        .map(|&i| {
            active
                .iter()
                .map(|&j| {
                    let mdm_pair = dm.contains(&i) && dm.contains(&j);
                    (mdm_pair && (!causal_mdm || rank_of(&s, i) >= rank_of(&s, j)))
                        || (da.contains(&i) && dm.contains(&j))
                        || (da.contains(&i) && da.contains(&j) && i >= j)
                        || (sk.contains(&i) && (dm.contains(&j) || da.contains(&j)))
                        || (sk.contains(&i) && sk.contains(&j) && rank_of(&s, i) >= rank_of(&s, j))
                })
                .collect()
        })
        .collect()
}

/// Compares `bias` entry for entry against the literal case conditions.
pub fn oracle_verify(bias: &AttentionBias, case: &BiasCase) -> std::result::Result<(), Vec<Mismatch>> {
    let expected = case.expected();
    if bias.side() != expected.len() {
        return Err(vec![Mismatch {
            row: bias.side(),
            col: expected.len(),
            expected: false,
        }]);
    }
    let mismatches: Vec<Mismatch> = expected
        .iter()
        .enumerate()
        .flat_map(|(r, row)| {
            row.iter().enumerate().filter_map(move |(c, &e)| {
                (bias.permits(r, c) != e).then_some(Mismatch {
                    row: r,
                    col: c,
                    expected: e,
                })
            })
        })
        .collect();
    if mismatches.is_empty() {
        Ok(())
    } else {
        Err(mismatches)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bias::bias_a_diffusion_train;
    use crate::ordering::zero_based;

    #[test]
    fn flipped_bit_is_reported() {
        let clean = zero_based(&[1, 3, 6]);
        let mask = zero_based(&[2, 4, 5]);
        let sigma = Ordering::from_one_based(&[3, 1, 6, 4, 5, 2]).unwrap();
        let mut b = bias_a_diffusion_train(&clean, &mask, &sigma).unwrap();
        let case = BiasCase::ADiffusionTrain { clean, mask, sigma };
        assert!(oracle_verify(&b, &case).is_ok());
        b.set(3, 1, !b.permits(3, 1));
        let err = oracle_verify(&b, &case).unwrap_err();
        assert_eq!(err.len(), 1);
        assert_eq!((err[0].row, err[0].col), (3, 1));
    }
}
