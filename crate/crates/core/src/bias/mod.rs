//! Attention biases for training and sampling.
//!
//! A bias is stored as one bit-set per query row: a set bit permits attention
//! (additive bias 0), a clear bit blocks it (`-inf`). The dense float form is
//! never materialized; the denoiser walks the permitted columns directly.
//!
//! All index arguments are 0-based positions. Training biases index rows and
//! columns by position (`L x L`) or by slot in `z ⊕ x` (`2L x 2L`, second half
//! offset by `L`). Sampling biases are compacted to the active positions
//! `D^MDM ∪ D^AR ∪ S_k`, sorted ascending; [`SamplingBias::positions`] maps a
//! compact index back to its original position.

pub mod oracle;

use std::fmt::Write as _;

use crate::ordering::{partition_flags, Ordering};
use crate::{Error, Result, Variant};

#[derive(Clone, PartialEq, Eq)]
pub struct AttentionBias {
    side: usize,
    words: usize,
    bits: Vec<u64>,
}

impl std::fmt::Debug for AttentionBias {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "AttentionBias({}x{})", self.side, self.side)?;
        for r in 0..self.side {
            let row: String = (0..self.side).map(|c| if self.permits(r, c) { '#' } else { '.' }).collect();
            writeln!(f, "{row}")?;
        }
        Ok(())
    }
}

impl AttentionBias {
    /// A `side x side` bias with every entry blocked.
    pub fn blocked(side: usize) -> Self {
        let words = side.div_ceil(64);
        Self {
            side,
            words,
            bits: vec![0; side * words],
        }
    }

    /// A fully bidirectional bias.
    pub fn full(side: usize) -> Self {
        let mut b = Self::blocked(side);
        for r in 0..side {
            for c in 0..side {
                b.set(r, c, true);
            }
        }
        b
    }

    /// Lower-triangular bias including the diagonal.
    pub fn causal(side: usize) -> Self {
        let mut b = Self::blocked(side);
        for r in 0..side {
            for c in 0..=r {
                b.set(r, c, true);
            }
        }
        b
    }

    pub fn from_fn(side: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut b = Self::blocked(side);
        for r in 0..side {
            for c in 0..side {
                if f(r, c) {
                    b.set(r, c, true);
                }
            }
        }
        b
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn permits(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.words + col / 64] >> (col % 64) & 1 == 1
    }

    pub fn set(&mut self, row: usize, col: usize, permit: bool) {
        let w = &mut self.bits[row * self.words + col / 64];
        if permit {
            *w |= 1 << (col % 64);
        } else {
            *w &= !(1 << (col % 64));
        }
    }

    /// Permitted columns of `row`, ascending.
    pub fn row(&self, row: usize) -> impl Iterator<Item = usize> + '_ {
        let words = &self.bits[row * self.words..(row + 1) * self.words];
        words.iter().enumerate().flat_map(|(w, &bits)| {
            let mut bits = bits;
            std::iter::from_fn(move || {
                if bits == 0 {
                    return None;
                }
                let tz = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(w * 64 + tz)
            })
        })
    }

    pub fn row_count(&self, row: usize) -> usize {
        self.bits[row * self.words..(row + 1) * self.words]
            .iter()
            .map(|w| w.count_ones() as usize)
            .sum()
    }

    /// Total number of permitted entries.
    pub fn count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// The `{0, -inf}` additive matrix, row-major.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![f64::NEG_INFINITY; self.side * self.side];
        for r in 0..self.side {
            for c in self.row(r) {
                out[r * self.side + c] = 0.0;
            }
        }
        out
    }

    /// Text grid, one line per row: `label grid` with `#` for permit and `.` for block.
    pub fn render(&self, labels: &[String]) -> String {
        let width = labels.iter().map(String::len).max().unwrap_or(0);
        let mut out = String::new();
        for r in 0..self.side {
            let label = labels.get(r).map(String::as_str).unwrap_or("");
            let _ = write!(out, "{label:>width$} ");
            for c in 0..self.side {
                out.push(if self.permits(r, c) { '#' } else { '.' });
            }
            out.push('\n');
        }
        out
    }
}

/// What to do with rows whose outputs nothing downstream reads (clean tokens
/// of the `z_0` half in sequential-phase training).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnconsumedRows {
    /// Self plus the same keys as the token's `x`-half twin, which makes the
    /// per-block sorted view patterned.
    #[default]
    Extra,
    /// Leave the rows empty.
    Blocked,
}

/// How [`sorted_view`] permutes a bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockStructure {
    /// One `L x L` matrix.
    None,
    /// Four `L x L` blocks, each permuted independently.
    Quad,
}

fn check_clean_first(sigma: &Ordering, clean: &[usize], mask: &[usize]) -> Result<()> {
    if !sigma.is_clean_first(clean, mask) {
        return Err(Error::OrderingConstraint { constraint: "clean-first" });
    }
    Ok(())
}

fn check_len(sigma: &Ordering, len: usize) -> Result<()> {
    if sigma.len() != len {
        return Err(Error::LengthMismatch {
            expected: len,
            got: sigma.len(),
        });
    }
    Ok(())
}

/// Variant A, diffusion-phase training (`L x L`): clean tokens attend all
/// clean tokens; a mask token attends every position at or before it in `sigma`.
pub fn bias_a_diffusion_train(clean: &[usize], mask: &[usize], sigma: &Ordering) -> Result<AttentionBias> {
    let is_mask = partition_flags(clean, mask)?;
    check_len(sigma, is_mask.len())?;
    check_clean_first(sigma, clean, mask)?;
    Ok(AttentionBias::from_fn(is_mask.len(), |i, j| {
        if is_mask[i] {
            sigma.rank(i) >= sigma.rank(j)
        } else {
            !is_mask[j]
        }
    }))
}

/// Variant B, diffusion-phase training (`L x L`): causal along `sigma`.
pub fn bias_b_diffusion_train(sigma: &Ordering) -> Result<AttentionBias> {
    Ok(AttentionBias::from_fn(sigma.len(), |i, j| sigma.rank(i) >= sigma.rank(j)))
}

/// Variant A, sequential-phase training on `z_0 ⊕ x` (`2L x 2L`).
pub fn bias_a_sequential_train(clean: &[usize], mask: &[usize], unconsumed: UnconsumedRows) -> Result<AttentionBias> {
    let is_mask = partition_flags(clean, mask)?;
    Ok(sequential_train(&is_mask, unconsumed, |_, _| true))
}

/// Variant B, sequential-phase training: as variant A but the clean block of
/// the `x` half is causal along `sigma`.
pub fn bias_b_sequential_train(
    clean: &[usize],
    mask: &[usize],
    sigma: &Ordering,
    unconsumed: UnconsumedRows,
) -> Result<AttentionBias> {
    let is_mask = partition_flags(clean, mask)?;
    check_len(sigma, is_mask.len())?;
    check_clean_first(sigma, clean, mask)?;
    if !sigma.has_natural_masks(mask) {
        return Err(Error::OrderingConstraint { constraint: "masks-natural" });
    }
    Ok(sequential_train(&is_mask, unconsumed, |i, j| sigma.rank(i) >= sigma.rank(j)))
}

fn sequential_train(
    is_mask: &[bool],
    unconsumed: UnconsumedRows,
    clean_pair: impl Fn(usize, usize) -> bool,
) -> AttentionBias {
    let len = is_mask.len();
    let mut b = AttentionBias::blocked(2 * len);
    // x half
    for i in 0..len {
        for j in 0..len {
            let permit = match (is_mask[i], is_mask[j]) {
                (false, false) => clean_pair(i, j),
                (true, false) => true,
                (true, true) => i >= j,
                (false, true) => false,
            };
            if permit {
                b.set(i + len, j + len, true);
            }
        }
    }
    // z_0 half
    for i in 0..len {
        if is_mask[i] {
            b.set(i, i, true);
            for (j, &masked) in is_mask.iter().enumerate() {
                if !masked || i > j {
                    b.set(i, j + len, true);
                }
            }
        } else if unconsumed == UnconsumedRows::Extra {
            b.set(i, i, true);
            for j in 0..len {
                if b.permits(i + len, j + len) {
                    b.set(i, j + len, true);
                }
            }
        }
    }
    b
}

/// Role of a position at one sampling step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Absent,
    Mdm,
    Ar,
    Step,
}

/// Row-level view of a sampling-step bias over original positions.
///
/// Building rows one at a time is what lets the cached executor compute only
/// the rows of the tokens it actually feeds.
#[derive(Debug, Clone)]
pub struct SamplingLayout<'a> {
    variant: Variant,
    sigma: &'a Ordering,
    roles: Vec<Role>,
    active: Vec<usize>,
}

impl<'a> SamplingLayout<'a> {
    pub fn new(
        variant: Variant,
        d_mdm: &[usize],
        d_ar: &[usize],
        s_k: &[usize],
        sigma: &'a Ordering,
    ) -> Result<Self> {
        let len = sigma.len();
        let mut roles = vec![Role::Absent; len];
        for (set, role) in [(d_mdm, Role::Mdm), (d_ar, Role::Ar), (s_k, Role::Step)] {
            for &i in set {
                if i >= len {
                    return Err(Error::LengthMismatch { expected: len, got: i + 1 });
                }
                if roles[i] != Role::Absent {
                    return Err(Error::NotDisjoint { position: i + 1 });
                }
                roles[i] = role;
            }
        }
        let active = (0..len).filter(|&i| roles[i] != Role::Absent).collect();
        Ok(Self {
            variant,
            sigma,
            roles,
            active,
        })
    }

    /// Active positions, ascending.
    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.roles[i] != Role::Absent
    }

    pub fn permits(&self, i: usize, j: usize) -> bool {
        let r = |p: usize| self.sigma.rank(p);
        match (self.roles[i], self.roles[j]) {
            (Role::Mdm, Role::Mdm) => match self.variant {
                Variant::A => true,
                Variant::B => r(i) >= r(j),
            },
            (Role::Ar, Role::Mdm) => true,
            (Role::Ar, Role::Ar) => i >= j,
            (Role::Step, Role::Mdm | Role::Ar) => true,
            (Role::Step, Role::Step) => r(i) >= r(j),
            _ => false,
        }
    }

    /// Permitted original positions for query position `i`, ascending.
    pub fn row(&self, i: usize) -> Vec<usize> {
        self.active.iter().copied().filter(|&j| self.permits(i, j)).collect()
    }

    /// Compacted matrix over [`SamplingLayout::active`].
    pub fn compact(&self) -> SamplingBias {
        let n = self.active.len();
        let bias = AttentionBias::from_fn(n, |r, c| self.permits(self.active[r], self.active[c]));
        SamplingBias {
            bias,
            positions: self.active.clone(),
        }
    }
}

/// A sampling-step bias over the compacted active set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplingBias {
    pub bias: AttentionBias,
    /// Original position of each compact row/column, ascending.
    pub positions: Vec<usize>,
}

/// Variant A sampling bias at one step.
pub fn bias_a_sampling(d_mdm: &[usize], d_ar: &[usize], s_k: &[usize], sigma: &Ordering) -> Result<SamplingBias> {
    Ok(SamplingLayout::new(Variant::A, d_mdm, d_ar, s_k, sigma)?.compact())
}

/// Variant B sampling bias at one step.
pub fn bias_b_sampling(d_mdm: &[usize], d_ar: &[usize], s_k: &[usize], sigma: &Ordering) -> Result<SamplingBias> {
    Ok(SamplingLayout::new(Variant::B, d_mdm, d_ar, s_k, sigma)?.compact())
}

/// Permutes rows and columns by `sigma` (slot `k` takes item `sigma(k)`),
/// either as one block or independently within each of four blocks.
pub fn sorted_view(bias: &AttentionBias, sigma: &Ordering, blocks: BlockStructure) -> Result<AttentionBias> {
    let len = sigma.len();
    let expected = match blocks {
        BlockStructure::None => len,
        BlockStructure::Quad => 2 * len,
    };
    if bias.side() != expected {
        return Err(Error::LengthMismatch {
            expected,
            got: bias.side(),
        });
    }
    let src = |slot: usize| {
        let (block, k) = (slot / len.max(1), slot % len.max(1));
        block * len + sigma.item(k)
    };
    Ok(AttentionBias::from_fn(expected, |r, c| bias.permits(src(r), src(c))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ordering::zero_based;

    fn six_token() -> (Vec<usize>, Vec<usize>, Ordering) {
        (
            zero_based(&[1, 3, 6]),
            zero_based(&[2, 4, 5]),
            Ordering::from_one_based(&[3, 1, 6, 4, 5, 2]).unwrap(),
        )
    }

    fn row1(b: &AttentionBias, r1: usize) -> Vec<usize> {
        b.row(r1 - 1).map(|c| c + 1).collect()
    }

    #[test]
    fn bitset_rows_and_counts() {
        let mut b = AttentionBias::blocked(130);
        b.set(3, 0, true);
        b.set(3, 64, true);
        b.set(3, 129, true);
        assert_eq!(b.row(3).collect::<Vec<_>>(), vec![0, 64, 129]);
        assert_eq!(b.row_count(3), 3);
        b.set(3, 64, false);
        assert_eq!(b.count(), 2);
        assert_eq!(AttentionBias::causal(4).count(), 10);
    }

    #[test]
    fn a_diffusion_six_token_rows() {
        let (c, m, s) = six_token();
        let b = bias_a_diffusion_train(&c, &m, &s).unwrap();
        assert_eq!(row1(&b, 4), vec![1, 3, 4, 6]);
        assert_eq!(row1(&b, 5), vec![1, 3, 4, 5, 6]);
        assert_eq!(row1(&b, 2), vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn a_diffusion_degenerate_cases() {
        let s = Ordering::identity(4);
        assert_eq!(bias_a_diffusion_train(&[0, 1, 2, 3], &[], &s).unwrap(), AttentionBias::full(4));
        assert_eq!(bias_a_diffusion_train(&[], &[0, 1, 2, 3], &s).unwrap(), AttentionBias::causal(4));
        let bad = Ordering::from_one_based(&[2, 1, 3, 4]).unwrap();
        assert!(bias_a_diffusion_train(&[0], &[1, 2, 3], &bad).is_err());
    }

    #[test]
    fn b_diffusion_six_token_rows() {
        let (_, _, s) = six_token();
        let b = bias_b_diffusion_train(&s).unwrap();
        assert_eq!(row1(&b, 3), vec![3]);
        assert_eq!(row1(&b, 1), vec![1, 3]);
        assert_eq!(row1(&b, 6), vec![1, 3, 6]);
        assert_eq!(row1(&b, 4), vec![1, 3, 4, 6]);
        assert_eq!(b.count(), 21);
        assert_eq!(bias_b_diffusion_train(&Ordering::identity(5)).unwrap(), AttentionBias::causal(5));
    }

    #[test]
    fn a_sequential_six_token_rows() {
        let (c, m, _) = six_token();
        let b = bias_a_sequential_train(&c, &m, UnconsumedRows::Extra).unwrap();
        assert_eq!(row1(&b, 2), vec![2, 7, 9, 12]);
        assert_eq!(row1(&b, 4), vec![4, 7, 8, 9, 12]);
        assert_eq!(row1(&b, 5), vec![5, 7, 8, 9, 10, 12]);
    }

    #[test]
    fn a_sequential_all_masked() {
        let b = bias_a_sequential_train(&[], &[0, 1, 2], UnconsumedRows::Extra).unwrap();
        for i in 0..3 {
            let expected: Vec<usize> = std::iter::once(i).chain((0..i).map(|j| j + 3)).collect();
            assert_eq!(b.row(i).collect::<Vec<_>>(), expected);
            assert_eq!(b.row(i + 3).collect::<Vec<_>>(), (3..=i + 3).collect::<Vec<_>>());
        }
    }

    #[test]
    fn a_sequential_all_clean() {
        let b = bias_a_sequential_train(&[0, 1, 2], &[], UnconsumedRows::Blocked).unwrap();
        for i in 0..3 {
            assert_eq!(b.row_count(i), 0);
            assert_eq!(b.row(i + 3).collect::<Vec<_>>(), vec![3, 4, 5]);
        }
    }

    #[test]
    fn b_sequential_six_token_rows() {
        let (c, m, _) = six_token();
        let s = Ordering::from_one_based(&[3, 1, 6, 2, 4, 5]).unwrap();
        let b = bias_b_sequential_train(&c, &m, &s, UnconsumedRows::Extra).unwrap();
        let clean_cols = |r1: usize| -> Vec<usize> {
            row1(&b, r1).into_iter().filter(|c| [7, 9, 12].contains(c)).collect()
        };
        assert_eq!(clean_cols(9), vec![9]);
        assert_eq!(clean_cols(7), vec![7, 9]);
        assert_eq!(clean_cols(12), vec![7, 9, 12]);

        let a = bias_a_sequential_train(&c, &m, UnconsumedRows::Extra).unwrap();
        for &i in &m {
            assert_eq!(a.row(i).collect::<Vec<_>>(), b.row(i).collect::<Vec<_>>());
        }
        let bad = Ordering::from_one_based(&[3, 1, 6, 4, 2, 5]).unwrap();
        assert!(bias_b_sequential_train(&c, &m, &bad, UnconsumedRows::Extra).is_err());
    }

    #[test]
    fn sampling_examples() {
        let sigma = Ordering::from_one_based(&[3, 1, 6, 4, 7, 2, 5, 8]).unwrap();
        let sb = bias_a_sampling(&zero_based(&[3, 1]), &[], &zero_based(&[6]), &sigma).unwrap();
        assert_eq!(sb.positions, zero_based(&[1, 3, 6]));
        let r = sb.positions.iter().position(|&p| p == 5).unwrap();
        assert_eq!(sb.bias.row_count(r), 3);

        let first = bias_a_sampling(&[], &[], &[4], &sigma).unwrap();
        assert_eq!(first.bias, AttentionBias::full(1));

        let sb = bias_a_sampling(&zero_based(&[3, 1, 6, 4, 7]), &zero_based(&[2]), &zero_based(&[5]), &sigma).unwrap();
        let labels = |r: usize| -> Vec<usize> { sb.bias.row(r).map(|c| sb.positions[c] + 1).collect() };
        let r2 = sb.positions.iter().position(|&p| p == 1).unwrap();
        let r5 = sb.positions.iter().position(|&p| p == 4).unwrap();
        assert_eq!(labels(r2), vec![1, 2, 3, 4, 6, 7]);
        assert_eq!(labels(r5), vec![1, 2, 3, 4, 5, 6, 7]);

        assert!(bias_a_sampling(&[0], &[0], &[1], &sigma).is_err());
    }

    #[test]
    fn b_sampling_is_causal_on_decoded_diffusion_tokens() {
        let sigma = Ordering::from_one_based(&[3, 1, 6, 4, 7, 2, 5, 8]).unwrap();
        let sb = bias_b_sampling(&zero_based(&[3, 1]), &[], &zero_based(&[6]), &sigma).unwrap();
        let labels = |p1: usize| -> Vec<usize> {
            let r = sb.positions.iter().position(|&p| p == p1 - 1).unwrap();
            sb.bias.row(r).map(|c| sb.positions[c] + 1).collect()
        };
        assert_eq!(labels(3), vec![3]);
        assert_eq!(labels(1), vec![1, 3]);
    }

    #[test]
    fn sorted_views() {
        let (c, m, s) = six_token();
        let b = bias_b_diffusion_train(&s).unwrap();
        assert_eq!(sorted_view(&b, &s, BlockStructure::None).unwrap(), AttentionBias::causal(6));

        let a = bias_a_diffusion_train(&c, &m, &s).unwrap();
        let sorted = sorted_view(&a, &s, BlockStructure::None).unwrap();
        let prefix_lm = AttentionBias::from_fn(6, |r, col| col < 3 || col <= r);
        assert_eq!(sorted, prefix_lm);

        let back = sorted_view(&sorted, &s.inverse(), BlockStructure::None).unwrap();
        assert_eq!(back, a);
        assert!(sorted_view(&a, &s, BlockStructure::Quad).is_err());
    }

    #[test]
    fn render_grid() {
        let b = AttentionBias::causal(2);
        assert_eq!(b.render(&["1".into(), "2".into()]), "1 #.\n2 ##\n");
    }
}
