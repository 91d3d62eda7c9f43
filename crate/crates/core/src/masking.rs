//! The absorbing-state forward process and sequence operators.

use rand::Rng as _;

use crate::rng::Rng;
use crate::{Error, Result};

pub type TokenId = u32;

/// Vocabulary layout: `size` ids, the last of which is the mask token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Vocab {
    size: usize,
    mask_id: TokenId,
    separator_id: TokenId,
}

impl Vocab {
    pub fn new(size: usize, separator_id: TokenId) -> Result<Self> {
        if size < 2 {
            return Err(Error::Config(format!("vocabulary needs at least 2 ids, got {size}")));
        }
        let mask_id = (size - 1) as TokenId;
        if separator_id >= mask_id {
            return Err(Error::Config(format!(
                "separator id {separator_id} must be below the mask id {mask_id}"
            )));
        }
        Ok(Self {
            size,
            mask_id,
            separator_id,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    pub fn separator_id(&self) -> TokenId {
        self.separator_id
    }
}

/// A latent `z_t`: token ids in which some positions carry the mask id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    tokens: Vec<TokenId>,
    vocab: Vocab,
}

impl MaskedSequence {
    pub fn new(tokens: Vec<TokenId>, vocab: Vocab) -> Result<Self> {
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab.size) {
            return Err(Error::Config(format!("token id {bad} outside vocabulary of {}", vocab.size)));
        }
        Ok(Self { tokens, vocab })
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.tokens[i] == self.vocab.mask_id
    }

    /// Ascending 0-based positions holding the mask token.
    pub fn mask_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_masked(i)).collect()
    }

    /// Ascending 0-based positions holding a clean token.
    pub fn clean_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_masked(i)).collect()
    }
}

fn check_clean(x: &[TokenId], vocab: Vocab) -> Result<()> {
    match x.iter().position(|&t| t == vocab.mask_id) {
        Some(position) => Err(Error::MaskInCleanSequence { position }),
        None => Ok(()),
    }
}

/// Draws `z ~ q(.|x)`: each position is kept with probability `alpha`.
pub fn forward_mask(x: &[TokenId], vocab: Vocab, alpha: f64, rng: &mut Rng) -> Result<MaskedSequence> {
    check_clean(x, vocab)?;
    let tokens = x
        .iter()
        .map(|&tok| if rng.random::<f64>() < alpha { tok } else { vocab.mask_id })
        .collect();
    MaskedSequence::new(tokens, vocab)
}

/// Size-biased variant of [`forward_mask`]: one uniformly chosen position is
/// always masked and every other position is kept with probability `alpha`.
///
/// A mask set `M` then has probability `|M| / L` times its probability under
/// [`forward_mask`] divided by `(1 - alpha)`, so `L (1 - alpha) / |M|`
/// re-weights a sum over `M` into an unbiased estimate of the same sum under
/// plain masking.
pub fn forward_mask_size_biased(x: &[TokenId], vocab: Vocab, alpha: f64, rng: &mut Rng) -> Result<MaskedSequence> {
    check_clean(x, vocab)?;
    if x.is_empty() {
        return MaskedSequence::new(Vec::new(), vocab);
    }
    let forced = rng.random_range(0..x.len());
    let tokens = x
        .iter()
        .enumerate()
        .map(|(i, &tok)| {
            let keep = rng.random::<f64>() < alpha;
            if i == forced || !keep {
                vocab.mask_id
            } else {
                tok
            }
        })
        .collect();
    MaskedSequence::new(tokens, vocab)
}

/// The reverse posterior `q_{s|t}(. | z_t, x)` for one position, as a dense
/// probability vector over the vocabulary.
pub fn reverse_posterior(
    z_t_token: TokenId,
    x_token: TokenId,
    vocab: Vocab,
    alpha_s: f64,
    alpha_t: f64,
) -> Result<Vec<f64>> {
    if alpha_s <= alpha_t {
        return Err(Error::PosteriorOrder { alpha_s, alpha_t });
    }
    let mut probs = vec![0.0; vocab.size];
    if z_t_token != vocab.mask_id {
        probs[z_t_token as usize] = 1.0;
        return Ok(probs);
    }
    let unmask = (alpha_s - alpha_t) / (1.0 - alpha_t);
    probs[x_token as usize] += unmask;
    probs[vocab.mask_id as usize] += 1.0 - unmask;
    Ok(probs)
}

/// `z ⊙ x_prefix`: overwrites the first `x_prefix.len()` positions of `z`.
pub fn substitute(z: &MaskedSequence, x_prefix: &[TokenId]) -> Result<MaskedSequence> {
    if x_prefix.len() > z.len() {
        return Err(Error::LengthMismatch {
            expected: z.len(),
            got: x_prefix.len(),
        });
    }
    check_clean(x_prefix, z.vocab)?;
    let mut tokens = z.tokens.clone();
    tokens[..x_prefix.len()].copy_from_slice(x_prefix);
    MaskedSequence::new(tokens, z.vocab)
}

/// A `2L` input `z ⊕ x` whose halves share position labels `0..L`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Concatenated {
    pub tokens: Vec<TokenId>,
    pub positions: Vec<usize>,
}

/// `z ⊕ x` with both halves carrying their original positions.
pub fn concat(z: &MaskedSequence, x: &[TokenId]) -> Result<Concatenated> {
    if z.len() != x.len() {
        return Err(Error::LengthMismatch {
            expected: z.len(),
            got: x.len(),
        });
    }
    let tokens = z.tokens.iter().chain(x).copied().collect();
    let positions = (0..z.len()).chain(0..x.len()).collect();
    Ok(Concatenated { tokens, positions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    // ids: A=0 B=1 C=2 F=3 sep=4 mask=5
    fn vocab() -> Vocab {
        Vocab::new(6, 4).unwrap()
    }
    const M: TokenId = 5;

    #[test]
    fn vocab_invariants() {
        assert!(Vocab::new(1, 0).is_err());
        assert!(Vocab::new(4, 3).is_err());
        assert_eq!(vocab().mask_id(), 5);
    }

    #[test]
    fn forward_mask_endpoints() {
        let x: Vec<TokenId> = (0..50).map(|i| i % 4).collect();
        let mut rng = seeded(1);
        assert_eq!(forward_mask(&x, vocab(), 1.0, &mut rng).unwrap().tokens(), &x[..]);
        let all = forward_mask(&x, vocab(), 0.0, &mut rng).unwrap();
        assert_eq!(all.mask_indices().len(), 50);
        assert!(matches!(
            forward_mask(&[0, M], vocab(), 0.5, &mut rng),
            Err(Error::MaskInCleanSequence { position: 1 })
        ));
    }

    #[test]
    fn forward_mask_binomial_count() {
        let x = vec![1; 10_000];
        let z = forward_mask(&x, vocab(), 0.5, &mut seeded(2)).unwrap();
        let clean = z.clean_indices().len() as i64;
        assert!((clean - 5000).abs() <= 150, "clean = {clean}");
    }

    #[test]
    fn forward_mask_mean_over_trials() {
        let (len, a, trials) = (20usize, 0.3f64, 1000usize);
        let mut rng = seeded(3);
        let total: usize = (0..trials)
            .map(|_| forward_mask(&vec![0; len], vocab(), a, &mut rng).unwrap().clean_indices().len())
            .sum();
        let mean = total as f64 / trials as f64;
        let sd_of_mean = (len as f64 * a * (1.0 - a) / trials as f64).sqrt();
        assert!((mean - len as f64 * a).abs() <= 3.0 * sd_of_mean);
    }

    #[test]
    fn size_biased_masking_always_masks_something() {
        let mut rng = seeded(4);
        for _ in 0..100 {
            let z = forward_mask_size_biased(&[0, 1, 2, 3], vocab(), 1.0, &mut rng).unwrap();
            assert_eq!(z.mask_indices().len(), 1);
        }
    }

    #[test]
    fn posterior_examples() {
        let p = reverse_posterior(2, 0, vocab(), 0.6, 0.2).unwrap();
        assert_eq!(p[2], 1.0);
        let p = reverse_posterior(M, 1, vocab(), 1.0, 0.0).unwrap();
        assert_eq!(p[1], 1.0);
        assert_eq!(p[M as usize], 0.0);
        let p = reverse_posterior(M, 1, vocab(), 0.6, 0.2).unwrap();
        assert!((p[1] - 0.5).abs() < 1e-12 && (p[M as usize] - 0.5).abs() < 1e-12);
        assert!(reverse_posterior(M, 1, vocab(), 0.2, 0.2).is_err());
        for &(s, t) in &[(0.9, 0.1), (0.31, 0.3), (1.0, 0.999)] {
            let p = reverse_posterior(M, 3, vocab(), s, t).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn substitute_examples() {
        let z = MaskedSequence::new(vec![0, M, 2, M], vocab()).unwrap();
        assert_eq!(substitute(&z, &[]).unwrap(), z);
        assert_eq!(substitute(&z, &[0, 1]).unwrap().tokens(), &[0, 1, 2, M]);
        assert_eq!(substitute(&z, &[3, 3, 3, 3]).unwrap().tokens(), &[3, 3, 3, 3]);
        assert!(substitute(&z, &[0; 5]).is_err());
        for n in 0..=4 {
            let y = substitute(&z, &[1; 4][..n]).unwrap();
            assert!(y.mask_indices().iter().all(|&i| i >= n));
        }
    }

    #[test]
    fn concat_examples() {
        let z = MaskedSequence::new(vec![M, M], vocab()).unwrap();
        let c = concat(&z, &[0, 1]).unwrap();
        assert_eq!(c.tokens, vec![M, M, 0, 1]);
        assert_eq!(c.positions, vec![0, 1, 0, 1]);

        let z6 = MaskedSequence::new(vec![M; 6], vocab()).unwrap();
        let c6 = concat(&z6, &[0; 6]).unwrap();
        assert_eq!(c6.positions[6 + 2] + 1, 3);

        let empty = MaskedSequence::new(vec![], vocab()).unwrap();
        assert!(concat(&empty, &[]).unwrap().tokens.is_empty());
        assert!(concat(&z, &[0]).is_err());
    }
}
