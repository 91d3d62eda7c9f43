use super::{Denoiser, ExtraKv, Logits};
use crate::masking::TokenId;
use crate::{Error, Result};

/// Per-layer rotated keys and values indexed by original position.
///
/// Entries are write-once: a position present in the cache can never be fed
/// again as a new token during the same generation.
#[derive(Debug, Clone)]
pub struct KvCache {
    dim: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    present: Vec<bool>,
}

impl KvCache {
    pub fn new(model: &Denoiser, capacity: usize) -> Self {
        let cfg = model.config();
        let d = cfg.model_dim;
        Self {
            dim: d,
            keys: vec![vec![0.0; capacity * d]; cfg.layers],
            values: vec![vec![0.0; capacity * d]; cfg.layers],
            present: vec![false; capacity],
        }
    }

    pub fn contains(&self, pos: usize) -> bool {
        self.present.get(pos).copied().unwrap_or(false)
    }

    /// Cached positions, ascending.
    pub fn occupancy(&self) -> Vec<usize> {
        (0..self.present.len()).filter(|&p| self.present[p]).collect()
    }

    pub fn len(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn gather(&self, layer: usize, positions: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let mut k = Vec::with_capacity(positions.len() * d);
        let mut v = Vec::with_capacity(positions.len() * d);
        for &p in positions {
            k.extend_from_slice(&self.keys[layer][p * d..(p + 1) * d]);
            v.extend_from_slice(&self.values[layer][p * d..(p + 1) * d]);
        }
        (k, v)
    }
}

impl Denoiser {
    /// Runs only the fed tokens. `rows[i]` lists, ascending, the original
    /// positions query `i` may attend; each must be cached or fed in this
    /// call. Rows flagged in `write` have their keys and values stored.
    ///
    /// Logits equal [`Denoiser::forward`] over the union of fed and cached
    /// tokens with the same permits, bit for bit.
    pub fn forward_cached(
        &self,
        tokens: &[TokenId],
        positions: &[usize],
        rows: &[Vec<usize>],
        cache: &mut KvCache,
        write: &[bool],
    ) -> Result<Logits> {
        self.check_inputs(tokens, positions)?;
        let n = tokens.len();
        if rows.len() != n || write.len() != n {
            return Err(Error::Dimension(format!(
                "{n} fed tokens but {} rows and {} write flags",
                rows.len(),
                write.len()
            )));
        }
        let cap = cache.present.len();
        let mut slot_of: Vec<Option<usize>> = vec![None; cap];
        for (s, &p) in positions.iter().enumerate() {
            if p >= cap {
                return Err(Error::CacheCoherence(format!("position {p} beyond cache capacity {cap}")));
            }
            if cache.present[p] {
                return Err(Error::CacheCoherence(format!("position {p} is already cached")));
            }
            if slot_of[p].replace(s).is_some() {
                return Err(Error::CacheCoherence(format!("position {p} fed twice")));
            }
        }
        let mut extra_positions = Vec::new();
        let slot_rows = rows
            .iter()
            .map(|row| {
                if row.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::CacheCoherence("permitted keys must be strictly ascending".into()));
                }
                row.iter()
                    .map(|&p| {
                        if p >= cap {
                            return Err(Error::CacheCoherence(format!("key {p} beyond cache capacity")));
                        }
                        if let Some(s) = slot_of[p] {
                            return Ok(s);
                        }
                        if !cache.present[p] {
                            return Err(Error::CacheCoherence(format!(
                                "permitted key {p} is neither cached nor fed"
                            )));
                        }
                        extra_positions.push(p);
                        slot_of[p] = Some(n + extra_positions.len() - 1);
                        Ok(n + extra_positions.len() - 1)
                    })
                    .collect::<Result<Vec<usize>>>()
            })
            .collect::<Result<Vec<_>>>()?;

        let d = self.config.model_dim;
        let mut h = self.embed(tokens, positions);
        for l in 0..self.config.layers {
            let (ek, ev) = cache.gather(l, &extra_positions);
            let (out, k, v) = self.layer_forward(l, &h, positions, &slot_rows, Some(ExtraKv { k: &ek, v: &ev }), None);
            for (s, &p) in positions.iter().enumerate() {
                if write[s] {
                    cache.keys[l][p * d..(p + 1) * d].copy_from_slice(&k[s * d..(s + 1) * d]);
                    cache.values[l][p * d..(p + 1) * d].copy_from_slice(&v[s * d..(s + 1) * d]);
                }
            }
            h = out;
        }
        for (s, &p) in positions.iter().enumerate() {
            if write[s] {
                cache.present[p] = true;
            }
        }
        Ok(self.head(&h, n).0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bias::AttentionBias;
    use crate::masking::Vocab;
    use crate::model::DenoiserConfig;
    use crate::rng::seeded;

    fn model() -> Denoiser {
        let cfg = DenoiserConfig {
            layers: 2,
            model_dim: 16,
            heads: 4,
            vocab: Vocab::new(6, 4).unwrap(),
            max_positions: 16,
            position_encoding: super::super::PositionEncoding::Rotary,
        };
        Denoiser::init(cfg, 0.3, false, &mut seeded(3)).unwrap()
    }

    #[test]
    fn empty_cache_matches_forward() {
        let m = model();
        let bias = AttentionBias::from_fn(4, |i, j| j <= i || j == 2);
        let toks = [1, 5, 0, 3];
        let pos = [0, 1, 2, 3];
        let rows: Vec<Vec<usize>> = (0..4).map(|r| bias.row(r).collect()).collect();
        let mut cache = KvCache::new(&m, 16);
        let a = m.forward(&toks, &pos, &bias).unwrap();
        let b = m.forward_cached(&toks, &pos, &rows, &mut cache, &[false; 4]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn incremental_causal_decoding_is_exact() {
        let m = model();
        let toks = [2, 0, 1, 3, 3, 0];
        let full = m.forward(&toks, &[0, 1, 2, 3, 4, 5], &AttentionBias::causal(6)).unwrap();
        let mut cache = KvCache::new(&m, 16);
        for i in 0..6 {
            let row: Vec<usize> = (0..=i).collect();
            let out = m.forward_cached(&toks[i..=i], &[i], &[row], &mut cache, &[true]).unwrap();
            assert_eq!(out.row(0), full.row(i));
        }
        assert_eq!(cache.occupancy(), vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn coherence_violations_are_rejected() {
        let m = model();
        let mut cache = KvCache::new(&m, 16);
        let err = m.forward_cached(&[1], &[3], &[vec![2, 3]], &mut cache, &[true]);
        assert!(matches!(err, Err(Error::CacheCoherence(_))));
        m.forward_cached(&[1], &[3], &[vec![3]], &mut cache, &[true]).unwrap();
        let twice = m.forward_cached(&[1], &[3], &[vec![3]], &mut cache, &[true]);
        assert!(matches!(twice, Err(Error::CacheCoherence(_))));
    }
}
