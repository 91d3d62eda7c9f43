//! The transformer denoiser: pre-norm blocks, rotary attention keyed by
//! original position, untied output head, and hand-written reverse mode.
//!
//! No timestep input. Attention is driven entirely by per-row permitted-key
//! lists, so the same weights serve every training and sampling layout.

mod cache;
pub mod checkpoint;
pub mod ops;

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};

pub use cache::KvCache;

use crate::bias::AttentionBias;
use crate::masking::{TokenId, Vocab};
use crate::rng::Rng;
use crate::{Error, Result};

use ops::NormTape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PositionEncoding {
    Rotary,
    Sinusoidal,
}

impl std::str::FromStr for PositionEncoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "rotary" => Ok(Self::Rotary),
            "sinusoidal" => Ok(Self::Sinusoidal),
            other => Err(Error::Config(format!("unknown position encoding `{other}`"))),
        }
    }
}

impl std::fmt::Display for PositionEncoding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Rotary => "rotary",
            Self::Sinusoidal => "sinusoidal",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub vocab: Vocab,
    pub max_positions: usize,
    pub position_encoding: PositionEncoding,
}

impl DenoiserConfig {
    /// Two layers, width 64, four heads.
    pub fn toy(vocab: Vocab, max_positions: usize) -> Self {
        Self {
            layers: 2,
            model_dim: 64,
            heads: 4,
            vocab,
            max_positions,
            position_encoding: PositionEncoding::Rotary,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.model_dim == 0 || self.heads == 0 {
            return Err(Error::Config("layers, model_dim and heads must be positive".into()));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.position_encoding == PositionEncoding::Rotary && !self.head_dim().is_multiple_of(2) {
            return Err(Error::Config(format!("rotary needs an even head dim, got {}", self.head_dim())));
        }
        if self.max_positions == 0 {
            return Err(Error::Config("max_positions must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        4 * self.model_dim
    }

    /// `key=value` lines, one per field, in a fixed order.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("layers".into(), self.layers.to_string()),
            ("model_dim".into(), self.model_dim.to_string()),
            ("heads".into(), self.heads.to_string()),
            ("vocab_size".into(), self.vocab.size().to_string()),
            ("separator_id".into(), self.vocab.separator_id().to_string()),
            ("max_positions".into(), self.max_positions.to_string()),
            ("position_encoding".into(), self.position_encoding.to_string()),
        ]
    }

    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
            let raw = map.get(key).ok_or_else(|| Error::Config(format!("missing model key `{key}`")))?;
            raw.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{raw}` for model key `{key}`")))
        }
        let cfg = Self {
            layers: get(map, "layers")?,
            model_dim: get(map, "model_dim")?,
            heads: get(map, "heads")?,
            vocab: Vocab::new(get(map, "vocab_size")?, get(map, "separator_id")?)?,
            max_positions: get(map, "max_positions")?,
            position_encoding: map
                .get("position_encoding")
                .ok_or_else(|| Error::Config("missing model key `position_encoding`".into()))?
                .parse()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A named dense parameter, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    fn filled(name: String, shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            name,
            shape,
            data: vec![value; n],
        }
    }

    fn normal(name: String, shape: Vec<usize>, std: f64, rng: &mut Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        Self {
            name,
            shape,
            data: (0..n).map(|_| dist.sample(rng)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// All weights. Matrices are stored `in x out`, so `y = x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tok_emb: Tensor,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl Params {
    /// Weights ~ N(0, std), norms at identity, biases zero. With `zero_head`
    /// the output layer starts at zero so every logit row is uniform.
    pub fn init(cfg: &DenoiserConfig, std: f64, zero_head: bool, rng: &mut Rng) -> Self {
        let (d, h, k) = (cfg.model_dim, cfg.hidden_dim(), cfg.vocab.size());
        let layers = (0..cfg.layers)
            .map(|l| {
                let n = |s: &str| format!("layers.{l}.{s}");
                LayerParams {
                    ln1_g: Tensor::filled(n("ln1_g"), vec![d], 1.0),
                    ln1_b: Tensor::filled(n("ln1_b"), vec![d], 0.0),
                    wq: Tensor::normal(n("wq"), vec![d, d], std, rng),
                    wk: Tensor::normal(n("wk"), vec![d, d], std, rng),
                    wv: Tensor::normal(n("wv"), vec![d, d], std, rng),
                    wo: Tensor::normal(n("wo"), vec![d, d], std, rng),
                    ln2_g: Tensor::filled(n("ln2_g"), vec![d], 1.0),
                    ln2_b: Tensor::filled(n("ln2_b"), vec![d], 0.0),
                    w1: Tensor::normal(n("w1"), vec![d, h], std, rng),
                    b1: Tensor::filled(n("b1"), vec![h], 0.0),
                    w2: Tensor::normal(n("w2"), vec![h, d], std, rng),
                    b2: Tensor::filled(n("b2"), vec![d], 0.0),
                }
            })
            .collect();
        let tok_emb = Tensor::normal("tok_emb".into(), vec![k, d], std, rng);
        let head_w = if zero_head {
            Tensor::filled("head_w".into(), vec![d, k], 0.0)
        } else {
            Tensor::normal("head_w".into(), vec![d, k], std, rng)
        };
        Self {
            tok_emb,
            layers,
            lnf_g: Tensor::filled("lnf_g".into(), vec![d], 1.0),
            lnf_b: Tensor::filled("lnf_b".into(), vec![d], 0.0),
            head_w,
            head_b: Tensor::filled("head_b".into(), vec![k], 0.0),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    /// Fixed traversal order shared by checkpointing and the optimizer.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.tok_emb];
        for l in &self.layers {
            out.extend([
                &l.ln1_g, &l.ln1_b, &l.wq, &l.wk, &l.wv, &l.wo, &l.ln2_g, &l.ln2_b, &l.w1, &l.b1, &l.w2, &l.b2,
            ]);
        }
        out.extend([&self.lnf_g, &self.lnf_b, &self.head_w, &self.head_b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_g,
                &mut l.ln1_b,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ln2_g,
                &mut l.ln2_b,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
            ]);
        }
        out.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.head_w, &mut self.head_b]);
        out
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }
}

/// `rows x vocab` unnormalized log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub rows: usize,
    pub vocab: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }
}

#[derive(Debug, Clone, Default)]
struct LayerTape {
    ln1: NormTape,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Softmax weights, indexed `head * n + row`, aligned with the row's keys.
    probs: Vec<Vec<f64>>,
    o: Vec<f64>,
    ln2: NormTape,
    b: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

/// Everything [`Denoiser::backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    tokens: Vec<TokenId>,
    positions: Vec<usize>,
    rows: Vec<Vec<usize>>,
    layers: Vec<LayerTape>,
    lnf: NormTape,
    f: Vec<f64>,
}

/// Keys and values appended after the fed rows, for the cached path.
struct ExtraKv<'a> {
    k: &'a [f64],
    v: &'a [f64],
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    params: Params,
}

impl Denoiser {
    /// Standard init with a zero output head.
    pub fn new(config: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        Self::init(config, 0.02, true, rng)
    }

    pub fn init(config: DenoiserConfig, std: f64, zero_head: bool, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, std, zero_head, rng);
        Ok(Self { config, params })
    }

    pub fn from_params(config: DenoiserConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let expected = Params::init(&config, 1.0, true, &mut crate::rng::seeded(0));
        for (e, p) in expected.tensors().iter().zip(params.tensors()) {
            if e.name != p.name || e.shape != p.shape {
                return Err(Error::Dimension(format!(
                    "parameter {} has shape {:?}, expected {} {:?}",
                    p.name, p.shape, e.name, e.shape
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn check_inputs(&self, tokens: &[TokenId], positions: &[usize]) -> Result<()> {
        if tokens.len() != positions.len() {
            return Err(Error::Dimension(format!(
                "{} tokens but {} positions",
                tokens.len(),
                positions.len()
            )));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= self.config.max_positions) {
            return Err(Error::Dimension(format!(
                "position {p} exceeds max_positions {}",
                self.config.max_positions
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab.size()) {
            return Err(Error::Dimension(format!("token id {t} outside the vocabulary")));
        }
        Ok(())
    }

    fn bias_rows(&self, bias: &AttentionBias, n: usize) -> Result<Vec<Vec<usize>>> {
        if bias.side() != n {
            return Err(Error::Dimension(format!("bias side {} for {n} tokens", bias.side())));
        }
        Ok((0..n).map(|r| bias.row(r).collect()).collect())
    }

    /// Logits for every slot under `bias`.
    pub fn forward(&self, tokens: &[TokenId], positions: &[usize], bias: &AttentionBias) -> Result<Logits> {
        Ok(self.forward_train(tokens, positions, bias)?.0)
    }

    /// [`Denoiser::forward`] plus the tape for [`Denoiser::backward`].
    pub fn forward_train(
        &self,
        tokens: &[TokenId],
        positions: &[usize],
        bias: &AttentionBias,
    ) -> Result<(Logits, Tape)> {
        self.check_inputs(tokens, positions)?;
        let rows = self.bias_rows(bias, tokens.len())?;
        let mut tape = Tape {
            tokens: tokens.to_vec(),
            positions: positions.to_vec(),
            rows,
            layers: Vec::with_capacity(self.config.layers),
            lnf: NormTape::default(),
            f: Vec::new(),
        };
        let mut h = self.embed(tokens, positions);
        for l in 0..self.config.layers {
            let mut lt = LayerTape::default();
            let (out, _, _) = self.layer_forward(l, &h, positions, &tape.rows, None, Some(&mut lt));
            h = out;
            tape.layers.push(lt);
        }
        let (logits, lnf, f) = self.head(&h, tokens.len());
        tape.lnf = lnf;
        tape.f = f;
        Ok((logits, tape))
    }

    fn embed(&self, tokens: &[TokenId], positions: &[usize]) -> Vec<f64> {
        let d = self.config.model_dim;
        let mut h = vec![0.0; tokens.len() * d];
        for (i, (&t, &p)) in tokens.iter().zip(positions).enumerate() {
            let row = &mut h[i * d..(i + 1) * d];
            row.copy_from_slice(&self.params.tok_emb.data[t as usize * d..(t as usize + 1) * d]);
            if self.config.position_encoding == PositionEncoding::Sinusoidal {
                for (x, s) in row.iter_mut().zip(ops::sinusoid(p, d)) {
                    *x += s;
                }
            }
        }
        h
    }

    fn head(&self, h: &[f64], n: usize) -> (Logits, NormTape, Vec<f64>) {
        let (d, k) = (self.config.model_dim, self.config.vocab.size());
        let p = &self.params;
        let (f, lnf) = ops::layer_norm(h, d, &p.lnf_g.data, &p.lnf_b.data);
        let data = ops::affine(&f, n, d, &p.head_w.data, &p.head_b.data);
        (
            Logits {
                rows: n,
                vocab: k,
                data,
            },
            lnf,
            f,
        )
    }

    /// One block. `rows[i]` lists key slots for query `i`; slots `>= n` index
    /// into `extra`. Returns the block output and this block's rotated keys
    /// and values for the fed rows.
    fn layer_forward(
        &self,
        l: usize,
        h: &[f64],
        positions: &[usize],
        rows: &[Vec<usize>],
        extra: Option<ExtraKv<'_>>,
        tape: Option<&mut LayerTape>,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let cfg = &self.config;
        let (d, hd, hidden) = (cfg.model_dim, cfg.head_dim(), cfg.hidden_dim());
        let n = positions.len();
        let lp = &self.params.layers[l];

        let (a, ln1) = ops::layer_norm(h, d, &lp.ln1_g.data, &lp.ln1_b.data);
        let mut q = ops::matmul(&a, n, d, &lp.wq.data, d);
        let mut k = ops::matmul(&a, n, d, &lp.wk.data, d);
        let v = ops::matmul(&a, n, d, &lp.wv.data, d);
        if cfg.position_encoding == PositionEncoding::Rotary {
            ops::rotary(&mut q, positions, d, hd, false);
            ops::rotary(&mut k, positions, d, hd, false);
        }

        let key = |slot: usize| -> &[f64] {
            if slot < n {
                &k[slot * d..(slot + 1) * d]
            } else {
                let e = extra.as_ref().expect("extra keys");
                &e.k[(slot - n) * d..(slot - n + 1) * d]
            }
        };
        let value = |slot: usize| -> &[f64] {
            if slot < n {
                &v[slot * d..(slot + 1) * d]
            } else {
                let e = extra.as_ref().expect("extra values");
                &e.v[(slot - n) * d..(slot - n + 1) * d]
            }
        };

        let scale = 1.0 / (hd as f64).sqrt();
        let mut o = vec![0.0; n * d];
        let keep_probs = tape.is_some();
        let mut all_probs = if keep_probs { vec![Vec::new(); cfg.heads * n] } else { Vec::new() };
        let mut probs = Vec::new();
        for (i, row) in rows.iter().enumerate() {
            for head in 0..cfg.heads {
                let span = head * hd..(head + 1) * hd;
                let keys = row.iter().map(|&s| (&key(s)[span.clone()], &value(s)[span.clone()]));
                ops::attend(&q[i * d + span.start..i * d + span.end], keys, scale, &mut o[i * d + span.start..i * d + span.end], &mut probs);
                if keep_probs {
                    all_probs[head * n + i] = probs.clone();
                }
            }
        }

        let mut h1 = ops::matmul(&o, n, d, &lp.wo.data, d);
        for (x, r) in h1.iter_mut().zip(h) {
            *x += r;
        }
        let (b, ln2) = ops::layer_norm(&h1, d, &lp.ln2_g.data, &lp.ln2_b.data);
        let u = ops::affine(&b, n, d, &lp.w1.data, &lp.b1.data);
        let g: Vec<f64> = u.iter().map(|&x| ops::gelu(x)).collect();
        let mut out = ops::affine(&g, n, hidden, &lp.w2.data, &lp.b2.data);
        for (x, r) in out.iter_mut().zip(&h1) {
            *x += r;
        }

        if let Some(t) = tape {
            *t = LayerTape {
                ln1,
                a,
                q,
                k: k.clone(),
                v: v.clone(),
                probs: all_probs,
                o,
                ln2,
                b,
                u,
                g,
            };
        }
        (out, k, v)
    }

    /// Reverse pass: gradients of `sum(dlogits ⊙ logits)` for every weight.
    pub fn backward(&self, tape: &Tape, dlogits: &[f64]) -> Result<Params> {
        let cfg = &self.config;
        let (d, hd, hidden, kv) = (cfg.model_dim, cfg.head_dim(), cfg.hidden_dim(), cfg.vocab.size());
        let n = tape.tokens.len();
        if dlogits.len() != n * kv {
            return Err(Error::Dimension(format!(
                "logit gradient has {} entries, expected {}",
                dlogits.len(),
                n * kv
            )));
        }
        let p = &self.params;
        let mut grads = p.zeros_like();

        // head and final norm
        ops::acc_at_b(&mut grads.head_w.data, &tape.f, n, d, dlogits, kv);
        ops::acc_col_sum(&mut grads.head_b.data, dlogits, kv);
        let df = ops::matmul_bt(dlogits, n, kv, &p.head_w.data, d);
        let mut dh = ops::layer_norm_backward(&df, d, &p.lnf_g.data, &tape.lnf, &mut grads.lnf_g.data, &mut grads.lnf_b.data);

        let scale = 1.0 / (hd as f64).sqrt();
        for l in (0..cfg.layers).rev() {
            let lp = &p.layers[l];
            let lt = &tape.layers[l];
            let gl = &mut grads.layers[l];

            // MLP
            ops::acc_at_b(&mut gl.w2.data, &lt.g, n, hidden, &dh, d);
            ops::acc_col_sum(&mut gl.b2.data, &dh, d);
            let dg = ops::matmul_bt(&dh, n, d, &lp.w2.data, hidden);
            let du: Vec<f64> = dg.iter().zip(&lt.u).map(|(g, &u)| g * ops::gelu_grad(u)).collect();
            ops::acc_at_b(&mut gl.w1.data, &lt.b, n, d, &du, hidden);
            ops::acc_col_sum(&mut gl.b1.data, &du, hidden);
            let db = ops::matmul_bt(&du, n, hidden, &lp.w1.data, d);
            let dln2 = ops::layer_norm_backward(&db, d, &lp.ln2_g.data, &lt.ln2, &mut gl.ln2_g.data, &mut gl.ln2_b.data);
            let dh1: Vec<f64> = dh.iter().zip(&dln2).map(|(a, b)| a + b).collect();

            // attention
            ops::acc_at_b(&mut gl.wo.data, &lt.o, n, d, &dh1, d);
            let d_o = ops::matmul_bt(&dh1, n, d, &lp.wo.data, d);
            let mut dq = vec![0.0; n * d];
            let mut dk = vec![0.0; n * d];
            let mut dv = vec![0.0; n * d];
            let mut dp = Vec::new();
            for (i, row) in tape.rows.iter().enumerate() {
                for head in 0..cfg.heads {
                    let probs = &lt.probs[head * n + i];
                    if probs.is_empty() {
                        continue;
                    }
                    let off = head * hd;
                    let doi = &d_o[i * d + off..i * d + off + hd];
                    dp.clear();
                    for (&s, &pr) in row.iter().zip(probs) {
                        let vs = &lt.v[s * d + off..s * d + off + hd];
                        dp.push(ops::dot(doi, vs));
                        for (x, &g) in dv[s * d + off..s * d + off + hd].iter_mut().zip(doi) {
                            *x += pr * g;
                        }
                    }
                    let mean: f64 = probs.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    let qi: Vec<f64> = lt.q[i * d + off..i * d + off + hd].to_vec();
                    for ((&s, &pr), &dps) in row.iter().zip(probs).zip(&dp) {
                        let ds = pr * (dps - mean) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for c in 0..hd {
                            dq[i * d + off + c] += ds * lt.k[s * d + off + c];
                            dk[s * d + off + c] += ds * qi[c];
                        }
                    }
                }
            }
            if cfg.position_encoding == PositionEncoding::Rotary {
                ops::rotary(&mut dq, &tape.positions, d, hd, true);
                ops::rotary(&mut dk, &tape.positions, d, hd, true);
            }
            ops::acc_at_b(&mut gl.wq.data, &lt.a, n, d, &dq, d);
            ops::acc_at_b(&mut gl.wk.data, &lt.a, n, d, &dk, d);
            ops::acc_at_b(&mut gl.wv.data, &lt.a, n, d, &dv, d);
            let mut da = ops::matmul_bt(&dq, n, d, &lp.wq.data, d);
            for (x, y) in da.iter_mut().zip(ops::matmul_bt(&dk, n, d, &lp.wk.data, d)) {
                *x += y;
            }
            for (x, y) in da.iter_mut().zip(ops::matmul_bt(&dv, n, d, &lp.wv.data, d)) {
                *x += y;
            }
            let dln1 = ops::layer_norm_backward(&da, d, &lp.ln1_g.data, &lt.ln1, &mut gl.ln1_g.data, &mut gl.ln1_b.data);
            dh = dh1.iter().zip(&dln1).map(|(a, b)| a + b).collect();
        }

        // embeddings; the sinusoid is a constant
        for (i, &t) in tape.tokens.iter().enumerate() {
            let row = &mut grads.tok_emb.data[t as usize * d..(t as usize + 1) * d];
            for (x, g) in row.iter_mut().zip(&dh[i * d..(i + 1) * d]) {
                *x += g;
            }
        }
        Ok(grads)
    }
}

/// `sum_r w_r * -log softmax(logits_r)[target_r]` and its gradient with
/// respect to the logits. Rows absent from `targets` get zero gradient.
pub fn weighted_cross_entropy(logits: &Logits, targets: &[(usize, TokenId, f64)]) -> (f64, Vec<f64>) {
    let k = logits.vocab;
    let mut grad = vec![0.0; logits.data.len()];
    let mut loss = 0.0;
    for &(r, target, w) in targets {
        let lp = ops::log_softmax(logits.row(r));
        loss -= w * lp[target as usize];
        let g = &mut grad[r * k..(r + 1) * k];
        for (j, (gj, l)) in g.iter_mut().zip(&lp).enumerate() {
            *gj += w * (l.exp() - if j == target as usize { 1.0 } else { 0.0 });
        }
    }
    (loss, grad)
}
