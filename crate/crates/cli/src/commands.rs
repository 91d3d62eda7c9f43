//! The train, sample, eval-ppl and bench commands.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use serde_json::json;

use esolm_core::bench::{measure, CostMode, Measurement};
use esolm_core::corpus::{build_vocab, pack, read_texts, split_documents, PackedDataset, Tokenizer};
use esolm_core::loss::{eval_nelbo, EvalReport, TrainBatchPlan, TrainConfig, Trainer};
use esolm_core::masking::TokenId;
use esolm_core::model::{checkpoint, Denoiser};
use esolm_core::rng::{streams, SeedTree};
use esolm_core::sampler::{build_schedule, generate, Executor, SamplerConfig};
use esolm_core::schedule::LogLinearSchedule;

use crate::config::{ConfigError, RunConfig, RESOLVED_CONFIG_FILE, VERSION};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const VOCAB_FILE: &str = "vocab.txt";

/// A checkpoint that cannot serve the requested run; maps to exit status 4.
#[derive(Debug)]
pub struct CheckpointMismatch(pub String);

impl std::fmt::Display for CheckpointMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckpointMismatch {}

fn prepare_output(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let dir = cfg.output_dir(command);
    fs::create_dir_all(&dir).with_context(|| format!("creating output directory {}", dir.display()))?;
    fs::write(dir.join(RESOLVED_CONFIG_FILE), cfg.resolved_text())?;
    Ok(dir)
}

fn stamp(cfg: &RunConfig) -> serde_json::Value {
    json!({ "config_hash": cfg.hash(), "version": VERSION })
}

fn merge(mut record: serde_json::Value, cfg: &RunConfig) -> serde_json::Value {
    if let (Some(obj), serde_json::Value::Object(extra)) = (record.as_object_mut(), stamp(cfg)) {
        obj.extend(extra);
    }
    record
}

/// Tokenizer plus packed examples, split into training and held-out parts.
struct Data {
    tokenizer: Tokenizer,
    train: Vec<Vec<TokenId>>,
    heldout: Vec<Vec<TokenId>>,
}

fn load_corpus(cfg: &RunConfig, tokenizer: Option<Tokenizer>) -> Result<Data> {
    let path = Path::new(&cfg.paths.corpus);
    if !path.exists() {
        return Err(ConfigError(format!("corpus {} does not exist", path.display())).into());
    }
    let texts = read_texts(path)?;
    let tokenizer = match tokenizer {
        Some(t) => t,
        None => {
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            build_vocab(&refs, cfg.tokenizer.mode, cfg.tokenizer.max_vocab)?
        }
    };
    let mut docs = Vec::new();
    for t in &texts {
        for d in split_documents(t) {
            docs.push(tokenizer.encode(d)?);
        }
    }
    let PackedDataset { mut examples, .. } = pack(&docs, cfg.context_length, tokenizer.vocab())?;
    let held = cfg.training.eval_examples.min(examples.len() / 2);
    let heldout = examples.split_off(examples.len() - held);
    if examples.is_empty() {
        bail!(ConfigError("corpus too small for the context length".into()));
    }
    Ok(Data {
        tokenizer,
        train: examples,
        heldout,
    })
}

fn checkpoint_path(cfg: &RunConfig) -> Result<PathBuf> {
    if cfg.paths.checkpoint.is_empty() {
        bail!(ConfigError("this command needs paths.checkpoint (or --checkpoint)".into()));
    }
    let p = PathBuf::from(&cfg.paths.checkpoint);
    if !p.exists() {
        bail!(ConfigError(format!("checkpoint {} does not exist", p.display())));
    }
    Ok(p)
}

fn load_checkpoint(cfg: &RunConfig) -> Result<(Denoiser, Option<Tokenizer>, BTreeMap<String, String>)> {
    let path = checkpoint_path(cfg)?;
    let ckpt = checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let vocab_path = path.with_file_name(VOCAB_FILE);
    let tokenizer = if vocab_path.exists() {
        let t = Tokenizer::from_vocab_file(&fs::read_to_string(&vocab_path)?)?;
        if t.vocab() != ckpt.model.config().vocab {
            bail!(CheckpointMismatch(format!(
                "{} describes {} symbols but the checkpoint expects {}",
                vocab_path.display(),
                t.vocab().size(),
                ckpt.model.config().vocab.size()
            )));
        }
        Some(t)
    } else {
        None
    };
    Ok((ckpt.model, tokenizer, ckpt.metadata))
}

fn evaluate(model: &Denoiser, data: &[Vec<TokenId>], cfg: &RunConfig, alpha0: f64) -> Result<EvalReport> {
    let seed = SeedTree::new(cfg.seed).child("eval", 0).seed();
    Ok(eval_nelbo(model, data, alpha0, cfg.variant, seed)?)
}

pub fn train(cfg: &RunConfig) -> Result<PathBuf> {
    let data = load_corpus(cfg, None)?;
    let dir = prepare_output(cfg, "train")?;
    let tree = SeedTree::new(cfg.seed);
    let model_cfg = cfg.denoiser_config(data.tokenizer.vocab(), cfg.context_length);
    let model = Denoiser::init(model_cfg, cfg.model.init_std, true, &mut tree.stream(streams::INIT))?;

    let t = &cfg.training;
    let mut tc = TrainConfig::new(cfg.variant, cfg.alpha0_train, TrainBatchPlan::new(t.batch_size, t.mdm_fraction)?);
    tc.lr = t.lr;
    tc.warmup = t.warmup;
    tc.weight_decay = t.weight_decay;
    tc.variance_reduced = t.variance_reduced;
    let mut trainer = Trainer::new(model, tc, cfg.seed)?;

    let mut log = fs::File::create(dir.join("train_log.jsonl"))?;
    if !data.heldout.is_empty() {
        let r = evaluate(&trainer.model, &data.heldout, cfg, cfg.alpha0_train)?;
        writeln!(log, "{}", merge(json!({ "step": 0, "eval": r }), cfg))?;
    }
    let mut order_rng = tree.stream(streams::DATA_ORDER);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut cursor = order.len();
    for _ in 0..t.steps {
        let mut batch = Vec::with_capacity(t.batch_size);
        while batch.len() < t.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(data.train[order[cursor]].clone());
            cursor += 1;
        }
        let s = trainer.train_step(&batch)?;
        let done = s.step + 1;
        if done % t.log_every.max(1) == 0 || done == t.steps {
            let lr = trainer.config.lr_at(s.step);
            writeln!(log, "{}", merge(json!({ "step": done, "lr": lr, "train": s }), cfg))?;
        }
    }
    let mut metadata = BTreeMap::new();
    metadata.insert("config_hash".to_string(), cfg.hash());
    metadata.insert("version".to_string(), VERSION.to_string());
    metadata.insert("steps".to_string(), trainer.step().to_string());
    metadata.insert("variant".to_string(), cfg.variant.to_string());
    metadata.insert("alpha0_train".to_string(), cfg.alpha0_train.to_string());
    checkpoint::save(&dir.join(CHECKPOINT_FILE), &trainer.model, &metadata)?;
    fs::write(dir.join(VOCAB_FILE), data.tokenizer.to_vocab_file())?;
    if !data.heldout.is_empty() {
        let r = evaluate(&trainer.model, &data.heldout, cfg, cfg.alpha0_train)?;
        writeln!(log, "{}", merge(json!({ "step": trainer.step(), "eval": r }), cfg))?;
        eprintln!(
            "trained {} steps; held-out perplexity bound {:.3} at alpha0 {}",
            trainer.step(),
            r.perplexity,
            cfg.alpha0_train
        );
    }
    Ok(dir)
}

pub fn sample(cfg: &RunConfig) -> Result<PathBuf> {
    let (model, tokenizer, _) = load_checkpoint(cfg)?;
    let len = cfg.context_length;
    if len > model.config().max_positions {
        bail!(CheckpointMismatch(format!(
            "context length {len} exceeds the checkpoint's {} positions",
            model.config().max_positions
        )));
    }
    let dir = prepare_output(cfg, "sample")?;
    let executor = if cfg.sampling.cache { Executor::Cached } else { Executor::Reference };
    let mut sc = SamplerConfig::new(cfg.variant, executor);
    sc.temperature = cfg.sampling.temperature;
    sc.nucleus = cfg.sampling.nucleus;
    let noise = LogLinearSchedule::new(cfg.alpha0_eval)?;
    let tree = SeedTree::new(cfg.seed);
    let mut out = fs::File::create(dir.join("samples.jsonl"))?;
    let mut wall = 0.0;
    for i in 0..cfg.sampling.count {
        let sub = tree.child("sample", i as u64);
        let schedule = build_schedule(len, cfg.sampling.steps, &noise, &mut sub.stream(streams::SCHEDULE))?;
        let g = generate(&model, &schedule, &sc, &mut sub.stream(streams::SAMPLING))?;
        wall += g.stats.wall_seconds;
        let mut record = json!({
            "seed": cfg.seed,
            "sample": i,
            "alpha0_eval": cfg.alpha0_eval,
            "T": cfg.sampling.steps,
            "variant": cfg.variant,
            "nfe": g.stats.nfe,
            "tokens": g.tokens,
            "stats": {
                "nfe": g.stats.nfe,
                "query_tokens_total": g.stats.query_tokens_total,
                "attention_pairs_total": g.stats.attention_pairs_total,
                "cache_hits": g.stats.cache_hits,
            },
        });
        if let Some(t) = &tokenizer {
            record["text"] = json!(t.decode(&g.tokens));
        }
        writeln!(out, "{}", merge(record, cfg))?;
    }
    eprintln!("wrote {} samples in {wall:.3}s", cfg.sampling.count);
    Ok(dir)
}

pub fn eval_ppl(cfg: &RunConfig) -> Result<PathBuf> {
    let (model, tokenizer, _) = load_checkpoint(cfg)?;
    let tokenizer = match tokenizer {
        Some(t) => t,
        None => bail!(CheckpointMismatch(format!("no {VOCAB_FILE} next to the checkpoint"))),
    };
    if cfg.context_length > model.config().max_positions {
        bail!(CheckpointMismatch(format!(
            "context length {} exceeds the checkpoint's {} positions",
            cfg.context_length,
            model.config().max_positions
        )));
    }
    let data = load_corpus(cfg, Some(tokenizer))?;
    let set = if data.heldout.is_empty() { &data.train } else { &data.heldout };
    let r = evaluate(&model, set, cfg, cfg.alpha0_eval)?;
    let dir = prepare_output(cfg, "eval-ppl")?;
    let record = merge(
        json!({ "alpha0_eval": cfg.alpha0_eval, "variant": cfg.variant, "report": r }),
        cfg,
    );
    fs::write(dir.join("eval.json"), format!("{}\n", serde_json::to_string_pretty(&record)?))?;
    println!(
        "perplexity bound {:.4} (nelbo/token {:.4}: ar {:.4}, mdm {:.4}) over {} tokens",
        r.perplexity, r.nelbo_per_token, r.ar_per_token, r.mdm_per_token, r.tokens
    );
    Ok(dir)
}

fn bench_modes(list: &str) -> Result<Vec<CostMode>> {
    if list.trim() == "all" {
        return Ok(CostMode::ALL.to_vec());
    }
    list.split(',')
        .map(|m| m.parse::<CostMode>().map_err(|e| ConfigError(e.to_string()).into()))
        .collect()
}

pub fn bench(cfg: &RunConfig) -> Result<PathBuf> {
    let modes = bench_modes(&cfg.bench.modes)?;
    let max_len = *cfg.bench.lengths.iter().max().expect("validated non-empty");
    let tree = SeedTree::new(cfg.seed);
    let model = if cfg.paths.checkpoint.is_empty() {
        let vocab = esolm_core::masking::Vocab::new(51, 49)?;
        Denoiser::init(
            cfg.denoiser_config(vocab, max_len),
            cfg.model.init_std,
            false,
            &mut tree.stream(streams::INIT),
        )?
    } else {
        let (m, _, _) = load_checkpoint(cfg)?;
        if m.config().max_positions < max_len {
            bail!(CheckpointMismatch(format!(
                "bench length {max_len} exceeds the checkpoint's {} positions",
                m.config().max_positions
            )));
        }
        m
    };
    let dir = prepare_output(cfg, "bench")?;
    let noise = LogLinearSchedule::new(cfg.alpha0_eval)?;
    let mut csv = format!("# config_hash={} version={}\n{}\n", cfg.hash(), VERSION, Measurement::CSV_HEADER);
    println!("{}", Measurement::CSV_HEADER);
    let start = Instant::now();
    for &len in &cfg.bench.lengths {
        for &t in &cfg.bench.steps {
            let t_steps = if t == 0 { len } else { t };
            let sub = tree.child("bench", (len * 1_000_003 + t_steps) as u64);
            let schedule = build_schedule(len, t_steps, &noise, &mut sub.stream(streams::SCHEDULE))?;
            for &mode in &modes {
                let m = measure(&model, &schedule, mode, cfg.bench.repeats, sub.child(streams::SAMPLING, 0).seed())?;
                let row = m.csv_row(t_steps, cfg.alpha0_eval);
                println!("{row}");
                csv.push_str(&row);
                csv.push('\n');
            }
        }
    }
    fs::write(dir.join("bench.csv"), csv)?;
    eprintln!("bench finished in {:.1}s", start.elapsed().as_secs_f64());
    Ok(dir)
}
