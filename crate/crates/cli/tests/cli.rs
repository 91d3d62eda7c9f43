use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use esolm_cli::config::{RunConfig, OUTPUT_ROOT_ENV, RESOLVED_CONFIG_FILE};

const CORPUS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/tiny_corpus.txt");

fn esolm(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_esolm"))
        .args(args)
        .env(OUTPUT_ROOT_ENV, root)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn only_dir(root: &Path, prefix: &str) -> PathBuf {
    let dirs: Vec<PathBuf> = fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with(prefix))
        .collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs[0].clone()
}

const TINY: &[&str] = &[
    "--corpus",
    CORPUS,
    "--steps",
    "6",
    "--set",
    "model.model_dim=16",
    "--set",
    "model.heads=2",
    "--set",
    "context_length=16",
    "--set",
    "training.log_every=2",
    "--set",
    "training.eval_examples=8",
];

fn train_tiny(root: &Path) -> PathBuf {
    let mut args = vec!["train"];
    args.extend_from_slice(TINY);
    let o = esolm(root, &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    only_dir(root, "train-")
}

#[test]
fn inspect_bias_golden_b_diffusion() {
    let tmp = tempfile::tempdir().unwrap();
    let o = esolm(tmp.path(), &["inspect-bias", "--variant", "b", "--phase", "diffusion", "--example", "fig2"]);
    assert!(o.status.success());
    let want = "\
variant=b phase=diffusion example=six
sigma=(3, 1, 6, 4, 5, 2)
clean={1, 3, 6} mask={2, 4, 5}
columns=1 2 3 4 5 6
1 #.#...
2 ######
3 ..#...
4 #.##.#
5 #.####
6 #.#..#
";
    assert_eq!(stdout(&o), want);
}

#[test]
fn inspect_bias_golden_a_sequential() {
    let tmp = tempfile::tempdir().unwrap();
    let o = esolm(tmp.path(), &["inspect-bias", "--variant", "a", "--phase", "sequential", "--example", "six"]);
    assert!(o.status.success());
    let want = "\
variant=a phase=sequential example=six
sigma=(3, 1, 6, 4, 5, 2)
clean={1, 3, 6} mask={2, 4, 5}
columns=z1 z2 z3 z4 z5 z6 x1 x2 x3 x4 x5 x6
z1 #.....#.#..#
z2 .#....#.#..#
z3 ..#...#.#..#
z4 ...#..###..#
z5 ....#.####.#
z6 .....##.#..#
x1 ......#.#..#
x2 ......###..#
x3 ......#.#..#
x4 ......####.#
x5 ......######
x6 ......#.#..#
";
    assert_eq!(stdout(&o), want);
}

#[test]
fn inspect_bias_golden_sampling_step() {
    let tmp = tempfile::tempdir().unwrap();
    let o = esolm(
        tmp.path(),
        &["inspect-bias", "--variant", "a", "--phase", "sampling", "--example", "eight", "--step", "3"],
    );
    assert!(o.status.success());
    let want = "\
variant=a phase=sampling example=eight
schedule=((3, 1), (6), (4, 7), (2), (5), (8))
sigma=(3, 1, 6, 4, 7, 2, 5, 8)

step=3 s_k=(4, 7) d_mdm={3, 1, 6} d_ar={}
columns=1 3 4 6 7
1 ##.#.
3 ##.#.
4 ####.
6 ##.#.
7 #####
";
    assert_eq!(stdout(&o), want);
}

#[test]
fn inspect_bias_rejects_non_natural_sigma() {
    let tmp = tempfile::tempdir().unwrap();
    let o = esolm(tmp.path(), &["inspect-bias", "--variant", "b", "--phase", "sequential", "--example", "six"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_round_trip_through_resolved_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("run.cfg");
    fs::write(&cfg_path, "seed = 11\nvariant = a\nsampling.nucleus = 0.8\nbench.lengths = 8,16\n").unwrap();
    let mut cfg = RunConfig::default();
    cfg.apply_file(&cfg_path).unwrap();
    let reloaded = RunConfig::from_text(&cfg.resolved_text()).unwrap();
    assert_eq!(reloaded, cfg);
    assert_eq!(reloaded.hash(), cfg.hash());
}

#[test]
fn unknown_key_exits_with_config_status() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("bad.cfg");
    fs::write(&cfg_path, "training.stepz = 5\n").unwrap();
    let o = esolm(tmp.path(), &["train", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("training.stepz"));
    let o = esolm(tmp.path(), &["sample", "--alpha0-eval", "2"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_status_three() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["train"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["--lr", "inf", "--set", "training.warmup=0"]);
    let o = esolm(tmp.path(), &args);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_sample_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let run = train_tiny(tmp.path());
    for f in ["checkpoint.bin", "vocab.txt", "train_log.jsonl", RESOLVED_CONFIG_FILE] {
        assert!(run.join(f).exists(), "{f}");
    }
    let resolved = fs::read_to_string(run.join(RESOLVED_CONFIG_FILE)).unwrap();
    let cfg = RunConfig::from_text(&resolved).unwrap();
    assert!(resolved.starts_with(&format!("# config_hash={} ", cfg.hash())));
    assert!(run.ends_with(format!("train-{}", &cfg.hash()[..12])));

    // rerunning from the resolved file reproduces every artifact byte for byte
    let log = fs::read(run.join("train_log.jsonl")).unwrap();
    let ckpt = fs::read(run.join("checkpoint.bin")).unwrap();
    fs::remove_dir_all(&run).unwrap();
    fs::create_dir_all(tmp.path().join("cfg")).unwrap();
    let cfg_file = tmp.path().join("cfg").join("resolved.txt");
    fs::write(&cfg_file, &resolved).unwrap();
    let o = esolm(tmp.path(), &["train", "--config", cfg_file.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(fs::read(run.join("train_log.jsonl")).unwrap(), log);
    assert_eq!(fs::read(run.join("checkpoint.bin")).unwrap(), ckpt);
    assert!(String::from_utf8_lossy(&log).lines().all(|l| l.contains(&cfg.hash())));

    // pure sequential sampling: one function evaluation per position
    let ck = run.join("checkpoint.bin");
    let ck = ck.to_str().unwrap();
    let args = [
        "sample",
        "--checkpoint",
        ck,
        "--alpha0-eval",
        "0",
        "--steps",
        "1",
        "--count",
        "3",
        "--set",
        "context_length=16",
    ];
    let o = esolm(tmp.path(), &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sample_dir = only_dir(tmp.path(), "sample-");
    let text = fs::read_to_string(sample_dir.join("samples.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 3);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["nfe"], 16);
        assert_eq!(v["tokens"].as_array().unwrap().len(), 16);
        assert_eq!(v["variant"], "b");
        assert!(v["config_hash"].is_string() && v["version"].is_string());
    }
    let o = esolm(tmp.path(), &args);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(sample_dir.join("samples.jsonl")).unwrap(), text);

    // cached and reference executors agree
    let nc_dir = tmp.path().join("nc");
    let mut nc = args.to_vec();
    nc.extend_from_slice(&["--no-cache", "--output", nc_dir.to_str().unwrap()]);
    assert!(esolm(tmp.path(), &nc).status.success());
    let tokens = |t: &str| -> Vec<serde_json::Value> {
        t.lines().map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["tokens"].clone()).collect()
    };
    let reference = fs::read_to_string(tmp.path().join("nc").join("samples.jsonl")).unwrap();
    assert_eq!(tokens(&reference), tokens(&text));

    let o = esolm(
        tmp.path(),
        &["eval-ppl", "--checkpoint", ck, "--corpus", CORPUS, "--set", "context_length=16", "--set", "training.eval_examples=8"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("perplexity bound"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(only_dir(tmp.path(), "eval-ppl-").join("eval.json")).unwrap()).unwrap();
    assert!(report["report"]["perplexity"].as_f64().unwrap() > 1.0);
}

#[test]
fn checkpoint_version_mismatch_exits_with_status_four() {
    let tmp = tempfile::tempdir().unwrap();
    let run = train_tiny(tmp.path());
    let bytes = fs::read(run.join("checkpoint.bin")).unwrap();
    let text = String::from_utf8_lossy(&bytes[..20]).into_owned();
    assert!(text.starts_with("ESOLM-CHECKPOINT v1"));
    let mut bad = bytes.clone();
    bad[18] = b'7';
    let bad_dir = tmp.path().join("bad");
    fs::create_dir_all(&bad_dir).unwrap();
    fs::write(bad_dir.join("checkpoint.bin"), bad).unwrap();
    let o = esolm(tmp.path(), &["sample", "--checkpoint", bad_dir.join("checkpoint.bin").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn bench_writes_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let o = esolm(
        tmp.path(),
        &["bench", "--lengths", "8,12", "--repeats", "2", "--set", "model.model_dim=16", "--set", "model.heads=2"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(only_dir(tmp.path(), "bench-").join("bench.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("# config_hash="));
    assert_eq!(lines[1], "mode,L,T,alpha0,nfe,query_tokens,attention_pairs,wall_median_s,wall_std_s");
    assert_eq!(lines.len(), 2 + 2 * 5);
    let b_cached: Vec<&str> = lines.iter().filter(|l| l.starts_with("esolm_b_cached,8,")).copied().collect();
    assert_eq!(b_cached.len(), 1);
}
