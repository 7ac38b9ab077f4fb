use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nmt_mcts_cli::{compare_report, main_with_args, merge_config, parse_config, Row};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nmt-mcts"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn argv(args: &[&str]) -> Vec<String> {
    std::iter::once("nmt-mcts")
        .chain(args.iter().copied())
        .map(String::from)
        .collect()
}

/// Small task shared by the pipeline tests: 10 words, sentences of 3 to 5.
const TASK: [&str; 6] = ["--vocab", "10", "--min-len", "3", "--max-len", "5"];

fn gen(dir: &Path, name: &str, n: usize, seed: u64) -> std::path::PathBuf {
    let out = dir.join(name);
    let (n, seed) = (n.to_string(), seed.to_string());
    let mut args = vec!["gen-data", "--n", &n, "--seed", &seed, "--out", p(&out)];
    args.extend(TASK);
    ok(&args);
    out
}

#[test]
fn gen_data_writes_one_line_per_pair() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = dir.path().join("vocab.txt");
    let data = dir.path().join("train.tsv");
    ok(&[
        "gen-data",
        "--n",
        "2000",
        "--seed",
        "1",
        "--out",
        p(&data),
        "--vocab-out",
        p(&vocab),
    ]);
    let text = fs::read_to_string(&data).unwrap();
    assert_eq!(text.lines().count(), 2000);
    assert!(text.lines().all(|l| l.contains('\t') && l.ends_with(" 2")));
    let tokens: Vec<_> = fs::read_to_string(&vocab)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(tokens.len(), 44);
    assert_eq!(&tokens[..4], ["<pad>", "<bos>", "<eos>", "<unk>"]);

    let again = dir.path().join("again.tsv");
    ok(&["gen-data", "--n", "2000", "--seed", "1", "--out", p(&again)]);
    assert_eq!(fs::read(&again).unwrap(), fs::read(&data).unwrap());
}

#[test]
fn usage_errors_exit_with_two() {
    let out = bin(&[
        "train", "--method", "nonsense", "--data", "x", "--model", "y", "--out", "z",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonsense"));
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(bin(&["gen-data", "--out", "x"]).status.code(), Some(2));
    assert_eq!(main_with_args(argv(&["eval", "--model"])), 2);
    assert_eq!(main_with_args(argv(&["--help"])), 0);
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.tsv");
    let out = bin(&["eval", "--model", p(&missing), "--data", p(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));

    let data = gen(dir.path(), "d.tsv", 5, 1);
    let out = bin(&[
        "pretrain",
        "--data",
        p(&data),
        "--out",
        p(&dir.path().join("m")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let out = bin(&[
        "gen-data",
        "--n",
        "0",
        "--out",
        p(&dir.path().join("e.tsv")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn pretrain_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let train = gen(dir.path(), "train.tsv", 200, 1);
    let test = gen(dir.path(), "test.tsv", 30, 2);
    let base = dir.path().join("base.ckpt");
    let mut args = vec![
        "pretrain",
        "--data",
        p(&train),
        "--out",
        p(&base),
        "--policy",
        "--value",
    ];
    args.extend(TASK);
    let out = bin(&args);
    assert!(out.status.success());
    let log = String::from_utf8_lossy(&out.stderr);
    assert!(log.contains("policy epoch 0") && log.contains("value epoch 0"));

    let eval = |model: &Path| ok(&["eval", "--model", p(model), "--data", p(&test)]);
    let first = eval(&base);
    assert!(first.starts_with("BLEU "), "{first}");
    assert_eq!(first, eval(&base));

    for method in ["mcts", "mcts-novalue", "reinforce", "actor-critic"] {
        let out_model = dir.path().join(format!("{method}.ckpt"));
        let metrics = dir.path().join(format!("{method}.jsonl"));
        ok(&[
            "train",
            "--method",
            method,
            "--data",
            p(&train),
            "--valid",
            p(&test),
            "--model",
            p(&base),
            "--out",
            p(&out_model),
            "--metrics",
            p(&metrics),
            "--rounds",
            "2",
            "--sentences-per-round",
            "16",
            "--batch-sentences",
            "8",
            "--sims",
            "10",
            "--draw-size",
            "32",
        ]);
        let lines: Vec<serde_json::Value> = fs::read_to_string(&metrics)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1]["method"], method);
        assert_eq!(lines[1]["sentences_consumed"], 32);
        assert!(eval(&out_model).starts_with("BLEU "));
    }

    let trace = dir.path().join("trace.jsonl");
    ok(&[
        "eval",
        "--model",
        p(&base),
        "--data",
        p(&test),
        "--trace",
        p(&trace),
        "--sims",
        "8",
    ]);
    let steps = fs::read_to_string(&trace).unwrap();
    assert!(steps.lines().count() >= 1);
    let step: serde_json::Value = serde_json::from_str(steps.lines().next().unwrap()).unwrap();
    assert_eq!(step["step"], 0);
}

#[test]
fn concurrent_training_matches_sequential() {
    let dir = tempfile::tempdir().unwrap();
    let train = gen(dir.path(), "train.tsv", 50, 1);
    let base = dir.path().join("base.ckpt");
    let mut args = vec![
        "pretrain",
        "--data",
        p(&train),
        "--out",
        p(&base),
        "--policy",
    ];
    args.extend(TASK);
    ok(&args);
    let run = |name: &str, workers: &str| {
        let out = dir.path().join(name);
        ok(&[
            "train",
            "--method",
            "mcts",
            "--data",
            p(&train),
            "--model",
            p(&base),
            "--out",
            p(&out),
            "--rounds",
            "1",
            "--sentences-per-round",
            "16",
            "--batch-sentences",
            "8",
            "--sims",
            "10",
            "--draw-size",
            "32",
            "--workers",
            workers,
        ]);
        fs::read(out).unwrap()
    };
    assert_eq!(run("seq.ckpt", "0"), run("conc.ckpt", "4"));
}

#[test]
fn compare_prints_every_row() {
    let dir = tempfile::tempdir().unwrap();
    let train = gen(dir.path(), "train.tsv", 200, 1);
    let test = gen(dir.path(), "test.tsv", 30, 2);
    let metrics = dir.path().join("m.jsonl");
    let mut args = vec![
        "compare",
        "--data",
        p(&test),
        "--train",
        p(&train),
        "--metrics",
        p(&metrics),
        "--rounds",
        "1",
        "--sentences-per-round",
        "16",
        "--batch-sentences",
        "8",
        "--sims",
        "10",
        "--draw-size",
        "32",
    ];
    args.extend(TASK);
    let table = ok(&args);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 6);
    assert!(lines[0].starts_with("Methodology"));
    for (line, label) in
        lines[2..]
            .iter()
            .zip(["Supervised Policy", "MCTS", "Actor-Critic", "Policy+RL"])
    {
        assert!(line.starts_with(label), "{line}");
        let v: f64 = line.split_whitespace().last().unwrap().parse().unwrap();
        assert!((0.0..=100.0).contains(&v));
    }
    assert_eq!(fs::read_to_string(&metrics).unwrap().lines().count(), 3);
}

#[test]
fn report_formatting() {
    let mut rows = BTreeMap::new();
    rows.insert(Row::PolicyRl, 0.1);
    rows.insert(Row::Mcts, 0.27294);
    rows.insert(Row::Supervised, 0.0);
    let text = compare_report(&rows);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "Methodology          BLEU");
    assert_eq!(lines[1], "-----------------  ------");
    assert_eq!(lines[2], "Supervised Policy    0.00");
    assert_eq!(lines[3], "MCTS                27.29");
    assert_eq!(lines[4], "Policy+RL           10.00");

    let single = compare_report(&BTreeMap::from([(Row::Mcts, 1.0)]));
    assert_eq!(
        single,
        "Methodology    BLEU\n-----------  ------\nMCTS         100.00\n"
    );
}

#[test]
fn config_files_fill_in_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        "# defaults\nn = 7\nseed=3\nsims=5\nvocab_out=/dev/null\nlr=0.3\n",
    )
    .unwrap();
    assert_eq!(
        parse_config("a=1\n\n# c\nmax_len = 4\n").unwrap(),
        vec![
            ("a".to_string(), "1".to_string()),
            ("max-len".to_string(), "4".to_string())
        ]
    );
    assert!(parse_config("novalue\n").is_err());

    let merged = merge_config(argv(&[
        "--config",
        p(&cfg),
        "gen-data",
        "--n",
        "9",
        "--out",
        "x",
    ]))
    .unwrap();
    // sims and lr belong to other subcommands and are dropped
    assert_eq!(
        merged[4..],
        argv(&[
            "--n",
            "7",
            "--seed",
            "3",
            "--vocab-out",
            "/dev/null",
            "--n",
            "9",
            "--out",
            "x"
        ])[1..]
    );

    let out = dir.path().join("d.tsv");
    ok(&["--config", p(&cfg), "gen-data", "--out", p(&out)]);
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 7);
    ok(&[
        "gen-data",
        "--config",
        p(&cfg),
        "--out",
        p(&out),
        "--n",
        "4",
    ]);
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 4);

    fs::write(&cfg, "bogus=1\n").unwrap();
    assert_eq!(
        bin(&["--config", p(&cfg), "gen-data", "--out", p(&out)])
            .status
            .code(),
        Some(2)
    );
    fs::write(&cfg, "policy=maybe\n").unwrap();
    assert_eq!(
        main_with_args(argv(&[
            "--config",
            p(&cfg),
            "pretrain",
            "--data",
            "x",
            "--out",
            "y"
        ])),
        2
    );
    assert_eq!(
        main_with_args(argv(&["--config", p(&dir.path().join("none")), "gen-data"])),
        2
    );
}
