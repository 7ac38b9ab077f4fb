//! Command-line driver: dataset generation, pretraining, training by each
//! method, greedy evaluation and the comparison table.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use nmt_mcts::batcher::BatcherConfig;
use nmt_mcts::corpus::{
    read_dataset, write_dataset, Reorder, SentencePair, SyntheticTask, SyntheticTaskSpec,
};
use nmt_mcts::mcts::{
    translate_mcts, write_trace, Exploration, ModelEvaluator, SearchMode, SearchParams,
};
use nmt_mcts::model::{load_model, save_model, AnyModel, RemoteModel, TabularModel, TrainParams};
use nmt_mcts::train::{
    evaluate_greedy, pretrain_policy, pretrain_value, train_actor_critic, train_mcts,
    train_reinforce, write_metrics, MctsTrainConfig, MetricsRecord, PolicyGradientConfig,
    ValuePretrainConfig,
};

#[derive(Debug, Parser)]
#[command(
    name = "nmt-mcts",
    version,
    about = "MCTS decoding and policy/value training on a synthetic translation task"
)]
pub struct Cli {
    /// Flat `key=value` file; keys are long flag names, explicit flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (one `src ids<TAB>ref ids` line per pair).
    GenData(GenDataArgs),
    /// Supervised policy pretraining and/or value pretraining.
    Pretrain(PretrainArgs),
    /// Improve a model with MCTS, no-value MCTS, REINFORCE or actor-critic.
    Train(TrainArgs),
    /// Greedy corpus BLEU of a model on a dataset.
    Eval(EvalArgs),
    /// Train or load every method and print the comparison table.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Args)]
pub struct TaskArgs {
    /// Source vocabulary size of the synthetic task.
    #[arg(long, default_value_t = 40)]
    pub vocab: usize,
    #[arg(long, default_value_t = 5)]
    pub min_len: usize,
    #[arg(long, default_value_t = 10)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0)]
    pub mapping_seed: u64,
    #[arg(long, default_value = "reverse")]
    pub reorder: Reorder,
}

impl TaskArgs {
    fn spec(&self) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            src_vocab_size: self.vocab,
            min_len: self.min_len,
            max_len: self.max_len,
            mapping_seed: self.mapping_seed,
            reorder: self.reorder,
        }
    }

    fn task(&self) -> Result<SyntheticTask> {
        Ok(SyntheticTask::new(self.spec())?)
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the vocabulary, one token per line.
    #[arg(long)]
    pub vocab_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Start from this checkpoint instead of a fresh tabular model.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Run supervised policy pretraining.
    #[arg(long)]
    pub policy: bool,
    /// Run value pretraining on greedy translations.
    #[arg(long)]
    pub value: bool,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.005)]
    pub lr: f64,
    /// Half-width of the uniform logit initialisation of a fresh model.
    #[arg(long, default_value_t = 2.0)]
    pub init_scale: f64,
    #[arg(long, default_value_t = 1)]
    pub value_epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    pub value_lr: f64,
    #[arg(long, default_value_t = 1)]
    pub samples_per_sentence: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Mcts,
    MctsNovalue,
    Reinforce,
    ActorCritic,
}

#[derive(Debug, Clone, Args)]
pub struct SearchArgs {
    #[arg(long, default_value_t = 0.5)]
    pub c_puct: f64,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    #[arg(long, default_value_t = 100)]
    pub sims: usize,
    #[arg(long, default_value_t = 50)]
    pub top_k: usize,
    /// Divide the exploration bonus by N instead of 1 + N.
    #[arg(long)]
    pub literal_puct: bool,
}

impl SearchArgs {
    fn params(&self, mode: SearchMode, seed: u64) -> SearchParams<f64> {
        SearchParams {
            c_puct: self.c_puct,
            temperature: self.tau,
            num_simulations: self.sims,
            top_k: self.top_k,
            max_len: None,
            mode,
            exploration: if self.literal_puct {
                Exploration::Literal
            } else {
                Exploration::AlphaZero
            },
            rng_seed: seed,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub search: SearchArgs,
    #[arg(long, default_value_t = 5)]
    pub rounds: usize,
    #[arg(long, default_value_t = 256)]
    pub sentences_per_round: usize,
    /// Sentences searched together (MCTS) or per gradient step (baselines).
    #[arg(long, default_value_t = 64)]
    pub batch_sentences: usize,
    #[arg(long, default_value_t = 8)]
    pub draws: usize,
    #[arg(long, default_value_t = 256)]
    pub draw_size: usize,
    /// Learning rate of the MCTS update.
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    /// Learning rate of REINFORCE.
    #[arg(long, default_value_t = 0.5)]
    pub pg_lr: f64,
    /// Learning rate of actor-critic.
    #[arg(long, default_value_t = 2.0)]
    pub ac_lr: f64,
    /// L2 coefficient of the MCTS update.
    #[arg(long, default_value_t = 0.0)]
    pub l2: f64,
    #[arg(long, default_value_t = 1.0)]
    pub value_weight: f64,
    /// Concurrent search workers; 0 searches sentences one at a time.
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    #[arg(long, default_value_t = 64)]
    pub max_batch: usize,
    #[arg(long, default_value_t = 2)]
    pub max_wait_ms: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub method: Method,
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out pairs scored after every round.
    #[arg(long)]
    pub valid: Option<PathBuf>,
    /// Checkpoint to start from.
    #[arg(long, required_unless_present = "remote")]
    pub model: Option<PathBuf>,
    /// Use a model served at `unix:PATH` or `tcp:HOST:PORT` instead.
    #[arg(long, conflicts_with = "model")]
    pub remote: Option<String>,
    /// Source vocabulary size of the task, needed for the remote handshake.
    #[arg(long, default_value_t = 40)]
    pub vocab: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Also decode the first `--trace-n` sentences by search and dump the traces.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub trace_n: usize,
    #[command(flatten)]
    pub search: SearchArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Test pairs every row is scored on.
    #[arg(long)]
    pub data: PathBuf,
    /// Training pairs; methods without a checkpoint are trained on them.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub supervised: Option<PathBuf>,
    #[arg(long)]
    pub mcts: Option<PathBuf>,
    #[arg(long)]
    pub actor_critic: Option<PathBuf>,
    #[arg(long)]
    pub policy_rl: Option<PathBuf>,
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long, default_value_t = 0.005)]
    pub pretrain_lr: f64,
    #[arg(long, default_value_t = 1)]
    pub pretrain_epochs: usize,
    #[arg(long, default_value_t = 2.0)]
    pub init_scale: f64,
    /// Value pretraining on the supervised policy's own translations.
    #[arg(long, default_value_t = 1)]
    pub value_epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    pub value_lr: f64,
    #[command(flatten)]
    pub run: RunArgs,
}

/// Rows of the comparison table, in print order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Row {
    Supervised,
    Mcts,
    ActorCritic,
    PolicyRl,
}

impl Row {
    pub fn label(self) -> &'static str {
        match self {
            Row::Supervised => "Supervised Policy",
            Row::Mcts => "MCTS",
            Row::ActorCritic => "Actor-Critic",
            Row::PolicyRl => "Policy+RL",
        }
    }
}

/// Two-column table of BLEU x 100 at two decimals.
pub fn compare_report(results: &BTreeMap<Row, f64>) -> String {
    let width = results
        .keys()
        .map(|r| r.label().len())
        .chain(["Methodology".len()])
        .max()
        .unwrap_or(0);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>6}", "Methodology", "BLEU");
    let _ = writeln!(out, "{}  {}", "-".repeat(width), "-".repeat(6));
    for (row, bleu) in results {
        let _ = writeln!(out, "{:<width$}  {:>6.2}", row.label(), bleu * 100.0);
    }
    out
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("config line {}: expected key=value", i + 1);
        };
        out.push((k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(out)
}

fn flag_kinds(sub: &clap::Command) -> BTreeMap<String, bool> {
    sub.get_arguments()
        .filter_map(|a| {
            let takes_value = a.get_action().takes_values();
            a.get_long().map(|l| (l.to_string(), takes_value))
        })
        .collect()
}

/// Splices config-file entries in front of the explicit flags so that clap,
/// which keeps the last occurrence, lets the command line win. Keys that
/// belong to another subcommand are ignored; keys no subcommand knows are a
/// usage error.
pub fn merge_config(argv: Vec<String>) -> Result<Vec<String>, clap::Error> {
    let mut config = None;
    for (i, a) in argv.iter().enumerate() {
        if a == "--config" {
            config = argv.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            config = Some(p.to_string());
        }
    }
    let Some(path) = config else { return Ok(argv) };
    let mut cmd = Cli::command();
    let text = fs::read_to_string(&path).map_err(|e| {
        cmd.error(
            clap::error::ErrorKind::Io,
            format!("cannot read config {path}: {e}"),
        )
    })?;
    let entries = parse_config(&text)
        .map_err(|e| cmd.error(clap::error::ErrorKind::InvalidValue, format!("{path}: {e}")))?;
    let names: BTreeSet<String> = cmd
        .get_subcommands()
        .map(|s| s.get_name().to_string())
        .collect();
    let Some(pos) = argv.iter().position(|a| names.contains(a)) else {
        return Ok(argv);
    };
    let all: BTreeSet<String> = cmd
        .get_subcommands()
        .flat_map(|s| flag_kinds(s).into_keys())
        .collect();
    let kinds = flag_kinds(cmd.find_subcommand(&argv[pos]).expect("known subcommand"));
    let mut injected = Vec::new();
    for (key, value) in entries {
        match kinds.get(&key) {
            Some(true) => {
                injected.push(format!("--{key}"));
                injected.push(value);
            }
            Some(false) => match value.as_str() {
                "true" | "1" | "yes" => injected.push(format!("--{key}")),
                "false" | "0" | "no" => {}
                _ => {
                    return Err(cmd.error(
                        clap::error::ErrorKind::InvalidValue,
                        format!("config key {key} expects true or false"),
                    ))
                }
            },
            None if all.contains(&key) || key == "config" => {}
            None => {
                return Err(cmd.error(
                    clap::error::ErrorKind::UnknownArgument,
                    format!("unknown config key {key}"),
                ))
            }
        }
    }
    let mut out = argv[..=pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}

/// Parses arguments, runs the command and maps the outcome to an exit code:
/// 0 on success, 2 on usage errors, 1 on runtime errors.
pub fn main_with_args(argv: Vec<String>) -> i32 {
    let parsed = merge_config(argv).and_then(|a| {
        Cli::command()
            .args_override_self(true)
            .try_get_matches_from(a)
            .and_then(|m| <Cli as clap::FromArgMatches>::from_arg_matches(&m))
    });
    let cli = match parsed {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Compare(a) => compare(a),
    }
}

fn load_data(path: &Path) -> Result<Vec<SentencePair>> {
    read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn load(path: &Path) -> Result<AnyModel<f64>> {
    load_model(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn save(model: &AnyModel<f64>, path: &Path) -> Result<()> {
    match model {
        AnyModel::Remote(r) => r.save(&path.to_string_lossy())?,
        m => save_model(m, path)?,
    }
    Ok(())
}

fn write_metrics_file(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    write_metrics(&mut w, records)?;
    w.flush()?;
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    if a.n == 0 {
        bail!("--n must be at least 1");
    }
    let task = a.task.task()?;
    write_dataset(&a.out, &task.generate(a.n, a.seed))?;
    if let Some(p) = a.vocab_out {
        let mut text = task.vocab().tokens().join("\n");
        text.push('\n');
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn fresh_model(task: &SyntheticTask, scale: f64, seed: u64) -> TabularModel<f64> {
    let v = task.vocab().len();
    let fp = task.vocab().fingerprint();
    if scale > 0.0 {
        TabularModel::random_init(v, fp, scale, seed)
    } else {
        TabularModel::new(v, fp)
    }
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    if !a.policy && !a.value {
        bail!("nothing to do: pass --policy, --value or both");
    }
    let data = load_data(&a.data)?;
    let mut model = match &a.init {
        Some(p) => load(p)?,
        None => AnyModel::Tabular(fresh_model(&a.task.task()?, a.init_scale, a.seed)),
    };
    if a.policy {
        for (epoch, loss) in pretrain_policy(&mut model, &data, a.epochs, a.lr)?
            .iter()
            .enumerate()
        {
            eprintln!("policy epoch {epoch}: loss {loss:.6}");
        }
    }
    if a.value {
        let cfg = ValuePretrainConfig {
            lr: a.value_lr,
            samples_per_sentence: a.samples_per_sentence,
            epochs: a.value_epochs,
            seed: a.seed,
        };
        for (epoch, loss) in pretrain_value(&mut model, &data, None, &cfg)?
            .iter()
            .enumerate()
        {
            eprintln!("value epoch {epoch}: loss {loss:.6}");
        }
    }
    save(&model, &a.out)
}

fn run_method(
    method: Method,
    model: &mut AnyModel<f64>,
    data: &[SentencePair],
    valid: &[SentencePair],
    r: &RunArgs,
) -> Result<Vec<MetricsRecord>> {
    let history = match method {
        Method::Mcts | Method::MctsNovalue => {
            let mode = if method == Method::Mcts {
                SearchMode::WithValue
            } else {
                SearchMode::NoValue
            };
            let sp = r.search.params(mode, r.seed);
            let tp = TrainParams {
                learning_rate: r.lr,
                l2_coeff: r.l2,
                value_loss_weight: r.value_weight,
                train_value: true,
            };
            let cfg = MctsTrainConfig {
                sentences_per_round: r.sentences_per_round,
                sub_batch: r.batch_sentences,
                rounds: r.rounds,
                draws: r.draws,
                draw_size: r.draw_size,
                seed: r.seed,
                batcher: (r.workers > 0).then(|| BatcherConfig {
                    max_batch: r.max_batch,
                    max_wait: Duration::from_millis(r.max_wait_ms),
                    workers: r.workers,
                }),
            };
            train_mcts(model, data, valid, &sp, &tp, &cfg)?
        }
        Method::Reinforce | Method::ActorCritic => {
            let cfg = PolicyGradientConfig {
                lr: if method == Method::Reinforce {
                    r.pg_lr
                } else {
                    r.ac_lr
                },
                batch_sentences: r.batch_sentences,
                sentences_per_round: r.sentences_per_round,
                rounds: r.rounds,
                seed: r.seed,
            };
            if method == Method::Reinforce {
                train_reinforce(model, data, valid, &cfg)?
            } else {
                train_actor_critic(model, data, valid, &cfg)?
            }
        }
    };
    Ok(history)
}

fn train(a: TrainArgs) -> Result<()> {
    let data = load_data(&a.data)?;
    let valid = match &a.valid {
        Some(p) => load_data(p)?,
        None => Vec::new(),
    };
    let mut model = match (&a.model, &a.remote) {
        (Some(p), _) => load(p)?,
        (None, Some(endpoint)) => {
            let task = TaskArgs {
                vocab: a.vocab,
                min_len: 1,
                max_len: 1,
                mapping_seed: 0,
                reorder: Reorder::Reverse,
            }
            .task()?;
            AnyModel::Remote(RemoteModel::connect(
                endpoint,
                task.vocab().len(),
                &task.vocab().fingerprint(),
            )?)
        }
        (None, None) => bail!("pass --model or --remote"),
    };
    let history = run_method(a.method, &mut model, &data, &valid, &a.run)?;
    for rec in &history {
        eprintln!(
            "round {}: sentences {} train BLEU {:.4} valid BLEU {:.4}",
            rec.round, rec.sentences_consumed, rec.mean_train_bleu, rec.validation_bleu
        );
    }
    if let Some(p) = &a.metrics {
        write_metrics_file(p, &history)?;
    }
    save(&model, &a.out)
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = load(&a.model)?;
    let data = load_data(&a.data)?;
    let score = evaluate_greedy::<f64, _>(&model, &data)?;
    println!("BLEU {:.2}", score.value * 100.0);
    if let Some(p) = &a.trace {
        let f = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
        let mut w = BufWriter::new(f);
        let sp = a.search.params(SearchMode::WithValue, a.seed);
        for pair in data.iter().take(a.trace_n) {
            let mut ev = ModelEvaluator::new(&model);
            let t = translate_mcts(&pair.src, &pair.reference, &mut ev, &sp, false)?;
            write_trace(&mut w, &t.trace)?;
        }
        w.flush()?;
    }
    Ok(())
}

fn compare(a: CompareArgs) -> Result<()> {
    let test = load_data(&a.data)?;
    let needs_training = a.mcts.is_none() || a.actor_critic.is_none() || a.policy_rl.is_none();
    let train = match &a.train {
        Some(p) => Some(load_data(p)?),
        None => None,
    };
    let supervised = match (&a.supervised, &train) {
        (Some(p), _) => Some(load(p)?),
        (None, Some(data)) => {
            let mut m = AnyModel::Tabular(fresh_model(&a.task.task()?, a.init_scale, a.run.seed));
            pretrain_policy(&mut m, data, a.pretrain_epochs, a.pretrain_lr)?;
            let cfg = ValuePretrainConfig {
                lr: a.value_lr,
                samples_per_sentence: 1,
                epochs: a.value_epochs,
                seed: a.run.seed,
            };
            pretrain_value(&mut m, data, None, &cfg)?;
            Some(m)
        }
        (None, None) => None,
    };
    let mut results = BTreeMap::new();
    let mut history = Vec::new();
    if let Some(m) = &supervised {
        results.insert(Row::Supervised, evaluate_greedy::<f64, _>(m, &test)?.value);
    }
    let rows = [
        (Row::Mcts, Method::Mcts, &a.mcts),
        (Row::ActorCritic, Method::ActorCritic, &a.actor_critic),
        (Row::PolicyRl, Method::Reinforce, &a.policy_rl),
    ];
    for (row, method, ckpt) in rows {
        let model = match (ckpt, &train, &supervised) {
            (Some(p), _, _) => load(p)?,
            (None, Some(data), Some(start)) => {
                let mut m = clone_local(start)?;
                history.extend(run_method(method, &mut m, data, &test, &a.run)?);
                m
            }
            _ => continue,
        };
        results.insert(row, evaluate_greedy::<f64, _>(&model, &test)?.value);
    }
    if needs_training && train.is_none() && results.len() < 4 {
        eprintln!("note: rows without a checkpoint need --train to be produced");
    }
    if results.is_empty() {
        bail!("no methods to report: pass checkpoints or --train");
    }
    if let Some(p) = &a.metrics {
        write_metrics_file(p, &history)?;
    }
    print!("{}", compare_report(&results));
    Ok(())
}

fn clone_local(m: &AnyModel<f64>) -> Result<AnyModel<f64>> {
    match m {
        AnyModel::Tabular(t) => Ok(AnyModel::Tabular(t.clone())),
        AnyModel::Oracle(o) => Ok(AnyModel::Oracle(o.clone())),
        AnyModel::Remote(_) => bail!("cannot copy a remote model"),
    }
}
