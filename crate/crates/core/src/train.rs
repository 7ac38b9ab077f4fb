//! Training drivers: supervised and value pretraining, search-based policy
//! improvement, and the REINFORCE / actor-critic baselines.

use std::io::{self, BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batcher::{run_sequential_searches, BatchError, BatchStats, Batcher, BatcherConfig};
use crate::bleu::{corpus_bleu, sentence_bleu, strip_for_bleu, BleuError, BleuScore};
use crate::corpus::{SentencePair, TokenId, BOS, EOS};
use crate::mcts::{SearchMode, SearchParams, Translation};
use crate::model::{
    default_max_len, greedy_decode, LossReport, ModelError, PolicyValueModel, State, TrainParams,
    TrainableModel, TrainingSample, ValueTarget, WeightedAction,
};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Bleu(#[from] BleuError),
    #[error(transparent)]
    Search(#[from] BatchError),
    #[error("empty sample pool")]
    EmptyPool,
    #[error("empty dataset")]
    EmptyDataset,
}

fn sentence_reward<T: Real>(hyp: &[TokenId], reference: &[TokenId]) -> Result<T, BleuError> {
    Ok(sentence_bleu::<T>(&strip_for_bleu(hyp), &strip_for_bleu(reference))?.value)
}

/// Teacher-forced `(state, reference token)` pairs for one sentence.
pub fn teacher_forced<T: Real>(pair: &SentencePair) -> Vec<WeightedAction<T>> {
    let mut state = State::initial(&pair.src);
    pair.reference
        .iter()
        .map(|&tok| {
            let item = WeightedAction {
                state: state.clone(),
                action: tok,
                weight: T::one(),
            };
            state.prefix.push(tok);
            item
        })
        .collect()
}

/// Supervised cross-entropy with teacher forcing, one step per sentence, in
/// data order. Returns the mean per-token loss of each epoch.
pub fn pretrain_policy<T: Real, M: TrainableModel<T> + ?Sized>(
    model: &mut M,
    data: &[SentencePair],
    epochs: usize,
    lr: T,
) -> Result<Vec<T>, TrainError> {
    let mut curve = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut total = T::zero();
        let mut tokens = 0;
        for pair in data {
            let items = teacher_forced::<T>(pair);
            tokens += items.len();
            total = total + model.policy_step(&items, lr)?;
        }
        curve.push(total / T::from_count(tokens.max(1)));
    }
    Ok(curve)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValuePretrainConfig<T> {
    pub lr: T,
    pub samples_per_sentence: usize,
    pub epochs: usize,
    pub seed: u64,
}

/// Value regression targets for one pass: each sentence is decoded greedily
/// by `policy`, scored, and `samples_per_sentence` prefixes `x_1..x_j` with `j`
/// uniform in `[1, T]` are paired with that score.
pub fn value_targets<T: Real, P: PolicyValueModel<T> + ?Sized, R: Rng>(
    policy: &P,
    data: &[SentencePair],
    samples_per_sentence: usize,
    rng: &mut R,
) -> Result<Vec<ValueTarget<T>>, TrainError> {
    let mut out = Vec::with_capacity(data.len() * samples_per_sentence);
    for pair in data {
        let hyp = greedy_decode(policy, &pair.src, default_max_len(pair.src.len()))?;
        if hyp.is_empty() {
            continue;
        }
        let b = sentence_reward::<T>(&hyp, &pair.reference)?;
        for _ in 0..samples_per_sentence {
            let j = rng.gen_range(1..=hyp.len());
            let mut prefix = vec![BOS];
            prefix.extend_from_slice(&hyp[..j]);
            out.push(ValueTarget {
                state: State {
                    src: pair.src.clone(),
                    prefix,
                },
                target: b,
            });
        }
    }
    Ok(out)
}

/// Fits the value head to the BLEU of greedy translations, one regression step
/// per sentence so successive prefixes of a sentence never share an update.
/// With `policy == None` the model being trained decodes. Returns the mean
/// loss of each epoch.
pub fn pretrain_value<T: Real, M: TrainableModel<T> + ?Sized>(
    model: &mut M,
    data: &[SentencePair],
    policy: Option<&dyn PolicyValueModel<T>>,
    cfg: &ValuePretrainConfig<T>,
) -> Result<Vec<T>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut total = T::zero();
        let mut n = 0;
        for pair in data {
            let targets = match policy {
                Some(p) => value_targets(
                    p,
                    std::slice::from_ref(pair),
                    cfg.samples_per_sentence,
                    &mut rng,
                )?,
                None => value_targets(
                    &*model,
                    std::slice::from_ref(pair),
                    cfg.samples_per_sentence,
                    &mut rng,
                )?,
            };
            if targets.is_empty() {
                continue;
            }
            n += targets.len();
            total = total + model.value_step(&targets, cfg.lr)?;
        }
        curve.push(total / T::from_count(n.max(1)));
    }
    Ok(curve)
}

/// Search outcome for one batch of sentences.
#[derive(Clone, Debug)]
pub struct SimOutput<T> {
    pub samples: Vec<TrainingSample<T>>,
    pub sentence_bleus: Vec<T>,
    pub stats: Option<BatchStats>,
}

fn collect_samples<T: Real>(
    pairs: &[SentencePair],
    translations: Vec<Translation<T>>,
) -> Result<SimOutput<T>, TrainError> {
    let mut samples = Vec::new();
    let mut sentence_bleus = Vec::with_capacity(pairs.len());
    for (pair, t) in pairs.iter().zip(translations) {
        let b = sentence_reward::<T>(&t.tokens, &pair.reference)?;
        sentence_bleus.push(b);
        samples.extend(t.trace.into_iter().map(|step| TrainingSample {
            state: step.state,
            visit_probs: step.dist.probs,
            bleu: b,
        }));
    }
    Ok(SimOutput {
        samples,
        sentence_bleus,
        stats: None,
    })
}

/// Translates each pair by sampled search and returns one sample per decode
/// step, every sample of a sentence carrying that sentence's final BLEU.
pub fn sim_sentences<T: Real, M: PolicyValueModel<T> + ?Sized>(
    batch: &[SentencePair],
    model: &M,
    params: &SearchParams<T>,
) -> Result<Vec<TrainingSample<T>>, TrainError> {
    Ok(simulate(batch, model, params, None)?.samples)
}

/// [`sim_sentences`] with optional concurrent searches and per-sentence BLEU.
pub fn simulate<T: Real, M: PolicyValueModel<T> + ?Sized>(
    batch: &[SentencePair],
    model: &M,
    params: &SearchParams<T>,
    batcher: Option<&mut Batcher>,
) -> Result<SimOutput<T>, TrainError> {
    match batcher {
        None => collect_samples(batch, run_sequential_searches(batch, model, params, true)?),
        Some(b) => {
            let translations = b.run_concurrent_searches(batch, model, params, true)?;
            let mut out = collect_samples(batch, translations)?;
            out.stats = b.batch_stats().cloned();
            Ok(out)
        }
    }
}

/// Indices drawn uniformly with replacement, `draws` rows of `draw_size`.
pub fn draw_indices(pool_len: usize, draws: usize, draw_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..draws)
        .map(|_| (0..draw_size).map(|_| rng.gen_range(0..pool_len)).collect())
        .collect()
}

/// `draws` updates, each on `draw_size` samples drawn with replacement.
pub fn update_network<T: Real, M: TrainableModel<T> + ?Sized>(
    model: &mut M,
    pool: &[TrainingSample<T>],
    params: &TrainParams<T>,
    draws: usize,
    draw_size: usize,
    seed: u64,
) -> Result<Vec<LossReport<T>>, TrainError> {
    if pool.is_empty() {
        return Err(TrainError::EmptyPool);
    }
    draw_indices(pool.len(), draws, draw_size, seed)
        .into_iter()
        .map(|idx| {
            let batch: Vec<TrainingSample<T>> = idx.iter().map(|&i| pool[i].clone()).collect();
            Ok(model.apply_update(&batch, params)?)
        })
        .collect()
}

/// Greedy-decodes every source and scores the corpus.
pub fn evaluate_greedy<T: Real, M: PolicyValueModel<T> + ?Sized>(
    model: &M,
    data: &[SentencePair],
) -> Result<BleuScore<T>, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut hyps = Vec::with_capacity(data.len());
    let mut refs = Vec::with_capacity(data.len());
    for pair in data {
        let out = greedy_decode(model, &pair.src, default_max_len(pair.src.len()))?;
        hyps.push(strip_for_bleu(&out));
        refs.push(strip_for_bleu(&pair.reference));
    }
    Ok(corpus_bleu(&hyps, &refs)?)
}

/// Endless reshuffled pass over a dataset; every trainer draws its sentences
/// from one of these so budgets are counted the same way.
pub struct SentenceStream<'a> {
    data: &'a [SentencePair],
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
    consumed: usize,
}

impl<'a> SentenceStream<'a> {
    pub fn new(data: &'a [SentencePair], seed: u64) -> Result<Self, TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let mut s = Self {
            data,
            order: (0..data.len()).collect(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            consumed: 0,
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    pub fn take(&mut self, n: usize) -> Vec<SentencePair> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.data[self.order[self.pos]].clone());
            self.pos += 1;
        }
        self.consumed += n;
        out
    }

    pub fn consumed(&self) -> usize {
        self.consumed
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: String,
    pub round: usize,
    pub sentences_consumed: usize,
    pub mean_train_bleu: f64,
    /// NaN (written as `null`) when no validation set was given.
    #[serde(deserialize_with = "null_as_nan")]
    pub validation_bleu: f64,
    pub loss: LossReport<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_stats: Option<BatchStats>,
}

fn null_as_nan<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

pub fn write_metrics<W: Write>(w: &mut W, records: &[MetricsRecord]) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_pool<T: Real, W: Write>(w: &mut W, pool: &[TrainingSample<T>]) -> io::Result<()> {
    for s in pool {
        serde_json::to_writer(&mut *w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_pool<T: Real, R: BufRead>(r: R) -> io::Result<Vec<TrainingSample<T>>> {
    r.lines()
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|l| {
            let l = l?;
            serde_json::from_str(&l).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
        })
        .collect()
}

fn mean<T: Real>(xs: &[T]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().map(|x| x.as_f64()).sum::<f64>() / xs.len() as f64
}

fn mean_loss<T: Real>(reports: &[LossReport<T>]) -> LossReport<f64> {
    let n = reports.len().max(1) as f64;
    let mut out = LossReport::default();
    for r in reports {
        out.total += r.total.as_f64() / n;
        out.value_term += r.value_term.as_f64() / n;
        out.policy_term += r.policy_term.as_f64() / n;
        out.l2_term += r.l2_term.as_f64() / n;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MctsTrainConfig {
    pub sentences_per_round: usize,
    /// Sentences searched together before moving on.
    pub sub_batch: usize,
    pub rounds: usize,
    pub draws: usize,
    pub draw_size: usize,
    pub seed: u64,
    /// Concurrent searches; `None` searches sentences one after another.
    pub batcher: Option<BatcherConfig>,
}

impl Default for MctsTrainConfig {
    fn default() -> Self {
        Self {
            sentences_per_round: 256,
            sub_batch: 64,
            rounds: 1,
            draws: 8,
            draw_size: 256,
            seed: 0,
            batcher: None,
        }
    }
}

/// Search-based self-improvement. Each round searches `sentences_per_round`
/// fresh sentences in sub-batches, updates the model on the round's pool, and
/// records greedy validation BLEU. In `NoValue` mode the value parameters are
/// left untouched.
pub fn train_mcts<T: Real, M: TrainableModel<T> + ?Sized>(
    model: &mut M,
    data: &[SentencePair],
    validation: &[SentencePair],
    search: &SearchParams<T>,
    train: &TrainParams<T>,
    cfg: &MctsTrainConfig,
) -> Result<Vec<MetricsRecord>, TrainError> {
    let mut stream = SentenceStream::new(data, cfg.seed)?;
    let mut batcher = cfg.batcher.map(Batcher::new);
    let mut tp = *train;
    if search.mode == SearchMode::NoValue {
        tp.train_value = false;
    }
    let method = match search.mode {
        SearchMode::WithValue => "mcts",
        SearchMode::NoValue => "mcts-novalue",
    };
    let mut history = Vec::with_capacity(cfg.rounds);
    let mut search_calls = 0u64;
    for round in 0..cfg.rounds {
        let sentences = stream.take(cfg.sentences_per_round);
        let mut pool = Vec::new();
        let mut bleus = Vec::with_capacity(sentences.len());
        let mut stats: Option<BatchStats> = None;
        for chunk in sentences.chunks(cfg.sub_batch.max(1)) {
            let sp = SearchParams {
                rng_seed: crate::batcher::sentence_seed(search.rng_seed ^ cfg.seed, search_calls),
                ..*search
            };
            search_calls += 1;
            let out = simulate(chunk, &*model, &sp, batcher.as_mut())?;
            pool.extend(out.samples);
            bleus.extend(out.sentence_bleus);
            if let Some(s) = out.stats {
                let acc = stats.get_or_insert_with(BatchStats::default);
                for (k, v) in s.histogram {
                    *acc.histogram.entry(k).or_default() += v;
                }
                acc.mean_wait_secs = (acc.mean_wait_secs * acc.total_evaluations as f64
                    + s.mean_wait_secs * s.total_evaluations as f64)
                    / (acc.total_evaluations + s.total_evaluations).max(1) as f64;
                acc.total_evaluations += s.total_evaluations;
                acc.worker_expansions += s.worker_expansions;
            }
        }
        let reports = if pool.is_empty() {
            Vec::new()
        } else {
            let seed = crate::batcher::sentence_seed(cfg.seed, 1 << 32 | round as u64);
            update_network(model, &pool, &tp, cfg.draws, cfg.draw_size, seed)?
        };
        let validation_bleu = if validation.is_empty() {
            f64::NAN
        } else {
            evaluate_greedy::<T, _>(&*model, validation)?.value.as_f64()
        };
        history.push(MetricsRecord {
            method: method.to_string(),
            round,
            sentences_consumed: stream.consumed(),
            mean_train_bleu: mean(&bleus),
            validation_bleu,
            loss: mean_loss(&reports),
            batch_stats: stats,
        });
    }
    Ok(history)
}

/// A translation sampled from the policy: visited states, actions, final BLEU.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode<T> {
    pub states: Vec<State>,
    pub actions: Vec<TokenId>,
    pub bleu: T,
}

/// Samples each token from the model's full distribution until EOS or the
/// default length cap.
pub fn sample_episode<T: Real, M: PolicyValueModel<T> + ?Sized, R: Rng>(
    model: &M,
    pair: &SentencePair,
    rng: &mut R,
) -> Result<Episode<T>, TrainError> {
    let max_len = default_max_len(pair.src.len());
    let mut state = State::initial(&pair.src);
    let mut states = Vec::new();
    let mut actions = Vec::new();
    while actions.len() < max_len {
        let eval = model.evaluate(&state)?;
        let mut r = T::lit(rng.gen::<f64>());
        let mut action = (eval.priors.len() - 1) as TokenId;
        for (a, &p) in eval.priors.iter().enumerate() {
            if r < p {
                action = a as TokenId;
                break;
            }
            r = r - p;
        }
        states.push(state.clone());
        actions.push(action);
        state.prefix.push(action);
        if action == EOS {
            break;
        }
    }
    let bleu = sentence_reward::<T>(&actions, &pair.reference)?;
    Ok(Episode {
        states,
        actions,
        bleu,
    })
}

/// REINFORCE terms: `-b * ln p(a_t | s_t)` for every step.
pub fn reinforce_items<T: Real>(episodes: &[Episode<T>]) -> Vec<WeightedAction<T>> {
    episodes
        .iter()
        .flat_map(|e| {
            e.states
                .iter()
                .zip(&e.actions)
                .map(|(s, &a)| WeightedAction {
                    state: s.clone(),
                    action: a,
                    weight: e.bleu,
                })
        })
        .collect()
}

/// Policy terms and value targets of one actor-critic step.
pub type ActorCriticItems<T> = (Vec<WeightedAction<T>>, Vec<ValueTarget<T>>);

/// Actor-critic terms: policy weights `b - v(s_t)` from the current critic and
/// value regression targets `b` at every visited state.
pub fn actor_critic_items<T: Real, M: PolicyValueModel<T> + ?Sized>(
    model: &M,
    episodes: &[Episode<T>],
) -> Result<ActorCriticItems<T>, TrainError> {
    let mut policy = Vec::new();
    let mut value = Vec::new();
    for e in episodes {
        if e.states.is_empty() {
            continue;
        }
        let evals = model.evaluate_batch(&e.states)?;
        for ((s, &a), ev) in e.states.iter().zip(&e.actions).zip(evals) {
            policy.push(WeightedAction {
                state: s.clone(),
                action: a,
                weight: e.bleu - ev.value,
            });
            value.push(ValueTarget {
                state: s.clone(),
                target: e.bleu,
            });
        }
    }
    Ok((policy, value))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyGradientConfig<T> {
    pub lr: T,
    /// Sentences per gradient step.
    pub batch_sentences: usize,
    /// Sentences between metrics records.
    pub sentences_per_round: usize,
    pub rounds: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Baseline {
    Reinforce,
    ActorCritic,
}

fn train_policy_gradient<T: Real, M: TrainableModel<T> + ?Sized>(
    model: &mut M,
    data: &[SentencePair],
    validation: &[SentencePair],
    cfg: &PolicyGradientConfig<T>,
    kind: Baseline,
) -> Result<Vec<MetricsRecord>, TrainError> {
    let mut stream = SentenceStream::new(data, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
    let mut history = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let sentences = stream.take(cfg.sentences_per_round);
        let mut bleus = Vec::with_capacity(sentences.len());
        let mut reports = Vec::new();
        for chunk in sentences.chunks(cfg.batch_sentences.max(1)) {
            let episodes = chunk
                .iter()
                .map(|p| sample_episode::<T, _, _>(&*model, p, &mut rng))
                .collect::<Result<Vec<_>, _>>()?;
            bleus.extend(episodes.iter().map(|e| e.bleu));
            let report = match kind {
                Baseline::Reinforce => {
                    let items = reinforce_items(&episodes);
                    let policy_term = model.policy_step(&items, cfg.lr)?;
                    LossReport {
                        total: policy_term,
                        policy_term,
                        ..Default::default()
                    }
                }
                Baseline::ActorCritic => {
                    let (policy, value) = actor_critic_items(&*model, &episodes)?;
                    let policy_term = model.policy_step(&policy, cfg.lr)?;
                    let value_term = model.value_step(&value, cfg.lr)?;
                    LossReport {
                        total: policy_term + value_term,
                        policy_term,
                        value_term,
                        l2_term: T::zero(),
                    }
                }
            };
            reports.push(report);
        }
        let validation_bleu = if validation.is_empty() {
            f64::NAN
        } else {
            evaluate_greedy::<T, _>(&*model, validation)?.value.as_f64()
        };
        history.push(MetricsRecord {
            method: match kind {
                Baseline::Reinforce => "reinforce",
                Baseline::ActorCritic => "actor-critic",
            }
            .to_string(),
            round,
            sentences_consumed: stream.consumed(),
            mean_train_bleu: mean(&bleus),
            validation_bleu,
            loss: mean_loss(&reports),
            batch_stats: None,
        });
    }
    Ok(history)
}

/// REINFORCE without a reward baseline: ascends `sum_t b * grad ln p(a_t | s_t)`.
pub fn train_reinforce<T: Real, M: TrainableModel<T> + ?Sized>(
    model: &mut M,
    data: &[SentencePair],
    validation: &[SentencePair],
    cfg: &PolicyGradientConfig<T>,
) -> Result<Vec<MetricsRecord>, TrainError> {
    train_policy_gradient(model, data, validation, cfg, Baseline::Reinforce)
}

/// Advantage actor-critic: policy ascends `sum_t grad ln p(a_t|s_t) (b - v(s_t))`,
/// value descends `sum_t (b - v(s_t))^2`.
pub fn train_actor_critic<T: Real, M: TrainableModel<T> + ?Sized>(
    model: &mut M,
    data: &[SentencePair],
    validation: &[SentencePair],
    cfg: &PolicyGradientConfig<T>,
) -> Result<Vec<MetricsRecord>, TrainError> {
    train_policy_gradient(model, data, validation, cfg, Baseline::ActorCritic)
}
