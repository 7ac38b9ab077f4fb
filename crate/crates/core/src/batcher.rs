//! Many per-sentence searches sharing one model through a batching
//! evaluation service.
//!
//! Each worker thread owns one search tree at a time and sends an expansion
//! request whenever it needs `(P, V)` for a leaf, then blocks on its reply
//! channel. The service (the calling thread) owns the model, gathers pending
//! requests and runs them as one batch once `max_batch` are waiting, once
//! every live worker is blocked on it, or once the oldest request has waited
//! `max_wait`.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SentencePair;
use crate::mcts::{
    translate_mcts, Evaluator, MctsError, ModelEvaluator, SearchParams, Translation,
};
use crate::model::{Evaluation, ModelError, PolicyValueModel, State};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatcherConfig {
    pub max_batch: usize,
    pub max_wait: Duration,
    pub workers: usize,
}

impl Default for BatcherConfig {
    fn default() -> Self {
        Self {
            max_batch: 64,
            max_wait: Duration::from_millis(2),
            workers: 64,
        }
    }
}

impl BatcherConfig {
    pub fn sequential() -> Self {
        Self {
            max_batch: 1,
            max_wait: Duration::ZERO,
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    /// Dispatched batch size -> number of batches.
    pub histogram: BTreeMap<usize, usize>,
    pub total_evaluations: usize,
    /// Evaluation requests issued by the workers, counted on their side.
    pub worker_expansions: usize,
    pub mean_wait_secs: f64,
}

impl BatchStats {
    pub fn batches(&self) -> usize {
        self.histogram.values().sum()
    }

    pub fn mean_batch_size(&self) -> f64 {
        match self.batches() {
            0 => 0.0,
            b => self.total_evaluations as f64 / b as f64,
        }
    }
}

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("search for sentence {index} failed: {source}")]
    Worker {
        index: usize,
        #[source]
        source: MctsError,
    },
    #[error("evaluation service failed: {0}")]
    Service(#[source] ModelError),
}

/// Seed for sentence `index` of a run seeded with `global`.
pub fn sentence_seed(global: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the combined input
    let mut z = global ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn params_for<T: Real>(sp: &SearchParams<T>, index: usize) -> SearchParams<T> {
    SearchParams {
        rng_seed: sentence_seed(sp.rng_seed, index as u64),
        ..*sp
    }
}

/// Reference run: every sentence searched in turn on the calling thread with
/// the same per-sentence seeds the concurrent run uses.
pub fn run_sequential_searches<T: Real, M: PolicyValueModel<T> + ?Sized>(
    pairs: &[SentencePair],
    model: &M,
    sp: &SearchParams<T>,
    sample: bool,
) -> Result<Vec<Translation<T>>, BatchError> {
    let mut ev = ModelEvaluator::new(model);
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            translate_mcts(&p.src, &p.reference, &mut ev, &params_for(sp, i), sample)
                .map_err(|source| BatchError::Worker { index: i, source })
        })
        .collect()
}

enum Request {
    Eval {
        worker: usize,
        request_id: u64,
        state: State,
        submitted: Instant,
    },
    Finished {
        expansions: usize,
    },
}

struct Reply<T> {
    request_id: u64,
    result: Result<Evaluation<T>, String>,
}

struct ChannelEvaluator<T> {
    worker: usize,
    next_request: u64,
    calls: usize,
    tx: Sender<Request>,
    rx: Receiver<Reply<T>>,
}

impl<T: Real> Evaluator<T> for ChannelEvaluator<T> {
    fn evaluate(&mut self, state: &State) -> Result<Evaluation<T>, ModelError> {
        let request_id = self.next_request;
        self.next_request += 1;
        self.calls += 1;
        let service_gone = || ModelError::InvalidState("evaluation service stopped".into());
        self.tx
            .send(Request::Eval {
                worker: self.worker,
                request_id,
                state: state.clone(),
                submitted: Instant::now(),
            })
            .map_err(|_| service_gone())?;
        let reply = self.rx.recv().map_err(|_| service_gone())?;
        if reply.request_id != request_id {
            return Err(ModelError::InvalidState(format!(
                "worker {} got reply {} for request {request_id}",
                self.worker, reply.request_id
            )));
        }
        reply
            .result
            .map_err(|msg| ModelError::InvalidState(format!("evaluation service: {msg}")))
    }
}

struct Pending {
    worker: usize,
    request_id: u64,
    state: State,
    submitted: Instant,
}

/// Runs per-sentence searches concurrently and keeps the statistics of the
/// last run.
#[derive(Debug, Default)]
pub struct Batcher {
    config: BatcherConfig,
    last_stats: Option<BatchStats>,
}

impl Batcher {
    pub fn new(config: BatcherConfig) -> Self {
        Self {
            config,
            last_stats: None,
        }
    }

    pub fn config(&self) -> &BatcherConfig {
        &self.config
    }

    /// Statistics of the most recent completed run.
    pub fn batch_stats(&self) -> Option<&BatchStats> {
        self.last_stats.as_ref()
    }

    /// Translates every pair with its own search; output order matches input
    /// order and each result equals the sequential reference run.
    pub fn run_concurrent_searches<T: Real, M: PolicyValueModel<T> + ?Sized>(
        &mut self,
        pairs: &[SentencePair],
        model: &M,
        sp: &SearchParams<T>,
        sample: bool,
    ) -> Result<Vec<Translation<T>>, BatchError> {
        let workers = self.config.workers.max(1).min(pairs.len());
        if workers == 0 {
            self.last_stats = Some(BatchStats::default());
            return Ok(Vec::new());
        }
        let max_batch = self.config.max_batch.max(1);
        let max_wait = self.config.max_wait;

        let next = AtomicUsize::new(0);
        let abort = AtomicBool::new(false);
        let results: Mutex<Vec<Option<Translation<T>>>> = Mutex::new(vec![None; pairs.len()]);
        let failures: Mutex<Vec<(usize, MctsError)>> = Mutex::new(Vec::new());
        let (req_tx, req_rx) = mpsc::channel::<Request>();
        let mut reply_txs = Vec::with_capacity(workers);
        let mut reply_rxs = Vec::with_capacity(workers);
        for _ in 0..workers {
            let (tx, rx) = mpsc::channel::<Reply<T>>();
            reply_txs.push(tx);
            reply_rxs.push(rx);
        }

        let mut stats = BatchStats::default();
        let mut service_error = None;

        thread::scope(|scope| {
            for (worker, rx) in reply_rxs.into_iter().enumerate() {
                let tx = req_tx.clone();
                let (next, abort, results, failures) = (&next, &abort, &results, &failures);
                scope.spawn(move || {
                    let mut ev = ChannelEvaluator {
                        worker,
                        next_request: 0,
                        calls: 0,
                        tx,
                        rx,
                    };
                    loop {
                        if abort.load(Ordering::SeqCst) {
                            break;
                        }
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        if i >= pairs.len() {
                            break;
                        }
                        let p = &pairs[i];
                        match translate_mcts(
                            &p.src,
                            &p.reference,
                            &mut ev,
                            &params_for(sp, i),
                            sample,
                        ) {
                            Ok(t) => results.lock().unwrap()[i] = Some(t),
                            Err(e) => {
                                abort.store(true, Ordering::SeqCst);
                                failures.lock().unwrap().push((i, e));
                                break;
                            }
                        }
                    }
                    let _ = ev.tx.send(Request::Finished {
                        expansions: ev.calls,
                    });
                });
            }
            drop(req_tx);

            let mut active = workers;
            let mut pending: Vec<Pending> = Vec::new();
            let mut total_wait = Duration::ZERO;
            while active > 0 {
                let received = match pending.first() {
                    None => req_rx.recv().map_err(|_| RecvTimeoutError::Disconnected),
                    Some(oldest) => {
                        let deadline = oldest.submitted + max_wait;
                        req_rx.recv_timeout(deadline.saturating_duration_since(Instant::now()))
                    }
                };
                match received {
                    Ok(Request::Eval {
                        worker,
                        request_id,
                        state,
                        submitted,
                    }) => pending.push(Pending {
                        worker,
                        request_id,
                        state,
                        submitted,
                    }),
                    Ok(Request::Finished { expansions }) => {
                        active -= 1;
                        stats.worker_expansions += expansions;
                    }
                    Err(RecvTimeoutError::Timeout) => {}
                    Err(RecvTimeoutError::Disconnected) => break,
                }
                while !pending.is_empty() {
                    let expired = pending[0].submitted + max_wait <= Instant::now();
                    if !(pending.len() >= max_batch || pending.len() >= active || expired) {
                        break;
                    }
                    let take = pending.len().min(max_batch);
                    let batch: Vec<Pending> = pending.drain(..take).collect();
                    let states: Vec<State> = batch.iter().map(|p| p.state.clone()).collect();
                    let outcome = model.evaluate_batch(&states);
                    let done = Instant::now();
                    *stats.histogram.entry(batch.len()).or_default() += 1;
                    stats.total_evaluations += batch.len();
                    match outcome {
                        Ok(evals) if evals.len() == batch.len() => {
                            for (p, e) in batch.into_iter().zip(evals) {
                                total_wait += done - p.submitted;
                                let _ = reply_txs[p.worker].send(Reply {
                                    request_id: p.request_id,
                                    result: Ok(e),
                                });
                            }
                        }
                        other => {
                            let msg = match other {
                                Err(e) => {
                                    let msg = e.to_string();
                                    service_error.get_or_insert(e);
                                    msg
                                }
                                Ok(_) => {
                                    "model returned the wrong number of evaluations".to_string()
                                }
                            };
                            abort.store(true, Ordering::SeqCst);
                            for p in batch {
                                let _ = reply_txs[p.worker].send(Reply {
                                    request_id: p.request_id,
                                    result: Err(msg.clone()),
                                });
                            }
                        }
                    }
                }
            }
            if stats.total_evaluations > 0 {
                stats.mean_wait_secs = total_wait.as_secs_f64() / stats.total_evaluations as f64;
            }
        });

        let mut failures = failures.into_inner().unwrap();
        failures.sort_by_key(|(i, _)| *i);
        self.last_stats = Some(stats);
        if let Some((index, source)) = failures.into_iter().next() {
            return Err(BatchError::Worker { index, source });
        }
        if let Some(e) = service_error {
            return Err(BatchError::Service(e));
        }
        results
            .into_inner()
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                r.ok_or(BatchError::Worker {
                    index: i,
                    source: MctsError::Model(ModelError::InvalidState("search did not run".into())),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_synthetic, SyntheticTaskSpec};
    use crate::model::TabularModel;

    fn fixture(n: usize) -> (Vec<SentencePair>, TabularModel<f64>) {
        let spec = SyntheticTaskSpec {
            src_vocab_size: 8,
            min_len: 2,
            max_len: 4,
            ..Default::default()
        };
        let pairs = gen_synthetic(spec, n, 1).unwrap();
        (pairs, TabularModel::random_init(12, "fp", 1.0, 2))
    }

    fn small_params() -> SearchParams<f64> {
        SearchParams {
            num_simulations: 12,
            rng_seed: 5,
            ..SearchParams::default()
        }
    }

    #[test]
    fn sentence_seeds_differ() {
        assert_ne!(sentence_seed(1, 0), sentence_seed(1, 1));
        assert_ne!(sentence_seed(1, 0), sentence_seed(2, 0));
        assert_eq!(sentence_seed(3, 4), sentence_seed(3, 4));
    }

    #[test]
    fn single_worker_matches_sequential_with_unit_batches() {
        let (pairs, model) = fixture(5);
        let sp = small_params();
        let reference = run_sequential_searches(&pairs, &model, &sp, true).unwrap();
        let mut b = Batcher::new(BatcherConfig {
            workers: 1,
            max_batch: 64,
            max_wait: Duration::from_secs(1),
        });
        let got = b
            .run_concurrent_searches(&pairs, &model, &sp, true)
            .unwrap();
        assert_eq!(got, reference);
        let stats = b.batch_stats().unwrap();
        assert_eq!(stats.histogram.keys().copied().collect::<Vec<_>>(), vec![1]);
        assert_eq!(stats.total_evaluations, stats.worker_expansions);
    }

    #[test]
    fn order_preserved_with_many_workers() {
        let (pairs, model) = fixture(3);
        let sp = small_params();
        let mut b = Batcher::new(BatcherConfig::default());
        let got = b
            .run_concurrent_searches(&pairs, &model, &sp, false)
            .unwrap();
        assert_eq!(got.len(), 3);
        for (t, p) in got.iter().zip(&pairs) {
            assert_eq!(t.trace[0].state.src, p.src);
        }
    }

    #[test]
    fn empty_input() {
        let (_, model) = fixture(1);
        let mut b = Batcher::new(BatcherConfig::default());
        assert!(b
            .run_concurrent_searches::<f64, _>(&[], &model, &small_params(), true)
            .unwrap()
            .is_empty());
    }
}
