//! Policy/value models `f(state) -> (P, V)` consumed by the search and the
//! trainers.

mod checkpoint;
mod oracle;
pub mod protocol;
mod remote;
mod tabular;

use std::collections::BTreeMap;
use std::io;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TokenId, BOS, EOS};
use crate::scalar::Real;

pub use checkpoint::{load_model, save_model, CHECKPOINT_VERSION};
pub use oracle::OracleModel;
pub use remote::RemoteModel;
pub use tabular::TabularModel;

/// Floor applied to probabilities inside `ln` in every likelihood term.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model is not trainable")]
    NotTrainable,
    #[error("operation not supported by this model: {0}")]
    Unsupported(&'static str),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("remote model at {endpoint}: {source}")]
    Unreachable {
        endpoint: String,
        #[source]
        source: io::Error,
    },
    #[error("remote model at {endpoint}: protocol violation: {msg}")]
    Protocol { endpoint: String, msg: String },
    #[error("remote model at {endpoint}: server error {code}: {message}")]
    Server {
        endpoint: String,
        code: String,
        message: String,
    },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("checkpoint {path}: {source}")]
    CheckpointIo {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// Source sentence plus the translation prefix emitted so far (starting at BOS).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct State {
    pub src: Vec<TokenId>,
    pub prefix: Vec<TokenId>,
}

impl State {
    pub fn initial(src: &[TokenId]) -> Self {
        Self {
            src: src.to_vec(),
            prefix: vec![BOS],
        }
    }

    pub fn child(&self, action: TokenId) -> Self {
        let mut prefix = Vec::with_capacity(self.prefix.len() + 1);
        prefix.extend_from_slice(&self.prefix);
        prefix.push(action);
        Self {
            src: self.src.clone(),
            prefix,
        }
    }

    /// Tokens emitted after BOS.
    pub fn emitted(&self) -> &[TokenId] {
        &self.prefix[1.min(self.prefix.len())..]
    }

    pub fn ends_in_eos(&self) -> bool {
        self.prefix.last() == Some(&EOS)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.prefix.first() != Some(&BOS) {
            return Err(ModelError::InvalidState(
                "prefix must start with BOS".into(),
            ));
        }
        if let Some(pos) = self.prefix.iter().position(|&t| t == EOS) {
            if pos + 1 != self.prefix.len() {
                return Err(ModelError::InvalidState("EOS before end of prefix".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation<T> {
    pub priors: Vec<T>,
    pub value: T,
}

impl<T: Real> Evaluation<T> {
    /// Argmax of the priors; ties go to the lowest id.
    pub fn best_action(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.priors.iter().enumerate() {
            if p > self.priors[best] {
                best = i;
            }
        }
        best as TokenId
    }
}

/// One search step's training target: the state, the rescaled visit
/// distribution over retained actions, and the final sentence BLEU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample<T> {
    pub state: State,
    pub visit_probs: BTreeMap<TokenId, T>,
    pub bleu: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainParams<T> {
    pub learning_rate: T,
    /// Coefficient `c` of the `c * |theta|^2` penalty.
    pub l2_coeff: T,
    pub value_loss_weight: T,
    /// When false the value parameters are frozen and excluded from every term.
    pub train_value: bool,
}

impl<T: Real> TrainParams<T> {
    pub fn new(learning_rate: T) -> Self {
        Self {
            learning_rate,
            l2_coeff: T::zero(),
            value_loss_weight: T::one(),
            train_value: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport<T> {
    pub total: T,
    pub value_term: T,
    pub policy_term: T,
    pub l2_term: T,
}

/// `weight * -ln p(action | state)` term of a policy-gradient style objective.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedAction<T> {
    pub state: State,
    pub action: TokenId,
    pub weight: T,
}

/// `(v(state) - target)^2` term of a value regression.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueTarget<T> {
    pub state: State,
    pub target: T,
}

/// Anything that maps states to priors over the full vocabulary and a value in [0, 1].
pub trait PolicyValueModel<T: Real>: Send + Sync {
    fn vocab_size(&self) -> usize;

    fn evaluate_batch(&self, states: &[State]) -> Result<Vec<Evaluation<T>>, ModelError>;

    fn evaluate(&self, state: &State) -> Result<Evaluation<T>, ModelError> {
        let mut out = self.evaluate_batch(std::slice::from_ref(state))?;
        out.pop()
            .ok_or_else(|| ModelError::InvalidState("model returned no evaluation".into()))
    }
}

/// Models whose parameters can be updated. Updates need exclusive access.
pub trait TrainableModel<T: Real>: PolicyValueModel<T> {
    /// One gradient step on
    /// `sum_i [ w_v (b_i - v_i)^2 - sum_{a in pi_i} pi_i(a) ln p_i(a) ] + c |theta|^2`
    /// where `p_i` are the model's raw probabilities at the retained actions.
    fn apply_update(
        &mut self,
        batch: &[TrainingSample<T>],
        params: &TrainParams<T>,
    ) -> Result<LossReport<T>, ModelError>;

    /// One descent step on `-sum_i w_i ln p(a_i | s_i)`; returns the pre-step loss.
    fn policy_step(&mut self, items: &[WeightedAction<T>], lr: T) -> Result<T, ModelError>;

    /// One descent step on `sum_i (v(s_i) - target_i)^2`; returns the pre-step loss.
    fn value_step(&mut self, items: &[ValueTarget<T>], lr: T) -> Result<T, ModelError>;
}

impl<T: Real, M: PolicyValueModel<T> + ?Sized> PolicyValueModel<T> for &M {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn evaluate_batch(&self, states: &[State]) -> Result<Vec<Evaluation<T>>, ModelError> {
        (**self).evaluate_batch(states)
    }
}

/// Model selected at run time (CLI, checkpoints).
#[derive(Debug)]
pub enum AnyModel<T> {
    Tabular(TabularModel<T>),
    Oracle(OracleModel),
    Remote(RemoteModel),
}

impl<T: Real> AnyModel<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            AnyModel::Tabular(_) => "tabular",
            AnyModel::Oracle(_) => "oracle",
            AnyModel::Remote(_) => "remote",
        }
    }
}

impl<T: Real> PolicyValueModel<T> for AnyModel<T> {
    fn vocab_size(&self) -> usize {
        match self {
            AnyModel::Tabular(m) => m.vocab_size(),
            AnyModel::Oracle(m) => PolicyValueModel::<T>::vocab_size(m),
            AnyModel::Remote(m) => PolicyValueModel::<T>::vocab_size(m),
        }
    }

    fn evaluate_batch(&self, states: &[State]) -> Result<Vec<Evaluation<T>>, ModelError> {
        match self {
            AnyModel::Tabular(m) => m.evaluate_batch(states),
            AnyModel::Oracle(m) => m.evaluate_batch(states),
            AnyModel::Remote(m) => m.evaluate_batch(states),
        }
    }
}

impl<T: Real> TrainableModel<T> for AnyModel<T> {
    fn apply_update(
        &mut self,
        batch: &[TrainingSample<T>],
        params: &TrainParams<T>,
    ) -> Result<LossReport<T>, ModelError> {
        match self {
            AnyModel::Tabular(m) => m.apply_update(batch, params),
            AnyModel::Oracle(_) => Err(ModelError::NotTrainable),
            AnyModel::Remote(m) => m.apply_update(batch, params),
        }
    }

    fn policy_step(&mut self, items: &[WeightedAction<T>], lr: T) -> Result<T, ModelError> {
        match self {
            AnyModel::Tabular(m) => m.policy_step(items, lr),
            AnyModel::Oracle(_) => Err(ModelError::NotTrainable),
            AnyModel::Remote(m) => m.policy_step(items, lr),
        }
    }

    fn value_step(&mut self, items: &[ValueTarget<T>], lr: T) -> Result<T, ModelError> {
        match self {
            AnyModel::Tabular(m) => m.value_step(items, lr),
            AnyModel::Oracle(_) => Err(ModelError::NotTrainable),
            AnyModel::Remote(m) => m.value_step(items, lr),
        }
    }
}

/// Appends the argmax token (ties to the lowest id) until EOS or `max_len`
/// tokens. The result excludes BOS and includes EOS when produced.
pub fn greedy_decode<T: Real, M: PolicyValueModel<T> + ?Sized>(
    model: &M,
    src: &[TokenId],
    max_len: usize,
) -> Result<Vec<TokenId>, ModelError> {
    let mut state = State::initial(src);
    while state.emitted().len() < max_len {
        let action = model.evaluate(&state)?.best_action();
        state.prefix.push(action);
        if action == EOS {
            break;
        }
    }
    state.prefix.remove(0);
    Ok(state.prefix)
}

/// Default translation length cap for a source sentence.
pub fn default_max_len(src_len: usize) -> usize {
    2 * src_len + 5
}
