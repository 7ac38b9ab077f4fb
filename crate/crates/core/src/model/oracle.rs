use super::{Evaluation, ModelError, PolicyValueModel, State};
use crate::corpus::{Reorder, TokenId, EOS};
use crate::scalar::Real;

/// Test oracle for the synthetic task: puts `confidence` mass on the correct
/// next token (EOS once the source is exhausted), spreads the rest uniformly,
/// and always predicts value 1.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleModel {
    mapping: Vec<TokenId>,
    reorder: Reorder,
    confidence: f64,
}

impl OracleModel {
    pub const DEFAULT_CONFIDENCE: f64 = 0.99;

    /// `mapping[id]` is the translation of token `id`; its length is |V|.
    pub fn new(mapping: Vec<TokenId>, reorder: Reorder) -> Self {
        Self::with_confidence(mapping, reorder, Self::DEFAULT_CONFIDENCE)
    }

    pub fn with_confidence(mapping: Vec<TokenId>, reorder: Reorder, confidence: f64) -> Self {
        Self {
            mapping,
            reorder,
            confidence,
        }
    }

    pub fn mapping(&self) -> &[TokenId] {
        &self.mapping
    }

    pub fn reorder(&self) -> Reorder {
        self.reorder
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }

    pub fn target(&self, state: &State) -> TokenId {
        let t = state.emitted().len();
        let n = state.src.len();
        if t >= n {
            return EOS;
        }
        let tok = match self.reorder {
            Reorder::Reverse => state.src[n - 1 - t],
            Reorder::Identity => state.src[t],
        };
        self.mapping.get(tok as usize).copied().unwrap_or(tok)
    }
}

impl<T: Real> PolicyValueModel<T> for OracleModel {
    fn vocab_size(&self) -> usize {
        self.mapping.len()
    }

    fn evaluate_batch(&self, states: &[State]) -> Result<Vec<Evaluation<T>>, ModelError> {
        if states.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        for s in states {
            s.validate()?;
        }
        let v = self.mapping.len();
        let rest = T::lit((1.0 - self.confidence) / (v - 1).max(1) as f64);
        Ok(states
            .iter()
            .map(|s| {
                let mut priors = vec![rest; v];
                priors[self.target(s) as usize] = T::lit(self.confidence);
                Evaluation {
                    priors,
                    value: T::one(),
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{SyntheticTask, SyntheticTaskSpec};
    use crate::model::greedy_decode;

    #[test]
    fn oracle_follows_the_task() {
        let task = SyntheticTask::new(SyntheticTaskSpec::default()).unwrap();
        let oracle = OracleModel::new(task.mapping().to_vec(), Reorder::Reverse);
        let src = [4, 9, 17];
        let s = State::initial(&src);
        let e: Evaluation<f64> = oracle.evaluate(&s).unwrap();
        assert_eq!(e.priors[task.map(17) as usize], 0.99);
        assert_eq!(e.value, 1.0);
        assert!((e.priors.iter().sum::<f64>() - 1.0).abs() < 1e-9);

        let done = s.child(1).child(1).child(1);
        let e: Evaluation<f64> = oracle.evaluate(&done).unwrap();
        assert_eq!(e.best_action(), EOS);

        let out = greedy_decode::<f64, _>(&oracle, &src, 20).unwrap();
        assert_eq!(out, task.translate(&src));
    }
}
