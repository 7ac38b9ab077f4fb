//! Tabular softmax policy with a sigmoid value per feature.
//!
//! The feature of a state is the source token mirrored around the current
//! output position, `src[|src| - 1 - t]` for `t` emitted tokens, or a
//! dedicated end feature once the source is exhausted. Each feature owns one
//! row of `|V|` policy logits and one value parameter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    Evaluation, LossReport, ModelError, PolicyValueModel, State, TrainParams, TrainableModel,
    TrainingSample, ValueTarget, WeightedAction, PROB_FLOOR,
};
use crate::corpus::{TokenId, UNK};
use crate::scalar::{sigmoid, softmax_into, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct TabularModel<T> {
    vocab_size: usize,
    fingerprint: String,
    // (vocab_size + 1) rows of vocab_size logits, then (vocab_size + 1) value parameters.
    params: Vec<T>,
}

impl<T: Real> TabularModel<T> {
    /// Zero-initialized model: uniform priors and value 0.5 everywhere.
    pub fn new(vocab_size: usize, fingerprint: impl Into<String>) -> Self {
        let rows = vocab_size + 1;
        Self {
            vocab_size,
            fingerprint: fingerprint.into(),
            params: vec![T::zero(); rows * vocab_size + rows],
        }
    }

    /// Logits drawn uniformly from `[-scale, scale]`; value parameters start at zero.
    pub fn random_init(
        vocab_size: usize,
        fingerprint: impl Into<String>,
        scale: T,
        seed: u64,
    ) -> Self {
        let mut m = Self::new(vocab_size, fingerprint);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = m.num_rows() * vocab_size;
        for p in &mut m.params[..n] {
            *p = scale * T::lit(rng.gen_range(-1.0..=1.0));
        }
        m
    }

    pub(crate) fn from_params(
        vocab_size: usize,
        fingerprint: String,
        params: Vec<T>,
    ) -> Option<Self> {
        let rows = vocab_size + 1;
        (params.len() == rows * vocab_size + rows).then_some(Self {
            vocab_size,
            fingerprint,
            params,
        })
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn num_rows(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn end_feature(&self) -> usize {
        self.vocab_size
    }

    /// Flat parameter vector: logits row-major, then the value parameters.
    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn feature(&self, state: &State) -> usize {
        let t = state.emitted().len();
        let n = state.src.len();
        if t < n {
            let tok = state.src[n - 1 - t] as usize;
            if tok < self.vocab_size {
                tok
            } else {
                UNK as usize
            }
        } else {
            self.end_feature()
        }
    }

    pub fn logits(&self, feature: usize) -> &[T] {
        &self.params[feature * self.vocab_size..(feature + 1) * self.vocab_size]
    }

    fn value_index(&self, feature: usize) -> usize {
        self.num_rows() * self.vocab_size + feature
    }

    pub fn value_param(&self, feature: usize) -> T {
        self.params[self.value_index(feature)]
    }

    fn is_value_index(&self, i: usize) -> bool {
        i >= self.num_rows() * self.vocab_size
    }

    fn priors(&self, feature: usize, out: &mut Vec<T>) {
        softmax_into(self.logits(feature), out);
    }

    fn value(&self, feature: usize) -> T {
        sigmoid(self.value_param(feature))
    }

    fn check_action(&self, a: TokenId) -> Result<usize, ModelError> {
        let a = a as usize;
        if a < self.vocab_size {
            Ok(a)
        } else {
            Err(ModelError::InvalidState(format!(
                "action {a} outside vocabulary of {}",
                self.vocab_size
            )))
        }
    }

    fn l2(&self, params: &TrainParams<T>) -> T {
        if params.l2_coeff == T::zero() {
            return T::zero();
        }
        let sum: T = self
            .params
            .iter()
            .enumerate()
            .filter(|&(i, _)| params.train_value || !self.is_value_index(i))
            .map(|(_, &p)| p * p)
            .sum();
        params.l2_coeff * sum
    }

    /// Objective minimized by [`TrainableModel::apply_update`] together with its
    /// gradient over the flat parameter vector.
    pub fn update_objective(
        &self,
        batch: &[TrainingSample<T>],
        params: &TrainParams<T>,
    ) -> Result<(LossReport<T>, Vec<T>), ModelError> {
        let floor = T::lit(PROB_FLOOR);
        let two = T::lit(2.0);
        let mut grad = vec![T::zero(); self.params.len()];
        let mut report = LossReport::default();
        let mut probs = Vec::with_capacity(self.vocab_size);
        let value_weight = if params.train_value {
            params.value_loss_weight
        } else {
            T::zero()
        };
        for sample in batch {
            let f = self.feature(&sample.state);
            if value_weight != T::zero() {
                let v = self.value(f);
                let resid = sample.bleu - v;
                report.value_term = report.value_term + value_weight * resid * resid;
                let g = &mut grad[self.value_index(f)];
                *g = *g - value_weight * two * resid * v * (T::one() - v);
            }
            if sample.visit_probs.is_empty() {
                continue;
            }
            self.priors(f, &mut probs);
            let row = f * self.vocab_size;
            for (&a, &pi) in &sample.visit_probs {
                let a = self.check_action(a)?;
                let p = probs[a];
                report.policy_term = report.policy_term - pi * p.max(floor).ln();
                if p > floor {
                    // d(-pi ln p_a)/d logit_k = pi (p_k - [k == a])
                    for (k, &pk) in probs.iter().enumerate() {
                        grad[row + k] = grad[row + k] + pi * pk;
                    }
                    grad[row + a] = grad[row + a] - pi;
                }
            }
        }
        if params.l2_coeff != T::zero() {
            for (i, g) in grad.iter_mut().enumerate() {
                if params.train_value || !self.is_value_index(i) {
                    *g = *g + two * params.l2_coeff * self.params[i];
                }
            }
        }
        report.l2_term = self.l2(params);
        report.total = report.value_term + report.policy_term + report.l2_term;
        Ok((report, grad))
    }

    /// `-sum_i w_i ln p(a_i | s_i)` and its gradient.
    pub fn policy_objective(&self, items: &[WeightedAction<T>]) -> Result<(T, Vec<T>), ModelError> {
        let floor = T::lit(PROB_FLOOR);
        let mut grad = vec![T::zero(); self.params.len()];
        let mut loss = T::zero();
        let mut probs = Vec::with_capacity(self.vocab_size);
        for it in items {
            let a = self.check_action(it.action)?;
            let f = self.feature(&it.state);
            self.priors(f, &mut probs);
            let p = probs[a];
            loss = loss - it.weight * p.max(floor).ln();
            if p > floor && it.weight != T::zero() {
                let row = f * self.vocab_size;
                for (k, &pk) in probs.iter().enumerate() {
                    grad[row + k] = grad[row + k] + it.weight * pk;
                }
                grad[row + a] = grad[row + a] - it.weight;
            }
        }
        Ok((loss, grad))
    }

    /// `sum_i (v(s_i) - target_i)^2` and its gradient.
    pub fn value_objective(&self, items: &[ValueTarget<T>]) -> (T, Vec<T>) {
        let two = T::lit(2.0);
        let mut grad = vec![T::zero(); self.params.len()];
        let mut loss = T::zero();
        for it in items {
            let f = self.feature(&it.state);
            let v = self.value(f);
            let d = v - it.target;
            loss = loss + d * d;
            let g = &mut grad[self.value_index(f)];
            *g = *g + two * d * v * (T::one() - v);
        }
        (loss, grad)
    }

    fn descend(&mut self, grad: &[T], lr: T) {
        for (p, &g) in self.params.iter_mut().zip(grad) {
            *p = *p - lr * g;
        }
    }
}

impl<T: Real> PolicyValueModel<T> for TabularModel<T> {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn evaluate_batch(&self, states: &[State]) -> Result<Vec<Evaluation<T>>, ModelError> {
        if states.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        for s in states {
            s.validate()?;
        }
        Ok(states
            .iter()
            .map(|s| {
                let f = self.feature(s);
                let mut priors = Vec::with_capacity(self.vocab_size);
                self.priors(f, &mut priors);
                Evaluation {
                    priors,
                    value: self.value(f),
                }
            })
            .collect())
    }
}

impl<T: Real> TrainableModel<T> for TabularModel<T> {
    fn apply_update(
        &mut self,
        batch: &[TrainingSample<T>],
        params: &TrainParams<T>,
    ) -> Result<LossReport<T>, ModelError> {
        let (report, grad) = self.update_objective(batch, params)?;
        self.descend(&grad, params.learning_rate);
        Ok(report)
    }

    fn policy_step(&mut self, items: &[WeightedAction<T>], lr: T) -> Result<T, ModelError> {
        let (loss, grad) = self.policy_objective(items)?;
        self.descend(&grad, lr);
        Ok(loss)
    }

    fn value_step(&mut self, items: &[ValueTarget<T>], lr: T) -> Result<T, ModelError> {
        let (loss, grad) = self.value_objective(items);
        self.descend(&grad, lr);
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::corpus::{BOS, EOS};

    fn state(src: &[TokenId], emitted: &[TokenId]) -> State {
        let mut prefix = vec![BOS];
        prefix.extend_from_slice(emitted);
        State {
            src: src.to_vec(),
            prefix,
        }
    }

    #[test]
    fn fresh_model_is_uniform() {
        let m = TabularModel::<f64>::new(6, "fp");
        let e = m.evaluate(&state(&[4, 5], &[])).unwrap();
        assert!(e.priors.iter().all(|&p| (p - 1.0 / 6.0).abs() < 1e-15));
        assert_eq!(e.value, 0.5);
        assert!(matches!(m.evaluate_batch(&[]), Err(ModelError::EmptyBatch)));
    }

    #[test]
    fn feature_mirrors_the_source() {
        let m = TabularModel::<f64>::new(10, "fp");
        let src = [4, 5, 6];
        assert_eq!(m.feature(&state(&src, &[])), 6);
        assert_eq!(m.feature(&state(&src, &[9])), 5);
        assert_eq!(m.feature(&state(&src, &[9, 9])), 4);
        assert_eq!(m.feature(&state(&src, &[9, 9, 9])), m.end_feature());
        assert_eq!(m.feature(&state(&src, &[9, 9, 9, EOS])), m.end_feature());
    }

    #[test]
    fn zero_residual_and_empty_visits() {
        let mut m = TabularModel::<f64>::new(6, "fp");
        let sample = TrainingSample {
            state: state(&[4], &[]),
            visit_probs: BTreeMap::new(),
            bleu: 0.5,
        };
        let before = m.clone();
        let r = m
            .apply_update(std::slice::from_ref(&sample), &TrainParams::new(0.5))
            .unwrap();
        assert_eq!(r.value_term, 0.0);
        assert_eq!(r.policy_term, 0.0);
        assert_eq!(m, before);

        let moved = TrainingSample {
            bleu: 1.0,
            ..sample
        };
        let r = m.apply_update(&[moved], &TrainParams::new(0.5)).unwrap();
        assert!((r.value_term - 0.25).abs() < 1e-15);
        assert_eq!(r.policy_term, 0.0);
        // only the value parameter of the touched feature moved
        let changed: Vec<usize> = (0..m.params().len())
            .filter(|&i| m.params()[i] != before.params()[i])
            .collect();
        assert_eq!(changed, vec![m.num_rows() * 6 + 4]);
    }

    #[test]
    fn frozen_value_is_untouched() {
        let mut m = TabularModel::<f64>::random_init(6, "fp", 1.0, 3);
        let mut probs = BTreeMap::new();
        probs.insert(4, 0.7);
        let sample = TrainingSample {
            state: state(&[5], &[]),
            visit_probs: probs,
            bleu: 1.0,
        };
        let p = TrainParams {
            l2_coeff: 0.1,
            train_value: false,
            ..TrainParams::new(0.5)
        };
        let before = m.clone();
        let r = m.apply_update(&[sample], &p).unwrap();
        assert_eq!(r.value_term, 0.0);
        let split = m.num_rows() * 6;
        assert_eq!(&m.params()[split..], &before.params()[split..]);
        assert_ne!(&m.params()[..split], &before.params()[..split]);
    }

    #[test]
    fn floor_guards_log_of_zero() {
        let mut m = TabularModel::<f64>::new(6, "fp");
        m.params_mut()[4 * 6] = -1e4; // p(0 | feature 4) underflows to 0
        let items = vec![WeightedAction {
            state: state(&[4], &[]),
            action: 0,
            weight: 1.0,
        }];
        let (loss, grad) = m.policy_objective(&items).unwrap();
        assert!((loss + PROB_FLOOR.ln()).abs() < 1e-9);
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn out_of_vocab_action_rejected() {
        let m = TabularModel::<f64>::new(6, "fp");
        let items = vec![WeightedAction {
            state: state(&[4], &[]),
            action: 6,
            weight: 1.0,
        }];
        assert!(m.policy_objective(&items).is_err());
    }

    #[test]
    fn works_in_f32() {
        let mut m = TabularModel::<f32>::new(6, "fp");
        let items = vec![WeightedAction {
            state: state(&[4], &[]),
            action: 5,
            weight: 1.0f32,
        }];
        for _ in 0..50 {
            m.policy_step(&items, 0.5).unwrap();
        }
        let e = m.evaluate(&state(&[4], &[])).unwrap();
        assert_eq!(e.best_action(), 5);
        assert!(e.priors[5] > 0.9);
    }
}
