//! Client side of the remote policy/value protocol.

use std::fmt;
use std::io::{self, Read, Write};
use std::net::TcpStream;
#[cfg(unix)]
use std::os::unix::net::UnixStream;
use std::sync::Mutex;

use super::protocol::{read_message, write_message, Message, WireSample};
use super::{
    Evaluation, LossReport, ModelError, PolicyValueModel, State, TrainParams, TrainableModel,
    TrainingSample, ValueTarget, WeightedAction,
};
use crate::scalar::Real;

trait Stream: Read + Write + Send {}
impl<S: Read + Write + Send> Stream for S {}

struct Conn {
    stream: Box<dyn Stream>,
    next_id: u64,
}

/// A model served by another process. Endpoints are `unix:/path/to.sock`,
/// `tcp:host:port`, or a bare `host:port`.
pub struct RemoteModel {
    endpoint: String,
    vocab_size: usize,
    conn: Mutex<Conn>,
}

impl fmt::Debug for RemoteModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteModel")
            .field("endpoint", &self.endpoint)
            .field("vocab_size", &self.vocab_size)
            .finish()
    }
}

fn open(endpoint: &str) -> io::Result<Box<dyn Stream>> {
    #[cfg(unix)]
    if let Some(path) = endpoint.strip_prefix("unix:") {
        return Ok(Box::new(UnixStream::connect(path)?));
    }
    let addr = endpoint.strip_prefix("tcp:").unwrap_or(endpoint);
    let s = TcpStream::connect(addr)?;
    s.set_nodelay(true)?;
    Ok(Box::new(s))
}

impl RemoteModel {
    /// Connects and performs the vocabulary handshake.
    pub fn connect(
        endpoint: &str,
        vocab_size: usize,
        fingerprint: &str,
    ) -> Result<Self, ModelError> {
        let stream = open(endpoint).map_err(|source| ModelError::Unreachable {
            endpoint: endpoint.to_string(),
            source,
        })?;
        let model = Self {
            endpoint: endpoint.to_string(),
            vocab_size,
            conn: Mutex::new(Conn { stream, next_id: 1 }),
        };
        let reply = model.exchange(&Message::Hello {
            vocab_size,
            fingerprint: fingerprint.to_string(),
        })?;
        match reply {
            Message::HelloOk { vocab_size: v } if v == vocab_size => Ok(model),
            other => Err(model.unexpected(other)),
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn protocol(&self, msg: impl Into<String>) -> ModelError {
        ModelError::Protocol {
            endpoint: self.endpoint.clone(),
            msg: msg.into(),
        }
    }

    fn unexpected(&self, reply: Message) -> ModelError {
        match reply {
            Message::Error { code, message, .. } => ModelError::Server {
                endpoint: self.endpoint.clone(),
                code,
                message,
            },
            other => self.protocol(format!("unexpected reply {other:?}")),
        }
    }

    fn io(&self, source: io::Error) -> ModelError {
        ModelError::Unreachable {
            endpoint: self.endpoint.clone(),
            source,
        }
    }

    fn exchange(&self, msg: &Message) -> Result<Message, ModelError> {
        let mut conn = self.conn.lock().unwrap_or_else(|e| e.into_inner());
        write_message(&mut conn.stream, msg).map_err(|e| self.io(e))?;
        read_message(&mut conn.stream)
            .map_err(|e| self.io(e))?
            .ok_or_else(|| self.io(io::ErrorKind::UnexpectedEof.into()))
    }

    fn next_id(&self) -> u64 {
        let mut conn = self.conn.lock().unwrap_or_else(|e| e.into_inner());
        let id = conn.next_id;
        conn.next_id += 1;
        id
    }

    fn check_id(&self, sent: u64, got: u64) -> Result<(), ModelError> {
        if sent == got {
            Ok(())
        } else {
            Err(self.protocol(format!("reply id {got} does not match request {sent}")))
        }
    }

    pub fn save(&self, path: &str) -> Result<(), ModelError> {
        let id = self.next_id();
        match self.exchange(&Message::Save {
            id: Some(id),
            path: path.to_string(),
        })? {
            Message::SaveOk { .. } => Ok(()),
            other => Err(self.unexpected(other)),
        }
    }

    pub fn load(&self, path: &str) -> Result<(), ModelError> {
        let id = self.next_id();
        match self.exchange(&Message::Load {
            id: Some(id),
            path: path.to_string(),
        })? {
            Message::LoadOk { .. } => Ok(()),
            other => Err(self.unexpected(other)),
        }
    }

    pub fn shutdown(self) -> Result<(), ModelError> {
        let mut conn = self.conn.lock().unwrap_or_else(|e| e.into_inner());
        write_message(&mut conn.stream, &Message::Shutdown).map_err(|e| self.io(e))
    }
}

impl<T: Real> PolicyValueModel<T> for RemoteModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn evaluate_batch(&self, states: &[State]) -> Result<Vec<Evaluation<T>>, ModelError> {
        if states.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let id = self.next_id();
        let reply = self.exchange(&Message::Eval {
            id,
            states: states.to_vec(),
        })?;
        let (got, priors, values) = match reply {
            Message::EvalOk { id, priors, values } => (id, priors, values),
            other => return Err(self.unexpected(other)),
        };
        self.check_id(id, got)?;
        if priors.len() != states.len() || values.len() != states.len() {
            return Err(self.protocol(format!(
                "expected {} evaluations, got {} priors / {} values",
                states.len(),
                priors.len(),
                values.len()
            )));
        }
        priors
            .into_iter()
            .zip(values)
            .map(|(p, v)| {
                if p.len() != self.vocab_size {
                    return Err(self.protocol(format!(
                        "prior vector of length {} for vocabulary {}",
                        p.len(),
                        self.vocab_size
                    )));
                }
                let sum: f64 = p.iter().sum();
                if (sum - 1.0).abs() > 1e-4 || p.iter().any(|x| x.is_nan() || *x < 0.0) {
                    return Err(
                        self.protocol(format!("priors do not form a distribution (sum {sum})"))
                    );
                }
                if !(0.0..=1.0).contains(&v) {
                    return Err(self.protocol(format!("value {v} outside [0, 1]")));
                }
                // renormalize after narrowing so sums hold at the local precision
                let mut priors: Vec<T> = p.iter().map(|&x| T::lit(x)).collect();
                let total: T = priors.iter().copied().sum();
                for x in &mut priors {
                    *x = *x / total;
                }
                Ok(Evaluation {
                    priors,
                    value: T::lit(v),
                })
            })
            .collect()
    }
}

impl<T: Real> TrainableModel<T> for RemoteModel {
    fn apply_update(
        &mut self,
        batch: &[TrainingSample<T>],
        params: &TrainParams<T>,
    ) -> Result<LossReport<T>, ModelError> {
        let id = self.next_id();
        let value_weight = if params.train_value {
            params.value_loss_weight.as_f64()
        } else {
            0.0
        };
        let reply = self.exchange(&Message::Train {
            id,
            lr: params.learning_rate.as_f64(),
            c: params.l2_coeff.as_f64(),
            value_loss_weight: (value_weight != 1.0).then_some(value_weight),
            samples: batch.iter().map(WireSample::from).collect(),
        })?;
        match reply {
            Message::TrainOk { id: got, loss } => {
                self.check_id(id, got)?;
                Ok(LossReport {
                    total: T::lit(loss.total),
                    value_term: T::lit(loss.value_term),
                    policy_term: T::lit(loss.policy_term),
                    l2_term: T::lit(loss.l2_term),
                })
            }
            other => Err(self.unexpected(other)),
        }
    }

    fn policy_step(&mut self, _: &[WeightedAction<T>], _: T) -> Result<T, ModelError> {
        Err(ModelError::Unsupported(
            "policy-gradient steps over the remote protocol",
        ))
    }

    fn value_step(&mut self, _: &[ValueTarget<T>], _: T) -> Result<T, ModelError> {
        Err(ModelError::Unsupported(
            "value regression over the remote protocol",
        ))
    }
}
