//! Wire protocol spoken with remote policy/value servers: length-prefixed
//! (4-byte big-endian) UTF-8 JSON messages over a local stream socket.
//!
//! A session opens with `hello` carrying the vocabulary size and fingerprint;
//! the server answers `hello_ok` or an `error` with code `vocab_mismatch`.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    load_model, save_model, AnyModel, PolicyValueModel, State, TrainParams, TrainableModel,
    TrainingSample,
};
use crate::corpus::TokenId;
use crate::scalar::Real;

pub const MAX_FRAME: usize = 64 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireSample {
    pub src: Vec<TokenId>,
    pub prefix: Vec<TokenId>,
    #[serde(deserialize_with = "action_keys")]
    pub probs: BTreeMap<TokenId, f64>,
    pub bleu: f64,
}

// Action keys travel as JSON object keys, i.e. strings. Inside the tagged
// `Message` enum serde buffers the map and will not parse them back into
// integers by itself.
fn action_keys<'de, D: serde::Deserializer<'de>>(d: D) -> Result<BTreeMap<TokenId, f64>, D::Error> {
    BTreeMap::<String, f64>::deserialize(d)?
        .into_iter()
        .map(|(k, v)| {
            k.parse::<TokenId>().map(|a| (a, v)).map_err(|_| {
                serde::de::Error::custom(format!("action key {k:?} is not a token id"))
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WireLoss {
    pub total: f64,
    pub value_term: f64,
    pub policy_term: f64,
    pub l2_term: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Hello {
        vocab_size: usize,
        fingerprint: String,
    },
    HelloOk {
        vocab_size: usize,
    },
    Eval {
        id: u64,
        states: Vec<State>,
    },
    EvalOk {
        id: u64,
        priors: Vec<Vec<f64>>,
        values: Vec<f64>,
    },
    Train {
        id: u64,
        lr: f64,
        c: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        value_loss_weight: Option<f64>,
        samples: Vec<WireSample>,
    },
    TrainOk {
        id: u64,
        loss: WireLoss,
    },
    Save {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        id: Option<u64>,
        path: String,
    },
    SaveOk {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        id: Option<u64>,
    },
    Load {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        id: Option<u64>,
        path: String,
    },
    LoadOk {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        id: Option<u64>,
    },
    Shutdown,
    Error {
        id: Option<u64>,
        code: String,
        message: String,
    },
}

impl Message {
    pub fn error(id: Option<u64>, code: &str, message: impl Into<String>) -> Self {
        Message::Error {
            id,
            code: code.to_string(),
            message: message.into(),
        }
    }
}

pub fn write_raw<W: Write>(w: &mut W, payload: &[u8]) -> io::Result<()> {
    let len = u32::try_from(payload.len())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(payload)?;
    w.flush()
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> io::Result<()> {
    let payload = serde_json::to_vec(msg)?;
    write_raw(w, &payload)
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub fn read_raw<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            "frame too large",
        ));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

pub fn read_message<R: Read>(r: &mut R) -> io::Result<Option<Message>> {
    match read_raw(r)? {
        None => Ok(None),
        Some(buf) => serde_json::from_slice(&buf)
            .map(Some)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)),
    }
}

impl<T: Real> From<&TrainingSample<T>> for WireSample {
    fn from(s: &TrainingSample<T>) -> Self {
        WireSample {
            src: s.state.src.clone(),
            prefix: s.state.prefix.clone(),
            probs: s
                .visit_probs
                .iter()
                .map(|(&a, &p)| (a, p.as_f64()))
                .collect(),
            bleu: s.bleu.as_f64(),
        }
    }
}

impl<T: Real> From<&WireSample> for TrainingSample<T> {
    fn from(s: &WireSample) -> Self {
        TrainingSample {
            state: State {
                src: s.src.clone(),
                prefix: s.prefix.clone(),
            },
            visit_probs: s.probs.iter().map(|(&a, &p)| (a, T::lit(p))).collect(),
            bleu: T::lit(s.bleu),
        }
    }
}

fn message_id(raw: &[u8]) -> Option<u64> {
    serde_json::from_slice::<serde_json::Value>(raw)
        .ok()?
        .get("id")?
        .as_u64()
}

/// Serves one connection with a local model until `shutdown` or end of
/// stream. Returns `true` when the peer asked for shutdown. This is the
/// reference behaviour remote servers must reproduce.
pub fn serve_connection<T: Real, S: Read + Write>(
    mut stream: S,
    model: &mut AnyModel<T>,
    fingerprint: &str,
) -> io::Result<bool> {
    let mut greeted = false;
    while let Some(raw) = read_raw(&mut stream)? {
        let msg: Message = match serde_json::from_slice(&raw) {
            Ok(m) => m,
            Err(e) => {
                let reply = Message::error(message_id(&raw), "malformed", e.to_string());
                write_message(&mut stream, &reply)?;
                continue;
            }
        };
        let reply = match msg {
            Message::Hello {
                vocab_size,
                fingerprint: fp,
            } => {
                let ours = model.vocab_size();
                if vocab_size != ours || fp != fingerprint {
                    Message::error(
                        None,
                        "vocab_mismatch",
                        format!("server vocab {ours}/{fingerprint}, client {vocab_size}/{fp}"),
                    )
                } else {
                    greeted = true;
                    Message::HelloOk { vocab_size: ours }
                }
            }
            Message::Shutdown => return Ok(true),
            _ if !greeted => Message::error(message_id(&raw), "no_handshake", "send hello first"),
            Message::Eval { id, states } => match model.evaluate_batch(&states) {
                Ok(evals) => Message::EvalOk {
                    id,
                    priors: evals
                        .iter()
                        .map(|e| e.priors.iter().map(|p| p.as_f64()).collect())
                        .collect(),
                    values: evals.iter().map(|e| e.value.as_f64()).collect(),
                },
                Err(e) => Message::error(Some(id), "eval_failed", e.to_string()),
            },
            Message::Train {
                id,
                lr,
                c,
                value_loss_weight,
                samples,
            } => {
                if samples.is_empty() {
                    Message::TrainOk {
                        id,
                        loss: WireLoss::default(),
                    }
                } else {
                    let batch: Vec<TrainingSample<T>> = samples.iter().map(Into::into).collect();
                    let w = value_loss_weight.unwrap_or(1.0);
                    let params = TrainParams {
                        learning_rate: T::lit(lr),
                        l2_coeff: T::lit(c),
                        value_loss_weight: T::lit(w),
                        train_value: w != 0.0,
                    };
                    match model.apply_update(&batch, &params) {
                        Ok(r) => Message::TrainOk {
                            id,
                            loss: WireLoss {
                                total: r.total.as_f64(),
                                value_term: r.value_term.as_f64(),
                                policy_term: r.policy_term.as_f64(),
                                l2_term: r.l2_term.as_f64(),
                            },
                        },
                        Err(e) => Message::error(Some(id), "train_failed", e.to_string()),
                    }
                }
            }
            Message::Save { id, path } => match save_model(model, Path::new(&path)) {
                Ok(()) => Message::SaveOk { id },
                Err(e) => Message::error(id, "save_failed", e.to_string()),
            },
            Message::Load { id, path } => match load_model::<T>(Path::new(&path)) {
                Ok(m) if m.vocab_size() == model.vocab_size() => {
                    *model = m;
                    Message::LoadOk { id }
                }
                Ok(_) => Message::error(id, "vocab_mismatch", "checkpoint vocabulary differs"),
                Err(e) => Message::error(id, "load_failed", e.to_string()),
            },
            other => Message::error(
                message_id(&raw),
                "unexpected",
                format!("unexpected message {:?}", std::mem::discriminant(&other)),
            ),
        };
        write_message(&mut stream, &reply)?;
    }
    Ok(false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_message_encodings() {
        let eval = Message::Eval {
            id: 7,
            states: vec![State {
                src: vec![4, 5],
                prefix: vec![1],
            }],
        };
        assert_eq!(
            serde_json::to_string(&eval).unwrap(),
            r#"{"type":"eval","id":7,"states":[{"src":[4,5],"prefix":[1]}]}"#
        );
        let mut probs = BTreeMap::new();
        probs.insert(5, 0.25);
        let train = Message::Train {
            id: 3,
            lr: 0.5,
            c: 0.0,
            value_loss_weight: None,
            samples: vec![WireSample {
                src: vec![4],
                prefix: vec![1],
                probs,
                bleu: 1.0,
            }],
        };
        assert_eq!(
            serde_json::to_string(&train).unwrap(),
            r#"{"type":"train","id":3,"lr":0.5,"c":0.0,"samples":[{"src":[4],"prefix":[1],"probs":{"5":0.25},"bleu":1.0}]}"#
        );
        assert_eq!(
            serde_json::to_string(&Message::Shutdown).unwrap(),
            r#"{"type":"shutdown"}"#
        );
        let parsed: Message = serde_json::from_str(r#"{"type":"save","path":"/tmp/x"}"#).unwrap();
        assert_eq!(
            parsed,
            Message::Save {
                id: None,
                path: "/tmp/x".into()
            }
        );
        let parsed: Message = serde_json::from_str(
            r#"{"type":"eval_ok","id":1,"priors":[[0.5,0.5]],"values":[0.25]}"#,
        )
        .unwrap();
        assert!(matches!(parsed, Message::EvalOk { id: 1, .. }));
    }

    #[test]
    fn framing_roundtrip() {
        let mut buf = Vec::new();
        write_message(&mut buf, &Message::HelloOk { vocab_size: 9 }).unwrap();
        assert_eq!(&buf[..4], &(buf.len() as u32 - 4).to_be_bytes());
        let mut cur = io::Cursor::new(buf);
        assert_eq!(
            read_message(&mut cur).unwrap(),
            Some(Message::HelloOk { vocab_size: 9 })
        );
        assert_eq!(read_message(&mut cur).unwrap(), None);
    }
}
