//! Versioned plain-text checkpoints.
//!
//! ```text
//! nmt-mcts-checkpoint
//! format_version 1
//! model_kind tabular
//! vocab_size 44
//! vocab_fingerprint 1a2b...
//! row <feature> <value-param> <logit_0> ... <logit_{|V|-1}>
//! ```
//!
//! Oracle checkpoints carry `reorder`, `confidence` and `mapping` lines instead
//! of rows. Numbers are written in shortest round-trip decimal form, so loading
//! and re-saving a tabular model reproduces the file byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{AnyModel, ModelError, OracleModel, TabularModel};
use crate::corpus::{Reorder, TokenId};
use crate::scalar::Real;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "nmt-mcts-checkpoint";

fn render_tabular<T: Real>(m: &TabularModel<T>) -> String {
    let v = super::PolicyValueModel::vocab_size(m);
    let mut out = String::new();
    writeln!(out, "{MAGIC}").unwrap();
    writeln!(out, "format_version {CHECKPOINT_VERSION}").unwrap();
    writeln!(out, "model_kind tabular").unwrap();
    writeln!(out, "vocab_size {v}").unwrap();
    writeln!(out, "vocab_fingerprint {}", m.fingerprint()).unwrap();
    for f in 0..m.num_rows() {
        write!(out, "row {f} {}", m.value_param(f)).unwrap();
        for l in m.logits(f) {
            write!(out, " {l}").unwrap();
        }
        out.push('\n');
    }
    out
}

fn render_oracle(m: &OracleModel) -> String {
    let reorder = match m.reorder() {
        Reorder::Reverse => "reverse",
        Reorder::Identity => "identity",
    };
    let mapping: Vec<String> = m.mapping().iter().map(|t| t.to_string()).collect();
    format!(
        "{MAGIC}\nformat_version {CHECKPOINT_VERSION}\nmodel_kind oracle\nvocab_size {}\nreorder {reorder}\nconfidence {}\nmapping {}\n",
        m.mapping().len(),
        m.confidence(),
        mapping.join(" ")
    )
}

pub fn save_model<T: Real>(model: &AnyModel<T>, path: &Path) -> Result<(), ModelError> {
    let text = match model {
        AnyModel::Tabular(m) => render_tabular(m),
        AnyModel::Oracle(m) => render_oracle(m),
        AnyModel::Remote(_) => return Err(ModelError::Unsupported("saving a remote model")),
    };
    fs::write(path, text).map_err(|source| ModelError::CheckpointIo {
        path: path.to_path_buf(),
        source,
    })
}

struct Reader<'a> {
    path: &'a Path,
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> ModelError {
        ModelError::Checkpoint {
            path: self.path.to_path_buf(),
            msg: msg.into(),
        }
    }

    fn next_line(&mut self) -> Result<(usize, &'a str), ModelError> {
        self.lines
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or_else(|| self.err("unexpected end of file"))
    }

    fn field(&mut self, key: &str) -> Result<&'a str, ModelError> {
        let (n, line) = self.next_line()?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok(v),
            _ => Err(self.err(format!("line {n}: expected '{key} ...'"))),
        }
    }

    fn parse<V: std::str::FromStr>(&self, key: &str, s: &str) -> Result<V, ModelError> {
        s.trim()
            .parse()
            .map_err(|_| self.err(format!("bad {key} '{s}'")))
    }
}

pub fn load_model<T: Real>(path: &Path) -> Result<AnyModel<T>, ModelError> {
    let text = fs::read_to_string(path).map_err(|source| ModelError::CheckpointIo {
        path: path.to_path_buf(),
        source,
    })?;
    let mut r = Reader {
        path,
        lines: text.lines().enumerate(),
    };
    if r.next_line()?.1 != MAGIC {
        return Err(r.err("not a checkpoint file"));
    }
    let version: u32 = {
        let v = r.field("format_version")?;
        r.parse("format_version", v)?
    };
    if version != CHECKPOINT_VERSION {
        return Err(r.err(format!(
            "unsupported format_version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let kind = r.field("model_kind")?;
    let vocab_size: usize = {
        let v = r.field("vocab_size")?;
        r.parse("vocab_size", v)?
    };
    if vocab_size < 2 {
        return Err(r.err("vocab_size too small"));
    }
    match kind {
        "tabular" => {
            let fingerprint = r.field("vocab_fingerprint")?.to_string();
            let rows = vocab_size + 1;
            let mut logits = Vec::with_capacity(rows * vocab_size);
            let mut values = Vec::with_capacity(rows);
            for f in 0..rows {
                let body = r.field("row")?;
                let mut parts = body.split(' ');
                let idx: usize = r.parse("row index", parts.next().unwrap_or(""))?;
                if idx != f {
                    return Err(r.err(format!("expected row {f}, found {idx}")));
                }
                values.push(r.parse::<T>("value", parts.next().unwrap_or(""))?);
                let before = logits.len();
                for p in parts {
                    logits.push(r.parse::<T>("logit", p)?);
                }
                if logits.len() - before != vocab_size {
                    return Err(r.err(format!("row {f}: expected {vocab_size} logits")));
                }
            }
            if r.lines.next().is_some() {
                return Err(r.err("trailing data"));
            }
            logits.extend(values);
            TabularModel::from_params(vocab_size, fingerprint, logits)
                .map(AnyModel::Tabular)
                .ok_or_else(|| r.err("parameter count mismatch"))
        }
        "oracle" => {
            let reorder: Reorder = {
                let v = r.field("reorder")?;
                v.parse().map_err(|e: String| r.err(e))?
            };
            let confidence: f64 = {
                let v = r.field("confidence")?;
                r.parse("confidence", v)?
            };
            let mapping: Vec<TokenId> = r
                .field("mapping")?
                .split(' ')
                .map(|t| r.parse("mapping id", t))
                .collect::<Result<_, _>>()?;
            if mapping.len() != vocab_size || mapping.iter().any(|&t| t as usize >= vocab_size) {
                return Err(r.err("mapping does not match vocab_size"));
            }
            Ok(AnyModel::Oracle(OracleModel::with_confidence(
                mapping, reorder, confidence,
            )))
        }
        other => Err(r.err(format!("unknown model_kind '{other}'"))),
    }
}
