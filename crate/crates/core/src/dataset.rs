//! Logged bandit feedback and its JSON Lines encoding.
//!
//! One record per line: `{"x": [floats] | {"ctx": int}, "y": int, "r": float, "p0": float}`.
//! Records referring to a context by index need the problem's context table
//! when read back; records carrying features are interned into the table.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoggedRecord {
    pub context: usize,
    pub action: usize,
    pub reward: f64,
    pub propensity: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LoggedDataset {
    pub contexts: Vec<Vec<f64>>,
    pub records: Vec<LoggedRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextEncoding {
    Index,
    Features,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum WireContext {
    Features(Vec<f64>),
    Index { ctx: usize },
}

#[derive(Serialize, Deserialize)]
struct WireRecord {
    x: WireContext,
    y: usize,
    r: f64,
    p0: f64,
}

impl LoggedDataset {
    pub fn new(contexts: Vec<Vec<f64>>, records: Vec<LoggedRecord>) -> Result<Self> {
        let data = Self { contexts, records };
        data.validate()?;
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn features(&self, record: &LoggedRecord) -> &[f64] {
        &self.contexts[record.context]
    }

    /// Every record must reference a known context, carry a finite reward
    /// and a propensity in `(0, 1]`.
    pub fn validate(&self) -> Result<()> {
        for (i, rec) in self.records.iter().enumerate() {
            check_record(i, rec, self.contexts.len())?;
        }
        Ok(())
    }

    pub fn translate_rewards(&self, offset: f64) -> Self {
        let mut out = self.clone();
        for rec in &mut out.records {
            rec.reward += offset;
        }
        out
    }

    /// Splits off the first `n` records; both halves share the context table.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        (
            Self {
                contexts: self.contexts.clone(),
                records: self.records[..n].to_vec(),
            },
            Self {
                contexts: self.contexts.clone(),
                records: self.records[n..].to_vec(),
            },
        )
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W, encoding: ContextEncoding) -> std::io::Result<()> {
        for rec in &self.records {
            let x = match encoding {
                ContextEncoding::Index => WireContext::Index { ctx: rec.context },
                ContextEncoding::Features => WireContext::Features(self.contexts[rec.context].clone()),
            };
            let wire = WireRecord {
                x,
                y: rec.action,
                r: rec.reward,
                p0: rec.propensity,
            };
            serde_json::to_writer(&mut out, &wire)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads JSON Lines. `contexts` seeds the context table; feature records
    /// that match a table row exactly reuse its index, others are appended.
    pub fn read_jsonl<R: BufRead>(input: R, contexts: Option<Vec<Vec<f64>>>) -> Result<Self> {
        let mut contexts = contexts.unwrap_or_default();
        let mut records = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::Parse {
                line: lineno + 1,
                reason: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let wire: WireRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: lineno + 1,
                reason: e.to_string(),
            })?;
            let context = match wire.x {
                WireContext::Index { ctx } => ctx,
                WireContext::Features(x) => match contexts.iter().position(|c| *c == x) {
                    Some(i) => i,
                    None => {
                        contexts.push(x);
                        contexts.len() - 1
                    }
                },
            };
            let rec = LoggedRecord {
                context,
                action: wire.y,
                reward: wire.r,
                propensity: wire.p0,
            };
            check_record(records.len(), &rec, contexts.len())?;
            records.push(rec);
        }
        Ok(Self { contexts, records })
    }
}

pub(crate) fn check_record(i: usize, rec: &LoggedRecord, n_contexts: usize) -> Result<()> {
    let corrupt = |reason: String| Error::CorruptData { record: i, reason };
    if rec.context >= n_contexts {
        return Err(corrupt(format!("context {} not in a table of {n_contexts}", rec.context)));
    }
    if !(rec.propensity > 0.0 && rec.propensity <= 1.0 + 1e-12) {
        return Err(corrupt(format!("propensity {} not in (0, 1]", rec.propensity)));
    }
    if !rec.reward.is_finite() {
        return Err(corrupt(format!("non-finite reward {}", rec.reward)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> LoggedDataset {
        LoggedDataset::new(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![
                LoggedRecord { context: 0, action: 1, reward: 0.0, propensity: 0.5 },
                LoggedRecord { context: 1, action: 0, reward: 0.2, propensity: 1.0 },
            ],
        )
        .unwrap()
    }

    #[test]
    fn index_encoding_reads_back_with_the_table() {
        let data = sample();
        let mut buf = Vec::new();
        data.write_jsonl(&mut buf, ContextEncoding::Index).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(r#"{"x":{"ctx":0},"y":1,"r":0.0,"p0":0.5}"#));
        let back = LoggedDataset::read_jsonl(&buf[..], Some(data.contexts.clone())).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn feature_encoding_interns_contexts() {
        let data = sample();
        let mut buf = Vec::new();
        data.write_jsonl(&mut buf, ContextEncoding::Features).unwrap();
        let back = LoggedDataset::read_jsonl(&buf[..], None).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn zero_propensity_is_corrupt() {
        let line = br#"{"x":[1.0],"y":0,"r":1.0,"p0":0.0}"#;
        let err = LoggedDataset::read_jsonl(&line[..], None).unwrap_err();
        assert!(matches!(err, Error::CorruptData { record: 0, .. }));
    }

    #[test]
    fn unknown_context_index_is_corrupt() {
        let line = br#"{"x":{"ctx":4},"y":0,"r":1.0,"p0":0.5}"#;
        let err = LoggedDataset::read_jsonl(&line[..], Some(vec![vec![0.0]])).unwrap_err();
        assert!(matches!(err, Error::CorruptData { .. }));
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let text = b"{\"x\":[1.0],\"y\":0,\"r\":1.0,\"p0\":0.5}\nnot json\n";
        let err = LoggedDataset::read_jsonl(&text[..], None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }
}
