//! Plain-text persistence for policy/value tables and reward models.
//!
//! Table file:
//! ```text
//! pfppo-table v1
//! kind policy
//! rows 462
//! cols 6
//! <cols values per line, one line per row>
//! ```
//! Value tables use `kind value` and `cols 1`. Reward model file:
//! ```text
//! pfppo-reward-model v1
//! squash tanh
//! dim 5
//! bias <b>
//! weights <w_1> ... <w_d>
//! ```
//! Numbers are written in shortest round-trip form, so a save/load cycle is
//! exact for `f64`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::policy::{PolicyParams, ValueParams};
use crate::reward_model::RewardModel;
use crate::scalar::Scalar;

const TABLE_MAGIC: &str = "pfppo-table v1";
const RM_MAGIC: &str = "pfppo-reward-model v1";

fn write_row<T: Scalar>(out: &mut String, row: &[T]) {
    for (i, x) in row.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        write!(out, "{}", x.as_f64()).unwrap();
    }
    out.push('\n');
}

fn write_table<T: Scalar>(kind: &str, rows: usize, cols: usize, data: &[T]) -> String {
    let mut out = format!("{TABLE_MAGIC}\nkind {kind}\nrows {rows}\ncols {cols}\n");
    for row in data.chunks(cols.max(1)) {
        write_row(&mut out, row);
    }
    out
}

pub fn policy_to_string<T: Scalar>(p: &PolicyParams<T>) -> String {
    write_table("policy", p.num_observations(), p.vocab_size(), p.logits())
}

pub fn value_to_string<T: Scalar>(v: &ValueParams<T>) -> String {
    write_table("value", v.len(), 1, v.values())
}

pub fn reward_model_to_string<T: Scalar>(rm: &RewardModel<T>) -> String {
    let mut out = format!(
        "{RM_MAGIC}\nsquash tanh\ndim {}\nbias {}\nweights",
        rm.dim(),
        rm.bias.as_f64()
    );
    for w in &rm.weights {
        write!(out, " {}", w.as_f64()).unwrap();
    }
    out.push('\n');
    out
}

struct Reader<'a> {
    path: &'a str,
    lines: std::str::Lines<'a>,
}

impl<'a> Reader<'a> {
    fn bad(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_string(),
            reason: reason.into(),
        }
    }

    fn line(&mut self, what: &str) -> Result<&'a str> {
        self.lines
            .next()
            .ok_or_else(|| self.bad(format!("missing {what}")))
    }

    /// Reads `key value` and returns `value`.
    fn field(&mut self, key: &str) -> Result<&'a str> {
        let line = self.line(key)?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok(v.trim()),
            _ => Err(self.bad(format!("expected `{key} ...`, found `{line}`"))),
        }
    }

    fn usize_field(&mut self, key: &str) -> Result<usize> {
        let v = self.field(key)?;
        v.parse().map_err(|_| self.bad(format!("bad {key} `{v}`")))
    }

    fn numbers<T: Scalar>(&self, s: &str) -> Result<Vec<T>> {
        s.split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .map(T::lit)
                    .ok_or_else(|| self.bad(format!("bad number `{tok}`")))
            })
            .collect()
    }
}

fn read_table<T: Scalar>(path: &str, text: &str, kind: &str) -> Result<(usize, usize, Vec<T>)> {
    let mut r = Reader {
        path,
        lines: text.lines(),
    };
    if r.line("header")? != TABLE_MAGIC {
        return Err(r.bad("not a table file"));
    }
    let found = r.field("kind")?;
    if found != kind {
        return Err(r.bad(format!("expected a {kind} table, found {found}")));
    }
    let rows = r.usize_field("rows")?;
    let cols = r.usize_field("cols")?;
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let line = r.line("table row")?;
        let row = r.numbers::<T>(line)?;
        if row.len() != cols {
            return Err(r.bad(format!(
                "row {i} has {} entries, expected {cols}",
                row.len()
            )));
        }
        data.extend(row);
    }
    if r.lines.any(|l| !l.trim().is_empty()) {
        return Err(r.bad("trailing data"));
    }
    Ok((rows, cols, data))
}

pub fn policy_from_str<T: Scalar>(path: &str, text: &str) -> Result<PolicyParams<T>> {
    let (rows, cols, data) = read_table(path, text, "policy")?;
    PolicyParams::from_logits(rows, cols, data)
}

pub fn value_from_str<T: Scalar>(path: &str, text: &str) -> Result<ValueParams<T>> {
    let (_, cols, data) = read_table(path, text, "value")?;
    if cols != 1 {
        return Err(Error::Format {
            path: path.into(),
            reason: format!("value table has {cols} columns"),
        });
    }
    ValueParams::from_values(data)
}

pub fn reward_model_from_str<T: Scalar>(path: &str, text: &str) -> Result<RewardModel<T>> {
    let mut r = Reader {
        path,
        lines: text.lines(),
    };
    if r.line("header")? != RM_MAGIC {
        return Err(r.bad("not a reward model file"));
    }
    let squash = r.field("squash")?;
    if squash != "tanh" {
        return Err(r.bad(format!("unsupported squash `{squash}`")));
    }
    let dim = r.usize_field("dim")?;
    let bias = r.field("bias")?;
    let bias = r.numbers::<T>(bias)?;
    let line = r.line("weights")?;
    let weights = match line.strip_prefix("weights") {
        Some(rest) => r.numbers::<T>(rest)?,
        None => return Err(r.bad("expected `weights ...`")),
    };
    if bias.len() != 1 || weights.len() != dim {
        return Err(r.bad(format!("expected 1 bias and {dim} weights")));
    }
    Ok(RewardModel {
        weights,
        bias: bias[0],
    })
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn save_policy<T: Scalar>(path: &Path, p: &PolicyParams<T>) -> Result<()> {
    write_file(path, &policy_to_string(p))
}

pub fn load_policy<T: Scalar>(path: &Path) -> Result<PolicyParams<T>> {
    policy_from_str(&path.display().to_string(), &read_file(path)?)
}

pub fn save_value<T: Scalar>(path: &Path, v: &ValueParams<T>) -> Result<()> {
    write_file(path, &value_to_string(v))
}

pub fn load_value<T: Scalar>(path: &Path) -> Result<ValueParams<T>> {
    value_from_str(&path.display().to_string(), &read_file(path)?)
}

pub fn save_reward_model<T: Scalar>(path: &Path, rm: &RewardModel<T>) -> Result<()> {
    write_file(path, &reward_model_to_string(rm))
}

pub fn load_reward_model<T: Scalar>(path: &Path) -> Result<RewardModel<T>> {
    reward_model_from_str(&path.display().to_string(), &read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_round_trip_is_exact() {
        let logits = vec![0.1, -2.5e-17, 1.0 / 3.0, 7.0, -0.0, 1e300];
        let p = PolicyParams::<f64>::from_logits(2, 3, logits).unwrap();
        let back: PolicyParams<f64> = policy_from_str("mem", &policy_to_string(&p)).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn reward_model_round_trip() {
        let rm = RewardModel {
            weights: vec![0.25, -1.0 / 7.0],
            bias: 0.5,
        };
        let text = reward_model_to_string(&rm);
        assert_eq!(reward_model_from_str::<f64>("mem", &text).unwrap(), rm);
        let empty = RewardModel::<f64>::zeros(0);
        assert_eq!(
            reward_model_from_str::<f64>("mem", &reward_model_to_string(&empty)).unwrap(),
            empty
        );
    }

    #[test]
    fn rejects_malformed() {
        assert!(
            policy_from_str::<f64>("mem", "pfppo-table v1\nkind value\nrows 1\ncols 1\n0\n")
                .is_err()
        );
        assert!(
            policy_from_str::<f64>("mem", "pfppo-table v1\nkind policy\nrows 1\ncols 2\n0\n")
                .is_err()
        );
        assert!(policy_from_str::<f64>(
            "mem",
            "pfppo-table v1\nkind policy\nrows 1\ncols 1\nNaN\n"
        )
        .is_err());
        assert!(reward_model_from_str::<f64>("mem", "garbage").is_err());
    }
}
