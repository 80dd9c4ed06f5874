use std::collections::BTreeMap;

use thiserror::Error;

use crate::mir::Kind;

/// A literal from an input file, converted to a payload once the target
/// kind is known.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scalar {
    Int(i64),
    Float(f64),
}

impl Scalar {
    pub fn payload(self, kind: Kind) -> u64 {
        match (self, kind) {
            (Scalar::Int(v), Kind::F64) => (v as f64).to_bits(),
            (Scalar::Int(v), _) => v as u64,
            (Scalar::Float(v), Kind::F64) => v.to_bits(),
            (Scalar::Float(v), _) => v as i64 as u64,
        }
    }
}

/// Named initial bindings: scalars for `main` parameters, lists for global
/// arrays. Arrays shorter than their global are zero-padded.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Input {
    pub bindings: BTreeMap<String, Vec<Scalar>>,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("input line {line}: {msg}")]
pub struct InputError {
    pub line: usize,
    pub msg: String,
}

impl Input {
    pub fn set_int(&mut self, name: &str, v: i64) {
        self.bindings.insert(name.to_string(), vec![Scalar::Int(v)]);
    }

    pub fn set_array(&mut self, name: &str, vals: Vec<Scalar>) {
        self.bindings.insert(name.to_string(), vals);
    }

    pub fn get(&self, name: &str) -> Option<&[Scalar]> {
        self.bindings.get(name).map(|v| v.as_slice())
    }

    /// Parses `name = v` and `name = [v, v, ...]` lines; `;` starts a
    /// comment.
    pub fn parse(text: &str) -> Result<Input, InputError> {
        let mut input = Input::default();
        for (n, raw) in text.lines().enumerate() {
            let err = |msg: String| InputError { line: n + 1, msg };
            let line = raw.split(';').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (name, rhs) = line
                .split_once('=')
                .ok_or_else(|| err("expected `name = value`".into()))?;
            let name = name.trim().trim_start_matches(['%', '@']);
            if name.is_empty() {
                return Err(err("missing name".into()));
            }
            let rhs = rhs.trim();
            let body = match rhs.strip_prefix('[') {
                Some(r) => r
                    .strip_suffix(']')
                    .ok_or_else(|| err("unterminated list".into()))?,
                None => rhs,
            };
            let mut vals = Vec::new();
            for tok in body.split(',').map(str::trim).filter(|t| !t.is_empty()) {
                let v = if let Ok(i) = tok.parse::<i64>() {
                    Scalar::Int(i)
                } else if let Ok(x) = tok.parse::<f64>() {
                    Scalar::Float(x)
                } else {
                    return Err(err(format!("bad number `{tok}`")));
                };
                vals.push(v);
            }
            if input.bindings.insert(name.to_string(), vals).is_some() {
                return Err(err(format!("`{name}` bound twice")));
            }
        }
        Ok(input)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, vals) in &self.bindings {
            let parts: Vec<String> = vals
                .iter()
                .map(|v| match v {
                    Scalar::Int(i) => i.to_string(),
                    Scalar::Float(x) => format!("{x:?}"),
                })
                .collect();
            if parts.len() == 1 {
                out.push_str(&format!("{name} = {}\n", parts[0]));
            } else {
                out.push_str(&format!("{name} = [{}]\n", parts.join(", ")));
            }
        }
        out
    }
}
