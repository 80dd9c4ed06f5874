use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::mir::Kind;

pub const TABLE_VERSION: u32 = 1;
const MAGIC: &str = "reslab-recovery-table";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableEntry {
    pub symbol: String,
    pub params: Vec<(String, Kind)>,
}

/// Maps the `file:line:col` key of a memory access to its recovery kernel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecoveryTable {
    pub version: u32,
    pub entries: BTreeMap<String, TableEntry>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TableError {
    #[error("duplicate key {0}")]
    DuplicateKey(String),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("unsupported table version {0}")]
    Version(u32),
}

impl Default for RecoveryTable {
    fn default() -> Self {
        RecoveryTable {
            version: TABLE_VERSION,
            entries: BTreeMap::new(),
        }
    }
}

impl RecoveryTable {
    pub fn insert(&mut self, key: String, entry: TableEntry) -> Result<(), TableError> {
        if self.entries.contains_key(&key) {
            return Err(TableError::DuplicateKey(key));
        }
        self.entries.insert(key, entry);
        Ok(())
    }

    /// One header line, then `key<TAB>symbol<TAB>name:kind,...` per entry
    /// in key order.
    pub fn render(&self) -> String {
        let mut out = format!("{MAGIC}\t{}\n", self.version);
        for (key, e) in &self.entries {
            let params: Vec<String> = e.params.iter().map(|(n, k)| format!("{n}:{k}")).collect();
            writeln!(out, "{key}\t{}\t{}", e.symbol, params.join(",")).unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<RecoveryTable, TableError> {
        let bad = |line: usize, reason: &str| TableError::Malformed {
            line,
            reason: reason.to_string(),
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| bad(1, "empty table"))?;
        let version = header
            .strip_prefix(MAGIC)
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| bad(1, "missing table header"))?;
        if version != TABLE_VERSION {
            return Err(TableError::Version(version));
        }
        let mut table = RecoveryTable::default();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [key, symbol, params] = fields.as_slice() else {
                return Err(bad(i + 1, "expected three tab-separated fields"));
            };
            let params = params
                .split(',')
                .filter(|p| !p.is_empty())
                .map(|p| {
                    let (name, kind) = p.rsplit_once(':').ok_or_else(|| bad(i + 1, "parameter without a kind"))?;
                    let kind = Kind::from_name(kind).ok_or_else(|| bad(i + 1, "unknown kind"))?;
                    Ok((name.to_string(), kind))
                })
                .collect::<Result<_, TableError>>()?;
            table.insert(
                key.to_string(),
                TableEntry {
                    symbol: symbol.to_string(),
                    params,
                },
            )?;
        }
        Ok(table)
    }
}
