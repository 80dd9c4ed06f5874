//! Recovery kernels: one replayable address computation per memory access,
//! the induction-variable pairs that can repair a corrupted counter, and the
//! table and sidecar files the runtime loads.

mod pairs;
mod rsi;
mod table;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

pub use pairs::{
    count_recoverable_ivs, function_pairs, is_checkpoint_reload, pair_induction_variables,
    recover_iv, IvPair,
};
pub use rsi::{build_rsi, KernelParam, ParamRole, Rsi, SliceError};
pub use table::{RecoveryTable, TableEntry, TableError, TABLE_VERSION};

use crate::analysis::{compute_liveness, LivenessMap};
use crate::mir::{
    Block, FuncId, Function, InstId, Instruction, Module, Op, Operand, ValueId,
};

pub const TABLE_FILE: &str = "recovery.table";
pub const KERNELS_FILE: &str = "kernels.ir";
pub const PAIRS_FILE: &str = "ivpairs.tsv";

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryKernel {
    pub key: String,
    pub symbol: String,
    /// Function and instruction of the access in the application module.
    pub func: FuncId,
    pub access: InstId,
    pub params: Vec<KernelParam>,
    /// The kernel as a function of the recovery library.
    pub body: Function,
    /// Pairs (indices into [`RecoveryBuild::pairs`]) with a member among the
    /// parameters.
    pub iv_repairs: Vec<usize>,
}

/// Everything built for one application module.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryBuild {
    pub kernels: Vec<RecoveryKernel>,
    pub pairs: Vec<(FuncId, IvPair)>,
    /// Accesses that got no kernel, with the reason.
    pub skipped: Vec<(String, FuncId, SliceError)>,
    /// The application's globals, its pure functions and every kernel.
    pub library: Module,
}

#[derive(Debug, Error)]
pub enum BuildError {
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Builds the kernel for `access`, or `None` when replaying its slice could
/// never help: the address is a bare terminal and no pair can repair it.
pub fn build_kernel(
    f: &Function,
    access: InstId,
    lm: &LivenessMap,
    pairs: &[&IvPair],
) -> Result<Option<(Rsi, Function, Vec<usize>)>, SliceError> {
    let rsi = build_rsi(f, access, lm)?;
    let repairs: Vec<usize> = pairs
        .iter()
        .enumerate()
        .filter(|(_, p)| rsi.params.iter().any(|q| p.contains(q.value)))
        .map(|(i, _)| i)
        .collect();
    if rsi.body.is_empty() && repairs.is_empty() {
        return Ok(None);
    }
    let body = kernel_function(f, &rsi, "kernel");
    Ok(Some((rsi, body, repairs)))
}

fn kernel_function(f: &Function, rsi: &Rsi, symbol: &str) -> Function {
    let mut k = Function::new(symbol);
    k.ret = Some(f.value(rsi.root).kind);
    let mut map: HashMap<ValueId, ValueId> = HashMap::new();
    for p in &rsi.params {
        let v = k.add_value(f.value_name(p.value).to_string(), f.value(p.value).kind);
        k.params.push(v);
        map.insert(p.value, v);
    }
    let mut insts = Vec::new();
    for v in &rsi.body {
        let mut inst = f.def_inst(*v).unwrap().clone();
        inst.debug = None;
        for o in inst.op.operands_mut() {
            if let Operand::Value(x) = o {
                *x = map[x];
            }
        }
        let r = k.add_value(f.value_name(*v).to_string(), f.value(*v).kind);
        inst.result = Some(r);
        map.insert(*v, r);
        insts.push(inst);
    }
    insts.push(Instruction::new(
        None,
        Op::Ret {
            value: Some(Operand::Value(map[&rsi.root])),
        },
    ));
    k.blocks.push(Block {
        label: "entry".to_string(),
        insts,
    });
    k.renumber();
    k
}

/// Kernels for every eligible access of `m`, numbered in module order.
pub fn build_kernels(m: &Module) -> RecoveryBuild {
    let mut library = Module::new(&format!("{}.recovery", m.source));
    library.globals = m.globals.clone();
    library.functions = m.functions.iter().filter(|f| f.pure_fn).cloned().collect();
    let mut build = RecoveryBuild {
        kernels: Vec::new(),
        pairs: Vec::new(),
        skipped: Vec::new(),
        library,
    };
    for (fi, f) in m.functions.iter().enumerate() {
        let func = FuncId(fi as u32);
        let lm = compute_liveness(f);
        let first_pair = build.pairs.len();
        build.pairs.extend(function_pairs(f).into_iter().map(|p| (func, p)));
        let pairs: Vec<&IvPair> = build.pairs[first_pair..].iter().map(|(_, p)| p).collect();
        for access in f.memory_accesses() {
            let key = access.debug.as_ref().map(|d| d.key()).unwrap_or_default();
            match build_kernel(f, access.id, &lm, &pairs) {
                Ok(Some((rsi, mut body, repairs))) => {
                    let symbol = format!("recovery_k{}", build.kernels.len() + 1);
                    body.name = symbol.clone();
                    build.library.functions.push(body.clone());
                    build.kernels.push(RecoveryKernel {
                        key,
                        symbol,
                        func,
                        access: access.id,
                        params: rsi.params,
                        body,
                        iv_repairs: repairs.into_iter().map(|r| r + first_pair).collect(),
                    });
                }
                Ok(None) => {}
                Err(e) => build.skipped.push((key, func, e)),
            }
        }
    }
    build
}

/// The serialized form of a build.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifacts {
    pub table: String,
    pub kernels: String,
    pub pairs: String,
}

impl RecoveryBuild {
    pub fn table(&self, m: &Module) -> Result<RecoveryTable, TableError> {
        let mut table = RecoveryTable::default();
        for k in &self.kernels {
            let f = m.func(k.func);
            let params = k
                .params
                .iter()
                .map(|p| (f.value_name(p.value).to_string(), f.value(p.value).kind))
                .collect();
            table.insert(
                k.key.clone(),
                TableEntry {
                    symbol: k.symbol.clone(),
                    params,
                },
            )?;
        }
        Ok(table)
    }

    pub fn artifacts(&self, m: &Module) -> Result<Artifacts, TableError> {
        let mut pairs = String::from("function\ti\tk\ti0\tk0\ts_i\ts_k\n");
        for (func, p) in &self.pairs {
            let f = m.func(*func);
            let e = |x: &crate::analysis::ScevExpr| x.display(m, f).to_string();
            writeln!(
                pairs,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                f.name,
                f.value_name(p.i),
                f.value_name(p.k),
                e(&p.i0),
                e(&p.k0),
                e(&p.s_i),
                e(&p.s_k)
            )
            .unwrap();
        }
        Ok(Artifacts {
            table: self.table(m)?.render(),
            kernels: crate::mir::print_module(&self.library),
            pairs,
        })
    }
}

impl Artifacts {
    pub fn write_dir(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(TABLE_FILE), &self.table)?;
        std::fs::write(dir.join(KERNELS_FILE), &self.kernels)?;
        std::fs::write(dir.join(PAIRS_FILE), &self.pairs)
    }

    pub fn read_dir(dir: &Path) -> std::io::Result<Artifacts> {
        Ok(Artifacts {
            table: std::fs::read_to_string(dir.join(TABLE_FILE))?,
            kernels: std::fs::read_to_string(dir.join(KERNELS_FILE))?,
            pairs: std::fs::read_to_string(dir.join(PAIRS_FILE))?,
        })
    }
}
