use std::collections::HashMap;

use thiserror::Error;

use crate::analysis::scev::phi_init_next;
use crate::analysis::{find_loops, ScevExpr};
use crate::mir::{parse_module_named, FuncId, InstId, Module, ParseError, ValueId};
use crate::recovery::{is_checkpoint_reload, Artifacts, RecoveryTable, TableError};
use crate::vm::{call_function, LiveState, Program, Unavailable, VmError};

#[derive(Debug, Error)]
pub enum LoadError {
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("kernel library: {0}")]
    Parse(#[from] ParseError),
    #[error("kernel library: {0}")]
    Vm(#[from] VmError),
    #[error("{0}")]
    Mismatch(String),
}

/// How to read one kernel argument from the live state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSource {
    pub value: ValueId,
    /// Checkpoint slot to read instead of the value itself.
    pub slot: Option<ValueId>,
}

#[derive(Debug, Clone)]
pub struct KernelEntry {
    pub func: FuncId,
    pub access: InstId,
    pub lib_func: FuncId,
    pub params: Vec<ParamSource>,
}

/// A pair of induction phis, resolved against the application.
#[derive(Debug, Clone)]
pub struct LoadedPair {
    pub func: FuncId,
    pub i: ValueId,
    pub k: ValueId,
    pub i0: ScevExpr,
    pub k0: ScevExpr,
    pub s_i: ScevExpr,
    pub s_k: ScevExpr,
    /// Back-edge values of `i` and `k`.
    pub i_next: Option<ValueId>,
    pub k_next: Option<ValueId>,
}

pub struct Member<'a> {
    pub partner: ValueId,
    pub partner_next: Option<ValueId>,
    pub partner0: &'a ScevExpr,
    pub s_partner: &'a ScevExpr,
    pub target0: &'a ScevExpr,
    pub s_target: &'a ScevExpr,
    pub target_next: Option<ValueId>,
}

impl LoadedPair {
    pub fn member(&self, v: ValueId) -> Option<Member<'_>> {
        if v == self.i {
            Some(Member {
                partner: self.k,
                partner_next: self.k_next,
                partner0: &self.k0,
                s_partner: &self.s_k,
                target0: &self.i0,
                s_target: &self.s_i,
                target_next: self.i_next,
            })
        } else if v == self.k {
            Some(Member {
                partner: self.i,
                partner_next: self.i_next,
                partner0: &self.i0,
                s_partner: &self.s_i,
                target0: &self.k0,
                s_target: &self.s_k,
                target_next: self.k_next,
            })
        } else {
            None
        }
    }
}

/// The parsed artifacts.
impl KernelEntry {
    /// The kernel's arguments, read from the surviving state.
    pub fn gather(&self, ls: &LiveState<'_>) -> Result<Vec<u64>, Unavailable> {
        self.params
            .iter()
            .map(|p| match p.slot {
                Some(s) => ls.read_slot(s),
                None => ls.read(p.value),
            })
            .collect()
    }
}

pub struct Loaded {
    pub table: RecoveryTable,
    pub library: Program,
    pub kernels: HashMap<String, KernelEntry>,
    pub pairs: Vec<LoadedPair>,
}

impl Loaded {
    /// Runs the kernel of `entry`: the recomputed address and the number of
    /// kernel instructions executed. `None` if the kernel traps or runs out
    /// of budget.
    pub fn replay(&self, entry: &KernelEntry, args: &[u64], budget: u64) -> Option<(u64, u64)> {
        let (out, n) = call_function(&self.library, entry.lib_func, args, budget).ok()?;
        Some((out.ok().flatten()?, n))
    }

    pub fn parse(a: &Artifacts, app: &Module) -> Result<Loaded, LoadError> {
        let mismatch = |s: String| LoadError::Mismatch(s);
        let table = RecoveryTable::parse(&a.table)?;
        let library = Program::new(parse_module_named(&a.kernels, &format!("{}.recovery", app.source))?)?;
        let mut sites = HashMap::new();
        for (fi, f) in app.functions.iter().enumerate() {
            for inst in f.memory_accesses() {
                if let Some(d) = &inst.debug {
                    sites.insert(d.key(), (FuncId(fi as u32), inst.id));
                }
            }
        }
        let mut kernels = HashMap::new();
        for (key, e) in &table.entries {
            let &(func, access) = sites
                .get(key)
                .ok_or_else(|| mismatch(format!("no access with key {key}")))?;
            let f = app.func(func);
            let lib_func = library
                .module
                .function_id(&e.symbol)
                .ok_or_else(|| mismatch(format!("no kernel named {}", e.symbol)))?;
            let params = e
                .params
                .iter()
                .map(|(name, _)| {
                    let value = f
                        .value_by_name(name)
                        .ok_or_else(|| mismatch(format!("no value %{name} in {}", f.name)))?;
                    Ok(ParamSource {
                        value,
                        slot: is_checkpoint_reload(f, value),
                    })
                })
                .collect::<Result<_, LoadError>>()?;
            kernels.insert(
                key.clone(),
                KernelEntry {
                    func,
                    access,
                    lib_func,
                    params,
                },
            );
        }
        let mut pairs = Vec::new();
        for line in a.pairs.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split('\t').collect();
            let [fname, i, k, i0, k0, s_i, s_k] = fields.as_slice() else {
                return Err(mismatch(format!("bad pair line `{line}`")));
            };
            let func = app
                .function_id(fname)
                .ok_or_else(|| mismatch(format!("no function {fname}")))?;
            let f = app.func(func);
            let value = |n: &str| f.value_by_name(n).ok_or_else(|| mismatch(format!("no value %{n}")));
            let expr = |t: &str| ScevExpr::parse(t, app, f).ok_or_else(|| mismatch(format!("bad expression {t}")));
            let (i, k) = (value(i)?, value(k)?);
            let loops = find_loops(f);
            let next = |v: ValueId| {
                let phi = f.def_inst(v)?;
                let l = loops.iter().find(|l| l.header == f.block_of(phi.id))?;
                phi_init_next(phi, l)?.1.as_value()
            };
            pairs.push(LoadedPair {
                func,
                i,
                k,
                i0: expr(i0)?,
                k0: expr(k0)?,
                s_i: expr(s_i)?,
                s_k: expr(s_k)?,
                i_next: next(i),
                k_next: next(k),
            });
        }
        Ok(Loaded {
            table,
            library,
            kernels,
            pairs,
        })
    }
}
