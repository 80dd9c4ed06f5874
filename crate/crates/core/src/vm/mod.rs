//! Deterministic interpreter for validated modules.
//!
//! Globals live at [`memory::GLOBAL_BASE`] spaced [`memory::GLOBAL_STRIDE`]
//! apart and stack slots at [`memory::STACK_BASE`]; everything in between is
//! unmapped, so most corrupted addresses fault.

mod exec;
mod input;
mod live;
pub mod memory;

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

pub use exec::{call_function, profile, run, RunConfig, DEFAULT_BUDGET};
pub use input::{Input, InputError, Scalar};
pub use live::{snapshot_live_state, LiveState, Unavailable};
pub use memory::Memory;

use crate::analysis::{compute_liveness, LivenessMap};
use crate::mir::{
    BlockId, FuncId, InstId, Instruction, Kind, Module, Op, Operand, ValueId, Violation,
    INTRINSICS,
};

#[derive(Debug, Error)]
pub enum VmError {
    #[error("module does not validate: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("no function named `{0}`")]
    NoFunction(String),
    #[error("missing input for parameter `{0}`")]
    MissingParam(String),
    #[error("input binds `{0}`, which is neither a global nor a parameter of main")]
    UnknownBinding(String),
    #[error("array `{name}` has {given} values but room for {count}")]
    TooManyValues { name: String, given: usize, count: u64 },
    #[error("expected {expected} arguments, got {given}")]
    Arity { expected: usize, given: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Callee {
    Sqrt,
    Fabs,
    User(FuncId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum CmpMode {
    Signed,
    Unsigned,
    Float,
}

/// Pre-decoded form of one function.
#[derive(Debug, Clone)]
pub struct FuncCode {
    /// Instructions in textual order; the index is the [`InstId`].
    pub insts: Vec<Instruction>,
    pub block_start: Vec<usize>,
    pub block_of: Vec<BlockId>,
    pub liveness: LivenessMap,
    pub(crate) float_arith: Vec<bool>,
    pub(crate) cmp_mode: Vec<CmpMode>,
    pub(crate) callee: Vec<Option<Callee>>,
    /// Incoming operands of the phis of `to` along the edge `from -> to`.
    pub(crate) phi_sources: HashMap<(BlockId, BlockId), Vec<Operand>>,
    pub(crate) alloc_kind: Vec<Kind>,
}

/// A validated module plus everything the interpreter and the recovery
/// runtime precompute about it.
#[derive(Debug, Clone)]
pub struct Program {
    pub module: Module,
    pub funcs: Vec<FuncCode>,
}

impl Program {
    pub fn new(module: Module) -> Result<Program, VmError> {
        let violations = crate::mir::validate(&module);
        if !violations.is_empty() {
            return Err(VmError::Invalid(violations));
        }
        let funcs = module
            .functions
            .iter()
            .map(|f| {
                let insts: Vec<Instruction> = f.insts().cloned().collect();
                let mut block_start = Vec::new();
                let mut block_of = Vec::new();
                for (b, block) in f.blocks.iter().enumerate() {
                    block_start.push(block_of.len());
                    block_of.extend(std::iter::repeat_n(BlockId(b as u32), block.insts.len()));
                }
                let kind = |o: &Operand| match o {
                    Operand::Value(v) => f.value(*v).kind,
                    Operand::Global(_) => Kind::Addr,
                    Operand::Int(_) => Kind::I64,
                    Operand::Float(_) => Kind::F64,
                };
                let mut float_arith = Vec::new();
                let mut cmp_mode = Vec::new();
                let mut callee = Vec::new();
                for inst in &insts {
                    let (fl, cm) = match &inst.op {
                        Op::Bin { lhs, .. } => (kind(lhs) == Kind::F64, CmpMode::Signed),
                        Op::Icmp { lhs, rhs, .. } => {
                            let mode = match (kind(lhs), kind(rhs)) {
                                (Kind::F64, _) => CmpMode::Float,
                                (Kind::Addr, _) | (_, Kind::Addr) => CmpMode::Unsigned,
                                _ => CmpMode::Signed,
                            };
                            (false, mode)
                        }
                        _ => (false, CmpMode::Signed),
                    };
                    float_arith.push(fl);
                    cmp_mode.push(cm);
                    callee.push(match &inst.op {
                        Op::Call { callee, .. } => Some(match callee.as_str() {
                            "sqrt" => Callee::Sqrt,
                            "fabs" => Callee::Fabs,
                            name => Callee::User(module.function_id(name).unwrap()),
                        }),
                        _ => None,
                    });
                }
                let mut phi_sources: HashMap<(BlockId, BlockId), Vec<Operand>> = HashMap::new();
                for (b, block) in f.blocks.iter().enumerate() {
                    for phi in &block.insts[..block.phi_count()] {
                        if let Op::Phi { incoming } = &phi.op {
                            for (o, from) in incoming {
                                phi_sources
                                    .entry((*from, BlockId(b as u32)))
                                    .or_default()
                                    .push(*o);
                            }
                        }
                    }
                }
                let alloc_kind = insts
                    .iter()
                    .map(|inst| match (inst.op.clone(), inst.result) {
                        (Op::Alloc, Some(slot)) => f
                            .insts()
                            .find_map(|u| match &u.op {
                                Op::Store { addr, value } if *addr == Operand::Value(slot) => {
                                    Some(kind(value))
                                }
                                _ => None,
                            })
                            .unwrap_or(Kind::I64),
                        _ => Kind::I64,
                    })
                    .collect();
                FuncCode {
                    insts,
                    block_start,
                    block_of,
                    liveness: compute_liveness(f),
                    float_arith,
                    cmp_mode,
                    callee,
                    phi_sources,
                    alloc_kind,
                }
            })
            .collect();
        debug_assert!(INTRINSICS.len() == 2);
        Ok(Program { module, funcs })
    }

    pub fn code(&self, f: FuncId) -> &FuncCode {
        &self.funcs[f.0 as usize]
    }

    pub fn main(&self) -> Option<FuncId> {
        self.module.function_id("main")
    }

    pub fn global_base(&self, index: usize) -> u64 {
        memory::global_address(index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TrapKind {
    InvalidAccess,
    Misaligned,
    ArithFault,
}

impl TrapKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TrapKind::InvalidAccess => "InvalidAccess",
            TrapKind::Misaligned => "Misaligned",
            TrapKind::ArithFault => "ArithFault",
        }
    }
}

impl fmt::Display for TrapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrapRecord {
    pub kind: TrapKind,
    pub func: FuncId,
    pub inst: InstId,
    /// Faulting address, for memory traps.
    pub address: Option<u64>,
    /// Ordinal of the trapping instruction: one more than the number of
    /// instructions completed before it.
    pub dyn_count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Completed,
    Trapped(TrapRecord),
    HangBudgetExceeded,
}

/// Final program state compared against the golden run: the return payload
/// and the contents of every global array.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Output {
    pub ret: Option<u64>,
    pub globals: Vec<Vec<u64>>,
}

/// A single bit flip: after the `occurrence`-th completed execution of
/// `inst`, flip `bit` of its result (or, for a store, of the written cell).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Injection {
    pub func: FuncId,
    pub inst: InstId,
    pub occurrence: u64,
    pub bit: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InjectRecord {
    /// Ordinal of the instruction whose destination was flipped.
    pub dyn_count: u64,
    pub old: u64,
    pub new: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceEvent {
    Exec {
        dyn_count: u64,
        func: FuncId,
        inst: InstId,
        result: Option<u64>,
    },
    Inject(InjectRecord),
    Trap(TrapRecord),
    Recovery { dyn_count: u64, resumed: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub status: Status,
    pub output: Output,
    /// Instructions completed.
    pub dyn_count: u64,
    /// Every trap raised, including ones a recovery hook resumed from.
    pub traps: Vec<TrapRecord>,
    pub injected: Option<InjectRecord>,
    pub trace: Vec<TraceEvent>,
    /// Completed executions per function and instruction, when requested.
    pub profile: Option<Vec<Vec<u64>>>,
}

impl RunResult {
    pub fn first_trap(&self) -> Option<&TrapRecord> {
        self.traps.first()
    }
}

/// One line per event: `exec`, `inject`, `trap` or `recovery`, with
/// `key=value` fields.
pub fn render_trace(m: &Module, events: &[TraceEvent]) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let site = |f: FuncId, i: InstId| format!("{}:{}", m.func(f).name, i.0);
    for e in events {
        match e {
            TraceEvent::Exec { dyn_count, func, inst, result } => {
                let text = &m.func(*func).inst(*inst);
                write!(out, "exec dyn={dyn_count} at={} op={}", site(*func, *inst), text.op.opcode()).unwrap();
                if let Some(r) = result {
                    write!(out, " result={r:#x}").unwrap();
                }
            }
            TraceEvent::Inject(r) => {
                write!(out, "inject dyn={} old={:#x} new={:#x}", r.dyn_count, r.old, r.new).unwrap()
            }
            TraceEvent::Trap(t) => {
                write!(out, "trap dyn={} at={} kind={}", t.dyn_count, site(t.func, t.inst), t.kind).unwrap();
                if let Some(a) = t.address {
                    write!(out, " address={a:#x}").unwrap();
                }
            }
            TraceEvent::Recovery { dyn_count, resumed } => {
                write!(out, "recovery dyn={dyn_count} resumed={resumed}").unwrap()
            }
        }
        out.push('\n');
    }
    out
}

/// Called on every `InvalidAccess` trap when installed. Returning `true`
/// re-executes the faulting instruction with whatever state the hook left.
pub trait RecoveryHook {
    fn on_invalid_access(
        &mut self,
        trap: &TrapRecord,
        state: &mut MachineState,
        prog: &Program,
    ) -> bool;
}

/// Sees every load and store just before it touches memory.
pub trait Observer {
    fn on_access(&mut self, state: &MachineState, prog: &Program, inst: InstId, addr: u64);
}

#[derive(Debug, Clone)]
pub struct Frame {
    pub func: FuncId,
    pub values: Vec<u64>,
    /// Index into the function's flat instruction list.
    pub pc: usize,
    pub prev_block: Option<BlockId>,
    pub(crate) phi_temp: Vec<u64>,
    pub(crate) slots: Vec<u64>,
}

/// Everything a run mutates.
#[derive(Debug, Clone)]
pub struct MachineState {
    pub memory: Memory,
    pub frames: Vec<Frame>,
    pub dyn_count: u64,
    pub(crate) next_slot: u64,
}

impl MachineState {
    pub fn frame(&self) -> &Frame {
        self.frames.last().expect("no active frame")
    }

    pub fn frame_mut(&mut self) -> &mut Frame {
        self.frames.last_mut().expect("no active frame")
    }

    /// (function, instruction) about to execute.
    pub fn pc(&self) -> (FuncId, InstId) {
        let f = self.frame();
        (f.func, InstId(f.pc as u32))
    }

    pub fn value(&self, v: ValueId) -> u64 {
        self.frame().values[v.index()]
    }

    pub fn set_value(&mut self, v: ValueId, payload: u64) {
        self.frame_mut().values[v.index()] = payload;
    }
}
