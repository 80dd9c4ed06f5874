use std::cell::Cell;

use thiserror::Error;

use super::{MachineState, Program};
use crate::mir::{FuncId, Function, GlobalId, InstId, Op, ValueDef, ValueId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("value %{0:?} is not available at the faulting instruction")]
pub struct Unavailable(pub ValueId);

/// Read-only view of the machine at a faulting instruction, restricted to
/// what survives there: values live into the instruction, function
/// arguments, stack slots and their contents, and global addresses.
pub struct LiveState<'a> {
    prog: &'a Program,
    state: &'a MachineState,
    func: FuncId,
    inst: InstId,
    reads: Cell<u32>,
}

/// The view of `state` at the instruction that raised `trap`-like context
/// `(func, inst)`; `state` must have that function's frame on top.
pub fn snapshot_live_state<'a>(
    prog: &'a Program,
    state: &'a MachineState,
    func: FuncId,
    inst: InstId,
) -> LiveState<'a> {
    debug_assert_eq!(state.frame().func, func);
    LiveState {
        prog,
        state,
        func,
        inst,
        reads: Cell::new(0),
    }
}

impl<'a> LiveState<'a> {
    pub fn func(&self) -> FuncId {
        self.func
    }

    pub fn inst(&self) -> InstId {
        self.inst
    }

    pub fn function(&self) -> &'a Function {
        self.prog.module.func(self.func)
    }

    pub fn is_readable(&self, v: ValueId) -> bool {
        let f = self.prog.module.func(self.func);
        match f.value(v).def {
            ValueDef::Param(_) => true,
            ValueDef::Inst(id) => {
                matches!(f.inst(id).op, Op::Alloc)
                    || self.prog.code(self.func).liveness.is_live_in(self.inst, v)
            }
            ValueDef::Detached => false,
        }
    }

    pub fn read(&self, v: ValueId) -> Result<u64, Unavailable> {
        if !self.is_readable(v) {
            return Err(Unavailable(v));
        }
        self.reads.set(self.reads.get() + 1);
        Ok(self.state.value(v))
    }

    /// Contents of the stack slot allocated by `slot`.
    pub fn read_slot(&self, slot: ValueId) -> Result<u64, Unavailable> {
        let base = self.read(slot)?;
        self.state.memory.read(base).map_err(|_| Unavailable(slot))
    }

    pub fn global_base(&self, g: GlobalId) -> u64 {
        self.prog.global_base(g.0 as usize)
    }

    /// Number of successful reads so far.
    pub fn reads(&self) -> u32 {
        self.reads.get()
    }
}
