use std::collections::HashSet;

use thiserror::Error;

use crate::analysis::LivenessMap;
use crate::mir::{Function, InstId, Op, Operand, ValueId};

/// How the runtime obtains a kernel parameter at the faulting instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Argument,
    /// The address of a stack slot.
    StackSlot,
    /// A phi live at the access.
    Phi,
    /// A value reloaded from a checkpoint slot; read from the slot itself.
    Checkpoint { slot: ValueId },
    /// A value live at the access that cannot be recomputed because one of
    /// its operands is dead there.
    Live,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelParam {
    pub value: ValueId,
    pub role: ParamRole,
}

/// The recoverable sequence of instructions behind one memory access:
/// the instructions recomputing its address and the terminal values they
/// start from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rsi {
    pub access: InstId,
    /// The address operand of the access.
    pub root: ValueId,
    /// Values whose definitions are cloned, in dependency order.
    pub body: Vec<ValueId>,
    /// Terminal values in discovery order.
    pub params: Vec<KernelParam>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum SliceError {
    #[error("not a load or store")]
    NotMemoryAccess,
    #[error("the address is static")]
    Static,
    #[error("value {} is dead at the access and cannot be recomputed", .0.0)]
    Unsliceable(ValueId),
}

impl SliceError {
    /// The message with value names from `f`.
    pub fn describe(&self, f: &Function) -> String {
        match self {
            SliceError::Unsliceable(v) => {
                format!("%{} is dead at the access and cannot be recomputed", f.value_name(*v))
            }
            e => e.to_string(),
        }
    }
}

/// Slices backwards from the address operand of the load or store `access`
/// until every path ends in a terminal value readable at `access`.
pub fn build_rsi(f: &Function, access: InstId, lm: &LivenessMap) -> Result<Rsi, SliceError> {
    let inst = f.inst(access);
    if !inst.op.is_memory_access() {
        return Err(SliceError::NotMemoryAccess);
    }
    let Some(Operand::Value(root)) = inst.op.address_operand() else {
        return Err(SliceError::Static);
    };
    if f.def_inst(root).is_some_and(|d| matches!(d.op, Op::Alloc)) {
        return Err(SliceError::Static);
    }
    let mut slicer = Slicer {
        f,
        lm,
        access,
        seen: HashSet::new(),
        body: Vec::new(),
        params: Vec::new(),
    };
    slicer.visit(root, true)?;
    Ok(Rsi {
        access,
        root,
        body: slicer.body,
        params: slicer.params,
    })
}

struct Slicer<'a> {
    f: &'a Function,
    lm: &'a LivenessMap,
    access: InstId,
    seen: HashSet<ValueId>,
    body: Vec<ValueId>,
    params: Vec<KernelParam>,
}

impl Slicer<'_> {
    fn live(&self, v: ValueId) -> bool {
        self.lm.is_live_in(self.access, v)
    }

    fn param(&mut self, value: ValueId, role: ParamRole) -> Result<(), SliceError> {
        self.params.push(KernelParam { value, role });
        Ok(())
    }

    fn visit(&mut self, v: ValueId, root: bool) -> Result<(), SliceError> {
        if !self.seen.insert(v) {
            return Ok(());
        }
        let f = self.f;
        if f.is_param(v) {
            return self.param(v, ParamRole::Argument);
        }
        let Some(def) = f.def_inst(v) else {
            return Err(SliceError::Unsliceable(v));
        };
        match &def.op {
            Op::Alloc => self.param(v, ParamRole::StackSlot),
            Op::Phi { .. } if self.live(v) => self.param(v, ParamRole::Phi),
            Op::Load { addr: Operand::Value(s) }
                if f.def_inst(*s).is_some_and(|d| matches!(d.op, Op::Alloc)) =>
            {
                self.param(v, ParamRole::Checkpoint { slot: *s })
            }
            Op::Load { .. } if self.live(v) => self.param(v, ParamRole::Live),
            op if op.is_pure() => {
                let operands: Vec<ValueId> = op.used_values().collect();
                if !root && self.live(v) && operands.iter().any(|o| !self.live(*o)) {
                    return self.param(v, ParamRole::Live);
                }
                for o in operands {
                    self.visit(o, false)?;
                }
                self.body.push(v);
                Ok(())
            }
            _ => Err(SliceError::Unsliceable(v)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::compute_liveness;
    use crate::kernels::by_name;
    use crate::mir::parse_module;

    fn names(f: &Function, vs: impl IntoIterator<Item = ValueId>) -> Vec<String> {
        vs.into_iter().map(|v| f.value_name(v).to_string()).collect()
    }

    fn access_to(f: &Function, addr: &str) -> InstId {
        let a = Operand::Value(f.value_by_name(addr).unwrap());
        f.memory_accesses().find(|i| i.op.address_operand() == Some(a)).unwrap().id
    }

    #[test]
    fn gather_weight_slice() {
        let m = by_name("gather2d").unwrap().module().unwrap();
        let f = &m.functions[0];
        let rsi = build_rsi(f, access_to(f, "pw"), &compute_liveness(f)).unwrap();
        let mut params = names(f, rsi.params.iter().map(|p| p.value));
        params.sort();
        assert_eq!(params, ["i", "k", "mzeta", "n"]);
        assert_eq!(
            names(f, rsi.body.iter().copied()),
            ["k1", "t0", "t1", "i2", "idx", "w", "widx", "pw"]
        );
    }

    #[test]
    fn argument_address_and_static_addresses() {
        let m = parse_module(
            "global g[4] : i64
fn main(%p: addr) -> i64 {
entry:
  %s = alloc i64
  store %s, 1
  %a = load i64 %p
  %b = load i64 @g
  %c = load i64 %s
  %q = addr %p, 1, 8, 0
  %d = load i64 %q
  ret %a
}",
        )
        .unwrap();
        let f = &m.functions[0];
        let lm = compute_liveness(f);
        let loads: Vec<InstId> = f.insts().filter(|i| matches!(i.op, Op::Load { .. })).map(|i| i.id).collect();
        let a = build_rsi(f, loads[0], &lm).unwrap();
        assert!(a.body.is_empty());
        assert_eq!(a.params, vec![KernelParam { value: f.params[0], role: ParamRole::Argument }]);
        assert_eq!(build_rsi(f, loads[1], &lm), Err(SliceError::Static));
        assert_eq!(build_rsi(f, loads[2], &lm), Err(SliceError::Static));
        let d = build_rsi(f, loads[3], &lm).unwrap();
        assert_eq!(names(f, d.body), ["q"]);
    }

    #[test]
    fn dead_bound_is_unsliceable() {
        // %n2 is loaded, used for the address and never again, so it is dead
        // at the access; recomputing it would mean re-reading memory.
        let m = parse_module(
            "global g[8] : i64
fn main(%i: i64) -> i64 {
entry:
  %pn = addr @g, 0, 8, 0
  %n2 = load i64 %pn
  %j = add %n2, %i
  %k = mul %j, 2
  %p = addr @g, %k, 8, 0
  %v = load i64 %p
  ret %v
}",
        )
        .unwrap();
        let f = &m.functions[0];
        let lm = compute_liveness(f);
        let n2 = f.value_by_name("n2").unwrap();
        assert!(!lm.is_live_in(access_to(f, "p"), n2));
        assert_eq!(build_rsi(f, access_to(f, "p"), &lm), Err(SliceError::Unsliceable(n2)));
    }

    #[test]
    fn live_value_with_dead_operand_is_terminal() {
        let m = parse_module(
            "global g[8] : i64
fn main(%i: i64) -> i64 {
entry:
  %pn = addr @g, 0, 8, 0
  %n2 = load i64 %pn
  %j = add %n2, %i
  %p = addr @g, %j, 8, 0
  %v = load i64 %p
  %r = add %v, %j
  ret %r
}",
        )
        .unwrap();
        let f = &m.functions[0];
        let rsi = build_rsi(f, access_to(f, "p"), &compute_liveness(f)).unwrap();
        assert_eq!(names(f, rsi.body), ["p"]);
        assert_eq!(rsi.params[0].role, ParamRole::Live);
        assert_eq!(f.value_name(rsi.params[0].value), "j");
    }
}
