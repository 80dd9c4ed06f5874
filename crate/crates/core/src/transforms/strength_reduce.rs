use std::collections::HashSet;

use super::{promote, TransformReport};
use crate::analysis::scev::{invariant_expr, scev_analyze};
use crate::analysis::LoopInfo;
use crate::mir::{BinOp, Function, Kind, Op, Operand, ValueId};

/// Replaces `mul iv, c` (plus any single-use chain of invariant additions
/// on top of it) with a new header phi stepped by an addition.
pub fn strength_reduce(f: &mut Function, l: &LoopInfo) -> TransformReport {
    let mut report = TransformReport::new("sr", f, l);
    let (Some(pre), [latch]) = (l.preheader, l.latches.as_slice()) else {
        return report;
    };
    let latch = *latch;
    let mut rejected = HashSet::new();
    while let Some(top) = next_candidate(f, l, &rejected) {
        rejected.insert(top);
        let Some(rec) = scev_analyze(top, l, f) else {
            continue;
        };
        let name = f.value_name(top).to_string();
        let (phi, next) = promote(f, l, pre, latch, top, &rec, "sr");
        report.replaced_values.push((name, phi.clone()));
        report.created_values.extend([phi, next]);
    }
    report
}

/// The top of the next reducible chain: a multiplication of an induction
/// value by an invariant, extended through single-use invariant additions.
fn next_candidate(f: &Function, l: &LoopInfo, rejected: &HashSet<ValueId>) -> Option<ValueId> {
    let users = f.users();
    let in_loop = |id| l.contains(f.block_of(id));
    for inst in f.insts().filter(|i| in_loop(i.id)) {
        let (Some(v), Op::Bin { op: BinOp::Mul, lhs, rhs }) = (inst.result, &inst.op) else {
            continue;
        };
        if f.value(v).kind != Kind::I64
            || (invariant_expr(lhs, l, f).is_none() && invariant_expr(rhs, l, f).is_none())
            || scev_analyze(v, l, f).is_none()
        {
            continue;
        }
        let mut top = v;
        while let [u] = users[top.index()].as_slice() {
            let user = f.inst(*u);
            let extends = match &user.op {
                Op::Bin { op: BinOp::Add, lhs, rhs } => {
                    let other = if *lhs == Operand::Value(top) { rhs } else { lhs };
                    invariant_expr(other, l, f).is_some()
                }
                Op::Bin { op: BinOp::Sub, lhs, rhs } => {
                    *lhs == Operand::Value(top) && invariant_expr(rhs, l, f).is_some()
                }
                _ => false,
            };
            if !extends || !in_loop(*u) || f.value(user.result.unwrap()).kind != Kind::I64 {
                break;
            }
            top = user.result.unwrap();
        }
        if rejected.contains(&top) || users[top.index()].iter().any(|u| !in_loop(*u)) {
            continue;
        }
        return Some(top);
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::find_loops;
    use crate::kernels::by_name;
    use crate::mir::{print_module, validate};
    use crate::vm::{run, Program, RunConfig};

    #[test]
    fn showcase_multiply_becomes_an_addition() {
        let k = by_name("sr_showcase").unwrap();
        let mut m = k.module().unwrap();
        let f = &mut m.functions[0];
        let l = find_loops(f).remove(0);
        let r = strength_reduce(f, &l);
        f.compact();
        assert_eq!(r.replaced_values, vec![("u".to_string(), "u.sr".to_string())]);
        assert_eq!(r.created_values, vec!["u.sr", "u.sr.next"]);
        m.tag_memory_accesses();
        assert!(validate(&m).is_empty(), "{:?}", validate(&m));
        let text = print_module(&m);
        assert!(text.contains("%u.sr = phi i64 [5, pre], [%u.sr.next, loop]"), "{text}");
        assert!(text.contains("%u.sr.next = add %u.sr, 3"), "{text}");
        assert!(!text.contains("mul"), "{text}");

        let before = run(&Program::new(k.module().unwrap()).unwrap(), &k.input(), RunConfig::default()).unwrap();
        let after = run(&Program::new(m).unwrap(), &k.input(), RunConfig::default()).unwrap();
        assert_eq!(before.output, after.output);
    }
}
