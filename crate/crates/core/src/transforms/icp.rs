use std::collections::HashSet;

use super::{promote, TransformReport};
use crate::analysis::scev::{phi_init_next, scev_analyze};
use crate::analysis::{is_used_in_addr_compute, LoopInfo};
use crate::mir::{Function, Op, ValueId};

/// Independent compute promotion: every address-feeding induction value of
/// `l` that is computed from another induction value gets its own header
/// phi, so it no longer depends on the value it was derived from.
pub fn icp(f: &mut Function, l: &LoopInfo) -> TransformReport {
    let mut report = TransformReport::new("icp", f, l);
    let (Some(pre), [latch]) = (l.preheader, l.latches.as_slice()) else {
        return report;
    };
    let latch = *latch;
    let mut rejected = HashSet::new();
    while let Some(v) = next_candidate(f, l, &rejected) {
        rejected.insert(v);
        let Some(rec) = scev_analyze(v, l, f) else {
            continue;
        };
        let name = f.value_name(v).to_string();
        let (phi, next) = promote(f, l, pre, latch, v, &rec, "iv");
        report.replaced_values.push((name, phi.clone()));
        report.created_values.extend([phi, next]);
    }
    report
}

/// The last (in textual order) derived induction value feeding an address
/// that is not the increment of a header phi.
fn next_candidate(f: &Function, l: &LoopInfo, rejected: &HashSet<ValueId>) -> Option<ValueId> {
    let users = f.users();
    let in_loop = |id| l.contains(f.block_of(id));
    let increments: Vec<ValueId> = f
        .block(l.header)
        .insts
        .iter()
        .filter_map(|i| phi_init_next(i, l))
        .filter_map(|(_, next)| next.as_value())
        .collect();
    let mut order: Vec<_> = f.insts().filter(|i| in_loop(i.id)).collect();
    order.reverse();
    order.into_iter().find_map(|inst| {
        let v = inst.result?;
        let ok = matches!(inst.op, Op::Bin { .. })
            && f.value(v).kind.is_integral()
            && !increments.contains(&v)
            && !rejected.contains(&v)
            && users[v.index()].iter().all(|u| in_loop(*u))
            && is_used_in_addr_compute(v, f)
            && scev_analyze(v, l, f).is_some();
        ok.then_some(v)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::find_loops;
    use crate::kernels::by_name;
    use crate::mir::{print_module, validate};
    use crate::vm::{run, Program, RunConfig};

    #[test]
    fn gather_indices_become_header_phis() {
        let k = by_name("gather2d").unwrap();
        let mut m = k.module().unwrap();
        let f = &mut m.functions[0];
        let l = find_loops(f).remove(0);
        let r = icp(f, &l);
        f.compact();
        m.tag_memory_accesses();
        assert!(validate(&m).is_empty(), "{:?}", validate(&m));
        let replaced: Vec<&str> = r.replaced_values.iter().map(|(a, _)| a.as_str()).collect();
        assert_eq!(replaced, ["widx", "idx"]);
        let text = print_module(&m);
        assert!(text.contains("%idx.iv = phi i64"), "{text}");
        assert!(text.contains("%widx.iv = phi i64"), "{text}");
        assert!(!text.contains("%i2 ="), "{text}");

        let prog = Program::new(k.module().unwrap()).unwrap();
        let before = run(&prog, &k.input(), RunConfig::default()).unwrap();
        let after = run(&Program::new(m).unwrap(), &k.input(), RunConfig::default()).unwrap();
        assert_eq!(before.output, after.output);
    }
}
