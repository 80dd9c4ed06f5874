use std::collections::HashMap;

use super::{insert_before_terminator, TransformReport};
use crate::analysis::scev::{header_ivs, phi_init_next};
use crate::analysis::{compute_liveness, LoopInfo};
use crate::mir::{Function, Instruction, Kind, Op, Operand, ValueId};

/// Micro-checkpointing: an induction phi whose initial value is dead once
/// the loop runs gets that value saved to a stack slot in the preheader and
/// reloaded, so recovery can still read it later.
pub fn micro_checkpoint(f: &mut Function, l: &LoopInfo) -> TransformReport {
    let mut report = TransformReport::new("mck", f, l);
    let Some(pre) = l.preheader else {
        return report;
    };
    let liveness = compute_liveness(f);
    let latch_term = f.block(l.latch).terminator().expect("latch has a terminator").id;
    let mut wanted: Vec<ValueId> = Vec::new();
    for iv in header_ivs(l, f) {
        let phi = f.def_inst(iv.value).unwrap();
        let Some((Operand::Value(init), _)) = phi_init_next(phi, l) else {
            continue;
        };
        let reload = f.def_inst(init).is_some_and(|d| match &d.op {
            Op::Load { addr: Operand::Value(s) } => {
                f.def_inst(*s).is_some_and(|a| matches!(a.op, Op::Alloc))
            }
            _ => false,
        });
        if f.is_param(init) || reload || liveness.is_live_out(latch_term, init) {
            continue;
        }
        if !wanted.contains(&init) {
            wanted.push(init);
        }
    }
    let mut reloads: HashMap<ValueId, ValueId> = HashMap::new();
    for v in wanted {
        let name = f.value_name(v).to_string();
        let kind = f.value(v).kind;
        let slot_name = f.fresh_name(&format!("{name}.ckpt"));
        let slot = f.add_value(slot_name.clone(), Kind::Addr);
        let reload_name = f.fresh_name(&format!("{name}.reload"));
        let reload = f.add_value(reload_name.clone(), kind);
        let entry = f.entry();
        f.block_mut(entry)
            .insts
            .insert(0, Instruction::new(Some(slot), Op::Alloc));
        insert_before_terminator(
            f,
            pre,
            vec![
                Instruction::new(
                    None,
                    Op::Store {
                        addr: Operand::Value(slot),
                        value: Operand::Value(v),
                    },
                ),
                Instruction::new(
                    Some(reload),
                    Op::Load {
                        addr: Operand::Value(slot),
                    },
                ),
            ],
        );
        reloads.insert(v, reload);
        report.checkpoint_slots.push(slot_name.clone());
        report.created_values.extend([slot_name, reload_name.clone()]);
        report.replaced_values.push((name, reload_name));
    }
    for inst in f.block_mut(l.header).insts.iter_mut() {
        if let Op::Phi { incoming } = &mut inst.op {
            for (o, from) in incoming.iter_mut() {
                if let Operand::Value(v) = o {
                    if *from == pre && reloads.contains_key(v) {
                        *o = Operand::Value(reloads[v]);
                    }
                }
            }
        }
    }
    f.renumber();
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::find_loops;
    use crate::kernels::by_name;
    use crate::mir::{print_module, validate};
    use crate::vm::{run, Program, RunConfig};

    #[test]
    fn pointer_walk_base_is_checkpointed() {
        let k = by_name("pointer_walk").unwrap();
        let mut m = k.module().unwrap();
        let f = &mut m.functions[0];
        let l = find_loops(f).remove(0);
        let r = micro_checkpoint(f, &l);
        f.compact();
        m.tag_memory_accesses();
        assert!(validate(&m).is_empty(), "{:?}", validate(&m));
        assert_eq!(r.checkpoint_slots, vec!["base.ckpt"]);
        let text = print_module(&m);
        assert!(text.contains("%base.ckpt = alloc addr"), "{text}");
        assert!(text.contains("store %base.ckpt, %base"), "{text}");
        assert!(text.contains("%A = phi addr [%base.reload, pre]"), "{text}");

        let f = &mut m.functions[0];
        let l = find_loops(f).remove(0);
        assert!(micro_checkpoint(f, &l).is_empty());

        let prog = Program::new(k.module().unwrap()).unwrap();
        let before = run(&prog, &k.input(), RunConfig::default()).unwrap();
        let after = run(&Program::new(m).unwrap(), &k.input(), RunConfig::default()).unwrap();
        assert_eq!(before.output, after.output);
    }
}
