use std::collections::HashMap;

use super::{insert_block, TransformError, TransformReport};
use crate::analysis::scev::phi_init_next;
use crate::analysis::LoopInfo;
use crate::mir::{
    BinOp, Block, BlockId, CmpPred, Function, Instruction, Op, Operand, ValueDef, ValueId,
};

/// The single-block loop shape accepted by [`unroll`].
struct Shape {
    header: BlockId,
    pre: BlockId,
    exit: BlockId,
    /// Header phis with their entry and back-edge operands.
    phis: Vec<(ValueId, Operand, Operand)>,
    iv: ValueId,
    iv_next: ValueId,
    step: i64,
    cond: ValueId,
    bound: Operand,
}

fn unsupported(f: &Function, l: &LoopInfo, reason: &str) -> TransformError {
    TransformError::Unsupported {
        header: f.block(l.header).label.clone(),
        reason: reason.to_string(),
    }
}

fn match_shape(f: &Function, l: &LoopInfo) -> Result<Shape, TransformError> {
    if l.latches.len() > 1 {
        return Err(TransformError::MultipleLatches(f.block(l.header).label.clone()));
    }
    let header = l.header;
    if l.body.len() != 1 {
        return Err(unsupported(f, l, "the loop body is more than one block"));
    }
    let pre = l.preheader.ok_or_else(|| unsupported(f, l, "no preheader"))?;
    let block = f.block(header);
    let Some(Op::CondBr { cond: Operand::Value(cond), then_block, else_block }) =
        block.terminator().map(|t| &t.op)
    else {
        return Err(unsupported(f, l, "the latch does not end in a conditional branch"));
    };
    if *then_block != header || *else_block == header {
        return Err(unsupported(f, l, "the back edge is not the taken branch"));
    }
    let Some(Op::Icmp { pred: CmpPred::Lt, lhs: Operand::Value(iv_next), rhs: bound }) =
        f.def_inst(*cond).map(|i| &i.op)
    else {
        return Err(unsupported(f, l, "the exit test is not `icmp lt`"));
    };
    let invariant = match bound {
        Operand::Value(v) => match f.value(*v).def {
            ValueDef::Inst(id) => f.block_of(id) != header,
            _ => true,
        },
        Operand::Int(_) => true,
        _ => false,
    };
    if !invariant {
        return Err(unsupported(f, l, "the trip bound varies inside the loop"));
    }
    let mut phis = Vec::new();
    for inst in &block.insts[..block.phi_count()] {
        let (init, next) = phi_init_next(inst, l)
            .ok_or_else(|| unsupported(f, l, "a header phi has extra incoming edges"))?;
        phis.push((inst.result.unwrap(), init, next));
    }
    let counter = match f.def_inst(*iv_next).map(|i| &i.op) {
        Some(Op::Bin { op: BinOp::Add, lhs: Operand::Value(iv), rhs: Operand::Int(step) })
            if *step > 0
                && phis.iter().any(|p| p.0 == *iv && p.2 == Operand::Value(*iv_next)) =>
        {
            Some((*iv, *step))
        }
        _ => None,
    };
    let (iv, step) = counter
        .ok_or_else(|| unsupported(f, l, "the exit test is not on a counter with a positive constant step"))?;
    let users = f.users();
    let only_used_by = |v: ValueId, allowed: &[Option<ValueId>]| {
        users[v.index()].iter().all(|u| {
            let inst = f.inst(*u);
            inst.op.is_terminator() || matches!(inst.op, Op::Phi { .. }) || allowed.contains(&inst.result)
        })
    };
    if !only_used_by(*iv_next, &[Some(*cond)]) || users[cond.index()].len() != 1 {
        return Err(unsupported(f, l, "the counter update has other uses"));
    }
    for inst in &block.insts {
        let Some(v) = inst.result else { continue };
        for u in &users[v.index()] {
            let user = f.inst(*u);
            if f.block_of(*u) != header && !matches!(user.op, Op::Phi { .. }) {
                return Err(unsupported(
                    f,
                    l,
                    &format!("%{} is used after the loop", f.value_name(v)),
                ));
            }
        }
    }
    Ok(Shape {
        header,
        pre,
        exit: *else_block,
        phis,
        iv,
        iv_next: *iv_next,
        step,
        cond: *cond,
        bound: *bound,
    })
}

/// Unrolls a single-block counted loop by `factor`: a guarded main loop runs
/// `factor` copies of the body per trip while at least `factor` iterations
/// remain, then the original loop finishes the rest.
pub fn unroll(f: &mut Function, l: &LoopInfo, factor: u32) -> Result<TransformReport, TransformError> {
    let mut report = TransformReport::new(&format!("unroll:{factor}"), f, l);
    if factor <= 1 {
        return Ok(report);
    }
    let s = match_shape(f, l)?;
    let factor = factor as i64;
    let label = f.block(s.header).label.clone();
    let labels = [
        f.fresh_label(&format!("{label}.uguard")),
        f.fresh_label(&format!("{label}.ubody")),
        f.fresh_label(&format!("{label}.rem")),
    ];
    let (pre_label, exit_label) = (f.block(s.pre).label.clone(), f.block(s.exit).label.clone());
    let at = s.header.index();
    for (k, name) in labels.iter().enumerate() {
        insert_block(f, at + k, Block { label: name.clone(), insts: Vec::new() });
    }
    let id = |f: &Function, name: &str| f.block_by_label(name).unwrap();
    let (guard, body, rem) = (id(f, &labels[0]), id(f, &labels[1]), id(f, &labels[2]));
    let (header, pre, exit) = (id(f, &label), id(f, &pre_label), id(f, &exit_label));

    let mut created = Vec::new();
    let mut new_value = |f: &mut Function, base: &str, like: ValueId| {
        let name = f.fresh_name(base);
        created.push(name.clone());
        f.add_value(name, f.value(like).kind)
    };
    let init_of = |v: ValueId| s.phis.iter().find(|p| p.0 == v).unwrap().1;

    // uguard: enter the unrolled loop only if `factor` iterations remain.
    let iv_name = f.value_name(s.iv).to_string();
    let lim = new_value(f, &format!("{iv_name}.ulim"), s.iv);
    let go = new_value(f, &format!("{iv_name}.uenter"), s.cond);
    f.block_mut(guard).insts = vec![
        Instruction::new(Some(lim), Op::Bin { op: BinOp::Sub, lhs: s.bound, rhs: Operand::Int((factor - 1) * s.step) }),
        Instruction::new(Some(go), Op::Icmp { pred: CmpPred::Lt, lhs: init_of(s.iv), rhs: Operand::Value(lim) }),
        Instruction::new(None, Op::CondBr { cond: Operand::Value(go), then_block: body, else_block: header }),
    ];

    // ubody: one phi per header phi, then `factor` copies of the body.
    let mut insts = Vec::new();
    let mut map: HashMap<ValueId, Operand> = HashMap::new();
    let mut uphis = Vec::new();
    for (v, _, _) in &s.phis {
        let u = new_value(f, &format!("{}.u", f.value_name(*v)), *v);
        map.insert(*v, Operand::Value(u));
        uphis.push(u);
    }
    let iv_u = map[&s.iv];
    let originals: Vec<Instruction> = {
        let block = f.block(header);
        block.insts[block.phi_count()..block.insts.len() - 1]
            .iter()
            .filter(|i| i.result != Some(s.iv_next) && i.result != Some(s.cond))
            .cloned()
            .collect()
    };
    for j in 0..factor {
        if j > 0 {
            let mut next_map = HashMap::new();
            for (v, _, next) in &s.phis {
                next_map.insert(*v, remap(next, &map));
            }
            let iv_j = new_value(f, &format!("{iv_name}.u{j}"), s.iv);
            insts.push(Instruction::new(Some(iv_j), Op::Bin { op: BinOp::Add, lhs: iv_u, rhs: Operand::Int(j * s.step) }));
            next_map.insert(s.iv, Operand::Value(iv_j));
            map.extend(next_map);
        }
        for inst in &originals {
            let mut copy = inst.clone();
            copy.debug = None;
            for o in copy.op.operands_mut() {
                *o = remap(o, &map);
            }
            if let Some(r) = inst.result {
                let c = new_value(f, &format!("{}.u{j}", f.value_name(r)), r);
                copy.result = Some(c);
                map.insert(r, Operand::Value(c));
            }
            insts.push(copy);
        }
    }
    let iv_u_next = new_value(f, &format!("{iv_name}.u.next"), s.iv);
    map.insert(s.iv_next, Operand::Value(iv_u_next));
    let cont = new_value(f, &format!("{iv_name}.ucont"), s.cond);
    insts.push(Instruction::new(Some(iv_u_next), Op::Bin { op: BinOp::Add, lhs: iv_u, rhs: Operand::Int(factor * s.step) }));
    insts.push(Instruction::new(Some(cont), Op::Icmp { pred: CmpPred::Lt, lhs: Operand::Value(iv_u_next), rhs: Operand::Value(lim) }));
    insts.push(Instruction::new(None, Op::CondBr { cond: Operand::Value(cont), then_block: body, else_block: rem }));
    // Values after the last copy, as seen on the back edge.
    let last: Vec<Operand> = s.phis.iter().map(|(_, _, next)| remap(next, &map)).collect();
    let phis = s.phis.iter().zip(&uphis).zip(&last).map(|(((_, init, _), u), back)| {
        Instruction::new(Some(*u), Op::Phi { incoming: vec![(*init, guard), (*back, body)] })
    });
    f.block_mut(body).insts = phis.chain(insts).collect();

    // rem: run the leftover iterations in the original loop, if any.
    let more = new_value(f, &format!("{iv_name}.umore"), s.cond);
    f.block_mut(rem).insts = vec![
        Instruction::new(Some(more), Op::Icmp { pred: CmpPred::Lt, lhs: Operand::Value(iv_u_next), rhs: s.bound }),
        Instruction::new(None, Op::CondBr { cond: Operand::Value(more), then_block: header, else_block: exit }),
    ];

    for (k, inst) in f.block_mut(header).insts.iter_mut().enumerate() {
        if let Op::Phi { incoming } = &mut inst.op {
            for (_, from) in incoming.iter_mut() {
                if *from == pre {
                    *from = guard;
                }
            }
            incoming.push((last[k], rem));
        }
    }
    for target in f.block_mut(pre).insts.last_mut().unwrap().op.successors_mut() {
        if *target == header {
            *target = guard;
        }
    }
    for inst in f.block_mut(exit).insts.iter_mut() {
        if let Op::Phi { incoming } = &mut inst.op {
            if let Some((o, _)) = incoming.iter().find(|(_, b)| *b == header).copied() {
                incoming.push((remap(&o, &map), rem));
            }
        }
    }
    f.renumber();
    report.created_values = created;
    Ok(report)
}

fn remap(o: &Operand, map: &HashMap<ValueId, Operand>) -> Operand {
    match o {
        Operand::Value(v) => map.get(v).copied().unwrap_or(*o),
        _ => *o,
    }
}
