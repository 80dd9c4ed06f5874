//! Shared helpers: a random CFG generator and a brute-force liveness oracle.

#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use reslab::mir::{Function, InstId, Op, Operand, ValueId};

/// A random function with at most `max_blocks` blocks and `max_insts`
/// instructions, in valid SSA form. Every block is reachable and every
/// value it uses is defined on all paths.
pub fn random_cfg(rng: &mut impl Rng, max_blocks: usize, max_insts: usize) -> String {
    let n = rng.gen_range(1..=max_blocks);
    // A chain b0 -> b1 -> ... keeps every block reachable and keeps the
    // dominators of bK among b0..bK. Extra edges go forward, or back to a
    // dominator so the graph stays reducible.
    let mut succs: Vec<Vec<usize>> = (0..n).map(|b| if b + 1 < n { vec![b + 1] } else { vec![] }).collect();
    for b in 0..n {
        if b + 2 < n && rng.gen_bool(0.3) {
            succs[b].push(rng.gen_range(b + 2..n));
        }
    }
    let dom = dominators(&succs);
    for b in 0..n {
        if succs[b].len() < 2 && rng.gen_bool(0.4) {
            let back: Vec<usize> = dom[b].iter().copied().filter(|d| *d > 0).collect();
            if let Some(t) = back.choose(rng) {
                succs[b].push(*t);
            }
        }
        succs[b].shuffle(rng);
    }
    let mut preds = vec![Vec::new(); n];
    for (b, ss) in succs.iter().enumerate() {
        for s in ss {
            preds[*s].push(b);
        }
    }
    debug_assert_eq!(dominators(&succs), dom);

    let cmps = succs.iter().filter(|s| s.len() == 2).count();
    let mut budget = max_insts.saturating_sub(n + cmps);
    let mut phis = vec![0usize; n];
    for b in 1..n {
        if budget > 0 && rng.gen_bool(0.5) {
            phis[b] = 1;
            budget -= 1;
        }
    }
    let mut adds = vec![0usize; n];
    for _ in 0..budget {
        if rng.gen_bool(0.8) {
            adds[rng.gen_range(0..n)] += 1;
        }
    }
    let phi_name = |b: usize| format!("%p{b}");
    let add_name = |b: usize, j: usize| format!("%v{b}_{j}");
    let defs_of = |b: usize| -> Vec<String> {
        let mut d: Vec<String> = (0..phis[b]).map(|_| phi_name(b)).collect();
        d.extend((0..adds[b]).map(|j| add_name(b, j)));
        d
    };
    let mut text = String::from("fn main(%a: i64, %b: i64) -> i64 {\n");
    for b in 0..n {
        text += &format!("b{b}:\n");
        let mut avail: Vec<String> = vec!["%a".into(), "%b".into()];
        for d in &dom[b] {
            if *d != b {
                avail.extend(defs_of(*d));
            }
        }
        if phis[b] == 1 {
            let incoming: Vec<String> = preds[b]
                .iter()
                .map(|p| {
                    let mut pool: Vec<String> = vec!["%a".into(), "%b".into()];
                    for d in &dom[*p] {
                        pool.extend(defs_of(*d));
                    }
                    format!("[{}, b{p}]", pool.choose(rng).unwrap())
                })
                .collect();
            text += &format!("  {} = phi i64 {}\n", phi_name(b), incoming.join(", "));
            avail.push(phi_name(b));
        }
        let operand = |rng: &mut dyn rand::RngCore, avail: &[String]| -> String {
            if rng.gen_bool(0.2) {
                rng.gen_range(0..10).to_string()
            } else {
                avail.choose(rng).unwrap().clone()
            }
        };
        for j in 0..adds[b] {
            let (x, y) = (operand(rng, &avail), operand(rng, &avail));
            text += &format!("  {} = add {x}, {y}\n", add_name(b, j));
            avail.push(add_name(b, j));
        }
        match succs[b][..] {
            [] => text += &format!("  ret {}\n", operand(rng, &avail)),
            [t] => text += &format!("  br b{t}\n"),
            [t, e] => {
                let (x, y) = (operand(rng, &avail), operand(rng, &avail));
                text += &format!("  %c{b} = icmp lt {x}, {y}\n  condbr %c{b}, b{t}, b{e}\n");
            }
            _ => unreachable!(),
        }
    }
    text + "}\n"
}

/// Dominator sets by the classic iterative algorithm; block 0 is the entry.
fn dominators(succs: &[Vec<usize>]) -> Vec<BTreeSet<usize>> {
    let n = succs.len();
    let mut preds = vec![Vec::new(); n];
    for (b, ss) in succs.iter().enumerate() {
        for s in ss {
            preds[*s].push(b);
        }
    }
    let all: BTreeSet<usize> = (0..n).collect();
    let mut dom: Vec<BTreeSet<usize>> = (0..n).map(|b| if b == 0 { [0].into() } else { all.clone() }).collect();
    let mut changed = true;
    while changed {
        changed = false;
        for b in 1..n {
            let mut d = preds[b]
                .iter()
                .map(|p| dom[*p].clone())
                .reduce(|a, x| a.intersection(&x).copied().collect())
                .unwrap_or_default();
            d.insert(b);
            if d != dom[b] {
                dom[b] = d;
                changed = true;
            }
        }
    }
    dom
}

fn live_from(f: &Function, b: usize, pos: usize, v: ValueId, visits: &mut [u8]) -> bool {
    let block = &f.blocks[b];
    for inst in &block.insts[pos..] {
        let is_phi = matches!(inst.op, Op::Phi { .. });
        if !is_phi && inst.op.used_values().any(|u| u == v) {
            return true;
        }
        if inst.result == Some(v) {
            return false;
        }
    }
    let mut succs = block.successors();
    succs.dedup();
    for s in succs {
        let sb = &f.blocks[s.index()];
        let edge_use = sb.insts.iter().any(|i| match &i.op {
            Op::Phi { incoming } => incoming
                .iter()
                .any(|(o, from)| from.index() == b && *o == Operand::Value(v)),
            _ => false,
        });
        if edge_use {
            return true;
        }
        // At most one unwinding of any cycle.
        if visits[s.index()] >= 2 {
            continue;
        }
        visits[s.index()] += 1;
        let live = live_from(f, s.index(), 0, v, visits);
        visits[s.index()] -= 1;
        if live {
            return true;
        }
    }
    false
}

fn position(f: &Function, id: InstId) -> (usize, usize) {
    let mut next = 0;
    for (b, block) in f.blocks.iter().enumerate() {
        if id.index() < next + block.insts.len() {
            return (b, id.index() - next);
        }
        next += block.insts.len();
    }
    panic!("no instruction {id}");
}

/// Whether some path from just before `id` uses `v` before redefining it.
pub fn brute_live_in(f: &Function, id: InstId, v: ValueId) -> bool {
    let (b, pos) = position(f, id);
    live_from(f, b, pos, v, &mut vec![0; f.blocks.len()])
}

/// Whether some path from just after `id` uses `v` before redefining it.
pub fn brute_live_out(f: &Function, id: InstId, v: ValueId) -> bool {
    let (b, pos) = position(f, id);
    live_from(f, b, pos + 1, v, &mut vec![0; f.blocks.len()])
}

/// Mismatches between `compute_liveness` and the path oracle, as
/// `(inst, value, which)` triples.
pub fn liveness_mismatches(f: &Function) -> Vec<(InstId, ValueId, &'static str)> {
    let lv = reslab::analysis::compute_liveness(f);
    let mut bad = Vec::new();
    for inst in f.insts() {
        for vi in 0..f.values.len() {
            let v = ValueId(vi as u32);
            if lv.is_live_in(inst.id, v) != brute_live_in(f, inst.id, v) {
                bad.push((inst.id, v, "in"));
            }
            if lv.is_live_out(inst.id, v) != brute_live_out(f, inst.id, v) {
                bad.push((inst.id, v, "out"));
            }
        }
    }
    bad
}
