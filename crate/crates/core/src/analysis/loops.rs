use std::collections::BTreeSet;

use super::cfg::Cfg;
use super::dominators::DomTree;
use crate::mir::{BlockId, Function};

/// A natural loop. All back edges into the same header form one loop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoopInfo {
    pub header: BlockId,
    /// The first latch in block order; the only one for loops the
    /// transforms accept.
    pub latch: BlockId,
    pub latches: Vec<BlockId>,
    pub body: BTreeSet<BlockId>,
    /// Index of the enclosing loop in the list returned by [`find_loops`].
    pub parent: Option<usize>,
    /// The unique predecessor of the header from outside the loop.
    pub preheader: Option<BlockId>,
    /// 1 for outermost loops.
    pub depth: usize,
}

impl LoopInfo {
    pub fn contains(&self, b: BlockId) -> bool {
        self.body.contains(&b)
    }

    /// Blocks outside the loop reached directly from inside it.
    pub fn exits(&self, f: &Function) -> Vec<BlockId> {
        let mut out = Vec::new();
        for b in &self.body {
            for s in f.block(*b).successors() {
                if !self.contains(s) && !out.contains(&s) {
                    out.push(s);
                }
            }
        }
        out
    }
}

/// All natural loops of `f`, innermost first (deeper loops before their
/// parents; ties broken by header order).
pub fn find_loops(f: &Function) -> Vec<LoopInfo> {
    let cfg = Cfg::new(f);
    let dom = DomTree::new(&cfg);
    let mut headers: Vec<(BlockId, Vec<BlockId>)> = Vec::new();
    for (u, v) in cfg.retreating_edges() {
        if !dom.dominates(v, u) {
            continue;
        }
        match headers.iter_mut().find(|(h, _)| *h == v) {
            Some((_, latches)) => latches.push(u),
            None => headers.push((v, vec![u])),
        }
    }
    let mut loops: Vec<LoopInfo> = headers
        .into_iter()
        .map(|(header, mut latches)| {
            latches.sort();
            let mut body = BTreeSet::from([header]);
            let mut work: Vec<BlockId> = latches.clone();
            while let Some(b) = work.pop() {
                if body.insert(b) {
                    work.extend(cfg.preds[b.index()].iter().copied().filter(|p| cfg.reachable(*p)));
                }
            }
            let outside: Vec<BlockId> = cfg.preds[header.index()]
                .iter()
                .copied()
                .filter(|p| !body.contains(p))
                .collect();
            LoopInfo {
                header,
                latch: latches[0],
                latches,
                body,
                parent: None,
                preheader: if outside.len() == 1 {
                    Some(outside[0])
                } else {
                    None
                },
                depth: 1,
            }
        })
        .collect();
    for i in 0..loops.len() {
        loops[i].depth = loops
            .iter()
            .filter(|o| o.header != loops[i].header && o.body.is_superset(&loops[i].body))
            .count()
            + 1;
    }
    loops.sort_by_key(|l| (std::cmp::Reverse(l.depth), l.header));
    for i in 0..loops.len() {
        // The parent is the smallest strictly enclosing loop.
        loops[i].parent = (0..loops.len())
            .filter(|&j| j != i && loops[j].body.is_superset(&loops[i].body))
            .filter(|&j| loops[j].header != loops[i].header)
            .min_by_key(|&j| loops[j].body.len());
    }
    loops
}

/// The innermost loop containing `b`.
pub fn innermost_containing(loops: &[LoopInfo], b: BlockId) -> Option<usize> {
    loops
        .iter()
        .enumerate()
        .filter(|(_, l)| l.contains(b))
        .max_by_key(|(_, l)| l.depth)
        .map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mir::parse_module;

    #[test]
    fn loop_free() {
        let m = parse_module("fn main { e: br x\n x: ret }").unwrap();
        assert!(find_loops(&m.functions[0]).is_empty());
    }

    #[test]
    fn nested_inner_first() {
        let m = parse_module(
            "fn main(%n: i64) {
entry:
  br outer
outer:
  %k = phi i64 [0, entry], [%k.next, olatch]
  br inner
inner:
  %i = phi i64 [0, outer], [%i.next, inner]
  %i.next = add %i, 1
  %c = icmp lt %i.next, %n
  condbr %c, inner, olatch
olatch:
  %k.next = add %k, 1
  %d = icmp lt %k.next, %n
  condbr %d, outer, exit
exit:
  ret
}",
        )
        .unwrap();
        let f = &m.functions[0];
        let loops = find_loops(f);
        assert_eq!(loops.len(), 2);
        let label = |b: BlockId| f.block(b).label.as_str();
        assert_eq!(label(loops[0].header), "inner");
        assert_eq!(label(loops[0].latch), "inner");
        assert_eq!(loops[0].depth, 2);
        assert_eq!(loops[0].parent, Some(1));
        assert_eq!(label(loops[1].header), "outer");
        assert_eq!(label(loops[1].latch), "olatch");
        assert_eq!(loops[1].preheader.map(label), Some("entry"));
        assert_eq!(loops[0].preheader.map(label), Some("outer"));
        assert_eq!(loops[1].body.len(), 3);
        assert_eq!(innermost_containing(&loops, loops[0].header), Some(0));
    }
}
