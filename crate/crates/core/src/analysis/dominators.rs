use super::cfg::Cfg;
use crate::mir::BlockId;

/// Immediate dominators, computed with the Cooper-Harvey-Kennedy iteration.
#[derive(Debug, Clone)]
pub struct DomTree {
    idom: Vec<Option<BlockId>>,
    rpo_index: Vec<Option<usize>>,
}

impl DomTree {
    pub fn new(cfg: &Cfg) -> DomTree {
        let n = cfg.succs.len();
        let mut idom: Vec<Option<BlockId>> = vec![None; n];
        if cfg.rpo.is_empty() {
            return DomTree {
                idom,
                rpo_index: cfg.rpo_index.clone(),
            };
        }
        let entry = cfg.rpo[0];
        idom[entry.index()] = Some(entry);
        let mut changed = true;
        while changed {
            changed = false;
            for &b in cfg.rpo.iter().skip(1) {
                let mut new_idom: Option<BlockId> = None;
                for &p in &cfg.preds[b.index()] {
                    if idom[p.index()].is_none() {
                        continue;
                    }
                    new_idom = Some(match new_idom {
                        None => p,
                        Some(cur) => intersect(&idom, &cfg.rpo_index, p, cur),
                    });
                }
                if new_idom.is_some() && idom[b.index()] != new_idom {
                    idom[b.index()] = new_idom;
                    changed = true;
                }
            }
        }
        DomTree {
            idom,
            rpo_index: cfg.rpo_index.clone(),
        }
    }

    /// Immediate dominator; the entry block is its own.
    pub fn idom(&self, b: BlockId) -> Option<BlockId> {
        self.idom[b.index()]
    }

    /// Whether `a` dominates `b` (reflexive). False for unreachable blocks.
    pub fn dominates(&self, a: BlockId, b: BlockId) -> bool {
        if self.idom[a.index()].is_none() || self.idom[b.index()].is_none() {
            return false;
        }
        let mut cur = b;
        loop {
            if cur == a {
                return true;
            }
            let up = self.idom[cur.index()].unwrap();
            if up == cur {
                return false;
            }
            cur = up;
        }
    }

    pub fn depth_order(&self, b: BlockId) -> Option<usize> {
        self.rpo_index[b.index()]
    }
}

fn intersect(
    idom: &[Option<BlockId>],
    order: &[Option<usize>],
    mut a: BlockId,
    mut b: BlockId,
) -> BlockId {
    let ord = |x: BlockId| order[x.index()].unwrap();
    while a != b {
        while ord(a) > ord(b) {
            a = idom[a.index()].unwrap();
        }
        while ord(b) > ord(a) {
            b = idom[b.index()].unwrap();
        }
    }
    a
}
