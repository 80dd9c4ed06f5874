use crate::mir::{BlockId, Function};

/// Successor and predecessor lists plus a reverse postorder of the blocks
/// reachable from entry.
#[derive(Debug, Clone)]
pub struct Cfg {
    pub succs: Vec<Vec<BlockId>>,
    pub preds: Vec<Vec<BlockId>>,
    pub rpo: Vec<BlockId>,
    /// Position in `rpo`, or `None` for unreachable blocks.
    pub rpo_index: Vec<Option<usize>>,
}

impl Cfg {
    pub fn new(f: &Function) -> Cfg {
        let n = f.blocks.len();
        let succs: Vec<Vec<BlockId>> = f.blocks.iter().map(|b| b.successors()).collect();
        let preds = f.predecessors();
        let mut post = Vec::with_capacity(n);
        let mut visited = vec![false; n];
        if n > 0 {
            // Iterative DFS keeping an explicit successor cursor per frame.
            let mut stack: Vec<(BlockId, usize)> = vec![(BlockId(0), 0)];
            visited[0] = true;
            while let Some((b, next)) = stack.last_mut() {
                let b = *b;
                if let Some(&s) = succs[b.index()].get(*next) {
                    *next += 1;
                    if !visited[s.index()] {
                        visited[s.index()] = true;
                        stack.push((s, 0));
                    }
                } else {
                    post.push(b);
                    stack.pop();
                }
            }
        }
        post.reverse();
        let mut rpo_index = vec![None; n];
        for (i, b) in post.iter().enumerate() {
            rpo_index[b.index()] = Some(i);
        }
        Cfg {
            succs,
            preds,
            rpo: post,
            rpo_index,
        }
    }

    pub fn reachable(&self, b: BlockId) -> bool {
        self.rpo_index[b.index()].is_some()
    }

    /// Edges `u -> v` where `v` does not come after `u` in reverse postorder.
    pub fn retreating_edges(&self) -> Vec<(BlockId, BlockId)> {
        let mut out = Vec::new();
        for &u in &self.rpo {
            for &v in &self.succs[u.index()] {
                if self.rpo_index[v.index()] <= self.rpo_index[u.index()] {
                    out.push((u, v));
                }
            }
        }
        out
    }
}
