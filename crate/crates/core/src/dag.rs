//! Index-based DAG helpers shared by the abstract and executable workflow
//! models and by the simulator.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

/// Structural problems found while building or ordering a graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DagIssue {
    DuplicateNode(String),
    DanglingEdge { from: String, to: String },
    /// Nodes of one offending cycle, first node repeated at the end.
    Cycle(Vec<String>),
}

/// A directed graph over string ids, stored as dense adjacency lists.
#[derive(Debug, Clone)]
pub struct Dag {
    ids: Vec<String>,
    index: BTreeMap<String, usize>,
    children: Vec<Vec<usize>>,
    parents: Vec<Vec<usize>>,
}

impl Dag {
    /// Builds the graph. Duplicate edges are collapsed; node order is kept.
    pub fn build<'a, I, E>(nodes: I, edges: E) -> Result<Self, DagIssue>
    where
        I: IntoIterator<Item = &'a str>,
        E: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut ids = Vec::new();
        let mut index = BTreeMap::new();
        for id in nodes {
            if index.insert(id.to_string(), ids.len()).is_some() {
                return Err(DagIssue::DuplicateNode(id.to_string()));
            }
            ids.push(id.to_string());
        }
        let mut seen = BTreeSet::new();
        let mut children = vec![Vec::new(); ids.len()];
        let mut parents = vec![Vec::new(); ids.len()];
        for (from, to) in edges {
            let (Some(&u), Some(&v)) = (index.get(from), index.get(to)) else {
                return Err(DagIssue::DanglingEdge {
                    from: from.to_string(),
                    to: to.to_string(),
                });
            };
            if seen.insert((u, v)) {
                children[u].push(v);
                parents[v].push(u);
            }
        }
        Ok(Dag {
            ids,
            index,
            children,
            parents,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn children(&self, i: usize) -> &[usize] {
        &self.children[i]
    }

    pub fn parents(&self, i: usize) -> &[usize] {
        &self.parents[i]
    }

    /// Returns one cycle if the graph has any.
    pub fn find_cycle(&self) -> Option<Vec<String>> {
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut state = vec![0u8; self.len()];
        let mut on_path: Vec<usize> = Vec::new();
        for root in 0..self.len() {
            if state[root] != 0 {
                continue;
            }
            let mut stack: Vec<(usize, usize)> = vec![(root, 0)];
            state[root] = 1;
            on_path.push(root);
            while let Some(&mut (node, ref mut next)) = stack.last_mut() {
                if let Some(&child) = self.children[node].get(*next) {
                    *next += 1;
                    match state[child] {
                        0 => {
                            state[child] = 1;
                            on_path.push(child);
                            stack.push((child, 0));
                        }
                        1 => {
                            let start = on_path.iter().position(|&n| n == child).unwrap();
                            let mut cycle: Vec<String> =
                                on_path[start..].iter().map(|&n| self.ids[n].clone()).collect();
                            cycle.push(self.ids[child].clone());
                            return Some(cycle);
                        }
                        _ => {}
                    }
                } else {
                    state[node] = 2;
                    on_path.pop();
                    stack.pop();
                }
            }
        }
        None
    }

    /// Longest-path level of every node: roots are 0, others 1 + max parent.
    pub fn levels(&self) -> Result<Vec<usize>, DagIssue> {
        let order = self.topological_order()?;
        let mut level = vec![0usize; self.len()];
        for &n in &order {
            for &c in &self.children[n] {
                level[c] = level[c].max(level[n] + 1);
            }
        }
        Ok(level)
    }

    /// Kahn's algorithm; ties broken by insertion order of the nodes.
    pub fn topological_order(&self) -> Result<Vec<usize>, DagIssue> {
        let mut indeg: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        let mut ready: BTreeSet<usize> = (0..self.len()).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(self.len());
        while let Some(n) = ready.pop_first() {
            order.push(n);
            for &c in &self.children[n] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        if order.len() != self.len() {
            return Err(DagIssue::Cycle(self.find_cycle().unwrap_or_default()));
        }
        Ok(order)
    }

    /// Topological order sorted by (level, insertion index). Deterministic and
    /// keeps same-level nodes adjacent.
    pub fn level_order(&self) -> Result<Vec<usize>, DagIssue> {
        let levels = self.levels()?;
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by_key(|&i| (levels[i], i));
        Ok(order)
    }

    /// Heaviest path where each node carries `weight[i]`.
    pub fn longest_weighted_path(&self, weight: &[f64]) -> Result<f64, DagIssue> {
        let order = self.topological_order()?;
        let mut best = vec![0.0f64; self.len()];
        let mut overall = 0.0f64;
        for &n in &order {
            let from_parents = self.parents[n]
                .iter()
                .map(|&p| best[p])
                .fold(0.0f64, f64::max);
            best[n] = from_parents + weight[n];
            overall = overall.max(best[n]);
        }
        Ok(overall)
    }

    /// Every node reachable from `start` (excluding `start`).
    pub fn descendants(&self, start: usize) -> BTreeSet<usize> {
        let mut seen = BTreeSet::new();
        let mut queue: VecDeque<usize> = self.children[start].iter().copied().collect();
        while let Some(n) = queue.pop_front() {
            if seen.insert(n) {
                queue.extend(self.children[n].iter().copied());
            }
        }
        seen
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dag(nodes: &[&str], edges: &[(&str, &str)]) -> Result<Dag, DagIssue> {
        Dag::build(nodes.iter().copied(), edges.iter().copied())
    }

    #[test]
    fn diamond_levels() {
        let g = dag(
            &["a", "b", "c", "d"],
            &[("a", "b"), ("a", "c"), ("b", "d"), ("c", "d")],
        )
        .unwrap();
        assert_eq!(g.levels().unwrap(), vec![0, 1, 1, 2]);
    }

    #[test]
    fn cycle_is_reported_closed() {
        let g = dag(&["a", "b", "c"], &[("a", "b"), ("b", "c"), ("c", "b")]).unwrap();
        let cycle = g.find_cycle().unwrap();
        assert_eq!(cycle.first(), cycle.last());
        assert!(cycle.contains(&"b".to_string()) && cycle.contains(&"c".to_string()));
        assert!(matches!(g.topological_order(), Err(DagIssue::Cycle(_))));
    }

    #[test]
    fn dangling_and_duplicate() {
        assert!(matches!(
            dag(&["a"], &[("a", "z")]),
            Err(DagIssue::DanglingEdge { .. })
        ));
        assert!(matches!(dag(&["a", "a"], &[]), Err(DagIssue::DuplicateNode(_))));
    }

    #[test]
    fn weighted_path() {
        let g = dag(&["a", "b", "c"], &[("a", "c"), ("b", "c")]).unwrap();
        assert_eq!(g.longest_weighted_path(&[1.0, 5.0, 2.0]).unwrap(), 7.0);
    }
}
