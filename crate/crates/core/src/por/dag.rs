use std::fmt::Write;

use super::unit::{UnitMask, UnitOrder};
use crate::error::{Error, Result};
use crate::model::TAPS_PER_CELL;

const N: usize = TAPS_PER_CELL;

/// Precedence constraints between the eight slots of a unit. An edge
/// `u -> v` means `u` fires before `v`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartialOrderDag {
    succ: [u8; N],
    edges: Vec<(u8, u8)>,
}

impl PartialOrderDag {
    /// Edges use 0-based labels.
    pub fn from_edges(edges: &[(u8, u8)]) -> Result<Self> {
        let mut succ = [0u8; N];
        for &(u, v) in edges {
            if u as usize >= N || v as usize >= N {
                return Err(Error::invalid(format!("edge {u}->{v} is outside a unit")));
            }
            if u == v {
                return Err(Error::Cycle);
            }
            succ[u as usize] |= 1 << v;
        }
        let dag = Self {
            succ,
            edges: edges.to_vec(),
        };
        if dag.has_cycle() {
            return Err(Error::Cycle);
        }
        Ok(dag)
    }

    fn in_degrees(&self) -> [u8; N] {
        let mut d = [0u8; N];
        for s in self.succ {
            for (v, dv) in d.iter_mut().enumerate() {
                *dv += (s >> v) & 1;
            }
        }
        d
    }

    fn has_cycle(&self) -> bool {
        let mut deg = self.in_degrees();
        let mut stack: Vec<usize> = (0..N).filter(|&v| deg[v] == 0).collect();
        let mut seen = 0;
        while let Some(u) = stack.pop() {
            seen += 1;
            for (v, d) in deg.iter_mut().enumerate() {
                if self.succ[u] & (1 << v) != 0 {
                    *d -= 1;
                    if *d == 0 {
                        stack.push(v);
                    }
                }
            }
        }
        seen != N
    }

    /// Edges in insertion order, 0-based.
    pub fn edges(&self) -> &[(u8, u8)] {
        &self.edges
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.succ[u] & (1 << v) != 0
    }

    /// Slots with no predecessor, ascending.
    pub fn zero_degrees(&self) -> Vec<usize> {
        let d = self.in_degrees();
        (0..N).filter(|&v| d[v] == 0).collect()
    }

    /// Graphviz text with 1-based labels.
    pub fn to_dot(&self, name: &str) -> String {
        let mut s = format!("digraph {name} {{\n");
        for &(u, v) in &self.edges {
            let _ = writeln!(s, "  {} -> {};", u + 1, v + 1);
        }
        s.push_str("}\n");
        s
    }

    /// Every total order of the slots that respects the edges, in
    /// lexicographic order.
    pub fn linear_extensions(&self) -> Vec<UnitOrder> {
        let mut out = Vec::new();
        let mut deg = self.in_degrees();
        let mut prefix = [0u8; N];
        self.extend(&mut deg, 0u8, &mut prefix, 0, &mut out);
        out
    }

    fn extend(
        &self,
        deg: &mut [u8; N],
        used: u8,
        prefix: &mut [u8; N],
        len: usize,
        out: &mut Vec<UnitOrder>,
    ) {
        if len == N {
            out.push(UnitOrder::new(*prefix).expect("complete permutation"));
            return;
        }
        for u in 0..N {
            if used & (1 << u) != 0 || deg[u] != 0 {
                continue;
            }
            for (v, d) in deg.iter_mut().enumerate() {
                if self.succ[u] & (1 << v) != 0 {
                    *d -= 1;
                }
            }
            prefix[len] = u as u8;
            self.extend(deg, used | (1 << u), prefix, len + 1, out);
            for (v, d) in deg.iter_mut().enumerate() {
                if self.succ[u] & (1 << v) != 0 {
                    *d += 1;
                }
            }
        }
    }
}

/// Builds the precedence graph implied by the set of slots that produced
/// hits when the unit was read out in slot order.
pub fn build_dag(tapped: UnitMask) -> Result<PartialOrderDag> {
    if tapped.is_empty() {
        return Err(Error::invalid(
            "a unit with no tapped bins carries no ordering information",
        ));
    }
    // 1-based slot numbers, as the construction reads most naturally so.
    let t = |s: usize| tapped.contains(s - 1);
    let mut edges: Vec<(u8, u8)> = Vec::new();
    let mut edge = |u: usize, v: usize| edges.push((u as u8 - 1, v as u8 - 1));
    let mut bridge = (1..=N).find(|&s| t(s)).expect("non-empty");
    for number in 2..=bridge {
        edge(number, 1);
    }
    if bridge != N {
        edge(1, bridge + 1);
    }
    bridge += 1;
    for value in bridge + 1..=N {
        if t(value - 1) {
            edge(bridge, value);
            bridge = value;
        } else {
            edge(value, bridge);
        }
    }
    PartialOrderDag::from_edges(&edges)
}

/// All slot orders consistent with the tapped set, lexicographically.
pub fn enumerate_consistent(dag: &PartialOrderDag) -> Vec<UnitOrder> {
    dag.linear_extensions()
}

/// The candidate closest to `ansatz` in Kendall-tau distance; ties go to the
/// lexicographically smallest.
pub fn select_candidate(candidates: &[UnitOrder], ansatz: &UnitOrder) -> Result<UnitOrder> {
    candidates
        .iter()
        .min_by_key(|c| (c.kendall_tau(ansatz), **c))
        .copied()
        .ok_or(Error::LibraryExhausted)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(labels: &[usize]) -> UnitMask {
        UnitMask::from_one_based(labels).unwrap()
    }

    #[test]
    fn graph_of_tapped_set_2_3_5_6_8() {
        let dag = build_dag(mask(&[2, 3, 5, 6, 8])).unwrap();
        let one_based: Vec<(u8, u8)> = dag.edges().iter().map(|&(u, v)| (u + 1, v + 1)).collect();
        assert_eq!(
            one_based,
            vec![(2, 1), (1, 3), (3, 4), (5, 4), (4, 6), (6, 7), (8, 7)]
        );
        let zero: Vec<usize> = dag.zero_degrees().iter().map(|v| v + 1).collect();
        assert_eq!(zero, vec![2, 5, 8]);
        assert_eq!(enumerate_consistent(&dag).len(), 28);
    }

    #[test]
    fn only_last_tapped_leaves_seven_free() {
        let dag = build_dag(mask(&[8])).unwrap();
        assert_eq!(enumerate_consistent(&dag).len(), 5040);
    }

    #[test]
    fn fully_tapped_is_a_chain() {
        let dag = build_dag(UnitMask::FULL).unwrap();
        assert_eq!(enumerate_consistent(&dag), vec![UnitOrder::IDENTITY]);
    }

    #[test]
    fn empty_and_cyclic_inputs_are_rejected() {
        assert!(build_dag(UnitMask(0)).is_err());
        assert!(matches!(
            PartialOrderDag::from_edges(&[(0, 1), (1, 2), (2, 0)]),
            Err(Error::Cycle)
        ));
        assert!(matches!(
            PartialOrderDag::from_edges(&[(3, 3)]),
            Err(Error::Cycle)
        ));
    }

    #[test]
    fn extensions_of_empty_graph_are_all_orders() {
        let dag = PartialOrderDag::from_edges(&[]).unwrap();
        assert_eq!(dag.linear_extensions(), UnitOrder::all());
    }

    #[test]
    fn selection_prefers_closest_then_smallest() {
        let a: UnitOrder = "2,1,3,4,5,6,7,8".parse().unwrap();
        let b: UnitOrder = "1,3,2,4,5,6,7,8".parse().unwrap();
        let c: UnitOrder = "3,2,1,4,5,6,7,8".parse().unwrap();
        assert_eq!(
            select_candidate(&[c, b, a], &UnitOrder::IDENTITY).unwrap(),
            b
        );
        assert_eq!(select_candidate(&[a, c], &c).unwrap(), c);
        assert!(matches!(
            select_candidate(&[], &UnitOrder::IDENTITY),
            Err(Error::LibraryExhausted)
        ));
    }

    #[test]
    fn dot_export() {
        let dot = build_dag(mask(&[2, 8])).unwrap().to_dot("unit");
        assert!(dot.starts_with("digraph unit {\n  2 -> 1;\n"));
        assert!(dot.ends_with("}\n"));
    }
}
