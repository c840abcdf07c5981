//! Network graph induced by a set of lines.
//!
//! Consecutive stations of a line are joined by an undirected edge whose
//! length is the straight-line distance between them. Edges shared by several
//! lines are stored once. Station-to-station network distances come from a
//! Dijkstra run per source.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use rayon::prelude::*;
use thiserror::Error;

use crate::geomodel::PlanarPoint;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetworkError {
    #[error("line {line} visits station {station} more than once")]
    LoopInLine { line: usize, station: usize },
    #[error("line {line} has {len} station(s); at least 2 are required")]
    LineTooShort { line: usize, len: usize },
    #[error("line {line} references station {station}, but only {station_count} exist")]
    StationOutOfRange {
        line: usize,
        station: usize,
        station_count: usize,
    },
}

/// Checks index range, per-line uniqueness and minimum length.
pub fn check_lines(lines: &[Vec<usize>], station_count: usize) -> Result<(), NetworkError> {
    for (li, line) in lines.iter().enumerate() {
        if line.len() < 2 {
            return Err(NetworkError::LineTooShort {
                line: li,
                len: line.len(),
            });
        }
        let mut seen = vec![false; station_count];
        for &s in line {
            if s >= station_count {
                return Err(NetworkError::StationOutOfRange {
                    line: li,
                    station: s,
                    station_count,
                });
            }
            if std::mem::replace(&mut seen[s], true) {
                return Err(NetworkError::LoopInLine { line: li, station: s });
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    /// Smaller endpoint.
    pub a: usize,
    pub b: usize,
    pub length: f64,
}

#[derive(Debug, Clone)]
pub struct LineNetwork {
    station_count: usize,
    lines: Vec<Vec<usize>>,
    edges: Vec<Edge>,
    adjacency: Vec<Vec<(usize, f64)>>,
}

impl LineNetwork {
    pub fn build(lines: &[Vec<usize>], stations: &[PlanarPoint]) -> Result<Self, NetworkError> {
        let station_count = stations.len();
        check_lines(lines, station_count)?;
        let mut unique: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for line in lines {
            for w in line.windows(2) {
                let (a, b) = (w[0].min(w[1]), w[0].max(w[1]));
                unique
                    .entry((a, b))
                    .or_insert_with(|| stations[a].distance(stations[b]));
            }
        }
        let edges: Vec<Edge> = unique
            .into_iter()
            .map(|((a, b), length)| Edge { a, b, length })
            .collect();
        let mut adjacency = vec![Vec::new(); station_count];
        for e in &edges {
            adjacency[e.a].push((e.b, e.length));
            adjacency[e.b].push((e.a, e.length));
        }
        Ok(LineNetwork {
            station_count,
            lines: lines.to_vec(),
            edges,
            adjacency,
        })
    }

    pub fn station_count(&self) -> usize {
        self.station_count
    }

    pub fn lines(&self) -> &[Vec<usize>] {
        &self.lines
    }

    /// Sorted by `(a, b)`.
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Component label per station; labels are the smallest station index in
    /// each component.
    pub fn component_labels(&self) -> Vec<usize> {
        let mut label = vec![usize::MAX; self.station_count];
        let mut stack = Vec::new();
        for root in 0..self.station_count {
            if label[root] != usize::MAX {
                continue;
            }
            label[root] = root;
            stack.push(root);
            while let Some(u) = stack.pop() {
                for &(v, _) in &self.adjacency[u] {
                    if label[v] == usize::MAX {
                        label[v] = root;
                        stack.push(v);
                    }
                }
            }
        }
        label
    }

    pub fn component_count(&self) -> usize {
        self.component_labels()
            .iter()
            .enumerate()
            .filter(|(i, l)| i == *l)
            .count()
    }

    /// A station served by no line counts as its own component.
    pub fn is_connected(&self) -> bool {
        self.component_count() <= 1
    }
}

/// Symmetric station-to-station network distances; unreachable pairs hold
/// `f64::INFINITY`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<f64>,
    reachable: bool,
}

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    /// True iff every pair is connected.
    pub fn reachable(&self) -> bool {
        self.reachable
    }

    /// Mirrors the upper triangle so the result is exactly symmetric.
    fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let n = rows.len();
        let mut d: Vec<f64> = rows.into_iter().flatten().collect();
        for i in 0..n {
            for j in (i + 1)..n {
                d[j * n + i] = d[i * n + j];
            }
        }
        let reachable = d.iter().all(|x| x.is_finite());
        DistanceMatrix { n, d, reachable }
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Queued {
    dist: f64,
    node: usize,
}

impl Eq for Queued {}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn dijkstra(adjacency: &[Vec<(usize, f64)>], source: usize) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; adjacency.len()];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(Queued {
        dist: 0.0,
        node: source,
    });
    while let Some(Queued { dist: d, node: u }) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(v, w) in &adjacency[u] {
            let nd = d + w;
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(Queued { dist: nd, node: v });
            }
        }
    }
    dist
}

/// Shortest-path distances over the network, one Dijkstra run per source.
pub fn all_pairs_distances(net: &LineNetwork) -> DistanceMatrix {
    let rows: Vec<Vec<f64>> = (0..net.station_count)
        .into_par_iter()
        .map(|s| dijkstra(&net.adjacency, s))
        .collect();
    DistanceMatrix::from_rows(rows)
}

/// Distances in which every boarding after the first costs `penalty_m`
/// meters of equivalent length.
///
/// Each line gets its own copy of its stations. Boarding a line from a
/// station hub costs `penalty_m`, alighting is free, so a trip with `t`
/// transfers pays `(t + 1) · penalty_m`; one boarding is then subtracted.
/// With `penalty_m = 0` this reproduces [`all_pairs_distances`].
pub fn all_pairs_distances_with_transfers(
    net: &LineNetwork,
    stations: &[PlanarPoint],
    penalty_m: f64,
) -> DistanceMatrix {
    let k = net.station_count;
    let ride_nodes: usize = net.lines.iter().map(Vec::len).sum();
    let mut adjacency: Vec<Vec<(usize, f64)>> = vec![Vec::new(); k + ride_nodes];
    let mut next = k;
    for line in &net.lines {
        for (pos, &s) in line.iter().enumerate() {
            let node = next + pos;
            adjacency[s].push((node, penalty_m));
            adjacency[node].push((s, 0.0));
            if pos > 0 {
                let len = stations[line[pos - 1]].distance(stations[s]);
                adjacency[node - 1].push((node, len));
                adjacency[node].push((node - 1, len));
            }
        }
        next += line.len();
    }
    let rows: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|src| {
            let mut row = dijkstra(&adjacency, src);
            row.truncate(k);
            for (j, d) in row.iter_mut().enumerate() {
                if j != src {
                    *d -= penalty_m;
                }
            }
            row
        })
        .collect();
    DistanceMatrix::from_rows(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pts(coords: &[(f64, f64)]) -> Vec<PlanarPoint> {
        coords.iter().map(|&(x, y)| PlanarPoint::new(x, y)).collect()
    }

    fn floyd_warshall(n: usize, edges: &[(usize, usize, f64)]) -> Vec<Vec<f64>> {
        let mut d = vec![vec![f64::INFINITY; n]; n];
        for (i, row) in d.iter_mut().enumerate() {
            row[i] = 0.0;
        }
        for &(a, b, w) in edges {
            d[a][b] = d[a][b].min(w);
            d[b][a] = d[b][a].min(w);
        }
        for m in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if d[i][m] + d[m][j] < d[i][j] {
                        d[i][j] = d[i][m] + d[m][j];
                    }
                }
            }
        }
        d
    }

    #[test]
    fn path_edges() {
        let s = pts(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
        let net = LineNetwork::build(&[vec![0, 1, 2]], &s).unwrap();
        let e: Vec<_> = net.edges().iter().map(|e| (e.a, e.b)).collect();
        assert_eq!(e, vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn loop_rejected() {
        let s = pts(&[(0.0, 0.0), (1.0, 0.0)]);
        assert_eq!(
            LineNetwork::build(&[vec![0, 1, 0]], &s).unwrap_err(),
            NetworkError::LoopInLine { line: 0, station: 0 }
        );
        assert_eq!(
            LineNetwork::build(&[vec![0]], &s).unwrap_err(),
            NetworkError::LineTooShort { line: 0, len: 1 }
        );
        assert!(matches!(
            LineNetwork::build(&[vec![0, 5]], &s),
            Err(NetworkError::StationOutOfRange { .. })
        ));
    }

    #[test]
    fn shared_edge_stored_once() {
        let s = pts(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (1.0, 1.0)]);
        let net = LineNetwork::build(&[vec![0, 1, 2], vec![2, 1, 3]], &s).unwrap();
        let e: Vec<_> = net.edges().iter().map(|e| (e.a, e.b)).collect();
        assert_eq!(e, vec![(0, 1), (1, 2), (1, 3)]);
    }

    #[test]
    fn connectivity_cases() {
        let s3 = pts(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
        assert!(LineNetwork::build(&[vec![0, 1], vec![1, 2]], &s3)
            .unwrap()
            .is_connected());
        let s4 = pts(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (3.0, 0.0)]);
        let two = LineNetwork::build(&[vec![0, 1], vec![2, 3]], &s4).unwrap();
        assert!(!two.is_connected());
        assert_eq!(two.component_count(), 2);
        let isolated = LineNetwork::build(&[vec![0, 1, 2]], &s4).unwrap();
        assert!(!isolated.is_connected());
        assert!(!all_pairs_distances(&isolated).reachable());
        assert!(all_pairs_distances(&isolated).get(0, 3).is_infinite());
    }

    #[test]
    fn path_sum() {
        let s = pts(&[(0.0, 0.0), (1000.0, 0.0), (3000.0, 0.0)]);
        let net = LineNetwork::build(&[vec![0, 1, 2]], &s).unwrap();
        let d = all_pairs_distances(&net);
        assert!(d.reachable());
        assert_eq!(d.get(0, 2), 3000.0);
        assert_eq!(d.get(2, 0), 3000.0);
        assert_eq!(d.get(1, 1), 0.0);
    }

    #[test]
    fn triangle_prefers_direct_side() {
        // Vertices chosen so the sides are exactly 3, 4 and 6 km.
        let c = 6000.0;
        let x = (3000.0f64.powi(2) - 4000.0f64.powi(2) + c * c) / (2.0 * c);
        let y = (3000.0f64.powi(2) - x * x).sqrt();
        let s = pts(&[(0.0, 0.0), (c, 0.0), (x, y)]);
        let net = LineNetwork::build(&[vec![0, 2, 1], vec![0, 1]], &s).unwrap();
        let d = all_pairs_distances(&net);
        assert!((d.get(0, 1) - 6000.0).abs() < 1e-9);
        assert!((d.get(0, 2) - 3000.0).abs() < 1e-9);
        assert!((d.get(2, 1) - 4000.0).abs() < 1e-9);
    }

    #[test]
    fn zero_transfer_penalty_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s: Vec<_> = (0..8)
            .map(|_| PlanarPoint::new(rng.random_range(0.0..1e4), rng.random_range(0.0..1e4)))
            .collect();
        let lines = vec![vec![0, 1, 2, 3], vec![3, 4, 5], vec![1, 6, 7, 5]];
        let net = LineNetwork::build(&lines, &s).unwrap();
        assert_eq!(
            all_pairs_distances(&net),
            all_pairs_distances_with_transfers(&net, &s, 0.0)
        );
    }

    #[test]
    fn transfer_penalty_charged_per_change() {
        let s = pts(&[(0.0, 0.0), (1000.0, 0.0), (1000.0, 1000.0), (3000.0, 0.0)]);
        let net = LineNetwork::build(&[vec![0, 1, 2], vec![1, 3]], &s).unwrap();
        let d = all_pairs_distances_with_transfers(&net, &s, 500.0);
        assert_eq!(d.get(0, 2), 2000.0);
        assert_eq!(d.get(0, 3), 3000.0 + 500.0);
        assert_eq!(d.get(2, 3), 3000.0 + 500.0);
        assert_eq!(d.get(3, 2), d.get(2, 3));
    }

    fn random_network(seed: u64, n: usize) -> (Vec<PlanarPoint>, Vec<Vec<usize>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s: Vec<_> = (0..n)
            .map(|_| PlanarPoint::new(rng.random_range(0.0..2e4), rng.random_range(0.0..2e4)))
            .collect();
        let mut lines = Vec::new();
        // A random spanning path guarantees connectivity; extra short lines add cycles.
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        lines.push(order);
        for _ in 0..rng.random_range(0..4) {
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n);
            while b == a {
                b = rng.random_range(0..n);
            }
            lines.push(vec![a, b]);
        }
        (s, lines)
    }

    #[test]
    fn dijkstra_matches_floyd_warshall() {
        for seed in 0..50 {
            let (s, lines) = random_network(seed, 8);
            let net = LineNetwork::build(&lines, &s).unwrap();
            let edges: Vec<_> = net.edges().iter().map(|e| (e.a, e.b, e.length)).collect();
            let fw = floyd_warshall(8, &edges);
            let d = all_pairs_distances(&net);
            for i in 0..8 {
                for j in 0..8 {
                    assert!((d.get(i, j) - fw[i][j]).abs() <= 1e-9);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn network_distance_dominates_euclidean(seed in any::<u64>()) {
            let (s, lines) = random_network(seed, 8);
            let net = LineNetwork::build(&lines, &s).unwrap();
            let d = all_pairs_distances(&net);
            prop_assert!(d.reachable());
            for i in 0..8 {
                prop_assert_eq!(d.get(i, i), 0.0);
                for j in 0..8 {
                    prop_assert_eq!(d.get(i, j), d.get(j, i));
                    prop_assert!(d.get(i, j) >= s[i].distance(s[j]) - 1e-6);
                    for m in 0..8 {
                        prop_assert!(d.get(i, j) <= d.get(i, m) + d.get(m, j) + 1e-6);
                    }
                }
            }
        }

        #[test]
        fn extra_edge_never_lengthens(seed in any::<u64>(), a in 0usize..8, b in 0usize..8) {
            prop_assume!(a != b);
            let (s, mut lines) = random_network(seed, 8);
            let before = all_pairs_distances(&LineNetwork::build(&lines, &s).unwrap());
            lines.push(vec![a, b]);
            let after = all_pairs_distances(&LineNetwork::build(&lines, &s).unwrap());
            for i in 0..8 {
                for j in 0..8 {
                    prop_assert!(after.get(i, j) <= before.get(i, j));
                }
            }
        }

        #[test]
        fn tree_distance_is_unique_path_sum(seed in any::<u64>()) {
            // A single spanning line is a tree; its distances are prefix-sum differences.
            let (s, lines) = random_network(seed, 8);
            let path = &lines[0];
            let net = LineNetwork::build(&lines[..1], &s).unwrap();
            let d = all_pairs_distances(&net);
            for p in 0..8 {
                for q in p..8 {
                    // The stored value comes from the run sourced at the lower index.
                    let hops: Vec<f64> = path[p..=q].windows(2).map(|w| s[w[0]].distance(s[w[1]])).collect();
                    let expected: f64 = if path[p] < path[q] {
                        hops.iter().sum()
                    } else {
                        hops.iter().rev().sum()
                    };
                    prop_assert_eq!(d.get(path[p], path[q]), expected);
                }
            }
        }
    }
}
