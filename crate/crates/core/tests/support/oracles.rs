//! Brute-force reference implementations shared by integration tests.

use toponav::world::WorldGraph;

/// Single-source shortest distances by Bellman-Ford relaxation over the edge list.
pub fn bellman_ford(world: &WorldGraph, src: usize) -> Vec<f64> {
    let n = world.node_count();
    let mut d = vec![f64::INFINITY; n];
    d[src] = 0.0;
    for _ in 0..n {
        let mut changed = false;
        for e in world.edges() {
            for (a, b) in [(e.a, e.b), (e.b, e.a)] {
                if d[a] + e.length < d[b] {
                    d[b] = d[a] + e.length;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    d
}

/// Minimum total cost over every monotone warping path, by exhaustive recursion.
pub fn dtw_brute_force(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], i: usize, j: usize) -> f64 {
        let here = cost[i][j];
        let (n, m) = (cost.len(), cost[0].len());
        if i == n - 1 && j == m - 1 {
            return here;
        }
        let mut best = f64::INFINITY;
        if i + 1 < n {
            best = best.min(go(cost, i + 1, j));
        }
        if j + 1 < m {
            best = best.min(go(cost, i, j + 1));
        }
        if i + 1 < n && j + 1 < m {
            best = best.min(go(cost, i + 1, j + 1));
        }
        here + best
    }
    if cost.is_empty() || cost[0].is_empty() {
        return if cost.is_empty() { 0.0 } else { f64::INFINITY };
    }
    go(cost, 0, 0)
}
