//! Random undirected graph generators returning sorted edge lists `(j, l)`,
//! `j < l`.

use rand::seq::IndexedRandom;
use rand::Rng;
use std::collections::BTreeSet;

pub type EdgeSet = BTreeSet<(usize, usize)>;

fn ordered(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Erdős–Rényi: every pair independently with probability `p`.
pub fn erdos_renyi<R: Rng>(v: usize, p: f64, rng: &mut R) -> EdgeSet {
    let mut out = EdgeSet::new();
    for j in 0..v {
        for l in (j + 1)..v {
            if rng.random::<f64>() < p {
                out.insert((j, l));
            }
        }
    }
    out
}

/// Watts–Strogatz: ring lattice with `k` nearest neighbours (`k/2` per side),
/// each lattice edge rewired to a uniformly chosen new endpoint with
/// probability `rewire`.
pub fn watts_strogatz<R: Rng>(v: usize, k: usize, rewire: f64, rng: &mut R) -> EdgeSet {
    let mut out = EdgeSet::new();
    if v < 2 {
        return out;
    }
    let half = (k / 2).max(1).min((v - 1) / 2).max(1);
    for j in 0..v {
        for d in 1..=half {
            let l = (j + d) % v;
            if l != j {
                out.insert(ordered(j, l));
            }
        }
    }
    let lattice: Vec<(usize, usize)> = out.iter().copied().collect();
    for (a, b) in lattice {
        if rng.random::<f64>() >= rewire {
            continue;
        }
        // keep endpoint `a`, move `b`
        let candidates: Vec<usize> = (0..v)
            .filter(|&c| c != a && !out.contains(&ordered(a, c)))
            .collect();
        if let Some(&c) = candidates.choose(rng) {
            out.remove(&(a, b));
            out.insert(ordered(a, c));
        }
    }
    out
}

/// Barabási–Albert preferential attachment: starts from a complete graph on
/// `m + 1` nodes; each further node links to `m` distinct existing nodes
/// chosen with probability proportional to degree.
pub fn barabasi_albert<R: Rng>(v: usize, m: usize, rng: &mut R) -> EdgeSet {
    let m = m.max(1);
    let mut out = EdgeSet::new();
    let seed_nodes = (m + 1).min(v);
    // each endpoint occurrence appears once in `stubs`, so uniform sampling
    // from it is degree-proportional
    let mut stubs: Vec<usize> = Vec::new();
    for j in 0..seed_nodes {
        for l in (j + 1)..seed_nodes {
            out.insert((j, l));
            stubs.push(j);
            stubs.push(l);
        }
    }
    for new in seed_nodes..v {
        let mut targets = BTreeSet::new();
        while targets.len() < m.min(new) {
            let t = if stubs.is_empty() {
                rng.random_range(0..new)
            } else {
                stubs[rng.random_range(0..stubs.len())]
            };
            targets.insert(t);
        }
        for t in targets {
            out.insert(ordered(t, new));
            stubs.push(t);
            stubs.push(new);
        }
    }
    out
}

pub fn degrees(v: usize, edges: &EdgeSet) -> Vec<usize> {
    let mut d = vec![0; v];
    for &(a, b) in edges {
        d[a] += 1;
        d[b] += 1;
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn small_world_keeps_edge_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = watts_strogatz(20, 4, 0.1, &mut rng);
        assert_eq!(g.len(), 40);
        assert!(g.iter().all(|&(a, b)| a < b && b < 20));
    }

    #[test]
    fn scale_free_is_a_tree_for_m1() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = barabasi_albert(30, 1, &mut rng);
        assert_eq!(g.len(), 29);
        assert!(degrees(30, &g).iter().all(|&d| d >= 1));
    }
}
