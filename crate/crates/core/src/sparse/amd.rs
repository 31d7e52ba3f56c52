//! Approximate minimum degree ordering on a quotient graph.
//!
//! Variables are eliminated greedily by smallest approximate external degree.
//! Eliminated pivots become elements; the degree of every variable touching the
//! new element is re-estimated with the usual `|A_i| + |L_p \ i| + sum |L_e \ L_p|`
//! upper bound, and elements that fall entirely inside the new element are
//! absorbed.

use std::collections::BTreeSet;

/// Computes a fill-reducing elimination order for the symmetric pattern given
/// as per-vertex adjacency lists (self loops and duplicates are ignored).
///
/// Returns `perm` with `perm[k]` the original index eliminated at step `k`.
pub fn approximate_minimum_degree(adjacency: &[Vec<usize>]) -> Vec<usize> {
    let n = adjacency.len();
    if n == 0 {
        return Vec::new();
    }

    let mut adj_var: Vec<Vec<usize>> = adjacency
        .iter()
        .enumerate()
        .map(|(i, nbrs)| {
            let mut v: Vec<usize> = nbrs.iter().copied().filter(|&j| j != i && j < n).collect();
            v.sort_unstable();
            v.dedup();
            v
        })
        .collect();
    // Symmetrize in case the caller passed a one-sided pattern.
    let mut extra: Vec<(usize, usize)> = Vec::new();
    for (i, nbrs) in adj_var.iter().enumerate() {
        for &j in nbrs {
            if adj_var[j].binary_search(&i).is_err() {
                extra.push((j, i));
            }
        }
    }
    for (j, i) in extra {
        adj_var[j].push(i);
    }
    for v in adj_var.iter_mut() {
        v.sort_unstable();
        v.dedup();
    }

    let mut adj_elem: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut elem_vars: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut eliminated = vec![false; n];
    let mut elem_alive = vec![false; n];

    let mut degree: Vec<usize> = adj_var.iter().map(Vec::len).collect();
    let mut queue: BTreeSet<(usize, usize)> = (0..n).map(|i| (degree[i], i)).collect();

    let mut mark = vec![0usize; n];
    let mut stamp = 0usize;
    let mut w = vec![0usize; n];
    let mut w_stamp = vec![0usize; n];

    let mut perm = Vec::with_capacity(n);
    let mut alive_count = n;

    while let Some((_, pivot)) = queue.pop_first() {
        perm.push(pivot);
        eliminated[pivot] = true;
        alive_count -= 1;

        // New element pattern L_p.
        stamp += 1;
        mark[pivot] = stamp;
        let mut lp: Vec<usize> = Vec::new();
        for &e in &adj_elem[pivot] {
            if !elem_alive[e] {
                continue;
            }
            for &v in &elem_vars[e] {
                if !eliminated[v] && mark[v] != stamp {
                    mark[v] = stamp;
                    lp.push(v);
                }
            }
        }
        for &v in &adj_var[pivot] {
            if !eliminated[v] && mark[v] != stamp {
                mark[v] = stamp;
                lp.push(v);
            }
        }
        for &e in &adj_elem[pivot] {
            elem_alive[e] = false;
            elem_vars[e] = Vec::new();
        }
        adj_elem[pivot] = Vec::new();
        adj_var[pivot] = Vec::new();
        lp.sort_unstable();
        elem_alive[pivot] = true;

        // Prune the lists of every variable in L_p. Members of L_p carry the
        // current stamp, so covered variable edges are dropped here.
        for &i in &lp {
            adj_elem[i].retain(|&e| elem_alive[e]);
            adj_elem[i].push(pivot);
            adj_var[i].retain(|&j| !eliminated[j] && mark[j] != stamp);
        }

        // w(e) = |L_e \ L_p| for elements adjacent to L_p.
        let w_tag = stamp;
        for &i in &lp {
            for &e in &adj_elem[i] {
                if e == pivot {
                    continue;
                }
                if w_stamp[e] != w_tag {
                    w_stamp[e] = w_tag;
                    w[e] = elem_vars[e].len();
                }
                w[e] -= 1;
            }
        }

        // Aggressive absorption of elements contained in L_p.
        for &i in &lp {
            for &e in &adj_elem[i] {
                if e != pivot && w_stamp[e] == w_tag && w[e] == 0 && elem_alive[e] {
                    elem_alive[e] = false;
                    elem_vars[e] = Vec::new();
                }
            }
        }

        let lp_len = lp.len();
        for &i in &lp {
            adj_elem[i].retain(|&e| elem_alive[e]);
            let mut d = adj_var[i].len() + lp_len - 1;
            for &e in &adj_elem[i] {
                if e != pivot {
                    d += w[e];
                }
            }
            let d = d.min(alive_count.saturating_sub(1));
            queue.remove(&(degree[i], i));
            degree[i] = d;
            queue.insert((d, i));
        }
        elem_vars[pivot] = lp;
    }
    perm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn is_permutation(p: &[usize]) -> bool {
        let mut seen = vec![false; p.len()];
        p.iter().all(|&i| i < p.len() && !std::mem::replace(&mut seen[i], true))
    }

    #[test]
    fn empty_and_single() {
        assert!(approximate_minimum_degree(&[]).is_empty());
        assert_eq!(approximate_minimum_degree(&[vec![]]), vec![0]);
    }

    #[test]
    fn arrow_matrix_eliminates_hub_last() {
        // Vertex 0 couples to every other vertex; eliminating it first fills
        // the whole matrix, so a minimum degree order defers it.
        let n = 12;
        let mut adj = vec![Vec::new(); n];
        for i in 1..n {
            adj[0].push(i);
            adj[i].push(0);
        }
        let p = approximate_minimum_degree(&adj);
        assert!(is_permutation(&p));
        assert!(p[..n - 2].iter().all(|&v| v != 0));
    }

    #[test]
    fn one_sided_input_is_symmetrized() {
        let adj = vec![vec![1, 2], vec![], vec![]];
        let p = approximate_minimum_degree(&adj);
        assert!(is_permutation(&p));
        assert_eq!(p.len(), 3);
    }
}
