//! Pseudo-labeling: KNN similarity graph, threshold pruning, and a greedy
//! two-level map-equation (InfoMap-style) partitioner.

use crate::error::{Error, Result};
use crate::math::{dot, normalize, plogp};
use crate::rngstream::{stream, Purpose};
use rand::seq::SliceRandom;
use std::io::Write;

/// Undirected weighted similarity graph. Edges are stored once with i < j.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    pub n_nodes: usize,
    pub edges: Vec<(u32, u32, f64)>,
}

impl KnnGraph {
    /// Adjacency lists (neighbor, weight), sorted by neighbor index.
    pub fn adjacency(&self) -> Vec<Vec<(u32, f64)>> {
        let mut adj = vec![Vec::new(); self.n_nodes];
        for &(i, j, w) in &self.edges {
            adj[i as usize].push((j, w));
            adj[j as usize].push((i, w));
        }
        for list in &mut adj {
            list.sort_unstable_by_key(|&(n, _)| n);
        }
        adj
    }

    pub fn total_weight(&self) -> f64 {
        self.edges.iter().map(|e| e.2).sum()
    }

    /// Debug dump: one `i j w` line per edge.
    pub fn write_edge_list<W: Write>(&self, mut out: W) -> Result<()> {
        for &(i, j, w) in &self.edges {
            writeln!(out, "{i} {j} {w:.6}")?;
        }
        Ok(())
    }
}

/// Build the union-symmetrized KNN graph over unit-norm embeddings with
/// cosine similarity (= dot product). Top-n ties break toward the lower index.
pub fn knn_graph(embeddings: &[Vec<f64>], n: usize) -> Result<KnnGraph> {
    let num = embeddings.len();
    if num < 2 {
        return Err(Error::invalid("embeddings", "need at least 2"));
    }
    if n < 1 {
        return Err(Error::invalid("n", "must be >= 1"));
    }
    let mut edge_set = std::collections::BTreeMap::<(u32, u32), f64>::new();
    for i in 0..num {
        let mut sims: Vec<(usize, f64)> = (0..num)
            .filter(|&j| j != i)
            .map(|j| (j, dot(&embeddings[i], &embeddings[j])))
            .collect();
        // descending similarity, ties by lower index
        sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for &(j, w) in sims.iter().take(n) {
            let key = (i.min(j) as u32, i.max(j) as u32);
            edge_set.insert(key, w);
        }
    }
    let edges = edge_set.into_iter().map(|((i, j), w)| (i, j, w)).collect();
    Ok(KnnGraph { n_nodes: num, edges })
}

/// Keep edges with weight >= s_up.
pub fn prune(graph: &KnnGraph, s_up: f64) -> KnnGraph {
    KnnGraph {
        n_nodes: graph.n_nodes,
        edges: graph.edges.iter().cloned().filter(|e| e.2 >= s_up).collect(),
    }
}

/// Per-sequence cluster assignment; `None` marks an outlier. Cluster ids are
/// dense and ordered by smallest member index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabels {
    pub assignment: Vec<Option<usize>>,
    pub n_clusters: usize,
}

impl PseudoLabels {
    /// Re-number cluster ids densely, ordered by smallest member index.
    pub fn densify(raw: &[Option<usize>]) -> PseudoLabels {
        let mut first_seen: Vec<usize> = Vec::new();
        let mut map = std::collections::BTreeMap::<usize, usize>::new();
        for a in raw.iter().flatten() {
            if !map.contains_key(a) {
                map.insert(*a, first_seen.len());
                first_seen.push(*a);
            }
        }
        PseudoLabels {
            assignment: raw.iter().map(|a| a.map(|x| map[&x])).collect(),
            n_clusters: first_seen.len(),
        }
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.n_clusters];
        for (i, a) in self.assignment.iter().enumerate() {
            if let Some(c) = a {
                m[*c].push(i);
            }
        }
        m
    }

    pub fn n_outliers(&self) -> usize {
        self.assignment.iter().filter(|a| a.is_none()).count()
    }
}

/// Two-level map equation of a partition over an undirected graph, in bits.
///
/// Visit rates are the stationary rates of an undirected walk,
/// p(node) = strength/2W; module exit rates are cut/2W. Expressed in the
/// plogp form: L = plogp(q) − 2·Σ plogp(q_i) + Σ plogp(q_i + p_i) − Σ plogp(p_α).
pub fn map_equation(graph: &KnnGraph, modules: &[usize]) -> Result<f64> {
    if graph.n_nodes == 0 {
        return Err(Error::invalid("graph", "empty graph"));
    }
    if modules.len() != graph.n_nodes {
        return Err(Error::invalid("partition", "must cover all nodes"));
    }
    let two_w: f64 = 2.0 * graph.total_weight();
    if two_w <= 0.0 {
        return Ok(0.0); // edgeless: all visit rates zero
    }
    let n_mod = modules.iter().max().unwrap() + 1;
    let mut strength = vec![0.0f64; graph.n_nodes];
    let mut cut = vec![0.0f64; n_mod];
    let mut mod_strength = vec![0.0f64; n_mod];
    for &(i, j, w) in &graph.edges {
        strength[i as usize] += w;
        strength[j as usize] += w;
        if modules[i as usize] != modules[j as usize] {
            cut[modules[i as usize]] += w;
            cut[modules[j as usize]] += w;
        }
    }
    for (i, &m) in modules.iter().enumerate() {
        mod_strength[m] += strength[i];
    }
    let q: f64 = cut.iter().sum::<f64>() / two_w;
    let mut codelength = plogp(q);
    for m in 0..n_mod {
        let qi = cut[m] / two_w;
        let pi = mod_strength[m] / two_w;
        codelength += -2.0 * plogp(qi) + plogp(qi + pi);
    }
    for &s in &strength {
        codelength -= plogp(s / two_w);
    }
    Ok(codelength)
}

/// Greedy state for one partition search trial.
struct Search<'a> {
    adj: &'a [Vec<(u32, f64)>],
    strength: Vec<f64>,
    two_w: f64,
    modules: Vec<usize>,
    cut: Vec<f64>,
    mod_strength: Vec<f64>,
}

impl<'a> Search<'a> {
    fn new(graph: &KnnGraph, adj: &'a [Vec<(u32, f64)>]) -> Self {
        let n = graph.n_nodes;
        let mut strength = vec![0.0f64; n];
        for &(i, j, w) in &graph.edges {
            strength[i as usize] += w;
            strength[j as usize] += w;
        }
        Search {
            adj,
            two_w: 2.0 * graph.total_weight(),
            modules: (0..n).collect(),
            cut: strength.clone(),
            mod_strength: strength.clone(),
            strength,
        }
    }

    /// Module-level contribution to the codelength.
    fn term(&self, qi: f64, pi: f64) -> f64 {
        -2.0 * plogp(qi / self.two_w) + plogp((qi + pi) / self.two_w)
    }

    /// Codelength delta if `node` moved from its module to `target`.
    /// `k_own`/`k_target` are the edge weights from `node` into each.
    fn move_delta(&self, node: usize, target: usize, k_own: f64, k_target: f64) -> f64 {
        let own = self.modules[node];
        let s = self.strength[node];
        let (c_own, p_own) = (self.cut[own], self.mod_strength[own]);
        let (c_t, p_t) = (self.cut[target], self.mod_strength[target]);
        let c_own2 = c_own - s + 2.0 * k_own;
        let c_t2 = c_t + s - 2.0 * k_target;
        let q = self.cut.iter().sum::<f64>();
        let q2 = q - c_own - c_t + c_own2 + c_t2;
        plogp(q2 / self.two_w) - plogp(q / self.two_w)
            + self.term(c_own2, p_own - s) - self.term(c_own, p_own)
            + self.term(c_t2, p_t + s) - self.term(c_t, p_t)
    }

    fn apply_move(&mut self, node: usize, target: usize, k_own: f64, k_target: f64) {
        let own = self.modules[node];
        let s = self.strength[node];
        self.cut[own] += -s + 2.0 * k_own;
        self.cut[target] += s - 2.0 * k_target;
        self.mod_strength[own] -= s;
        self.mod_strength[target] += s;
        self.modules[node] = target;
    }

    /// Edge weight from `node` into each distinct neighboring module plus its own.
    fn module_links(&self, node: usize) -> Vec<(usize, f64)> {
        let mut links: Vec<(usize, f64)> = Vec::new();
        for &(nb, w) in &self.adj[node] {
            let m = self.modules[nb as usize];
            match links.iter_mut().find(|(lm, _)| *lm == m) {
                Some((_, lw)) => *lw += w,
                None => links.push((m, w)),
            }
        }
        links
    }

    /// One sweep of single-node moves in the given order. Returns whether any
    /// move was applied. Moves require a strict codelength decrease; target
    /// ties break toward the lower module id.
    fn node_sweep(&mut self, order: &[usize]) -> bool {
        const EPS: f64 = 1e-12;
        let mut moved = false;
        for &node in order {
            let own = self.modules[node];
            let links = self.module_links(node);
            let k_own = links.iter().find(|(m, _)| *m == own).map_or(0.0, |&(_, w)| w);
            let mut best: Option<(usize, f64, f64)> = None; // (target, delta, k_target)
            let mut candidates: Vec<(usize, f64)> =
                links.iter().filter(|(m, _)| *m != own).cloned().collect();
            candidates.sort_unstable_by_key(|&(m, _)| m);
            for (target, k_target) in candidates {
                let delta = self.move_delta(node, target, k_own, k_target);
                if delta < -EPS && best.map_or(true, |(_, bd, _)| delta < bd - EPS) {
                    best = Some((target, delta, k_target));
                }
            }
            if let Some((target, _, k_target)) = best {
                self.apply_move(node, target, k_own, k_target);
                moved = true;
            }
        }
        moved
    }

    /// Try merging whole modules (the aggregation level of the two-level
    /// search). Greedy: repeatedly apply the best strictly-improving merge.
    fn merge_sweep(&mut self) -> bool {
        const EPS: f64 = 1e-12;
        let mut moved = false;
        loop {
            // inter-module link weights
            let mut between = std::collections::BTreeMap::<(usize, usize), f64>::new();
            for (node, nbrs) in self.adj.iter().enumerate() {
                let a = self.modules[node];
                for &(nb, w) in nbrs {
                    let b = self.modules[nb as usize];
                    if a < b {
                        *between.entry((a, b)).or_insert(0.0) += w;
                    }
                }
            }
            let q: f64 = self.cut.iter().sum();
            let mut best: Option<((usize, usize), f64, f64)> = None;
            for (&(a, b), &w_ab) in &between {
                let merged_cut = self.cut[a] + self.cut[b] - 2.0 * w_ab;
                let merged_p = self.mod_strength[a] + self.mod_strength[b];
                let q2 = q - self.cut[a] - self.cut[b] + merged_cut;
                let delta = plogp(q2 / self.two_w) - plogp(q / self.two_w)
                    + self.term(merged_cut, merged_p)
                    - self.term(self.cut[a], self.mod_strength[a])
                    - self.term(self.cut[b], self.mod_strength[b]);
                if delta < -EPS && best.map_or(true, |(_, bd, _)| delta < bd - EPS) {
                    best = Some(((a, b), delta, w_ab));
                }
            }
            match best {
                Some(((a, b), _, w_ab)) => {
                    // fold b into a
                    self.cut[a] = self.cut[a] + self.cut[b] - 2.0 * w_ab;
                    self.mod_strength[a] += self.mod_strength[b];
                    self.cut[b] = 0.0;
                    self.mod_strength[b] = 0.0;
                    for m in &mut self.modules {
                        if *m == b {
                            *m = a;
                        }
                    }
                    moved = true;
                }
                None => return moved,
            }
        }
    }

    fn run(&mut self, order: &[usize]) {
        loop {
            let mut any = false;
            while self.node_sweep(order) {
                any = true;
            }
            if self.merge_sweep() {
                any = true;
            }
            if !any {
                break;
            }
        }
    }
}

const SHUFFLED_TRIALS: usize = 4;

/// Greedy two-level map-equation partition. One canonical index-order trial
/// plus a few seed-shuffled trials; the lowest codelength wins, ties keeping
/// the earlier trial. Nodes in edgeless components stay singleton clusters.
pub fn infomap_partition(graph: &KnnGraph, seed: u64) -> Result<PseudoLabels> {
    if graph.n_nodes == 0 {
        return Err(Error::invalid("graph", "empty graph"));
    }
    let adj = graph.adjacency();
    let canonical: Vec<usize> = (0..graph.n_nodes).collect();
    let mut best_modules: Option<(f64, Vec<usize>)> = None;
    for trial in 0..=SHUFFLED_TRIALS {
        let order = if trial == 0 {
            canonical.clone()
        } else {
            let mut o = canonical.clone();
            o.shuffle(&mut stream(seed, Purpose::Infomap, trial as u64));
            o
        };
        let mut search = Search::new(graph, &adj);
        search.run(&order);
        let codelength = map_equation(graph, &search.modules)?;
        if best_modules.as_ref().map_or(true, |(bc, _)| codelength < bc - 1e-12) {
            best_modules = Some((codelength, search.modules));
        }
    }
    let (_, modules) = best_modules.expect("at least one trial ran");
    let raw: Vec<Option<usize>> = modules.into_iter().map(Some).collect();
    Ok(PseudoLabels::densify(&raw))
}

/// Unit-norm centroid per cluster (outliers excluded).
pub fn compute_centroids(embeddings: &[Vec<f64>], labels: &PseudoLabels) -> Result<Vec<Vec<f64>>> {
    if embeddings.len() != labels.assignment.len() {
        return Err(Error::Geometry("labels and embeddings length mismatch".into()));
    }
    let members = labels.members();
    let mut centroids = Vec::with_capacity(labels.n_clusters);
    for (cluster, m) in members.iter().enumerate() {
        if m.is_empty() {
            return Err(Error::invalid("labels", format!("cluster {cluster} is empty")));
        }
        let dim = embeddings[m[0]].len();
        let mut c = vec![0.0f64; dim];
        for &i in m {
            for (a, b) in c.iter_mut().zip(&embeddings[i]) {
                *a += b;
            }
        }
        for a in c.iter_mut() {
            *a /= m.len() as f64;
        }
        let n = normalize(&mut c);
        if n < 1e-8 {
            return Err(Error::DegenerateCentroid { cluster, norm: n });
        }
        centroids.push(c);
    }
    Ok(centroids)
}

/// Reference oracles for the test suites; not part of the training pipeline.
pub mod testutil {
    use super::*;

    /// Exhaustive minimum-codelength partition for small graphs.
    pub fn brute_force_min_codelength(graph: &KnnGraph) -> f64 {
        assert!(graph.n_nodes <= 10, "brute force only for small graphs");
        let mut best = f64::INFINITY;
        let mut modules = vec![0usize; graph.n_nodes];
        enumerate(graph, &mut modules, 1, 1, &mut best);
        best
    }

    // enumerate set partitions in restricted-growth form
    fn enumerate(graph: &KnnGraph, modules: &mut Vec<usize>, pos: usize, max: usize, best: &mut f64) {
        if pos == graph.n_nodes {
            let c = map_equation(graph, modules).unwrap();
            if c < *best {
                *best = c;
            }
            return;
        }
        for m in 0..=max {
            modules[pos] = m;
            let next_max = if m == max { max + 1 } else { max };
            enumerate(graph, modules, pos + 1, next_max, best);
        }
        modules[pos] = 0;
    }

    pub fn unweighted(n_nodes: usize, edges: &[(u32, u32)]) -> KnnGraph {
        KnnGraph { n_nodes, edges: edges.iter().map(|&(i, j)| (i, j, 1.0)).collect() }
    }
}
