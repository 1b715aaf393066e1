//! Primal network simplex for the transportation problem.
//!
//! The spanning tree is kept strongly feasible so degenerate pivots cannot
//! cycle. Tree bookkeeping (children, depths, potentials) is rebuilt after
//! every pivot, which costs `O(nodes)` and keeps the code short.

use crate::error::{Error, Result};

const DIR_UP: i8 = 1;
const DIR_DOWN: i8 = -1;
const NONE: usize = usize::MAX;

/// Optimal flow on the complete bipartite graph plus node potentials.
#[derive(Debug, Clone)]
pub(crate) struct SimplexSolution {
    /// `(source, target, flow)` for every positive real arc flow, row-major.
    pub flows: Vec<(usize, usize, f64)>,
    pub source_potential: Vec<f64>,
    pub target_potential: Vec<f64>,
}

/// Solves `min Σ c_ij f_ij` over `f >= 0` with row sums `supply` and column
/// sums `demand`. `cost` is row-major `supply.len() x demand.len()`.
pub(crate) fn transportation_simplex(
    cost: &[f64],
    supply: &[f64],
    demand: &[f64],
    max_iterations: Option<usize>,
) -> Result<SimplexSolution> {
    let ns = supply.len();
    let nt = demand.len();
    debug_assert_eq!(cost.len(), ns * nt);
    let mut net = Network::new(cost, supply, demand);
    let limit = max_iterations.unwrap_or(50 * (net.real_arcs + net.node_num) + 1000);
    net.run(limit)?;

    let total: f64 = supply.iter().sum();
    let residual: f64 = (net.real_arcs..net.all_arcs).map(|e| net.flow[e].abs()).sum();
    if residual > 1e-12 * total.max(1.0) {
        return Err(Error::Infeasible(format!("flow {residual:e} left on artificial arcs")));
    }

    let mut flows = Vec::new();
    for e in 0..net.real_arcs {
        if net.flow[e] > 0.0 {
            flows.push((e / nt, e % nt, net.flow[e]));
        }
    }
    Ok(SimplexSolution {
        flows,
        source_potential: net.pi[..ns].to_vec(),
        target_potential: net.pi[ns..ns + nt].to_vec(),
    })
}

struct Network<'a> {
    cost: &'a [f64],
    ns: usize,
    nt: usize,
    node_num: usize,
    root: usize,
    real_arcs: usize,
    all_arcs: usize,
    art_cost: f64,
    flow: Vec<f64>,
    in_tree: Vec<bool>,
    parent: Vec<usize>,
    pred: Vec<usize>,
    pred_dir: Vec<i8>,
    depth: Vec<usize>,
    pi: Vec<f64>,
    child_start: Vec<usize>,
    child_list: Vec<usize>,
    block_size: usize,
    next_arc: usize,
    pricing_tol: f64,
}

impl<'a> Network<'a> {
    fn new(cost: &'a [f64], supply: &[f64], demand: &[f64]) -> Self {
        let ns = supply.len();
        let nt = demand.len();
        let node_num = ns + nt;
        let real_arcs = ns * nt;
        let all_arcs = real_arcs + node_num;
        let max_cost = cost.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        let art_cost = (max_cost + 1.0) * (node_num as f64 + 1.0);

        let mut net = Network {
            cost,
            ns,
            nt,
            node_num,
            root: node_num,
            real_arcs,
            all_arcs,
            art_cost,
            flow: vec![0.0; all_arcs],
            in_tree: vec![false; all_arcs],
            parent: vec![node_num; node_num + 1],
            pred: vec![NONE; node_num + 1],
            pred_dir: vec![0; node_num + 1],
            depth: vec![0; node_num + 1],
            pi: vec![0.0; node_num + 1],
            child_start: Vec::new(),
            child_list: Vec::new(),
            block_size: ((real_arcs as f64).sqrt().ceil() as usize).max(10),
            next_arc: 0,
            pricing_tol: 1e-12 * (max_cost + 1.0),
        };
        // Initial tree: every node hangs from the root through its artificial
        // arc; sources point up, sinks are fed from the root.
        for u in 0..node_num {
            let e = real_arcs + u;
            net.pred[u] = e;
            net.in_tree[e] = true;
            if u < ns {
                net.pred_dir[u] = DIR_UP;
                net.flow[e] = supply[u];
            } else {
                net.pred_dir[u] = DIR_DOWN;
                net.flow[e] = demand[u - ns];
            }
        }
        net.parent[net.root] = NONE;
        net.rebuild();
        net
    }

    fn source(&self, e: usize) -> usize {
        if e < self.real_arcs {
            e / self.nt
        } else {
            let u = e - self.real_arcs;
            if u < self.ns {
                u
            } else {
                self.root
            }
        }
    }

    fn target(&self, e: usize) -> usize {
        if e < self.real_arcs {
            self.ns + e % self.nt
        } else {
            let u = e - self.real_arcs;
            if u < self.ns {
                self.root
            } else {
                u
            }
        }
    }

    fn arc_cost(&self, e: usize) -> f64 {
        if e < self.real_arcs {
            self.cost[e]
        } else if e - self.real_arcs < self.ns {
            0.0
        } else {
            self.art_cost
        }
    }

    fn reduced_cost(&self, e: usize) -> f64 {
        self.arc_cost(e) + self.pi[self.source(e)] - self.pi[self.target(e)]
    }

    /// Children lists, depths and potentials from the parent pointers.
    fn rebuild(&mut self) {
        let total = self.node_num + 1;
        let mut counts = vec![0usize; total + 1];
        for u in 0..self.node_num {
            counts[self.parent[u] + 1] += 1;
        }
        for i in 0..total {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut list = vec![0usize; self.node_num];
        for u in 0..self.node_num {
            let p = self.parent[u];
            list[fill[p]] = u;
            fill[p] += 1;
        }
        self.child_start = counts;
        self.child_list = list;

        let mut stack = vec![self.root];
        self.depth[self.root] = 0;
        self.pi[self.root] = 0.0;
        while let Some(v) = stack.pop() {
            for k in self.child_start[v]..self.child_start[v + 1] {
                let u = self.child_list[k];
                let c = self.arc_cost(self.pred[u]);
                self.depth[u] = self.depth[v] + 1;
                self.pi[u] = if self.pred_dir[u] == DIR_UP { self.pi[v] - c } else { self.pi[v] + c };
                stack.push(u);
            }
        }
    }

    /// Block search pricing; returns the entering arc if any is eligible.
    fn find_entering(&mut self) -> Option<usize> {
        let m = self.real_arcs;
        if m == 0 {
            return None;
        }
        let mut best = -self.pricing_tol;
        let mut best_arc = None;
        let mut count = self.block_size;
        for step in 0..m {
            let e = (self.next_arc + step) % m;
            if !self.in_tree[e] {
                let rc = self.reduced_cost(e);
                if rc < best {
                    best = rc;
                    best_arc = Some(e);
                }
            }
            count -= 1;
            if count == 0 {
                if let Some(arc) = best_arc {
                    self.next_arc = (e + 1) % m;
                    return Some(arc);
                }
                count = self.block_size;
            }
        }
        if let Some(arc) = best_arc {
            self.next_arc = (arc + 1) % m;
        }
        best_arc
    }

    fn find_join(&self, mut u: usize, mut v: usize) -> usize {
        while u != v {
            if self.depth[u] >= self.depth[v] {
                u = self.parent[u];
            } else {
                v = self.parent[v];
            }
        }
        u
    }

    fn run(&mut self, limit: usize) -> Result<()> {
        let mut iterations = 0;
        while let Some(in_arc) = self.find_entering() {
            if iterations >= limit {
                return Err(Error::NumericalStall {
                    iterations,
                    detail: format!("entering arc {in_arc} with reduced cost {:e}", self.reduced_cost(in_arc)),
                });
            }
            iterations += 1;
            self.pivot(in_arc)?;
        }
        Ok(())
    }

    fn pivot(&mut self, in_arc: usize) -> Result<()> {
        let first = self.source(in_arc);
        let second = self.target(in_arc);
        let join = self.find_join(first, second);

        // Leaving arc: the last blocking arc in cycle orientation, which keeps
        // the tree strongly feasible.
        let mut delta = f64::INFINITY;
        let mut u_out = NONE;
        let mut on_first = true;
        let mut u = first;
        while u != join {
            if self.pred_dir[u] == DIR_UP {
                let d = self.flow[self.pred[u]];
                if d < delta {
                    delta = d;
                    u_out = u;
                }
            }
            u = self.parent[u];
        }
        u = second;
        while u != join {
            if self.pred_dir[u] == DIR_DOWN {
                let d = self.flow[self.pred[u]];
                if d <= delta {
                    delta = d;
                    u_out = u;
                    on_first = false;
                }
            }
            u = self.parent[u];
        }
        if u_out == NONE || !delta.is_finite() {
            return Err(Error::Infeasible("unbounded pivot cycle".into()));
        }
        let (u_in, v_in) = if on_first { (first, second) } else { (second, first) };

        if delta > 0.0 {
            self.flow[in_arc] += delta;
            let mut u = first;
            while u != join {
                let e = self.pred[u];
                self.flow[e] -= f64::from(self.pred_dir[u]) * delta;
                u = self.parent[u];
            }
            u = second;
            while u != join {
                let e = self.pred[u];
                self.flow[e] += f64::from(self.pred_dir[u]) * delta;
                u = self.parent[u];
            }
        }
        let out_arc = self.pred[u_out];
        self.in_tree[out_arc] = false;
        self.in_tree[in_arc] = true;
        // The leaving arc carries no flow by construction; clear roundoff.
        self.flow[out_arc] = 0.0;

        // Reverse the tree path from u_in up to u_out and hang it from v_in.
        let mut u = u_in;
        let mut new_parent = v_in;
        let mut new_pred = in_arc;
        let mut new_dir = if self.source(in_arc) == u_in { DIR_UP } else { DIR_DOWN };
        loop {
            let old_parent = self.parent[u];
            let old_pred = self.pred[u];
            let old_dir = self.pred_dir[u];
            self.parent[u] = new_parent;
            self.pred[u] = new_pred;
            self.pred_dir[u] = new_dir;
            if u == u_out {
                break;
            }
            new_parent = u;
            new_pred = old_pred;
            new_dir = -old_dir;
            u = old_parent;
        }
        self.rebuild();
        Ok(())
    }
}
