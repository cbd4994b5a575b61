//! Exact small-scale optimal transport.
//!
//! Two solvers, both exact: a shortest-augmenting-path assignment solver for
//! uniform equal-size point sets (the minibatch-OT workhorse), and a
//! transportation simplex for general weighted discrete measures up to 512
//! atoms per side. No entropic regularization anywhere; acceptance numbers
//! need exact optima and minibatches stay small.
//!
//! On top of those: the closed-form Gaussian transport map, geodesics from
//! plans, the conditional Wasserstein distance `W_{2,eta}` (eta-average of
//! fiberwise W2), and the relaxed product-space metric `W_beta` computed by
//! rescaling the condition block by `sqrt(beta)`.

use nalgebra::DMatrix;

use crate::linalg::{self, dist2, sym_inv_sqrt, sym_sqrt};
use crate::measures::{DiscreteMeasure, DiscretePlan, GaussianMeasure};
use crate::{Error, Result};

/// Exactness regime for the transportation simplex.
pub const MAX_EXACT_ATOMS: usize = 512;

/// Affine map `x -> A x + b`.
#[derive(Debug, Clone)]
pub struct AffineMap {
    pub a: DMatrix<f64>,
    pub b: Vec<f64>,
}

impl AffineMap {
    pub fn new(a: DMatrix<f64>, b: Vec<f64>) -> Self {
        AffineMap { a, b }
    }

    /// Pure translation `x -> x + b`.
    pub fn translation(b: Vec<f64>) -> Self {
        let d = b.len();
        AffineMap {
            a: DMatrix::identity(d, d),
            b,
        }
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let y = &self.a * nalgebra::DVector::from_column_slice(x);
        y.iter().zip(&self.b).map(|(v, b)| v + b).collect()
    }
}

/// Exact optimal plan with its quadratic cost `sum w ||x-y||^2`.
#[derive(Debug, Clone)]
pub struct OtResult {
    pub cost: f64,
    pub plan: DiscretePlan,
}

impl OtResult {
    pub fn w2(&self) -> f64 {
        self.cost.max(0.0).sqrt()
    }
}

/// Exact minimum-cost assignment between two equal-size point sets under
/// squared Euclidean cost. Returns the permutation `sigma` (pairing
/// `x_i <-> y_{sigma(i)}`) and the *mean* squared cost, i.e. the squared
/// Wasserstein-2 distance of the two uniform empirical measures.
///
/// Shortest augmenting path / Jonker-Volgenant style, O(n^3). Ties are
/// resolved by scan order, so the result is deterministic.
pub fn solve_assignment(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<(Vec<usize>, f64)> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::InvalidArgument(
            "assignment needs equal nonempty point sets".into(),
        ));
    }
    let n = xs.len();
    let cost = |i: usize, j: usize| dist2(&xs[i], &ys[j]);
    let col4row = lap_square(n, &cost);
    let mean_cost = col4row
        .iter()
        .enumerate()
        .map(|(i, &j)| cost(i, j))
        .sum::<f64>()
        / n as f64;
    Ok((col4row, mean_cost))
}

/// Square linear assignment by successive shortest augmenting paths with
/// dual potentials.
fn lap_square(n: usize, cost: &impl Fn(usize, usize) -> f64) -> Vec<usize> {
    const UNSET: usize = usize::MAX;
    let mut u = vec![0.0f64; n];
    let mut v = vec![0.0f64; n];
    let mut col4row = vec![UNSET; n]; // row -> col
    let mut row4col = vec![UNSET; n]; // col -> row

    for cur_row in 0..n {
        // Dijkstra over columns for the shortest augmenting path from cur_row
        let mut shortest = vec![f64::INFINITY; n];
        let mut path = vec![UNSET; n]; // predecessor row per column
        let mut scanned_rows = vec![false; n];
        let mut scanned_cols = vec![false; n];
        let mut remaining: Vec<usize> = (0..n).rev().collect();
        let mut min_val = 0.0;
        let mut i = cur_row;
        let sink;
        loop {
            scanned_rows[i] = true;
            let mut lowest = f64::INFINITY;
            let mut index = UNSET;
            for (it, &j) in remaining.iter().enumerate() {
                let r = min_val + cost(i, j) - u[i] - v[j];
                if r < shortest[j] {
                    path[j] = i;
                    shortest[j] = r;
                }
                if shortest[j] < lowest || (shortest[j] == lowest && row4col[j] == UNSET) {
                    lowest = shortest[j];
                    index = it;
                }
            }
            min_val = lowest;
            let j = remaining[index];
            if row4col[j] == UNSET {
                sink = j;
                break;
            }
            i = row4col[j];
            scanned_cols[j] = true;
            remaining.swap_remove(index);
        }

        // dual updates
        u[cur_row] += min_val;
        for r in 0..n {
            if scanned_rows[r] && r != cur_row {
                u[r] += min_val - shortest[col4row[r]];
            }
        }
        for j in 0..n {
            if scanned_cols[j] {
                v[j] -= min_val - shortest[j];
            }
        }

        // augment along the alternating path
        let mut j = sink;
        loop {
            let i = path[j];
            row4col[j] = i;
            std::mem::swap(&mut col4row[i], &mut j);
            if i == cur_row {
                break;
            }
        }
    }
    col4row
}

/// Exact optimal transport between general weighted discrete measures via
/// the transportation simplex. Supports at most [`MAX_EXACT_ATOMS`] atoms
/// per side.
pub fn solve_discrete_ot(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<OtResult> {
    if mu.dim() != nu.dim() {
        return Err(Error::InvalidArgument("dimension mismatch".into()));
    }
    let cost = |i: usize, j: usize| dist2(&mu.points()[i], &nu.points()[j]);
    let (triples, cost_total) = transport_simplex(mu.weights(), nu.weights(), &cost)?;
    let plan = plan_from_index_triples(&triples, mu.points(), nu.points())?;
    Ok(OtResult {
        cost: cost_total,
        plan,
    })
}

/// Transportation simplex on index level: supplies `a`, demands `b`
/// (both on the simplex), cost function on index pairs. Returns the basic
/// optimal flows `(i, j, w)` with `w > 0` and the total cost.
pub fn transport_simplex(
    a: &[f64],
    b: &[f64],
    cost: &impl Fn(usize, usize) -> f64,
) -> Result<(Vec<(usize, usize, f64)>, f64)> {
    let m = a.len();
    let n = b.len();
    if m == 0 || n == 0 {
        return Err(Error::InvalidArgument("empty marginal".into()));
    }
    if m > MAX_EXACT_ATOMS || n > MAX_EXACT_ATOMS {
        return Err(Error::SupportTooLarge(m.max(n), MAX_EXACT_ATOMS));
    }

    // Basis arcs as parallel vectors; together they always form a spanning
    // tree of the bipartite node set (rows 0..m, cols m..m+n).
    let mut basis_i: Vec<usize> = Vec::with_capacity(m + n - 1);
    let mut basis_j: Vec<usize> = Vec::with_capacity(m + n - 1);
    let mut flow: Vec<f64> = Vec::with_capacity(m + n - 1);

    // Northwest corner initialization: exactly m+n-1 visited cells.
    {
        let mut ra = a.to_vec();
        let mut rb = b.to_vec();
        let (mut i, mut j) = (0usize, 0usize);
        loop {
            let q = ra[i].min(rb[j]);
            basis_i.push(i);
            basis_j.push(j);
            flow.push(q);
            ra[i] -= q;
            rb[j] -= q;
            if i == m - 1 && j == n - 1 {
                break;
            }
            if (ra[i] <= rb[j] && i < m - 1) || j == n - 1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        debug_assert_eq!(flow.len(), m + n - 1);
    }

    let nodes = m + n;
    let cost_scale = {
        let mut mx: f64 = 0.0;
        for i in 0..m {
            for j in 0..n {
                mx = mx.max(cost(i, j).abs());
            }
        }
        mx.max(1.0)
    };
    let tol = 1e-12 * cost_scale;
    let max_iter = 200 * (m + n) * (m + n);

    let mut u = vec![0.0f64; m];
    let mut v = vec![0.0f64; n];
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nodes]; // (neighbor node, basis idx)

    for _ in 0..max_iter {
        // potentials from the spanning tree, rooted at row 0
        for l in adj.iter_mut() {
            l.clear();
        }
        for (k, (&bi, &bj)) in basis_i.iter().zip(&basis_j).enumerate() {
            adj[bi].push((m + bj, k));
            adj[m + bj].push((bi, k));
        }
        let mut seen = vec![false; nodes];
        let mut stack = vec![0usize];
        u[0] = 0.0;
        seen[0] = true;
        while let Some(node) = stack.pop() {
            for &(next, k) in &adj[node] {
                if !seen[next] {
                    seen[next] = true;
                    let c = cost(basis_i[k], basis_j[k]);
                    if next >= m {
                        v[next - m] = c - u[node];
                    } else {
                        u[next] = c - v[node - m];
                    }
                    stack.push(next);
                }
            }
        }

        // entering arc: first (row-major) cell with negative reduced cost
        let mut entering = None;
        'scan: for i in 0..m {
            for j in 0..n {
                if cost(i, j) - u[i] - v[j] < -tol {
                    entering = Some((i, j));
                    break 'scan;
                }
            }
        }
        let (ei, ej) = match entering {
            Some(e) => e,
            None => break,
        };

        // unique tree path from row ei to col ej
        let mut parent = vec![usize::MAX; nodes];
        let mut parent_arc = vec![usize::MAX; nodes];
        let mut seen = vec![false; nodes];
        seen[ei] = true;
        let mut stack = vec![ei];
        while let Some(node) = stack.pop() {
            if node == m + ej {
                break;
            }
            for &(next, k) in &adj[node] {
                if !seen[next] {
                    seen[next] = true;
                    parent[next] = node;
                    parent_arc[next] = k;
                    stack.push(next);
                }
            }
        }
        // path arcs from col ej back to row ei; alternate signs starting
        // with "-" for the arc adjacent to col ej
        let mut path_arcs = Vec::new();
        let mut node = m + ej;
        while node != ei {
            path_arcs.push(parent_arc[node]);
            node = parent[node];
        }
        // theta: minimum flow among "-" arcs (even positions in path_arcs)
        let mut theta = f64::INFINITY;
        for (pos, &k) in path_arcs.iter().enumerate() {
            if pos % 2 == 0 && flow[k] < theta {
                theta = flow[k];
            }
        }
        // leaving arc: among "-" arcs with minimal flow, lexicographically
        // smallest (i, j) for determinism (and to avoid cycling in practice)
        let mut leave = usize::MAX;
        for (pos, &k) in path_arcs.iter().enumerate() {
            if pos % 2 == 0 && flow[k] == theta {
                if leave == usize::MAX
                    || (basis_i[k], basis_j[k]) < (basis_i[leave], basis_j[leave])
                {
                    leave = k;
                }
            }
        }
        debug_assert!(leave != usize::MAX);

        // pivot
        for (pos, &k) in path_arcs.iter().enumerate() {
            if pos % 2 == 0 {
                flow[k] -= theta;
            } else {
                flow[k] += theta;
            }
        }
        basis_i[leave] = ei;
        basis_j[leave] = ej;
        flow[leave] = theta;
    }

    let mut total = 0.0;
    let mut triples = Vec::new();
    for (k, &f) in flow.iter().enumerate() {
        if f > 0.0 {
            total += f * cost(basis_i[k], basis_j[k]);
            triples.push((basis_i[k], basis_j[k], f));
        }
    }
    Ok((triples, total))
}

fn plan_from_index_triples(
    triples: &[(usize, usize, f64)],
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
) -> Result<DiscretePlan> {
    let total: f64 = triples.iter().map(|t| t.2).sum();
    DiscretePlan::from_triples(
        triples
            .iter()
            .map(|&(i, j, w)| (xs[i].clone(), ys[j].clone(), w / total))
            .collect(),
    )
}

/// Squared Wasserstein-2 distance between general discrete measures.
pub fn w2_squared(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<f64> {
    Ok(solve_discrete_ot(mu, nu)?.cost)
}

/// Exact 1-D Wasserstein-2 between two equal-size uniform samples
/// (monotone/sorted pairing is optimal in one dimension).
pub fn wasserstein_1d(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::InvalidArgument(
            "1-D W2 needs equal nonempty samples".into(),
        ));
    }
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(|p, q| p.total_cmp(q));
    b.sort_by(|p, q| p.total_cmp(q));
    let ms: f64 = a
        .iter()
        .zip(&b)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        / a.len() as f64;
    Ok(ms.sqrt())
}

/// Closed-form optimal (Monge) map between Gaussians:
/// `T(x) = m_nu + A (x - m_mu)` with
/// `A = S_mu^{-1/2} (S_mu^{1/2} S_nu S_mu^{1/2})^{1/2} S_mu^{-1/2}`,
/// so that `A S_mu A^T = S_nu`.
pub fn gaussian_monge_map(mu: &GaussianMeasure, nu: &GaussianMeasure) -> Result<AffineMap> {
    if mu.dim() != nu.dim() {
        return Err(Error::InvalidArgument("dimension mismatch".into()));
    }
    let s_mu = mu.cov_matrix();
    let s_nu = nu.cov_matrix();
    let rt = sym_sqrt(&s_mu);
    let irt = sym_inv_sqrt(&s_mu);
    let mid = sym_sqrt(&(&rt * s_nu * &rt));
    let a = &irt * mid * &irt;
    let am = &a * nalgebra::DVector::from_column_slice(mu.mean());
    let b: Vec<f64> = nu.mean().iter().zip(am.iter()).map(|(m, v)| m - v).collect();
    Ok(AffineMap { a, b })
}

/// `W_beta` on a product space `R^m x R^d`: optimal transport under the
/// rescaled metric `d_beta(u1, u2) = ||x1-x2||^2 + beta ||w1-w2||^2`,
/// computed by scaling the first block by `sqrt(beta)` and running the
/// standard solver. The returned plan is in original coordinates; the cost
/// is in the `d_beta` metric.
pub fn w_beta(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    m_split: usize,
    beta: f64,
) -> Result<OtResult> {
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument("beta must be positive".into()));
    }
    if mu.dim() != nu.dim() || m_split == 0 || m_split >= mu.dim() {
        return Err(Error::InvalidArgument("bad product-space split".into()));
    }
    let cost = |i: usize, j: usize| {
        let p = &mu.points()[i];
        let q = &nu.points()[j];
        let mut c = 0.0;
        for k in 0..m_split {
            c += beta * (p[k] - q[k]) * (p[k] - q[k]);
        }
        for k in m_split..p.len() {
            c += (p[k] - q[k]) * (p[k] - q[k]);
        }
        c
    };
    let (triples, total) = transport_simplex(mu.weights(), nu.weights(), &cost)?;
    let plan = plan_from_index_triples(&triples, mu.points(), nu.points())?;
    Ok(OtResult { cost: total, plan })
}

/// Condition-block displacement mass `int ||w1 - w2||^2 d alpha` of a plan
/// on a product space with the first `m_split` coordinates as condition.
pub fn condition_displacement(plan: &DiscretePlan, m_split: usize) -> f64 {
    plan.atoms()
        .iter()
        .map(|a| a.w * dist2(&a.x[..m_split], &a.y[..m_split]))
        .sum()
}

/// Conditional Wasserstein-2 distance `W_{2,eta}` for discrete measures on
/// `R^m x R^d` with common condition marginal `eta`:
/// `sqrt( sum_w eta(w) W_2^2(mu^w, nu^w) )`, fibers matched by exact
/// `w`-coordinate equality and solved independently in fixed fiber order.
pub fn cond_w2(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    eta: &DiscreteMeasure,
    m_split: usize,
) -> Result<f64> {
    if mu.dim() != nu.dim() || eta.dim() != m_split {
        return Err(Error::InvalidArgument("bad product-space split".into()));
    }
    let fibers_mu = split_fibers(mu, m_split);
    let fibers_nu = split_fibers(nu, m_split);
    let mut total = 0.0;
    for (w, &eta_w) in eta.points().iter().zip(eta.weights()) {
        let key = crate::measures::bits_key(w);
        let fm = fibers_mu
            .iter()
            .find(|f| f.key == key)
            .ok_or_else(|| Error::NotInPEta(format!("mu has no fiber at w={w:?}")))?;
        let fn_ = fibers_nu
            .iter()
            .find(|f| f.key == key)
            .ok_or_else(|| Error::NotInPEta(format!("nu has no fiber at w={w:?}")))?;
        if (fm.mass - eta_w).abs() > 1e-12 || (fn_.mass - eta_w).abs() > 1e-12 {
            return Err(Error::NotInPEta(format!(
                "fiber mass mismatch at w={w:?}: {} / {} vs eta {}",
                fm.mass, fn_.mass, eta_w
            )));
        }
        let mu_w = fm.conditional()?;
        let nu_w = fn_.conditional()?;
        total += eta_w * solve_discrete_ot(&mu_w, &nu_w)?.cost;
    }
    // every fiber of mu / nu must be accounted for
    let covered: f64 = eta.weights().iter().sum();
    let mass_mu: f64 = fibers_mu.iter().map(|f| f.mass).sum();
    if (mass_mu - covered).abs() > 1e-12 || fibers_mu.len() != eta.len() || fibers_nu.len() != eta.len()
    {
        return Err(Error::NotInPEta("extra fibers outside eta support".into()));
    }
    Ok(total.max(0.0).sqrt())
}

struct Fiber {
    key: Vec<u64>,
    mass: f64,
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl Fiber {
    fn conditional(&self) -> Result<DiscreteMeasure> {
        let ws: Vec<f64> = self.weights.iter().map(|w| w / self.mass).collect();
        // renormalize exactly against accumulated drift
        let s: f64 = ws.iter().sum();
        DiscreteMeasure::new(self.points.clone(), ws.iter().map(|w| w / s).collect())
    }
}

fn split_fibers(m: &DiscreteMeasure, m_split: usize) -> Vec<Fiber> {
    let mut fibers: Vec<Fiber> = Vec::new();
    for (p, &w) in m.points().iter().zip(m.weights()) {
        let key = crate::measures::bits_key(&p[..m_split]);
        let x = p[m_split..].to_vec();
        match fibers.iter_mut().find(|f| f.key == key) {
            Some(f) => {
                f.mass += w;
                f.points.push(x);
                f.weights.push(w);
            }
            None => fibers.push(Fiber {
                key,
                mass: w,
                points: vec![x],
                weights: vec![w],
            }),
        }
    }
    fibers
}

/// Point on the curve induced by a plan: `e_t(x,y) = (1-t)x + ty` pushed
/// through the plan weights, coincident atoms merged.
pub fn geodesic_point(plan: &DiscretePlan, t: f64) -> Result<DiscreteMeasure> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("t={t} outside [0,1]")));
    }
    let points: Vec<Vec<f64>> = plan
        .atoms()
        .iter()
        .map(|a| linalg::lerp(&a.x, &a.y, t))
        .collect();
    let weights: Vec<f64> = plan.atoms().iter().map(|a| a.w).collect();
    Ok(DiscreteMeasure::new(points, weights)?.merged())
}
