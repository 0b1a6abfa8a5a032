//! Sparse matrices in compressed row form and the solvers used by the flow
//! and transport schemes: an up-looking sparse Cholesky factorization with a
//! fill-reducing ordering, Jacobi-preconditioned conjugate gradients, and a
//! left-looking sparse LU with partial pivoting.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};

/// Compressed sparse row matrix with sorted, unique column indices.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
    symmetric: bool,
}

impl SparseMatrix {
    /// Sums duplicate entries. Explicit zeros are kept so that the pattern
    /// does not depend on the data.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; nrows + 1];
        for &(i, j, _) in triplets {
            assert!(i < nrows && j < ncols, "triplet ({i}, {j}) outside {nrows}x{ncols}");
            counts[i + 1] += 1;
        }
        for i in 0..nrows {
            counts[i + 1] += counts[i];
        }
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        let mut next = counts.clone();
        for &(i, j, v) in triplets {
            cols[next[i]] = j;
            vals[next[i]] = v;
            next[i] += 1;
        }
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        row_ptr.push(0);
        let mut order: Vec<usize> = Vec::new();
        for i in 0..nrows {
            order.clear();
            order.extend(counts[i]..counts[i + 1]);
            order.sort_by_key(|&p| cols[p]);
            for &p in &order {
                if col_idx.len() > row_ptr[i] && *col_idx.last().unwrap() == cols[p] {
                    *values.last_mut().unwrap() += vals[p];
                } else {
                    col_idx.push(cols[p]);
                    values.push(vals[p]);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self { nrows, ncols, row_ptr, col_idx, values, symmetric: false }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_triplets(n, n, &(0..n).map(|i| (i, i, 1.0)).collect::<Vec<_>>())
    }

    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        let mut t = Vec::new();
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    t.push((i, j, v));
                }
            }
        }
        Self::from_triplets(n, m, &t)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[r.clone()].binary_search(&j) {
            Ok(p) => self.values[r.start + p],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols)).map(|i| self.get(i, i)).collect()
    }

    pub fn is_symmetric_flagged(&self) -> bool {
        self.symmetric
    }

    /// Largest `|a_ij - a_ji|` relative to the largest `|a_ij|`.
    pub fn symmetry_defect(&self) -> f64 {
        if self.nrows != self.ncols {
            return f64::INFINITY;
        }
        let t = self.transpose();
        let scale = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            return 0.0;
        }
        let mut defect = 0.0f64;
        for i in 0..self.nrows {
            let mut a = self.row(i).peekable();
            let mut b = t.row(i).peekable();
            loop {
                match (a.peek().copied(), b.peek().copied()) {
                    (None, None) => break,
                    (Some((ja, va)), Some((jb, vb))) if ja == jb => {
                        defect = defect.max((va - vb).abs());
                        a.next();
                        b.next();
                    }
                    (Some((ja, va)), Some((jb, _))) if ja < jb => {
                        defect = defect.max(va.abs());
                        a.next();
                    }
                    (Some((ja, va)), None) => {
                        let _ = ja;
                        defect = defect.max(va.abs());
                        a.next();
                    }
                    (_, Some((_, vb))) => {
                        defect = defect.max(vb.abs());
                        b.next();
                    }
                }
            }
        }
        defect / scale
    }

    /// Sets the symmetry flag after checking entrywise symmetry to `tol`.
    pub fn mark_symmetric(&mut self, tol: f64) -> bool {
        self.symmetric = self.symmetry_defect() <= tol;
        self.symmetric
    }

    pub fn transpose(&self) -> Self {
        let mut t = Vec::with_capacity(self.nnz());
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                t.push((j, i, v));
            }
        }
        let mut out = Self::from_triplets(self.ncols, self.nrows, &t);
        out.symmetric = self.symmetric;
        out
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.row(i).map(|(j, v)| v * x[j]).sum();
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for (i, row) in d.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] = v;
            }
        }
        d
    }

    /// `P A Pᵀ` with `perm[new] = old`.
    fn permute_symmetric(&self, perm: &[usize]) -> Self {
        let mut inv = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut t = Vec::with_capacity(self.nnz());
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                t.push((inv[i], inv[j], v));
            }
        }
        Self::from_triplets(self.nrows, self.ncols, &t)
    }

    /// Pattern of `A + Aᵀ` without the diagonal.
    fn symmetric_graph(&self) -> Graph {
        let n = self.nrows;
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for i in 0..n {
            for (j, _) in self.row(i) {
                if i != j {
                    adj[i].push(j);
                    adj[j].push(i);
                }
            }
        }
        let mut ptr = Vec::with_capacity(n + 1);
        let mut idx = Vec::new();
        ptr.push(0);
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
            idx.extend_from_slice(list);
            ptr.push(idx.len());
        }
        Graph { ptr, idx }
    }
}

pub fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// `‖Mx − b‖₂ / ‖b‖₂` (absolute residual when `b = 0`).
pub fn relative_residual(m: &SparseMatrix, x: &[f64], b: &[f64]) -> f64 {
    let r: Vec<f64> = m.mul_vec(x).iter().zip(b).map(|(a, b)| a - b).collect();
    let nb = norm2(b);
    if nb > 0.0 {
        norm2(&r) / nb
    } else {
        norm2(&r)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveReport {
    /// Zero for direct solves.
    pub iterations: usize,
    /// Relative residual `‖Mx − b‖ / ‖b‖`.
    pub residual: f64,
    pub wall_time: Duration,
}

/// Fill-reducing symmetric orderings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Ordering {
    Natural,
    ReverseCuthillMcKee,
    #[default]
    NestedDissection,
}

struct Graph {
    ptr: Vec<usize>,
    idx: Vec<usize>,
}

impl Graph {
    fn neighbors(&self, v: usize) -> &[usize] {
        &self.idx[self.ptr[v]..self.ptr[v + 1]]
    }

    fn len(&self) -> usize {
        self.ptr.len() - 1
    }
}

/// Breadth-first level structure restricted to nodes with `active[v] == stamp`.
struct Levels {
    order: Vec<usize>,
    starts: Vec<usize>,
}

struct Orderer<'g> {
    graph: &'g Graph,
    active: Vec<u32>,
    seen: Vec<u32>,
    stamp: u32,
}

impl<'g> Orderer<'g> {
    fn new(graph: &'g Graph) -> Self {
        let n = graph.len();
        Self { graph, active: vec![0; n], seen: vec![0; n], stamp: 0 }
    }

    fn next_stamp(&mut self) -> u32 {
        self.stamp += 1;
        self.stamp
    }

    fn activate(&mut self, nodes: &[usize]) -> u32 {
        let s = self.next_stamp();
        for &v in nodes {
            self.active[v] = s;
        }
        s
    }

    fn bfs(&mut self, root: usize, active: u32) -> Levels {
        let s = self.next_stamp();
        let mut order = vec![root];
        let mut starts = vec![0];
        self.seen[root] = s;
        let mut head = 0;
        while head < order.len() {
            let end = order.len();
            starts.push(end);
            for k in head..end {
                let v = order[k];
                for &w in self.graph.neighbors(v) {
                    if self.active[w] == active && self.seen[w] != s {
                        self.seen[w] = s;
                        order.push(w);
                    }
                }
            }
            head = end;
        }
        starts.pop();
        starts.push(order.len());
        // `starts` has one entry per level plus the end sentinel
        Levels { order, starts }
    }

    fn degree(&self, v: usize, active: u32) -> usize {
        self.graph.neighbors(v).iter().filter(|&&w| self.active[w] == active).count()
    }

    fn pseudo_peripheral(&mut self, start: usize, active: u32) -> (usize, Levels) {
        let mut root = start;
        let mut levels = self.bfs(root, active);
        loop {
            let last = levels.starts.len() - 2;
            let candidate = levels.order[levels.starts[last]..levels.starts[last + 1]]
                .iter()
                .copied()
                .min_by_key(|&v| self.degree(v, active))
                .expect("nonempty level");
            let trial = self.bfs(candidate, active);
            if trial.starts.len() > levels.starts.len() {
                root = candidate;
                levels = trial;
            } else {
                return (root, levels);
            }
        }
    }

    /// Connected components of `nodes`.
    fn components(&mut self, nodes: &[usize]) -> Vec<Vec<usize>> {
        let active = self.activate(nodes);
        let s = self.next_stamp();
        let mut out = Vec::new();
        for &v in nodes {
            if self.seen[v] == s {
                continue;
            }
            let mut comp = vec![v];
            self.seen[v] = s;
            let mut head = 0;
            while head < comp.len() {
                let u = comp[head];
                head += 1;
                for &w in self.graph.neighbors(u) {
                    if self.active[w] == active && self.seen[w] != s {
                        self.seen[w] = s;
                        comp.push(w);
                    }
                }
            }
            out.push(comp);
        }
        out
    }

    /// Reverse Cuthill-McKee order of a connected node set.
    fn rcm_component(&mut self, nodes: &[usize]) -> Vec<usize> {
        let active = self.activate(nodes);
        let (root, _) = self.pseudo_peripheral(nodes[0], active);
        let s = self.next_stamp();
        let mut order = Vec::with_capacity(nodes.len());
        let mut queue = VecDeque::new();
        queue.push_back(root);
        self.seen[root] = s;
        let mut buf = Vec::new();
        while let Some(v) = queue.pop_front() {
            order.push(v);
            buf.clear();
            for &w in self.graph.neighbors(v) {
                if self.active[w] == active && self.seen[w] != s {
                    self.seen[w] = s;
                    buf.push(w);
                }
            }
            buf.sort_by_key(|&w| (self.degree(w, active), w));
            queue.extend(buf.iter().copied());
        }
        order.reverse();
        order
    }

    fn rcm(&mut self, nodes: &[usize]) -> Vec<usize> {
        let mut order = Vec::with_capacity(nodes.len());
        for comp in self.components(nodes) {
            order.extend(self.rcm_component(&comp));
        }
        order
    }

    fn nested_dissection(&mut self, nodes: &[usize], out: &mut Vec<usize>) {
        const LEAF: usize = 96;
        if nodes.len() <= LEAF {
            out.extend(self.rcm(nodes));
            return;
        }
        let comps = self.components(nodes);
        if comps.len() > 1 {
            for comp in comps {
                self.nested_dissection(&comp, out);
            }
            return;
        }
        let active = self.activate(nodes);
        let (_, levels) = self.pseudo_peripheral(nodes[0], active);
        let nlev = levels.starts.len() - 1;
        if nlev < 3 {
            out.extend(self.rcm(nodes));
            return;
        }
        let half = nodes.len() / 2;
        let mut mid = 1;
        while mid < nlev - 2 && levels.starts[mid + 1] < half {
            mid += 1;
        }
        let level_of = {
            let s = self.next_stamp();
            for &v in &levels.order[levels.starts[mid]..levels.starts[mid + 1]] {
                self.seen[v] = s;
            }
            s
        };
        let after = self.next_stamp();
        for &v in &levels.order[levels.starts[mid + 1]..] {
            self.seen[v] = after;
        }
        let mut part_a: Vec<usize> = levels.order[..levels.starts[mid]].to_vec();
        let part_b: Vec<usize> = levels.order[levels.starts[mid + 1]..].to_vec();
        let mut separator = Vec::new();
        for &v in &levels.order[levels.starts[mid]..levels.starts[mid + 1]] {
            // separator nodes not touching the far side can join the near side
            if self.graph.neighbors(v).iter().any(|&w| self.active[w] == active && self.seen[w] == after) {
                separator.push(v);
            } else {
                part_a.push(v);
            }
        }
        let _ = level_of;
        self.nested_dissection(&part_a, out);
        self.nested_dissection(&part_b, out);
        out.extend(separator);
    }
}

/// Symmetric permutation (`perm[new] = old`) for the pattern of `M + Mᵀ`.
pub fn ordering(m: &SparseMatrix, kind: Ordering) -> Vec<usize> {
    let n = m.nrows();
    match kind {
        Ordering::Natural => (0..n).collect(),
        Ordering::ReverseCuthillMcKee => {
            let g = m.symmetric_graph();
            let nodes: Vec<usize> = (0..n).collect();
            Orderer::new(&g).rcm(&nodes)
        }
        Ordering::NestedDissection => {
            let g = m.symmetric_graph();
            let nodes: Vec<usize> = (0..n).collect();
            let mut out = Vec::with_capacity(n);
            Orderer::new(&g).nested_dissection(&nodes, &mut out);
            out
        }
    }
}

/// Sparse Cholesky factor `P M Pᵀ = L Lᵀ`, `L` stored by columns.
#[derive(Clone, Debug)]
pub struct CholeskyFactor {
    n: usize,
    perm: Vec<usize>,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

fn elimination_tree(c: &SparseMatrix) -> Vec<usize> {
    let n = c.nrows();
    let mut parent = vec![usize::MAX; n];
    let mut ancestor = vec![usize::MAX; n];
    for k in 0..n {
        for (j, _) in c.row(k) {
            if j >= k {
                break;
            }
            let mut i = j;
            while i != usize::MAX && i < k {
                let next = ancestor[i];
                ancestor[i] = k;
                if next == usize::MAX {
                    parent[i] = k;
                    break;
                }
                i = next;
            }
        }
    }
    parent
}

/// Nonzero pattern of row `k` of `L` (excluding the diagonal) in
/// topological order, written to `stack[top..]`.
fn ereach(c: &SparseMatrix, k: usize, parent: &[usize], mark: &mut [usize], stack: &mut [usize]) -> usize {
    let n = c.nrows();
    let mut top = n;
    mark[k] = k;
    for (j, _) in c.row(k) {
        if j >= k {
            break;
        }
        let mut len = 0;
        let mut i = j;
        while mark[i] != k {
            stack[len] = i;
            len += 1;
            mark[i] = k;
            i = parent[i];
        }
        while len > 0 {
            top -= 1;
            len -= 1;
            stack[top] = stack[len];
        }
    }
    top
}

impl CholeskyFactor {
    pub fn factor(m: &SparseMatrix, kind: Ordering) -> Result<Self> {
        let n = m.nrows();
        if n != m.ncols() {
            return Err(Error::InvalidProblem("Cholesky of a non-square matrix".into()));
        }
        let perm = ordering(m, kind);
        let c = m.permute_symmetric(&perm);
        let parent = elimination_tree(&c);
        let mut mark = vec![usize::MAX; n];
        let mut stack = vec![0; n];
        let mut counts = vec![1usize; n];
        for k in 0..n {
            let top = ereach(&c, k, &parent, &mut mark, &mut stack);
            for &i in &stack[top..] {
                counts[i] += 1;
            }
        }
        let mut col_ptr = vec![0; n + 1];
        for k in 0..n {
            col_ptr[k + 1] = col_ptr[k] + counts[k];
        }
        let nnz = col_ptr[n];
        let mut row_idx = vec![0; nnz];
        let mut values = vec![0.0; nnz];
        let mut next: Vec<usize> = col_ptr[..n].to_vec();
        let mut x = vec![0.0; n];
        mark.iter_mut().for_each(|m| *m = usize::MAX);
        for k in 0..n {
            let top = ereach(&c, k, &parent, &mut mark, &mut stack);
            for (j, v) in c.row(k) {
                if j <= k {
                    x[j] += v;
                }
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &i in &stack[top..] {
                let lki = x[i] / values[col_ptr[i]];
                x[i] = 0.0;
                for p in col_ptr[i] + 1..next[i] {
                    x[row_idx[p]] -= values[p] * lki;
                }
                d -= lki * lki;
                let p = next[i];
                next[i] += 1;
                row_idx[p] = k;
                values[p] = lki;
            }
            if !(d > 0.0) {
                return Err(Error::NotSpd { row: perm[k], pivot: d });
            }
            let p = next[k];
            next[k] += 1;
            row_idx[p] = k;
            values[p] = d.sqrt();
        }
        Ok(Self { n, perm, col_ptr, row_idx, values })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        for j in 0..n {
            let r = self.col_ptr[j]..self.col_ptr[j + 1];
            y[j] /= self.values[r.start];
            let yj = y[j];
            for p in r.start + 1..r.end {
                y[self.row_idx[p]] -= self.values[p] * yj;
            }
        }
        for j in (0..n).rev() {
            let r = self.col_ptr[j]..self.col_ptr[j + 1];
            let mut s = y[j];
            for p in r.start + 1..r.end {
                s -= self.values[p] * y[self.row_idx[p]];
            }
            y[j] = s / self.values[r.start];
        }
        let mut x = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }
}

/// Direct solve of an SPD system with a nested-dissection ordered Cholesky
/// factorization.
pub fn cholesky_solve(m: &SparseMatrix, b: &[f64]) -> Result<(Vec<f64>, SolveReport)> {
    let start = Instant::now();
    let factor = CholeskyFactor::factor(m, Ordering::default())?;
    let x = factor.solve(b);
    let residual = relative_residual(m, &x, b);
    Ok((x, SolveReport { iterations: 0, residual, wall_time: start.elapsed() }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Preconditioner {
    None,
    #[default]
    Jacobi,
}

/// Preconditioned conjugate gradients from a zero initial guess.
pub fn cg_solve(
    m: &SparseMatrix,
    b: &[f64],
    tol: f64,
    max_iter: usize,
    preconditioner: Preconditioner,
) -> Result<(Vec<f64>, SolveReport)> {
    let start = Instant::now();
    let n = b.len();
    let inv_diag: Vec<f64> = match preconditioner {
        Preconditioner::None => vec![1.0; n],
        Preconditioner::Jacobi => m
            .diagonal()
            .iter()
            .enumerate()
            .map(|(i, &d)| if d > 0.0 { Ok(1.0 / d) } else { Err(Error::NotSpd { row: i, pivot: d }) })
            .collect::<Result<_>>()?,
    };
    let nb = norm2(b);
    let mut x = vec![0.0; n];
    let report = |x: &[f64], it: usize| SolveReport {
        iterations: it,
        residual: relative_residual(m, x, b),
        wall_time: start.elapsed(),
    };
    if nb == 0.0 {
        let rep = report(&x, 0);
        return Ok((x, rep));
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, d)| a * d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut q = vec![0.0; n];
    // true relative residual at the last residual replacement
    let mut replaced = f64::INFINITY;
    for it in 1..=max_iter {
        m.mul_vec_into(&p, &mut q);
        let pq = dot(&p, &q);
        if !(pq > 0.0) {
            if rz == 0.0 {
                return Err(Error::NoConvergence { iterations: it, residual: relative_residual(m, &x, b) });
            }
            return Err(Error::NotSpd { row: 0, pivot: pq });
        }
        let alpha = rz / pq;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        if norm2(&r) <= tol * nb {
            let rep = report(&x, it);
            if rep.residual <= tol {
                return Ok((x, rep));
            }
            // The recurrence drifted from b − Mx. Restart from the true
            // residual, give up once that stops improving.
            if rep.residual >= 0.5 * replaced {
                return Err(Error::NoConvergence { iterations: it, residual: rep.residual });
            }
            replaced = rep.residual;
            m.mul_vec_into(&x, &mut q);
            for i in 0..n {
                r[i] = b[i] - q[i];
                p[i] = 0.0;
            }
            rz = 1.0;
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::NoConvergence { iterations: max_iter, residual: relative_residual(m, &x, b) })
}

/// Compressed sparse column copy used by the LU factorization.
struct Csc {
    ptr: Vec<usize>,
    idx: Vec<usize>,
    val: Vec<f64>,
}

impl Csc {
    fn from_csr(m: &SparseMatrix) -> Self {
        let t = m.transpose();
        Self { ptr: t.row_ptr, idx: t.col_idx, val: t.values }
    }
}

/// Sparse LU factor `P M Q = L U` with unit lower `L`.
#[derive(Clone, Debug)]
pub struct LuFactor {
    n: usize,
    /// Column order: column `k` of the factor is column `q[k]` of `M`.
    q: Vec<usize>,
    /// Row `i` of `M` is pivot row `pinv[i]`.
    pinv: Vec<usize>,
    l_ptr: Vec<usize>,
    l_idx: Vec<usize>,
    l_val: Vec<f64>,
    u_ptr: Vec<usize>,
    u_idx: Vec<usize>,
    u_val: Vec<f64>,
}

impl LuFactor {
    /// Left-looking factorization with threshold partial pivoting: the
    /// diagonal entry is kept when it is within `diag_tol` of the column maximum.
    pub fn factor(m: &SparseMatrix, kind: Ordering, diag_tol: f64) -> Result<Self> {
        let n = m.nrows();
        if n != m.ncols() {
            return Err(Error::InvalidProblem("LU of a non-square matrix".into()));
        }
        let q = ordering(m, kind);
        let a = Csc::from_csr(m);
        const NONE: usize = usize::MAX;
        let mut pinv = vec![NONE; n];
        let mut l_ptr = Vec::with_capacity(n + 1);
        let mut u_ptr = Vec::with_capacity(n + 1);
        let cap = 4 * a.val.len() + n;
        let mut l_idx = Vec::with_capacity(cap);
        let mut l_val = Vec::with_capacity(cap);
        let mut u_idx = Vec::with_capacity(cap);
        let mut u_val = Vec::with_capacity(cap);
        let mut x = vec![0.0; n];
        let mut mark = vec![NONE; n];
        let mut xi = vec![0usize; n];
        let mut dfs_stack = vec![0usize; n];
        let mut dfs_pos = vec![0usize; n];
        for k in 0..n {
            l_ptr.push(l_idx.len());
            u_ptr.push(u_idx.len());
            let col = q[k];
            // reach of column `col` in the graph of the current L
            let mut top = n;
            for p in a.ptr[col]..a.ptr[col + 1] {
                let start = a.idx[p];
                if mark[start] == k {
                    continue;
                }
                let mut head = 0usize;
                dfs_stack[0] = start;
                while head != usize::MAX {
                    let j = dfs_stack[head];
                    let jnew = pinv[j];
                    if mark[j] != k {
                        mark[j] = k;
                        dfs_pos[head] = if jnew == NONE { 0 } else { l_ptr[jnew] + 1 };
                    }
                    let end = if jnew == NONE { 0 } else { l_ptr_end(&l_ptr, l_idx.len(), jnew) };
                    let mut done = true;
                    let mut pp = dfs_pos[head];
                    while jnew != NONE && pp < end {
                        let i = l_idx[pp];
                        pp += 1;
                        if mark[i] != k {
                            dfs_pos[head] = pp;
                            head += 1;
                            dfs_stack[head] = i;
                            done = false;
                            break;
                        }
                    }
                    if done {
                        top -= 1;
                        xi[top] = j;
                        head = head.wrapping_sub(1);
                    }
                }
            }
            for p in a.ptr[col]..a.ptr[col + 1] {
                x[a.idx[p]] = a.val[p];
            }
            for &j in &xi[top..n] {
                let jnew = pinv[j];
                if jnew == NONE {
                    continue;
                }
                let xj = x[j];
                for p in l_ptr[jnew] + 1..l_ptr_end(&l_ptr, l_idx.len(), jnew) {
                    x[l_idx[p]] -= l_val[p] * xj;
                }
            }
            let mut ipiv = NONE;
            let mut amax = -1.0f64;
            for &i in &xi[top..n] {
                if pinv[i] == NONE {
                    if x[i].abs() > amax {
                        amax = x[i].abs();
                        ipiv = i;
                    }
                } else {
                    u_idx.push(pinv[i]);
                    u_val.push(x[i]);
                }
            }
            if ipiv == NONE || !(amax > 0.0) {
                return Err(Error::Singular { column: col });
            }
            if pinv[col] == NONE && mark[col] == k && x[col].abs() >= diag_tol * amax {
                ipiv = col;
            }
            let pivot = x[ipiv];
            u_idx.push(k);
            u_val.push(pivot);
            pinv[ipiv] = k;
            l_idx.push(ipiv);
            l_val.push(1.0);
            for &i in &xi[top..n] {
                if pinv[i] == NONE {
                    l_idx.push(i);
                    l_val.push(x[i] / pivot);
                }
                x[i] = 0.0;
            }
        }
        l_ptr.push(l_idx.len());
        u_ptr.push(u_idx.len());
        for i in l_idx.iter_mut() {
            *i = pinv[*i];
        }
        Ok(Self { n, q, pinv, l_ptr, l_idx, l_val, u_ptr, u_idx, u_val })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.l_val.len() + self.u_val.len()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = vec![0.0; n];
        for i in 0..n {
            y[self.pinv[i]] = b[i];
        }
        for j in 0..n {
            let yj = y[j];
            for p in self.l_ptr[j] + 1..self.l_ptr[j + 1] {
                y[self.l_idx[p]] -= self.l_val[p] * yj;
            }
        }
        for j in (0..n).rev() {
            let last = self.u_ptr[j + 1] - 1;
            y[j] /= self.u_val[last];
            let yj = y[j];
            for p in self.u_ptr[j]..last {
                y[self.u_idx[p]] -= self.u_val[p] * yj;
            }
        }
        let mut x = vec![0.0; n];
        for k in 0..n {
            x[self.q[k]] = y[k];
        }
        x
    }
}

fn l_ptr_end(l_ptr: &[usize], len: usize, j: usize) -> usize {
    if j + 1 < l_ptr.len() {
        l_ptr[j + 1]
    } else {
        len
    }
}

/// Direct solve of a general square system.
pub fn lu_solve(m: &SparseMatrix, b: &[f64]) -> Result<(Vec<f64>, SolveReport)> {
    let start = Instant::now();
    let factor = LuFactor::factor(m, Ordering::default(), 0.1)?;
    let x = factor.solve(b);
    let residual = relative_residual(m, &x, b);
    Ok((x, SolveReport { iterations: 0, residual, wall_time: start.elapsed() }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_laplacian(n: usize) -> SparseMatrix {
        let id = |i: usize, j: usize| i * n + j;
        let mut t = Vec::new();
        for i in 0..n {
            for j in 0..n {
                t.push((id(i, j), id(i, j), 4.0));
                if i > 0 {
                    t.push((id(i, j), id(i - 1, j), -1.0));
                }
                if i + 1 < n {
                    t.push((id(i, j), id(i + 1, j), -1.0));
                }
                if j > 0 {
                    t.push((id(i, j), id(i, j - 1), -1.0));
                }
                if j + 1 < n {
                    t.push((id(i, j), id(i, j + 1), -1.0));
                }
            }
        }
        SparseMatrix::from_triplets(n * n, n * n, &t)
    }

    #[test]
    fn triplets_sum_duplicates() {
        let m = SparseMatrix::from_triplets(2, 2, &[(0, 1, 1.0), (0, 1, 2.0), (1, 0, 3.0)]);
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.get(0, 1), 3.0);
        assert_eq!(m.get(1, 1), 0.0);
    }

    #[test]
    fn orderings_are_permutations() {
        let m = grid_laplacian(30);
        for kind in [Ordering::Natural, Ordering::ReverseCuthillMcKee, Ordering::NestedDissection] {
            let mut p = ordering(&m, kind);
            p.sort_unstable();
            assert_eq!(p, (0..900).collect::<Vec<_>>());
        }
    }

    #[test]
    fn nested_dissection_reduces_fill() {
        let m = grid_laplacian(40);
        let nd = CholeskyFactor::factor(&m, Ordering::NestedDissection).unwrap().nnz();
        let rcm = CholeskyFactor::factor(&m, Ordering::ReverseCuthillMcKee).unwrap().nnz();
        assert!(nd < rcm, "nd {nd} rcm {rcm}");
    }

    #[test]
    fn cholesky_small_examples() {
        let (x, _) = cholesky_solve(&SparseMatrix::identity(3), &[1., 2., 3.]).unwrap();
        assert_eq!(x, vec![1., 2., 3.]);
        let m = SparseMatrix::from_dense(&[vec![2., 1.], vec![1., 2.]]);
        let (x, rep) = cholesky_solve(&m, &[3., 3.]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
        assert!(rep.residual < 1e-15);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let m = SparseMatrix::from_dense(&[vec![1., 2.], vec![2., 1.]]);
        assert!(matches!(cholesky_solve(&m, &[1., 1.]), Err(Error::NotSpd { .. })));
    }

    #[test]
    fn grid_solvers_agree() {
        let m = grid_laplacian(25);
        let b: Vec<f64> = (0..625).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let (x1, r1) = cholesky_solve(&m, &b).unwrap();
        let (x2, r2) = cg_solve(&m, &b, 1e-12, 2000, Preconditioner::Jacobi).unwrap();
        let (x3, r3) = lu_solve(&m, &b).unwrap();
        assert!(r1.residual < 1e-12 && r2.residual <= 1e-12 && r3.residual < 1e-12);
        for i in 0..625 {
            assert!((x1[i] - x2[i]).abs() < 1e-8);
            assert!((x1[i] - x3[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn cg_identity_and_diagonal() {
        let (_, rep) = cg_solve(&SparseMatrix::identity(4), &[1., 2., 3., 4.], 1e-12, 10, Preconditioner::None).unwrap();
        assert_eq!(rep.iterations, 1);
        let d = SparseMatrix::from_triplets(3, 3, &[(0, 0, 2.0), (1, 1, 5.0), (2, 2, 9.0)]);
        let (x, rep) = cg_solve(&d, &[2., 5., 9.], 1e-12, 10, Preconditioner::Jacobi).unwrap();
        assert_eq!(rep.iterations, 1);
        assert!(x.iter().all(|v| (v - 1.0).abs() < 1e-14));
    }

    #[test]
    fn cg_reports_no_convergence() {
        let m = grid_laplacian(20);
        let b = vec![1.0; 400];
        assert!(matches!(cg_solve(&m, &b, 1e-14, 3, Preconditioner::None), Err(Error::NoConvergence { .. })));
    }

    #[test]
    fn lu_permutation_matrix() {
        let m = SparseMatrix::from_dense(&[vec![0., 1., 0.], vec![0., 0., 1.], vec![1., 0., 0.]]);
        let (x, _) = lu_solve(&m, &[1., 2., 3.]).unwrap();
        assert_eq!(x, vec![3., 1., 2.]);
    }

    #[test]
    fn lu_detects_singular() {
        let m = SparseMatrix::from_dense(&[vec![1., 2.], vec![2., 4.]]);
        assert!(matches!(lu_solve(&m, &[1., 1.]), Err(Error::Singular { .. })));
    }

    #[test]
    fn symmetry_defect() {
        let mut m = SparseMatrix::from_dense(&[vec![2., 1.], vec![1.5, 2.]]);
        assert!((m.symmetry_defect() - 0.25).abs() < 1e-15);
        assert!(!m.mark_symmetric(1e-12));
        let mut s = grid_laplacian(5);
        assert!(s.mark_symmetric(1e-12));
    }
}
