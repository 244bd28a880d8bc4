//! Dense strictly convex QP by the Goldfarb–Idnani dual active-set method.
//!
//! ```text
//! minimize    ½ xᵀ H x + gᵀ x
//! subject to  A x + b >= 0
//! ```
//!
//! The method starts from the unconstrained minimizer and adds violated
//! constraints one at a time, keeping the dual iterate feasible. It keeps
//! `J = L⁻ᵀ Q` and the upper-triangular `R` with `Jᵀ N = [R; 0]` for the
//! active constraint normals `N`, updated by Givens rotations.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpError {
    NotPositiveDefinite,
    Infeasible,
    IterationLimit,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// One multiplier per constraint row, zero for inactive rows.
    pub multipliers: DVector<f64>,
    pub active: Vec<usize>,
    pub iterations: usize,
}

/// Inequality rows stored row-major: `a[i * n .. (i + 1) * n]`.
#[derive(Debug, Clone, Default)]
pub struct Constraints {
    n: usize,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl Constraints {
    pub fn new(n: usize) -> Self {
        Constraints {
            n,
            a: Vec::new(),
            b: Vec::new(),
        }
    }

    pub fn push(&mut self, row: &[f64], b: f64) {
        assert_eq!(row.len(), self.n);
        self.a.extend_from_slice(row);
        self.b.push(b);
    }

    /// Adds a row given as sparse `(column, coefficient)` pairs.
    pub fn push_sparse(&mut self, entries: &[(usize, f64)], b: f64) {
        let start = self.a.len();
        self.a.resize(start + self.n, 0.0);
        for &(c, v) in entries {
            self.a[start + c] += v;
        }
        self.b.push(b);
    }

    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.a[i * self.n..(i + 1) * self.n]
    }

    pub fn offset(&self, i: usize) -> f64 {
        self.b[i]
    }

    pub fn residual(&self, i: usize, x: &[f64]) -> f64 {
        dot(self.row(i), x) + self.b[i]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const VIOLATION_TOL: f64 = 1e-10;

struct Factors {
    n: usize,
    /// column-major n×n
    j: Vec<f64>,
    /// column-major n×n, upper triangular in the leading q×q block
    r: Vec<f64>,
    q: usize,
}

impl Factors {
    fn jcol(&self, c: usize) -> &[f64] {
        &self.j[c * self.n..(c + 1) * self.n]
    }

    fn rot_j(&mut self, a: usize, b: usize, c: f64, s: f64) {
        let n = self.n;
        for k in 0..n {
            let ja = self.j[a * n + k];
            let jb = self.j[b * n + k];
            self.j[a * n + k] = c * ja + s * jb;
            self.j[b * n + k] = -s * ja + c * jb;
        }
    }

    fn r_at(&self, row: usize, col: usize) -> f64 {
        self.r[col * self.n + row]
    }

    fn r_set(&mut self, row: usize, col: usize, v: f64) {
        self.r[col * self.n + row] = v;
    }

    /// `d = Jᵀ np`
    fn project(&self, np: &[f64], d: &mut [f64]) {
        for (c, dc) in d.iter_mut().enumerate() {
            *dc = dot(self.jcol(c), np);
        }
    }

    /// Appends a constraint with `d = Jᵀ np`; returns false if dependent.
    fn add(&mut self, d: &mut [f64]) -> bool {
        let n = self.n;
        let q = self.q;
        for j in (q + 1..n).rev() {
            let (a, b) = (d[j - 1], d[j]);
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            d[j - 1] = h;
            d[j] = 0.0;
            self.rot_j(j - 1, j, c, s);
        }
        if d[q].abs() <= f64::EPSILON * d.iter().fold(1.0f64, |m, v| m.max(v.abs())) {
            return false;
        }
        for row in 0..=q {
            self.r_set(row, q, d[row]);
        }
        self.q += 1;
        true
    }

    /// Removes active position `l` and restores triangularity.
    fn remove(&mut self, l: usize) {
        let q = self.q;
        for col in l..q - 1 {
            for row in 0..q {
                let v = self.r_at(row, col + 1);
                self.r_set(row, col, v);
            }
        }
        for row in 0..q {
            self.r_set(row, q - 1, 0.0);
        }
        self.q -= 1;
        let q = self.q;
        for j in l..q {
            let (a, b) = (self.r_at(j, j), self.r_at(j + 1, j));
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            for col in j..q {
                let rj = self.r_at(j, col);
                let rj1 = self.r_at(j + 1, col);
                self.r_set(j, col, c * rj + s * rj1);
                self.r_set(j + 1, col, -s * rj + c * rj1);
            }
            self.r_set(j + 1, j, 0.0);
            self.rot_j(j, j + 1, c, s);
        }
    }

    /// Solves `R[0..q,0..q] r = d[0..q]`.
    fn back_substitute(&self, d: &[f64], r: &mut [f64]) {
        for i in (0..self.q).rev() {
            let mut acc = d[i];
            for k in i + 1..self.q {
                acc -= self.r_at(i, k) * r[k];
            }
            r[i] = acc / self.r_at(i, i);
        }
    }
}

pub fn solve_qp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    cons: &Constraints,
) -> Result<QpSolution, QpError> {
    let n = g.len();
    assert_eq!(h.nrows(), n);
    assert_eq!(cons.n, n);
    let m = cons.len();

    let chol = h.clone().cholesky().ok_or(QpError::NotPositiveDefinite)?;
    let mut x = -chol.solve(g);

    // Unit-norm rows; violations are distances in x.
    let norms: Vec<f64> = (0..m)
        .map(|i| {
            let nrm = cons.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if nrm > 0.0 {
                nrm
            } else {
                1.0
            }
        })
        .collect();

    let l_inv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or(QpError::NotPositiveDefinite)?;
    let jmat = l_inv.transpose();
    let mut f = Factors {
        n,
        j: jmat.as_slice().to_vec(),
        r: vec![0.0; n * n],
        q: 0,
    };

    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut is_active = vec![false; m];
    let mut d = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut r = vec![0.0; n];
    let mut np = vec![0.0; n];
    let max_iter = 10 * (n + m) + 50;
    let mut iterations = 0;

    loop {
        // most violated inactive constraint
        let mut p = None;
        let mut worst = -VIOLATION_TOL;
        for i in 0..m {
            if is_active[i] {
                continue;
            }
            let s = cons.residual(i, x.as_slice()) / norms[i];
            if s < worst {
                worst = s;
                p = Some(i);
            }
        }
        let Some(p) = p else { break };
        for (k, v) in np.iter_mut().enumerate() {
            *v = cons.row(p)[k] / norms[p];
        }
        let mut u_plus = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(QpError::IterationLimit);
            }
            let s_p = cons.residual(p, x.as_slice()) / norms[p];
            f.project(&np, &mut d);
            let q = f.q;
            z.iter_mut().for_each(|v| *v = 0.0);
            for c in q..n {
                let dc = d[c];
                if dc != 0.0 {
                    for (zk, jk) in z.iter_mut().zip(f.jcol(c)) {
                        *zk += jk * dc;
                    }
                }
            }
            f.back_substitute(&d, &mut r);

            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for k in 0..q {
                if r[k] > 0.0 {
                    let ratio = u[k] / r[k];
                    if ratio < t1 {
                        t1 = ratio;
                        drop = Some(k);
                    }
                }
            }
            let zn = dot(&z, &np);
            let znorm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            let t2 = if znorm > 1e-14 && zn > 0.0 {
                -s_p / zn
            } else {
                f64::INFINITY
            };
            if t1.is_infinite() && t2.is_infinite() {
                return Err(QpError::Infeasible);
            }
            if t2.is_infinite() {
                for k in 0..q {
                    u[k] -= t1 * r[k];
                }
                u_plus += t1;
                let l = drop.expect("finite partial step has an index");
                f.remove(l);
                is_active[active[l]] = false;
                active.remove(l);
                u.remove(l);
                continue;
            }
            let t = t1.min(t2);
            for (xk, zk) in x.iter_mut().zip(&z) {
                *xk += t * zk;
            }
            for k in 0..q {
                u[k] -= t * r[k];
            }
            u_plus += t;
            if t2 <= t1 {
                if !f.add(&mut d) {
                    return Err(QpError::Infeasible);
                }
                active.push(p);
                u.push(u_plus);
                is_active[p] = true;
                break;
            }
            let l = drop.expect("partial step has an index");
            f.remove(l);
            is_active[active[l]] = false;
            active.remove(l);
            u.remove(l);
        }
    }

    let mut multipliers = DVector::zeros(m);
    for (&i, &ui) in active.iter().zip(&u) {
        multipliers[i] = ui / norms[i];
    }
    Ok(QpSolution {
        x,
        multipliers,
        active,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Oracle: enumerate active sets, solve the KKT system of each, keep
    /// the best primal-feasible point with non-negative multipliers.
    fn brute_force(h: &DMatrix<f64>, g: &DVector<f64>, c: &Constraints) -> Option<DVector<f64>> {
        let n = g.len();
        let m = c.len();
        let mut best: Option<(f64, DVector<f64>)> = None;
        for mask in 0u32..(1 << m) {
            let act: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
            if act.len() > n {
                continue;
            }
            let k = n + act.len();
            let mut kkt = DMatrix::zeros(k, k);
            let mut rhs = DVector::zeros(k);
            kkt.view_mut((0, 0), (n, n)).copy_from(h);
            for i in 0..n {
                rhs[i] = -g[i];
            }
            for (a, &row) in act.iter().enumerate() {
                for j in 0..n {
                    kkt[(j, n + a)] = -c.row(row)[j];
                    kkt[(n + a, j)] = c.row(row)[j];
                }
                rhs[n + a] = -c.offset(row);
            }
            let Some(sol) = kkt.lu().solve(&rhs) else {
                continue;
            };
            let x = sol.rows(0, n).into_owned();
            if (0..act.len()).any(|a| sol[n + a] < -1e-9) {
                continue;
            }
            if (0..m).any(|i| c.residual(i, x.as_slice()) < -1e-9) {
                continue;
            }
            let obj = 0.5 * x.dot(&(h * &x)) + g.dot(&x);
            if best.as_ref().is_none_or(|(b, _)| obj < *b) {
                best = Some((obj, x));
            }
        }
        best.map(|(_, x)| x)
    }

    fn random_problem(
        rng: &mut ChaCha8Rng,
        n: usize,
        m: usize,
    ) -> (DMatrix<f64>, DVector<f64>, Constraints) {
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let h = &a * a.transpose() + DMatrix::identity(n, n) * 0.1;
        let g = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
        let mut c = Constraints::new(n);
        // keep the origin strictly feasible so the problem is feasible
        for _ in 0..m {
            let row: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            c.push(&row, rng.gen_range(0.1..1.0));
        }
        (h, g, c)
    }

    #[test]
    fn unconstrained_minimizer() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        let g = DVector::from_row_slice(&[-2.0, -4.0]);
        let sol = solve_qp(&h, &g, &Constraints::new(2)).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-12 && (sol.x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_active_bound() {
        // min (x-2)^2 s.t. 1 - x >= 0
        let h = DMatrix::from_element(1, 1, 2.0);
        let g = DVector::from_element(1, -4.0);
        let mut c = Constraints::new(1);
        c.push(&[-1.0], 1.0);
        let sol = solve_qp(&h, &g, &c).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-12);
        assert!((sol.multipliers[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn detects_infeasibility() {
        let h = DMatrix::identity(1, 1);
        let g = DVector::zeros(1);
        let mut c = Constraints::new(1);
        c.push(&[1.0], -2.0); // x >= 2
        c.push(&[-1.0], 1.0); // x <= 1
        assert_eq!(solve_qp(&h, &g, &c).unwrap_err(), QpError::Infeasible);
    }

    #[test]
    fn matches_active_set_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..300 {
            let n = 1 + trial % 4;
            let m = 1 + trial % 7;
            let (h, g, c) = random_problem(&mut rng, n, m);
            let sol = solve_qp(&h, &g, &c).unwrap();
            let oracle = brute_force(&h, &g, &c).expect("feasible by construction");
            assert!(
                (&sol.x - &oracle).amax() < 1e-7,
                "trial {trial}: {} vs {}",
                sol.x,
                oracle
            );
            // KKT: stationarity with the returned multipliers
            let mut grad = &h * &sol.x + &g;
            for i in 0..c.len() {
                for j in 0..n {
                    grad[j] -= sol.multipliers[i] * c.row(i)[j];
                }
                assert!(sol.multipliers[i] >= -1e-12);
            }
            assert!(grad.amax() < 1e-7);
        }
    }

    #[test]
    fn degenerate_duplicate_rows() {
        let h = DMatrix::identity(2, 2);
        let g = DVector::from_row_slice(&[-3.0, -3.0]);
        let mut c = Constraints::new(2);
        for _ in 0..3 {
            c.push(&[-1.0, -1.0], 2.0); // x + y <= 2
        }
        let sol = solve_qp(&h, &g, &c).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-10 && (sol.x[1] - 1.0).abs() < 1e-10);
    }
}
