//! Dense two-phase simplex for small and medium linear programs.
//!
//! Variables may carry arbitrary (possibly infinite) bounds; finite bounds are
//! handled implicitly by a bounded-variable ratio test instead of extra rows.
//! Pricing uses Dantzig's rule and falls back to Bland's rule once a run of
//! degenerate pivots suggests cycling.
//!
//! [`Simplex`] keeps the phase-one basis around so that several objectives
//! over the same feasible set are solved from a warm start.

use crate::error::{Error, Result};

pub const FEASIBILITY_TOL: f64 = 1e-7;
pub const OPTIMALITY_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-9;
const DEGENERATE_STREAK_FOR_BLAND: usize = 50;
const MAX_REFACTORS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Eq,
    Ge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub coeffs: Vec<f64>,
    pub relation: Relation,
    pub rhs: f64,
}

impl Constraint {
    pub fn new(coeffs: Vec<f64>, relation: Relation, rhs: f64) -> Self {
        Self {
            coeffs,
            relation,
            rhs,
        }
    }

    pub fn le(coeffs: Vec<f64>, rhs: f64) -> Self {
        Self::new(coeffs, Relation::Le, rhs)
    }

    pub fn ge(coeffs: Vec<f64>, rhs: f64) -> Self {
        Self::new(coeffs, Relation::Ge, rhs)
    }

    pub fn eq(coeffs: Vec<f64>, rhs: f64) -> Self {
        Self::new(coeffs, Relation::Eq, rhs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpProblem {
    pub objective: Vec<f64>,
    pub sense: Sense,
    pub constraints: Vec<Constraint>,
    /// Per-variable `[lo, hi]`; infinities allowed.
    pub bounds: Vec<(f64, f64)>,
}

impl LpProblem {
    /// A problem with all variables non-negative.
    pub fn new(objective: Vec<f64>, sense: Sense) -> Self {
        let n = objective.len();
        Self {
            objective,
            sense,
            constraints: Vec::new(),
            bounds: vec![(0.0, f64::INFINITY); n],
        }
    }

    pub fn with_constraint(mut self, c: Constraint) -> Self {
        self.constraints.push(c);
        self
    }

    pub fn with_bounds(mut self, bounds: Vec<(f64, f64)>) -> Self {
        self.bounds = bounds;
        self
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    /// Primal point; empty unless optimal.
    pub x: Vec<f64>,
    pub objective: f64,
    pub pivots: usize,
}

impl LpSolution {
    fn status_only(status: LpStatus, pivots: usize) -> Self {
        let objective = match status {
            LpStatus::Infeasible => f64::NAN,
            _ => f64::INFINITY,
        };
        Self {
            status,
            x: Vec::new(),
            objective,
            pivots,
        }
    }
}

/// Solve a single linear program.
pub fn solve_lp(problem: &LpProblem) -> Result<LpSolution> {
    if problem.objective.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("objective must be finite".into()));
    }
    match Simplex::new(problem.num_vars(), &problem.constraints, &problem.bounds)? {
        Some(mut s) => s.optimize(&problem.objective, problem.sense),
        None => Ok(LpSolution::status_only(LpStatus::Infeasible, 0)),
    }
}

/// How an original variable maps onto non-negative tableau columns.
#[derive(Debug, Clone, Copy)]
enum VarMap {
    /// x = lo + y
    Shift { col: usize, lo: f64 },
    /// x = hi - y
    Mirror { col: usize, hi: f64 },
    /// x = y+ - y-
    Split { pos: usize, neg: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ColKind {
    Structural,
    Slack,
    Artificial,
}

/// A feasible basis for a fixed constraint set, ready for any objective.
#[derive(Debug, Clone)]
pub struct Simplex {
    n_orig: usize,
    vars: Vec<VarMap>,
    kinds: Vec<ColKind>,
    upper: Vec<f64>,
    /// Standard-form matrix (row-scaled), kept for refactorization.
    a0: Vec<Vec<f64>>,
    b0: Vec<f64>,
    /// B^-1 A
    tab: Vec<Vec<f64>>,
    /// Values of the basic variables.
    beta: Vec<f64>,
    basis: Vec<usize>,
    in_basis: Vec<Option<usize>>,
    at_upper: Vec<bool>,
    /// Original constraints, for the final feasibility check.
    rows: Vec<Constraint>,
    pivots: usize,
}

enum StepOutcome {
    Optimal,
    Unbounded,
}

impl Simplex {
    /// Build the standard form and run phase one.
    ///
    /// Returns `Ok(None)` when the constraints are infeasible.
    pub fn new(n: usize, constraints: &[Constraint], bounds: &[(f64, f64)]) -> Result<Option<Self>> {
        if bounds.len() != n {
            return Err(Error::shape(format!(
                "{} variables but {} bounds",
                n,
                bounds.len()
            )));
        }
        for (j, &(lo, hi)) in bounds.iter().enumerate() {
            if lo.is_nan() || hi.is_nan() || lo > hi || lo == f64::INFINITY || hi == f64::NEG_INFINITY {
                return Err(Error::InvalidParameter(format!(
                    "variable {j} has invalid bounds [{lo}, {hi}]"
                )));
            }
        }
        for (i, c) in constraints.iter().enumerate() {
            if c.coeffs.len() != n {
                return Err(Error::shape(format!(
                    "constraint {} has {} coefficients, expected {}",
                    i,
                    c.coeffs.len(),
                    n
                )));
            }
            if c.coeffs.iter().any(|v| !v.is_finite()) || !c.rhs.is_finite() {
                return Err(Error::InvalidParameter(format!("constraint {i} is not finite")));
            }
        }

        let mut vars = Vec::with_capacity(n);
        let mut kinds = Vec::new();
        let mut upper = Vec::new();
        for &(lo, hi) in bounds {
            let col = kinds.len();
            if lo.is_finite() {
                vars.push(VarMap::Shift { col, lo });
                kinds.push(ColKind::Structural);
                upper.push(hi - lo);
            } else if hi.is_finite() {
                vars.push(VarMap::Mirror { col, hi });
                kinds.push(ColKind::Structural);
                upper.push(f64::INFINITY);
            } else {
                vars.push(VarMap::Split { pos: col, neg: col + 1 });
                kinds.extend([ColKind::Structural, ColKind::Structural]);
                upper.extend([f64::INFINITY, f64::INFINITY]);
            }
        }
        let n_struct = kinds.len();

        // Rows over structural columns, with rhs adjusted for shifts.
        let mut rows: Vec<(Vec<f64>, Relation, f64)> = Vec::new();
        for c in constraints {
            let mut row = vec![0.0; n_struct];
            let mut rhs = c.rhs;
            for (j, &a) in c.coeffs.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                match vars[j] {
                    VarMap::Shift { col, lo } => {
                        row[col] += a;
                        rhs -= a * lo;
                    }
                    VarMap::Mirror { col, hi } => {
                        row[col] -= a;
                        rhs -= a * hi;
                    }
                    VarMap::Split { pos, neg } => {
                        row[pos] += a;
                        row[neg] -= a;
                    }
                }
            }
            let scale = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if scale == 0.0 {
                let ok = match c.relation {
                    Relation::Le => rhs >= -FEASIBILITY_TOL,
                    Relation::Ge => rhs <= FEASIBILITY_TOL,
                    Relation::Eq => rhs.abs() <= FEASIBILITY_TOL,
                };
                if !ok {
                    return Ok(None);
                }
                continue;
            }
            row.iter_mut().for_each(|v| *v /= scale);
            rows.push((row, c.relation, rhs / scale));
        }

        let m = rows.len();
        // Slack columns.
        let mut slack_of = vec![None; m];
        for (i, (_, rel, _)) in rows.iter().enumerate() {
            if *rel != Relation::Eq {
                slack_of[i] = Some(kinds.len());
                kinds.push(ColKind::Slack);
                upper.push(f64::INFINITY);
            }
        }
        // Normalize to rhs >= 0 and decide the starting basis.
        let mut a0 = Vec::with_capacity(m);
        let mut b0 = Vec::with_capacity(m);
        let mut basis = Vec::with_capacity(m);
        let mut needs_art = Vec::new();
        for (i, (row, rel, rhs)) in rows.into_iter().enumerate() {
            let mut full = row;
            full.resize(kinds.len(), 0.0);
            if let Some(s) = slack_of[i] {
                full[s] = if rel == Relation::Le { 1.0 } else { -1.0 };
            }
            let mut rhs = rhs;
            if rhs < 0.0 {
                full.iter_mut().for_each(|v| *v = -*v);
                rhs = -rhs;
            }
            match slack_of[i] {
                Some(s) if full[s] == 1.0 => basis.push(s),
                _ => {
                    basis.push(usize::MAX);
                    needs_art.push(i);
                }
            }
            a0.push(full);
            b0.push(rhs);
        }
        for &i in &needs_art {
            let col = kinds.len();
            kinds.push(ColKind::Artificial);
            upper.push(f64::INFINITY);
            basis[i] = col;
        }
        let ncols = kinds.len();
        for row in &mut a0 {
            row.resize(ncols, 0.0);
        }
        for &i in &needs_art {
            a0[i][basis[i]] = 1.0;
        }

        let mut in_basis = vec![None; ncols];
        for (i, &c) in basis.iter().enumerate() {
            in_basis[c] = Some(i);
        }
        let mut s = Simplex {
            n_orig: n,
            vars,
            kinds,
            upper,
            tab: a0.clone(),
            beta: b0.clone(),
            a0,
            b0,
            basis,
            in_basis,
            at_upper: vec![false; ncols],
            rows: constraints.to_vec(),
            pivots: 0,
        };

        if !needs_art.is_empty() {
            let cost: Vec<f64> = s
                .kinds
                .iter()
                .map(|k| if *k == ColKind::Artificial { 1.0 } else { 0.0 })
                .collect();
            match s.run(&cost, true)? {
                StepOutcome::Optimal => {}
                StepOutcome::Unbounded => {
                    return Err(Error::Solver("phase one reported unboundedness".into()))
                }
            }
            let infeas: f64 = s
                .basis
                .iter()
                .zip(&s.beta)
                .filter(|(c, _)| s.kinds[**c] == ColKind::Artificial)
                .map(|(_, v)| v.max(0.0))
                .sum();
            let scale = 1.0 + s.b0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if infeas > FEASIBILITY_TOL * scale {
                return Ok(None);
            }
            s.expel_artificials();
            log::debug!("phase one: {} rows, {} columns, {} pivots", s.tab.len(), s.kinds.len(), s.pivots);
        }
        for (c, k) in s.kinds.iter().enumerate() {
            if *k == ColKind::Artificial {
                s.upper[c] = 0.0;
            }
        }
        Ok(Some(s))
    }

    /// Optimize `objective` over the (already feasible) constraint set.
    pub fn optimize(&mut self, objective: &[f64], sense: Sense) -> Result<LpSolution> {
        if objective.len() != self.n_orig {
            return Err(Error::shape(format!(
                "objective has {} entries, expected {}",
                objective.len(),
                self.n_orig
            )));
        }
        let sign = match sense {
            Sense::Minimize => 1.0,
            Sense::Maximize => -1.0,
        };
        let mut cost = vec![0.0; self.kinds.len()];
        for (j, &c) in objective.iter().enumerate() {
            let c = sign * c;
            match self.vars[j] {
                VarMap::Shift { col, .. } => cost[col] += c,
                VarMap::Mirror { col, .. } => cost[col] -= c,
                VarMap::Split { pos, neg } => {
                    cost[pos] += c;
                    cost[neg] -= c;
                }
            }
        }
        let start = self.pivots;
        match self.run(&cost, false)? {
            StepOutcome::Unbounded => {
                return Ok(LpSolution::status_only(LpStatus::Unbounded, self.pivots - start))
            }
            StepOutcome::Optimal => {}
        }
        log::debug!("optimized in {} pivots", self.pivots - start);
        let x = self.primal();
        self.check_feasible(&x)?;
        let value = objective.iter().zip(&x).map(|(c, v)| c * v).sum();
        Ok(LpSolution {
            status: LpStatus::Optimal,
            x,
            objective: value,
            pivots: self.pivots - start,
        })
    }

    fn col_value(&self, c: usize) -> f64 {
        match self.in_basis[c] {
            Some(r) => self.beta[r],
            None if self.at_upper[c] => self.upper[c],
            None => 0.0,
        }
    }

    fn primal(&self) -> Vec<f64> {
        self.vars
            .iter()
            .map(|v| match *v {
                VarMap::Shift { col, lo } => lo + self.col_value(col),
                VarMap::Mirror { col, hi } => hi - self.col_value(col),
                VarMap::Split { pos, neg } => self.col_value(pos) - self.col_value(neg),
            })
            .collect()
    }

    fn check_feasible(&self, x: &[f64]) -> Result<()> {
        for (i, c) in self.rows.iter().enumerate() {
            let lhs: f64 = c.coeffs.iter().zip(x).map(|(a, v)| a * v).sum();
            let mag: f64 = c.coeffs.iter().zip(x).map(|(a, v)| (a * v).abs()).sum::<f64>();
            let tol = FEASIBILITY_TOL * (1.0 + mag.max(c.rhs.abs()));
            let viol = match c.relation {
                Relation::Le => lhs - c.rhs,
                Relation::Ge => c.rhs - lhs,
                Relation::Eq => (lhs - c.rhs).abs(),
            };
            if viol > tol {
                return Err(Error::Solver(format!(
                    "solution violates constraint {i} by {viol:e}"
                )));
            }
        }
        Ok(())
    }

    fn reduced_costs(&self, cost: &[f64]) -> Vec<f64> {
        let mut d = cost.to_vec();
        for (r, &b) in self.basis.iter().enumerate() {
            let cb = cost[b];
            if cb != 0.0 {
                for (dj, t) in d.iter_mut().zip(&self.tab[r]) {
                    *dj -= cb * t;
                }
            }
        }
        d
    }

    /// Primal simplex iterations until optimality or unboundedness. After
    /// convergence the tableau is rebuilt from the original matrix and the
    /// iterations resume if accumulated error uncovered further progress.
    fn run(&mut self, cost: &[f64], phase_one: bool) -> Result<StepOutcome> {
        let max_pivots = 50 * (self.tab.len() + self.kinds.len()) + 1000;
        let mut bland = false;
        let mut degenerate_streak = 0usize;
        let mut refactors = 0;
        let mut d = self.reduced_costs(cost);
        // Devex reference weights.
        let mut weights = vec![1.0; self.kinds.len()];
        let mut local_pivots = 0usize;
        loop {
            if local_pivots > max_pivots {
                return Err(Error::Solver(format!(
                    "no convergence after {local_pivots} pivots"
                )));
            }
            let Some(j) = self.choose_entering(&d, &weights, phase_one, bland) else {
                if refactors < MAX_REFACTORS && local_pivots > 0 {
                    refactors += 1;
                    self.refactor()?;
                    self.clamp_beta();
                    d = self.reduced_costs(cost);
                    if self.choose_entering(&d, &weights, phase_one, bland).is_some() {
                        continue;
                    }
                }
                return Ok(StepOutcome::Optimal);
            };
            let increasing = !self.at_upper[j];
            let dir = if increasing { 1.0 } else { -1.0 };

            // Ratio test.
            let mut theta = self.upper[j];
            let mut leave: Option<(usize, bool)> = None; // (row, leaves at upper)
            let mut best_alpha = 0.0f64;
            for r in 0..self.tab.len() {
                let alpha = dir * self.tab[r][j];
                let (limit, to_upper) = if alpha > PIVOT_TOL {
                    ((self.beta[r].max(0.0)) / alpha, false)
                } else if alpha < -PIVOT_TOL {
                    let ub = self.upper[self.basis[r]];
                    if ub.is_infinite() {
                        continue;
                    }
                    (((ub - self.beta[r]).max(0.0)) / -alpha, true)
                } else {
                    continue;
                };
                let better = if limit < theta - 1e-12 {
                    true
                } else if limit <= theta + 1e-12 {
                    // Ties with a bound flip keep the flip; ties between rows
                    // prefer the larger pivot (or the smaller index under Bland).
                    match leave {
                        None => false,
                        Some((lr, _)) if bland => self.basis[r] < self.basis[lr],
                        Some(_) => alpha.abs() > best_alpha,
                    }
                } else {
                    false
                };
                if better {
                    theta = limit.min(theta);
                    leave = Some((r, to_upper));
                    best_alpha = alpha.abs();
                }
            }
            if theta.is_infinite() {
                return Ok(StepOutcome::Unbounded);
            }

            if theta <= 1e-12 {
                degenerate_streak += 1;
                if degenerate_streak > DEGENERATE_STREAK_FOR_BLAND {
                    bland = true;
                }
            } else {
                degenerate_streak = 0;
            }

            // Move basics along the edge.
            if theta > 0.0 {
                for r in 0..self.tab.len() {
                    let t = self.tab[r][j];
                    if t != 0.0 {
                        self.beta[r] -= dir * theta * t;
                    }
                }
            }
            match leave {
                None => {
                    // Bound flip of the entering variable.
                    self.at_upper[j] = !self.at_upper[j];
                }
                Some((r, to_upper)) => {
                    let entering_value = if increasing { theta } else { self.upper[j] - theta };
                    let old = self.basis[r];
                    self.pivot(r, j);
                    self.beta[r] = entering_value;
                    self.at_upper[old] = to_upper;
                    self.at_upper[j] = false;
                    // Update reduced costs.
                    let dj = d[j];
                    if dj != 0.0 {
                        for (dk, t) in d.iter_mut().zip(&self.tab[r]) {
                            *dk -= dj * t;
                        }
                    }
                    d[j] = 0.0;
                    let wq = weights[j];
                    for (k, (w, t)) in weights.iter_mut().zip(&self.tab[r]).enumerate() {
                        if *t != 0.0 && self.in_basis[k].is_none() {
                            *w = w.max(t * t * wq);
                        }
                    }
                    weights[old] = weights[old].max(1.0);
                    self.pivots += 1;
                    local_pivots += 1;
                }
            }
        }
    }

    fn choose_entering(&self, d: &[f64], weights: &[f64], phase_one: bool, bland: bool) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (j, &dj) in d.iter().enumerate() {
            if self.in_basis[j].is_some() {
                continue;
            }
            if !phase_one && self.kinds[j] == ColKind::Artificial {
                continue;
            }
            if self.upper[j] == 0.0 {
                continue;
            }
            let score = if self.at_upper[j] {
                if dj > OPTIMALITY_TOL {
                    dj
                } else {
                    continue;
                }
            } else if dj < -OPTIMALITY_TOL {
                -dj
            } else {
                continue;
            };
            if bland {
                return Some(j);
            }
            let score = score * score / weights[j];
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((j, score));
            }
        }
        best.map(|(j, _)| j)
    }

    fn pivot(&mut self, r: usize, j: usize) {
        let p = self.tab[r][j];
        let pivot_row: Vec<f64> = self.tab[r].iter().map(|v| v / p).collect();
        for (i, row) in self.tab.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = row[j];
            if f != 0.0 {
                for (v, pv) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
                row[j] = 0.0;
            }
        }
        self.tab[r] = pivot_row;
        self.tab[r][j] = 1.0;
        let old = self.basis[r];
        self.in_basis[old] = None;
        self.basis[r] = j;
        self.in_basis[j] = Some(r);
    }

    /// After phase one, pivot zero-valued artificials out of the basis where possible.
    fn expel_artificials(&mut self) {
        for r in 0..self.tab.len() {
            if self.kinds[self.basis[r]] != ColKind::Artificial {
                continue;
            }
            let candidate = (0..self.kinds.len()).find(|&j| {
                self.in_basis[j].is_none()
                    && self.kinds[j] != ColKind::Artificial
                    && self.tab[r][j].abs() > 1e-7
            });
            if let Some(j) = candidate {
                let value = self.col_value(j);
                let old = self.basis[r];
                self.pivot(r, j);
                // The artificial sits at (numerically) zero; shift its residue onto the row.
                self.beta[r] = value;
                self.at_upper[old] = false;
                self.at_upper[j] = false;
            }
        }
    }

    /// Rebuild `B^-1 A` and the basic values from the stored standard form.
    fn refactor(&mut self) -> Result<()> {
        let m = self.tab.len();
        let mut t = self.a0.clone();
        let mut rhs = self.b0.clone();
        for c in 0..self.kinds.len() {
            if self.in_basis[c].is_none() && self.at_upper[c] {
                let u = self.upper[c];
                for i in 0..m {
                    rhs[i] -= self.a0[i][c] * u;
                }
            }
        }
        let cols = self.basis.clone();
        let mut assigned = vec![false; m];
        let mut new_basis = vec![usize::MAX; m];
        for &c in &cols {
            let mut best = None;
            let mut best_abs = 0.0;
            for i in 0..m {
                if !assigned[i] && t[i][c].abs() > best_abs {
                    best_abs = t[i][c].abs();
                    best = Some(i);
                }
            }
            let Some(r) = best.filter(|_| best_abs > 1e-12) else {
                return Err(Error::Solver("singular basis during refactorization".into()));
            };
            assigned[r] = true;
            new_basis[r] = c;
            let p = t[r][c];
            t[r].iter_mut().for_each(|v| *v /= p);
            rhs[r] /= p;
            let pr = t[r].clone();
            let pb = rhs[r];
            for i in 0..m {
                if i == r {
                    continue;
                }
                let f = t[i][c];
                if f != 0.0 {
                    for (v, p) in t[i].iter_mut().zip(&pr) {
                        *v -= f * p;
                    }
                    t[i][c] = 0.0;
                    rhs[i] -= f * pb;
                }
            }
            t[r][c] = 1.0;
        }
        self.tab = t;
        self.beta = rhs;
        self.basis = new_basis;
        self.in_basis = vec![None; self.kinds.len()];
        for (i, &c) in self.basis.iter().enumerate() {
            self.in_basis[c] = Some(i);
        }
        Ok(())
    }

    /// Clamp bound violations of basic variables left over from round-off.
    fn clamp_beta(&mut self) {
        let mut worst = 0.0f64;
        for r in 0..self.beta.len() {
            let ub = self.upper[self.basis[r]];
            let v = self.beta[r];
            if v < 0.0 {
                worst = worst.max(-v);
                self.beta[r] = 0.0;
            } else if v > ub {
                worst = worst.max(v - ub);
                self.beta[r] = ub;
            }
        }
        if worst > FEASIBILITY_TOL {
            log::debug!("clamped basic values drifting {worst:e} outside their bounds");
        }
    }
}
