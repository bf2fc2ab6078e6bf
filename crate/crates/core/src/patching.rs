//! Patch networks: localized logit corrections for a base model.
//!
//! A patch combines a *confusion* map `m(x) = Cx + d`, which pushes the logits
//! toward a target label, with one or more *support* gadgets that equal 1 on
//! a polytope and fall to 0 within a `1/λ` band outside it. The combination
//!
//! ```text
//! c(x) = ReLU(m(x) + H·σ(x) - H) - ReLU(-m(x) + H·σ(x) - H)
//! ```
//!
//! equals `m(x)` where the gate `σ` (the max over supports) is 1 and is exactly
//! zero where `σ` is 0, as long as `|m| <= H`. Every piece is built from ReLUs,
//! so a [`PatchedModel`] is still piecewise linear and can be patched again.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{
    dot, region_from_linearization, DomainBox, Halfspace, LinearRegion, Linearization, PiecewiseLinear,
    RegionAffineMap, RegionLp,
};
use crate::linprog::{solve_lp, Constraint, LpProblem, LpStatus, Sense};
use crate::net::{relu, ActivationPattern, FeatureMap, MlpNetwork};
use crate::par::{self, Execution};

pub const DEFAULT_LAMBDA: f64 = 1e4;
pub const MAX_LAMBDA: f64 = 1e8;
pub const DEFAULT_MARGIN: f64 = 1e-3;

/// `ReLU(λt + 1) - ReLU(λt)`: 1 for `t >= 0`, 0 for `t <= -1/λ`, linear between.
pub fn bump(t: f64, lambda: f64) -> f64 {
    // Written as a clamp so the plateau is exactly 1.0; identical to the ReLU
    // difference in exact arithmetic.
    (lambda * t + 1.0).clamp(0.0, 1.0)
}

/// Which gates of a pattern region contribute a constraint.
#[derive(Debug, Clone, PartialEq)]
pub enum GateSelection {
    All,
    Subset(Vec<bool>),
}

impl GateSelection {
    fn includes(&self, g: usize) -> bool {
        match self {
            GateSelection::All => true,
            GateSelection::Subset(mask) => mask[g],
        }
    }
}

/// The polytope a support network is built on.
#[derive(Debug, Clone)]
pub enum SupportRegion {
    /// Explicit half-spaces.
    Halfspaces(Vec<Halfspace>),
    /// The linear region of `net` selected by `pattern`, one constraint per
    /// selected gate. Stored implicitly: slacks are the gate pre-activations
    /// evaluated with the pattern's masks, which costs one forward pass
    /// instead of a dense constraint matrix.
    Pattern {
        net: Arc<MlpNetwork>,
        pattern: ActivationPattern,
        gates: GateSelection,
    },
}

/// Support gadget: `ReLU(Σ_i bump(b_i - a_i·x, λ) - N + 1)`.
#[derive(Debug, Clone)]
pub struct SupportNetwork {
    region: SupportRegion,
    lambda: f64,
    count: usize,
}

impl SupportNetwork {
    pub fn from_halfspaces(constraints: Vec<Halfspace>, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        let count = constraints.len();
        Ok(Self {
            region: SupportRegion::Halfspaces(constraints),
            lambda,
            count,
        })
    }

    pub fn from_region(region: &LinearRegion, lambda: f64) -> Result<Self> {
        Self::from_halfspaces(region.constraints().to_vec(), lambda)
    }

    pub fn from_pattern(
        net: Arc<MlpNetwork>,
        pattern: ActivationPattern,
        gates: GateSelection,
        lambda: f64,
    ) -> Result<Self> {
        check_lambda(lambda)?;
        net.check_pattern(&pattern)?;
        let count = match &gates {
            GateSelection::All => pattern.len(),
            GateSelection::Subset(mask) => {
                if mask.len() != pattern.len() {
                    return Err(Error::shape("gate mask length differs from pattern"));
                }
                mask.iter().filter(|b| **b).count()
            }
        };
        Ok(Self {
            region: SupportRegion::Pattern { net, pattern, gates },
            lambda,
            count,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        check_lambda(lambda)?;
        self.lambda = lambda;
        Ok(())
    }

    /// N, the number of constraints.
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn region(&self) -> &SupportRegion {
        &self.region
    }

    /// Support value at `x`, in `[0, 1]`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.eval_with(x, None)
    }

    /// As [`eval`](Self::eval); `first` may carry the first-layer
    /// pre-activations of the pattern network at `x`.
    pub(crate) fn eval_with(&self, x: &[f64], first: Option<&Array1<f64>>) -> f64 {
        let mut total = 0.0;
        let mut dead = false;
        let lambda = self.lambda;
        match &self.region {
            SupportRegion::Halfspaces(hs) => {
                for h in hs {
                    let b = bump(h.slack(x), lambda);
                    if b == 0.0 {
                        return 0.0;
                    }
                    total += b;
                }
            }
            SupportRegion::Pattern { net, pattern, gates } => {
                let signs = pattern.signs();
                net.masked_preactivations(x, pattern, first, |row, z| {
                    for (i, &v) in z.iter().enumerate() {
                        let g = row + i;
                        if !gates.includes(g) {
                            continue;
                        }
                        let slack = if signs[g] { v } else { -v };
                        let b = bump(slack, lambda);
                        if b == 0.0 {
                            dead = true;
                            return true;
                        }
                        total += b;
                    }
                    false
                });
            }
        }
        if dead {
            return 0.0;
        }
        relu(total - self.count as f64 + 1.0)
    }

    /// Materialize the constraints as `(a_i, b_i)` with `a_i · x <= b_i`.
    pub fn halfspaces(&self) -> Result<Vec<Halfspace>> {
        match &self.region {
            SupportRegion::Halfspaces(hs) => Ok(hs.clone()),
            SupportRegion::Pattern { net, pattern, gates } => {
                let pa = net.pattern_affine(pattern)?;
                let mut out = Vec::with_capacity(self.count);
                for (g, &on) in pattern.signs().iter().enumerate() {
                    if !gates.includes(g) {
                        continue;
                    }
                    out.push(orient(pa.gate_normals.row(g), pa.gate_offsets[g], on));
                }
                Ok(out)
            }
        }
    }

    /// The most violated constraint at `x` when it alone forces the support
    /// to zero (`bump = 0`), as an explicit half-space `slack_i <= -1/λ`
    /// on which the support vanishes identically.
    fn zero_certificate(&self, x: &[f64], first: Option<&Array1<f64>>) -> Result<Option<Halfspace>> {
        let lambda = self.lambda;
        match &self.region {
            SupportRegion::Halfspaces(hs) => {
                let best = hs
                    .iter()
                    .map(|h| (h, h.slack(x)))
                    .filter(|(_, s)| bump(*s, lambda) == 0.0)
                    .min_by(|a, b| a.1.total_cmp(&b.1));
                Ok(best.map(|(h, _)| Halfspace::new(h.normal.iter().map(|v| -v).collect(), -h.bound - 1.0 / lambda)))
            }
            SupportRegion::Pattern { net, pattern, gates } => {
                let signs = pattern.signs();
                let mut best: Option<(usize, f64)> = None;
                net.masked_preactivations(x, pattern, first, |row, z| {
                    for (i, &v) in z.iter().enumerate() {
                        let g = row + i;
                        if !gates.includes(g) {
                            continue;
                        }
                        let slack = if signs[g] { v } else { -v };
                        if bump(slack, lambda) == 0.0 && best.is_none_or(|(_, s)| slack < s) {
                            best = Some((g, slack));
                        }
                    }
                    // Earlier layers have cheaper closed forms; stop at the first hit.
                    best.is_some()
                });
                let Some((g, _)) = best else {
                    return Ok(None);
                };
                let (normal, offset) = net.gate_affine(pattern, g)?;
                let h = orient(ArrayView1::from(&normal[..]), offset, signs[g]);
                Ok(Some(Halfspace::new(
                    h.normal.iter().map(|v| -v).collect(),
                    -h.bound - 1.0 / lambda,
                )))
            }
        }
    }
}

fn orient(normal: ArrayView1<f64>, offset: f64, active: bool) -> Halfspace {
    if active {
        Halfspace::new(normal.iter().map(|v| -v).collect(), offset)
    } else {
        Halfspace::new(normal.to_vec(), -offset)
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::InvalidParameter(format!("lambda must be positive, got {lambda}")));
    }
    Ok(())
}

/// Support value at `x`.
pub fn support_eval(support: &SupportNetwork, x: &[f64]) -> f64 {
    support.eval(x)
}

/// Affine logit offset `m(x) = Cx + d` steering predictions to `target`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionNetwork {
    /// `None` for a constant shift (C = 0).
    pub weight: Option<Array2<f64>>,
    pub bias: Array1<f64>,
    pub target: usize,
    pub source_label: usize,
}

impl ConfusionNetwork {
    pub fn constant(bias: Vec<f64>, target: usize, source_label: usize) -> Result<Self> {
        Self::new(None, Array1::from(bias), target, source_label)
    }

    pub fn new(weight: Option<Array2<f64>>, bias: Array1<f64>, target: usize, source_label: usize) -> Result<Self> {
        if target == source_label {
            return Err(Error::InvalidParameter("target label must differ from the source label".into()));
        }
        if target >= bias.len() || source_label >= bias.len() {
            return Err(Error::InvalidParameter("label out of range".into()));
        }
        if let Some(w) = &weight {
            if w.nrows() != bias.len() {
                return Err(Error::shape("confusion weight rows differ from bias length"));
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("confusion weight".into()));
            }
        }
        if bias.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("confusion bias".into()));
        }
        Ok(Self {
            weight,
            bias,
            target,
            source_label,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match &self.weight {
            None => self.bias.to_vec(),
            Some(w) => (w.dot(&ArrayView1::from(x)) + &self.bias).to_vec(),
        }
    }

    /// Row `k` of C (zeros when constant).
    fn row(&self, k: usize, dim: usize) -> Vec<f64> {
        match &self.weight {
            None => vec![0.0; dim],
            Some(w) => w.row(k).to_vec(),
        }
    }
}

/// How the confusion map is parameterized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfusionMode {
    /// `C = 0`: one LP per competing label plus a small LP for `d`.
    #[default]
    ConstantShift,
    /// Full `Cx + d` via a robust LP dualized over the region.
    FullAffine,
}

/// Smallest worst-case `m` over `region` such that `(g + m)_target - (g + m)_l >= margin`
/// for every `l != target` and every region point, where `g` is `map`.
pub fn optimize_confusion(
    map: &RegionAffineMap,
    region: &LinearRegion,
    source_label: usize,
    target: usize,
    margin: f64,
    mode: ConfusionMode,
) -> Result<ConfusionNetwork> {
    let l = map.num_classes();
    if target >= l || source_label >= l {
        return Err(Error::InvalidParameter("label out of range".into()));
    }
    if target == source_label {
        return Err(Error::InvalidParameter("target label must differ from the source label".into()));
    }
    if map.weight.ncols() != region.dim() {
        return Err(Error::shape("affine map and region differ in dimension"));
    }
    match mode {
        ConfusionMode::ConstantShift => constant_confusion(map, region, source_label, target, margin),
        ConfusionMode::FullAffine => affine_confusion(map, region, source_label, target, margin),
    }
}

fn constant_confusion(
    map: &RegionAffineMap,
    region: &LinearRegion,
    source_label: usize,
    target: usize,
    margin: f64,
) -> Result<ConfusionNetwork> {
    let l = map.num_classes();
    let mut lp = RegionLp::new(region)?;
    // worst[k] = max over the region of g_k - g_target
    let mut worst = vec![0.0; l];
    let wt = map.weight.row(target);
    for k in (0..l).filter(|&k| k != target) {
        let w: Vec<f64> = map.weight.row(k).iter().zip(wt.iter()).map(|(a, b)| a - b).collect();
        let (v, _) = lp.maximize(&w, map.bias[k] - map.bias[target])?;
        worst[k] = v;
    }
    // min t  s.t.  d_target - d_k >= margin + worst[k],  -t <= d_k <= t
    let n = l + 1;
    let mut objective = vec![0.0; n];
    objective[l] = 1.0;
    let mut p = LpProblem::new(objective, Sense::Minimize);
    let mut bounds = vec![(f64::NEG_INFINITY, f64::INFINITY); l];
    bounds.push((0.0, f64::INFINITY));
    p = p.with_bounds(bounds);
    for k in (0..l).filter(|&k| k != target) {
        let mut row = vec![0.0; n];
        row[target] = 1.0;
        row[k] = -1.0;
        p = p.with_constraint(Constraint::ge(row, margin + worst[k]));
    }
    for k in 0..l {
        let mut up = vec![0.0; n];
        up[k] = 1.0;
        up[l] = -1.0;
        p = p.with_constraint(Constraint::le(up, 0.0));
        let mut down = vec![0.0; n];
        down[k] = -1.0;
        down[l] = -1.0;
        p = p.with_constraint(Constraint::le(down, 0.0));
    }
    let sol = solve_lp(&p)?;
    if sol.status != LpStatus::Optimal {
        return Err(Error::Solver(format!("confusion LP returned {:?}", sol.status)));
    }
    let mut d = sol.x[..l].to_vec();
    // Repair round-off so the margin holds exactly as computed in floating point.
    for k in (0..l).filter(|&k| k != target) {
        let need = margin + worst[k];
        if d[target] - d[k] < need {
            d[k] = d[target] - need;
        }
    }
    ConfusionNetwork::constant(d, target, source_label)
}

fn affine_confusion(
    map: &RegionAffineMap,
    region: &LinearRegion,
    source_label: usize,
    target: usize,
    margin: f64,
) -> Result<ConfusionNetwork> {
    // Variables: C (l*dim, free), d (l, free), t (>= 0), then one dual block
    // (y >= 0 per half-space, p, q >= 0 per coordinate) per robust constraint.
    //
    // A robust constraint  max_{x in P} w·x <= r  with P = {Ax <= b, lo <= x <= hi}
    // holds iff some y, p, q >= 0 satisfy  A^T y + p - q = w  and
    // b·y + hi·p - lo·q <= r.
    let l = map.num_classes();
    let dim = region.dim();
    let cons = region.constraints();
    let nh = cons.len();
    let idx_c = |k: usize, j: usize| k * dim + j;
    let idx_d = |k: usize| l * dim + k;
    let idx_t = l * dim + l;
    let base_vars = idx_t + 1;
    let block = nh + 2 * dim;

    // Each robust constraint: (coefficients of C rows in w, constant part of w,
    // coefficients of (d, t) in r, constant part of r).
    struct Robust {
        c_rows: Vec<(usize, f64)>,
        w_const: Vec<f64>,
        r_vars: Vec<(usize, f64)>,
        r_const: f64,
    }
    let mut robust = Vec::new();
    for k in 0..l {
        // C_k x + d_k <= t  and  -C_k x - d_k <= t
        for s in [1.0, -1.0] {
            robust.push(Robust {
                c_rows: vec![(k, s)],
                w_const: vec![0.0; dim],
                r_vars: vec![(idx_t, 1.0), (idx_d(k), -s)],
                r_const: 0.0,
            });
        }
    }
    for k in (0..l).filter(|&k| k != target) {
        // (W_k - W_t + C_k - C_t) x <= (v_t - v_k) + (d_t - d_k) - margin
        let w_const = map
            .weight
            .row(k)
            .iter()
            .zip(map.weight.row(target).iter())
            .map(|(a, b)| a - b)
            .collect();
        robust.push(Robust {
            c_rows: vec![(k, 1.0), (target, -1.0)],
            w_const,
            r_vars: vec![(idx_d(target), 1.0), (idx_d(k), -1.0)],
            r_const: map.bias[target] - map.bias[k] - margin,
        });
    }

    let n = base_vars + robust.len() * block;
    let mut objective = vec![0.0; n];
    objective[idx_t] = 1.0;
    let mut bounds = vec![(f64::NEG_INFINITY, f64::INFINITY); idx_t];
    bounds.push((0.0, f64::INFINITY));
    bounds.resize(n, (0.0, f64::INFINITY));
    let dom = region.domain();
    let mut p = LpProblem::new(objective, Sense::Minimize).with_bounds(bounds);
    for (r, rc) in robust.iter().enumerate() {
        let off = base_vars + r * block;
        let y = |i: usize| off + i;
        let pp = |j: usize| off + nh + j;
        let qq = |j: usize| off + nh + dim + j;
        for j in 0..dim {
            let mut row = vec![0.0; n];
            for (i, h) in cons.iter().enumerate() {
                row[y(i)] = h.normal[j];
            }
            row[pp(j)] = 1.0;
            row[qq(j)] = -1.0;
            for &(k, s) in &rc.c_rows {
                row[idx_c(k, j)] -= s;
            }
            p = p.with_constraint(Constraint::eq(row, rc.w_const[j]));
        }
        let mut row = vec![0.0; n];
        for (i, h) in cons.iter().enumerate() {
            row[y(i)] = h.bound;
        }
        for j in 0..dim {
            row[pp(j)] = dom.upper[j];
            row[qq(j)] = -dom.lower[j];
        }
        for &(v, s) in &rc.r_vars {
            row[v] -= s;
        }
        p = p.with_constraint(Constraint::le(row, rc.r_const));
    }
    let sol = solve_lp(&p)?;
    match sol.status {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => return Err(Error::EmptyRegion("robust confusion LP is infeasible".into())),
        LpStatus::Unbounded => return Err(Error::Solver("robust confusion LP is unbounded".into())),
    }
    let weight = Array2::from_shape_fn((l, dim), |(k, j)| sol.x[idx_c(k, j)]);
    let bias = Array1::from_shape_fn(l, |k| sol.x[idx_d(k)]);
    ConfusionNetwork::new(Some(weight), bias, target, source_label)
}

/// Largest `|m_k(x)|` over the box, over all coordinates `k`.
pub fn compute_h(confusion: &ConfusionNetwork, domain: &DomainBox) -> f64 {
    let mid = domain.midpoint();
    let half = domain.half_widths();
    let mut h = 0.0f64;
    for k in 0..confusion.num_classes() {
        let v = match &confusion.weight {
            None => confusion.bias[k].abs(),
            Some(w) => {
                let row = w.row(k);
                let center = confusion.bias[k] + row.iter().zip(&mid).map(|(a, b)| a * b).sum::<f64>();
                let spread: f64 = row.iter().zip(&half).map(|(a, b)| a.abs() * b).sum();
                let exact = center.abs() + spread;
                // Outward rounding: the closed form and pointwise evaluation round differently.
                exact * (1.0 + 4.0 * f64::EPSILON * (domain.dim() as f64 + 1.0))
            }
        };
        h = h.max(v);
    }
    h
}

/// Confusion map gated by the max of several supports.
#[derive(Debug, Clone)]
pub struct PatchNetwork {
    confusion: ConfusionNetwork,
    supports: Vec<SupportNetwork>,
    bound: f64,
}

/// Combine a confusion map with supports and the bound `H`.
pub fn assemble_patch(
    confusion: ConfusionNetwork,
    supports: Vec<SupportNetwork>,
    bound: f64,
    domain: &DomainBox,
) -> Result<PatchNetwork> {
    if supports.is_empty() {
        return Err(Error::InvalidParameter("a patch needs at least one support".into()));
    }
    let need = compute_h(&confusion, domain);
    if !(bound.is_finite() && bound >= need) {
        return Err(Error::InvalidParameter(format!(
            "bound H = {bound} is below the domain-wide maximum {need} of |m|"
        )));
    }
    if let Some(w) = &confusion.weight {
        if w.ncols() != domain.dim() {
            return Err(Error::shape("confusion weight and domain differ in dimension"));
        }
    }
    Ok(PatchNetwork {
        confusion,
        supports,
        bound,
    })
}

impl PatchNetwork {
    pub fn confusion(&self) -> &ConfusionNetwork {
        &self.confusion
    }

    pub fn supports(&self) -> &[SupportNetwork] {
        &self.supports
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn lambda(&self) -> f64 {
        self.supports[0].lambda()
    }

    /// Set λ on every support.
    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        for s in &mut self.supports {
            s.set_lambda(lambda)?;
        }
        Ok(())
    }

    /// σ(x), the max over supports.
    pub fn gate(&self, x: &[f64]) -> f64 {
        self.gate_with(x, None)
    }

    pub(crate) fn gate_with(&self, x: &[f64], first: Option<&Array1<f64>>) -> f64 {
        let mut best = 0.0f64;
        for s in &self.supports {
            let v = s.eval_with(x, first);
            if v >= 1.0 {
                return 1.0;
            }
            best = best.max(v);
        }
        best
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.eval_with(x, None)
    }

    pub(crate) fn eval_with(&self, x: &[f64], first: Option<&Array1<f64>>) -> Vec<f64> {
        let sigma = self.gate_with(x, first);
        self.combine(&self.confusion.apply(x), sigma)
    }

    fn combine(&self, m: &[f64], sigma: f64) -> Vec<f64> {
        let h = self.bound;
        m.iter()
            .map(|&mk| relu(mk + h * sigma - h) - relu(-mk + h * sigma - h))
            .collect()
    }

    /// The patch's gates and output as affine forms around `x`.
    fn linearize(&self, x: &[f64]) -> Result<PatchLinearization> {
        let dim = x.len();
        let l = self.confusion.num_classes();
        let mut gates = Vec::new();
        let mut sigmas: Vec<Affine> = Vec::with_capacity(self.supports.len());
        for s in &self.supports {
            let lambda = s.lambda();
            let mut sum = Affine::constant(dim, 0.0);
            for hs in s.halfspaces()? {
                // slack = b - a·x
                let slack = Affine {
                    normal: hs.normal.iter().map(|v| -v).collect(),
                    offset: hs.bound,
                };
                let u1 = slack.scaled(lambda).plus_const(1.0);
                let u2 = slack.scaled(lambda);
                let v1 = u1.eval(x);
                let v2 = u2.eval(x);
                if v1 >= 0.0 {
                    sum.add_assign(&u1, 1.0);
                }
                if v2 >= 0.0 {
                    sum.add_assign(&u2, -1.0);
                }
                gates.push((u1, v1));
                gates.push((u2, v2));
            }
            let pre = sum.plus_const(1.0 - s.len() as f64);
            let v = pre.eval(x);
            gates.push((pre.clone(), v));
            sigmas.push(if v >= 0.0 { pre } else { Affine::constant(dim, 0.0) });
        }
        // Running max: acc <- acc + ReLU(σ_s - acc).
        let mut acc = sigmas[0].clone();
        for sig in &sigmas[1..] {
            let mut diff = sig.clone();
            diff.add_assign(&acc, -1.0);
            let v = diff.eval(x);
            gates.push((diff.clone(), v));
            if v >= 0.0 {
                acc.add_assign(&diff, 1.0);
            }
        }
        let h = self.bound;
        let mut out_w = Array2::zeros((l, dim));
        let mut out_b = Array1::zeros(l);
        for k in 0..l {
            let m = Affine {
                normal: self.confusion.row(k, dim),
                offset: self.confusion.bias[k],
            };
            let mut plus = m.clone();
            plus.add_assign(&acc, h);
            let plus = plus.plus_const(-h);
            let mut minus = m.scaled(-1.0);
            minus.add_assign(&acc, h);
            let minus = minus.plus_const(-h);
            let vp = plus.eval(x);
            let vm = minus.eval(x);
            let mut outk = Affine::constant(dim, 0.0);
            if vp >= 0.0 {
                outk.add_assign(&plus, 1.0);
            }
            if vm >= 0.0 {
                outk.add_assign(&minus, -1.0);
            }
            gates.push((plus, vp));
            gates.push((minus, vm));
            out_w.row_mut(k).assign(&ArrayView1::from(&outk.normal[..]));
            out_b[k] = outk.offset;
        }
        Ok(PatchLinearization {
            gates,
            out_weight: out_w,
            out_bias: out_b,
        })
    }

    /// Number of ReLU gates inside this patch.
    pub fn gate_count(&self) -> usize {
        let s = self.supports.len();
        self.supports.iter().map(|sp| 2 * sp.len() + 1).sum::<usize>() + (s - 1) + 2 * self.confusion.num_classes()
    }
}

#[derive(Debug, Clone)]
struct Affine {
    normal: Vec<f64>,
    offset: f64,
}

impl Affine {
    fn constant(dim: usize, v: f64) -> Self {
        Self {
            normal: vec![0.0; dim],
            offset: v,
        }
    }

    fn eval(&self, x: &[f64]) -> f64 {
        dot(&self.normal, x) + self.offset
    }

    fn scaled(&self, s: f64) -> Self {
        Self {
            normal: self.normal.iter().map(|v| v * s).collect(),
            offset: self.offset * s,
        }
    }

    fn plus_const(mut self, c: f64) -> Self {
        self.offset += c;
        self
    }

    fn add_assign(&mut self, other: &Affine, s: f64) {
        for (a, b) in self.normal.iter_mut().zip(&other.normal) {
            *a += s * b;
        }
        self.offset += s * other.offset;
    }
}

struct PatchLinearization {
    gates: Vec<(Affine, f64)>,
    out_weight: Array2<f64>,
    out_bias: Array1<f64>,
}

/// A base network plus patches summed onto its logits.
#[derive(Debug, Clone)]
pub struct PatchedModel {
    base: Arc<MlpNetwork>,
    feature_map: FeatureMap,
    domain: DomainBox,
    patches: Vec<PatchNetwork>,
}

impl PatchedModel {
    pub fn new(base: MlpNetwork, feature_map: FeatureMap, domain: DomainBox) -> Result<Self> {
        Self::from_shared(Arc::new(base), feature_map, domain)
    }

    pub fn from_shared(base: Arc<MlpNetwork>, feature_map: FeatureMap, domain: DomainBox) -> Result<Self> {
        if feature_map.feature_dim() != base.input_dim() {
            return Err(Error::shape(format!(
                "feature map yields {} features but the network expects {}",
                feature_map.feature_dim(),
                base.input_dim()
            )));
        }
        if domain.dim() != base.input_dim() {
            return Err(Error::shape("domain box dimension differs from the feature dimension"));
        }
        Ok(Self {
            base,
            feature_map,
            domain,
            patches: Vec::new(),
        })
    }

    pub fn base(&self) -> &MlpNetwork {
        &self.base
    }

    pub fn shared_base(&self) -> Arc<MlpNetwork> {
        Arc::clone(&self.base)
    }

    pub fn feature_map(&self) -> &FeatureMap {
        &self.feature_map
    }

    pub fn domain(&self) -> &DomainBox {
        &self.domain
    }

    pub fn patches(&self) -> &[PatchNetwork] {
        &self.patches
    }

    pub fn push_patch(&mut self, patch: PatchNetwork) -> Result<()> {
        if patch.confusion.num_classes() != self.base.output_dim() {
            return Err(Error::shape("patch output dimension differs from the model's"));
        }
        self.patches.push(patch);
        Ok(())
    }

    pub fn features(&self, raw: &[f64]) -> Result<Vec<f64>> {
        self.feature_map.apply(raw)
    }

    /// Logits for a raw input.
    pub fn forward(&self, raw: &[f64]) -> Result<Vec<f64>> {
        let z = self.features(raw)?;
        self.logits_features(&z)
    }

    pub fn predict_raw(&self, raw: &[f64]) -> Result<usize> {
        Ok(crate::net::argmax(&self.forward(raw)?))
    }

    /// Logits for a feature vector: base plus every patch.
    pub fn logits_features(&self, z: &[f64]) -> Result<Vec<f64>> {
        let pre = self.base.preactivations(z)?;
        let mut logits = pre[pre.len() - 1].to_vec();
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        let first = if pre.len() > 1 { Some(&pre[0]) } else { None };
        for patch in &self.patches {
            for (o, p) in logits.iter_mut().zip(patch.eval_with(z, first)) {
                *o += p;
            }
        }
        Ok(logits)
    }

    /// Max gate value of each patch at `z`.
    pub fn gates_at(&self, z: &[f64]) -> Result<Vec<f64>> {
        let first = self.first_layer(z)?;
        Ok(self.patches.iter().map(|p| p.gate_with(z, first.as_ref())).collect())
    }

    pub(crate) fn first_layer(&self, z: &[f64]) -> Result<Option<Array1<f64>>> {
        if self.base.layers().len() < 2 {
            return Ok(None);
        }
        if z.len() != self.base.input_dim() {
            return Err(Error::shape("feature vector has the wrong dimension"));
        }
        Ok(Some(self.base.layers()[0].apply(ArrayView1::from(z))))
    }
}

impl PiecewiseLinear for PatchedModel {
    fn feature_dim(&self) -> usize {
        self.base.input_dim()
    }

    fn num_classes(&self) -> usize {
        self.base.output_dim()
    }

    fn gate_count(&self) -> usize {
        self.base.gate_count() + self.patches.iter().map(|p| p.gate_count()).sum::<usize>()
    }

    fn logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.logits_features(z)
    }

    fn linearize(&self, z: &[f64]) -> Result<Linearization> {
        let mut lin = self.base.linearize(z)?;
        if self.patches.is_empty() {
            return Ok(lin);
        }
        let dim = z.len();
        let mut normals: Vec<f64> = lin.gate_normals.iter().copied().collect();
        let mut offsets = lin.gate_offsets.to_vec();
        for patch in &self.patches {
            let pl = patch.linearize(z)?;
            for (g, v) in pl.gates {
                normals.extend_from_slice(&g.normal);
                offsets.push(g.offset);
                lin.gate_values.push(v);
            }
            lin.output.weight += &pl.out_weight;
            lin.output.bias += &pl.out_bias;
        }
        lin.gate_normals = Array2::from_shape_vec((offsets.len(), dim), normals)
            .map_err(|e| Error::shape(e.to_string()))?;
        lin.gate_offsets = Array1::from(offsets);
        Ok(lin)
    }
}

/// A convex neighbourhood of `z` on which the patched model is one affine map,
/// with its logit map.
///
/// Starts from the base network's linear region. A patch whose every support
/// is switched off at `z` by some constraint with `bump = 0` contributes one
/// half-space per support keeping that constraint switched off; the patch is
/// identically zero there. Any other patch contributes all of its gates. The
/// result is a subset of the exact region of the patched model that still
/// contains `z`, with far fewer constraints when most patches are inactive.
pub fn local_region(model: &PatchedModel, z: &[f64]) -> Result<(LinearRegion, RegionAffineMap)> {
    let domain = model.domain();
    if !domain.contains(z, crate::geometry::ANCHOR_TOL) {
        return Err(Error::InvalidParameter("anchor lies outside the domain box".into()));
    }
    let lin = model.base.linearize(z)?;
    let mut map = lin.output.clone();
    let mut region = region_from_linearization(&lin, z, domain)?;
    if model.patches.is_empty() {
        return Ok((region, map));
    }
    let first = model.first_layer(z)?;
    let mut extra = Vec::new();
    for patch in &model.patches {
        let mut certs = Vec::with_capacity(patch.supports.len());
        for s in &patch.supports {
            match s.zero_certificate(z, first.as_ref())? {
                Some(h) => certs.push(h),
                None => break,
            }
        }
        if certs.len() == patch.supports.len() {
            extra.extend(certs);
            continue;
        }
        let pl = patch.linearize(z)?;
        for (g, v) in pl.gates {
            if v >= 0.0 {
                extra.push(Halfspace::new(g.normal.iter().map(|a| -a).collect(), g.offset));
            } else {
                extra.push(Halfspace::new(g.normal, -g.offset));
            }
        }
        map.weight += &pl.out_weight;
        map.bias += &pl.out_bias;
    }
    region = region.intersect(extra)?;
    Ok((region, map))
}

/// Draw a label uniformly from `0..classes` excluding `exclude`.
pub fn draw_target<R: Rng + ?Sized>(rng: &mut R, classes: usize, exclude: usize) -> usize {
    debug_assert!(classes >= 2);
    let k = rng.random_range(0..classes - 1);
    if k >= exclude {
        k + 1
    } else {
        k
    }
}

/// Feature vectors with their cached first-layer pre-activations.
pub struct PointCache {
    net: Arc<MlpNetwork>,
    points: Vec<Vec<f64>>,
    first: Vec<Option<Array1<f64>>>,
}

impl PointCache {
    pub fn new(net: Arc<MlpNetwork>, points: Vec<Vec<f64>>, exec: Execution) -> Result<Self> {
        for p in &points {
            if p.len() != net.input_dim() {
                return Err(Error::shape("cached point has the wrong dimension"));
            }
        }
        let first = par::map(exec, &points, |p| {
            (net.layers().len() > 1).then(|| net.layers()[0].apply(ArrayView1::from(&p[..])))
        });
        Ok(Self { net, points, first })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i]
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    fn first(&self, i: usize, support: &SupportNetwork) -> Option<&Array1<f64>> {
        match &support.region {
            SupportRegion::Pattern { net, .. } if Arc::ptr_eq(net, &self.net) => self.first[i].as_ref(),
            _ => None,
        }
    }

    /// Support value at cached point `i`.
    pub fn support_value(&self, support: &SupportNetwork, i: usize) -> f64 {
        support.eval_with(&self.points[i], self.first(i, support))
    }

    /// Patched logits at cached point `i`.
    pub fn logits(&self, model: &PatchedModel, i: usize) -> Result<Vec<f64>> {
        if !Arc::ptr_eq(&model.base, &self.net) {
            return model.logits_features(&self.points[i]);
        }
        let mut logits = model.base.forward(&self.points[i])?;
        for patch in &model.patches {
            let first = self.first[i].as_ref();
            for (o, p) in logits.iter_mut().zip(patch.eval_with(&self.points[i], first)) {
                *o += p;
            }
        }
        Ok(logits)
    }
}

/// Indices of cached points strictly inside the transition band of any support.
pub fn band_points(supports: &[SupportNetwork], cache: &PointCache, exec: Execution) -> Vec<usize> {
    let flags = par::map_range(exec, cache.len(), |i| {
        supports.iter().any(|s| {
            let v = cache.support_value(s, i);
            v > 0.0 && v < 1.0
        })
    });
    flags
        .into_iter()
        .enumerate()
        .filter_map(|(i, f)| f.then_some(i))
        .collect()
}

/// Raise λ tenfold from `start` (capped at [`MAX_LAMBDA`]) until no cached
/// point sits in a transition band. Returns the chosen λ and the points still
/// in a band at that λ.
pub fn escalate_lambda(
    supports: &mut [SupportNetwork],
    cache: &PointCache,
    start: f64,
    exec: Execution,
) -> Result<(f64, Vec<usize>)> {
    check_lambda(start)?;
    let mut lambda = start;
    loop {
        for s in supports.iter_mut() {
            s.set_lambda(lambda)?;
        }
        let band = band_points(supports, cache, exec);
        if band.is_empty() || lambda * 10.0 > MAX_LAMBDA * (1.0 + 1e-12) {
            return Ok((lambda, band));
        }
        lambda *= 10.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{region_of, sample_region};
    use crate::net::tests::clipped_identity;
    use ndarray::array;

    #[test]
    fn bump_values() {
        assert_eq!(bump(0.5, 10.0), 1.0);
        assert_eq!(bump(-1.0, 10.0), 0.0);
        assert!((bump(-0.05, 10.0) - 0.5).abs() < 1e-12);
        assert_eq!(bump(0.0, 10.0), 1.0);
        assert_eq!(bump(-0.1, 10.0), 0.0);
    }

    #[test]
    fn support_values() {
        let s = SupportNetwork::from_halfspaces(
            vec![Halfspace::new(vec![1.0, 0.0], 1.0), Halfspace::new(vec![0.0, 1.0], 1.0)],
            10.0,
        )
        .unwrap();
        assert_eq!(support_eval(&s, &[0.0, 0.0]), 1.0);
        assert_eq!(support_eval(&s, &[2.0, 0.0]), 0.0);
        assert_eq!(support_eval(&s, &[1.0, 1.0]), 1.0);
        assert!((support_eval(&s, &[1.05, 0.0]) - 0.5).abs() < 1e-12);
        assert!(SupportNetwork::from_halfspaces(vec![], 0.0).is_err());
    }

    #[test]
    fn pattern_support_matches_explicit() {
        let net = Arc::new(clipped_identity());
        let anchor = [1.0, 0.2];
        let pattern = net.activation_pattern(&anchor).unwrap();
        let region = region_of(net.as_ref(), &anchor, &DomainBox::unit(2)).unwrap();
        let explicit = SupportNetwork::from_region(&region, 10.0).unwrap();
        let implicit = SupportNetwork::from_pattern(net.clone(), pattern, GateSelection::All, 10.0).unwrap();
        for x in [[0.0, 0.0], [0.45, 0.3], [0.55, 0.55], [1.0, 0.5], [0.6, 0.49]] {
            assert!((explicit.eval(&x) - implicit.eval(&x)).abs() < 1e-12, "{x:?}");
        }
        assert_eq!(implicit.halfspaces().unwrap(), region.constraints().to_vec());
    }

    #[test]
    fn constant_confusion_examples() {
        let region = LinearRegion::new(vec![], vec![0.5, 0.5], DomainBox::unit(2)).unwrap();
        let identity = RegionAffineMap {
            weight: Array2::eye(2),
            bias: array![0.0, 0.0],
        };
        let m = optimize_confusion(&identity, &region, 0, 1, 0.01, ConfusionMode::ConstantShift).unwrap();
        assert!(m.weight.is_none());
        assert!((m.bias[0] + 0.505).abs() < 1e-9 && (m.bias[1] - 0.505).abs() < 1e-9);

        let constant = RegionAffineMap {
            weight: Array2::zeros((2, 2)),
            bias: array![5.0, 0.0],
        };
        let m = optimize_confusion(&constant, &region, 0, 1, 0.01, ConfusionMode::ConstantShift).unwrap();
        assert!((m.bias[0] + 2.505).abs() < 1e-9 && (m.bias[1] - 2.505).abs() < 1e-9);

        let flipped = RegionAffineMap {
            weight: Array2::zeros((2, 2)),
            bias: array![0.0, 5.0],
        };
        let m = optimize_confusion(&flipped, &region, 0, 1, 0.01, ConfusionMode::ConstantShift).unwrap();
        assert!(m.bias.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn confusion_rejects_bad_labels() {
        let region = LinearRegion::new(vec![], vec![0.5, 0.5], DomainBox::unit(2)).unwrap();
        let map = RegionAffineMap {
            weight: Array2::eye(2),
            bias: array![0.0, 0.0],
        };
        assert!(optimize_confusion(&map, &region, 1, 1, 0.01, ConfusionMode::ConstantShift).is_err());
        assert!(optimize_confusion(&map, &region, 0, 2, 0.01, ConfusionMode::ConstantShift).is_err());
    }

    #[test]
    fn full_affine_never_worse_than_constant() {
        let region = LinearRegion::new(
            vec![Halfspace::new(vec![1.0, 1.0], 1.5)],
            vec![0.5, 0.5],
            DomainBox::unit(2),
        )
        .unwrap();
        let map = RegionAffineMap {
            weight: array![[2.0, -1.0], [0.5, 0.5], [0.0, 1.0]],
            bias: array![0.3, 0.0, -0.2],
        };
        let c = optimize_confusion(&map, &region, 0, 2, 0.01, ConfusionMode::ConstantShift).unwrap();
        let f = optimize_confusion(&map, &region, 0, 2, 0.01, ConfusionMode::FullAffine).unwrap();
        let worst = |m: &ConfusionNetwork| {
            sample_region(&region, 300, 5)
                .unwrap()
                .iter()
                .chain(std::iter::once(&vec![0.5, 0.5]))
                .map(|x| m.apply(x).iter().fold(0.0f64, |a, v| a.max(v.abs())))
                .fold(0.0f64, f64::max)
        };
        assert!(compute_h(&f, region.domain()) >= worst(&f) - 1e-12);
        assert!(worst(&f) <= compute_h(&c, region.domain()) + 1e-7);
        for x in sample_region(&region, 300, 9).unwrap() {
            let g = map.apply(&x);
            let m = f.apply(&x);
            for k in [0, 1] {
                assert!((g[2] + m[2]) - (g[k] + m[k]) >= 0.01 - 1e-7);
            }
        }
    }

    #[test]
    fn h_examples() {
        let c = ConfusionNetwork::constant(vec![-2.5, 2.5], 1, 0).unwrap();
        assert_eq!(compute_h(&c, &DomainBox::unit(2)), 2.5);
        let c = ConfusionNetwork::new(Some(array![[1.0, 0.0], [0.0, 0.0]]), array![0.0, 0.0], 1, 0).unwrap();
        let b = DomainBox::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        assert!((compute_h(&c, &b) - 1.0).abs() < 1e-12);
    }

    fn unit_support() -> SupportNetwork {
        SupportNetwork::from_halfspaces(
            vec![Halfspace::new(vec![1.0, 0.0], 0.5), Halfspace::new(vec![0.0, 1.0], 0.5)],
            10.0,
        )
        .unwrap()
    }

    #[test]
    fn patch_combination() {
        let c = ConfusionNetwork::constant(vec![-2.0, 2.0], 1, 0).unwrap();
        let p = assemble_patch(c.clone(), vec![unit_support()], 2.0, &DomainBox::unit(2)).unwrap();
        assert_eq!(p.eval(&[0.2, 0.2]), vec![-2.0, 2.0]);
        assert_eq!(p.eval(&[0.9, 0.9]), vec![0.0, 0.0]);
        // σ = 0.5 and m = H on one coordinate -> 0.5 H
        let x = [0.55, 0.0];
        assert!((p.gate(&x) - 0.5).abs() < 1e-12);
        let v = p.eval(&x);
        assert!((v[1] - 1.0).abs() < 1e-12 && (v[0] + 1.0).abs() < 1e-12);
        assert!(assemble_patch(c.clone(), vec![unit_support()], 1.0, &DomainBox::unit(2)).is_err());
        assert!(assemble_patch(c, vec![], 2.0, &DomainBox::unit(2)).is_err());
    }

    #[test]
    fn patched_model_locality_and_linearization() {
        let net = clipped_identity();
        let mut pm = PatchedModel::new(net.clone(), FeatureMap::Identity { dim: 2 }, DomainBox::unit(2)).unwrap();
        assert_eq!(pm.forward(&[0.8, 0.3]).unwrap(), net.forward(&[0.8, 0.3]).unwrap());
        let c = ConfusionNetwork::constant(vec![-1.0, 1.0], 1, 0).unwrap();
        let patch = assemble_patch(c, vec![unit_support()], 1.0, &DomainBox::unit(2)).unwrap();
        pm.push_patch(patch).unwrap();
        assert_eq!(pm.forward(&[0.9, 0.9]).unwrap(), net.forward(&[0.9, 0.9]).unwrap());
        assert_eq!(pm.forward(&[0.1, 0.1]).unwrap(), vec![-1.0, 1.0]);
        // linearization agrees with forward around several points
        for x in [[0.1, 0.1], [0.52, 0.1], [0.9, 0.9], [0.7, 0.2]] {
            let lin = pm.linearize(&x).unwrap();
            let via = lin.output.apply(&x);
            let direct = pm.forward(&x).unwrap();
            for (a, b) in via.iter().zip(&direct) {
                assert!((a - b).abs() < 1e-9, "{x:?}: {via:?} vs {direct:?}");
            }
            assert_eq!(lin.gate_values.len(), pm.gate_count());
        }
    }

    #[test]
    fn local_region_certificates() {
        let net = clipped_identity();
        let mut pm = PatchedModel::new(net, FeatureMap::Identity { dim: 2 }, DomainBox::unit(2)).unwrap();
        let c = ConfusionNetwork::constant(vec![-1.0, 1.0], 1, 0).unwrap();
        pm.push_patch(assemble_patch(c, vec![unit_support()], 1.0, &DomainBox::unit(2)).unwrap())
            .unwrap();
        let (region, map) = local_region(&pm, &[0.9, 0.8]).unwrap();
        assert_eq!(region.len(), 3);
        for x in sample_region(&region, 200, 4).unwrap() {
            assert_eq!(pm.gates_at(&x).unwrap(), vec![0.0]);
            let direct = pm.forward(&x).unwrap();
            for (a, b) in map.apply(&x).iter().zip(&direct) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        // Inside the support the exact patch gates are used.
        let (region, map) = local_region(&pm, &[0.1, 0.1]).unwrap();
        assert!(region.len() > 3);
        for x in sample_region(&region, 200, 4).unwrap() {
            let direct = pm.forward(&x).unwrap();
            for (a, b) in map.apply(&x).iter().zip(&direct) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn target_draws_skip_excluded() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let t = draw_target(&mut rng, 4, 2);
            assert!(t < 4 && t != 2);
        }
    }

    #[test]
    fn escalation_clears_band() {
        let net = Arc::new(clipped_identity());
        let mut supports = vec![SupportNetwork::from_halfspaces(
            vec![Halfspace::new(vec![1.0, 0.0], 0.5)],
            10.0,
        )
        .unwrap()];
        let cache = PointCache::new(net, vec![vec![0.5005, 0.0], vec![0.9, 0.0]], Execution::Sequential).unwrap();
        let (lambda, band) = escalate_lambda(&mut supports, &cache, 10.0, Execution::Sequential).unwrap();
        assert!(band.is_empty());
        assert_eq!(lambda, 10000.0);
        assert_eq!(supports[0].lambda(), 10000.0);
    }
}
