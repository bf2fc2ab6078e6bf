//! Linear regions of piecewise-linear models.
//!
//! Fixing the sign of every ReLU gate at an anchor point yields one half-space
//! per gate; their intersection is the polytope on which the model is a single
//! affine map. All regions are clipped to a bounded [`DomainBox`] so every LP
//! posed over them has a finite optimum.

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linprog::{Constraint, Sense, Simplex};
use crate::net::{argmax, MlpNetwork};
use crate::par::{self, Execution};

/// Tolerance for the anchor's own membership in its region.
pub const ANCHOR_TOL: f64 = 1e-9;

/// `normal · x <= bound`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Halfspace {
    pub normal: Vec<f64>,
    pub bound: f64,
}

impl Halfspace {
    pub fn new(normal: Vec<f64>, bound: f64) -> Self {
        Self { normal, bound }
    }

    /// `bound - normal · x`; non-negative inside.
    pub fn slack(&self, x: &[f64]) -> f64 {
        self.bound - dot(&self.normal, x)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Axis-aligned bounding box of the feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl DomainBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::shape("domain box bounds must be nonempty and equally long"));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l.is_finite() && u.is_finite() && l <= u)) {
            return Err(Error::InvalidParameter("domain box needs finite lo <= hi".into()));
        }
        Ok(Self { lower, upper })
    }

    /// `[0, 1]^dim`, the natural box for pixel inputs.
    pub fn unit(dim: usize) -> Self {
        Self {
            lower: vec![0.0; dim],
            upper: vec![1.0; dim],
        }
    }

    /// Per-dimension data range padded by `pad` of its width on each side.
    /// Constant dimensions get a width of one before padding.
    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a [f64]>, pad: f64) -> Result<Self> {
        let mut it = points.into_iter();
        let first = it.next().ok_or_else(|| Error::InvalidParameter("no points".into()))?;
        let mut lower = first.to_vec();
        let mut upper = first.to_vec();
        for p in it {
            if p.len() != lower.len() {
                return Err(Error::shape("points of differing dimension"));
            }
            for (j, &v) in p.iter().enumerate() {
                lower[j] = lower[j].min(v);
                upper[j] = upper[j].max(v);
            }
        }
        for j in 0..lower.len() {
            let width = upper[j] - lower[j];
            let width = if width > 0.0 { width } else { 1.0 };
            lower[j] -= pad * width;
            upper[j] += pad * width;
        }
        Self::new(lower, upper)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *v >= l - tol && *v <= u + tol)
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    pub fn half_widths(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (u - l)).collect()
    }

    /// Euclidean length of the main diagonal.
    pub fn diameter(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| (u - l) * (u - l))
            .sum::<f64>()
            .sqrt()
    }

    pub(crate) fn bounds(&self) -> Vec<(f64, f64)> {
        self.lower.iter().copied().zip(self.upper.iter().copied()).collect()
    }
}

/// Affine form of every gate's pre-activation and of the logits around a point.
#[derive(Debug, Clone)]
pub struct Linearization {
    /// Row `g`: gradient of gate `g`'s pre-activation.
    pub gate_normals: Array2<f64>,
    pub gate_offsets: Array1<f64>,
    /// Exact pre-activation of each gate at the point (decides orientation).
    pub gate_values: Vec<f64>,
    pub output: RegionAffineMap,
}

/// A continuous piecewise-linear classifier over the feature space.
pub trait PiecewiseLinear: Sync {
    fn feature_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn gate_count(&self) -> usize;
    fn logits(&self, z: &[f64]) -> Result<Vec<f64>>;
    fn linearize(&self, z: &[f64]) -> Result<Linearization>;

    fn predict(&self, z: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(z)?))
    }
}

impl PiecewiseLinear for MlpNetwork {
    fn feature_dim(&self) -> usize {
        self.input_dim()
    }

    fn num_classes(&self) -> usize {
        self.output_dim()
    }

    fn gate_count(&self) -> usize {
        MlpNetwork::gate_count(self)
    }

    fn logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.forward(z)
    }

    fn linearize(&self, z: &[f64]) -> Result<Linearization> {
        let pre = self.preactivations(z)?;
        let gate_values: Vec<f64> = pre[..pre.len() - 1].iter().flat_map(|a| a.iter().copied()).collect();
        if gate_values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pre-activation".into()));
        }
        let pattern = self.activation_pattern(z)?;
        let pa = self.pattern_affine(&pattern)?;
        Ok(Linearization {
            gate_normals: pa.gate_normals,
            gate_offsets: pa.gate_offsets,
            gate_values,
            output: RegionAffineMap {
                weight: pa.output_weight,
                bias: pa.output_bias,
            },
        })
    }
}

/// `x -> Wx + v`, the model's logits restricted to one region.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionAffineMap {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl RegionAffineMap {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (self.weight.dot(&ArrayView1::from(x)) + &self.bias).to_vec()
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }
}

/// The polytope `{x : a_i · x <= b_i}` around an anchor, clipped to a box.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRegion {
    constraints: Vec<Halfspace>,
    anchor: Vec<f64>,
    domain: DomainBox,
}

impl LinearRegion {
    pub fn new(constraints: Vec<Halfspace>, anchor: Vec<f64>, domain: DomainBox) -> Result<Self> {
        if anchor.len() != domain.dim() {
            return Err(Error::shape("anchor and domain box differ in dimension"));
        }
        for (i, h) in constraints.iter().enumerate() {
            if h.normal.len() != anchor.len() {
                return Err(Error::shape(format!("constraint {i} has wrong dimension")));
            }
            if h.slack(&anchor) < -ANCHOR_TOL * (1.0 + h.bound.abs()) {
                return Err(Error::InvalidParameter(format!(
                    "anchor violates constraint {i} by {:e}",
                    -h.slack(&anchor)
                )));
            }
        }
        Ok(Self {
            constraints,
            anchor,
            domain,
        })
    }

    pub fn constraints(&self) -> &[Halfspace] {
        &self.constraints
    }

    /// N, the number of half-spaces (excluding the box).
    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn anchor(&self) -> &[f64] {
        &self.anchor
    }

    pub fn domain(&self) -> &DomainBox {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.anchor.len()
    }

    /// Membership in the half-spaces and the box, up to `tol`.
    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        self.domain.contains(x, tol)
            && self
                .constraints
                .iter()
                .all(|h| h.slack(x) >= -tol * (1.0 + h.bound.abs()))
    }

    /// Adds half-spaces; the anchor must satisfy them.
    pub fn intersect(mut self, extra: Vec<Halfspace>) -> Result<Self> {
        let mut all = std::mem::take(&mut self.constraints);
        all.extend(extra);
        Self::new(all, self.anchor, self.domain)
    }

    pub(crate) fn lp_constraints(&self) -> Vec<Constraint> {
        self.constraints
            .iter()
            .map(|h| Constraint::le(h.normal.clone(), h.bound))
            .collect()
    }
}

/// Orient each gate's affine pre-activation by its sign at the anchor.
///
/// Active gates (pre-activation >= 0, including exactly 0) contribute
/// `-(n·x + c) <= 0`; inactive gates contribute `n·x + c <= 0`.
pub fn region_of<M: PiecewiseLinear + ?Sized>(model: &M, anchor: &[f64], domain: &DomainBox) -> Result<LinearRegion> {
    if !domain.contains(anchor, ANCHOR_TOL) {
        return Err(Error::InvalidParameter("anchor lies outside the domain box".into()));
    }
    let lin = model.linearize(anchor)?;
    region_from_linearization(&lin, anchor, domain)
}

pub(crate) fn region_from_linearization(lin: &Linearization, anchor: &[f64], domain: &DomainBox) -> Result<LinearRegion> {
    let mut constraints = Vec::with_capacity(lin.gate_values.len());
    let mut on_boundary = 0usize;
    for (g, &value) in lin.gate_values.iter().enumerate() {
        let normal = lin.gate_normals.row(g);
        let offset = lin.gate_offsets[g];
        if value == 0.0 {
            on_boundary += 1;
        }
        if value >= 0.0 {
            constraints.push(Halfspace::new(normal.iter().map(|v| -v).collect(), offset));
        } else {
            constraints.push(Halfspace::new(normal.to_vec(), -offset));
        }
    }
    if on_boundary > 0 {
        log::warn!("anchor lies on {on_boundary} gate boundaries; treating them as active");
    }
    LinearRegion::new(constraints, anchor.to_vec(), domain.clone())
}

/// The affine logit map valid on `region`.
pub fn region_affine_map<M: PiecewiseLinear + ?Sized>(model: &M, region: &LinearRegion) -> Result<RegionAffineMap> {
    Ok(model.linearize(region.anchor())?.output)
}

/// Solves several linear objectives over one region from a shared basis.
pub struct RegionLp {
    simplex: Simplex,
}

impl RegionLp {
    pub fn new(region: &LinearRegion) -> Result<Self> {
        let simplex = Simplex::new(region.dim(), &region.lp_constraints(), &region.domain().bounds())?
            .ok_or_else(|| Error::EmptyRegion("region has no feasible point inside the domain box".into()))?;
        Ok(Self { simplex })
    }

    /// `max w·x + c` over the region; returns the value and the maximizer.
    pub fn maximize(&mut self, w: &[f64], c: f64) -> Result<(f64, Vec<f64>)> {
        let sol = self.simplex.optimize(w, Sense::Maximize)?;
        match sol.status {
            crate::linprog::LpStatus::Optimal => Ok((sol.objective + c, sol.x)),
            // Every variable is boxed, so anything else is a solver fault.
            other => Err(Error::Solver(format!("bounded LP reported {other:?}"))),
        }
    }
}

/// `max w·x + c` over `region ∩ domain box`.
pub fn max_affine_over_region(region: &LinearRegion, w: &[f64], c: f64) -> Result<f64> {
    if w.len() != region.dim() {
        return Err(Error::shape("objective dimension differs from region"));
    }
    Ok(RegionLp::new(region)?.maximize(w, c)?.0)
}

const HIT_AND_RUN_THIN: usize = 3;
const MAX_DEGENERATE_DIRECTIONS: usize = 1000;

/// Hit-and-run samples from the region (clipped to its box), started at the anchor.
pub fn sample_region(region: &LinearRegion, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return Ok(out);
    }
    let d = region.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = region.anchor().to_vec();
    let mut dir = vec![0.0; d];
    let mut failures = 0usize;
    let mut steps = 0usize;
    while out.len() < n {
        for v in dir.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        dir.iter_mut().for_each(|v| *v /= norm);

        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for h in region.constraints() {
            let rate = dot(&h.normal, &dir);
            let slack = h.slack(&x).max(0.0);
            if rate > 1e-14 {
                hi = hi.min(slack / rate);
            } else if rate < -1e-14 {
                lo = lo.max(slack / rate);
            }
        }
        let dom = region.domain();
        for j in 0..d {
            if dir[j] > 1e-14 {
                hi = hi.min((dom.upper[j] - x[j]).max(0.0) / dir[j]);
                lo = lo.max((dom.lower[j] - x[j]).min(0.0) / dir[j]);
            } else if dir[j] < -1e-14 {
                hi = hi.min((dom.lower[j] - x[j]).min(0.0) / dir[j]);
                lo = lo.max((dom.upper[j] - x[j]).max(0.0) / dir[j]);
            }
        }
        if !(hi - lo > 1e-12) {
            failures += 1;
            if failures > MAX_DEGENERATE_DIRECTIONS {
                return Err(Error::Sampling(format!(
                    "{failures} consecutive directions left no room to move; region looks lower-dimensional"
                )));
            }
            continue;
        }
        // Stay a hair inside so round-off never lands outside.
        let shrink = 1e-9 * (hi - lo);
        let t = rng.random_range((lo + shrink)..(hi - shrink));
        let candidate: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + t * b).collect();
        if !region.contains(&candidate, 1e-12) {
            failures += 1;
            continue;
        }
        failures = 0;
        x = candidate;
        steps += 1;
        if steps % HIT_AND_RUN_THIN == 0 {
            out.push(x.clone());
        }
    }
    Ok(out)
}

/// Indices of `points` lying inside the region (half-spaces and box).
pub fn region_purity(region: &LinearRegion, points: &[Vec<f64>], exec: Execution) -> Vec<usize> {
    let inside = par::map(exec, points, |p| p.len() == region.dim() && region.contains(p, ANCHOR_TOL));
    inside
        .into_iter()
        .enumerate()
        .filter_map(|(i, ok)| ok.then_some(i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::tests::clipped_identity;

    fn unit_box() -> DomainBox {
        DomainBox::unit(2)
    }

    #[test]
    fn regions_of_clipped_identity() {
        let net = clipped_identity();
        let r = region_of(&net, &[1.0, 1.0], &unit_box()).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r.constraints()[0], Halfspace::new(vec![-1.0, -0.0], -0.5));
        assert_eq!(r.constraints()[1], Halfspace::new(vec![-0.0, -1.0], -0.5));
        let r = region_of(&net, &[0.0, 0.0], &unit_box()).unwrap();
        assert_eq!(r.constraints()[0], Halfspace::new(vec![1.0, 0.0], 0.5));
        assert_eq!(r.constraints()[1], Halfspace::new(vec![0.0, 1.0], 0.5));
    }

    #[test]
    fn affine_maps_of_clipped_identity() {
        let net = clipped_identity();
        let r = region_of(&net, &[1.0, 1.0], &unit_box()).unwrap();
        let m = region_affine_map(&net, &r).unwrap();
        assert_eq!(m.weight, Array2::<f64>::eye(2));
        assert_eq!(m.bias.to_vec(), vec![-0.5, -0.5]);
        let r = region_of(&net, &[0.0, 0.0], &unit_box()).unwrap();
        let m = region_affine_map(&net, &r).unwrap();
        assert!(m.weight.iter().all(|v| *v == 0.0));
        assert!(m.bias.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn max_over_quadrant() {
        let r = LinearRegion::new(
            vec![Halfspace::new(vec![-1.0, 0.0], -0.5), Halfspace::new(vec![0.0, -1.0], -0.5)],
            vec![1.0, 1.0],
            unit_box(),
        )
        .unwrap();
        assert!((max_affine_over_region(&r, &[1.0, 1.0], 0.0).unwrap() - 2.0).abs() < 1e-9);
        assert!((max_affine_over_region(&r, &[-1.0, 0.0], 0.0).unwrap() + 0.5).abs() < 1e-9);
    }

    #[test]
    fn empty_region_is_reported() {
        // Anchor check is bypassed by building the region around a point that
        // satisfies the half-spaces but lies outside the box.
        let r = LinearRegion {
            constraints: vec![Halfspace::new(vec![-1.0, 0.0], -2.0)],
            anchor: vec![3.0, 0.0],
            domain: unit_box(),
        };
        assert!(matches!(max_affine_over_region(&r, &[1.0, 0.0], 0.0), Err(Error::EmptyRegion(_))));
    }

    #[test]
    fn sampling_edge_cases() {
        let r = LinearRegion::new(
            vec![Halfspace::new(vec![-1.0, 0.0], -0.5), Halfspace::new(vec![0.0, -1.0], -0.5)],
            vec![0.5, 0.5],
            unit_box(),
        )
        .unwrap();
        assert!(sample_region(&r, 0, 1).unwrap().is_empty());
        let pts = sample_region(&r, 100, 1).unwrap();
        assert_eq!(pts.len(), 100);
        assert!(pts.iter().all(|p| r.contains(p, 0.0)));
        // corner anchor on two boundaries
        assert_eq!(pts, sample_region(&r, 100, 1).unwrap());
    }

    #[test]
    fn degenerate_region_fails_sampling() {
        let r = LinearRegion::new(
            vec![Halfspace::new(vec![1.0, 0.0], 0.5), Halfspace::new(vec![-1.0, 0.0], -0.5)],
            vec![0.5, 0.5],
            unit_box(),
        )
        .unwrap();
        assert!(matches!(sample_region(&r, 10, 3), Err(Error::Sampling(_))));
    }

    #[test]
    fn purity_membership() {
        let r = LinearRegion::new(vec![Halfspace::new(vec![1.0, 0.0], 0.5)], vec![0.2, 0.2], unit_box()).unwrap();
        let pts = vec![vec![0.2, 0.2], vec![1.5, 0.0], vec![0.5, 0.9]];
        assert_eq!(region_purity(&r, &pts, Execution::Sequential), vec![0, 2]);
        assert_eq!(region_purity(&r, &pts[..1], Execution::Parallel), vec![0]);
    }

    #[test]
    fn domain_box_from_points() {
        let pts = [vec![0.0, 1.0], vec![1.0, 1.0]];
        let b = DomainBox::from_points(pts.iter().map(|p| p.as_slice()), 0.05).unwrap();
        assert_eq!(b.lower, vec![-0.05, 0.95]);
        assert_eq!(b.upper, vec![1.05, 1.05]);
    }

    #[test]
    fn anchor_outside_box_rejected() {
        let net = clipped_identity();
        assert!(region_of(&net, &[2.0, 0.0], &unit_box()).is_err());
    }
}
