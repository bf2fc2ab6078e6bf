//! Linear bound propagation over input boxes.
//!
//! Bounds on each layer's pre-activations are obtained by propagating a linear
//! objective backward through the network, replacing every unstable ReLU by a
//! pair of linear functions that sandwich it (the usual triangle relaxation
//! with an adaptive lower slope). Stable ReLUs pass through exactly.

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::error::{Error, Result};
use crate::geometry::{DomainBox, Halfspace, LinearRegion};
use crate::net::{argmax, MlpNetwork};

/// Certified per-neuron bounds over the box `center ± radius`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    pub center: Vec<f64>,
    pub radius: Vec<f64>,
    /// One entry per layer: hidden pre-activations first, logits last.
    pub lower: Vec<Array1<f64>>,
    pub upper: Vec<Array1<f64>>,
}

impl BoxBounds {
    pub fn logit_lower(&self) -> &Array1<f64> {
        &self.lower[self.lower.len() - 1]
    }

    pub fn logit_upper(&self) -> &Array1<f64> {
        &self.upper[self.upper.len() - 1]
    }

    /// Sign-stability of each hidden gate: `Some(true)` always active,
    /// `Some(false)` always inactive, `None` unstable.
    pub fn gate_stability(&self) -> Vec<Option<bool>> {
        let hidden = self.lower.len() - 1;
        let mut out = Vec::new();
        for k in 0..hidden {
            for (&l, &u) in self.lower[k].iter().zip(self.upper[k].iter()) {
                out.push(if l >= 0.0 {
                    Some(true)
                } else if u < 0.0 {
                    Some(false)
                } else {
                    None
                });
            }
        }
        out
    }
}

/// Linear relaxation of one ReLU given its pre-activation bounds:
/// `lo_slope * z <= ReLU(z) <= up_slope * z + up_offset` on `[l, u]`.
#[derive(Debug, Clone, Copy)]
struct Relax {
    lo_slope: f64,
    up_slope: f64,
    up_offset: f64,
}

fn relax(l: f64, u: f64) -> Relax {
    if l >= 0.0 {
        Relax {
            lo_slope: 1.0,
            up_slope: 1.0,
            up_offset: 0.0,
        }
    } else if u <= 0.0 {
        Relax {
            lo_slope: 0.0,
            up_slope: 0.0,
            up_offset: 0.0,
        }
    } else {
        let s = u / (u - l);
        Relax {
            lo_slope: if u > -l { 1.0 } else { 0.0 },
            up_slope: s,
            up_offset: -s * l,
        }
    }
}

/// Bounds on `coeffs · z_k` where `z_k` is the pre-activation of layer `k`,
/// given relaxations for all earlier hidden layers.
fn backward(
    net: &MlpNetwork,
    k: usize,
    coeffs: &Array2<f64>,
    relaxations: &[Vec<Relax>],
    center: &[f64],
    radius: &[f64],
) -> (Array1<f64>, Array1<f64>) {
    let layers = net.layers();
    let rows = coeffs.nrows();
    // Upper and lower bound coefficients, tracked separately.
    let mut a_up = coeffs.dot(&layers[k].weight);
    let mut a_lo = a_up.clone();
    let mut c_up = coeffs.dot(&layers[k].bias);
    let mut c_lo = c_up.clone();
    for j in (0..k).rev() {
        let rel = &relaxations[j];
        // Replace a_j = ReLU(z_j) with its linear bounds.
        for r in 0..rows {
            for (i, ri) in rel.iter().enumerate() {
                let w = a_up[[r, i]];
                if w >= 0.0 {
                    a_up[[r, i]] = w * ri.up_slope;
                    c_up[r] += w * ri.up_offset;
                } else {
                    a_up[[r, i]] = w * ri.lo_slope;
                }
                let w = a_lo[[r, i]];
                if w >= 0.0 {
                    a_lo[[r, i]] = w * ri.lo_slope;
                } else {
                    a_lo[[r, i]] = w * ri.up_slope;
                    c_lo[r] += w * ri.up_offset;
                }
            }
        }
        c_up += &a_up.dot(&layers[j].bias);
        c_lo += &a_lo.dot(&layers[j].bias);
        a_up = a_up.dot(&layers[j].weight);
        a_lo = a_lo.dot(&layers[j].weight);
    }
    let x = ArrayView1::from(center);
    let r = ArrayView1::from(radius);
    let up = a_up.dot(&x) + c_up + a_up.mapv(f64::abs).dot(&r);
    let lo = a_lo.dot(&x) + c_lo - a_lo.mapv(f64::abs).dot(&r);
    (lo, up)
}

fn check_box(net: &MlpNetwork, center: &[f64], radius: &[f64]) -> Result<()> {
    if center.len() != net.input_dim() || radius.len() != net.input_dim() {
        return Err(Error::shape("box dimension differs from the network input"));
    }
    if radius.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(Error::InvalidParameter("radius must be finite and non-negative".into()));
    }
    if center.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("box center".into()));
    }
    Ok(())
}

fn hidden_bounds(net: &MlpNetwork, center: &[f64], radius: &[f64]) -> (Vec<Array1<f64>>, Vec<Array1<f64>>, Vec<Vec<Relax>>) {
    let n = net.layers().len();
    let mut lower = Vec::with_capacity(n);
    let mut upper = Vec::with_capacity(n);
    let mut relaxations: Vec<Vec<Relax>> = Vec::with_capacity(n - 1);
    for k in 0..n - 1 {
        let eye = Array2::eye(net.layers()[k].out_dim());
        let (lo, up) = backward(net, k, &eye, &relaxations, center, radius);
        relaxations.push(lo.iter().zip(up.iter()).map(|(&l, &u)| relax(l, u)).collect());
        lower.push(lo);
        upper.push(up);
    }
    (lower, upper, relaxations)
}

/// Sound bounds on every pre-activation over `center ± radius` (per coordinate).
pub fn preactivation_bounds(net: &MlpNetwork, center: &[f64], radius: &[f64]) -> Result<BoxBounds> {
    check_box(net, center, radius)?;
    let n = net.layers().len();
    let (mut lower, mut upper, relaxations) = hidden_bounds(net, center, radius);
    let eye = Array2::eye(net.output_dim());
    let (lo, up) = backward(net, n - 1, &eye, &relaxations, center, radius);
    lower.push(lo);
    upper.push(up);
    Ok(BoxBounds {
        center: center.to_vec(),
        radius: radius.to_vec(),
        lower,
        upper,
    })
}

/// Certified lower bounds of `logit_y - logit_l` for every `l != y`.
pub fn margin_lower_bounds(net: &MlpNetwork, center: &[f64], radius: &[f64], y: usize) -> Result<Vec<f64>> {
    check_box(net, center, radius)?;
    let l = net.output_dim();
    if y >= l {
        return Err(Error::InvalidParameter("label out of range".into()));
    }
    let n = net.layers().len();
    let (_, _, relaxations) = hidden_bounds(net, center, radius);
    let mut coeffs = Array2::zeros((l - 1, l));
    for (r, k) in (0..l).filter(|&k| k != y).enumerate() {
        coeffs[[r, y]] = 1.0;
        coeffs[[r, k]] = -1.0;
    }
    let (lo, _) = backward(net, n - 1, &coeffs, &relaxations, center, radius);
    Ok(lo.to_vec())
}

fn certified(net: &MlpNetwork, x: &[f64], y: usize, rho: f64) -> Result<bool> {
    let radius = vec![rho; x.len()];
    Ok(margin_lower_bounds(net, x, &radius, y)?.iter().all(|&m| m > 0.0))
}

/// Largest symmetric radius (up to relative tolerance `tol`) over which the
/// label `y` at `x` is certified, searched in `[0, domain.diameter()]`.
pub fn robust_radius(net: &MlpNetwork, x: &[f64], y: usize, domain: &DomainBox, tol: f64) -> Result<f64> {
    if !(tol > 0.0 && tol < 1.0) {
        return Err(Error::InvalidParameter("tolerance must lie in (0, 1)".into()));
    }
    let logits = net.forward(x)?;
    if argmax(&logits) != y {
        return Err(Error::InvalidParameter("point is not classified with the given label".into()));
    }
    if !certified(net, x, y, 0.0)? {
        return Ok(0.0);
    }
    let mut hi = domain.diameter();
    if certified(net, x, y, hi)? {
        return Ok(hi);
    }
    let mut lo = 0.0;
    while hi - lo > tol * hi {
        let mid = 0.5 * (lo + hi);
        if certified(net, x, y, mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Mask of gates whose sign at `x` holds over the whole box `x ± radius`.
pub fn stable_gate_mask(net: &MlpNetwork, x: &[f64], radius: f64) -> Result<Vec<bool>> {
    let bounds = preactivation_bounds(net, x, &vec![radius; x.len()])?;
    let pattern = net.activation_pattern(x)?;
    Ok(bounds
        .gate_stability()
        .iter()
        .zip(pattern.signs())
        .map(|(s, &sign)| *s == Some(sign))
        .collect())
}

/// The region of `x` keeping only constraints of gates that are sign-stable
/// over `x ± radius`. Always a superset of the exact region.
pub fn relaxed_region(net: &MlpNetwork, x: &[f64], radius: f64, domain: &DomainBox) -> Result<LinearRegion> {
    let mask = stable_gate_mask(net, x, radius)?;
    let pattern = net.activation_pattern(x)?;
    let pa = net.pattern_affine(&pattern)?;
    let mut constraints = Vec::new();
    for (g, (&keep, &on)) in mask.iter().zip(pattern.signs()).enumerate() {
        if !keep {
            continue;
        }
        let normal = pa.gate_normals.index_axis(Axis(0), g);
        let offset = pa.gate_offsets[g];
        constraints.push(if on {
            Halfspace::new(normal.iter().map(|v| -v).collect(), offset)
        } else {
            Halfspace::new(normal.to_vec(), -offset)
        });
    }
    LinearRegion::new(constraints, x.to_vec(), domain.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{region_of, sample_region};
    use crate::net::tests::clipped_identity;
    use crate::net::AffineLayer;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_net(widths: &[usize], seed: u64) -> MlpNetwork {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .map(|w| {
                let weight = Array2::from_shape_fn((w[1], w[0]), |_| rng.random_range(-1.0..1.0));
                let bias = Array1::from_shape_fn(w[1], |_| rng.random_range(-0.5..0.5));
                AffineLayer::new(weight, bias).unwrap()
            })
            .collect();
        MlpNetwork::new(layers).unwrap()
    }

    #[test]
    fn zero_radius_is_exact() {
        let net = random_net(&[3, 5, 4, 2], 1);
        let x = [0.2, -0.4, 0.7];
        let b = preactivation_bounds(&net, &x, &[0.0; 3]).unwrap();
        let exact = net.preactivations(&x).unwrap();
        for k in 0..exact.len() {
            for i in 0..exact[k].len() {
                assert!((b.lower[k][i] - exact[k][i]).abs() < 1e-12);
                assert!((b.upper[k][i] - exact[k][i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_layer_is_interval_exact() {
        let layer = AffineLayer::new(array![[1.0, -2.0], [0.5, 0.0]], array![0.1, -0.3]).unwrap();
        let net = MlpNetwork::new(vec![layer]).unwrap();
        let b = preactivation_bounds(&net, &[1.0, 1.0], &[0.5, 0.25]).unwrap();
        assert_eq!(b.logit_lower().to_vec(), vec![1.0 - 2.0 + 0.1 - 0.5 - 0.5, 0.5 - 0.3 - 0.25]);
        assert_eq!(b.logit_upper().to_vec(), vec![1.0 - 2.0 + 0.1 + 0.5 + 0.5, 0.5 - 0.3 + 0.25]);
    }

    #[test]
    fn bounds_contain_samples() {
        let net = random_net(&[2, 8, 8, 3], 4);
        let c = [0.3, -0.2];
        let r = [0.4, 0.6];
        let b = preactivation_bounds(&net, &c, &r).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..2000 {
            let x: Vec<f64> = (0..2).map(|i| c[i] + rng.random_range(-r[i]..=r[i])).collect();
            for (k, z) in net.preactivations(&x).unwrap().iter().enumerate() {
                for i in 0..z.len() {
                    assert!(z[i] >= b.lower[k][i] - 1e-9 && z[i] <= b.upper[k][i] + 1e-9);
                }
            }
        }
    }

    #[test]
    fn linear_radius() {
        let layer = AffineLayer::new(array![[1.0, 0.0], [-1.0, 0.0]], array![0.0, 0.0]).unwrap();
        let net = MlpNetwork::new(vec![layer]).unwrap();
        let domain = DomainBox::new(vec![-3.0, -3.0], vec![3.0, 3.0]).unwrap();
        let rho = robust_radius(&net, &[1.0, 0.0], 0, &domain, 1e-3).unwrap();
        assert!(rho <= 1.0 && rho >= 1.0 - 2e-3, "{rho}");
        assert_eq!(robust_radius(&net, &[0.0, 0.0], 0, &domain, 1e-3).unwrap(), 0.0);
        assert!(robust_radius(&net, &[1.0, 0.0], 1, &domain, 1e-3).is_err());
    }

    #[test]
    fn relaxed_region_extremes() {
        let net = clipped_identity();
        let domain = DomainBox::unit(2);
        let x = [0.9, 0.2];
        let exact = region_of(&net, &x, &domain).unwrap();
        let r0 = relaxed_region(&net, &x, 0.0, &domain).unwrap();
        assert_eq!(r0.constraints(), exact.constraints());
        let wide = relaxed_region(&net, &x, 10.0, &domain).unwrap();
        assert!(wide.is_empty());
        // S(x) inside S'
        let mid = relaxed_region(&net, &x, 0.35, &domain).unwrap();
        assert_eq!(mid.len(), 1);
        for p in sample_region(&exact, 200, 1).unwrap() {
            assert!(mid.contains(&p, 1e-9));
        }
    }
}
