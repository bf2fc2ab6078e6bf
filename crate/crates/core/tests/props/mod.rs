//! Randomized property suites with pinned seeds, shared by the property tests
//! and the acceptance report.

use ndarray::{Array1, Array2};
use patchwipe::bounds::{preactivation_bounds, relaxed_region, robust_radius};
use patchwipe::geometry::{
    max_affine_over_region, region_affine_map, region_of, sample_region, DomainBox, Halfspace,
};
use patchwipe::linprog::{solve_lp, Constraint, LpProblem, LpStatus, Sense};
use patchwipe::net::{AffineLayer, FeatureMap, MlpNetwork};
use patchwipe::patching::{
    assemble_patch, compute_h, optimize_confusion, support_eval, ConfusionMode, ConfusionNetwork, GateSelection,
    PatchedModel, SupportNetwork,
};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

pub const CASES: u32 = 200;
const SEED: [u8; 32] = *b"patchwipe-property-suites-seed-1";

fn runner() -> TestRunner {
    let config = Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::from_seed(RngAlgorithm::ChaCha, &SEED))
}

fn run<S: Strategy>(
    name: &str,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    runner().run(&strategy, test).map_err(|e| format!("{name}: {e}"))
}

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(TestCaseError::fail(format!($($fmt)+)));
        }
    };
}

fn err(e: patchwipe::Error) -> TestCaseError {
    TestCaseError::fail(e.to_string())
}

/// Random MLP `input -> hidden... -> classes`, Gaussian-ish weights.
pub fn random_net(rng: &mut ChaCha8Rng, input: usize, hidden: &[usize], classes: usize) -> MlpNetwork {
    let mut widths = vec![input];
    widths.extend_from_slice(hidden);
    widths.push(classes);
    let layers = widths
        .windows(2)
        .map(|w| {
            let scale = (2.0 / w[0] as f64).sqrt();
            let weight = Array2::from_shape_fn((w[1], w[0]), |_| scale * rng.random_range(-1.5..1.5));
            let bias = Array1::from_shape_fn(w[1], |_| rng.random_range(-0.5..0.5));
            AffineLayer::new(weight, bias).unwrap()
        })
        .collect();
    MlpNetwork::new(layers).unwrap()
}

fn random_point(rng: &mut ChaCha8Rng, domain: &DomainBox) -> Vec<f64> {
    domain
        .lower
        .iter()
        .zip(&domain.upper)
        .map(|(&lo, &hi)| rng.random_range(lo..hi))
        .collect()
}

struct Case {
    rng: ChaCha8Rng,
    net: MlpNetwork,
    domain: DomainBox,
    anchor: Vec<f64>,
}

/// Small random net and an anchor in the box `[-2, 2]^d`.
fn case_strategy() -> impl Strategy<Value = (u64, usize, Vec<usize>, usize)> {
    (
        any::<u64>(),
        1usize..=4,
        prop::collection::vec(2usize..=8, 1..=2),
        2usize..=4,
    )
}

fn build_case((seed, input, hidden, classes): (u64, usize, Vec<usize>, usize)) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = random_net(&mut rng, input, &hidden, classes);
    let domain = DomainBox::new(vec![-2.0; input], vec![2.0; input]).unwrap();
    let anchor = random_point(&mut rng, &domain);
    Case {
        rng,
        net,
        domain,
        anchor,
    }
}

/// Sampled region points share the anchor's pattern (up to gates within
/// 1e-9 of zero), the region's affine map matches `forward` within 1e-8, the
/// map is affine along segments, and the LP maximum dominates the anchor.
pub fn region_soundness() -> Result<(), String> {
    run("region soundness", case_strategy(), |params| {
        let mut c = build_case(params);
        let region = region_of(&c.net, &c.anchor, &c.domain).map_err(err)?;
        let map = region_affine_map(&c.net, &region).map_err(err)?;
        let pattern = c.net.activation_pattern(&c.anchor).map_err(err)?;
        let seed = c.rng.random();
        let samples = match sample_region(&region, 20, seed) {
            Ok(s) => s,
            // Lower-dimensional regions (a gate exactly through the anchor) have no interior.
            Err(patchwipe::Error::Sampling(_)) => return Ok(()),
            Err(e) => return Err(err(e)),
        };
        for x in &samples {
            let pre: Vec<f64> = c.net.preactivations(x).map_err(err)?.iter().flatten().copied().collect();
            for (g, (&on, &v)) in pattern.signs().iter().zip(&pre).enumerate() {
                check!((v >= 0.0) == on || v.abs() <= 1e-9, "gate {g} changed sign: {v}");
            }
            let direct = c.net.forward(x).map_err(err)?;
            for (a, b) in map.apply(x).iter().zip(&direct) {
                check!((a - b).abs() <= 1e-8, "affine map {a} vs forward {b}");
            }
            let alpha: f64 = c.rng.random();
            let mid: Vec<f64> = x.iter().zip(&c.anchor).map(|(u, v)| alpha * u + (1.0 - alpha) * v).collect();
            let fa = c.net.forward(&c.anchor).map_err(err)?;
            let fm = c.net.forward(&mid).map_err(err)?;
            for k in 0..fm.len() {
                let lin = alpha * direct[k] + (1.0 - alpha) * fa[k];
                check!((fm[k] - lin).abs() <= 1e-9 * (1.0 + lin.abs()), "not affine along a segment");
            }
        }
        let w: Vec<f64> = (0..c.anchor.len()).map(|_| c.rng.random_range(-1.0..1.0)).collect();
        let at_anchor: f64 = w.iter().zip(&c.anchor).map(|(a, b)| a * b).sum();
        let best = max_affine_over_region(&region, &w, 0.0).map_err(err)?;
        check!(best >= at_anchor - 1e-9, "LP maximum {best} below anchor value {at_anchor}");
        Ok(())
    })
}

/// `support_eval` is exactly 1 inside, exactly 0 beyond the band, in [0, 1]
/// everywhere; pattern supports agree with their explicit half-spaces.
pub fn support_semantics() -> Result<(), String> {
    let strategy = (any::<u64>(), 1usize..=4, 1usize..=6, 0.0f64..4.0);
    run("support semantics", strategy, |(seed, dim, n, log_lambda)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lambda = 10f64.powf(log_lambda);
        let center: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let halfspaces: Vec<Halfspace> = (0..n)
            .map(|_| {
                let a: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let b = a.iter().zip(&center).map(|(u, v)| u * v).sum::<f64>() + rng.random_range(0.0..0.5);
                Halfspace::new(a, b)
            })
            .collect();
        let support = SupportNetwork::from_halfspaces(halfspaces.clone(), lambda).map_err(err)?;
        for _ in 0..20 {
            let scale = [1e-3, 0.1, 1.0, 3.0][rng.random_range(0..4)];
            let x: Vec<f64> = center.iter().map(|c| c + scale * rng.random_range(-1.0..1.0)).collect();
            let s = support_eval(&support, &x);
            check!((0.0..=1.0).contains(&s), "support value {s} outside [0, 1]");
            let worst = halfspaces.iter().map(|h| h.slack(&x)).fold(f64::INFINITY, f64::min);
            if worst >= 0.0 {
                check!(s == 1.0, "inside point has support {s}");
            }
            if worst <= -(1.0 + 1e-9) / lambda {
                check!(s == 0.0, "point beyond the band has support {s}");
            }
        }

        // Pattern supports on a random net.
        let net = Arc::new(random_net(&mut rng, dim, &[4, 3], 2));
        let pattern = net.activation_pattern(&center).map_err(err)?;
        let mask: Vec<bool> = (0..pattern.len()).map(|_| rng.random_bool(0.7)).collect();
        for gates in [GateSelection::All, GateSelection::Subset(mask)] {
            let ps = SupportNetwork::from_pattern(net.clone(), pattern.clone(), gates, lambda).map_err(err)?;
            check!(support_eval(&ps, &center) == 1.0, "anchor not inside its pattern support");
            let explicit = ps.halfspaces().map_err(err)?;
            for _ in 0..10 {
                let x: Vec<f64> = center.iter().map(|c| c + rng.random_range(-1.0..1.0)).collect();
                let s = support_eval(&ps, &x);
                let worst = explicit.iter().map(|h| h.slack(&x)).fold(f64::INFINITY, f64::min);
                check!((0.0..=1.0).contains(&s), "pattern support value {s}");
                if worst >= 1e-12 {
                    check!(s == 1.0, "pattern support {s} inside");
                }
                if worst <= -(1.0 + 1e-6) / lambda {
                    check!(s == 0.0, "pattern support {s} beyond the band");
                }
            }
        }
        Ok(())
    })
}

/// `patch = 0` exactly where the gate is 0, `patch = m` where it is 1, and
/// adding the patch to a model leaves logits unchanged where the gate is 0.
pub fn patch_locality() -> Result<(), String> {
    let strategy = (any::<u64>(), 1usize..=4, 2usize..=4, 1usize..=3, any::<bool>());
    run("patch locality", strategy, |(seed, dim, classes, n_supports, affine)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let domain = DomainBox::new(vec![-2.0; dim], vec![2.0; dim]).unwrap();
        let bias = Array1::from_shape_fn(classes, |_| rng.random_range(-5.0..5.0));
        let weight = affine.then(|| Array2::from_shape_fn((classes, dim), |_| rng.random_range(-2.0..2.0)));
        let confusion = ConfusionNetwork::new(weight, bias, 0, 1).map_err(err)?;
        let lambda = 10f64.powf(rng.random_range(0.0..3.0));
        let centers: Vec<Vec<f64>> = (0..n_supports).map(|_| random_point(&mut rng, &domain)).collect();
        let supports: Vec<SupportNetwork> = centers
            .iter()
            .map(|c| {
                let hs = (0..dim)
                    .flat_map(|j| {
                        let w = rng.random_range(0.05..0.5);
                        let mut e = vec![0.0; dim];
                        e[j] = 1.0;
                        let neg: Vec<f64> = e.iter().map(|v| -v).collect();
                        [Halfspace::new(e, c[j] + w), Halfspace::new(neg, -(c[j] - w))]
                    })
                    .collect();
                SupportNetwork::from_halfspaces(hs, lambda).unwrap()
            })
            .collect();
        let h = compute_h(&confusion, &domain);
        let patch = assemble_patch(confusion.clone(), supports, h, &domain).map_err(err)?;

        let base = random_net(&mut rng, dim, &[5], classes);
        let before = PatchedModel::new(base.clone(), FeatureMap::Identity { dim }, domain.clone()).map_err(err)?;
        let mut after = before.clone();
        after.push_patch(patch.clone()).map_err(err)?;

        for i in 0..30 {
            let x = if i % 2 == 0 {
                random_point(&mut rng, &domain)
            } else {
                let c = &centers[rng.random_range(0..centers.len())];
                // H bounds |m| on the domain only, so stay inside it.
                c.iter().map(|v| (v + rng.random_range(-0.3..0.3)).clamp(-2.0, 2.0)).collect()
            };
            let sigma = patch.gate(&x);
            let out = patch.eval(&x);
            if sigma == 0.0 {
                check!(out.iter().all(|&v| v == 0.0), "patch {out:?} leaks where the gate is 0");
                let a = after.forward(&x).map_err(err)?;
                let b = before.forward(&x).map_err(err)?;
                check!(a == b, "logits changed where the gate is 0");
            }
            if sigma == 1.0 {
                let m = confusion.apply(&x);
                for (p, q) in out.iter().zip(&m) {
                    check!((p - q).abs() <= 1e-12, "patch {p} differs from m {q}");
                }
            }
        }
        Ok(())
    })
}

/// The optimized confusion map puts the target ahead of every other class by
/// the margin at 200 sampled region points, in both modes.
pub fn confusion_feasibility() -> Result<(), String> {
    let margin = 1e-3;
    run("confusion feasibility", (case_strategy(), any::<bool>()), |(params, full)| {
        let mut c = build_case(params);
        let region = region_of(&c.net, &c.anchor, &c.domain).map_err(err)?;
        let map = region_affine_map(&c.net, &region).map_err(err)?;
        let source = c.net.predict(&c.anchor).map_err(err)?;
        let classes = c.net.output_dim();
        let target = (source + c.rng.random_range(1..classes)) % classes;
        let mode = if full { ConfusionMode::FullAffine } else { ConfusionMode::ConstantShift };
        let confusion = optimize_confusion(&map, &region, source, target, margin, mode).map_err(err)?;
        let seed = c.rng.random();
        let mut points = match sample_region(&region, 200, seed) {
            Ok(s) => s,
            Err(patchwipe::Error::Sampling(_)) => vec![],
            Err(e) => return Err(err(e)),
        };
        points.push(c.anchor.clone());
        for x in &points {
            let g = map.apply(x);
            let m = confusion.apply(x);
            let t = g[target] + m[target];
            for k in (0..classes).filter(|&k| k != target) {
                let gap = t - (g[k] + m[k]);
                check!(gap >= margin - 1e-9, "class {k} within {gap} of the target");
            }
        }
        Ok(())
    })
}

/// Bounds contain sampled values, widen with the radius, the certified radius
/// keeps the label, and the relaxed region keeps a subset of the constraints.
pub fn bound_soundness() -> Result<(), String> {
    run("bound soundness", case_strategy(), |params| {
        let mut c = build_case(params);
        let dim = c.anchor.len();
        let radius: Vec<f64> = (0..dim).map(|_| c.rng.random_range(0.0..0.5)).collect();
        let b = preactivation_bounds(&c.net, &c.anchor, &radius).map_err(err)?;
        for _ in 0..20 {
            let x: Vec<f64> = c.anchor.iter().zip(&radius).map(|(a, r)| a + r * c.rng.random_range(-1.0..=1.0)).collect();
            let values = c.net.preactivations(&x).map_err(err)?;
            for (k, v) in values.iter().enumerate() {
                for (i, &z) in v.iter().enumerate() {
                    let tol = 1e-9 * (1.0 + z.abs());
                    check!(b.lower[k][i] - tol <= z && z <= b.upper[k][i] + tol, "layer {k} neuron {i}: {z} escapes");
                }
            }
        }
        let grow = 1.0 + c.rng.random_range(0.0..1.0);
        let wider: Vec<f64> = radius.iter().map(|r| r * grow).collect();
        let w = preactivation_bounds(&c.net, &c.anchor, &wider).map_err(err)?;
        for k in 0..b.lower.len() {
            for i in 0..b.lower[k].len() {
                check!(w.lower[k][i] <= b.lower[k][i] + 1e-12, "lower bound rose with the radius");
                check!(w.upper[k][i] >= b.upper[k][i] - 1e-12, "upper bound fell with the radius");
            }
        }

        let y = c.net.predict(&c.anchor).map_err(err)?;
        let rho = robust_radius(&c.net, &c.anchor, y, &c.domain, 1e-3).map_err(err)?;
        for _ in 0..20 {
            let x: Vec<f64> = c.anchor.iter().map(|a| a + rho * c.rng.random_range(-1.0..=1.0)).collect();
            check!(c.net.predict(&x).map_err(err)? == y, "label changed inside the certified radius {rho}");
        }
        let exact = region_of(&c.net, &c.anchor, &c.domain).map_err(err)?;
        let relaxed = relaxed_region(&c.net, &c.anchor, rho, &c.domain).map_err(err)?;
        for h in relaxed.constraints() {
            check!(exact.constraints().contains(h), "relaxed constraint not in the exact region");
        }
        Ok(())
    })
}

fn solve_dense(a: &mut [Vec<f64>], b: &mut [f64]) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-10 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                for k in col..n {
                    a[r][k] -= f * a[col][k];
                }
                b[r] -= f * b[col];
            }
        }
    }
    Some((0..n).map(|i| b[i] / a[i][i]).collect())
}

/// Vertex enumeration over `rows: a·x <= b` (boxes included as rows).
fn vertex_oracle(rows: &[(Vec<f64>, f64)], objective: &[f64]) -> Option<f64> {
    let n = objective.len();
    let mut best: Option<f64> = None;
    let mut idx: Vec<usize> = (0..n).collect();
    loop {
        let mut a: Vec<Vec<f64>> = idx.iter().map(|&i| rows[i].0.clone()).collect();
        let mut b: Vec<f64> = idx.iter().map(|&i| rows[i].1).collect();
        if let Some(x) = solve_dense(&mut a, &mut b) {
            let feasible = rows
                .iter()
                .all(|(r, rhs)| r.iter().zip(&x).map(|(u, v)| u * v).sum::<f64>() <= rhs + 1e-9);
            if feasible {
                let v: f64 = objective.iter().zip(&x).map(|(u, v)| u * v).sum();
                best = Some(best.map_or(v, |m: f64| m.max(v)));
            }
        }
        // next n-combination
        let mut i = n;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            if idx[i] < rows.len() - n + i {
                idx[i] += 1;
                for k in i + 1..n {
                    idx[k] = idx[k - 1] + 1;
                }
                break;
            }
        }
    }
}

/// The simplex optimum matches vertex enumeration on random bounded 2-D and
/// 3-D programs within 1e-6, including infeasibility.
pub fn lp_oracle() -> Result<(), String> {
    let strategy = (any::<u64>(), 2usize..=3, 1usize..=8, any::<bool>());
    run("LP oracle", strategy, |(seed, n, m, offset_box)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let objective: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lo = if offset_box { rng.random_range(-3.0..0.0) } else { 0.0 };
        let hi = lo + rng.random_range(0.5..5.0);
        let mut problem = LpProblem::new(objective.clone(), Sense::Maximize).with_bounds(vec![(lo, hi); n]);
        let mut rows = Vec::new();
        for _ in 0..m {
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b = rng.random_range(-1.0..2.0);
            match rng.random_range(0..3) {
                0 => {
                    rows.push((a.clone(), b));
                    problem = problem.with_constraint(Constraint::le(a, b));
                }
                1 => {
                    rows.push((a.iter().map(|v| -v).collect(), -b));
                    problem = problem.with_constraint(Constraint::ge(a, b));
                }
                _ => {
                    // An equality through a point of the box keeps it feasible often enough.
                    rows.push((a.clone(), b));
                    rows.push((a.iter().map(|v| -v).collect(), -b));
                    problem = problem.with_constraint(Constraint::eq(a, b));
                }
            }
        }
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            rows.push((e.clone(), hi));
            rows.push((e.iter().map(|v| -v).collect(), -lo));
        }
        let oracle = vertex_oracle(&rows, &objective);
        let sol = solve_lp(&problem).map_err(err)?;
        match (sol.status, oracle) {
            (LpStatus::Optimal, Some(v)) => check!((sol.objective - v).abs() <= 1e-6, "simplex {} vs oracle {v}", sol.objective),
            (LpStatus::Infeasible, None) => {}
            (s, o) => check!(false, "simplex says {s:?}, oracle {o:?}"),
        }
        Ok(())
    })
}

#[allow(dead_code)]
pub type Suite = (&'static str, fn() -> Result<(), String>);

#[allow(dead_code)]
pub const SUITES: [Suite; 6] = [
    ("region soundness and faithfulness", region_soundness),
    ("support semantics", support_semantics),
    ("patch locality", patch_locality),
    ("confusion feasibility", confusion_feasibility),
    ("bound soundness and monotonicity", bound_soundness),
    ("LP vs vertex enumeration", lp_oracle),
];
