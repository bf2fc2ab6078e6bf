//! Unlearning drivers: single points, clustered point sets and whole classes.
//!
//! Every driver follows the same loop. The not-yet-forgotten points are
//! grouped, each group gets a confusion map fitted on the linear region of a
//! representative, the members whose prediction flips under that map receive
//! a support, and the resulting patches are appended to the model. The loop
//! stops once the fraction of forgotten points exceeds `delta`.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::{robust_radius, stable_gate_mask};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::argmax;
use crate::par::{self, Execution};
use crate::patching::{
    assemble_patch, band_points, compute_h, draw_target, local_region, optimize_confusion, ConfusionMode,
    ConfusionNetwork, GateSelection, PatchNetwork, PatchedModel, PointCache, SupportNetwork, DEFAULT_LAMBDA,
    DEFAULT_MARGIN, MAX_LAMBDA,
};

/// Result of [`kmeans`]: assignments, and each cluster's representative
/// (the member closest to the cluster mean).
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assignments: Vec<usize>,
    /// Index into the input points.
    pub representatives: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(x, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm from k-means++ seeding, at most 100 rounds. Centroids are
/// snapped to the nearest member of their cluster.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Clustering> {
    kmeans_with(points, k, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn kmeans_with(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Result<Clustering> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::InvalidParameter(format!("cannot form {k} clusters from {n} points")));
    }
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            // Guard against round-off landing on an already chosen point.
            if d2[pick] == 0.0 {
                (0..n).filter(|i| d2[*i] > 0.0).last().unwrap_or(pick)
            } else {
                pick
            }
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[next]));
        }
    }
    let mut centers: Vec<Vec<f64>> = chosen.iter().map(|&i| points[i].clone()).collect();
    let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
    for _ in 0..100 {
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        // An empty cluster takes the point farthest from its own centre.
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[assign[i]] > 1)
                    .max_by(|&i, &j| {
                        sq_dist(&points[i], &centers[assign[i]]).total_cmp(&sq_dist(&points[j], &centers[assign[j]]))
                    });
                if let Some(i) = far {
                    counts[assign[i]] -= 1;
                    counts[c] = 1;
                    centers[c] = points[i].clone();
                }
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    let mut representatives = Vec::with_capacity(k);
    for (c, center) in centers.iter().enumerate() {
        let rep = (0..n)
            .filter(|&i| assign[i] == c)
            .min_by(|&i, &j| sq_dist(&points[i], center).total_cmp(&sq_dist(&points[j], center)));
        match rep {
            Some(i) => representatives.push(i),
            None => {
                return Err(Error::InvalidParameter(
                    "k-means left a cluster empty; the points have too few distinct values".into(),
                ))
            }
        }
    }
    Ok(Clustering {
        assignments: assign,
        centroids: representatives.iter().map(|&i| points[i].clone()).collect(),
        representatives,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnlearnMode {
    Single,
    Multipoint,
    Class,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnParams {
    /// Stop once more than this fraction of the requested points is forgotten.
    pub delta: f64,
    /// Clusters per iteration (multipoint mode).
    pub k: usize,
    /// Starting support sharpness; raised tenfold while training points sit in a band.
    pub lambda: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub max_iterations: usize,
    pub confusion: ConfusionMode,
    /// Relative tolerance of the robust-radius search (class mode).
    pub radius_tol: f64,
}

impl Default for UnlearnParams {
    fn default() -> Self {
        Self {
            delta: 0.9,
            k: 1,
            lambda: DEFAULT_LAMBDA,
            epsilon: DEFAULT_MARGIN,
            seed: 0,
            max_iterations: 50,
            confusion: ConfusionMode::ConstantShift,
            radius_tol: 1e-3,
        }
    }
}

/// Which training points to forget, by index into the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnRequest {
    pub mode: UnlearnMode,
    pub points: Vec<usize>,
    pub y_unlearn: Option<usize>,
    pub params: UnlearnParams,
}

impl UnlearnRequest {
    pub fn single(index: usize, params: UnlearnParams) -> Self {
        Self {
            mode: UnlearnMode::Single,
            points: vec![index],
            y_unlearn: None,
            params,
        }
    }

    pub fn multipoint(points: Vec<usize>, params: UnlearnParams) -> Self {
        Self {
            mode: UnlearnMode::Multipoint,
            points,
            y_unlearn: None,
            params,
        }
    }

    /// Every training point labelled `label`.
    pub fn class(train: &Dataset, label: usize, params: UnlearnParams) -> Self {
        Self {
            mode: UnlearnMode::Class,
            points: (0..train.len()).filter(|&i| train.labels[i] == label).collect(),
            y_unlearn: Some(label),
            params,
        }
    }

    pub fn validate(&self, train: &Dataset) -> Result<()> {
        let p = &self.params;
        if self.points.is_empty() {
            return Err(Error::InvalidRequest("no points to unlearn".into()));
        }
        if let Some(&i) = self.points.iter().find(|&&i| i >= train.len()) {
            return Err(Error::InvalidRequest(format!("point index {i} is out of range")));
        }
        let mut seen = vec![false; train.len()];
        for &i in &self.points {
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidRequest(format!("point index {i} is listed twice")));
            }
        }
        if !(p.delta > 0.0 && p.delta <= 1.0) {
            return Err(Error::InvalidRequest(format!("delta must lie in (0, 1], got {}", p.delta)));
        }
        if p.k == 0 {
            return Err(Error::InvalidRequest("k must be at least 1".into()));
        }
        if p.max_iterations == 0 {
            return Err(Error::InvalidRequest("max_iterations must be positive".into()));
        }
        if !(p.lambda > 0.0 && p.lambda <= MAX_LAMBDA) {
            return Err(Error::InvalidRequest(format!("lambda must lie in (0, {MAX_LAMBDA}]")));
        }
        if !(p.epsilon > 0.0 && p.epsilon.is_finite()) {
            return Err(Error::InvalidRequest("epsilon must be positive".into()));
        }
        match (self.mode, self.y_unlearn) {
            (UnlearnMode::Single, _) if self.points.len() != 1 => {
                Err(Error::InvalidRequest("single mode takes exactly one point".into()))
            }
            (UnlearnMode::Class, None) => Err(Error::InvalidRequest("class mode needs y_unlearn".into())),
            (UnlearnMode::Class, Some(y)) => {
                if let Some(&i) = self.points.iter().find(|&&i| train.labels[i] != y) {
                    Err(Error::InvalidRequest(format!(
                        "point {i} has label {}, not the class {y} being unlearned",
                        train.labels[i]
                    )))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnlearnStatus {
    Converged,
    NotConverged,
    /// Every requested point was already misclassified.
    NothingToDo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub groups: usize,
    pub skipped_groups: usize,
    pub patches: usize,
    pub supports: usize,
    pub flipped: usize,
    pub residual: usize,
    pub success_fraction: f64,
    /// Accuracy (percent) of the patched model on the requested points.
    pub accuracy_u: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSummary {
    pub iteration: usize,
    pub group: usize,
    /// Training index of the point whose region fixed the confusion map.
    pub anchor: usize,
    pub source_label: usize,
    pub target: usize,
    pub supports: usize,
    pub lambda: f64,
    pub bound: f64,
}

/// Training points outside the request that lie inside a support polytope;
/// their predictions may change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurityFinding {
    pub support_of: usize,
    pub inside: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnReport {
    pub mode: UnlearnMode,
    pub status: UnlearnStatus,
    pub requested: usize,
    pub initially_misclassified: usize,
    pub delta: f64,
    pub seed: u64,
    /// Starts with the state before any patch (iteration 0).
    pub iterations: Vec<IterationRecord>,
    pub final_flip_rate: f64,
    pub patches: Vec<PatchSummary>,
    pub residual: Vec<usize>,
    pub purity: Vec<PurityFinding>,
    /// Training points left in a transition band at the largest lambda.
    pub band_points: Vec<usize>,
}

impl UnlearnReport {
    pub fn iterations_used(&self) -> usize {
        self.iterations.len() - 1
    }

    /// Training indices whose predictions the preservation guarantee excludes.
    pub fn excluded_points(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .purity
            .iter()
            .flat_map(|f| f.inside.iter().copied())
            .chain(self.band_points.iter().copied())
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Wall-clock seconds per phase. Kept apart from the report so reports are
/// reproducible byte for byte.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub grouping: f64,
    pub regions_and_confusion: f64,
    pub supports: f64,
    pub verification: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct UnlearnOutcome {
    pub model: PatchedModel,
    pub report: UnlearnReport,
    pub timings: PhaseTimings,
}

/// Run `request` against `model`; `train` is the raw training set the request
/// indexes into.
pub fn unlearn(model: &PatchedModel, train: &Dataset, request: &UnlearnRequest, exec: Execution) -> Result<UnlearnOutcome> {
    request.validate(train)?;
    if train.num_classes != model.base().output_dim() {
        return Err(Error::shape("dataset and model disagree on the number of classes"));
    }
    let features = par::try_map_range(exec, train.len(), |i| model.features(&train.features[i]))?;
    let cache = PointCache::new(model.shared_base(), features, exec)?;
    Engine::new(model.clone(), train, cache, request, exec).run()
}

pub fn unlearn_single(model: &PatchedModel, train: &Dataset, index: usize, params: &UnlearnParams, exec: Execution) -> Result<UnlearnOutcome> {
    let mut params = params.clone();
    params.k = 1;
    params.delta = 1.0;
    unlearn(model, train, &UnlearnRequest::single(index, params), exec)
}

pub fn unlearn_multipoint(model: &PatchedModel, train: &Dataset, points: Vec<usize>, params: &UnlearnParams, exec: Execution) -> Result<UnlearnOutcome> {
    unlearn(model, train, &UnlearnRequest::multipoint(points, params.clone()), exec)
}

pub fn unlearn_class(model: &PatchedModel, train: &Dataset, label: usize, params: &UnlearnParams, exec: Execution) -> Result<UnlearnOutcome> {
    if !train.labels.contains(&label) {
        return Err(Error::InvalidRequest(format!("no training point has label {label}")));
    }
    unlearn(model, train, &UnlearnRequest::class(train, label, params.clone()), exec)
}

/// A fitted confusion map for one group, before supports are attached.
struct GroupPlan {
    group: usize,
    anchor: usize,
    confusion: ConfusionNetwork,
    members: Vec<usize>,
}

struct BuiltPatch {
    summary: PatchSummary,
    patch: PatchNetwork,
    purity: Vec<PurityFinding>,
    band: Vec<usize>,
}

struct Engine<'a> {
    model: PatchedModel,
    labels: &'a [usize],
    classes: usize,
    cache: PointCache,
    in_request: Vec<bool>,
    request: &'a UnlearnRequest,
    exec: Execution,
    timings: PhaseTimings,
}

fn stream_rng(seed: u64, iteration: usize, stream: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((iteration as u64) << 32) | stream as u64);
    rng
}

impl<'a> Engine<'a> {
    fn new(model: PatchedModel, train: &'a Dataset, cache: PointCache, request: &'a UnlearnRequest, exec: Execution) -> Self {
        let mut in_request = vec![false; train.len()];
        for &i in &request.points {
            in_request[i] = true;
        }
        Self {
            model,
            labels: &train.labels,
            classes: train.num_classes,
            cache,
            in_request,
            request,
            exec,
            timings: PhaseTimings::default(),
        }
    }

    /// Requested points the current model still labels correctly.
    fn residual(&self) -> Result<Vec<usize>> {
        let flags = par::try_map(self.exec, &self.request.points, |&i| {
            Ok::<_, Error>(argmax(&self.cache.logits(&self.model, i)?) == self.labels[i])
        })?;
        Ok(self
            .request
            .points
            .iter()
            .zip(flags)
            .filter_map(|(&i, keep)| keep.then_some(i))
            .collect())
    }

    fn record(&self, iteration: usize, residual: &[usize], groups: usize, skipped: usize, patches: usize, supports: usize) -> IterationRecord {
        let n = self.request.points.len();
        IterationRecord {
            iteration,
            groups,
            skipped_groups: skipped,
            patches,
            supports,
            flipped: n - residual.len(),
            residual: residual.len(),
            success_fraction: 1.0 - residual.len() as f64 / n as f64,
            accuracy_u: 100.0 * residual.len() as f64 / n as f64,
        }
    }

    fn done(&self, fraction: f64) -> bool {
        // With delta = 1 the strict inequality could never hold.
        fraction > self.request.params.delta || fraction >= 1.0
    }

    fn run(mut self) -> Result<UnlearnOutcome> {
        let start = Instant::now();
        let params = &self.request.params;
        let mut residual = self.residual()?;
        let initially = self.request.points.len() - residual.len();
        let mut iterations = vec![self.record(0, &residual, 0, 0, 0, 0)];
        let mut patches = Vec::new();
        let mut purity = Vec::new();
        let mut band = Vec::new();
        let mut status = if residual.is_empty() {
            log::warn!("every requested point is already misclassified; nothing to unlearn");
            UnlearnStatus::NothingToDo
        } else {
            UnlearnStatus::NotConverged
        };
        let mut fraction = iterations[0].success_fraction;
        if status != UnlearnStatus::NothingToDo && self.done(fraction) {
            status = UnlearnStatus::Converged;
        }
        let mut iteration = 0;
        while status == UnlearnStatus::NotConverged && iteration < params.max_iterations {
            iteration += 1;
            let t = Instant::now();
            let groups = self.group(&residual, iteration)?;
            self.timings.grouping += t.elapsed().as_secs_f64();

            let t = Instant::now();
            let n_groups = groups.len();
            let plans = par::try_map(self.exec, &groups, |(anchor, members)| {
                self.plan(iteration, groups.iter().position(|g| g.0 == *anchor).unwrap_or(0), *anchor, members)
            })?;
            self.timings.regions_and_confusion += t.elapsed().as_secs_f64();

            let t = Instant::now();
            let built = par::try_map(self.exec, &plans, |plan| match plan {
                Some(p) => self.build(iteration, p),
                None => Ok(None),
            })?;
            self.timings.supports += t.elapsed().as_secs_f64();

            let skipped = built.iter().filter(|b| b.is_none()).count();
            let mut added = 0;
            let mut supports = 0;
            for b in built.into_iter().flatten() {
                supports += b.summary.supports;
                added += 1;
                self.model.push_patch(b.patch)?;
                patches.push(b.summary);
                purity.extend(b.purity);
                band.extend(b.band);
            }

            let t = Instant::now();
            residual = self.residual()?;
            self.timings.verification += t.elapsed().as_secs_f64();
            let rec = self.record(iteration, &residual, n_groups, skipped, added, supports);
            fraction = rec.success_fraction;
            log::info!(
                "iteration {iteration}: {} patches, {} supports, {} of {} forgotten",
                added,
                supports,
                rec.flipped,
                self.request.points.len()
            );
            iterations.push(rec);
            if self.done(fraction) {
                status = UnlearnStatus::Converged;
            }
        }
        band.sort_unstable();
        band.dedup();
        self.timings.total = start.elapsed().as_secs_f64();
        let report = UnlearnReport {
            mode: self.request.mode,
            status,
            requested: self.request.points.len(),
            initially_misclassified: initially,
            delta: params.delta,
            seed: params.seed,
            iterations,
            final_flip_rate: fraction,
            patches,
            residual,
            purity,
            band_points: band,
        };
        Ok(UnlearnOutcome {
            model: self.model,
            report,
            timings: self.timings,
        })
    }

    /// (anchor, members) per group.
    fn group(&self, residual: &[usize], iteration: usize) -> Result<Vec<(usize, Vec<usize>)>> {
        match self.request.mode {
            UnlearnMode::Single | UnlearnMode::Multipoint => {
                let k = self.request.params.k.min(residual.len());
                let pts: Vec<Vec<f64>> = residual.iter().map(|&i| self.cache.point(i).to_vec()).collect();
                let mut rng = stream_rng(self.request.params.seed, iteration, 0);
                let cl = kmeans_with(&pts, k, &mut rng)?;
                Ok((0..k)
                    .map(|c| {
                        let members = (0..residual.len())
                            .filter(|&j| cl.assignments[j] == c)
                            .map(|j| residual[j])
                            .collect();
                        (residual[cl.representatives[c]], members)
                    })
                    .collect())
            }
            UnlearnMode::Class => {
                let sums = par::map(self.exec, residual, |&i| {
                    residual
                        .iter()
                        .map(|&j| sq_dist(self.cache.point(i), self.cache.point(j)).sqrt())
                        .sum::<f64>()
                });
                let best = (0..residual.len())
                    .min_by(|&a, &b| sums[a].total_cmp(&sums[b]))
                    .expect("residual is non-empty");
                Ok(vec![(residual[best], residual.to_vec())])
            }
        }
    }

    fn plan(&self, iteration: usize, group: usize, anchor: usize, members: &[usize]) -> Result<Option<GroupPlan>> {
        let params = &self.request.params;
        let y = self.labels[anchor];
        let mut rng = stream_rng(params.seed, iteration, group + 1);
        let target = draw_target(&mut rng, self.classes, y);
        let z = self.cache.point(anchor);
        let fitted = local_region(&self.model, z).and_then(|(region, map)| {
            optimize_confusion(&map, &region, y, target, params.epsilon, params.confusion)
        });
        match fitted {
            Ok(confusion) => Ok(Some(GroupPlan {
                group,
                anchor,
                confusion,
                members: members.to_vec(),
            })),
            Err(e) if self.request.mode != UnlearnMode::Single && matches!(e, Error::Solver(_) | Error::EmptyRegion(_)) => {
                log::warn!("iteration {iteration}, group {group}: skipped ({e})");
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    fn support_for(&self, member: usize) -> Result<SupportNetwork> {
        let params = &self.request.params;
        let base = self.model.shared_base();
        let z = self.cache.point(member);
        let pattern = base.activation_pattern(z)?;
        let gates = match self.request.mode {
            UnlearnMode::Class => {
                let y = self.labels[member];
                let rho = match robust_radius(&base, z, y, self.model.domain(), params.radius_tol) {
                    Ok(r) => r,
                    Err(Error::InvalidParameter(_)) => 0.0,
                    Err(e) => return Err(e),
                };
                GateSelection::Subset(stable_gate_mask(&base, z, rho)?)
            }
            _ => GateSelection::All,
        };
        SupportNetwork::from_pattern(base, pattern, gates, params.lambda)
    }

    fn build(&self, iteration: usize, plan: &GroupPlan) -> Result<Option<BuiltPatch>> {
        let m = &plan.confusion;
        let mut owners = Vec::new();
        let mut supports = Vec::new();
        for &u in &plan.members {
            let mut logits = self.cache.logits(&self.model, u)?;
            for (l, v) in logits.iter_mut().zip(m.apply(self.cache.point(u))) {
                *l += v;
            }
            if argmax(&logits) != self.labels[u] {
                owners.push(u);
                supports.push(self.support_for(u)?);
            }
        }
        if supports.is_empty() {
            return Ok(None);
        }
        // Raise lambda until no training point outside the request sits in a band.
        let mut lambda = self.request.params.lambda;
        let band = loop {
            for s in &mut supports {
                s.set_lambda(lambda)?;
            }
            let band: Vec<usize> = band_points(&supports, &self.cache, Execution::Sequential)
                .into_iter()
                .filter(|&i| !self.in_request[i])
                .collect();
            if band.is_empty() || lambda * 10.0 > MAX_LAMBDA * (1.0 + 1e-12) {
                break band;
            }
            lambda *= 10.0;
        };
        let mut purity: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in (0..self.cache.len()).filter(|&i| !self.in_request[i]) {
            for (s, &owner) in supports.iter().zip(&owners) {
                if self.cache.support_value(s, i) >= 1.0 {
                    purity.entry(owner).or_default().push(i);
                }
            }
        }
        let bound = compute_h(m, self.model.domain());
        let n_supports = supports.len();
        let patch = assemble_patch(m.clone(), supports, bound, self.model.domain())?;
        Ok(Some(BuiltPatch {
            summary: PatchSummary {
                iteration,
                group: plan.group,
                anchor: plan.anchor,
                source_label: m.source_label,
                target: m.target,
                supports: n_supports,
                lambda,
                bound,
            },
            patch,
            purity: purity
                .into_iter()
                .map(|(support_of, inside)| PurityFinding { support_of, inside })
                .collect(),
            band,
        }))
    }
}
