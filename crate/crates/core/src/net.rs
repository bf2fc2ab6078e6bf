//! Feed-forward ReLU networks.
//!
//! An [`MlpNetwork`] is a chain of affine layers with a ReLU gate after every
//! layer except the last, whose output is the logit vector. Such networks are
//! continuous piecewise-linear: fixing the on/off state of every gate (an
//! [`ActivationPattern`]) turns the whole network into a single affine map.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One affine map `x -> Wx + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl AffineLayer {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::shape(format!(
                "weight has {} rows but bias has {} entries",
                weight.nrows(),
                bias.len()
            )));
        }
        if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("layer parameters".into()));
        }
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn apply(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.weight.dot(&x) + &self.bias
    }
}

/// A ReLU multilayer perceptron producing logits.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNetwork {
    layers: Vec<AffineLayer>,
}

impl MlpNetwork {
    pub fn new(layers: Vec<AffineLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("network needs at least one layer"));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(format!(
                    "layer {} outputs {} values but layer {} expects {}",
                    k,
                    pair[0].out_dim(),
                    k + 1,
                    pair[1].in_dim()
                )));
            }
        }
        if layers.iter().any(|l| l.in_dim() == 0 || l.out_dim() == 0) {
            return Err(Error::shape("layer dimensions must be positive"));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[AffineLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    /// Number of class labels.
    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Widths of the hidden (gated) layers.
    pub fn hidden_widths(&self) -> Vec<usize> {
        self.hidden().iter().map(|l| l.out_dim()).collect()
    }

    /// Total number of ReLU gates.
    pub fn gate_count(&self) -> usize {
        self.hidden().iter().map(|l| l.out_dim()).sum()
    }

    fn hidden(&self) -> &[AffineLayer] {
        &self.layers[..self.layers.len() - 1]
    }

    fn output_layer(&self) -> &AffineLayer {
        &self.layers[self.layers.len() - 1]
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "input has dimension {} but network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Exact logits at `x`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut h = ArrayView1::from(x).to_owned();
        for layer in self.hidden() {
            h = layer.apply(h.view());
            h.mapv_inplace(relu);
        }
        let out = self.output_layer().apply(h.view());
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(out.to_vec())
    }

    /// Predicted label; ties go to the smallest index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(x)?))
    }

    /// Pre-activations of every hidden layer followed by the logits.
    pub fn preactivations(&self, x: &[f64]) -> Result<Vec<Array1<f64>>> {
        self.check_input(x)?;
        let mut out = Vec::with_capacity(self.layers.len());
        let mut h = ArrayView1::from(x).to_owned();
        for layer in self.hidden() {
            let z = layer.apply(h.view());
            h = z.mapv(relu);
            out.push(z);
        }
        out.push(self.output_layer().apply(h.view()));
        Ok(out)
    }

    /// Gate signs at `x`; a pre-activation of exactly zero counts as active.
    pub fn activation_pattern(&self, x: &[f64]) -> Result<ActivationPattern> {
        let pre = self.preactivations(x)?;
        let mut signs = Vec::with_capacity(self.gate_count());
        for z in &pre[..pre.len() - 1] {
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("pre-activation".into()));
            }
            signs.extend(z.iter().map(|&v| v >= 0.0));
        }
        Ok(ActivationPattern {
            signs,
            widths: self.hidden_widths(),
        })
    }

    /// The affine pieces selected by `pattern`.
    ///
    /// Row `g` of the returned gate matrix together with `gate_offsets[g]` is
    /// the pre-activation of gate `g` as a function of the input, valid
    /// wherever the gates feeding it follow `pattern`.
    pub fn pattern_affine(&self, pattern: &ActivationPattern) -> Result<PatternAffine> {
        self.check_pattern(pattern)?;
        let d = self.input_dim();
        let n = self.gate_count();
        let mut gate_normals = Array2::zeros((n, d));
        let mut gate_offsets = Array1::zeros(n);
        // Jacobian and offset of the current post-activation w.r.t. the input.
        let mut jac: Option<Array2<f64>> = None;
        let mut off = Array1::<f64>::zeros(d);
        let mut row = 0;
        for layer in self.hidden() {
            let zj = match &jac {
                None => layer.weight.clone(),
                Some(j) => layer.weight.dot(j),
            };
            let zo = layer.weight.dot(&off) + &layer.bias;
            let w = layer.out_dim();
            gate_normals
                .slice_mut(ndarray::s![row..row + w, ..])
                .assign(&zj);
            gate_offsets.slice_mut(ndarray::s![row..row + w]).assign(&zo);
            let mut hj = zj;
            let mut ho = zo;
            for (i, mut r) in hj.axis_iter_mut(Axis(0)).enumerate() {
                if !pattern.signs[row + i] {
                    r.fill(0.0);
                    ho[i] = 0.0;
                }
            }
            jac = Some(hj);
            off = ho;
            row += w;
        }
        let out = self.output_layer();
        Ok(PatternAffine {
            gate_normals,
            gate_offsets,
            output_weight: match &jac {
                None => out.weight.clone(),
                Some(j) => out.weight.dot(j),
            },
            output_bias: out.weight.dot(&off) + &out.bias,
        })
    }

    /// Affine form `(normal, offset)` of a single gate's pre-activation under `pattern`.
    pub fn gate_affine(&self, pattern: &ActivationPattern, gate: usize) -> Result<(Vec<f64>, f64)> {
        self.check_pattern(pattern)?;
        if gate >= self.gate_count() {
            return Err(Error::shape(format!("gate {gate} out of range")));
        }
        let hidden = self.hidden();
        let mut layer = 0;
        let mut start = 0;
        while gate >= start + hidden[layer].out_dim() {
            start += hidden[layer].out_dim();
            layer += 1;
        }
        // Backward vector-Jacobian product for the normal.
        let mut v = hidden[layer].weight.row(gate - start).to_owned();
        let mut row_start = start;
        for k in (0..layer).rev() {
            let w = hidden[k].out_dim();
            row_start -= w;
            for (i, vi) in v.iter_mut().enumerate() {
                if !pattern.signs[row_start + i] {
                    *vi = 0.0;
                }
            }
            v = v.dot(&hidden[k].weight);
        }
        // Offset: the masked network evaluated at the origin.
        let zero = vec![0.0; self.input_dim()];
        let mut offset = 0.0;
        self.masked_preactivations(&zero, pattern, None, |row, z| {
            if row == start {
                offset = z[gate - start];
                true
            } else {
                false
            }
        });
        Ok((v.to_vec(), offset))
    }

    pub(crate) fn check_pattern(&self, pattern: &ActivationPattern) -> Result<()> {
        if pattern.widths != self.hidden_widths() {
            return Err(Error::shape(format!(
                "pattern widths {:?} do not match network widths {:?}",
                pattern.widths,
                self.hidden_widths()
            )));
        }
        Ok(())
    }

    /// Pre-activations of every gate computed as if the gates followed
    /// `pattern` instead of their actual signs at `x`.
    ///
    /// `first` may carry the first hidden layer's pre-activations at `x`,
    /// which do not depend on the pattern. Evaluation stops early, after any
    /// layer, once `stop` returns true for that layer's values.
    pub(crate) fn masked_preactivations(
        &self,
        x: &[f64],
        pattern: &ActivationPattern,
        first: Option<&Array1<f64>>,
        mut visit: impl FnMut(usize, &Array1<f64>) -> bool,
    ) {
        let hidden = self.hidden();
        let mut row = 0;
        let mut h: Array1<f64>;
        let z0 = match first {
            Some(z) => z.clone(),
            None => hidden[0].apply(ArrayView1::from(x)),
        };
        if visit(row, &z0) {
            return;
        }
        h = masked(&z0, &pattern.signs[row..row + z0.len()]);
        row += z0.len();
        for layer in &hidden[1..] {
            let z = layer.apply(h.view());
            if visit(row, &z) {
                return;
            }
            h = masked(&z, &pattern.signs[row..row + z.len()]);
            row += z.len();
        }
    }
}

fn masked(z: &Array1<f64>, signs: &[bool]) -> Array1<f64> {
    let mut h = z.clone();
    for (v, &on) in h.iter_mut().zip(signs) {
        if !on {
            *v = 0.0;
        }
    }
    h
}

/// Affine pieces of an [`MlpNetwork`] under a fixed activation pattern.
#[derive(Debug, Clone)]
pub struct PatternAffine {
    pub gate_normals: Array2<f64>,
    pub gate_offsets: Array1<f64>,
    pub output_weight: Array2<f64>,
    pub output_bias: Array1<f64>,
}

#[inline]
pub fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// On/off state of every ReLU gate, in layer order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActivationPattern {
    signs: Vec<bool>,
    widths: Vec<usize>,
}

impl ActivationPattern {
    pub fn new(signs: Vec<bool>, widths: Vec<usize>) -> Result<Self> {
        if signs.len() != widths.iter().sum::<usize>() {
            return Err(Error::shape(format!(
                "pattern has {} bits but widths sum to {}",
                signs.len(),
                widths.iter().sum::<usize>()
            )));
        }
        Ok(Self { signs, widths })
    }

    pub fn signs(&self) -> &[bool] {
        &self.signs
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn len(&self) -> usize {
        self.signs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signs.is_empty()
    }

    /// Bits as a `0`/`1` string.
    pub fn to_bit_string(&self) -> String {
        self.signs.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn from_bit_string(bits: &str, widths: Vec<usize>) -> Result<Self> {
        let signs = bits
            .chars()
            .enumerate()
            .map(|(i, c)| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(Error::parse(
                    "activation pattern",
                    format!("invalid bit {other:?} at position {i}"),
                )),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(signs, widths)
    }
}

/// Fixed preprocessing applied before the patched classifier.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureMap {
    Identity { dim: usize },
    /// A frozen network whose logits serve as features. Never trained or patched.
    Frozen(MlpNetwork),
}

impl FeatureMap {
    pub fn input_dim(&self) -> usize {
        match self {
            FeatureMap::Identity { dim } => *dim,
            FeatureMap::Frozen(net) => net.input_dim(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            FeatureMap::Identity { dim } => *dim,
            FeatureMap::Frozen(net) => net.output_dim(),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            FeatureMap::Identity { dim } => {
                if x.len() != *dim {
                    return Err(Error::shape(format!(
                        "input has dimension {} but feature map expects {}",
                        x.len(),
                        dim
                    )));
                }
                Ok(x.to_vec())
            }
            FeatureMap::Frozen(net) => net.forward(x),
        }
    }
}

/// Serializable view of a layer: row-major weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerRecord {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerRecord {
    pub fn from_layer(layer: &AffineLayer) -> Self {
        Self {
            rows: layer.out_dim(),
            cols: layer.in_dim(),
            weight: layer.weight.iter().copied().collect(),
            bias: layer.bias.to_vec(),
        }
    }

    pub fn into_layer(self, field: &str, index: usize) -> Result<AffineLayer> {
        let ctx = format!("{field}[{index}]");
        if self.weight.len() != self.rows * self.cols {
            return Err(Error::parse(
                ctx,
                format!(
                    "field `weight` has {} entries, expected rows*cols = {}",
                    self.weight.len(),
                    self.rows * self.cols
                ),
            ));
        }
        if self.bias.len() != self.rows {
            return Err(Error::parse(
                ctx,
                format!("field `bias` has {} entries, expected {}", self.bias.len(), self.rows),
            ));
        }
        let weight = Array2::from_shape_vec((self.rows, self.cols), self.weight)
            .map_err(|e| Error::parse(ctx.clone(), e.to_string()))?;
        AffineLayer::new(weight, Array1::from(self.bias)).map_err(|e| Error::parse(ctx, e.to_string()))
    }
}

pub(crate) fn network_to_records(net: &MlpNetwork) -> Vec<LayerRecord> {
    net.layers().iter().map(LayerRecord::from_layer).collect()
}

pub(crate) fn network_from_records(records: Vec<LayerRecord>, field: &str) -> Result<MlpNetwork> {
    let layers = records
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.into_layer(field, i))
        .collect::<Result<Vec<_>>>()?;
    MlpNetwork::new(layers).map_err(|e| Error::parse(field, e.to_string()))
}
