//! JSON model files: base network, feature map, domain box, optional input
//! standardization and the ordered patch list.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::Standardization;
use crate::error::{Error, Result};
use crate::geometry::{DomainBox, Halfspace};
use crate::net::{network_from_records, network_to_records, ActivationPattern, FeatureMap, LayerRecord, MlpNetwork};
use crate::patching::{
    assemble_patch, ConfusionNetwork, GateSelection, PatchNetwork, PatchedModel, SupportNetwork, SupportRegion,
};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum FeatureMapRecord {
    Identity { dim: usize },
    Frozen { layers: Vec<LayerRecord> },
}

#[derive(Serialize, Deserialize)]
struct DomainRecord {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct HalfspaceRecord {
    normal: Vec<f64>,
    bound: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SupportRecord {
    Pattern {
        lambda: f64,
        pattern: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gates: Option<String>,
    },
    Halfspaces {
        lambda: f64,
        halfspaces: Vec<HalfspaceRecord>,
    },
}

#[derive(Serialize, Deserialize)]
struct MatrixRecord {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PatchRecord {
    target: usize,
    source_label: usize,
    bound: f64,
    confusion_weight: Option<MatrixRecord>,
    confusion_bias: Vec<f64>,
    supports: Vec<SupportRecord>,
}

#[derive(Serialize, Deserialize)]
struct ModelRecord {
    format_version: u32,
    feature_map: FeatureMapRecord,
    layers: Vec<LayerRecord>,
    domain: DomainRecord,
    standardization: Option<Standardization>,
    patches: Vec<PatchRecord>,
}

fn bits(mask: &[bool]) -> String {
    mask.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

fn support_record(s: &SupportNetwork, base: &Arc<MlpNetwork>) -> Result<SupportRecord> {
    Ok(match s.region() {
        SupportRegion::Halfspaces(hs) => SupportRecord::Halfspaces {
            lambda: s.lambda(),
            halfspaces: hs
                .iter()
                .map(|h| HalfspaceRecord {
                    normal: h.normal.clone(),
                    bound: h.bound,
                })
                .collect(),
        },
        SupportRegion::Pattern { net, pattern, gates } => {
            if !Arc::ptr_eq(net, base) && **net != **base {
                return Err(Error::InvalidParameter(
                    "pattern support refers to a network other than the base".into(),
                ));
            }
            SupportRecord::Pattern {
                lambda: s.lambda(),
                pattern: pattern.to_bit_string(),
                gates: match gates {
                    GateSelection::All => None,
                    GateSelection::Subset(mask) => Some(bits(mask)),
                },
            }
        }
    })
}

/// Serialize a model to a JSON string.
pub fn model_to_string(model: &PatchedModel, standardization: Option<&Standardization>) -> Result<String> {
    let base = model.shared_base();
    let patches = model
        .patches()
        .iter()
        .map(|p| {
            let c = p.confusion();
            Ok(PatchRecord {
                target: c.target,
                source_label: c.source_label,
                bound: p.bound(),
                confusion_weight: c.weight.as_ref().map(|w| MatrixRecord {
                    rows: w.nrows(),
                    cols: w.ncols(),
                    data: w.iter().copied().collect(),
                }),
                confusion_bias: c.bias.to_vec(),
                supports: p
                    .supports()
                    .iter()
                    .map(|s| support_record(s, &base))
                    .collect::<Result<_>>()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let record = ModelRecord {
        format_version: FORMAT_VERSION,
        feature_map: match model.feature_map() {
            FeatureMap::Identity { dim } => FeatureMapRecord::Identity { dim: *dim },
            FeatureMap::Frozen(net) => FeatureMapRecord::Frozen {
                layers: network_to_records(net),
            },
        },
        layers: network_to_records(model.base()),
        domain: DomainRecord {
            lower: model.domain().lower.clone(),
            upper: model.domain().upper.clone(),
        },
        standardization: standardization.cloned(),
        patches,
    };
    let mut s = serde_json::to_string_pretty(&record).map_err(|e| Error::parse("model", e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn parse_bits(s: &str, field: &str) -> Result<Vec<bool>> {
    s.chars()
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            other => Err(Error::parse(field, format!("unexpected character {other:?} in bit string"))),
        })
        .collect()
}

fn patch_from_record(
    r: PatchRecord,
    index: usize,
    base: &Arc<MlpNetwork>,
    domain: &DomainBox,
) -> Result<PatchNetwork> {
    let ctx = format!("patches[{index}]");
    let with_ctx = |e: Error| Error::parse(ctx.clone(), e.to_string());
    let weight = match r.confusion_weight {
        None => None,
        Some(m) => Some(
            Array2::from_shape_vec((m.rows, m.cols), m.data)
                .map_err(|e| Error::parse(format!("{ctx}.confusion_weight"), e.to_string()))?,
        ),
    };
    let confusion =
        ConfusionNetwork::new(weight, Array1::from(r.confusion_bias), r.target, r.source_label).map_err(with_ctx)?;
    let widths = base.hidden_widths();
    let mut supports = Vec::with_capacity(r.supports.len());
    for (j, s) in r.supports.into_iter().enumerate() {
        let field = format!("{ctx}.supports[{j}]");
        let support = match s {
            SupportRecord::Halfspaces { lambda, halfspaces } => SupportNetwork::from_halfspaces(
                halfspaces.into_iter().map(|h| Halfspace::new(h.normal, h.bound)).collect(),
                lambda,
            ),
            SupportRecord::Pattern { lambda, pattern, gates } => {
                let pattern = ActivationPattern::from_bit_string(&pattern, widths.clone())
                    .map_err(|e| Error::parse(format!("{field}.pattern"), e.to_string()))?;
                let gates = match gates {
                    None => GateSelection::All,
                    Some(g) => GateSelection::Subset(parse_bits(&g, &format!("{field}.gates"))?),
                };
                SupportNetwork::from_pattern(Arc::clone(base), pattern, gates, lambda)
            }
        }
        .map_err(|e| Error::parse(field, e.to_string()))?;
        supports.push(support);
    }
    assemble_patch(confusion, supports, r.bound, domain).map_err(with_ctx)
}

/// Parse a model from JSON text.
pub fn model_from_str(text: &str) -> Result<(PatchedModel, Option<Standardization>)> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::parse("model", e.to_string()))?;
    let version = value
        .get("format_version")
        .ok_or_else(|| Error::parse("model", "missing field `format_version`"))?
        .as_u64()
        .ok_or_else(|| Error::parse("format_version", "expected an unsigned integer"))?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::UnsupportedVersion {
            found: version.min(u32::MAX as u64) as u32,
            expected: FORMAT_VERSION,
        });
    }
    let record: ModelRecord = serde_json::from_value(value).map_err(|e| Error::parse("model", e.to_string()))?;
    let feature_map = match record.feature_map {
        FeatureMapRecord::Identity { dim } => FeatureMap::Identity { dim },
        FeatureMapRecord::Frozen { layers } => FeatureMap::Frozen(network_from_records(layers, "feature_map.layers")?),
    };
    let base = Arc::new(network_from_records(record.layers, "layers")?);
    let domain = DomainBox::new(record.domain.lower, record.domain.upper)
        .map_err(|e| Error::parse("domain", e.to_string()))?;
    let mut model = PatchedModel::from_shared(Arc::clone(&base), feature_map, domain.clone())?;
    for (i, p) in record.patches.into_iter().enumerate() {
        model.push_patch(patch_from_record(p, i, &base, &domain)?)?;
    }
    Ok((model, record.standardization))
}

pub fn save_model(path: &Path, model: &PatchedModel, standardization: Option<&Standardization>) -> Result<()> {
    fs::write(path, model_to_string(model, standardization)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<(PatchedModel, Option<Standardization>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::tests::clipped_identity;
    use crate::patching::compute_h;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn patched() -> PatchedModel {
        let net = Arc::new(clipped_identity());
        let domain = DomainBox::unit(2);
        let mut pm = PatchedModel::from_shared(Arc::clone(&net), FeatureMap::Identity { dim: 2 }, domain.clone()).unwrap();
        let pattern = net.activation_pattern(&[0.9, 0.1]).unwrap();
        let s1 = SupportNetwork::from_pattern(Arc::clone(&net), pattern.clone(), GateSelection::All, 1e4).unwrap();
        let s2 = SupportNetwork::from_pattern(
            Arc::clone(&net),
            pattern,
            GateSelection::Subset(vec![true, false]),
            1e5,
        )
        .unwrap();
        let c = ConfusionNetwork::constant(vec![-0.1 / 3.0, 0.7], 1, 0).unwrap();
        let h = compute_h(&c, &domain);
        pm.push_patch(assemble_patch(c, vec![s1, s2], h, &domain).unwrap()).unwrap();
        let s3 = SupportNetwork::from_halfspaces(vec![Halfspace::new(vec![1.0, 1.0], 0.3)], 1e4).unwrap();
        let c = ConfusionNetwork::new(
            Some(Array2::from_shape_vec((2, 2), vec![0.1, 0.2, -0.3, 1.0 / 7.0]).unwrap()),
            Array1::from(vec![0.5, -0.25]),
            0,
            1,
        )
        .unwrap();
        let h = compute_h(&c, &domain);
        pm.push_patch(assemble_patch(c, vec![s3], h, &domain).unwrap()).unwrap();
        pm
    }

    #[test]
    fn round_trip_is_exact() {
        let pm = patched();
        let stats = Standardization {
            mean: vec![0.1, 1.0 / 3.0],
            std: vec![2.0, 0.7],
        };
        let text = model_to_string(&pm, Some(&stats)).unwrap();
        let (back, s) = model_from_str(&text).unwrap();
        assert_eq!(s, Some(stats.clone()));
        assert_eq!(back.base(), pm.base());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            assert_eq!(back.forward(&x).unwrap(), pm.forward(&x).unwrap());
        }
        assert_eq!(model_to_string(&back, Some(&stats)).unwrap(), text);
    }

    #[test]
    fn malformed_files() {
        let text = model_to_string(&patched(), None).unwrap();
        let truncated = &text[..text.len() / 2];
        assert!(matches!(model_from_str(truncated), Err(Error::Parse { .. })));

        let bumped = text.replacen("\"format_version\": 1", "\"format_version\": 2", 1);
        assert!(matches!(
            model_from_str(&bumped),
            Err(Error::UnsupportedVersion { found: 2, expected: 1 })
        ));

        let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
        value["layers"][0]["bias"] = serde_json::json!([1.0]);
        let err = model_from_str(&value.to_string()).unwrap_err().to_string();
        assert!(err.contains("layers[0]") && err.contains("bias"), "{err}");

        let no_layers = text.replacen("\"layers\"", "\"layerz\"", 1);
        let err = model_from_str(&no_layers).unwrap_err().to_string();
        assert!(err.contains("layers"), "{err}");
    }
}
