//! Pinned desk-scale fixtures: Gaussian blobs and a 10k MNIST subset.

use std::path::Path;

use crate::data::{gen_blobs, load_idx, train_mlp, BlobConfig, Dataset, Split, TrainConfig};
use crate::error::Result;
use crate::geometry::DomainBox;
use crate::net::FeatureMap;
use crate::patching::PatchedModel;

/// Padding of the blob domain box around the training data.
pub const BLOB_DOMAIN_PAD: f64 = 0.05;

pub struct Fixture {
    pub train: Dataset,
    pub test: Dataset,
    pub model: PatchedModel,
}

pub fn blob_train_config() -> TrainConfig {
    TrainConfig {
        hidden: vec![16, 16],
        epochs: 50,
        seed: 1,
        ..TrainConfig::default()
    }
}

pub fn mnist_train_config() -> TrainConfig {
    TrainConfig {
        hidden: vec![256, 256],
        epochs: 20,
        learning_rate: 0.01,
        batch_size: 64,
        momentum: 0.9,
        seed: 1,
    }
}

/// Wraps a dataset and a trained net; the domain box pads the training data.
pub fn model_for(train: &Dataset, net: crate::net::MlpNetwork) -> Result<PatchedModel> {
    let domain = DomainBox::from_points(train.features.iter().map(Vec::as_slice), BLOB_DOMAIN_PAD)?;
    PatchedModel::new(net, FeatureMap::Identity { dim: train.dim() }, domain)
}

/// Three blobs in 16 dimensions, 600 training points, MLP [16, 16].
pub fn blobs() -> Result<Fixture> {
    let (train, test) = gen_blobs(&BlobConfig::default())?;
    let net = train_mlp(&train, &blob_train_config())?;
    let model = model_for(&train, net)?;
    Ok(Fixture { train, test, model })
}

/// Reads `dir/{train,test}-{images-idx3,labels-idx1}-ubyte`.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
        Split::Train,
    )?;
    let test = load_idx(
        &dir.join("test-images-idx3-ubyte"),
        &dir.join("test-labels-idx1-ubyte"),
        Split::Test,
    )?;
    Ok((train, test))
}

/// MNIST subset in `dir`, MLP [256, 256] over the unit pixel box.
pub fn mnist(dir: &Path) -> Result<Fixture> {
    let (train, test) = load_mnist(dir)?;
    let net = train_mlp(&train, &mnist_train_config())?;
    let model = PatchedModel::new(net, FeatureMap::Identity { dim: train.dim() }, DomainBox::unit(train.dim()))?;
    Ok(Fixture { train, test, model })
}
