use std::path::Path;

use anyhow::{bail, Context, Result};
use capsroute_core::config::{DatasetKind, RunConfig};
use capsroute_core::data::{load_cifar10, load_mnist, synthesize_multimnist, Dataset, Split};

/// Parses `<kind>-<split>`, e.g. `mnist-test`.
pub fn parse_spec(spec: &str) -> Result<(DatasetKind, Split)> {
    let (kind, split) = spec
        .rsplit_once('-')
        .with_context(|| format!("dataset '{spec}' should look like mnist-test"))?;
    let split = match split {
        "train" => Split::Train,
        "test" => Split::Test,
        other => bail!("unknown split '{other}' in '{spec}' (train or test)"),
    };
    Ok((kind.parse()?, split))
}

/// Loads a split. `subset` > 0 keeps a class-stratified subset; for
/// MultiMNIST it limits the source digits before synthesis.
pub fn load(root: &Path, kind: DatasetKind, split: Split, subset: usize, config: &RunConfig) -> Result<Dataset> {
    let limit = |ds: Dataset| -> Result<Dataset> {
        Ok(if subset > 0 && subset < ds.len() { ds.stratified(subset)? } else { ds })
    };
    let ds = match kind {
        DatasetKind::Mnist => limit(load_mnist(&root.join("mnist"), split)?)?,
        DatasetKind::Cifar10 => limit(load_cifar10(&root.join("cifar10"), split)?)?,
        DatasetKind::MultiMnist => {
            let source = limit(load_mnist(&root.join("mnist"), split)?)?;
            let seed = config.seed.wrapping_add(match split {
                Split::Train => 0,
                Split::Test => 1,
            });
            synthesize_multimnist(&source, config.multimnist_per_image, seed)?
        }
    };
    log::info!("loaded {} {} images from {}", ds.len(), split.as_str(), root.display());
    Ok(ds)
}

pub fn load_spec(root: &Path, spec: Option<&str>, subset: usize, config: &RunConfig) -> Result<Dataset> {
    let (kind, split) = match spec {
        Some(s) => parse_spec(s)?,
        None => (config.dataset, Split::Test),
    };
    let ds = load(root, kind, split, 0, config)?;
    Ok(if subset > 0 && subset < ds.len() { ds.take(subset)? } else { ds })
}
