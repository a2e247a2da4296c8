//! Shared fixtures for the criterion benches: an untrained model at the
//! default geometry and a handful of synthetic images.

use karl_core::data::{make_synthetic, DatasetSpec, Family, Split};
use karl_core::{BaseTokenizer, ExperimentConfig, Image, KarlModel, Result};

pub struct Fixture {
    pub config: ExperimentConfig,
    pub base: BaseTokenizer,
    pub model: KarlModel,
    pub images: Vec<Image>,
}

/// Weights are random; timings do not depend on training.
pub fn fixture() -> Result<Fixture> {
    let config = ExperimentConfig::default();
    let base = BaseTokenizer::new(config.base.clone(), 1)?;
    let model = KarlModel::new(config.model.clone(), config.base.clone(), 2)?;
    let spec = DatasetSpec::synthetic(Split::Val, config.base.image_size, config.base.channels, 2, 3);
    let images = Family::ALL
        .iter()
        .flat_map(|&f| make_synthetic(f, &spec, &config.data))
        .collect();
    Ok(Fixture {
        config,
        base,
        model,
        images,
    })
}
