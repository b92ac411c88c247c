//! Shared fixtures for the benchmarks.

use shapcast::model::{ModelConfig, ModelParams};
use shapcast::schema::ForecastExample;
use shapcast::synthgen::{DatasetSpec, Split};

/// A desk-sized model and one synthetic test example.
pub fn fixture() -> (ModelParams, ForecastExample) {
    let spec = DatasetSpec::new(1, 1, 1, 11).expect("valid sizes");
    let params = ModelParams::init(&ModelConfig::desk(), &spec.schema(), 3).expect("valid config");
    let (example, _) = spec.example(Split::Test, 0);
    (params, example)
}
