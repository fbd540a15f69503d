mod common;

use stlr::adapters::{self, AdapterConfig, AdapterVariant};
use stlr::decoding::{self, DecodeSettings};
use stlr::seq2seq::{init_model, ModelConfig};

#[test]
fn identity_round_trip_and_counts() {
    common::check_adapter_properties().assert();
}

#[test]
fn fresh_sidecar_leaves_generation_unchanged() {
    let base = init_model(&ModelConfig {
        high_precision: false,
        ..common::tiny_config(2)
    })
    .unwrap();
    let contexts: Vec<Vec<usize>> = (0..8).map(|i| vec![4 + i % 8, 5, 6 + i % 5]).collect();
    let plain = decoding::generate_batch(&base, &contexts, &DecodeSettings::default()).unwrap();
    for v in AdapterVariant::ALL {
        let styled = adapters::inject_adapters(&base, &AdapterConfig::new(v, 4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        adapters::save_sidecar(&styled, dir.path()).unwrap();
        let reloaded = adapters::attach_sidecar(&base, dir.path()).unwrap();
        assert_eq!(decoding::generate_batch(&reloaded, &contexts, &DecodeSettings::default()).unwrap(), plain, "{v}");
    }
}
