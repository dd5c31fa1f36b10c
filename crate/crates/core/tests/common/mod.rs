#![allow(dead_code)]

use std::path::Path;

use hdrev_core::crf::shipped_basis;
use hdrev_core::forward::exposure_grid;
use hdrev_core::harness::scenes::write_scenes;
use hdrev_core::harness::{
    load_split, synth_dataset, DatasetManifest, LoadedSample, Split, SynthOptions,
};
use hdrev_core::nets::{HeadInits, ModelBundle, NetConfig, Preset};

/// Synthesizes `scenes` square scenes of side `size` at five exposures
/// under `crfs` response curves, holding one scene out for testing.
pub fn synth(dir: &Path, scenes: usize, size: usize, crfs: usize, seed: u64) -> DatasetManifest {
    write_scenes(dir.join("hdr"), scenes, size, size, seed).unwrap();
    let grid = exposure_grid(5, -2.0, 2.0).unwrap();
    let opts = SynthOptions::new(grid, crfs, seed);
    synth_dataset(dir.join("hdr"), shipped_basis(), &opts, dir.join("data")).unwrap()
}

pub fn splits(m: &DatasetManifest) -> (Vec<LoadedSample>, Vec<LoadedSample>) {
    (
        load_split(m, Split::Train).unwrap(),
        load_split(m, Split::Test).unwrap(),
    )
}

pub fn toy_bundle(seed: u64) -> ModelBundle {
    ModelBundle::init(
        NetConfig::for_preset(Preset::Toy),
        shipped_basis().clone(),
        HeadInits::default(),
        seed,
    )
    .unwrap()
}
