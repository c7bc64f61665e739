//! Shared fixtures for the benchmarks.

use splatfield::oracle::{make_oracle_scene, Dataset};
use splatfield::trainer::TrainView;

/// Training views of the standard five-class oracle scene.
pub fn oracle_views(per_class: usize, seed: u64) -> (Dataset, Vec<TrainView>) {
    let scene = make_oracle_scene(5, per_class, 32, seed).expect("valid scene parameters");
    let ds = Dataset::from_scene(&scene, None);
    let views = ds.train_views(true);
    (ds, views)
}
