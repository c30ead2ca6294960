#![allow(dead_code)]

use omnisearch::config::RunConfig;
use omnisearch::dataset::{generate_synthetic_world, SynthConfig};
use omnisearch::pipeline::Workspace;

/// A world and training budget small enough for a full pipeline in seconds.
pub fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.world = SynthConfig {
        entities: 300,
        queries: 80,
        topics: 5,
        days: 60,
        pairs_per_day: 20,
        query_pairs_per_day: 4,
        ..SynthConfig::default()
    };
    c.train.steps = 40;
    c.train.batch_size = 32;
    c.train.negatives = 32;
    c.eval.m = 200;
    c.simulate.requests = 2000;
    c
}

pub fn small_workspace() -> Workspace {
    let c = small_config();
    let world = generate_synthetic_world(c.seed, &c.world).unwrap();
    Workspace::new(c, world).unwrap()
}
