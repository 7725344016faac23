//! Fixtures shared by the benchmarks.

use fairrank::datagen::{generate, GenConfig};
use fairrank::graph::ReviewGraph;
use fairrank::train::{AprimeSource, DetectorVariant, Problem, TrainingConfig};

/// Graph of a generator preset.
pub fn preset_graph(name: &str) -> ReviewGraph {
    generate(&GenConfig::preset(name).expect("known preset")).expect("preset generates").graph
}

/// Joint training configuration with mixup on protected training spams.
pub fn joint_config() -> TrainingConfig {
    TrainingConfig {
        aprime: AprimeSource::Joint,
        variant: DetectorVariant::GnnS1Tr,
        ..TrainingConfig::default()
    }
}

pub fn problem(g: &ReviewGraph, cfg: &TrainingConfig) -> Problem {
    Problem::new(g, cfg).expect("problem builds")
}
