//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedblocks_core::{Experiment, ExperimentConfig, LocalRule};

/// A 100-client logistic problem with `d` features, ready for one round.
pub fn experiment(rule: LocalRule, d: usize, blocks: usize) -> Experiment {
    let text = format!(
        "master_seed = 1\nproblem.n = 5000\nproblem.d = {d}\nfederation.clients = 100\nfederation.sample = 10\n\
         federation.blocks = {blocks}\nfederation.rounds = 1\nlocal.rule = {rule}\nlocal.steps = 10\n\
         local.batch = 50\nlocal.control_init = gradient\npartition.rho = 0.1\n"
    );
    let cfg = ExperimentConfig::parse(&text).expect("bench config is valid");
    Experiment::build(&cfg).expect("bench experiment builds")
}

/// A dense vector with entries in (-1, 1).
pub fn vector(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}
