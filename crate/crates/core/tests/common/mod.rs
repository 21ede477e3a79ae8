#![allow(dead_code)]

use fedsel::config::{ClientOverride, DatasetConfig, PolicyKind, RunConfig};
use fedsel::data::PartitionScheme;

pub const SLOW_CLIENTS: [usize; 3] = [0, 1, 2];

/// Catalog indices for the three weakest devices and the slowest link.
const SLOW_HARDWARE: [usize; 3] = [5, 6, 7];
const SLOWEST_LINK: usize = 0;
/// Every other device, and the three faster links.
const FAST_HARDWARE: [usize; 9] = [0, 1, 2, 3, 4, 8, 9, 10, 11];
const FAST_LINKS: [usize; 3] = [1, 2, 3];

/// Ten-class blobs over 50 clients where three clients sit on weak devices
/// behind the slowest link. Uses the standard 50-client hyperparameters:
/// E=5, B=50, lr 0.001, momentum 0.99, eps 0.9 -> 0.2, initial reputation 1/50.
pub fn heterogeneous_blobs(policy: PolicyKind, seed: u64, rounds: usize) -> RunConfig {
    let mut cfg = RunConfig {
        num_clients: 50,
        clients_per_round: 5,
        total_rounds: rounds,
        local_epochs: 5,
        batch_size: 50,
        learning_rate: 0.001,
        momentum: 0.99,
        dataset: DatasetConfig::Synthetic {
            num_classes: 10,
            input_dim: 20,
            samples_per_class: 600,
            spread: 1.0,
        },
        partition: PartitionScheme::HeteroDirichlet {
            alpha: 0.5,
            min_size: 10,
        },
        policy,
        seed,
        ..RunConfig::default()
    };
    cfg.score.psi_init = 1.0 / 50.0;
    cfg.agent.eps_init = 0.9;
    cfg.agent.eps_end = 0.2;
    cfg.hardware.overrides = (0..cfg.num_clients)
        .map(|k| {
            let (hw, link) = match SLOW_CLIENTS.iter().position(|&s| s == k) {
                Some(i) => (SLOW_HARDWARE[i], SLOWEST_LINK),
                None => (FAST_HARDWARE[k % FAST_HARDWARE.len()], FAST_LINKS[k % FAST_LINKS.len()]),
            };
            ClientOverride {
                client: k,
                hardware: Some(hw),
                protocol: Some(link),
                cycles_per_bit: None,
            }
        })
        .collect();
    cfg
}

/// A few clients and rounds; runs in well under a second.
pub fn tiny(policy: PolicyKind, seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        num_clients: 8,
        clients_per_round: 3,
        total_rounds: 6,
        local_epochs: 2,
        batch_size: 8,
        dataset: DatasetConfig::Synthetic {
            num_classes: 4,
            input_dim: 5,
            samples_per_class: 40,
            spread: 0.5,
        },
        partition: PartitionScheme::HeteroDirichlet {
            alpha: 0.8,
            min_size: 3,
        },
        policy,
        seed,
        ..RunConfig::default()
    };
    cfg.agent.k_pca = 4;
    cfg.agent.hidden_dim = 16;
    cfg.agent.batch_size = 4;
    cfg
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
