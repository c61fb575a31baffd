//! Deterministic generation of small synthetic networks.
//!
//! Used by unit tests and the solver-equivalence harness to sample many
//! network shapes reproducibly.  Generated networks always satisfy the
//! constructor invariants and the stable-equilibrium condition with margin,
//! and bus 0 is always inertial, controlled, and a safety bus.

use crate::netmodel::PowerNetwork;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Generates a random connected network with a bus count drawn uniformly from
/// `[n_min, n_max]`.  The same seed always yields the same network.
pub fn random_network(seed: u64, n_min: usize, n_max: usize) -> PowerNetwork {
    assert!(2 <= n_min && n_min <= n_max);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(n_min..=n_max);

    // Random spanning tree, then a few extra edges.
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for i in 1..n {
        let j = rng.random_range(0..i);
        edges.push((j, i));
    }
    let extra = rng.random_range(0..=n / 2);
    for _ in 0..extra {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b && !edges.contains(&(a, b)) && !edges.contains(&(b, a)) {
            edges.push((a, b));
        }
    }

    let susceptance: Vec<f64> = (0..edges.len()).map(|_| rng.random_range(3.0..8.0)).collect();
    let inertia: Vec<f64> = (0..n)
        .map(|i| {
            if i > 0 && rng.random_bool(0.25) {
                0.0
            } else {
                rng.random_range(0.5..3.0)
            }
        })
        .collect();
    let damping: Vec<f64> = (0..n).map(|_| rng.random_range(0.3..1.5)).collect();

    // Balanced injections scaled to satisfy the equilibrium condition with
    // margin.
    let mut injection: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mean = injection.iter().sum::<f64>() / n as f64;
    for p in &mut injection {
        *p -= mean;
    }

    let mut controlled: Vec<usize> = (0..n).filter(|&i| i == 0 || rng.random_bool(0.6)).collect();
    controlled.sort_unstable();
    let safety: Vec<usize> = controlled
        .iter()
        .copied()
        .filter(|&i| inertia[i] > 0.0 && (i == 0 || rng.random_bool(0.5)))
        .collect();

    let mut net = PowerNetwork::new(
        edges,
        susceptance,
        inertia,
        damping,
        injection,
        controlled,
        safety,
    )
    .expect("generated network must be valid");

    // Shrink injections until the equilibrium condition holds with margin.
    for _ in 0..8 {
        let cond = net.check_equilibrium_condition();
        if cond.value <= 0.6 {
            break;
        }
        let scale = 0.5 / cond.value;
        let scaled: Vec<f64> = net.injection().iter().map(|&p| p * scale).collect();
        net = net.with_injection(scaled).expect("scaling keeps balance");
    }
    net
}

/// Edge list of the standard 39-bus / 46-line New England test topology,
/// 0-based.  Only the topology is standard; parameter sets layered on top of
/// it are synthetic.
pub fn standard_39bus_edges() -> Vec<(usize, usize)> {
    let one_based: [(usize, usize); 46] = [
        (1, 2),
        (1, 39),
        (2, 3),
        (2, 25),
        (2, 30),
        (3, 4),
        (3, 18),
        (4, 5),
        (4, 14),
        (5, 6),
        (5, 8),
        (6, 7),
        (6, 11),
        (6, 31),
        (7, 8),
        (8, 9),
        (9, 39),
        (10, 11),
        (10, 13),
        (10, 32),
        (12, 11),
        (12, 13),
        (13, 14),
        (14, 15),
        (15, 16),
        (16, 17),
        (16, 19),
        (16, 21),
        (16, 24),
        (17, 18),
        (17, 27),
        (19, 20),
        (19, 33),
        (20, 34),
        (21, 22),
        (22, 23),
        (22, 35),
        (23, 24),
        (23, 36),
        (25, 26),
        (25, 37),
        (26, 27),
        (26, 28),
        (26, 29),
        (28, 29),
        (29, 38),
    ];
    one_based.iter().map(|&(a, b)| (a - 1, b - 1)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_networks_are_valid_and_reproducible() {
        for seed in 0..30 {
            let a = random_network(seed, 2, 6);
            let b = random_network(seed, 2, 6);
            assert_eq!(a, b, "seed {seed} must be reproducible");
            assert!(a.n_buses() >= 2 && a.n_buses() <= 6);
            assert!(!a.safety().is_empty());
            assert!(a.check_equilibrium_condition().holds);
            assert!(a.inertia()[0] > 0.0);
        }
    }

    #[test]
    fn different_seeds_differ() {
        let a = random_network(1, 4, 4);
        let b = random_network(2, 4, 4);
        assert_ne!(a, b);
    }
}
