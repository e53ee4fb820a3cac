//! Naive target construction by walking raw episodes.

use dfp::agent::GoalSpec;
use dfp::memory::{Experience, ExperienceMemory, MeasurementNormalizer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const OFFSETS: [usize; 6] = [1, 2, 4, 8, 16, 32];

pub fn experience(episode: u64, step: u32, m: Vec<f32>, terminal: bool) -> Experience {
    Experience {
        sensory: vec![step as f32 / 1000.0, 1.0],
        measurements: m,
        action: step as usize % 3,
        goal: GoalSpec::new(vec![1.0; 2], vec![1.0; 2]),
        episode,
        step,
        terminal,
    }
}

/// Target by walking the raw episode directly.
pub fn naive_targets(episode: &[Vec<f32>], t: usize, scales: &[f64]) -> (Vec<f32>, Vec<f32>) {
    let mut target = Vec::new();
    let mut mask = Vec::new();
    for &tau in &OFFSETS {
        for j in 0..scales.len() {
            if t + tau < episode.len() {
                let d = (f64::from(episode[t + tau][j]) - f64::from(episode[t][j])) / scales[j];
                target.push(d as f32);
                mask.push(1.0);
            } else {
                target.push(0.0);
                mask.push(0.0);
            }
        }
    }
    (target, mask)
}

/// Stores `episodes` random episodes (lengths 1..80, so many end before the
/// longest offset) and counts steps whose targets differ from the naive walk.
/// Returns `(steps checked, mismatches)`.
pub fn target_oracle_mismatches(episodes: u64, seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scales = vec![3.0, 0.25];
    let normalizer = MeasurementNormalizer::new(scales.clone()).unwrap();
    let mut memory = ExperienceMemory::new(1_000_000, &OFFSETS).unwrap();
    let mut stored = Vec::new();
    for e in 0..episodes {
        let len = rng.random_range(1..80);
        let ep: Vec<Vec<f32>> = (0..len)
            .map(|_| vec![rng.random_range(-50.0..50.0), rng.random_range(0.0..1.0)])
            .collect();
        for (t, m) in ep.iter().enumerate() {
            memory.append(experience(e, t as u32, m.clone(), t + 1 == len)).unwrap();
        }
        stored.push(ep);
    }
    let mut index = 0;
    let mut mismatches = 0;
    for ep in &stored {
        for t in 0..ep.len() {
            if memory.compute_targets(index, &OFFSETS, &normalizer).unwrap() != naive_targets(ep, t, &scales) {
                mismatches += 1;
            }
            index += 1;
        }
    }
    assert_eq!(memory.eligible_count(), memory.len());
    (index, mismatches)
}
