//! Experience memory, future-change targets and measurement normalization.

use std::collections::{HashMap, VecDeque};

use rand::Rng;

use crate::agent::GoalSpec;
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::predictor::TrainingBatch;

pub const DEFAULT_CAPACITY: usize = 20_000;
pub const DEFAULT_OFFSETS: [usize; 6] = [1, 2, 4, 8, 16, 32];

/// One agent step as handed to the memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Experience {
    /// Sensory values in [0, 1]. Stored at 8-bit precision; 0 and 1 are exact.
    pub sensory: Vec<f32>,
    /// Raw measurements.
    pub measurements: Vec<f32>,
    pub action: usize,
    pub goal: GoalSpec,
    pub episode: u64,
    pub step: u32,
    /// Set on the final observation of an episode, which has no action of
    /// its own and exists so earlier steps can see the final measurements.
    pub terminal: bool,
}

#[derive(Clone, Debug)]
struct Stored {
    sensory: Vec<u8>,
    action: usize,
    goal: GoalSpec,
    episode: u64,
    step: u32,
    terminal: bool,
}

/// Measurement trajectory of one episode, kept while any of its steps is in
/// memory or the episode is still running.
#[derive(Clone, Debug, Default)]
struct Track {
    measurements: Vec<Vec<f32>>,
    terminated: bool,
    retained: usize,
}

#[derive(Clone, Debug)]
pub struct ExperienceMemory {
    capacity: usize,
    offsets: Vec<usize>,
    items: VecDeque<Stored>,
    tracks: HashMap<u64, Track>,
    inserted: u64,
    sensory_len: Option<usize>,
    measurement_len: Option<usize>,
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn dequantize_table() -> [f32; 256] {
    std::array::from_fn(|q| q as f32 / 255.0)
}

impl ExperienceMemory {
    pub fn new(capacity: usize, offsets: &[usize]) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid_argument("memory capacity must be positive"));
        }
        check_offsets(offsets)?;
        Ok(ExperienceMemory {
            capacity,
            offsets: offsets.to_vec(),
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            tracks: HashMap::new(),
            inserted: 0,
            sensory_len: None,
            measurement_len: None,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Total number of experiences ever appended.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    fn max_offset(&self) -> usize {
        *self.offsets.last().expect("offsets are non-empty")
    }

    /// Appends one experience, evicting the oldest at capacity. Steps of an
    /// episode must arrive in order starting from 0, and nothing may follow
    /// an episode's terminal step.
    pub fn append(&mut self, exp: Experience) -> Result<()> {
        if *self.sensory_len.get_or_insert(exp.sensory.len()) != exp.sensory.len() {
            return Err(Error::shape("sensory length differs from earlier experiences"));
        }
        if *self.measurement_len.get_or_insert(exp.measurements.len()) != exp.measurements.len() {
            return Err(Error::shape("measurement count differs from earlier experiences"));
        }
        match self.tracks.get(&exp.episode) {
            None if exp.step != 0 => {
                return Err(Error::invalid_argument(format!(
                    "episode {} starts at step {} instead of 0",
                    exp.episode, exp.step
                )))
            }
            Some(track) if track.terminated => {
                return Err(Error::invalid_state(format!("episode {} already terminated", exp.episode)))
            }
            Some(track) if track.measurements.len() != exp.step as usize => {
                return Err(Error::invalid_argument(format!(
                    "episode {} expected step {}, got {}",
                    exp.episode,
                    track.measurements.len(),
                    exp.step
                )))
            }
            _ => {}
        }
        if self.items.len() == self.capacity {
            self.evict_oldest();
        }
        let track = self.tracks.entry(exp.episode).or_default();
        track.measurements.push(exp.measurements);
        track.terminated = exp.terminal;
        track.retained += 1;
        self.items.push_back(Stored {
            sensory: exp.sensory.iter().map(|&v| quantize(v)).collect(),
            action: exp.action,
            goal: exp.goal,
            episode: exp.episode,
            step: exp.step,
            terminal: exp.terminal,
        });
        self.inserted += 1;
        Ok(())
    }

    fn evict_oldest(&mut self) {
        let Some(old) = self.items.pop_front() else { return };
        let track = self.tracks.get_mut(&old.episode).expect("track of stored experience");
        track.retained -= 1;
        if track.retained == 0 && track.terminated {
            self.tracks.remove(&old.episode);
        }
    }

    /// The experience at `index`, 0 being the oldest retained.
    pub fn get(&self, index: usize) -> Result<Experience> {
        let item = self.item(index)?;
        let table = dequantize_table();
        Ok(Experience {
            sensory: item.sensory.iter().map(|&q| table[q as usize]).collect(),
            measurements: self.tracks[&item.episode].measurements[item.step as usize].clone(),
            action: item.action,
            goal: item.goal.clone(),
            episode: item.episode,
            step: item.step,
            terminal: item.terminal,
        })
    }

    fn item(&self, index: usize) -> Result<&Stored> {
        self.items.get(index).ok_or_else(|| {
            Error::invalid_argument(format!("index {index} out of range (memory holds {})", self.items.len()))
        })
    }

    /// Future-change targets for the experience at `index`, offset-major
    /// over all measurements, with a mask that is 0 where the offset runs
    /// past the recorded end of the episode.
    pub fn compute_targets(
        &self,
        index: usize,
        offsets: &[usize],
        normalizer: &MeasurementNormalizer,
    ) -> Result<(Vec<f32>, Vec<f32>)> {
        let item = self.item(index)?;
        let all: Vec<usize> = (0..self.measurement_len.unwrap_or(0)).collect();
        Ok(self.targets_for(item, offsets, &all, normalizer))
    }

    fn targets_for(
        &self,
        item: &Stored,
        offsets: &[usize],
        measurements: &[usize],
        normalizer: &MeasurementNormalizer,
    ) -> (Vec<f32>, Vec<f32>) {
        let track = &self.tracks[&item.episode];
        let t = item.step as usize;
        let now = &track.measurements[t];
        let n_m = measurements.len();
        let mut target = vec![0.0; offsets.len() * n_m];
        let mut mask = vec![0.0; offsets.len() * n_m];
        for (i, &tau) in offsets.iter().enumerate() {
            let Some(future) = track.measurements.get(t + tau) else { continue };
            for (j, &k) in measurements.iter().enumerate() {
                target[i * n_m + j] = normalizer.difference(k, future[k], now[k]);
                mask[i * n_m + j] = 1.0;
            }
        }
        (target, mask)
    }

    fn eligible(&self, item: &Stored) -> bool {
        let track = &self.tracks[&item.episode];
        track.terminated || track.measurements.len() > item.step as usize + self.max_offset()
    }

    /// Number of experiences that may currently be sampled: every step of a
    /// terminated episode, and steps of running episodes once the episode
    /// has advanced beyond them by the largest offset.
    pub fn eligible_count(&self) -> usize {
        let max = self.max_offset();
        let pending: usize = self
            .tracks
            .values()
            .filter(|t| !t.terminated)
            .map(|t| t.retained.min(max))
            .sum();
        self.items.len() - pending
    }

    /// Draws `batch_size` eligible experiences uniformly with replacement and
    /// assembles a network-ready batch. `predicted` selects the measurements
    /// that appear in targets; input measurements are always the full
    /// normalized vector. Returns the batch and the sampled indices.
    pub fn sample_minibatch<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        normalizer: &MeasurementNormalizer,
        predicted: &[usize],
        rng: &mut R,
    ) -> Result<(TrainingBatch, Vec<usize>)> {
        if self.items.is_empty() {
            return Err(Error::invalid_state("cannot sample from an empty memory"));
        }
        let eligible = self.eligible_count();
        if eligible == 0 {
            return Err(Error::invalid_state("no experience is eligible for sampling yet"));
        }
        let n_meas = self.measurement_len.unwrap_or(0);
        if let Some(&k) = predicted.iter().find(|&&k| k >= n_meas) {
            return Err(Error::invalid_argument(format!("predicted measurement {k} out of range")));
        }
        if normalizer.len() != n_meas {
            return Err(Error::shape("normalizer does not match the stored measurements"));
        }

        let indices: Vec<usize> = if eligible * 2 >= self.items.len() {
            (0..batch_size)
                .map(|_| loop {
                    let i = rng.random_range(0..self.items.len());
                    if self.eligible(&self.items[i]) {
                        break i;
                    }
                })
                .collect()
        } else {
            let pool: Vec<usize> = (0..self.items.len()).filter(|&i| self.eligible(&self.items[i])).collect();
            (0..batch_size).map(|_| pool[rng.random_range(0..pool.len())]).collect()
        };

        let table = dequantize_table();
        let sensory_len = self.sensory_len.unwrap_or(0);
        let dim_f = self.offsets.len() * predicted.len();
        let mut batch = TrainingBatch {
            sensory: Vec::with_capacity(batch_size * sensory_len),
            measurements: Vec::with_capacity(batch_size * n_meas),
            goals: Vec::with_capacity(batch_size * dim_f),
            actions: Vec::with_capacity(batch_size),
            targets: Vec::with_capacity(batch_size * dim_f),
            masks: Vec::with_capacity(batch_size * dim_f),
        };
        for &i in &indices {
            let item = &self.items[i];
            batch.sensory.extend(item.sensory.iter().map(|&q| table[q as usize]));
            let m = &self.tracks[&item.episode].measurements[item.step as usize];
            batch.measurements.extend(normalizer.normalize_input(m));
            let goal = item.goal.flatten();
            if goal.len() != dim_f {
                return Err(Error::shape(format!(
                    "stored goal flattens to {} values, expected {dim_f}",
                    goal.len()
                )));
            }
            batch.goals.extend(goal);
            batch.actions.push(item.action);
            let (target, mask) = self.targets_for(item, &self.offsets, predicted, normalizer);
            batch.targets.extend(target);
            batch.masks.extend(mask);
        }
        Ok((batch, indices))
    }
}

fn check_offsets(offsets: &[usize]) -> Result<()> {
    if offsets.is_empty() {
        return Err(Error::invalid_argument("at least one offset is required"));
    }
    if offsets[0] == 0 || offsets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid_argument("offsets must be strictly increasing positive integers"));
    }
    Ok(())
}

/// Per-measurement scale factors. Arithmetic is done in `f64` so that
/// [`denormalize`](Self::denormalize) exactly inverts
/// [`normalize`](Self::normalize) for every finite `f32` input.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementNormalizer {
    scales: Vec<f64>,
}

/// Fixed scales for (ammo, health, frags) used with the a1 preset.
pub const A1_SCALES: [f64; 3] = [7.5, 30.0, 1.0];

const MIN_SCALE: f64 = 1e-6;

impl MeasurementNormalizer {
    pub fn new(scales: Vec<f64>) -> Result<Self> {
        if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid_argument("scales must be positive and finite"));
        }
        Ok(MeasurementNormalizer { scales })
    }

    pub fn identity(n: usize) -> Self {
        MeasurementNormalizer { scales: vec![1.0; n] }
    }

    pub fn a1() -> Self {
        MeasurementNormalizer {
            scales: A1_SCALES.to_vec(),
        }
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    pub fn normalize(&self, m: &[f32]) -> Vec<f64> {
        m.iter().zip(&self.scales).map(|(&v, &s)| f64::from(v) / s).collect()
    }

    pub fn denormalize(&self, n: &[f64]) -> Vec<f32> {
        n.iter().zip(&self.scales).map(|(&v, &s)| (v * s) as f32).collect()
    }

    /// Normalized measurements as network input.
    pub fn normalize_input<'a>(&'a self, m: &'a [f32]) -> impl Iterator<Item = f32> + 'a {
        m.iter()
            .zip(&self.scales)
            .map(|(&v, &s)| (f64::from(v) / s) as f32)
    }

    /// `normalized(later) − normalized(earlier)` for measurement `j`.
    pub fn difference(&self, j: usize, later: f32, earlier: f32) -> f32 {
        let s = self.scales[j];
        (f64::from(later) / s - f64::from(earlier) / s) as f32
    }

    pub fn to_list(&self) -> String {
        crate::config::join_list(&self.scales)
    }
}

/// Population standard deviation of each measurement over the states a
/// uniformly random policy visits in `steps` environment steps. Scales
/// below 1e-6 become 1.
pub fn calibrate_normalizer<E: Environment + ?Sized, R: Rng + ?Sized>(
    env: &mut E,
    steps: usize,
    rng: &mut R,
) -> Result<MeasurementNormalizer> {
    if steps < 1000 {
        return Err(Error::invalid_argument("calibration needs at least 1000 steps"));
    }
    let spec = env.spec();
    let n = spec.measurements.len();
    let mut count = 0u64;
    let mut mean = vec![0.0f64; n];
    let mut m2 = vec![0.0f64; n];
    let mut observe = |m: &[f32]| {
        count += 1;
        for j in 0..n {
            let x = f64::from(m[j]);
            let delta = x - mean[j];
            mean[j] += delta / count as f64;
            m2[j] += delta * (x - mean[j]);
        }
    };
    let mut obs = env.reset(rng.random());
    observe(&obs.measurements);
    for _ in 0..steps {
        let t = env.step(rng.random_range(0..spec.actions))?;
        observe(&t.observation.measurements);
        obs = if t.terminal {
            let o = env.reset(rng.random());
            observe(&o.measurements);
            o
        } else {
            t.observation
        };
    }
    drop(obs);
    let scales = m2
        .iter()
        .map(|&s| {
            let sd = (s / count as f64).sqrt();
            if sd < MIN_SCALE {
                1.0
            } else {
                sd
            }
        })
        .collect();
    MeasurementNormalizer::new(scales)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn goal() -> GoalSpec {
        GoalSpec::new(vec![1.0], vec![1.0, 1.0, 1.0])
    }

    fn exp(episode: u64, step: u32, m: f32, terminal: bool) -> Experience {
        Experience {
            sensory: vec![0.0, 1.0],
            measurements: vec![m],
            action: 0,
            goal: goal(),
            episode,
            step,
            terminal,
        }
    }

    #[test]
    fn fifo_eviction() {
        let mut mem = ExperienceMemory::new(3, &[1]).unwrap();
        for s in 0..4 {
            mem.append(exp(0, s, s as f32, false)).unwrap();
        }
        assert_eq!(mem.len(), 3);
        let steps: Vec<u32> = (0..3).map(|i| mem.get(i).unwrap().step).collect();
        assert_eq!(steps, vec![1, 2, 3]);
    }

    #[test]
    fn direct_differences() {
        let mut mem = ExperienceMemory::new(10, &[1, 2, 4]).unwrap();
        for (s, m) in [10.0, 12.0, 9.0, 11.0, 15.0].into_iter().enumerate() {
            mem.append(exp(0, s as u32, m, s == 4)).unwrap();
        }
        let norm = MeasurementNormalizer::identity(1);
        let (f, mask) = mem.compute_targets(0, &[1, 2, 4], &norm).unwrap();
        assert_eq!(f, vec![2.0, -1.0, 5.0]);
        assert_eq!(mask, vec![1.0; 3]);
        let (f, mask) = mem.compute_targets(4, &[1, 2, 4], &norm).unwrap();
        assert_eq!((f, mask), (vec![0.0; 3], vec![0.0; 3]));
    }

    #[test]
    fn offsets_past_the_end_are_masked() {
        let mut mem = ExperienceMemory::new(100, &DEFAULT_OFFSETS).unwrap();
        for s in 0..10 {
            mem.append(exp(0, s, 1.0, s == 9)).unwrap();
        }
        let (_, mask) = mem
            .compute_targets(0, &DEFAULT_OFFSETS, &MeasurementNormalizer::identity(1))
            .unwrap();
        assert_eq!(mask, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn out_of_order_steps_rejected() {
        let mut mem = ExperienceMemory::new(10, &[1]).unwrap();
        assert!(mem.append(exp(0, 1, 0.0, false)).is_err());
        mem.append(exp(0, 0, 0.0, true)).unwrap();
        assert!(matches!(mem.append(exp(0, 1, 0.0, false)), Err(Error::InvalidState(_))));
    }

    #[test]
    fn single_eligible_item_is_repeated() {
        let mut mem = ExperienceMemory::new(10, &[1, 2, 3]).unwrap();
        mem.append(exp(0, 0, 1.0, true)).unwrap();
        let mut rng = rand::rng();
        let (batch, idx) = mem
            .sample_minibatch(4, &MeasurementNormalizer::identity(1), &[0], &mut rng)
            .unwrap();
        assert_eq!(idx, vec![0; 4]);
        assert_eq!(batch.len(), 4);
    }

    #[test]
    fn empty_memory_cannot_sample() {
        let mem = ExperienceMemory::new(10, &[1]).unwrap();
        let mut rng = rand::rng();
        let r = mem.sample_minibatch(4, &MeasurementNormalizer::identity(1), &[0], &mut rng);
        assert!(matches!(r, Err(Error::InvalidState(_))));
    }

    #[test]
    fn terminal_flag_survives_eviction_of_earlier_steps() {
        let mut mem = ExperienceMemory::new(2, &[1]).unwrap();
        for s in 0..4 {
            mem.append(exp(7, s, s as f32, s == 3)).unwrap();
        }
        let last = mem.get(1).unwrap();
        assert!(last.terminal);
        assert_eq!(last.measurements, vec![3.0]);
        let (f, mask) = mem
            .compute_targets(0, &[1], &MeasurementNormalizer::identity(1))
            .unwrap();
        assert_eq!((f, mask), (vec![1.0], vec![1.0]));
    }

    #[test]
    fn eligibility_counts() {
        let mut mem = ExperienceMemory::new(100, &[1, 2]).unwrap();
        for s in 0..5 {
            mem.append(exp(0, s, 0.0, false)).unwrap();
        }
        assert_eq!(mem.eligible_count(), 3);
        mem.append(exp(0, 5, 0.0, true)).unwrap();
        assert_eq!(mem.eligible_count(), 6);
    }

    #[test]
    fn scales_must_be_positive() {
        assert!(MeasurementNormalizer::new(vec![0.0]).is_err());
        assert!(MeasurementNormalizer::new(vec![f64::NAN]).is_err());
    }
}
