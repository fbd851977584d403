//! Experience replay with curiosity-driven prioritisation weights.

use rand::Rng;

use crate::env::Observation;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Transition {
    pub obs: Observation,
    pub action: Vec<f32>,
    /// Extrinsic reward, stored raw.
    pub reward: f32,
    pub done: bool,
    pub next_obs: Observation,
    /// Prioritisation weight in `[0, 1]`.
    pub weight: f64,
}

impl Transition {
    pub fn new(obs: Observation, action: Vec<f32>, reward: f32, done: bool, next_obs: Observation) -> Self {
        Self {
            obs,
            action,
            reward,
            done,
            next_obs,
            weight: 1.0,
        }
    }
}

/// One momentum step of a prioritisation weight:
/// `β·w + ½(1 − β)(c + c′)`.
pub fn momentum_weight(w: f64, c: f64, c_next: f64, beta: f64) -> Result<f64> {
    for (name, v) in [("w", w), ("c", c), ("c'", c_next), ("beta", beta)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("{name} = {v} outside [0, 1]")));
        }
    }
    Ok(beta * w + 0.5 * (1.0 - beta) * (c + c_next))
}

/// FIFO ring buffer sampled in proportion to per-transition weights.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
    cumulative: Vec<f64>,
    stale: bool,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            items: Vec::new(),
            next: 0,
            cumulative: Vec::new(),
            stale: true,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, index: usize) -> &Transition {
        &self.items[index]
    }

    /// Stores `t` with weight 1, evicting the oldest entry when full.
    /// Returns the slot written.
    pub fn push(&mut self, mut t: Transition) -> usize {
        t.weight = 1.0;
        let slot = self.next;
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[slot] = t;
        }
        self.next = (slot + 1) % self.capacity;
        self.stale = true;
        slot
    }

    fn total(&mut self) -> f64 {
        if self.stale {
            self.cumulative.clear();
            let mut acc = 0.0;
            for t in &self.items {
                acc += t.weight;
                self.cumulative.push(acc);
            }
            self.stale = false;
        }
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    /// Replay probability `w_i / Σ w`.
    pub fn probability(&mut self, index: usize) -> f64 {
        let total = self.total();
        self.items[index].weight / total
    }

    /// `batch` independent draws with replacement, proportional to weight.
    pub fn sample(&mut self, batch: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if self.items.is_empty() {
            return Err(Error::invalid("cannot sample from an empty replay buffer"));
        }
        let total = self.total();
        if total <= 0.0 {
            return Err(Error::invalid("replay weights sum to zero"));
        }
        let last = self.items.len() - 1;
        Ok((0..batch)
            .map(|_| {
                let u = rng.random::<f64>() * total;
                self.cumulative.partition_point(|&s| s <= u).min(last)
            })
            .collect())
    }

    /// `batch` uniform draws with replacement, ignoring weights.
    pub fn sample_uniform(&self, batch: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if self.items.is_empty() {
            return Err(Error::invalid("cannot sample from an empty replay buffer"));
        }
        Ok((0..batch).map(|_| rng.random_range(0..self.items.len())).collect())
    }

    /// Applies one momentum update to the weight of `index`.
    pub fn update_weight(&mut self, index: usize, c: f64, c_next: f64, beta: f64) -> Result<f64> {
        let t = self
            .items
            .get_mut(index)
            .ok_or_else(|| Error::invalid(format!("replay index {index} out of range")))?;
        t.weight = momentum_weight(t.weight, c, c_next, beta)?;
        self.stale = true;
        Ok(t.weight)
    }

    pub fn set_weight(&mut self, index: usize, w: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::invalid(format!("weight {w} outside [0, 1]")));
        }
        self.items[index].weight = w;
        self.stale = true;
        Ok(())
    }

    /// Mean, min and max weight.
    pub fn weight_stats(&self) -> (f64, f64, f64) {
        if self.items.is_empty() {
            return (0.0, 0.0, 0.0);
        }
        let (mut sum, mut lo, mut hi) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
        for t in &self.items {
            sum += t.weight;
            lo = lo.min(t.weight);
            hi = hi.max(t.weight);
        }
        (sum / self.items.len() as f64, lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn dummy(tag: u8) -> Transition {
        let o = Observation::new(1, 1, 1, vec![tag]).unwrap();
        Transition::new(o.clone(), vec![0.0], tag as f32, false, o)
    }

    #[test]
    fn single_push() {
        let mut b = ReplayBuffer::new(4).unwrap();
        b.push(dummy(0));
        assert_eq!(b.len(), 1);
        assert_eq!(b.probability(0), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(b.sample(1, &mut rng).unwrap(), vec![0]);
    }

    #[test]
    fn fifo_eviction() {
        let mut b = ReplayBuffer::new(3).unwrap();
        for k in 0..3 {
            b.push(dummy(k));
        }
        assert_eq!(b.push(dummy(9)), 0);
        assert_eq!(b.len(), 3);
        assert_eq!(b.get(0).reward, 9.0);
        assert_eq!(b.get(1).reward, 1.0);
    }

    #[test]
    fn normalised_probabilities() {
        let mut b = ReplayBuffer::new(3).unwrap();
        for k in 0..3 {
            b.push(dummy(k));
        }
        b.set_weight(1, 0.5).unwrap();
        b.set_weight(2, 0.5).unwrap();
        let p: Vec<f64> = (0..3).map(|i| b.probability(i)).collect();
        assert_eq!(p, vec![0.5, 0.25, 0.25]);
    }

    #[test]
    fn empty_sample_rejected() {
        let mut b = ReplayBuffer::new(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(b.sample(1, &mut rng).is_err());
        assert!(b.sample_uniform(1, &mut rng).is_err());
    }

    #[test]
    fn equal_weights_sample_uniformly() {
        let mut b = ReplayBuffer::new(10).unwrap();
        for k in 0..10 {
            b.push(dummy(k));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut counts = [0f64; 10];
        for i in b.sample(100_000, &mut rng).unwrap() {
            counts[i] += 1.0;
        }
        let e = 10_000.0;
        let stat: f64 = counts.iter().map(|o| (o - e).powi(2) / e).sum();
        assert!(stat < ChiSquared::new(9.0).unwrap().inverse_cdf(0.99));
    }

    #[test]
    fn dominant_weight_frequency() {
        let mut b = ReplayBuffer::new(5).unwrap();
        for k in 0..5 {
            b.push(dummy(k));
        }
        for i in 1..5 {
            b.set_weight(i, 1e-3).unwrap();
        }
        let p = b.probability(0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let hits = b.sample(n, &mut rng).unwrap().iter().filter(|&&i| i == 0).count();
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        assert!((hits as f64 / n as f64 - p).abs() < 5.0 * sd);
    }

    #[test]
    fn momentum_edges() {
        assert_eq!(momentum_weight(0.3, 0.9, 0.1, 1.0).unwrap(), 0.3);
        assert!((momentum_weight(0.3, 0.9, 0.1, 0.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(momentum_weight(0.3, 1.2, 0.1, 0.5).is_err());
        assert!(momentum_weight(0.3, 0.2, 0.1, -0.1).is_err());
    }

    #[test]
    fn momentum_closed_form_at_100() {
        let mut w = 1.0;
        for _ in 0..100 {
            w = momentum_weight(w, 0.4, 0.4, 0.99).unwrap();
        }
        let closed = 0.99f64.powi(100) + 0.4 * (1.0 - 0.99f64.powi(100));
        assert!((w - closed).abs() < 1e-12);
        assert!((w - 0.6196).abs() < 1e-4);
    }

    #[test]
    fn update_touches_only_its_index() {
        let mut b = ReplayBuffer::new(3).unwrap();
        for k in 0..3 {
            b.push(dummy(k));
        }
        b.update_weight(1, 0.0, 0.0, 0.5).unwrap();
        assert_eq!(b.get(0).weight, 1.0);
        assert_eq!(b.get(1).weight, 0.5);
        assert_eq!(b.get(2).weight, 1.0);
        assert_eq!(b.weight_stats(), (2.5 / 3.0, 0.5, 1.0));
    }
}
