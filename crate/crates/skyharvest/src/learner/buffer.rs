use std::collections::VecDeque;

use rand::Rng;

/// One stored episode. Index t of `obs`, `masks` and `states` is the
/// situation before transition t; index T is the terminal situation. All
/// episodes here terminate naturally (batteries deplete), so the final
/// transition never bootstraps.
#[derive(Clone, Debug)]
pub struct EpisodeRecord {
    /// (T+1) x agents x obs_len
    pub obs: Vec<Vec<Vec<f64>>>,
    /// (T+1) x agents
    pub masks: Vec<Vec<[bool; 6]>>,
    /// (T+1) x state_len
    pub states: Vec<Vec<f64>>,
    /// T x agents, action indices
    pub actions: Vec<Vec<usize>>,
    /// T, scaled for learning
    pub rewards: Vec<f64>,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// FIFO episode replay buffer. Episodes keep their natural length;
/// training loops iterate each episode's own steps, so no padding is
/// stored.
#[derive(Clone, Debug)]
pub struct EpisodeBuffer {
    capacity: usize,
    episodes: VecDeque<EpisodeRecord>,
}

impl EpisodeBuffer {
    pub fn new(capacity: usize) -> EpisodeBuffer {
        assert!(capacity > 0);
        EpisodeBuffer {
            capacity,
            episodes: VecDeque::new(),
        }
    }

    pub fn push(&mut self, episode: EpisodeRecord) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn get(&self, index: usize) -> &EpisodeRecord {
        &self.episodes[index]
    }

    /// Sample `count` distinct episode indices (partial Fisher-Yates).
    pub fn sample_indices(&self, count: usize, rng: &mut impl Rng) -> Vec<usize> {
        assert!(count <= self.episodes.len());
        let mut indices: Vec<usize> = (0..self.episodes.len()).collect();
        for i in 0..count {
            let j = rng.gen_range(i..indices.len());
            indices.swap(i, j);
        }
        indices.truncate(count);
        indices
    }
}
