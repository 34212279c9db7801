//! Synthetic vision-language samples.
//!
//! A sample hides a two-digit key `(a, b)` in a block of vision tokens: the
//! pattern token for `a` and the pattern token for `b` each appear `repeats`
//! times at random positions, the rest of the block is background noise. The
//! language block is a fixed prefix followed by three answer tokens
//! `[a, b, (a + b) mod digits]`, each drawn from its own answer alphabet.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::{Modality, Rng};

pub const N_TARGETS: usize = 3;
pub const BOS: u16 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskConfig {
    /// Digits per key component; the key space has `digits²` keys.
    pub digits: usize,
    pub vision_len: usize,
    /// Copies of each key component inside the vision block.
    pub repeats: usize,
    /// Number of distinct background vision tokens.
    pub background: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { digits: 8, vision_len: 16, repeats: 4, background: 8 }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.digits < 2 {
            bail!(Config, "need at least 2 digits");
        }
        if self.repeats < 1 || 2 * self.repeats > self.vision_len {
            bail!(Config, "vision block of {} cannot hold 2x{} key tokens", self.vision_len, self.repeats);
        }
        if self.background == 0 && 2 * self.repeats < self.vision_len {
            bail!(Config, "background tokens needed to fill the vision block");
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        1 + 5 * self.digits + self.background
    }

    pub fn seq_len(&self) -> usize {
        self.vision_len + 1 + N_TARGETS
    }

    pub fn key_space(&self) -> usize {
        self.digits * self.digits
    }

    /// Token id of answer slot `slot` showing digit `d`.
    pub fn answer_id(&self, slot: usize, d: usize) -> u16 {
        (1 + slot * self.digits + d) as u16
    }

    pub fn vision_a_id(&self, d: usize) -> u16 {
        (1 + 3 * self.digits + d) as u16
    }

    pub fn vision_b_id(&self, d: usize) -> u16 {
        (1 + 4 * self.digits + d) as u16
    }

    pub fn background_id(&self, i: usize) -> u16 {
        (1 + 5 * self.digits + i) as u16
    }

    pub fn is_vision_id(&self, id: u16) -> bool {
        (id as usize) > 3 * self.digits && (id as usize) < self.vocab_size()
    }

    pub fn targets_for(&self, key: Key) -> [u16; N_TARGETS] {
        let (a, b) = (key.a as usize, key.b as usize);
        [self.answer_id(0, a), self.answer_id(1, b), self.answer_id(2, (a + b) % self.digits)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Key {
    pub a: u8,
    pub b: u8,
}

/// Which part of the key space a dataset draws from. Calibration and
/// evaluation keys are disjoint: `(a + b)` even vs odd.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KeySplit {
    All,
    Calibration,
    Evaluation,
}

impl KeySplit {
    pub fn admits(self, key: Key) -> bool {
        let even = (key.a as usize + key.b as usize).is_multiple_of(2);
        match self {
            KeySplit::All => true,
            KeySplit::Calibration => even,
            KeySplit::Evaluation => !even,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub key: Key,
    pub vision_ids: Vec<u16>,
    /// Prefix followed by the target continuation.
    pub language_ids: Vec<u16>,
    pub prefix_len: usize,
}

impl SyntheticSample {
    pub fn ids(&self) -> Vec<u16> {
        let mut ids = self.vision_ids.clone();
        ids.extend_from_slice(&self.language_ids);
        ids
    }

    pub fn len(&self) -> usize {
        self.vision_ids.len() + self.language_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tags(&self) -> Vec<Modality> {
        let mut tags = alloc::vec![Modality::Vision; self.vision_ids.len()];
        tags.resize(self.len(), Modality::Language);
        tags
    }

    /// `(position, token)` pairs scored by the SFT loss: the logits at
    /// `position` predict `token`, and only target continuation tokens count.
    pub fn loss_targets(&self) -> Vec<(usize, u16)> {
        let start = self.vision_ids.len() + self.prefix_len;
        (start..self.len()).map(|i| (i - 1, self.language_ids[i - self.vision_ids.len()])).collect()
    }

    /// Next-token targets at every position, vision included. Used for the
    /// symmetric-loss contrast experiment.
    pub fn all_position_targets(&self) -> Vec<(usize, u16)> {
        let ids = self.ids();
        (1..ids.len()).map(|i| (i - 1, ids[i])).collect()
    }

    pub fn targets(&self) -> &[u16] {
        &self.language_ids[self.prefix_len..]
    }
}

fn sample_key(rng: &mut Rng, task: &TaskConfig, split: KeySplit) -> Key {
    loop {
        let key = Key { a: rng.below(task.digits) as u8, b: rng.below(task.digits) as u8 };
        if split.admits(key) {
            return key;
        }
    }
}

pub fn make_sample(task: &TaskConfig, key: Key, rng: &mut Rng) -> SyntheticSample {
    let mut vision = Vec::with_capacity(task.vision_len);
    vision.extend(core::iter::repeat_n(task.vision_a_id(key.a as usize), task.repeats));
    vision.extend(core::iter::repeat_n(task.vision_b_id(key.b as usize), task.repeats));
    while vision.len() < task.vision_len {
        vision.push(task.background_id(rng.below(task.background)));
    }
    rng.shuffle(&mut vision);
    let mut language = alloc::vec![BOS];
    language.extend_from_slice(&task.targets_for(key));
    SyntheticSample { key, vision_ids: vision, language_ids: language, prefix_len: 1 }
}

/// `n` samples with keys drawn uniformly from `split`.
pub fn gen_data(task: &TaskConfig, rng: &mut Rng, n: usize, split: KeySplit) -> Result<Vec<SyntheticSample>> {
    task.validate()?;
    if n == 0 {
        bail!(Config, "n_samples must be at least 1");
    }
    Ok((0..n)
        .map(|_| {
            let key = sample_key(rng, task, split);
            make_sample(task, key, rng)
        })
        .collect())
}

/// Recovers the key from the vision block by majority vote over pattern tokens.
pub fn decode_key(task: &TaskConfig, vision_ids: &[u16]) -> Option<Key> {
    let mut votes_a = alloc::vec![0usize; task.digits];
    let mut votes_b = alloc::vec![0usize; task.digits];
    for &id in vision_ids {
        let id = id as usize;
        let a0 = task.vision_a_id(0) as usize;
        let b0 = task.vision_b_id(0) as usize;
        if (a0..a0 + task.digits).contains(&id) {
            votes_a[id - a0] += 1;
        } else if (b0..b0 + task.digits).contains(&id) {
            votes_b[id - b0] += 1;
        }
    }
    let best = |v: &[usize]| {
        let (i, n) = v.iter().enumerate().max_by_key(|(i, n)| (**n, usize::MAX - i))?;
        (*n > 0).then_some(i as u8)
    };
    Some(Key { a: best(&votes_a)?, b: best(&votes_b)? })
}

pub fn validate_sample(task: &TaskConfig, s: &SyntheticSample) -> Result<()> {
    if s.vision_ids.len() != task.vision_len || s.language_ids.len() != 1 + N_TARGETS || s.prefix_len != 1 {
        bail!(Format, "sample has wrong block lengths");
    }
    if s.vision_ids.iter().any(|id| !task.is_vision_id(*id)) {
        bail!(Format, "non-vision id in vision block");
    }
    if decode_key(task, &s.vision_ids) != Some(s.key) || s.targets() != task.targets_for(s.key) {
        bail!(Format, "sample targets do not follow from its key");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_sample_is_valid() {
        let task = TaskConfig::default();
        let d = gen_data(&task, &mut Rng::new(1), 1, KeySplit::All).unwrap();
        assert_eq!(d.len(), 1);
        validate_sample(&task, &d[0]).unwrap();
        assert_eq!(d[0].len(), task.seq_len());
        let reps = d[0].vision_ids.iter().filter(|id| **id == task.vision_a_id(d[0].key.a as usize)).count();
        assert!(reps >= 4);
    }

    #[test]
    fn same_seed_same_dataset() {
        let task = TaskConfig::default();
        let a = gen_data(&task, &mut Rng::new(9), 50, KeySplit::All).unwrap();
        let b = gen_data(&task, &mut Rng::new(9), 50, KeySplit::All).unwrap();
        assert_eq!(a, b);
        assert!(gen_data(&task, &mut Rng::new(9), 0, KeySplit::All).is_err());
    }

    #[test]
    fn decoder_reconstructs_every_target() {
        let task = TaskConfig::default();
        let data = gen_data(&task, &mut Rng::new(3), 500, KeySplit::All).unwrap();
        for s in &data {
            let key = decode_key(&task, &s.vision_ids).unwrap();
            assert_eq!(task.targets_for(key).as_slice(), s.targets());
        }
    }

    #[test]
    fn calibration_and_evaluation_keys_are_disjoint() {
        let task = TaskConfig::default();
        let cal = gen_data(&task, &mut Rng::new(3), 200, KeySplit::Calibration).unwrap();
        let ev = gen_data(&task, &mut Rng::new(3), 200, KeySplit::Evaluation).unwrap();
        assert!(cal.iter().all(|c| ev.iter().all(|e| e.key != c.key)));
    }

    #[test]
    fn loss_targets_cover_only_the_continuation() {
        let task = TaskConfig::default();
        let s = &gen_data(&task, &mut Rng::new(4), 1, KeySplit::All).unwrap()[0];
        let t = s.loss_targets();
        assert_eq!(t.len(), N_TARGETS);
        assert_eq!(t[0], (task.vision_len, s.targets()[0]));
        assert_eq!(t[2].0, task.seq_len() - 2);
        assert_eq!(s.all_position_targets().len(), task.seq_len() - 1);
    }
}
