use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatasetDescriptor;

/// One epoch's visiting order over `(dataset_id, frame_id)` pairs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixSchedule {
    pub entries: Vec<(u32, u64)>,
    pub shuffle_seed: u64,
}

impl MixSchedule {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count_for(&self, dataset_id: u32) -> usize {
        self.entries.iter().filter(|e| e.0 == dataset_id).count()
    }
}

/// Each dataset's frame list repeated `repeat_times`, concatenated in
/// descriptor order, then shuffled with `shuffle_seed`.
pub fn build_epoch_schedule(descs: &[DatasetDescriptor], shuffle_seed: u64) -> MixSchedule {
    let total = descs.iter().map(|d| d.frame_count * d.repeat_times).sum();
    let mut entries = Vec::with_capacity(total);
    for d in descs {
        for _ in 0..d.repeat_times {
            entries.extend((0..d.frame_count as u64).map(|f| (d.dataset_id, f)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    entries.shuffle(&mut rng);
    MixSchedule {
        entries,
        shuffle_seed,
    }
}
