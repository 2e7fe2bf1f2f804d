use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, Dataset, ItemIdx, UserSequence};

/// Iteratively peels users and items with fewer than `k` interactions until
/// every survivor has at least `k`. Items that leave the core also leave the
/// catalog.
pub fn apply_k_core(dataset: &Dataset, k: usize) -> Result<Dataset, CorpusError> {
    if k == 0 {
        return Err(CorpusError::InvalidArgument("k-core requires k >= 1".into()));
    }
    let n_items = dataset.catalog.len();
    let mut sequences: Vec<UserSequence> = dataset.sequences.clone();
    loop {
        let mut item_deg = vec![0usize; n_items];
        for s in &sequences {
            for i in &s.items {
                item_deg[i.index()] += 1;
            }
        }
        let mut changed = false;
        let mut next = Vec::with_capacity(sequences.len());
        for s in sequences {
            if s.len() < k {
                changed = true;
                continue;
            }
            let keep: Vec<bool> = s.items.iter().map(|i| item_deg[i.index()] >= k).collect();
            if keep.iter().all(|&b| b) {
                next.push(s);
                continue;
            }
            changed = true;
            let (items, timestamps) = s
                .items
                .iter()
                .zip(&s.timestamps)
                .zip(&keep)
                .filter(|(_, &kp)| kp)
                .map(|((&i, &t), _)| (i, t))
                .unzip();
            next.push(UserSequence {
                user: s.user,
                items,
                timestamps,
            });
        }
        next.retain(|s| !s.is_empty());
        sequences = next;
        if !changed {
            break;
        }
    }
    if sequences.is_empty() {
        return Err(CorpusError::Empty(format!("{k}-core is empty")));
    }

    let mut present = vec![false; n_items];
    for s in &sequences {
        for i in &s.items {
            present[i.index()] = true;
        }
    }
    let (catalog, remap) = dataset.catalog.retain(&present);
    for s in &mut sequences {
        for i in &mut s.items {
            *i = remap[i.index()].expect("surviving item is retained");
        }
    }
    Ok(Dataset { catalog, sequences })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitUser {
    pub user: String,
    pub train: Vec<ItemIdx>,
    pub valid: ItemIdx,
    pub test: ItemIdx,
}

impl SplitUser {
    /// Context for validation: the training prefix.
    pub fn valid_context(&self) -> &[ItemIdx] {
        &self.train
    }

    /// Context for testing: training prefix followed by the validation item.
    pub fn test_context(&self) -> Vec<ItemIdx> {
        let mut c = self.train.clone();
        c.push(self.valid);
        c
    }
}

/// Leave-last-out partition in user-id order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub users: Vec<SplitUser>,
    /// Users dropped because their sequence had fewer than three items.
    pub excluded: usize,
}

pub fn leave_last_out_split(dataset: &Dataset) -> Split {
    let mut users = Vec::with_capacity(dataset.sequences.len());
    let mut excluded = 0;
    for s in &dataset.sequences {
        let n = s.items.len();
        if n < 3 {
            excluded += 1;
            continue;
        }
        users.push(SplitUser {
            user: s.user.clone(),
            train: s.items[..n - 2].to_vec(),
            valid: s.items[n - 2],
            test: s.items[n - 1],
        });
    }
    if excluded > 0 {
        log::warn!("leave-last-out split excluded {excluded} user(s) with fewer than 3 interactions");
    }
    Split { users, excluded }
}

/// Uniform sample of `n` users without replacement, kept in user order.
pub fn sample_users(split: &Split, n: usize, seed: u64) -> Split {
    if n >= split.users.len() {
        return split.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, split.users.len(), n).into_vec();
    picked.sort_unstable();
    Split {
        users: picked.into_iter().map(|i| split.users[i].clone()).collect(),
        excluded: split.excluded,
    }
}

/// A training sequence whose last element is the prediction target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSequence {
    /// Index into [`Split::users`].
    pub user: usize,
    pub items: Vec<ItemIdx>,
    pub augmented: bool,
}

impl TrainSequence {
    pub fn context(&self) -> &[ItemIdx] {
        &self.items[..self.items.len().saturating_sub(1)]
    }

    pub fn target(&self) -> Option<ItemIdx> {
        self.items.last().copied()
    }
}

/// Returns every user's training prefix followed by `factor` random prefixes
/// `[s_1..s_t]` per eligible user, `t` uniform in `[min_len, L-1]`.
pub fn augment_sequences(
    split: &Split,
    factor: usize,
    min_len: usize,
    seed: u64,
) -> Result<Vec<TrainSequence>, CorpusError> {
    if min_len < 2 {
        return Err(CorpusError::InvalidArgument(
            "augmentation needs min_len >= 2".into(),
        ));
    }
    let mut out: Vec<TrainSequence> = split
        .users
        .iter()
        .enumerate()
        .map(|(u, su)| TrainSequence {
            user: u,
            items: su.train.clone(),
            augmented: false,
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (u, su) in split.users.iter().enumerate() {
        let len = su.train.len();
        if len < min_len + 1 {
            continue;
        }
        for _ in 0..factor {
            let t = rng.gen_range(min_len..=len - 1);
            out.push(TrainSequence {
                user: u,
                items: su.train[..t].to_vec(),
                augmented: true,
            });
        }
    }
    Ok(out)
}
