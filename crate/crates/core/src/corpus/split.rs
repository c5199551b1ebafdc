use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Conversation, ItemId};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    /// Items mentioned in test conversations but never in training ones.
    pub novel_item_ids: BTreeSet<ItemId>,
}

impl CorpusSplit {
    /// Builds a split from explicit id lists, deriving the novel items.
    pub fn from_parts(convs: &[Conversation], train: Vec<String>, validation: Vec<String>, test: Vec<String>) -> Self {
        let items_of = |ids: &[String]| -> BTreeSet<ItemId> {
            let set: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
            convs
                .iter()
                .filter(|c| set.contains(c.id.as_str()))
                .flat_map(Conversation::items)
                .collect()
        };
        let train_items = items_of(&train);
        let novel_item_ids = items_of(&test).difference(&train_items).copied().collect();
        CorpusSplit {
            train,
            validation,
            test,
            novel_item_ids,
        }
    }

    pub fn select<'a>(&self, convs: &'a [Conversation], ids: &[String]) -> Vec<&'a Conversation> {
        let set: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
        convs.iter().filter(|c| set.contains(c.id.as_str())).collect()
    }
}

/// Seeded shuffle, then validation and test each take `floor(n · ratio)`
/// conversations and training keeps the remainder.
pub fn split_corpus(convs: &[Conversation], seed: u64, ratios: SplitRatios) -> Result<CorpusSplit> {
    if convs.len() < 3 {
        return Err(Error::contract(format!(
            "need at least 3 conversations to split, got {}",
            convs.len()
        )));
    }
    let sum = ratios.train + ratios.validation + ratios.test;
    if (sum - 1.0).abs() > 1e-9 || [ratios.train, ratios.validation, ratios.test].iter().any(|r| *r < 0.0) {
        return Err(Error::contract(format!(
            "split ratios must be nonnegative and sum to 1, got {sum}"
        )));
    }
    let mut ids: Vec<String> = convs.iter().map(|c| c.id.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n = ids.len() as f64;
    let n_val = (n * ratios.validation).floor() as usize;
    let n_test = (n * ratios.test).floor() as usize;
    let validation = ids[..n_val].to_vec();
    let test = ids[n_val..n_val + n_test].to_vec();
    let train = ids[n_val + n_test..].to_vec();
    Ok(CorpusSplit::from_parts(convs, train, validation, test))
}
