use serde::{Deserialize, Serialize};

use crate::attention::full_frame_indices;
use crate::error::{Error, Result};

/// Token count of a sparse KV and its split between full and masked frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvCost {
    pub kv_tokens: usize,
    pub full_frames: usize,
    pub masked_frames: usize,
}

impl KvCost {
    /// Modeled attention FLOPs for `query_tokens` queries of width `d`.
    pub fn flops(&self, query_tokens: usize, d: usize) -> u64 {
        attention_flops(query_tokens, self.kv_tokens, d)
    }
}

/// `2·Tq·L·d` (scores) + `Tq·L` (softmax) + `2·Tq·L·d` (weighted sum).
pub fn attention_flops(query_tokens: usize, kv_tokens: usize, d: usize) -> u64 {
    let (tq, l, d) = (query_tokens as u64, kv_tokens as u64, d as u64);
    2 * tq * l * d + tq * l + 2 * tq * l * d
}

/// `L = Σ_full T + Σ_masked popcount`. `popcounts[i - 2]` is the moving-cell
/// count of reference position `i`; entries for full positions are ignored.
pub fn kv_token_count(z: usize, tokens_per_frame: usize, popcounts: &[usize], r: usize) -> Result<KvCost> {
    if z == 0 || r == 0 {
        return Err(Error::InvalidInput(format!("need Z >= 1 and r >= 1, got Z={z}, r={r}")));
    }
    let full = full_frame_indices(z, r);
    let mut kv_tokens = full.len() * tokens_per_frame;
    for i in (2..=z).filter(|i| !full.contains(i)) {
        let count = *popcounts
            .get(i - 2)
            .ok_or_else(|| Error::InvalidInput(format!("popcount missing for reference position {i}")))?;
        if count > tokens_per_frame {
            return Err(Error::InvalidInput(format!(
                "popcount {count} for position {i} exceeds {tokens_per_frame} tokens"
            )));
        }
        kv_tokens += count;
    }
    Ok(KvCost { kv_tokens, full_frames: full.len(), masked_frames: z - full.len() })
}
