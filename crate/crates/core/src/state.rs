//! The replicated state the trunk is applied to.
//!
//! The service state is modeled as a digest folded over applied command ids,
//! plus the set of ids seen so far for at-most-once application. The digest
//! history is kept per trunk length so replicas can be compared at equal
//! prefixes.

use std::collections::BTreeSet;

use crate::types::{Command, CommandId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApplyOutcome {
    Applied(CommandId),
    /// Second occurrence of an already applied command; treated as NOOP.
    Duplicate(CommandId),
    /// RECON or NOOP entries carry no service state.
    Skipped,
}

const DIGEST_SEED: u64 = 0xcbf2_9ce4_8422_2325;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds one command id into a digest.
pub fn fold_digest(digest: u64, id: CommandId) -> u64 {
    let key = ((id.client.0 as u64) << 40) ^ id.sequence;
    splitmix64(digest.rotate_left(17) ^ splitmix64(key))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppliedState {
    /// Trunk length already applied.
    watermark: u64,
    digest: u64,
    applied: BTreeSet<CommandId>,
    /// `history[i]` is the digest after applying `base + i` trunk entries.
    base: u64,
    history: Vec<u64>,
}

impl Default for AppliedState {
    fn default() -> Self {
        AppliedState {
            watermark: 0,
            digest: DIGEST_SEED,
            applied: BTreeSet::new(),
            base: 0,
            history: vec![DIGEST_SEED],
        }
    }
}

impl AppliedState {
    pub fn from_parts(watermark: u64, digest: u64, applied: BTreeSet<CommandId>) -> Self {
        AppliedState {
            watermark,
            digest,
            applied,
            base: watermark,
            history: vec![digest],
        }
    }

    pub fn watermark(&self) -> u64 {
        self.watermark
    }

    pub fn digest(&self) -> u64 {
        self.digest
    }

    pub fn applied_ids(&self) -> &BTreeSet<CommandId> {
        &self.applied
    }

    pub fn applied_count(&self) -> usize {
        self.applied.len()
    }

    pub fn has_applied(&self, id: CommandId) -> bool {
        self.applied.contains(&id)
    }

    /// Digest after the first `len` trunk entries, if still retained.
    pub fn digest_at(&self, len: u64) -> Option<u64> {
        len.checked_sub(self.base)
            .and_then(|i| self.history.get(i as usize))
            .copied()
    }

    /// Applies the entry at trunk slot `watermark`.
    pub fn apply_next(&mut self, cmd: &Command) -> ApplyOutcome {
        let outcome = match cmd.user_id() {
            Some(id) if self.applied.insert(id) => {
                self.digest = fold_digest(self.digest, id);
                ApplyOutcome::Applied(id)
            }
            Some(id) => ApplyOutcome::Duplicate(id),
            None => ApplyOutcome::Skipped,
        };
        self.watermark += 1;
        self.history.push(self.digest);
        outcome
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_do_not_change_digest() {
        let mut s = AppliedState::default();
        let u1 = Command::user(CommandId::new(1, 1), "a");
        assert_eq!(s.apply_next(&Command::Noop), ApplyOutcome::Skipped);
        assert_eq!(s.apply_next(&u1), ApplyOutcome::Applied(CommandId::new(1, 1)));
        let d = s.digest();
        assert_eq!(s.apply_next(&u1), ApplyOutcome::Duplicate(CommandId::new(1, 1)));
        assert_eq!(s.digest(), d);
        assert_eq!(s.watermark(), 3);
        assert_eq!(s.digest_at(2), Some(d));
        assert_eq!(s.digest_at(0), Some(DIGEST_SEED));
    }

    #[test]
    fn digest_is_order_sensitive() {
        let a = CommandId::new(1, 1);
        let b = CommandId::new(1, 2);
        assert_ne!(
            fold_digest(fold_digest(DIGEST_SEED, a), b),
            fold_digest(fold_digest(DIGEST_SEED, b), a)
        );
    }
}
