//! Time-limited review leases. Leases live in memory only; after a restart
//! every undecided item is simply available again.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const DEFAULT_LEASE_MS: u64 = 10 * 60 * 1000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub reviewer_id: String,
    pub expires_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LeaseCheck {
    /// Nobody holds an active lease, or the caller does.
    Free,
    HeldByOther(Lease),
}

#[derive(Debug, Clone)]
pub struct LeaseTable {
    timeout_ms: u64,
    leases: HashMap<String, Lease>,
}

impl LeaseTable {
    pub fn new(timeout_ms: u64) -> Self {
        LeaseTable {
            timeout_ms,
            leases: HashMap::new(),
        }
    }

    pub fn timeout_ms(&self) -> u64 {
        self.timeout_ms
    }

    /// Item this reviewer currently holds, if its lease is still active.
    pub fn held_by(&self, reviewer_id: &str, now_ms: u64) -> Option<(&str, &Lease)> {
        self.leases
            .iter()
            .filter(|(_, l)| l.reviewer_id == reviewer_id && l.expires_at_ms > now_ms)
            .min_by_key(|(id, _)| id.as_str())
            .map(|(id, l)| (id.as_str(), l))
    }

    pub fn is_available(&self, image_id: &str, now_ms: u64) -> bool {
        self.leases
            .get(image_id)
            .is_none_or(|l| l.expires_at_ms <= now_ms)
    }

    pub fn grant(&mut self, image_id: &str, reviewer_id: &str, now_ms: u64) -> Lease {
        let lease = Lease {
            reviewer_id: reviewer_id.to_string(),
            expires_at_ms: now_ms.saturating_add(self.timeout_ms),
        };
        self.leases.insert(image_id.to_string(), lease.clone());
        lease
    }

    pub fn check(&self, image_id: &str, reviewer_id: &str, now_ms: u64) -> LeaseCheck {
        match self.leases.get(image_id) {
            Some(l) if l.expires_at_ms > now_ms && l.reviewer_id != reviewer_id => {
                LeaseCheck::HeldByOther(l.clone())
            }
            _ => LeaseCheck::Free,
        }
    }

    pub fn release(&mut self, image_id: &str) {
        self.leases.remove(image_id);
    }

    pub fn clear(&mut self) {
        self.leases.clear();
    }
}
