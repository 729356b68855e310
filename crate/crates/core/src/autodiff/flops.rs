use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Analytic floating-point operation count, broken down by operation kind.
///
/// Counts are derived from shapes only (2·m·n·p for a matrix product, a fixed
/// per-element cost for pointwise work), so identical programs always produce
/// identical totals.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCounter {
    total: u64,
    breakdown: BTreeMap<String, u64>,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, kind: &str, flops: u64) {
        if flops == 0 {
            return;
        }
        self.total += flops;
        *self.breakdown.entry(kind.to_string()).or_insert(0) += flops;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn get(&self, kind: &str) -> u64 {
        self.breakdown.get(kind).copied().unwrap_or(0)
    }

    pub fn breakdown(&self) -> &BTreeMap<String, u64> {
        &self.breakdown
    }

    pub fn merge(&mut self, other: &FlopCounter) {
        for (k, v) in &other.breakdown {
            self.add(k, *v);
        }
    }

    /// Difference `self - earlier`, for measuring a region of a longer run.
    pub fn since(&self, earlier: &FlopCounter) -> FlopCounter {
        let mut out = FlopCounter::new();
        for (k, v) in &self.breakdown {
            let before = earlier.get(k);
            out.add(k, v - before);
        }
        out
    }
}
