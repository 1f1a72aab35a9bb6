//! Hash-indexed engine.

use std::collections::HashMap;
use std::net::Ipv6Addr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use crate::packet::{Color, MAX_SEGMENTS};

use super::{ColorBank, CounterSnapshot, MatcherEngine, MatcherError, SidList};

/// Matches flows through a hash table keyed by the whole SID list: the key
/// digest covers every segment address plus the list length, and entries
/// that land in the same bucket are disambiguated by comparing the full
/// list, so a digest collision can never credit the wrong flow. Lookup
/// cost is flat in the number of registered flows, hits and misses alike —
/// the property that separates it from
/// [`LinearEngine`](super::LinearEngine) once tables grow.
///
/// Lookups borrow the probe slice directly (`SidList` hashes identically
/// to its `[Ipv6Addr]` borrow), so the per-packet path performs no
/// allocation.
#[derive(Default)]
pub struct HashEngine {
    flows: HashMap<SidList, ColorBank>,
    oversize: AtomicU64,
    saturation: AtomicBool,
}

impl HashEngine {
    pub fn new() -> HashEngine {
        HashEngine::default()
    }
}

impl MatcherEngine for HashEngine {
    fn add_flow(&mut self, flow: SidList) -> Result<(), MatcherError> {
        if self.flows.contains_key(flow.as_ref()) {
            return Err(MatcherError::DuplicateFlow);
        }
        self.flows.insert(flow, ColorBank::default());
        Ok(())
    }

    fn remove_flow(&mut self, sids: &[Ipv6Addr]) -> Result<CounterSnapshot, MatcherError> {
        let bank = self.flows.remove(sids).ok_or(MatcherError::UnknownFlow)?;
        Ok(bank.snapshot())
    }

    fn match_and_count(&self, sids: &[Ipv6Addr], color: Color) -> bool {
        if sids.len() > MAX_SEGMENTS {
            self.oversize.fetch_add(1, Ordering::Relaxed);
            return false;
        }
        match self.flows.get(sids) {
            Some(bank) => {
                bank.increment(color, &self.saturation);
                true
            }
            None => false,
        }
    }

    fn read_counter(&self, sids: &[Ipv6Addr], color: Color) -> Result<u64, MatcherError> {
        Ok(self.flows.get(sids).ok_or(MatcherError::UnknownFlow)?.get(color))
    }

    fn counters(&self, sids: &[Ipv6Addr]) -> Result<CounterSnapshot, MatcherError> {
        Ok(self.flows.get(sids).ok_or(MatcherError::UnknownFlow)?.snapshot())
    }

    fn list_flows(&self) -> Vec<(SidList, CounterSnapshot)> {
        self.flows.iter().map(|(flow, bank)| (flow.clone(), bank.snapshot())).collect()
    }

    fn flow_count(&self) -> usize {
        self.flows.len()
    }

    fn oversize_misses(&self) -> u64 {
        self.oversize.load(Ordering::Relaxed)
    }

    fn saturation_warning(&self) -> bool {
        self.saturation.load(Ordering::Relaxed)
    }
}
