//! Sequential-scan engine.

use std::net::Ipv6Addr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use crate::packet::{Color, MAX_SEGMENTS};

use super::{ColorBank, CounterSnapshot, MatcherEngine, MatcherError, SidList};

/// Matches flows by walking an ordered rule list, the way per-flow
/// classifier chains behave in a rule-based firewall: each packet is
/// compared against the rules in insertion order and the first exact SID
/// list match counts it. A miss has compared against every rule by the
/// time it is declared, so miss-heavy traffic pays the full table walk —
/// that cliff is exactly what this engine exists to exhibit next to
/// [`HashEngine`](super::HashEngine).
#[derive(Default)]
pub struct LinearEngine {
    rules: Vec<(SidList, ColorBank)>,
    oversize: AtomicU64,
    saturation: AtomicBool,
}

impl LinearEngine {
    pub fn new() -> LinearEngine {
        LinearEngine::default()
    }

    fn position(&self, sids: &[Ipv6Addr]) -> Option<usize> {
        self.rules.iter().position(|(flow, _)| flow.as_ref() == sids)
    }

    #[cfg(test)]
    pub(crate) fn set_counter_for_test(&self, sids: &[Ipv6Addr], color: Color, value: u64) {
        let (_, bank) = &self.rules[self.position(sids).unwrap()];
        bank.set_for_test(color, value);
    }
}

impl MatcherEngine for LinearEngine {
    fn add_flow(&mut self, flow: SidList) -> Result<(), MatcherError> {
        if self.position(flow.as_ref()).is_some() {
            return Err(MatcherError::DuplicateFlow);
        }
        self.rules.push((flow, ColorBank::default()));
        Ok(())
    }

    fn remove_flow(&mut self, sids: &[Ipv6Addr]) -> Result<CounterSnapshot, MatcherError> {
        let pos = self.position(sids).ok_or(MatcherError::UnknownFlow)?;
        let (_, bank) = self.rules.remove(pos);
        Ok(bank.snapshot())
    }

    fn match_and_count(&self, sids: &[Ipv6Addr], color: Color) -> bool {
        if sids.len() > MAX_SEGMENTS {
            self.oversize.fetch_add(1, Ordering::Relaxed);
            return false;
        }
        for (flow, bank) in &self.rules {
            if flow.as_ref() == sids {
                bank.increment(color, &self.saturation);
                return true;
            }
        }
        false
    }

    fn read_counter(&self, sids: &[Ipv6Addr], color: Color) -> Result<u64, MatcherError> {
        let pos = self.position(sids).ok_or(MatcherError::UnknownFlow)?;
        Ok(self.rules[pos].1.get(color))
    }

    fn counters(&self, sids: &[Ipv6Addr]) -> Result<CounterSnapshot, MatcherError> {
        let pos = self.position(sids).ok_or(MatcherError::UnknownFlow)?;
        Ok(self.rules[pos].1.snapshot())
    }

    fn list_flows(&self) -> Vec<(SidList, CounterSnapshot)> {
        self.rules.iter().map(|(flow, bank)| (flow.clone(), bank.snapshot())).collect()
    }

    fn flow_count(&self) -> usize {
        self.rules.len()
    }

    fn oversize_misses(&self) -> u64 {
        self.oversize.load(Ordering::Relaxed)
    }

    fn saturation_warning(&self) -> bool {
        self.saturation.load(Ordering::Relaxed)
    }
}
