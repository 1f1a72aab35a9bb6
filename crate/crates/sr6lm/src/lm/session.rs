//! Sender and reflector session state machines.
//!
//! One session exists per monitored flow on each side. The sender owns
//! the measurement: once a block closes and its guard interval passes, it
//! reads the block's transmit count off the ingress engine, sends a query,
//! and turns the response into a [`LossRecord`]. The reflector mirrors the
//! coloring schedule, snapshots each block's receive count as the block
//! closes, and answers queries out of those snapshots.
//!
//! # Why snapshots and deltas
//!
//! Engine counters only ever accumulate. Both sides therefore track, per
//! color, the cumulative value at the previous closed block of that color
//! and work with differences. The reflector takes its difference when the
//! block *closes* (on a timer, or on demand when a query beats the timer),
//! never when a query happens to arrive — otherwise a block that was never
//! queried would silently leak its packets into the next same-colored
//! block's count. The sender ships the per-block delta inside the query,
//! so each exchange is self-contained: losing one has no effect on any
//! other.
//!
//! # Failure discipline
//!
//! A block either yields exactly one [`LossRecord`] or one [`GapRecord`]
//! with a reason — never a guess. Anything that casts doubt on a block's
//! numbers (a receive count exceeding the transmit count, a reflector
//! restart, a missed capture window) voids that block and only that block.

use std::collections::{BTreeMap, HashMap};
use std::net::Ipv6Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataplane::{ColoringSchedule, DataplaneError};
use crate::matcher::{MatcherEngine, MatcherError, SidList};
use crate::packet::Color;
use crate::time::Timestamp;

use super::wire::{LmQuery, LmResponse, WireError};

/// Timing knobs shared by both ends of a measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    /// Marking period in nanoseconds; must equal the coloring schedule's.
    pub period: u64,
    /// How long after a block ends before its counters are trusted, in
    /// nanoseconds. Packets of the old color still in flight land within
    /// this window, so it must exceed the one-way path delay (plus any
    /// clock skew between the two ends).
    pub guard: u64,
    /// Pause between retransmissions of an unanswered query, nanoseconds.
    pub retry_interval: u64,
    /// Retransmissions allowed per block after the initial query.
    pub max_retries: u32,
    /// How many blocks an unanswered query may linger before the block is
    /// written off as a gap.
    pub expiry_blocks: u64,
}

impl LmConfig {
    /// Defaults for a given marking period: guard of half a period (the
    /// query then leaves at the midpoint of the following block), retries
    /// every eighth of a period, at most two of them.
    pub fn new(period: u64) -> LmConfig {
        LmConfig {
            period,
            guard: period / 2,
            retry_interval: (period / 8).max(1),
            max_retries: 2,
            expiry_blocks: 3,
        }
    }

    pub fn validate(&self) -> Result<(), LmError> {
        if self.period == 0 {
            return Err(LmError::BadConfig("marking period must be non-zero"));
        }
        if self.guard == 0 || self.guard >= self.period {
            return Err(LmError::BadConfig(
                "guard must be positive and shorter than the marking period",
            ));
        }
        if self.retry_interval == 0 {
            return Err(LmError::BadConfig("retry interval must be non-zero"));
        }
        if self.expiry_blocks < 2 {
            return Err(LmError::BadConfig(
                "expiry below two blocks would discard responses still in flight",
            ));
        }
        Ok(())
    }

    /// The most recent block whose counters are trustworthy at `now`:
    /// block `k` closes at `start(k+1) + guard`.
    fn closeable_through(&self, schedule: &ColoringSchedule, now: Timestamp) -> Option<u64> {
        let elapsed = now.since(schedule.base());
        if elapsed < self.period + self.guard {
            return None;
        }
        Some((elapsed - self.guard) / self.period - 1)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LmError {
    #[error("invalid configuration: {0}")]
    BadConfig(&'static str),
    #[error("{0}")]
    Wire(#[from] WireError),
    #[error("{0}")]
    Matcher(#[from] MatcherError),
    #[error("{0}")]
    Schedule(#[from] DataplaneError),
    #[error("block {block} is still collecting; counters stabilize at {ready_at}")]
    BlockStillOpen { block: u64, ready_at: Timestamp },
    #[error("a query for block {block} is already outstanding")]
    QueryOutstanding { block: u64 },
    #[error("block {block} was already reported")]
    AlreadyReported { block: u64 },
    #[error("capture for block {block} merged {merged} missed block(s) of the same color")]
    MergedCapture { block: u64, merged: u64 },
    #[error("response matches no outstanding query (echoed seq {seq})")]
    StaleResponse { seq: u32 },
    #[error("echoed query does not match what was sent for block {block}")]
    EchoMismatch { block: u64 },
    #[error(
        "block {block} receive count {rx} exceeds transmit count {tx}; \
         refusing to record a negative loss"
    )]
    NegativeLoss { block: u64, tx: u64, rx: u64 },
    #[error("reflector restarted (receiver_seq went from {last} to {got}); session reset")]
    ReflectorRestart { last: u32, got: u32 },
    #[error("reflector does not recognize this flow (block {block})")]
    UnknownFlowReported { block: u64 },
    #[error("no session registered for flow {0}")]
    UnknownFlow(String),
    #[error("snapshot for block {block} no longer exists")]
    SnapshotGone { block: u64 },
    #[error("snapshot for block {block} is unreliable (closed late after a stall)")]
    TaintedSnapshot { block: u64 },
}

/// One fully measured block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossRecord {
    pub block_index: u64,
    pub block_color: Color,
    /// Packets the ingress sent in this block.
    pub tx_count: u64,
    /// Packets the egress received in this block.
    pub rx_count: u64,
    /// Exactly `tx_count - rx_count`; never negative by construction.
    pub loss: u64,
}

/// Why a block produced no measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapReason {
    /// Every query for the block went unanswered.
    NoResponse,
    /// The response claimed more received than sent packets.
    NegativeLoss,
    /// A receiver_seq regression voided all blocks then in flight.
    ReflectorRestart,
    /// The sender never captured this block's counters in time.
    MissedWindow,
    /// The capture for this block also covered earlier missed blocks of
    /// the same color, so the delta cannot be attributed.
    MergedCapture,
    /// The reflector answered that it does not know the flow.
    UnknownFlowAtReflector,
}

/// One block written off, and why.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapRecord {
    pub block_index: u64,
    pub block_color: Color,
    /// The sender-side count, when one was captured before the block was
    /// voided.
    pub tx_count: Option<u64>,
    pub reason: GapReason,
}

/// A query sent (perhaps several times) and not yet resolved.
#[derive(Debug, Clone)]
struct PendingBlock {
    block_index: u64,
    color: Color,
    tx_delta: u64,
    /// Every sequence number spent on this block, first attempt included.
    seqs: Vec<u32>,
    attempts: u32,
    last_sent: Timestamp,
}

/// Sender-side state for one monitored flow.
pub struct SenderSession {
    flow: SidList,
    next_seq: u32,
    /// Cumulative engine value at the last captured block, per color.
    prev_cum: [u64; 2],
    /// Index of the last captured block, per color.
    last_captured: [Option<u64>; 2],
    pending: Vec<PendingBlock>,
    records: Vec<LossRecord>,
    gaps: Vec<GapRecord>,
    last_receiver_seq: Option<u32>,
    /// How many times a receiver_seq regression reset this session.
    resets: u32,
}

fn color_slot(color: Color) -> usize {
    match color {
        Color::A => 0,
        Color::B => 1,
    }
}

impl SenderSession {
    pub fn new(flow: SidList) -> SenderSession {
        SenderSession::with_start_seq(flow, 0)
    }

    /// A session numbering its queries from `start_seq`. Sequence numbers
    /// stay gapless within the session regardless of the starting value;
    /// [`Sender`] gives each of its sessions a disjoint range so a
    /// response's echoed sequence number identifies the flow even on a
    /// transport that carries no flow identity of its own.
    pub fn with_start_seq(flow: SidList, start_seq: u32) -> SenderSession {
        SenderSession {
            flow,
            next_seq: start_seq,
            prev_cum: [0; 2],
            last_captured: [None; 2],
            pending: Vec::new(),
            records: Vec::new(),
            gaps: Vec::new(),
            last_receiver_seq: None,
            resets: 0,
        }
    }

    pub fn flow(&self) -> &SidList {
        &self.flow
    }

    pub fn records(&self) -> &[LossRecord] {
        &self.records
    }

    pub fn gaps(&self) -> &[GapRecord] {
        &self.gaps
    }

    pub fn resets(&self) -> u32 {
        self.resets
    }

    pub fn outstanding(&self) -> usize {
        self.pending.len()
    }

    fn take_seq(&mut self) -> u32 {
        let seq = self.next_seq;
        self.next_seq = self.next_seq.wrapping_add(1);
        seq
    }

    /// Captures the newest closed block off the engine and builds its
    /// query.
    ///
    /// Refuses (without side effects) while the block is still open or its
    /// guard interval is running, when a query is already outstanding, and
    /// when the block was already resolved. If earlier blocks of the same
    /// color were never captured, their packets are folded into this
    /// read-out and cannot be separated again: the affected blocks are
    /// recorded as gaps and the capture is discarded with
    /// [`LmError::MergedCapture`].
    pub fn build_query(
        &mut self,
        engine: &dyn MatcherEngine,
        schedule: &ColoringSchedule,
        config: &LmConfig,
        now: Timestamp,
    ) -> Result<LmQuery, LmError> {
        let position = schedule.observe(now)?;
        let not_ready = |block: u64| LmError::BlockStillOpen {
            block,
            ready_at: schedule.block_start(block + 1) + config.guard,
        };
        let Some(target) = position.index.checked_sub(1) else {
            return Err(not_ready(0));
        };
        let ready_at = schedule.block_start(target + 1) + config.guard;
        if now < ready_at {
            return Err(not_ready(target));
        }
        let color = schedule.color_of_block(target);
        let slot = color_slot(color);
        if self.last_captured[slot] == Some(target) {
            if self.pending.iter().any(|p| p.block_index == target) {
                return Err(LmError::QueryOutstanding { block: target });
            }
            return Err(LmError::AlreadyReported { block: target });
        }

        let cum = engine.read_counter(self.flow.as_ref(), color)?;
        let expected_prev = target.checked_sub(2);
        let captured_prev = self.last_captured[slot];
        if captured_prev != expected_prev {
            // One or more same-colored blocks between the last capture and
            // this one were never read out; their packets are now fused
            // into `cum - prev_cum` and no honest per-block split exists.
            let first_missed = match captured_prev {
                Some(j) => j + 2,
                None => target % 2,
            };
            let mut merged = 0;
            for missed in (first_missed..target).step_by(2) {
                self.gaps.push(GapRecord {
                    block_index: missed,
                    block_color: color,
                    tx_count: None,
                    reason: GapReason::MissedWindow,
                });
                merged += 1;
            }
            self.gaps.push(GapRecord {
                block_index: target,
                block_color: color,
                tx_count: None,
                reason: GapReason::MergedCapture,
            });
            self.prev_cum[slot] = cum;
            self.last_captured[slot] = Some(target);
            return Err(LmError::MergedCapture { block: target, merged });
        }

        let tx_delta = cum.saturating_sub(self.prev_cum[slot]);
        self.prev_cum[slot] = cum;
        self.last_captured[slot] = Some(target);
        let seq = self.take_seq();
        self.pending.push(PendingBlock {
            block_index: target,
            color,
            tx_delta,
            seqs: vec![seq],
            attempts: 1,
            last_sent: now,
        });
        Ok(LmQuery { block: color, sender_seq: seq, sender_counter: tx_delta })
    }

    /// Retransmits the current window's query if it is still unanswered,
    /// the retry budget allows it, and the query window is still open.
    /// Each retransmission carries a fresh sequence number but the same
    /// counter value — the block's transmit count was fixed at capture.
    pub fn retry_due(
        &mut self,
        schedule: &ColoringSchedule,
        config: &LmConfig,
        now: Timestamp,
    ) -> Result<Option<LmQuery>, LmError> {
        let position = schedule.observe(now)?;
        let Some(window_target) = position.index.checked_sub(1) else {
            return Ok(None);
        };
        let Some(pos) = self.pending.iter().position(|p| p.block_index == window_target) else {
            return Ok(None);
        };
        if self.pending[pos].attempts >= 1 + config.max_retries
            || now.since(self.pending[pos].last_sent) < config.retry_interval
        {
            return Ok(None);
        }
        let seq = self.take_seq();
        let pending = &mut self.pending[pos];
        pending.attempts += 1;
        pending.last_sent = now;
        pending.seqs.push(seq);
        Ok(Some(LmQuery {
            block: pending.color,
            sender_seq: seq,
            sender_counter: pending.tx_delta,
        }))
    }

    /// Writes off outstanding queries whose block fell too far behind.
    pub fn expire(&mut self, current_block: u64, config: &LmConfig) -> Vec<GapRecord> {
        let mut expired = Vec::new();
        self.pending.retain(|p| {
            if p.block_index + config.expiry_blocks <= current_block {
                expired.push(GapRecord {
                    block_index: p.block_index,
                    block_color: p.color,
                    tx_count: Some(p.tx_delta),
                    reason: GapReason::NoResponse,
                });
                false
            } else {
                true
            }
        });
        self.gaps.extend_from_slice(&expired);
        expired
    }

    /// Whether `response` answers one of this session's outstanding
    /// queries. Used to demultiplex responses arriving on a shared
    /// transport.
    pub fn owns_response(&self, response: &LmResponse) -> bool {
        match LmQuery::decode(&response.echoed_query) {
            Ok(echoed) => self
                .pending
                .iter()
                .any(|p| p.seqs.contains(&echoed.sender_seq)),
            Err(_) => false,
        }
    }

    /// Consumes a response and produces the block's loss record.
    ///
    /// Every anomaly is an error, never a record: an unmatched or
    /// inconsistent echo, a receive count exceeding the transmit count
    /// (the block becomes a gap), and a receiver_seq regression (the
    /// reflector restarted — all in-flight blocks become gaps and the
    /// session starts over).
    pub fn process_response(&mut self, response: &LmResponse) -> Result<LossRecord, LmError> {
        let echoed = LmQuery::decode(&response.echoed_query)?;
        let Some(idx) = self
            .pending
            .iter()
            .position(|p| p.seqs.contains(&echoed.sender_seq))
        else {
            return Err(LmError::StaleResponse { seq: echoed.sender_seq });
        };

        if response.unknown_flow {
            let pending = self.pending.remove(idx);
            self.gaps.push(GapRecord {
                block_index: pending.block_index,
                block_color: pending.color,
                tx_count: Some(pending.tx_delta),
                reason: GapReason::UnknownFlowAtReflector,
            });
            return Err(LmError::UnknownFlowReported { block: pending.block_index });
        }

        if let Some(last) = self.last_receiver_seq {
            if response.receiver_seq < last {
                self.reset_after_restart();
                self.last_receiver_seq = Some(response.receiver_seq);
                return Err(LmError::ReflectorRestart { last, got: response.receiver_seq });
            }
        }
        self.last_receiver_seq = Some(response.receiver_seq);

        let pending = &self.pending[idx];
        let consistent = echoed.block == pending.color
            && echoed.sender_counter == pending.tx_delta
            && response.block == pending.color;
        if !consistent {
            // Something mangled the exchange; keep the query outstanding,
            // a retry or a clean duplicate can still resolve the block.
            return Err(LmError::EchoMismatch { block: pending.block_index });
        }

        let tx = pending.tx_delta;
        let rx = response.receiver_counter;
        let block_index = pending.block_index;
        let block_color = pending.color;
        if rx > tx {
            self.pending.remove(idx);
            self.gaps.push(GapRecord {
                block_index,
                block_color,
                tx_count: Some(tx),
                reason: GapReason::NegativeLoss,
            });
            return Err(LmError::NegativeLoss { block: block_index, tx, rx });
        }
        self.pending.remove(idx);
        let record = LossRecord { block_index, block_color, tx_count: tx, rx_count: rx, loss: tx - rx };
        self.records.push(record);
        Ok(record)
    }

    fn reset_after_restart(&mut self) {
        for pending in self.pending.drain(..) {
            self.gaps.push(GapRecord {
                block_index: pending.block_index,
                block_color: pending.color,
                tx_count: Some(pending.tx_delta),
                reason: GapReason::ReflectorRestart,
            });
        }
        self.resets += 1;
        self.last_receiver_seq = None;
    }
}

/// What one sender poll produced. Indices refer to the sender's flow
/// registration order.
#[derive(Debug, Default)]
pub struct PollOutcome {
    /// Queries to transmit now.
    pub queries: Vec<(usize, LmQuery)>,
    /// Blocks newly written off.
    pub gaps: Vec<(usize, GapRecord)>,
}

/// Sequence-number range per flow: over a million queries each before two
/// flows' ranges could meet, which at one query per block is decades away
/// from mattering.
const SEQ_STRIDE_BITS: u32 = 20;

/// The sender side of a measurement: all per-flow sessions plus the shared
/// timing configuration. The coloring schedule and matcher engine stay
/// with the ingress node; they are borrowed per call.
pub struct Sender {
    config: LmConfig,
    sessions: Vec<SenderSession>,
    index: HashMap<SidList, usize>,
}

impl Sender {
    pub fn new(config: LmConfig) -> Result<Sender, LmError> {
        config.validate()?;
        Ok(Sender { config, sessions: Vec::new(), index: HashMap::new() })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn add_flow(&mut self, flow: SidList) -> usize {
        if let Some(&idx) = self.index.get(&flow) {
            return idx;
        }
        let idx = self.sessions.len();
        self.index.insert(flow.clone(), idx);
        // Each session numbers queries from its own base so echoed
        // sequence numbers are unambiguous across flows; see
        // `SenderSession::with_start_seq`.
        self.sessions
            .push(SenderSession::with_start_seq(flow, (idx as u32) << SEQ_STRIDE_BITS));
        idx
    }

    pub fn sessions(&self) -> &[SenderSession] {
        &self.sessions
    }

    pub fn session(&self, flow: &[Ipv6Addr]) -> Option<&SenderSession> {
        self.index.get(flow).map(|&idx| &self.sessions[idx])
    }

    /// Drives every session forward: expires overdue queries, issues the
    /// query for a freshly closed block, and retransmits unanswered ones.
    /// Call this periodically — more often than the retry interval.
    pub fn poll(
        &mut self,
        engine: &dyn MatcherEngine,
        schedule: &ColoringSchedule,
        now: Timestamp,
    ) -> Result<PollOutcome, LmError> {
        let position = schedule.observe(now)?;
        let mut outcome = PollOutcome::default();
        for (idx, session) in self.sessions.iter_mut().enumerate() {
            for gap in session.expire(position.index, &self.config) {
                outcome.gaps.push((idx, gap));
            }
            match session.build_query(engine, schedule, &self.config, now) {
                Ok(query) => {
                    outcome.queries.push((idx, query));
                    continue; // a fresh query needs no retry this round
                }
                Err(
                    LmError::BlockStillOpen { .. }
                    | LmError::QueryOutstanding { .. }
                    | LmError::AlreadyReported { .. }
                    | LmError::MergedCapture { .. },
                ) => {}
                Err(other) => return Err(other),
            }
            if let Some(query) = session.retry_due(schedule, &self.config, now)? {
                outcome.queries.push((idx, query));
            }
        }
        Ok(outcome)
    }

    /// Routes a response to the session it belongs to (for transports that
    /// know the flow).
    pub fn handle_response(
        &mut self,
        flow: &[Ipv6Addr],
        response: &LmResponse,
    ) -> Result<LossRecord, LmError> {
        let &idx = self
            .index
            .get(flow)
            .ok_or_else(|| LmError::UnknownFlow(format_sids(flow)))?;
        self.sessions[idx].process_response(response)
    }

    /// Routes a response by its echoed query (for shared transports that
    /// carry no flow identity). Returns the flow index alongside the
    /// record.
    pub fn handle_response_any(
        &mut self,
        response: &LmResponse,
    ) -> Result<(usize, LossRecord), LmError> {
        let Some(idx) = self.sessions.iter().position(|s| s.owns_response(response)) else {
            let seq = LmQuery::decode(&response.echoed_query)
                .map(|q| q.sender_seq)
                .unwrap_or_default();
            return Err(LmError::StaleResponse { seq });
        };
        let record = self.sessions[idx].process_response(response)?;
        Ok((idx, record))
    }
}

fn format_sids(sids: &[Ipv6Addr]) -> String {
    sids.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
}

/// Receive count of one closed block, frozen at close time.
#[derive(Debug, Clone, Copy)]
struct BlockSnapshot {
    color: Color,
    rx_delta: u64,
    /// Set when the block was closed late (after a stall) and its delta
    /// may include neighbouring blocks' packets. Tainted snapshots are
    /// never served.
    tainted: bool,
}

/// Reflector-side state for one monitored flow.
pub struct ReflectorSession {
    flow: SidList,
    prev_cum: [u64; 2],
    /// All blocks below this index are closed.
    next_to_close: u64,
    snapshots: BTreeMap<u64, BlockSnapshot>,
}

/// Snapshots kept per session before the oldest are dropped. Bounds
/// memory on long runs; queries almost always target the newest one or
/// two blocks.
const SNAPSHOT_CAP: usize = 1024;

impl ReflectorSession {
    pub fn new(flow: SidList) -> ReflectorSession {
        ReflectorSession { flow, prev_cum: [0; 2], next_to_close: 0, snapshots: BTreeMap::new() }
    }

    /// Closes every block up to and including `through`.
    ///
    /// Closing reads the block color's cumulative count and banks the
    /// difference since that color's previous block. When more than one
    /// block has to be closed in a single call the timer must have
    /// stalled past a full period; the late read-outs can no longer be
    /// attributed to single blocks, so all of them are marked tainted and
    /// will be refused rather than served.
    fn close_up_to(
        &mut self,
        engine: &dyn MatcherEngine,
        schedule: &ColoringSchedule,
        through: u64,
    ) -> Result<(), LmError> {
        if through < self.next_to_close {
            return Ok(());
        }
        let stalled = through > self.next_to_close;
        for block in self.next_to_close..=through {
            let color = schedule.color_of_block(block);
            let slot = color_slot(color);
            let cum = engine.read_counter(self.flow.as_ref(), color)?;
            let rx_delta = cum.saturating_sub(self.prev_cum[slot]);
            self.prev_cum[slot] = cum;
            self.snapshots
                .insert(block, BlockSnapshot { color, rx_delta, tainted: stalled });
            while self.snapshots.len() > SNAPSHOT_CAP {
                self.snapshots.pop_first();
            }
        }
        self.next_to_close = through + 1;
        Ok(())
    }

    fn answer(&mut self, block: u64, query: &LmQuery, receiver_seq: u32) -> Result<LmResponse, LmError> {
        let snapshot = self
            .snapshots
            .get(&block)
            .ok_or(LmError::SnapshotGone { block })?;
        if snapshot.tainted {
            return Err(LmError::TaintedSnapshot { block });
        }
        debug_assert_eq!(snapshot.color, query.block);
        Ok(LmResponse {
            block: query.block,
            unknown_flow: false,
            receiver_seq,
            receiver_counter: snapshot.rx_delta,
            transmit_counter: 0, // unidirectional measurement
            echoed_query: query.encode(),
        })
    }
}

/// The reflector side: per-flow sessions plus the mirrored coloring
/// schedule it runs its block clock on. The egress engine stays with the
/// egress node and is borrowed per call.
pub struct Reflector {
    config: LmConfig,
    schedule: ColoringSchedule,
    sessions: Vec<ReflectorSession>,
    index: HashMap<SidList, usize>,
    receiver_seq: u32,
}

impl Reflector {
    /// `schedule` is the reflector's mirror of the ingress schedule: same
    /// base, period and start color, read against the local clock.
    pub fn new(config: LmConfig, schedule: ColoringSchedule) -> Result<Reflector, LmError> {
        config.validate()?;
        Ok(Reflector { config, schedule, sessions: Vec::new(), index: HashMap::new(), receiver_seq: 0 })
    }

    pub fn add_flow(&mut self, flow: SidList) {
        if self.index.contains_key(&flow) {
            return;
        }
        self.index.insert(flow.clone(), self.sessions.len());
        self.sessions.push(ReflectorSession::new(flow));
    }

    pub fn schedule(&self) -> &ColoringSchedule {
        &self.schedule
    }

    fn take_receiver_seq(&mut self) -> u32 {
        let seq = self.receiver_seq;
        self.receiver_seq = self.receiver_seq.wrapping_add(1);
        seq
    }

    /// Closes every block whose guard interval has elapsed, on all
    /// sessions. Call this periodically — at least once per period, or
    /// block read-outs merge and get discarded as tainted.
    pub fn on_timer(
        &mut self,
        engine: &dyn MatcherEngine,
        now: Timestamp,
    ) -> Result<(), LmError> {
        self.schedule.observe(now)?;
        let Some(through) = self.config.closeable_through(&self.schedule, now) else {
            return Ok(());
        };
        for session in &mut self.sessions {
            session.close_up_to(engine, &self.schedule, through)?;
        }
        Ok(())
    }

    /// Answers a query that arrived for `flow` at local time `now`.
    ///
    /// The queried block is inferred as the most recent block of the
    /// query's color that already ended on the local clock — unambiguous
    /// as long as one-way delay plus clock skew stays below the guard
    /// interval. If the query beats the local close timer, the block is
    /// closed on demand; that is safe in the same delay budget, because
    /// every packet of the block has then already arrived (the sender
    /// waited out the guard) and the next block of that color has not
    /// started sending.
    ///
    /// Unknown flows are reported as [`LmError::UnknownFlow`]; transports
    /// should answer those with
    /// [`LmResponse::for_unknown_flow`](super::wire::LmResponse::for_unknown_flow)
    /// via [`unknown_flow_response`](Self::unknown_flow_response) so the
    /// sender learns about the misconfiguration.
    pub fn handle_query(
        &mut self,
        engine: &dyn MatcherEngine,
        flow: &[Ipv6Addr],
        query: &LmQuery,
        now: Timestamp,
    ) -> Result<LmResponse, LmError> {
        let position = self.schedule.observe(now)?;
        let Some(&idx) = self.index.get(flow) else {
            return Err(LmError::UnknownFlow(format_sids(flow)));
        };
        let Some(mut block) = position.index.checked_sub(1) else {
            return Err(LmError::BlockStillOpen {
                block: 0,
                ready_at: self.schedule.block_start(1) + self.config.guard,
            });
        };
        if self.schedule.color_of_block(block) != query.block {
            let Some(previous) = block.checked_sub(1) else {
                return Err(LmError::BlockStillOpen {
                    block: 0,
                    ready_at: self.schedule.block_start(1) + self.config.guard,
                });
            };
            block = previous;
        }
        let receiver_seq = self.take_receiver_seq();
        let session = &mut self.sessions[idx];
        session.close_up_to(engine, &self.schedule, block)?;
        session.answer(block, query, receiver_seq)
    }

    /// Error response for a query on an unregistered flow.
    pub fn unknown_flow_response(&mut self, query: &LmQuery) -> LmResponse {
        let seq = self.take_receiver_seq();
        LmResponse::for_unknown_flow(query, seq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::EngineKind;

    const PERIOD: u64 = 2_000_000_000;
    const GUARD: u64 = 1_000_000_000;

    fn sid(n: u16) -> Ipv6Addr {
        Ipv6Addr::new(0xfc00, 0, 0, 0, 0, 0, 0, n)
    }

    fn flow() -> SidList {
        SidList::new(vec![sid(0xa), sid(0xb)]).unwrap()
    }

    fn schedule() -> ColoringSchedule {
        ColoringSchedule::new(Timestamp::ZERO, PERIOD, Color::A)
    }

    fn config() -> LmConfig {
        LmConfig::new(PERIOD)
    }

    fn engine_with_flow() -> Box<dyn MatcherEngine> {
        let mut engine = EngineKind::Hash.build();
        engine.add_flow(flow()).unwrap();
        engine
    }

    fn bump(engine: &dyn MatcherEngine, color: Color, times: u64) {
        for _ in 0..times {
            assert!(engine.match_and_count(flow().as_ref(), color));
        }
    }

    /// Start of block `k` plus the guard: the earliest moment block `k-1`
    /// may be queried.
    fn query_time(block_after: u64) -> Timestamp {
        Timestamp(block_after * PERIOD + GUARD)
    }

    #[test]
    fn config_validation() {
        assert!(config().validate().is_ok());
        let mut bad = config();
        bad.guard = PERIOD;
        assert!(matches!(bad.validate(), Err(LmError::BadConfig(_))));
        bad = config();
        bad.guard = 0;
        assert!(matches!(bad.validate(), Err(LmError::BadConfig(_))));
        bad = config();
        bad.retry_interval = 0;
        assert!(matches!(bad.validate(), Err(LmError::BadConfig(_))));
    }

    #[test]
    fn query_carries_the_block_delta() {
        let engine = engine_with_flow();
        let schedule = schedule();
        let mut session = SenderSession::new(flow());

        bump(engine.as_ref(), Color::A, 100); // block 0 traffic
        let q0 = session.build_query(engine.as_ref(), &schedule, &config(), query_time(1)).unwrap();
        assert_eq!(q0.block, Color::A);
        assert_eq!(q0.sender_seq, 0);
        assert_eq!(q0.sender_counter, 100);

        bump(engine.as_ref(), Color::B, 40); // block 1 traffic
        bump(engine.as_ref(), Color::A, 7); // block 2 traffic, already running
        let q1 = session.build_query(engine.as_ref(), &schedule, &config(), query_time(2)).unwrap();
        assert_eq!(q1.block, Color::B);
        assert_eq!(q1.sender_seq, 1);
        assert_eq!(q1.sender_counter, 40, "block 2 packets must not leak into block 1");

        // Block 2 is A again: only the new A packets count.
        let q2 = session.build_query(engine.as_ref(), &schedule, &config(), query_time(3)).unwrap();
        assert_eq!(q2.sender_counter, 7);
    }

    #[test]
    fn build_query_refuses_open_or_done_blocks() {
        let engine = engine_with_flow();
        let schedule = schedule();
        let mut session = SenderSession::new(flow());
        let cfg = config();

        // Block 0 still running.
        let err = session.build_query(engine.as_ref(), &schedule, &cfg, Timestamp(PERIOD / 2));
        assert_eq!(err, Err(LmError::BlockStillOpen { block: 0, ready_at: query_time(1) }));
        // Block 0 over, guard still running.
        let err =
            session.build_query(engine.as_ref(), &schedule, &cfg, Timestamp(PERIOD + GUARD - 1));
        assert_eq!(err, Err(LmError::BlockStillOpen { block: 0, ready_at: query_time(1) }));
        // Ready.
        session.build_query(engine.as_ref(), &schedule, &cfg, query_time(1)).unwrap();
        // Same block again: outstanding.
        let err = session.build_query(engine.as_ref(), &schedule, &cfg, query_time(1) + 1);
        assert_eq!(err, Err(LmError::QueryOutstanding { block: 0 }));
    }

    fn respond(query: &LmQuery, receiver_seq: u32, rx: u64) -> LmResponse {
        LmResponse {
            block: query.block,
            unknown_flow: false,
            receiver_seq,
            receiver_counter: rx,
            transmit_counter: 0,
            echoed_query: query.encode(),
        }
    }

    #[test]
    fn response_resolves_into_a_loss_record() {
        let engine = engine_with_flow();
        let schedule = schedule();
        let mut session = SenderSession::new(flow());
        bump(engine.as_ref(), Color::A, 100);
        let q = session.build_query(engine.as_ref(), &schedule, &config(), query_time(1)).unwrap();

        let record = session.process_response(&respond(&q, 0, 97)).unwrap();
        assert_eq!(
            record,
            LossRecord {
                block_index: 0,
                block_color: Color::A,
                tx_count: 100,
                rx_count: 97,
                loss: 3
            }
        );
        assert_eq!(session.records(), &[record]);
        assert_eq!(session.outstanding(), 0);

        // A duplicate of the same response is stale, not a second record.
        let err = session.process_response(&respond(&q, 1, 97));
        assert_eq!(err, Err(LmError::StaleResponse { seq: 0 }));
        assert_eq!(session.records().len(), 1);

        // Once resolved, building again for the same block is refused.
        let err = session.build_query(engine.as_ref(), &schedule, &config(), query_time(1) + 5);
        assert_eq!(err, Err(LmError::AlreadyReported { block: 0 }));
    }

    #[test]
    fn negative_loss_is_an_error_and_a_gap() {
        let engine = engine_with_flow();
        let schedule = schedule();
        let mut session = SenderSession::new(flow());
        bump(engine.as_ref(), Color::A, 10);
        let q = session.build_query(engine.as_ref(), &schedule, &config(), query_time(1)).unwrap();

        let err = session.process_response(&respond(&q, 0, 12));
        assert_eq!(err, Err(LmError::NegativeLoss { block: 0, tx: 10, rx: 12 }));
        assert!(session.records().is_empty(), "a negative loss must never become a record");
        assert_eq!(
            session.gaps(),
            &[GapRecord {
                block_index: 0,
                block_color: Color::A,
                tx_count: Some(10),
                reason: GapReason::NegativeLoss,
            }]
        );
    }

    #[test]
    fn retries_spend_fresh_seqs_but_keep_the_delta() {
        let engine = engine_with_flow();
        let schedule = schedule();
        let mut session = SenderSession::new(flow());
        let cfg = config();
        bump(engine.as_ref(), Color::A, 55);
        let q0 = session.build_query(engine.as_ref(), &schedule, &cfg, query_time(1)).unwrap();

        // Too soon to retry.
        let none = session.retry_due(&schedule, &cfg, query_time(1) + 1).unwrap();
        assert!(none.is_none());
        let q1 = session
            .retry_due(&schedule, &cfg, query_time(1) + cfg.retry_interval)
            .unwrap()
            .unwrap();
        assert_eq!(q1.sender_seq, 1);
        assert_eq!(q1.sender_counter, q0.sender_counter);
        assert_eq!(q1.block, q0.block);
        let q2 = session
            .retry_due(&schedule, &cfg, query_time(1) + 2 * cfg.retry_interval)
            .unwrap()
            .unwrap();
        assert_eq!(q2.sender_seq, 2);
        // Retry budget exhausted (max_retries = 2).
        let none = session
            .retry_due(&schedule, &cfg, query_time(1) + 3 * cfg.retry_interval)
            .unwrap();
        assert!(none.is_none());

        // A response to *any* attempt resolves the block.
        let record = session.process_response(&respond(&q1, 0, 55)).unwrap();
        assert_eq!(record.loss, 0);
    }

    #[test]
    fn sender_seq_is_gapless_across_blocks_and_retries() {
        let engine = engine_with_flow();
        let schedule = schedule();
        let mut session = SenderSession::new(flow());
        let cfg = config();
        let mut seqs = Vec::new();

        for block_after in 1..=4u64 {
            bump(engine.as_ref(), schedule.color_of_block(block_after - 1), 5);
            let q = session
                .build_query(engine.as_ref(), &schedule, &cfg, query_time(block_after))
                .unwrap();
            seqs.push(q.sender_seq);
            if block_after == 2 {
                let r = session
                    .retry_due(&schedule, &cfg, query_time(block_after) + cfg.retry_interval)
                    .unwrap()
                    .unwrap();
                seqs.push(r.sender_seq);
            }
        }
        assert_eq!(seqs, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn unanswered_blocks_expire_into_gaps() {
        let engine = engine_with_flow();
        let schedule = schedule();
        let mut session = SenderSession::new(flow());
        let cfg = config();
        bump(engine.as_ref(), Color::A, 9);
        session.build_query(engine.as_ref(), &schedule, &cfg, query_time(1)).unwrap();

        assert!(session.expire(2, &cfg).is_empty(), "not overdue yet");
        let expired = session.expire(3, &cfg);
        assert_eq!(
            expired,
            vec![GapRecord {
                block_index: 0,
                block_color: Color::A,
                tx_count: Some(9),
                reason: GapReason::NoResponse,
            }]
        );
        assert_eq!(session.outstanding(), 0);
    }

    #[test]
    fn receiver_seq_regression_resets_the_session() {
        let engine = engine_with_flow();
        let schedule = schedule();
        let mut session = SenderSession::new(flow());
        let cfg = config();

        bump(engine.as_ref(), Color::A, 5);
        let q0 = session.build_query(engine.as_ref(), &schedule, &cfg, query_time(1)).unwrap();
        session.process_response(&respond(&q0, 41, 5)).unwrap();

        bump(engine.as_ref(), Color::B, 5);
        let q1 = session.build_query(engine.as_ref(), &schedule, &cfg, query_time(2)).unwrap();
        let err = session.process_response(&respond(&q1, 2, 5));
        assert_eq!(err, Err(LmError::ReflectorRestart { last: 41, got: 2 }));
        assert_eq!(session.resets(), 1);
        assert_eq!(session.outstanding(), 0);
        assert_eq!(session.gaps().last().unwrap().reason, GapReason::ReflectorRestart);

        // The session keeps working afterwards.
        bump(engine.as_ref(), Color::A, 3);
        let q2 = session.build_query(engine.as_ref(), &schedule, &cfg, query_time(3)).unwrap();
        assert_eq!(q2.sender_counter, 3);
        let record = session.process_response(&respond(&q2, 3, 3)).unwrap();
        assert_eq!(record.loss, 0);
    }

    #[test]
    fn missed_capture_windows_void_the_merged_blocks() {
        let engine = engine_with_flow();
        let schedule = schedule();
        let mut session = SenderSession::new(flow());
        let cfg = config();

        bump(engine.as_ref(), Color::A, 10); // block 0
        session.build_query(engine.as_ref(), &schedule, &cfg, query_time(1)).unwrap();
        bump(engine.as_ref(), Color::B, 20); // block 1
        bump(engine.as_ref(), Color::A, 30); // block 2 — never queried
        bump(engine.as_ref(), Color::B, 40); // block 3 — never queried
        bump(engine.as_ref(), Color::A, 50); // block 4

        // The sender stalled through two windows; block 4's capture would
        // fold block 2's 30 packets into block 4's 50.
        let err = session.build_query(engine.as_ref(), &schedule, &cfg, query_time(5));
        assert_eq!(err, Err(LmError::MergedCapture { block: 4, merged: 1 }));
        let reasons: Vec<_> = session.gaps().iter().map(|g| (g.block_index, g.reason)).collect();
        assert_eq!(
            reasons,
            vec![(2, GapReason::MissedWindow), (4, GapReason::MergedCapture)]
        );

        // The very next block of each color is exact again.
        bump(engine.as_ref(), Color::B, 60); // block 5
        let q5 = session.build_query(engine.as_ref(), &schedule, &cfg, query_time(6));
        // Color B was never captured at all: blocks 1 and 3 fold into
        // block 5's read-out, so that capture merges too.
        assert_eq!(q5, Err(LmError::MergedCapture { block: 5, merged: 2 }));
        bump(engine.as_ref(), Color::A, 70); // block 6
        let q6 = session
            .build_query(engine.as_ref(), &schedule, &cfg, query_time(7))
            .unwrap();
        assert_eq!(q6.sender_counter, 70, "first clean block after resync is exact");
    }

    // --- reflector ---------------------------------------------------------

    #[test]
    fn reflector_answers_from_close_time_snapshots() {
        let engine = engine_with_flow();
        let mut reflector = Reflector::new(config(), schedule()).unwrap();
        reflector.add_flow(flow());

        bump(engine.as_ref(), Color::A, 97); // block 0 arrivals
        reflector.on_timer(engine.as_ref(), query_time(1)).unwrap();
        // Block 1 arrivals trickle in after the snapshot; they must not
        // contaminate block 0's answer.
        bump(engine.as_ref(), Color::B, 13);

        let q = LmQuery { block: Color::A, sender_seq: 0, sender_counter: 100 };
        let r = reflector
            .handle_query(engine.as_ref(), flow().as_ref(), &q, query_time(1) + 50_000_000)
            .unwrap();
        assert_eq!(r.receiver_counter, 97);
        assert_eq!(r.block, Color::A);
        assert_eq!(r.transmit_counter, 0);
        assert_eq!(r.echoed_query, q.encode());

        // A retry gets the same snapshot under a fresh receiver_seq.
        let q2 = LmQuery { block: Color::A, sender_seq: 1, sender_counter: 100 };
        let r2 = reflector
            .handle_query(engine.as_ref(), flow().as_ref(), &q2, query_time(1) + 250_000_000)
            .unwrap();
        assert_eq!(r2.receiver_counter, 97);
        assert_eq!(r2.receiver_seq, r.receiver_seq + 1);
    }

    #[test]
    fn query_beating_the_timer_closes_on_demand() {
        let engine = engine_with_flow();
        let mut reflector = Reflector::new(config(), schedule()).unwrap();
        reflector.add_flow(flow());

        bump(engine.as_ref(), Color::A, 7);
        // No timer ran; the query arrives just after the flip (the sender
        // side must be skewed/early for this, but it is within tolerance).
        let q = LmQuery { block: Color::A, sender_seq: 0, sender_counter: 7 };
        let r = reflector
            .handle_query(engine.as_ref(), flow().as_ref(), &q, Timestamp(PERIOD + 1))
            .unwrap();
        assert_eq!(r.receiver_counter, 7);
    }

    #[test]
    fn reflector_skew_within_guard_does_not_corrupt_blocks() {
        // The reflector's clock runs 0.3s behind the sender's. Queries
        // arrive stamped with reflector-local time.
        let skew = 300_000_000u64;
        let engine = engine_with_flow();
        let mut reflector = Reflector::new(config(), schedule()).unwrap();
        reflector.add_flow(flow());

        bump(engine.as_ref(), Color::A, 11); // block 0
        reflector.on_timer(engine.as_ref(), Timestamp(PERIOD + GUARD - skew)).unwrap();
        bump(engine.as_ref(), Color::B, 22); // block 1
        let q = LmQuery { block: Color::A, sender_seq: 0, sender_counter: 11 };
        let r = reflector
            .handle_query(engine.as_ref(), flow().as_ref(), &q, Timestamp(PERIOD + GUARD + 10 - skew))
            .unwrap();
        assert_eq!(r.receiver_counter, 11);

        reflector.on_timer(engine.as_ref(), Timestamp(2 * PERIOD + GUARD - skew)).unwrap();
        let q = LmQuery { block: Color::B, sender_seq: 1, sender_counter: 22 };
        let r = reflector
            .handle_query(engine.as_ref(), flow().as_ref(), &q, Timestamp(2 * PERIOD + GUARD + 10 - skew))
            .unwrap();
        assert_eq!(r.receiver_counter, 22);
    }

    #[test]
    fn stalled_timer_taints_merged_blocks() {
        let engine = engine_with_flow();
        let mut reflector = Reflector::new(config(), schedule()).unwrap();
        reflector.add_flow(flow());

        bump(engine.as_ref(), Color::A, 10); // block 0
        bump(engine.as_ref(), Color::B, 20); // block 1
        bump(engine.as_ref(), Color::A, 30); // block 2
        // First timer fires after three blocks already ended: the A
        // read-out now covers blocks 0 and 2 fused together.
        reflector.on_timer(engine.as_ref(), query_time(3)).unwrap();

        for (color, seq) in [(Color::A, 0u32), (Color::B, 1)] {
            let q = LmQuery { block: color, sender_seq: seq, sender_counter: 1 };
            let err =
                reflector.handle_query(engine.as_ref(), flow().as_ref(), &q, query_time(3) + 1);
            assert!(
                matches!(err, Err(LmError::TaintedSnapshot { .. })),
                "late merged read-outs must never be served: {err:?}"
            );
        }
    }

    #[test]
    fn unknown_flow_query_gets_an_error_response() {
        let engine = engine_with_flow();
        let mut reflector = Reflector::new(config(), schedule()).unwrap();
        // No flows registered at all.
        let q = LmQuery { block: Color::A, sender_seq: 0, sender_counter: 5 };
        let err = reflector.handle_query(engine.as_ref(), flow().as_ref(), &q, query_time(1));
        assert!(matches!(err, Err(LmError::UnknownFlow(_))));
        let r = reflector.unknown_flow_response(&q);
        assert!(r.unknown_flow);

        // And the sender turns that into a gap for the block.
        let mut session = SenderSession::new(flow());
        bump(engine.as_ref(), Color::A, 5);
        let schedule = schedule();
        let q = session.build_query(engine.as_ref(), &schedule, &config(), query_time(1)).unwrap();
        let unknown = LmResponse::for_unknown_flow(&q, 0);
        let err = session.process_response(&unknown);
        assert_eq!(err, Err(LmError::UnknownFlowReported { block: 0 }));
        assert_eq!(session.gaps().last().unwrap().reason, GapReason::UnknownFlowAtReflector);
    }

    #[test]
    fn sender_poll_drives_query_and_retry_cadence() {
        let engine = engine_with_flow();
        let schedule = schedule();
        let mut sender = Sender::new(config()).unwrap();
        let idx = sender.add_flow(flow());
        let cfg = *sender.config();

        bump(engine.as_ref(), Color::A, 3);
        // Mid-block 0: nothing to do yet.
        let out = sender.poll(engine.as_ref(), &schedule, Timestamp(PERIOD / 2)).unwrap();
        assert!(out.queries.is_empty());
        // First poll past the guard issues the query...
        let out = sender.poll(engine.as_ref(), &schedule, query_time(1)).unwrap();
        assert_eq!(out.queries.len(), 1);
        assert_eq!(out.queries[0].0, idx);
        // ...the next one is quiet...
        let out = sender.poll(engine.as_ref(), &schedule, query_time(1) + 1).unwrap();
        assert!(out.queries.is_empty());
        // ...and one retry interval later it retransmits.
        let out = sender
            .poll(engine.as_ref(), &schedule, query_time(1) + cfg.retry_interval)
            .unwrap();
        assert_eq!(out.queries.len(), 1);
        assert_eq!(out.queries[0].1.sender_seq, 1);

        // Unanswered long enough: the block expires into a gap.
        let out = sender.poll(engine.as_ref(), &schedule, query_time(4)).unwrap();
        assert_eq!(out.gaps.len(), 1);
        assert_eq!(out.gaps[0].1.reason, GapReason::NoResponse);
    }

    #[test]
    fn responses_demultiplex_by_echoed_query() {
        let engine = {
            let mut engine = EngineKind::Hash.build();
            engine.add_flow(flow()).unwrap();
            engine.add_flow(SidList::new(vec![sid(0xc)]).unwrap()).unwrap();
            engine
        };
        let other = SidList::new(vec![sid(0xc)]).unwrap();
        let schedule = schedule();
        let mut sender = Sender::new(config()).unwrap();
        sender.add_flow(flow());
        sender.add_flow(other.clone());

        engine.match_and_count(flow().as_ref(), Color::A);
        for _ in 0..2 {
            engine.match_and_count(other.as_ref(), Color::A);
        }
        let out = sender.poll(engine.as_ref(), &schedule, query_time(1)).unwrap();
        assert_eq!(out.queries.len(), 2);

        // Answer them in reverse order through the shared-transport path.
        let (i1, q1) = out.queries[1];
        let (idx, record) = sender.handle_response_any(&respond(&q1, 0, 2)).unwrap();
        assert_eq!(idx, i1);
        assert_eq!(record.tx_count, 2);
        let (i0, q0) = out.queries[0];
        let (idx, record) = sender.handle_response_any(&respond(&q0, 1, 1)).unwrap();
        assert_eq!(idx, i0);
        assert_eq!(record.tx_count, 1);

        // A response nobody owns is stale.
        let bogus = respond(&LmQuery { block: Color::A, sender_seq: 99, sender_counter: 0 }, 2, 0);
        assert_eq!(sender.handle_response_any(&bogus), Err(LmError::StaleResponse { seq: 99 }));
    }
}
