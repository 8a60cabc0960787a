use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;

use super::frame::{Direction, Frame, MessageType, HEADER_LEN, NO_LAYER};
use super::tensor::{descriptor_len, scan_tensors, WireDType};

/// Exact bit accounting for one session.
///
/// Payload bits are tensor values only. Frame headers, tensor descriptors and
/// control messages are framing. Per-layer counts are tensor transmissions per
/// token row, so one adapted layer in a forward pass adds 1 to `n_c2d` and 3 to
/// `n_d2c` for every token.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficLedger {
    pub bits_d2c_payload: u64,
    pub bits_c2d_payload: u64,
    pub bits_d2c_framing: u64,
    pub bits_c2d_framing: u64,
    pub frames_d2c: u64,
    pub frames_c2d: u64,
    pub n_c2d: BTreeMap<u16, u64>,
    pub n_d2c: BTreeMap<u16, u64>,
    pub tokens_processed: u64,
    /// Finite values that became infinities when narrowed to 16 bits.
    pub f16_overflows: u64,
}

impl TrafficLedger {
    pub fn record(&mut self, dir: Direction, frame: &Frame) -> Result<()> {
        let mut payload_bits = 0u64;
        let mut framing_bytes = HEADER_LEN as u64;
        let mut row_tensors = 0u64;
        if frame.msg_type.carries_tensors() {
            for t in scan_tensors(&frame.payload)? {
                payload_bits += t.numel * t.dtype.bits();
                framing_bytes += descriptor_len(t.dims.len()) as u64;
                let cols = t.dims.last().copied().unwrap_or(1).max(1) as u64;
                let rows = t.numel / cols;
                row_tensors += rows;
                if frame.msg_type == MessageType::TokenEmbeds {
                    self.tokens_processed += rows;
                }
                if t.dtype == WireDType::F16 {
                    self.f16_overflows += frame.payload[t.data]
                        .chunks_exact(2)
                        .filter(|c| u16::from_le_bytes([c[0], c[1]]) & 0x7FFF == 0x7C00)
                        .count() as u64;
                }
            }
        } else {
            framing_bytes += frame.payload.len() as u64;
        }
        let (payload, framing, frames, counts) = match dir {
            Direction::D2C => (
                &mut self.bits_d2c_payload,
                &mut self.bits_d2c_framing,
                &mut self.frames_d2c,
                &mut self.n_d2c,
            ),
            Direction::C2D => (
                &mut self.bits_c2d_payload,
                &mut self.bits_c2d_framing,
                &mut self.frames_c2d,
                &mut self.n_c2d,
            ),
        };
        *payload += payload_bits;
        *framing += framing_bytes * 8;
        *frames += 1;
        if frame.layer != NO_LAYER && row_tensors > 0 {
            *counts.entry(frame.layer).or_default() += row_tensors;
        }
        Ok(())
    }

    pub fn payload_bits(&self) -> u64 {
        self.bits_d2c_payload + self.bits_c2d_payload
    }

    pub fn framing_bits(&self) -> u64 {
        self.bits_d2c_framing + self.bits_c2d_framing
    }

    /// Traffic accumulated after `earlier`, which must be a prior snapshot of
    /// this ledger.
    pub fn since(&self, earlier: &TrafficLedger) -> TrafficLedger {
        let diff = |now: &BTreeMap<u16, u64>, then: &BTreeMap<u16, u64>| {
            now.iter()
                .map(|(l, &n)| (*l, n - then.get(l).copied().unwrap_or(0)))
                .filter(|&(_, n)| n > 0)
                .collect()
        };
        TrafficLedger {
            bits_d2c_payload: self.bits_d2c_payload - earlier.bits_d2c_payload,
            bits_c2d_payload: self.bits_c2d_payload - earlier.bits_c2d_payload,
            bits_d2c_framing: self.bits_d2c_framing - earlier.bits_d2c_framing,
            bits_c2d_framing: self.bits_c2d_framing - earlier.bits_c2d_framing,
            frames_d2c: self.frames_d2c - earlier.frames_d2c,
            frames_c2d: self.frames_c2d - earlier.frames_c2d,
            n_c2d: diff(&self.n_c2d, &earlier.n_c2d),
            n_d2c: diff(&self.n_d2c, &earlier.n_d2c),
            tokens_processed: self.tokens_processed - earlier.tokens_processed,
            f16_overflows: self.f16_overflows - earlier.f16_overflows,
        }
    }
}

/// Shape parameters that fully determine payload traffic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficParams {
    pub d: u64,
    pub r_c2d: u64,
    pub r_d2c: u64,
    pub adapted_layers: Vec<u16>,
    pub wire_bits: u64,
}

impl TrafficParams {
    pub fn n_adapted(&self) -> u64 {
        self.adapted_layers.len() as u64
    }
}

/// One unit of session activity whose traffic is known in closed form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// `passes` forward passes feeding `tokens` tokens in total; each pass ends
    /// with one `1 × d` hidden state sent to the device.
    Inference { tokens: u64, passes: u64 },
    /// One training step over `rows = bs · l` positions.
    Train { rows: u64, embedding_grad: bool },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedTraffic {
    pub bits_d2c: u64,
    pub bits_c2d: u64,
    pub tokens: u64,
    pub n_c2d: BTreeMap<u16, u64>,
    pub n_d2c: BTreeMap<u16, u64>,
}

pub fn expected_traffic(p: &TrafficParams, phases: &[Phase]) -> ExpectedTraffic {
    let n = p.n_adapted();
    let wb = p.wire_bits;
    let mut e = ExpectedTraffic::default();
    let per_layer = |c2d: u64, d2c: u64, e: &mut ExpectedTraffic| {
        for &l in &p.adapted_layers {
            *e.n_c2d.entry(l).or_default() += c2d;
            *e.n_d2c.entry(l).or_default() += d2c;
        }
    };
    for phase in phases {
        match *phase {
            Phase::Inference { tokens, passes } => {
                e.bits_d2c += wb * tokens * (p.d + n * 3 * p.r_d2c);
                e.bits_c2d += wb * (tokens * n * p.r_c2d + passes * p.d);
                e.tokens += tokens;
                per_layer(tokens, 3 * tokens, &mut e);
            }
            Phase::Train { rows, embedding_grad } => {
                e.bits_d2c += wb * rows * (p.d + n * 3 * p.r_d2c + p.d + n * p.r_c2d);
                e.bits_c2d += wb * rows * (n * p.r_c2d + p.d + n * 3 * p.r_d2c + if embedding_grad { p.d } else { 0 });
                e.tokens += rows;
                per_layer(rows + 3 * rows, 3 * rows + rows, &mut e);
            }
        }
    }
    e
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerCheck {
    pub pass: bool,
    pub expected: ExpectedTraffic,
    pub actual_d2c: u64,
    pub actual_c2d: u64,
    pub mismatches: Vec<String>,
}

/// Compares measured payload traffic with the closed form. Exact equality, no
/// tolerance; framing is ignored.
pub fn ledger_check(ledger: &TrafficLedger, params: &TrafficParams, phases: &[Phase]) -> LedgerCheck {
    let expected = expected_traffic(params, phases);
    let mut mismatches = Vec::new();
    let mut cmp = |what: &str, want: u64, got: u64| {
        if want != got {
            mismatches.push(format!("{what}: expected {want}, measured {got} (diff {})", got as i128 - want as i128));
        }
    };
    cmp("d2c payload bits", expected.bits_d2c, ledger.bits_d2c_payload);
    cmp("c2d payload bits", expected.bits_c2d, ledger.bits_c2d_payload);
    cmp("tokens", expected.tokens, ledger.tokens_processed);
    if expected.n_c2d != ledger.n_c2d {
        mismatches.push(format!("per-layer c2d counts: expected {:?}, measured {:?}", expected.n_c2d, ledger.n_c2d));
    }
    if expected.n_d2c != ledger.n_d2c {
        mismatches.push(format!("per-layer d2c counts: expected {:?}, measured {:?}", expected.n_d2c, ledger.n_d2c));
    }
    LedgerCheck {
        pass: mismatches.is_empty(),
        actual_d2c: ledger.bits_d2c_payload,
        actual_c2d: ledger.bits_c2d_payload,
        expected,
        mismatches,
    }
}
