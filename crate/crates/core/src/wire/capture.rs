//! Capture files: a magic prefix followed by `(direction byte, encoded frame)`
//! records, direction 0 for device-to-cloud and 1 for cloud-to-device.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::frame::{read_frame, Direction, Frame};
use super::ledger::TrafficLedger;
use super::transport::TapRecord;

pub const CAPTURE_MAGIC: [u8; 8] = *b"PLRRCAP1";

pub fn write_capture(w: &mut impl Write, records: &[TapRecord]) -> Result<()> {
    w.write_all(&CAPTURE_MAGIC)?;
    for r in records {
        w.write_all(&[match r.direction {
            Direction::D2C => 0,
            Direction::C2D => 1,
        }])?;
        w.write_all(&r.bytes)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_capture(r: &mut impl Read) -> Result<Vec<(Direction, Frame)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Framing("capture file shorter than its magic".into()))?;
    if magic != CAPTURE_MAGIC {
        return Err(Error::Protocol("not a capture file".into()));
    }
    let mut out = Vec::new();
    loop {
        let mut dir = [0u8; 1];
        match r.read(&mut dir)? {
            0 => break,
            _ => {
                let direction = match dir[0] {
                    0 => Direction::D2C,
                    1 => Direction::C2D,
                    b => return Err(Error::Protocol(format!("bad capture direction byte {b}"))),
                };
                let frame = read_frame(r)?.ok_or_else(|| Error::Framing("capture ends after a direction byte".into()))?;
                out.push((direction, frame));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureReport {
    pub frames: u64,
    pub violations: Vec<String>,
    pub ledgers: BTreeMap<u32, TrafficLedger>,
}

impl CaptureReport {
    pub fn pass(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Replays captured frames: checks the direction whitelist and per-direction
/// sequence ordering, and rebuilds each session's ledger.
pub fn verify_frames(frames: &[(Direction, Frame)]) -> CaptureReport {
    let mut report = CaptureReport::default();
    let mut last_seq: BTreeMap<(u32, Direction), u32> = BTreeMap::new();
    for (i, (dir, f)) in frames.iter().enumerate() {
        report.frames += 1;
        if !f.msg_type.allowed(*dir) {
            report
                .violations
                .push(format!("frame {i}: {:?} is not allowed {:?}", f.msg_type, dir));
        }
        if let Some(prev) = last_seq.insert((f.session_id, *dir), f.seq) {
            if f.seq <= prev {
                report.violations.push(format!(
                    "frame {i}: session {} {:?} seq {} after {prev}",
                    f.session_id, dir, f.seq
                ));
            }
        }
        if let Err(e) = report.ledgers.entry(f.session_id).or_default().record(*dir, f) {
            report.violations.push(format!("frame {i}: {e}"));
        }
    }
    report
}
