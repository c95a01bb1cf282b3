//! Event records, trajectories, replay and the on-disk trajectory format.
//!
//! File layout: a UTF-8 text header terminated by a line `end-header`,
//! followed by length-prefixed binary records `[tag u8][len u32 LE][payload]`.
//! Tag 1 holds the initial configuration text, tag 2 one event, tag 3 one
//! snapshot (time followed by configuration text).

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::model::{Configuration, ModelParams, TruncationParams};
use crate::rng::StreamSeed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    MigrateLeft { k: u32 },
    MigrateRight { k: u32 },
    Birth { offspring: u32, mutated: bool },
    Death { k: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventRecord {
    pub time: f64,
    pub site: i64,
    pub kind: EventKind,
    /// Occupancy of `site` after the event.
    pub deme_total: u64,
    /// Occupancy of the destination after a migration.
    pub target_total: Option<u64>,
}

impl EventRecord {
    pub fn target_site(&self) -> Option<i64> {
        match self.kind {
            EventKind::MigrateLeft { .. } => Some(self.site - 1),
            EventKind::MigrateRight { .. } => Some(self.site + 1),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub time: f64,
    pub config: Configuration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub initial: Configuration,
    pub params: ModelParams,
    pub trunc: TruncationParams,
    pub seed: StreamSeed,
    pub horizon: f64,
    pub events: Vec<EventRecord>,
    pub snapshots: Vec<Snapshot>,
    pub final_config: Configuration,
}

fn apply(config: &mut Configuration, ev: &EventRecord, index: usize) -> Result<(), EngineError> {
    let bad = |msg: &str| EngineError::ReplayInconsistent {
        index,
        msg: msg.to_string(),
    };
    match ev.kind {
        EventKind::MigrateLeft { k } | EventKind::MigrateRight { k } => {
            if !config.remove(ev.site, k, 1) {
                return Err(bad("migrating particle absent"));
            }
            let to = ev.target_site().expect("migration has a target");
            config.add(to, k, 1);
            if Some(config.total_at(to)) != ev.target_total {
                return Err(bad("target occupancy differs"));
            }
        }
        EventKind::Birth { offspring, .. } => config.add(ev.site, offspring, 1),
        EventKind::Death { k } => {
            if !config.remove(ev.site, k, 1) {
                return Err(bad("dying particle absent"));
            }
        }
    }
    if config.total_at(ev.site) != ev.deme_total {
        return Err(bad("deme occupancy differs"));
    }
    Ok(())
}

/// Replays every event from the initial configuration and checks each
/// recorded snapshot and the final state.
pub fn replay_checked(traj: &Trajectory) -> Result<Configuration, EngineError> {
    let mut config = traj.initial.clone();
    let mut snaps = traj.snapshots.iter().enumerate().peekable();
    let mut check_until = |config: &Configuration, t: f64| -> Result<(), EngineError> {
        while let Some((i, s)) = snaps.next_if(|(_, s)| s.time < t) {
            if &s.config != config {
                return Err(EngineError::SnapshotMismatch {
                    index: i,
                    time: s.time,
                });
            }
        }
        Ok(())
    };
    for (i, ev) in traj.events.iter().enumerate() {
        check_until(&config, ev.time)?;
        apply(&mut config, ev, i)?;
    }
    check_until(&config, f64::INFINITY)?;
    if config != traj.final_config {
        return Err(EngineError::SnapshotMismatch {
            index: traj.snapshots.len(),
            time: traj.horizon,
        });
    }
    Ok(config)
}

/// Configuration at `time`: the initial state with every event at or
/// before `time` applied.
pub fn config_at(traj: &Trajectory, time: f64) -> Result<Configuration, EngineError> {
    let mut config = traj.initial.clone();
    for (i, ev) in traj
        .events
        .iter()
        .enumerate()
        .take_while(|(_, e)| e.time <= time)
    {
        apply(&mut config, ev, i)?;
    }
    Ok(config)
}

/// Final configuration obtained by replaying the trajectory.
pub fn replay(traj: &Trajectory) -> Result<Configuration, EngineError> {
    replay_checked(traj)
}

#[derive(Serialize, Deserialize)]
struct Header {
    params: ModelParams,
    trunc: TruncationParams,
    seed: StreamSeed,
    horizon: f64,
}

const MAGIC: &str = "ratchet-trajectory v1";

fn fmt_err<E: std::fmt::Display>(e: E) -> EngineError {
    EngineError::Format(e.to_string())
}

fn encode_event(ev: &EventRecord) -> Vec<u8> {
    let mut b = Vec::with_capacity(40);
    b.extend_from_slice(&ev.time.to_bits().to_le_bytes());
    b.extend_from_slice(&ev.site.to_le_bytes());
    let (tag, k, flag) = match ev.kind {
        EventKind::MigrateLeft { k } => (0u8, k, 0u8),
        EventKind::MigrateRight { k } => (1, k, 0),
        EventKind::Birth { offspring, mutated } => (2, offspring, mutated as u8),
        EventKind::Death { k } => (3, k, 0),
    };
    b.push(tag);
    b.extend_from_slice(&k.to_le_bytes());
    b.push(flag);
    b.extend_from_slice(&ev.deme_total.to_le_bytes());
    match ev.target_total {
        Some(t) => {
            b.push(1);
            b.extend_from_slice(&t.to_le_bytes());
        }
        None => b.push(0),
    }
    b
}

fn take<const N: usize>(buf: &[u8], pos: &mut usize) -> Result<[u8; N], EngineError> {
    let s = buf
        .get(*pos..*pos + N)
        .ok_or_else(|| fmt_err("truncated record"))?;
    *pos += N;
    Ok(s.try_into().expect("length checked"))
}

fn decode_event(buf: &[u8]) -> Result<EventRecord, EngineError> {
    let mut pos = 0;
    let time = f64::from_bits(u64::from_le_bytes(take(buf, &mut pos)?));
    let site = i64::from_le_bytes(take(buf, &mut pos)?);
    let [tag] = take::<1>(buf, &mut pos)?;
    let k = u32::from_le_bytes(take(buf, &mut pos)?);
    let [flag] = take::<1>(buf, &mut pos)?;
    let deme_total = u64::from_le_bytes(take(buf, &mut pos)?);
    let [has_target] = take::<1>(buf, &mut pos)?;
    let target_total = match has_target {
        0 => None,
        _ => Some(u64::from_le_bytes(take(buf, &mut pos)?)),
    };
    let kind = match tag {
        0 => EventKind::MigrateLeft { k },
        1 => EventKind::MigrateRight { k },
        2 => EventKind::Birth {
            offspring: k,
            mutated: flag != 0,
        },
        3 => EventKind::Death { k },
        t => return Err(fmt_err(format!("unknown event tag {t}"))),
    };
    Ok(EventRecord {
        time,
        site,
        kind,
        deme_total,
        target_total,
    })
}

fn write_record<W: Write>(w: &mut W, tag: u8, payload: &[u8]) -> std::io::Result<()> {
    w.write_all(&[tag])?;
    w.write_all(&(payload.len() as u32).to_le_bytes())?;
    w.write_all(payload)
}

impl Trajectory {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), EngineError> {
        let header = Header {
            params: self.params.clone(),
            trunc: self.trunc,
            seed: self.seed,
            horizon: self.horizon,
        };
        let json = serde_json::to_string(&header).map_err(fmt_err)?;
        let io = |r: std::io::Result<()>| r.map_err(fmt_err);
        io(writeln!(w, "{MAGIC}"))?;
        io(writeln!(w, "{json}"))?;
        io(writeln!(w, "end-header"))?;
        let l = self.params.l;
        io(write_record(w, 1, self.initial.to_text(l).as_bytes()))?;
        for ev in &self.events {
            io(write_record(w, 2, &encode_event(ev)))?;
        }
        for s in &self.snapshots {
            let mut p = s.time.to_bits().to_le_bytes().to_vec();
            p.extend_from_slice(s.config.to_text(l).as_bytes());
            io(write_record(w, 3, &p))?;
        }
        let mut p = self.horizon.to_bits().to_le_bytes().to_vec();
        p.extend_from_slice(self.final_config.to_text(l).as_bytes());
        io(write_record(w, 4, &p))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v)
            .expect("writing to memory cannot fail");
        v
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Trajectory, EngineError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf).map_err(fmt_err)?;
        Self::from_bytes(&buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Trajectory, EngineError> {
        let marker = b"\nend-header\n";
        let end = buf
            .windows(marker.len())
            .position(|w| w == marker)
            .ok_or_else(|| fmt_err("missing end-header"))?;
        let text = std::str::from_utf8(&buf[..end]).map_err(fmt_err)?;
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(fmt_err("bad magic line"));
        }
        let header: Header =
            serde_json::from_str(lines.next().ok_or_else(|| fmt_err("missing header"))?)
                .map_err(fmt_err)?;
        let mut pos = end + marker.len();
        let mut initial = None;
        let mut final_config = None;
        let mut events = Vec::new();
        let mut snapshots = Vec::new();
        let config = |b: &[u8]| -> Result<Configuration, EngineError> {
            let t = std::str::from_utf8(b).map_err(fmt_err)?;
            Ok(Configuration::from_text(t).map_err(fmt_err)?.0)
        };
        while pos < buf.len() {
            let [tag] = take::<1>(buf, &mut pos)?;
            let len = u32::from_le_bytes(take(buf, &mut pos)?) as usize;
            let payload = buf
                .get(pos..pos + len)
                .ok_or_else(|| fmt_err("truncated payload"))?;
            pos += len;
            match tag {
                1 => initial = Some(config(payload)?),
                2 => events.push(decode_event(payload)?),
                3 | 4 => {
                    let mut p = 0;
                    let time = f64::from_bits(u64::from_le_bytes(take(payload, &mut p)?));
                    let c = config(&payload[p..])?;
                    if tag == 3 {
                        snapshots.push(Snapshot { time, config: c });
                    } else {
                        final_config = Some(c);
                    }
                }
                t => return Err(fmt_err(format!("unknown record tag {t}"))),
            }
        }
        Ok(Trajectory {
            initial: initial.ok_or_else(|| fmt_err("missing initial configuration"))?,
            params: header.params,
            trunc: header.trunc,
            seed: header.seed,
            horizon: header.horizon,
            events,
            snapshots,
            final_config: final_config.ok_or_else(|| fmt_err("missing final configuration"))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Trajectory {
        let mut initial = Configuration::new();
        initial.add(0, 0, 2);
        let mut after = initial.clone();
        after.remove(0, 0, 1);
        after.add(1, 0, 1);
        Trajectory {
            initial: initial.clone(),
            params: ModelParams::fisher_kpp(1.0, 1.0, 1, 0.0, 0.5),
            trunc: TruncationParams::new(2.0, 1),
            seed: StreamSeed {
                master: 3,
                stream: 4,
            },
            horizon: 1.0,
            events: vec![EventRecord {
                time: 0.25,
                site: 0,
                kind: EventKind::MigrateRight { k: 0 },
                deme_total: 1,
                target_total: Some(1),
            }],
            snapshots: vec![
                Snapshot {
                    time: 0.1,
                    config: initial,
                },
                Snapshot {
                    time: 0.5,
                    config: after.clone(),
                },
            ],
            final_config: after,
        }
    }

    #[test]
    fn replay_and_roundtrip() {
        let t = tiny();
        assert_eq!(replay(&t).unwrap(), t.final_config);
        let back = Trajectory::from_bytes(&t.to_bytes()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn corrupted_snapshot_detected() {
        let mut t = tiny();
        t.snapshots[1].config.add(5, 0, 1);
        assert!(matches!(
            replay(&t),
            Err(EngineError::SnapshotMismatch { index: 1, .. })
        ));
    }

    #[test]
    fn empty_trajectory_replays_to_initial() {
        let mut t = tiny();
        t.events.clear();
        t.snapshots.clear();
        t.final_config = t.initial.clone();
        assert_eq!(replay(&t).unwrap(), t.initial);
    }
}
