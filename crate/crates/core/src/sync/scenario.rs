//! Deterministic desk-scale simulation of a rural site and a center.
//!
//! A scenario is a TOML file:
//!
//! ```toml
//! seed = 42
//! end = 172800        # virtual seconds
//! tick_every = 600
//! latency = 2         # one-way, per leg
//! horizon = 86400     # optional, defaults to 24 h
//!
//! [[channel]]         # explicit segments, or a [random_channel] table
//! start = 0
//! end = 172800
//! state = "up"
//!
//! [[center_record]]   # records that already exist at the center
//! at = 0
//! patient = "alice"
//! problem = "cough"
//! image_bytes = 256
//!
//! [[visit]]           # records created at the rural site
//! at = 3600
//! patient = "bob"
//! problem = "rash"
//!
//! [[consult]]
//! booking = "b1"
//! patient = "alice"
//! start = 90000
//! mode = "teleconsultation"
//! report_complete = false
//! ```
//!
//! Labels are mapped to identifiers drawn from the seeded generator in order
//! of first appearance, so the same file and seed always yield the same ids.
//! At each instant events run in the order: center records, visits, tick,
//! consultations.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fixtures::RecordFactory;
use crate::id::{AccountId, BookingId, ProblemId, RecordId};
use crate::store::{RetentionPolicy, Tier, TierStore};
use crate::time::{Timestamp, HOUR};

use super::channel::{ChannelSchedule, Segment};
use super::{
    ConsultMode, ConsultationEntry, ConsultationSchedule, PrefetchRequest, SimCenter, SyncConfig, SyncEngine,
    SyncError, SyncStats,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("malformed scenario: {0}")]
    MalformedScenario(String),
    #[error("simulation failed: {0}")]
    Sync(#[from] SyncError),
}

fn malformed(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::MalformedScenario(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomChannel {
    pub mean_segment: i64,
    pub down_fraction: f64,
    pub tail_up: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordEvent {
    pub at: i64,
    pub patient: String,
    pub problem: String,
    #[serde(default)]
    pub image_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsultEvent {
    pub booking: String,
    pub patient: String,
    pub start: i64,
    pub mode: ScenarioMode,
    #[serde(default)]
    pub report_complete: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioMode {
    Teleconsultation,
    Telediagnosis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub end: i64,
    pub tick_every: i64,
    pub latency: i64,
    #[serde(default)]
    pub horizon: Option<i64>,
    #[serde(default)]
    pub local_capacity: Option<usize>,
    #[serde(default)]
    pub channel: Vec<Segment>,
    #[serde(default)]
    pub random_channel: Option<RandomChannel>,
    #[serde(default)]
    pub center_record: Vec<RecordEvent>,
    #[serde(default)]
    pub visit: Vec<RecordEvent>,
    #[serde(default)]
    pub consult: Vec<ConsultEvent>,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text).map_err(|e| malformed(e.to_string()))?;
        s.check()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    fn check(&self) -> Result<(), ScenarioError> {
        if self.end <= 0 {
            return Err(malformed("end must be positive"));
        }
        if self.tick_every <= 0 {
            return Err(malformed("tick_every must be positive"));
        }
        if self.horizon.is_some_and(|h| h <= 0) {
            return Err(malformed("horizon must be positive"));
        }
        if self.local_capacity == Some(0) {
            return Err(malformed("local_capacity must be positive"));
        }
        match (self.channel.is_empty(), &self.random_channel) {
            (true, None) => return Err(malformed("need [[channel]] segments or [random_channel]")),
            (false, Some(_)) => return Err(malformed("give either [[channel]] or [random_channel], not both")),
            _ => {}
        }
        self.channel_schedule()?;
        let in_range = |t: i64| (0..=self.end).contains(&t);
        for e in self.center_record.iter().chain(&self.visit) {
            if !in_range(e.at) {
                return Err(malformed(format!("record event at {} outside [0, end]", e.at)));
            }
        }
        let mut bookings = BTreeSet::new();
        for c in &self.consult {
            if !in_range(c.start) {
                return Err(malformed(format!("consult {} outside [0, end]", c.booking)));
            }
            if !bookings.insert(&c.booking) {
                return Err(malformed(format!("booking label {} used twice", c.booking)));
            }
        }
        Ok(())
    }

    pub fn channel_schedule(&self) -> Result<ChannelSchedule, ScenarioError> {
        match &self.random_channel {
            Some(r) => {
                if r.mean_segment <= 0 || !(0.0..=1.0).contains(&r.down_fraction) || r.tail_up < 0 {
                    return Err(malformed("random_channel parameters out of range"));
                }
                Ok(ChannelSchedule::random(
                    self.seed,
                    self.end,
                    r.mean_segment,
                    r.down_fraction,
                    r.tail_up,
                    self.latency,
                ))
            }
            None => ChannelSchedule::new(self.seed, self.channel.clone(), self.latency)
                .map_err(|e| malformed(e.to_string())),
        }
    }
}

/// One line of a transcript. Field order is fixed by declaration order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TranscriptLine {
    CenterRecord {
        t: i64,
        record: RecordId,
        patient: AccountId,
    },
    Visit {
        t: i64,
        record: RecordId,
        patient: AccountId,
    },
    Tick {
        t: i64,
        delta: SyncStats,
        outbox: usize,
    },
    Consult {
        t: i64,
        booking: BookingId,
        patient: AccountId,
        prefetched: bool,
        wan_messages: u64,
        folder_len: usize,
        /// Center records that existed before the horizon began but were
        /// not local at consult time.
        missing_from_local: usize,
    },
    Final {
        stats: SyncStats,
        rural_created: Vec<RecordId>,
        center_main: Vec<RecordId>,
        outbox: Vec<RecordId>,
    },
}

/// Borrowed fields of the closing transcript line.
pub type FinalSummary<'a> = (&'a SyncStats, &'a [RecordId], &'a [RecordId], &'a [RecordId]);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcript {
    pub lines: Vec<TranscriptLine>,
}

impl Transcript {
    /// Line-delimited JSON, one event per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            out.push_str(&serde_json::to_string(l).expect("transcript lines serialize"));
            out.push('\n');
        }
        out
    }

    /// Stats, rural-created ids, center Main ids and outbox ids.
    pub fn final_line(&self) -> Option<FinalSummary<'_>> {
        self.lines.iter().rev().find_map(|l| match l {
            TranscriptLine::Final {
                stats,
                rural_created,
                center_main,
                outbox,
            } => Some((stats, &rural_created[..], &center_main[..], &outbox[..])),
            _ => None,
        })
    }

    pub fn consults(&self) -> impl Iterator<Item = &TranscriptLine> {
        self.lines
            .iter()
            .filter(|l| matches!(l, TranscriptLine::Consult { .. }))
    }
}

/// Everything a run produces: the transcript plus the final stores, for
/// tests that need to look deeper than the transcript.
#[derive(Debug)]
pub struct Simulation {
    pub transcript: Transcript,
    pub engine: SyncEngine,
    pub center: SimCenter,
}

struct Labels {
    accounts: BTreeMap<String, AccountId>,
    problems: BTreeMap<String, ProblemId>,
    bookings: BTreeMap<String, BookingId>,
}

impl Labels {
    fn resolve(s: &Scenario, f: &mut RecordFactory) -> Self {
        let t0 = Timestamp::from_secs(0);
        let mut l = Labels {
            accounts: BTreeMap::new(),
            problems: BTreeMap::new(),
            bookings: BTreeMap::new(),
        };
        for e in s.center_record.iter().chain(&s.visit) {
            if !l.accounts.contains_key(&e.patient) {
                let id = f.ids().account(t0);
                l.accounts.insert(e.patient.clone(), id);
            }
            if !l.problems.contains_key(&e.problem) {
                let id = f.ids().problem(t0);
                l.problems.insert(e.problem.clone(), id);
            }
        }
        for c in &s.consult {
            if !l.accounts.contains_key(&c.patient) {
                let id = f.ids().account(t0);
                l.accounts.insert(c.patient.clone(), id);
            }
            let id = f.ids().booking(t0);
            l.bookings.insert(c.booking.clone(), id);
        }
        l
    }
}

/// Runs a scenario to completion.
pub fn simulate(scenario: &Scenario) -> Result<Simulation, ScenarioError> {
    scenario.check()?;
    let schedule = scenario.channel_schedule()?;
    let mut factory = RecordFactory::new(scenario.seed);
    let labels = Labels::resolve(scenario, &mut factory);
    let doctor = factory.ids().account(Timestamp::from_secs(0));

    let horizon = scenario.horizon.unwrap_or(24 * HOUR);
    let capacity = scenario
        .local_capacity
        .unwrap_or(RetentionPolicy::default().local_capacity);
    let policy = RetentionPolicy::new(RetentionPolicy::default().main_retention, capacity);

    let mut center = SimCenter::new(TierStore::in_memory(RetentionPolicy::default()), schedule);
    let mut engine = SyncEngine::new(TierStore::in_memory(policy), SyncConfig { horizon });
    engine.set_schedule(ConsultationSchedule {
        entries: scenario
            .consult
            .iter()
            .map(|c| ConsultationEntry {
                booking_id: labels.bookings[&c.booking],
                patient_id: labels.accounts[&c.patient],
                start_time: Timestamp::from_secs(c.start),
                mode: match c.mode {
                    ScenarioMode::Teleconsultation => ConsultMode::Teleconsultation,
                    ScenarioMode::Telediagnosis => ConsultMode::Telediagnosis,
                },
                report_complete: c.report_complete,
            })
            .collect(),
    });

    // Instants at which anything happens.
    let mut instants: BTreeSet<i64> = (0..=scenario.end / scenario.tick_every)
        .map(|k| k * scenario.tick_every)
        .collect();
    instants.extend(scenario.center_record.iter().map(|e| e.at));
    instants.extend(scenario.visit.iter().map(|e| e.at));
    instants.extend(scenario.consult.iter().map(|c| c.start));

    let mut lines = Vec::new();
    let mut rural_created = Vec::new();
    // (created_at, id) of every center-side record, for the sufficiency check.
    let mut center_created: Vec<(i64, AccountId, RecordId)> = Vec::new();

    for &t in &instants {
        let now = Timestamp::from_secs(t);
        for e in scenario.center_record.iter().filter(|e| e.at == t) {
            let patient = labels.accounts[&e.patient];
            let rec = factory.record(patient, doctor, labels.problems[&e.problem], now, e.image_bytes);
            let id = rec.record_id();
            center
                .store
                .ingest(rec.pip, rec.blobs, Tier::Main, now)
                .map_err(SyncError::from)?;
            center_created.push((t, patient, id));
            lines.push(TranscriptLine::CenterRecord { t, record: id, patient });
        }
        for e in scenario.visit.iter().filter(|e| e.at == t) {
            let patient = labels.accounts[&e.patient];
            let rec = factory.record(patient, doctor, labels.problems[&e.problem], now, e.image_bytes);
            let entry = engine
                .record_locally(rec.pip, rec.blobs, now)
                .map_err(SyncError::from)?;
            rural_created.push(entry.record_id);
            lines.push(TranscriptLine::Visit {
                t,
                record: entry.record_id,
                patient,
            });
        }
        if t % scenario.tick_every == 0 {
            let delta = engine.tick(&mut center, now)?;
            if !delta.is_zero() {
                lines.push(TranscriptLine::Tick {
                    t,
                    delta,
                    outbox: engine.outbox_len(),
                });
            }
        }
        for c in scenario.consult.iter().filter(|c| c.start == t) {
            let patient = labels.accounts[&c.patient];
            let booking = labels.bookings[&c.booking];
            let req = PrefetchRequest {
                patient_id: patient,
                booking_id: booking,
            };
            // Checked before the read, which would fetch anything missing.
            let missing_from_local = center_created
                .iter()
                .filter(|(at, p, id)| {
                    *p == patient && *at < c.start - horizon && !engine.store().local_cache().contains(*id)
                })
                .count();
            let (prefetched, wan_messages, folder_len) = match engine.consult_read(req, &mut center, now) {
                Ok(read) => (read.was_prefetched, read.stats.wan_messages, read.folder.len()),
                Err(SyncError::ChannelDown) => (false, 0, 0),
                Err(e) => return Err(e.into()),
            };
            lines.push(TranscriptLine::Consult {
                t,
                booking,
                patient,
                prefetched,
                wan_messages,
                folder_len,
                missing_from_local,
            });
        }
    }

    lines.push(TranscriptLine::Final {
        stats: engine.stats(),
        rural_created,
        center_main: center.store.main_ids(),
        outbox: engine.outbox().map(|e| e.record_id).collect(),
    });
    Ok(Simulation {
        transcript: Transcript { lines },
        engine,
        center,
    })
}

/// Re-runs the scenario and compares against a recorded transcript.
pub fn verify_transcript(scenario: &Scenario, recorded: &str) -> Result<bool, ScenarioError> {
    Ok(simulate(scenario)?.transcript.to_text() == recorded)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"
seed = 5
end = 7200
tick_every = 600
latency = 1

[[channel]]
start = 0
end = 7200
state = "up"

[[visit]]
at = 100
patient = "bob"
problem = "rash"
"#;

    #[test]
    fn parses_and_runs_minimal_scenario() {
        let s = Scenario::parse(BASIC).unwrap();
        let sim = simulate(&s).unwrap();
        let (stats, created, center, outbox) = sim.transcript.final_line().unwrap();
        assert_eq!(created.len(), 1);
        assert_eq!(center, created);
        assert!(outbox.is_empty());
        assert_eq!(stats.records_forwarded, 1);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        assert!(matches!(
            Scenario::parse("seed = 1"),
            Err(ScenarioError::MalformedScenario(_))
        ));
        let no_channel = BASIC.replace("[[channel]]\nstart = 0\nend = 7200\nstate = \"up\"\n", "");
        assert!(Scenario::parse(&no_channel).is_err());
        let gap = format!("{BASIC}\n[[channel]]\nstart = 7300\nend = 8000\nstate = \"down\"\n");
        assert!(Scenario::parse(&gap).is_err());
        let late = BASIC.replace("at = 100", "at = 99999");
        assert!(Scenario::parse(&late).is_err());
        let unknown = format!("{BASIC}\nbogus = 1\n");
        assert!(Scenario::parse(&unknown).is_err());
    }

    #[test]
    fn toml_roundtrip() {
        let s = Scenario::parse(BASIC).unwrap();
        assert_eq!(Scenario::parse(&s.to_toml()).unwrap(), s);
    }
}
