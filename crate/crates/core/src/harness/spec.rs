//! Topology and scenario files.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::Manifest;
use crate::security::{Interface, TierKind};
use crate::store::ColumnStoreConfig;
use crate::value::KeyRange;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierSpec {
    pub replica: String,
    pub tier: TierKind,
}

/// A link between two replicas. `a` initiates scheduled rounds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkSpec {
    #[serde(default)]
    pub id: Option<String>,
    pub a: String,
    pub b: String,
    /// Store names or `prefix*` patterns; empty means every store.
    #[serde(default)]
    pub stores: Vec<String>,
    #[serde(default)]
    pub range: Option<KeyRange>,
    #[serde(default)]
    pub tag: Option<String>,
    /// Scheduled round period; without it rounds only run from steps.
    #[serde(default)]
    pub period_ms: Option<u64>,
    /// `[down_start, down_end)` windows in virtual ns.
    #[serde(default)]
    pub outages: Vec<(i64, i64)>,
}

impl LinkSpec {
    pub fn link_id(&self) -> String {
        self.id
            .clone()
            .unwrap_or_else(|| format!("{}-{}", self.a, self.b))
    }

    pub fn is_up(&self, t: i64) -> bool {
        !self.outages.iter().any(|&(s, e)| s <= t && t < e)
    }
}

/// Stores created at load time on the listed replicas (all when empty).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreSpec {
    #[serde(default)]
    pub replicas: Vec<String>,
    #[serde(flatten)]
    pub config: ColumnStoreConfig,
}

/// A scripted poll source bound at load time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub replica: String,
    pub source_id: String,
    pub store: String,
    pub period_ms: u64,
    /// `(ts, value)` pairs; a reading becomes available at its ts.
    #[serde(default)]
    pub readings: Vec<(i64, serde_json::Value)>,
    #[serde(default)]
    pub outages: Vec<(i64, i64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    /// Append `count` records starting at `ts` (default: now), `ts_step`
    /// apart. Without `value`, values are drawn from the seeded RNG.
    Append {
        replica: String,
        store: String,
        #[serde(default)]
        ts: Option<i64>,
        #[serde(default = "one")]
        count: u64,
        #[serde(default = "one_i64")]
        ts_step: i64,
        #[serde(default)]
        value: Option<serde_json::Value>,
        #[serde(default)]
        subject: Option<String>,
    },
    /// Overwrite (or, with no value, delete) the record at `(ts, seq)`.
    Mutate {
        replica: String,
        store: String,
        ts: i64,
        #[serde(default)]
        seq: u32,
        #[serde(default)]
        value: Option<serde_json::Value>,
        #[serde(default)]
        subject: Option<String>,
    },
    Publish {
        replica: String,
        manifest: Box<Manifest>,
    },
    Deploy {
        replica: String,
        manifest_id: String,
        version: u64,
    },
    SyncRound {
        link: String,
    },
    PollTick {
        replica: String,
    },
    AssertConverged {
        stores: Vec<String>,
        replicas: Vec<String>,
        #[serde(default)]
        range: Option<KeyRange>,
    },
    /// Create events seen for `store` at `replica`. Without `expected`,
    /// compares against the store's committed creates.
    AssertEventCount {
        replica: String,
        store: String,
        #[serde(default)]
        expected: Option<u64>,
    },
    AssertDenied {
        replica: String,
        subject: String,
        interface: Interface,
        store: String,
    },
}

fn one() -> u64 {
    1
}

fn one_i64() -> i64 {
    1
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::Append { .. } => "append",
            Action::Mutate { .. } => "mutate",
            Action::Publish { .. } => "publish",
            Action::Deploy { .. } => "deploy",
            Action::SyncRound { .. } => "sync_round",
            Action::PollTick { .. } => "poll_tick",
            Action::AssertConverged { .. } => "assert_converged",
            Action::AssertEventCount { .. } => "assert_event_count",
            Action::AssertDenied { .. } => "assert_denied",
        }
    }

    pub fn is_assertion(&self) -> bool {
        matches!(
            self,
            Action::AssertConverged { .. }
                | Action::AssertEventCount { .. }
                | Action::AssertDenied { .. }
        )
    }

    fn replicas(&self) -> Vec<&str> {
        match self {
            Action::Append { replica, .. }
            | Action::Mutate { replica, .. }
            | Action::Publish { replica, .. }
            | Action::Deploy { replica, .. }
            | Action::PollTick { replica }
            | Action::AssertEventCount { replica, .. }
            | Action::AssertDenied { replica, .. } => vec![replica.as_str()],
            Action::AssertConverged { replicas, .. } => {
                replicas.iter().map(String::as_str).collect()
            }
            Action::SyncRound { .. } => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioStep {
    pub at: i64,
    #[serde(flatten)]
    pub action: Action,
    /// The step is expected to fail; success is then a scenario failure.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub expect_error: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologySpec {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Simulated end time; defaults to the last step, outage end or
    /// source reading.
    #[serde(default)]
    pub horizon_ns: Option<i64>,
    pub tiers: Vec<TierSpec>,
    #[serde(default)]
    pub links: Vec<LinkSpec>,
    #[serde(default)]
    pub stores: Vec<StoreSpec>,
    #[serde(default)]
    pub sources: Vec<SourceSpec>,
    #[serde(default)]
    pub steps: Vec<ScenarioStep>,
}

impl TopologySpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Parse { line, message } => Error::Parse {
                line,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn horizon(&self) -> i64 {
        self.horizon_ns.unwrap_or_else(|| {
            let steps = self.steps.iter().map(|s| s.at);
            let outages = self
                .links
                .iter()
                .flat_map(|l| l.outages.iter().map(|o| o.1));
            let readings = self
                .sources
                .iter()
                .flat_map(|s| s.readings.iter().map(|r| r.0));
            steps
                .chain(outages)
                .chain(readings)
                .max()
                .unwrap_or(0)
                .max(0)
        })
    }

    pub fn tier_of(&self, replica: &str) -> Option<TierKind> {
        self.tiers
            .iter()
            .find(|t| t.replica == replica)
            .map(|t| t.tier)
    }

    /// Every violated invariant, itemized.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut ids = BTreeSet::new();
        for t in &self.tiers {
            if t.replica.is_empty() {
                errs.push("tier with empty replica id".to_string());
            }
            if !ids.insert(t.replica.as_str()) {
                errs.push(format!("replica {} listed twice", t.replica));
            }
        }
        let horizon = self.horizon();
        let mut link_ids = BTreeSet::new();
        for l in &self.links {
            let id = l.link_id();
            if !link_ids.insert(id.clone()) {
                errs.push(format!("link {id} listed twice"));
            }
            match (self.tier_of(&l.a), self.tier_of(&l.b)) {
                (Some(ta), Some(tb)) if !ta.is_adjacent(tb) => {
                    errs.push(format!(
                        "link {id}: {} ({ta}) and {} ({tb}) are not adjacent tiers",
                        l.a, l.b
                    ));
                }
                (Some(_), Some(_)) => {}
                _ => errs.push(format!("link {id}: unknown endpoint")),
            }
            if l.a == l.b {
                errs.push(format!("link {id}: both ends are {}", l.a));
            }
            if l.period_ms == Some(0) {
                errs.push(format!("link {id}: period_ms must be positive"));
            }
            for &(s, e) in &l.outages {
                if s >= e {
                    errs.push(format!("link {id}: outage [{s}, {e}) is empty"));
                }
                if s < 0 || e > horizon {
                    errs.push(format!(
                        "link {id}: outage [{s}, {e}) outside [0, {horizon})"
                    ));
                }
            }
        }
        for s in &self.stores {
            for r in &s.replicas {
                if !ids.contains(r.as_str()) {
                    errs.push(format!("store {}: unknown replica {r}", s.config.name));
                }
            }
        }
        for s in &self.sources {
            if !ids.contains(s.replica.as_str()) {
                errs.push(format!(
                    "source {}: unknown replica {}",
                    s.source_id, s.replica
                ));
            }
        }
        let mut prev = i64::MIN;
        for (i, step) in self.steps.iter().enumerate() {
            if step.at < prev {
                errs.push(format!(
                    "step {i}: at {} is before the previous step",
                    step.at
                ));
            }
            if step.at < 0 {
                errs.push(format!("step {i}: negative time"));
            }
            prev = step.at;
            for r in step.action.replicas() {
                if !ids.contains(r) {
                    errs.push(format!("step {i}: unknown replica {r}"));
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(errs))
        }
    }
}
