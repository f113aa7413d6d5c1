//! Aggregate run metrics, derived from the trace and the delivered log.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde_json::{Map, Value};

use crate::abv::{KIND_MASTER_ORDER, KIND_ORDER_ABORT, KIND_ORDER_CONFIRM};
use crate::app::ProcessId;
use crate::simnet::{SimConfig, SimOutcome};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Metrics {
    /// Commits at the lowest-numbered correct process, by decision.
    pub confirms: u64,
    pub aborts: u64,
    /// Order messages in the delivered log; those not committed were stale.
    pub orders_delivered: u64,
    pub orders_stale: u64,
    /// Distinct epochs above 0 started by any correct process.
    pub epochs_started: u64,
    pub messages: BTreeMap<String, u64>,
    /// Invocation-to-commit time at the invoker, per operation.
    pub latency: BTreeMap<String, u64>,
    pub end_time: u64,
    pub quiesced: bool,
}

impl Metrics {
    pub fn collect(outcome: &SimOutcome, cfg: &SimConfig) -> Self {
        let correct = cfg.correct_processes();
        let reference = correct.first().copied();
        let mut m = Metrics {
            end_time: outcome.end_time,
            quiesced: outcome.quiesced,
            messages: outcome.messages.clone(),
            ..Default::default()
        };
        m.orders_delivered = outcome
            .log
            .iter()
            .filter(|x| {
                matches!(
                    x.kind(),
                    Some(KIND_ORDER_CONFIRM) | Some(KIND_ORDER_ABORT) | Some(KIND_MASTER_ORDER)
                )
            })
            .count() as u64;
        let mut epochs = BTreeSet::new();
        let mut invoked: HashMap<(ProcessId, String), u64> = HashMap::new();
        for r in outcome.trace.records() {
            let Some(p) = r.proc else { continue };
            match r.ev.as_str() {
                "commit" if Some(p) == reference => match r.get_str("decision") {
                    Some("confirm") => m.confirms += 1,
                    Some("abort") => m.aborts += 1,
                    _ => {}
                },
                "start-epoch" if correct.contains(&p) => {
                    if let Some(e) = r.get_u64("epoch") {
                        epochs.insert(e);
                    }
                }
                "invoke" => {
                    if let Some(op) = r.get_str("op") {
                        invoked.insert((p, op.to_string()), r.t);
                    }
                }
                _ => {}
            }
            if r.ev == "commit" {
                if let Some(op) = r.get_str("op") {
                    if let Some(t0) = invoked.remove(&(p, op.to_string())) {
                        m.latency.insert(op.to_string(), r.t - t0);
                    }
                }
            }
        }
        m.epochs_started = epochs.len() as u64;
        m.orders_stale = m.orders_delivered.saturating_sub(m.confirms + m.aborts);
        m
    }

    pub fn mean_latency(&self) -> Option<f64> {
        if self.latency.is_empty() {
            return None;
        }
        Some(self.latency.values().sum::<u64>() as f64 / self.latency.len() as f64)
    }

    /// Flat key/value document.
    pub fn to_json(&self) -> Value {
        let mut o = Map::new();
        o.insert("confirms".into(), self.confirms.into());
        o.insert("aborts".into(), self.aborts.into());
        o.insert("orders_delivered".into(), self.orders_delivered.into());
        o.insert("orders_stale".into(), self.orders_stale.into());
        o.insert("epochs_started".into(), self.epochs_started.into());
        o.insert("end_time".into(), self.end_time.into());
        o.insert("quiesced".into(), self.quiesced.into());
        if let Some(mean) = self.mean_latency() {
            o.insert("latency_mean".into(), mean.into());
            o.insert("latency_max".into(), (*self.latency.values().max().unwrap()).into());
        }
        for (k, v) in &self.messages {
            o.insert(format!("messages.{k}"), (*v).into());
        }
        for (k, v) in &self.latency {
            o.insert(format!("latency.{k}"), (*v).into());
        }
        Value::Object(o)
    }
}
