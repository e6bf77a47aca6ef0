//! Single writer shared by every session: all mutations take the lock,
//! commit, and broadcast the resulting deltas before releasing it.

use std::collections::{HashMap, VecDeque};
use std::sync::{Mutex, MutexGuard};

use hitl_sgraph::metrics;
use hitl_sgraph::optimizer::OptimizationReport;
use hitl_sgraph::scene_graph::{GraphError, GraphSnapshot, PlaneId, RoomProvenance};
use hitl_sgraph::simulator::{PipelineEngine, PipelineError, StepOutcome};
use tokio::sync::broadcast;

use crate::protocol::{Hello, LiveMetrics, Message, PROTOCOL_VERSION};

/// Remembered command replies, oldest evicted first.
pub const COMMAND_CACHE: usize = 4096;

/// Broadcast queue depth per subscriber before it must resync.
pub const EVENT_BUFFER: usize = 2048;

struct State {
    engine: PipelineEngine,
    published: u64,
    replies: HashMap<String, Message>,
    reply_order: VecDeque<String>,
    last_report: Option<OptimizationReport>,
}

pub struct Hub {
    state: Mutex<State>,
    events: broadcast::Sender<Message>,
}

/// Messages that bring a new client up to date, plus the live feed that
/// continues exactly where they stop.
pub struct Subscription {
    pub initial: Vec<Message>,
    pub events: broadcast::Receiver<Message>,
}

/// Nack reason for a rejected command.
pub fn violation_name(err: &PipelineError) -> String {
    match err {
        PipelineError::Graph(GraphError::InvalidRoom(v)) => v.name().to_string(),
        PipelineError::Graph(GraphError::UnknownPlane(_)) => "unknown-plane".to_string(),
        PipelineError::Optimizer(_) => "optimizer-error".to_string(),
        _ => "internal-error".to_string(),
    }
}

impl Hub {
    pub fn new(engine: PipelineEngine) -> Hub {
        let published = engine.graph().revision();
        let (events, _) = broadcast::channel(EVENT_BUFFER);
        Hub {
            state: Mutex::new(State {
                engine,
                published,
                replies: HashMap::new(),
                reply_order: VecDeque::new(),
                last_report: None,
            }),
            events,
        }
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        // a panicking writer leaves the graph in a committed state, so keep serving
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn revision(&self) -> u64 {
        self.lock().engine.graph().revision()
    }

    pub fn snapshot(&self) -> GraphSnapshot {
        self.lock().engine.graph().snapshot()
    }

    pub fn is_finished(&self) -> bool {
        self.lock().engine.is_finished()
    }

    pub fn next_stamp(&self) -> Option<f64> {
        self.lock().engine.next_stamp()
    }

    pub fn metrics(&self) -> LiveMetrics {
        live_metrics(&self.lock())
    }

    /// Read access to the engine under the writer lock.
    pub fn with_engine<R>(&self, f: impl FnOnce(&PipelineEngine) -> R) -> R {
        f(&self.lock().engine)
    }

    /// Resume from `last_revision` when the delta buffer still covers it,
    /// otherwise start from a full snapshot.
    pub fn subscribe(&self, last_revision: Option<u64>) -> Subscription {
        let state = self.lock();
        let events = self.events.subscribe();
        let graph = state.engine.graph();
        let mut initial = vec![Message::Hello(Hello {
            protocol_version: PROTOCOL_VERSION,
            last_revision: Some(graph.revision()),
        })];
        match last_revision.map(|r| graph.deltas_since(r)) {
            Some(Ok(deltas)) => initial.extend(deltas.into_iter().map(Message::Delta)),
            _ => initial.push(Message::Snapshot(graph.snapshot())),
        }
        initial.push(Message::MetricsUpdate { revision: graph.revision(), metrics: live_metrics(&state) });
        Subscription { initial, events }
    }

    fn publish(&self, state: &mut State) {
        let graph = state.engine.graph();
        if graph.revision() == state.published {
            return;
        }
        match graph.deltas_since(state.published) {
            Ok(deltas) => {
                for d in deltas {
                    let _ = self.events.send(Message::Delta(d));
                }
            }
            Err(_) => {
                let _ = self.events.send(Message::Snapshot(graph.snapshot()));
            }
        }
        state.published = graph.revision();
        let _ = self.events.send(Message::MetricsUpdate { revision: state.published, metrics: live_metrics(state) });
    }

    /// Handle an operator room command. A repeated `cmd_id` gets the reply
    /// it got the first time and changes nothing.
    pub fn create_room(&self, cmd_id: &str, plane_ids: [PlaneId; 4]) -> Message {
        let mut state = self.lock();
        if let Some(reply) = state.replies.get(cmd_id) {
            return reply.clone();
        }
        let reply = match state.engine.create_human_room(plane_ids) {
            Ok((room_id, report)) => {
                if report.is_some() {
                    state.last_report = report;
                }
                self.publish(&mut state);
                Message::Ack { cmd_id: cmd_id.to_string(), revision: state.engine.graph().revision(), room_id }
            }
            Err(e) => {
                log::info!("create_room {cmd_id} rejected: {e}");
                Message::Nack { cmd_id: cmd_id.to_string(), violation: violation_name(&e), message: e.to_string() }
            }
        };
        state.replies.insert(cmd_id.to_string(), reply.clone());
        state.reply_order.push_back(cmd_id.to_string());
        while state.reply_order.len() > COMMAND_CACHE {
            if let Some(old) = state.reply_order.pop_front() {
                state.replies.remove(&old);
            }
        }
        reply
    }

    /// Feed the next logged keyframe; `None` once the log is exhausted.
    pub fn step(&self) -> Result<Option<StepOutcome>, PipelineError> {
        let mut state = self.lock();
        let outcome = state.engine.step()?;
        if let Some(out) = &outcome {
            if out.optimization.is_some() {
                state.last_report = out.optimization.clone();
            }
        }
        self.publish(&mut state);
        Ok(outcome)
    }

    /// Optimize now, publishing the result.
    pub fn optimize(&self) -> Result<Option<OptimizationReport>, PipelineError> {
        let mut state = self.lock();
        let report = state.engine.optimize()?;
        if report.is_some() {
            state.last_report = report.clone();
        }
        self.publish(&mut state);
        Ok(report)
    }
}

fn live_metrics(state: &State) -> LiveMetrics {
    let engine = &state.engine;
    let graph = engine.graph();
    let estimate: Vec<_> = graph.keyframes().iter().map(|k| (k.stamp, k.pose)).collect();
    let truth = engine.log().ground_truth_trajectory();
    LiveMetrics {
        stamp: graph.keyframes().last().map(|k| k.stamp),
        keyframes: graph.keyframes().len(),
        planes: graph.planes().len(),
        rooms: graph.room_count(),
        human_rooms: graph.rooms().filter(|r| r.provenance == RoomProvenance::Human).count(),
        ate_m: metrics::ate(&estimate, &truth, true).ok(),
        cost: state.last_report.as_ref().map(|r| r.final_cost),
        iterations: state.last_report.as_ref().map(|r| r.iterations),
        finished: engine.is_finished(),
    }
}
