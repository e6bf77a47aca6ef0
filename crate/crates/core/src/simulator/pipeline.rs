//! Incremental SLAM over a simulation log: dead reckoning, plane
//! association, room detection, scripted operator rooms and periodic
//! optimization. The live service drives the same engine.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{InterventionSpec, SimulationLog};
use crate::geometry::Pose;
use crate::metrics::{self, MetricsError, MetricsRow, Prf, RoomMatchConfig};
use crate::optimizer::{self, OptimizationConfig, OptimizationReport, OptimizerError};
use crate::room_detect;
use crate::scene_graph::{GraphConfig, GraphError, KeyframeId, PlaneId, PlaneObservation, RoomId, RoomProvenance, SceneGraph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub auto_detect: bool,
    /// Apply the scenario's scripted operator rooms.
    pub interventions: bool,
    pub kappa: f64,
    /// Optimize after this many keyframes.
    pub optimize_every: usize,
    /// Optimize as soon as an operator room is added instead of waiting for
    /// the next periodic run.
    pub optimize_on_intervention: bool,
    pub optimization: OptimizationConfig,
    pub graph: GraphConfig,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        let graph = GraphConfig::default();
        PipelineOptions {
            auto_detect: true,
            interventions: false,
            kappa: graph.noise.human_kappa,
            optimize_every: 5,
            optimize_on_intervention: true,
            optimization: OptimizationConfig::default(),
            graph,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("kappa must exceed 1, got {0}")]
    BadKappa(f64),
    #[error("optimize_every must be at least 1")]
    BadBatch,
    #[error("log has no keyframes")]
    EmptyLog,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum InterventionStatus {
    Pending,
    Applied { room: RoomId },
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionOutcome {
    pub time: f64,
    pub plane_keys: [String; 4],
    #[serde(flatten)]
    pub status: InterventionStatus,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepOutcome {
    pub keyframe: Option<KeyframeId>,
    pub auto_rooms: Vec<RoomId>,
    pub removed_rooms: Vec<RoomId>,
    pub human_rooms: Vec<RoomId>,
    pub optimization: Option<OptimizationReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub keyframes: usize,
    pub optimizations: usize,
    pub last_optimization: Option<OptimizationReport>,
    pub interventions: Vec<InterventionOutcome>,
    pub diverged: bool,
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub graph: SceneGraph,
    pub trajectory: Vec<(f64, Pose)>,
    pub report: PipelineReport,
}

pub struct PipelineEngine {
    log: SimulationLog,
    options: PipelineOptions,
    graph: SceneGraph,
    next: usize,
    key_to_plane: BTreeMap<String, PlaneId>,
    interventions: Vec<InterventionOutcome>,
    since_optimization: usize,
    optimizations: usize,
    last_optimization: Option<OptimizationReport>,
    diverged: bool,
}

impl PipelineEngine {
    pub fn new(log: SimulationLog, options: PipelineOptions) -> Result<Self, PipelineError> {
        if !(options.kappa > 1.0) {
            return Err(PipelineError::BadKappa(options.kappa));
        }
        if options.optimize_every == 0 {
            return Err(PipelineError::BadBatch);
        }
        if log.keyframes.is_empty() {
            return Err(PipelineError::EmptyLog);
        }
        let mut config = options.graph.clone();
        config.noise.human_kappa = options.kappa;
        let interventions = if options.interventions {
            log.scenario.interventions.iter().map(pending).collect()
        } else {
            Vec::new()
        };
        Ok(PipelineEngine {
            log,
            graph: SceneGraph::new(config),
            options,
            next: 0,
            key_to_plane: BTreeMap::new(),
            interventions,
            since_optimization: 0,
            optimizations: 0,
            last_optimization: None,
            diverged: false,
        })
    }

    pub fn graph(&self) -> &SceneGraph {
        &self.graph
    }

    pub fn log(&self) -> &SimulationLog {
        &self.log
    }

    pub fn options(&self) -> &PipelineOptions {
        &self.options
    }

    pub fn is_finished(&self) -> bool {
        self.next >= self.log.keyframes.len()
    }

    pub fn next_stamp(&self) -> Option<f64> {
        self.log.keyframes.get(self.next).map(|k| k.stamp)
    }

    pub fn plane_for_key(&self, key: &str) -> Option<PlaneId> {
        self.key_to_plane.get(key).copied()
    }

    pub fn interventions(&self) -> &[InterventionOutcome] {
        &self.interventions
    }

    pub fn diverged(&self) -> bool {
        self.diverged
    }

    /// Run the optimizer now unless an earlier run diverged.
    pub fn optimize(&mut self) -> Result<Option<OptimizationReport>, PipelineError> {
        if self.diverged || self.graph.keyframes().is_empty() {
            return Ok(None);
        }
        let report = optimizer::optimize(&mut self.graph, &self.options.optimization)?;
        self.optimizations += 1;
        self.since_optimization = 0;
        if report.diverged {
            log::warn!("optimization diverged at revision {}", self.graph.revision());
            self.diverged = true;
        }
        self.last_optimization = Some(report.clone());
        Ok(Some(report))
    }

    /// Add an operator room and re-optimize if configured to.
    pub fn create_human_room(
        &mut self,
        plane_ids: [PlaneId; 4],
    ) -> Result<(RoomId, Option<OptimizationReport>), PipelineError> {
        let id = self.graph.add_room_from_planes(plane_ids, RoomProvenance::Human)?;
        let report = if self.options.optimize_on_intervention { self.optimize()? } else { None };
        Ok((id, report))
    }

    fn apply_due_interventions(&mut self, stamp: f64, out: &mut StepOutcome) {
        for i in 0..self.interventions.len() {
            if self.interventions[i].status != InterventionStatus::Pending || self.interventions[i].time > stamp {
                continue;
            }
            let keys = self.interventions[i].plane_keys.clone();
            let ids: Option<Vec<PlaneId>> = keys.iter().map(|k| self.plane_for_key(k)).collect();
            let Some(ids) = ids else { continue };
            let ids = [ids[0], ids[1], ids[2], ids[3]];
            self.interventions[i].status = match self.graph.add_room_from_planes(ids, RoomProvenance::Human) {
                Ok(room) => {
                    out.human_rooms.push(room);
                    InterventionStatus::Applied { room }
                }
                Err(e) => {
                    log::info!("intervention at t={} rejected: {e}", self.interventions[i].time);
                    InterventionStatus::Failed { reason: failure_reason(&e) }
                }
            };
        }
    }

    /// Consume the next keyframe of the log.
    pub fn step(&mut self) -> Result<Option<StepOutcome>, PipelineError> {
        let Some(entry) = self.log.keyframes.get(self.next).cloned() else { return Ok(None) };
        let mut out = StepOutcome::default();
        let pose = match (self.graph.keyframes().last(), entry.odometry) {
            (Some(prev), Some(odo)) => prev.pose.compose(&odo),
            _ => entry.gt_pose,
        };
        let observations: Vec<PlaneObservation> = entry
            .observations
            .iter()
            .map(|o| PlaneObservation { plane: o.plane, extent: o.extent })
            .collect();
        let added = self.graph.add_keyframe(pose, entry.stamp, &observations)?;
        for (obs, pid) in entry.observations.iter().zip(&added.plane_ids) {
            self.key_to_plane.entry(obs.key.clone()).or_insert(*pid);
        }
        if let (Some(odo), Some(prev)) = (entry.odometry, added.id.0.checked_sub(1)) {
            self.graph.add_odometry(KeyframeId(prev), added.id, odo)?;
        }
        out.keyframe = Some(added.id);
        self.next += 1;
        self.since_optimization += 1;

        if self.options.auto_detect {
            out.removed_rooms = room_detect::refresh_auto_rooms(&mut self.graph);
            out.auto_rooms = room_detect::detect_and_add(&mut self.graph);
        }
        self.apply_due_interventions(entry.stamp, &mut out);

        let intervened = !out.human_rooms.is_empty() && self.options.optimize_on_intervention;
        if intervened || self.since_optimization >= self.options.optimize_every {
            out.optimization = self.optimize()?;
        }
        Ok(Some(out))
    }

    /// Consume the rest of the log, optimize once more and close out
    /// interventions whose planes were never seen.
    pub fn finish(mut self) -> Result<PipelineResult, PipelineError> {
        while self.step()?.is_some() {}
        if self.since_optimization > 0 || self.optimizations == 0 {
            self.optimize()?;
        }
        if self.options.auto_detect {
            room_detect::refresh_auto_rooms(&mut self.graph);
        }
        for iv in &mut self.interventions {
            if iv.status == InterventionStatus::Pending {
                let missing: Vec<&str> = iv
                    .plane_keys
                    .iter()
                    .filter(|k| !self.key_to_plane.contains_key(k.as_str()))
                    .map(String::as_str)
                    .collect();
                iv.status = InterventionStatus::Failed { reason: format!("never observed: {}", missing.join(", ")) };
            }
        }
        let trajectory = self.graph.keyframes().iter().map(|k| (k.stamp, k.pose)).collect();
        Ok(PipelineResult {
            trajectory,
            report: PipelineReport {
                keyframes: self.graph.keyframes().len(),
                optimizations: self.optimizations,
                last_optimization: self.last_optimization,
                interventions: self.interventions,
                diverged: self.diverged,
            },
            graph: self.graph,
        })
    }
}

fn pending(spec: &InterventionSpec) -> InterventionOutcome {
    InterventionOutcome { time: spec.time, plane_keys: spec.plane_keys.clone(), status: InterventionStatus::Pending }
}

fn failure_reason(e: &GraphError) -> String {
    match e {
        GraphError::InvalidRoom(v) => v.name().to_string(),
        other => other.to_string(),
    }
}

pub fn run_pipeline(log: &SimulationLog, options: &PipelineOptions) -> Result<PipelineResult, PipelineError> {
    PipelineEngine::new(log.clone(), options.clone())?.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub ate: f64,
    pub map_rmse: f64,
    pub rooms: Prf,
}

impl Evaluation {
    pub fn row(&self, scenario: &str, seed: u64, method: &str) -> MetricsRow {
        MetricsRow {
            scenario: scenario.to_string(),
            seed,
            method: method.to_string(),
            ate_m: self.ate,
            map_rmse_m: self.map_rmse,
            precision: self.rooms.precision,
            recall: self.rooms.recall,
            f1: self.rooms.f1,
        }
    }
}

/// Score a graph against the log's ground truth.
pub fn evaluate(log: &SimulationLog, graph: &SceneGraph) -> Result<Evaluation, PipelineError> {
    let estimate: Vec<(f64, Pose)> = graph.keyframes().iter().map(|k| (k.stamp, k.pose)).collect();
    let ate = metrics::ate(&estimate, &log.ground_truth_trajectory(), true)?;
    let est_planes: Vec<_> = graph.planes().iter().map(|p| p.rectangle()).collect();
    let gt_planes: Vec<_> = log.walls.iter().map(|w| w.extent).collect();
    let map_rmse = metrics::map_rmse(&est_planes, &gt_planes, metrics::MAP_SAMPLE_SPACING)?;
    let detected: Vec<_> = graph.rooms().map(|r| r.center).collect();
    let truth: Vec<_> = log.rooms.iter().map(|r| r.center).collect();
    let rooms = metrics::room_prf(&detected, &truth, &RoomMatchConfig::default());
    Ok(Evaluation { ate, map_rmse, rooms })
}
