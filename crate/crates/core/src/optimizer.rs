//! Levenberg–Marquardt over the factor graph with dense normal equations.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Vector2, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factors::{Factor, FactorError, FactorType, PlaneCoeffs, VarKey, Variable};
use crate::geometry::sphere_retract;
use crate::scene_graph::{EstimateUpdate, GraphError, KeyframeId, SceneGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMode {
    Numeric,
    AnalyticWhereAvailable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationConfig {
    pub max_iterations: usize,
    pub initial_lambda: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub min_lambda: f64,
    pub max_lambda: f64,
    pub relative_decrease_tolerance: f64,
    pub step_tolerance: f64,
    /// Costs below this are treated as already optimal.
    pub absolute_cost_tolerance: f64,
    pub jacobian_mode: JacobianMode,
    pub numeric_eps: f64,
}

impl Default for OptimizationConfig {
    fn default() -> Self {
        OptimizationConfig {
            max_iterations: 50,
            initial_lambda: 1e-4,
            lambda_up: 10.0,
            lambda_down: 0.1,
            min_lambda: 1e-12,
            max_lambda: 1e8,
            relative_decrease_tolerance: 1e-9,
            step_tolerance: 1e-10,
            absolute_cost_tolerance: 1e-24,
            jacobian_mode: JacobianMode::Numeric,
            numeric_eps: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    CostTolerance,
    RelativeDecrease,
    SmallStep,
    DampingLimit,
    MaxIterations,
    Diverged,
    NoFreeVariables,
}

/// Largest residual norm per factor kind; zero for absent kinds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ResidualNorms {
    pub odometry: f64,
    pub plane_obs: f64,
    pub room: f64,
}

impl ResidualNorms {
    pub fn max(&self) -> f64 {
        self.odometry.max(self.plane_obs).max(self.room)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub residual_norms: ResidualNorms,
    pub converged: bool,
    pub diverged: bool,
    pub termination: Termination,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimizerError {
    #[error("delta has {got} components, variable needs {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("residual is not finite at the linearization point")]
    NonFiniteResidual,
    #[error("missing variable {0:?}")]
    MissingVariable(VarKey),
    #[error("graph has no keyframes")]
    NoKeyframes,
    #[error(transparent)]
    Factor(#[from] FactorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// `v ⊕ δ` for each variable kind.
pub fn retract(var: &Variable, delta: &[f64]) -> Result<Variable, OptimizerError> {
    if delta.len() != var.dim() {
        return Err(OptimizerError::DimensionMismatch { expected: var.dim(), got: delta.len() });
    }
    Ok(match var {
        Variable::Pose(p) => Variable::Pose(p.retract(&Vector6::from_column_slice(delta))),
        Variable::Plane(c) => {
            Variable::Plane(PlaneCoeffs::new(sphere_retract(&c.normal, delta[0], delta[1]), c.offset + delta[2]))
        }
        Variable::Room(r) => Variable::Room(r + Vector2::new(delta[0], delta[1])),
    })
}

/// Central differences of `factor`'s residual over retracted perturbations,
/// one block per variable.
pub fn numeric_jacobian(factor: &Factor, vars: &[&Variable], eps: f64) -> Result<Vec<DMatrix<f64>>, OptimizerError> {
    let base = factor.residual(vars)?;
    if base.iter().any(|x| !x.is_finite()) {
        return Err(OptimizerError::NonFiniteResidual);
    }
    let mut out = Vec::with_capacity(vars.len());
    let mut work: Vec<Variable> = vars.iter().map(|v| **v).collect();
    for k in 0..vars.len() {
        let dim = vars[k].dim();
        let mut j = DMatrix::zeros(base.len(), dim);
        for i in 0..dim {
            let mut d = vec![0.0; dim];
            d[i] = eps;
            work[k] = retract(vars[k], &d)?;
            let plus = factor.residual(&work.iter().collect::<Vec<_>>())?;
            d[i] = -eps;
            work[k] = retract(vars[k], &d)?;
            let minus = factor.residual(&work.iter().collect::<Vec<_>>())?;
            j.set_column(i, &((plus - minus) / (2.0 * eps)));
        }
        work[k] = *vars[k];
        out.push(j);
    }
    Ok(out)
}

fn vars_in<'a>(values: &'a BTreeMap<VarKey, Variable>, factor: &Factor) -> Result<Vec<&'a Variable>, OptimizerError> {
    factor
        .keys()
        .into_iter()
        .map(|k| values.get(&k).ok_or(OptimizerError::MissingVariable(k)))
        .collect()
}

/// Variables, factors and the set held constant.
#[derive(Debug, Clone, Default)]
pub struct Problem {
    pub values: BTreeMap<VarKey, Variable>,
    pub factors: Vec<Factor>,
    pub frozen: BTreeSet<VarKey>,
}

impl Problem {
    /// Snapshot of every variable and factor; keyframe 0 is frozen.
    pub fn from_graph(graph: &SceneGraph) -> Result<Problem, OptimizerError> {
        if graph.keyframes().is_empty() {
            return Err(OptimizerError::NoKeyframes);
        }
        let mut values = BTreeMap::new();
        for k in graph.keyframes() {
            values.insert(VarKey::Keyframe(k.id), Variable::Pose(k.pose));
        }
        for p in graph.planes() {
            values.insert(VarKey::Plane(p.id), Variable::Plane(p.coeffs()));
        }
        for r in graph.rooms() {
            values.insert(VarKey::Room(r.id), Variable::Room(r.center));
        }
        let mut frozen = BTreeSet::new();
        frozen.insert(VarKey::Keyframe(KeyframeId(0)));
        Ok(Problem { values, factors: graph.factors().to_vec(), frozen })
    }

    fn vars_of(&self, factor: &Factor) -> Result<Vec<&Variable>, OptimizerError> {
        vars_in(&self.values, factor)
    }

    pub fn cost(&self) -> Result<f64, OptimizerError> {
        self.cost_at(&self.values)
    }

    fn cost_at(&self, values: &BTreeMap<VarKey, Variable>) -> Result<f64, OptimizerError> {
        let mut total = 0.0;
        for f in &self.factors {
            total += f.cost(&vars_in(values, f)?)?;
        }
        Ok(total)
    }

    /// Total cost of factors of one kind.
    pub fn cost_of(&self, kind: FactorType) -> Result<f64, OptimizerError> {
        let mut total = 0.0;
        for f in self.factors.iter().filter(|f| f.factor_type() == kind) {
            total += f.cost(&self.vars_of(f)?)?;
        }
        Ok(total)
    }

    pub fn residual_norms(&self) -> Result<ResidualNorms, OptimizerError> {
        let mut out = ResidualNorms::default();
        for f in &self.factors {
            let n = f.residual(&self.vars_of(f)?)?.norm();
            let slot = match f.factor_type() {
                FactorType::Odometry => &mut out.odometry,
                FactorType::PlaneObs => &mut out.plane_obs,
                FactorType::Room => &mut out.room,
            };
            *slot = slot.max(n);
        }
        Ok(out)
    }

    fn layout(&self) -> (BTreeMap<VarKey, usize>, usize) {
        let mut offsets = BTreeMap::new();
        let mut n = 0;
        for (k, v) in &self.values {
            if !self.frozen.contains(k) {
                offsets.insert(*k, n);
                n += v.dim();
            }
        }
        (offsets, n)
    }

    fn jacobians(&self, f: &Factor, vars: &[&Variable], config: &OptimizationConfig) -> Result<Vec<DMatrix<f64>>, OptimizerError> {
        match config.jacobian_mode {
            JacobianMode::Numeric => numeric_jacobian(f, vars, config.numeric_eps),
            JacobianMode::AnalyticWhereAvailable => Ok(f.analytic_jacobians(vars)?),
        }
    }

    fn normal_equations(
        &self,
        offsets: &BTreeMap<VarKey, usize>,
        n: usize,
        config: &OptimizationConfig,
    ) -> Result<(DMatrix<f64>, DVector<f64>), OptimizerError> {
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        for f in &self.factors {
            let keys = f.keys();
            let vars = self.vars_of(f)?;
            let e = f.residual(&vars)?;
            let js = self.jacobians(f, &vars, config)?;
            let omega = &f.noise.information;
            let weighted: Vec<Option<DMatrix<f64>>> = keys
                .iter()
                .zip(&js)
                .map(|(k, j)| offsets.get(k).map(|_| j.transpose() * omega))
                .collect();
            for (a, ka) in keys.iter().enumerate() {
                let (Some(oa), Some(jt_omega)) = (offsets.get(ka), &weighted[a]) else { continue };
                let da = js[a].ncols();
                let mut ga = g.rows_mut(*oa, da);
                ga += jt_omega * &e;
                for (b, kb) in keys.iter().enumerate() {
                    let Some(ob) = offsets.get(kb) else { continue };
                    let db = js[b].ncols();
                    let mut block = h.view_mut((*oa, *ob), (da, db));
                    block += jt_omega * &js[b];
                }
            }
        }
        Ok((h, g))
    }

    fn stepped(
        &self,
        offsets: &BTreeMap<VarKey, usize>,
        step: &DVector<f64>,
    ) -> Result<BTreeMap<VarKey, Variable>, OptimizerError> {
        let mut values = self.values.clone();
        for (k, off) in offsets {
            let v = &self.values[k];
            let d = step.rows(*off, v.dim());
            values.insert(*k, retract(v, d.as_slice())?);
        }
        Ok(values)
    }
}

/// Run LM on `problem` in place.
pub fn solve(problem: &mut Problem, config: &OptimizationConfig) -> Result<OptimizationReport, OptimizerError> {
    let initial_cost = problem.cost()?;
    let report = |p: &Problem, iterations, final_cost, converged, termination| -> Result<_, OptimizerError> {
        Ok(OptimizationReport {
            iterations,
            initial_cost,
            final_cost,
            residual_norms: if final_cost.is_finite() { p.residual_norms()? } else { ResidualNorms::default() },
            converged,
            diverged: termination == Termination::Diverged,
            termination,
        })
    };
    if !initial_cost.is_finite() {
        return report(problem, 0, initial_cost, false, Termination::Diverged);
    }
    let (offsets, n) = problem.layout();
    if n == 0 {
        return report(problem, 0, initial_cost, true, Termination::NoFreeVariables);
    }
    if initial_cost < config.absolute_cost_tolerance {
        return report(problem, 0, initial_cost, true, Termination::CostTolerance);
    }

    let mut cost = initial_cost;
    let mut lambda = config.initial_lambda.clamp(config.min_lambda, config.max_lambda);
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;

    'outer: while iterations < config.max_iterations {
        iterations += 1;
        let (h, g) = problem.normal_equations(&offsets, n, config)?;
        if g.iter().chain(h.iter()).any(|x| !x.is_finite()) {
            termination = Termination::Diverged;
            break;
        }
        loop {
            let mut damped = h.clone();
            for i in 0..n {
                damped[(i, i)] += lambda * (1.0 + h[(i, i)]);
            }
            let step = match damped.cholesky() {
                Some(ch) => -ch.solve(&g),
                None => {
                    lambda *= config.lambda_up;
                    if lambda > config.max_lambda {
                        termination = Termination::DampingLimit;
                        break 'outer;
                    }
                    continue;
                }
            };
            let candidate = problem.stepped(&offsets, &step)?;
            let new_cost = problem.cost_at(&candidate)?;
            if !new_cost.is_finite() {
                // a non-finite trial is treated as a rejected step
                lambda *= config.lambda_up;
            } else if new_cost < cost {
                let decrease = (cost - new_cost) / cost;
                problem.values = candidate;
                cost = new_cost;
                lambda = (lambda * config.lambda_down).max(config.min_lambda);
                if cost < config.absolute_cost_tolerance {
                    termination = Termination::CostTolerance;
                    break 'outer;
                }
                if decrease < config.relative_decrease_tolerance {
                    termination = Termination::RelativeDecrease;
                    break 'outer;
                }
                if step.norm() < config.step_tolerance {
                    termination = Termination::SmallStep;
                    break 'outer;
                }
                break;
            } else {
                if step.norm() < config.step_tolerance {
                    termination = Termination::SmallStep;
                    break 'outer;
                }
                lambda *= config.lambda_up;
            }
            if lambda > config.max_lambda {
                termination = Termination::DampingLimit;
                break 'outer;
            }
        }
    }
    let converged = !matches!(termination, Termination::MaxIterations | Termination::Diverged);
    report(problem, iterations, cost, converged, termination)
}

/// Optimize every variable of `graph` except keyframe 0 and `frozen`, then
/// write the estimate back as one new revision.
pub fn optimize_with_frozen(
    graph: &mut SceneGraph,
    config: &OptimizationConfig,
    frozen: &BTreeSet<VarKey>,
) -> Result<OptimizationReport, OptimizerError> {
    let mut problem = Problem::from_graph(graph)?;
    problem.frozen.extend(frozen.iter().copied());
    let report = solve(&mut problem, config)?;
    if report.diverged {
        return Ok(report);
    }
    let mut update = EstimateUpdate::default();
    for (k, v) in &problem.values {
        if problem.frozen.contains(k) {
            continue;
        }
        match (k, v) {
            (VarKey::Keyframe(id), Variable::Pose(p)) => update.poses.push((*id, *p)),
            (VarKey::Plane(id), Variable::Plane(c)) => update.planes.push((*id, *c)),
            (VarKey::Room(id), Variable::Room(c)) => update.rooms.push((*id, *c)),
            _ => unreachable!("variable kind matches its key"),
        }
    }
    graph.apply_estimate(&update)?;
    Ok(report)
}

pub fn optimize(graph: &mut SceneGraph, config: &OptimizationConfig) -> Result<OptimizationReport, OptimizerError> {
    optimize_with_frozen(graph, config, &BTreeSet::new())
}
