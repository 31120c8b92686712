//! Human-to-robot hand retargeting by wrist-relative vector matching.
//!
//! Each frame minimizes `sum_i |v_i^R(q_R) - v_i^H(q_H)|^2` over the robot
//! joint angles inside the joint-limit box. The solver is a projected
//! Gauss-Newton method with Levenberg damping and Armijo backtracking; the
//! Jacobian of the vector residual comes from central finite differences over
//! forward kinematics.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{HandModel, JointAngles, KinematicsError, VectorSet, N_TARGET_VECTORS};

const RESIDUAL_DIM: usize = 3 * N_TARGET_VECTORS;

#[derive(Debug, Error, PartialEq)]
pub enum RetargetError {
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("initial guess lies outside the robot joint limits")]
    InitOutsideLimits,
    #[error("objective became non-finite at iteration {iteration} (last finite value {last_objective})")]
    NonFinite { iteration: usize, last_objective: f64 },
    #[error("frame {frame}: {source}")]
    Frame {
        frame: usize,
        #[source]
        source: Box<RetargetError>,
    },
    #[error("trajectory is empty")]
    EmptyTrajectory,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Stop when the projected-gradient norm drops below this.
    pub gradient_tolerance: f64,
    /// Stop when an accepted step moves less than this (radians, 2-norm).
    pub step_tolerance: f64,
    pub armijo_c: f64,
    pub shrink: f64,
    pub fd_step: f64,
    pub initial_damping: f64,
    /// Largest per-joint change of one step, in radians.
    pub max_step: f64,
    /// Rounds of per-finger restarts from seeded uniform starts.
    pub restarts: usize,
    pub restart_seed: u64,
    /// Objective below which a solve counts as exact and restarts are skipped.
    pub exact_objective: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iterations: 200,
            gradient_tolerance: 1e-6,
            step_tolerance: 1e-8,
            armijo_c: 1e-4,
            shrink: 0.5,
            fd_step: 1e-6,
            initial_damping: 1e-6,
            max_step: 0.2,
            restarts: 8,
            restart_seed: 0x5eed,
            exact_objective: 1e-14,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Gradient,
    StepSize,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSolution {
    pub q: JointAngles,
    pub objective: f64,
    pub initial_objective: f64,
    pub iterations: usize,
    pub termination: Termination,
}

/// Squared vector-matching error between a robot and a human configuration.
pub fn objective(
    robot: &HandModel,
    human: &HandModel,
    q_robot: &JointAngles,
    q_human: &JointAngles,
) -> Result<f64, RetargetError> {
    let vr = robot.target_vectors(q_robot)?;
    let vh = human.target_vectors(q_human)?;
    Ok(vr.squared_distance(&vh))
}

fn residual(robot: &HandModel, q: &[f64], target: &VectorSet) -> DVector<f64> {
    let v = robot.target_vectors_unchecked(q);
    let mut r = DVector::zeros(RESIDUAL_DIM);
    for i in 0..N_TARGET_VECTORS {
        let d = v.0[i] - target.0[i];
        r[3 * i] = d.x;
        r[3 * i + 1] = d.y;
        r[3 * i + 2] = d.z;
    }
    r
}

fn jacobian(robot: &HandModel, q: &[f64], target: &VectorSet, h: f64) -> DMatrix<f64> {
    let n = q.len();
    let mut jac = DMatrix::zeros(RESIDUAL_DIM, n);
    let mut probe = q.to_vec();
    for j in 0..n {
        probe[j] = q[j] + h;
        let plus = residual(robot, &probe, target);
        probe[j] = q[j] - h;
        let minus = residual(robot, &probe, target);
        probe[j] = q[j];
        jac.set_column(j, &((plus - minus) / (2.0 * h)));
    }
    jac
}

/// Gradient of [`objective`] with respect to the robot angles, `2 J^T r`.
pub fn objective_gradient(
    robot: &HandModel,
    human: &HandModel,
    q_robot: &JointAngles,
    q_human: &JointAngles,
    fd_step: f64,
) -> Result<Vec<f64>, RetargetError> {
    let target = human.target_vectors(q_human)?;
    robot.target_vectors(q_robot)?;
    let r = residual(robot, q_robot.as_slice(), &target);
    let jac = jacobian(robot, q_robot.as_slice(), &target, fd_step);
    Ok((jac.transpose() * r * 2.0).iter().copied().collect())
}

fn project(q: &mut [f64], limits: &[(f64, f64)]) {
    for (v, &(lo, hi)) in q.iter_mut().zip(limits) {
        *v = v.clamp(lo, hi);
    }
}

fn projected_gradient_norm(q: &[f64], grad: &DVector<f64>, limits: &[(f64, f64)]) -> f64 {
    q.iter()
        .zip(grad.iter())
        .zip(limits)
        .map(|((&x, &g), &(lo, hi))| ((x - g).clamp(lo, hi) - x).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Solves one frame starting from `q_init`.
///
/// After the local solve, each restart round re-samples one finger group at a
/// time (the rest stays at the incumbent) and re-solves. Fingers only interact
/// through the shared wrist joints, so this escapes per-finger branch minima
/// far more often than whole-hand restarts. A restart replaces the incumbent
/// only when it at least halves the objective, so warm-started trajectories do
/// not hop between branches for a marginal gain.
pub fn retarget_frame(
    robot: &HandModel,
    human: &HandModel,
    q_human: &JointAngles,
    q_init: &JointAngles,
    config: &SolverConfig,
) -> Result<FrameSolution, RetargetError> {
    let mut best = local_solve(robot, human, q_human, q_init, config)?;
    if config.restarts == 0 || best.objective <= config.exact_objective {
        return Ok(best);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.restart_seed);
    let limits = robot.limits();
    let groups = robot.finger_groups();
    for _ in 0..config.restarts {
        for (_, dofs) in &groups {
            let mut start = best.q.clone();
            for &j in dofs {
                let (lo, hi) = limits[j];
                start.0[j] = rng.random_range(lo..=hi);
            }
            let cand = local_solve(robot, human, q_human, &start, config)?;
            best.iterations += cand.iterations;
            if cand.objective < 0.5 * best.objective {
                best.q = cand.q;
                best.objective = cand.objective;
                best.termination = cand.termination;
            }
            if best.objective <= config.exact_objective {
                return Ok(best);
            }
        }
    }
    Ok(best)
}

fn local_solve(
    robot: &HandModel,
    human: &HandModel,
    q_human: &JointAngles,
    q_init: &JointAngles,
    config: &SolverConfig,
) -> Result<FrameSolution, RetargetError> {
    let target = human.target_vectors(q_human)?;
    robot.target_vectors(q_init)?;
    if !robot.within_limits(q_init) {
        return Err(RetargetError::InitOutsideLimits);
    }
    let limits = robot.limits();
    let n = robot.n_dof();
    let mut q = q_init.as_slice().to_vec();
    let mut r = residual(robot, &q, &target);
    let mut f = r.norm_squared();
    let initial_objective = f;
    if !f.is_finite() {
        return Err(RetargetError::NonFinite {
            iteration: 0,
            last_objective: f,
        });
    }
    let mut damping = config.initial_damping;
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    while iterations < config.max_iterations {
        let jac = jacobian(robot, &q, &target, config.fd_step);
        let grad = jac.transpose() * &r * 2.0;
        if projected_gradient_norm(&q, &grad, &limits) < config.gradient_tolerance {
            termination = Termination::Gradient;
            break;
        }
        iterations += 1;

        // Joints pinned at a bound with the gradient pushing outward stay fixed.
        let free: Vec<usize> = (0..n)
            .filter(|&j| {
                let (lo, hi) = limits[j];
                !((q[j] <= lo && grad[j] > 0.0) || (q[j] >= hi && grad[j] < 0.0))
            })
            .collect();
        let jf = DMatrix::from_fn(RESIDUAL_DIM, free.len(), |i, k| jac[(i, free[k])]);
        let mut normal = jf.transpose() * &jf;
        let scale = normal.diagonal().max().max(1e-12);
        for k in 0..free.len() {
            normal[(k, k)] += damping * scale;
        }
        let rhs = -(jf.transpose() * &r);
        let step_free = match normal.cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => -grad.select_rows(free.iter()),
        };
        let mut direction = vec![0.0; n];
        for (k, &j) in free.iter().enumerate() {
            direction[j] = step_free[k];
        }
        let longest = direction.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        if longest > config.max_step {
            direction.iter_mut().for_each(|d| *d *= config.max_step / longest);
        }

        let mut alpha = 1.0;
        let accepted = loop {
            let mut candidate: Vec<f64> = q
                .iter()
                .zip(&direction)
                .map(|(x, d)| x + alpha * d)
                .collect();
            project(&mut candidate, &limits);
            let moved: f64 = candidate
                .iter()
                .zip(&q)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            if moved < config.step_tolerance {
                break None;
            }
            let r_new = residual(robot, &candidate, &target);
            let f_new = r_new.norm_squared();
            if !f_new.is_finite() {
                return Err(RetargetError::NonFinite {
                    iteration: iterations,
                    last_objective: f,
                });
            }
            let decrease: f64 = grad
                .iter()
                .zip(candidate.iter().zip(&q))
                .map(|(g, (a, b))| g * (a - b))
                .sum();
            if f_new <= f + config.armijo_c * decrease {
                break Some((candidate, r_new, f_new));
            }
            alpha *= config.shrink;
        };
        match accepted {
            Some((candidate, r_new, f_new)) => {
                q = candidate;
                r = r_new;
                f = f_new;
                damping = if alpha == 1.0 {
                    (damping * 0.3).max(1e-12)
                } else {
                    (damping * 2.0).min(1e3)
                };
            }
            None => {
                termination = Termination::StepSize;
                break;
            }
        }
    }

    Ok(FrameSolution {
        q: JointAngles(q),
        objective: f,
        initial_objective,
        iterations,
        termination,
    })
}

/// Retargets a whole trajectory, warm-starting each frame from the previous solution.
///
/// The first frame starts from the robot rest configuration.
pub fn retarget_trajectory(
    robot: &HandModel,
    human: &HandModel,
    trajectory: &[JointAngles],
    config: &SolverConfig,
) -> Result<Vec<FrameSolution>, RetargetError> {
    if trajectory.is_empty() {
        return Err(RetargetError::EmptyTrajectory);
    }
    let mut out: Vec<FrameSolution> = Vec::with_capacity(trajectory.len());
    let mut warm = robot.rest_configuration();
    for (frame, q_h) in trajectory.iter().enumerate() {
        let sol = retarget_frame(robot, human, q_h, &warm, config).map_err(|e| RetargetError::Frame {
            frame,
            source: Box::new(e),
        })?;
        warm = sol.q.clone();
        out.push(sol);
    }
    Ok(out)
}

/// Retargets several independent trajectories.
pub fn retarget_batch(
    robot: &HandModel,
    human: &HandModel,
    trajectories: &[Vec<JointAngles>],
    config: &SolverConfig,
) -> Result<Vec<Vec<FrameSolution>>, RetargetError> {
    trajectories
        .iter()
        .map(|t| retarget_trajectory(robot, human, t, config))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{build_hand_model, human21, robot24, HandSpec, JointKind, JointSpec};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_q(model: &HandModel, rng: &mut ChaCha8Rng) -> JointAngles {
        JointAngles(
            model
                .limits()
                .iter()
                .map(|&(lo, hi)| rng.random_range(lo..=hi))
                .collect(),
        )
    }

    fn planar(tip: f64) -> HandModel {
        let joint = |name: &str, parent, offset: [f64; 3], kind| JointSpec {
            name: name.into(),
            parent,
            offset: Vector3::from(offset),
            kind,
            finger: "index".into(),
            mimic: None,
        };
        let rev = JointKind::Revolute {
            axis: Vector3::z(),
            lower: -1.0,
            upper: 1.0,
        };
        build_hand_model(HandSpec {
            name: "planar".into(),
            joints: vec![
                joint("j0", None, [0.0; 3], rev),
                joint("j1", Some(0), [0.04, 0.0, 0.0], rev),
                joint("tip", Some(1), [tip, 0.0, 0.0], JointKind::Fixed),
            ],
            fingertips: vec![3; 5],
            keypoints: vec![2; 5],
            sites: vec![],
        })
        .unwrap()
    }

    #[test]
    fn identical_models_and_angles_give_zero() {
        let m = robot24();
        let q = m.mid_configuration();
        assert_eq!(objective(&m, &m, &q, &q).unwrap(), 0.0);
    }

    #[test]
    fn tip_offset_gives_expected_objective() {
        // Tip differs by 0.01 m along x; five copies of the fingertip vector.
        let a = planar(0.03);
        let b = planar(0.04);
        let q = JointAngles(vec![0.0, 0.0]);
        let f = objective(&a, &b, &q, &q).unwrap();
        assert!((f - 5.0 * 1e-4).abs() < 1e-15);
        // A single-fingertip layout would give exactly 1e-4 per mismatched vector.
        assert!((f / 5.0 - 1e-4).abs() < 1e-16);
    }

    #[test]
    fn objective_rejects_dimension_mismatch() {
        let m = robot24();
        let err = objective(&m, &m, &JointAngles::zeros(3), &m.mid_configuration()).unwrap_err();
        assert!(matches!(err, RetargetError::Kinematics(KinematicsError::Dimension { .. })));
    }

    #[test]
    fn already_optimal_returns_input() {
        let m = robot24();
        let q = m.mid_configuration();
        let sol = retarget_frame(&m, &m, &q, &q, &SolverConfig::default()).unwrap();
        assert_eq!(sol.q, q);
        assert_eq!(sol.objective, 0.0);
    }

    #[test]
    fn init_outside_limits_is_rejected() {
        let m = robot24();
        let mut q = m.mid_configuration();
        q.0[0] = 10.0;
        let err = retarget_frame(&m, &m, &m.mid_configuration(), &q, &SolverConfig::default()).unwrap_err();
        assert_eq!(err, RetargetError::InitOutsideLimits);
    }

    #[test]
    fn gradient_matches_objective_finite_differences() {
        let robot = robot24();
        let human = human21();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let qr = random_q(&robot, &mut rng);
            let qh = random_q(&human, &mut rng);
            let g = objective_gradient(&robot, &human, &qr, &qh, 1e-6).unwrap();
            let h = 1e-6;
            let mut num = vec![0.0; g.len()];
            for j in 0..g.len() {
                let mut p = qr.clone();
                p.0[j] += h;
                let mut m = qr.clone();
                m.0[j] -= h;
                num[j] = (objective(&robot, &human, &p, &qh).unwrap()
                    - objective(&robot, &human, &m, &qh).unwrap())
                    / (2.0 * h);
            }
            let diff: f64 = g.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = num.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(diff / norm < 1e-4, "relative error {}", diff / norm);
        }
    }

    #[test]
    fn solutions_respect_limits_and_descend() {
        let robot = robot24().scaled(1.2, "robot24x1.2");
        let human = robot24();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let qh = random_q(&human, &mut rng);
            let q0 = random_q(&robot, &mut rng);
            let sol = retarget_frame(&robot, &human, &qh, &q0, &SolverConfig::default()).unwrap();
            assert!(robot.within_limits(&sol.q));
            assert!(sol.objective < sol.initial_objective);
        }
    }

    #[test]
    fn solver_is_deterministic() {
        let robot = robot24();
        let human = human21();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let qh = random_q(&human, &mut rng);
        let q0 = random_q(&robot, &mut rng);
        let a = retarget_frame(&robot, &human, &qh, &q0, &SolverConfig::default()).unwrap();
        let b = retarget_frame(&robot, &human, &qh, &q0, &SolverConfig::default()).unwrap();
        let bits = |s: &FrameSolution| s.q.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn constant_trajectory_gives_identical_outputs() {
        let robot = robot24();
        let human = human21();
        let q = human.mid_configuration();
        let out = retarget_trajectory(&robot, &human, &vec![q; 5], &SolverConfig::default()).unwrap();
        assert_eq!(out.len(), 5);
        for s in &out[1..] {
            for (a, b) in s.q.0.iter().zip(&out[1].q.0) {
                assert!((a - b).abs() < 1e-9);
            }
            assert!((s.objective - out[0].objective).abs() < 1e-12);
        }
    }

    #[test]
    fn self_trajectory_reaches_zero() {
        let m = robot24();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let traj: Vec<_> = (0..4).map(|_| random_q(&m, &mut rng)).collect();
        let out = retarget_trajectory(&m, &m, &traj, &SolverConfig::default()).unwrap();
        for s in out {
            assert!(s.objective < 1e-10, "objective {}", s.objective);
        }
    }

    #[test]
    fn empty_trajectory_is_rejected() {
        let m = robot24();
        assert_eq!(
            retarget_trajectory(&m, &m, &[], &SolverConfig::default()).unwrap_err(),
            RetargetError::EmptyTrajectory
        );
    }
}
