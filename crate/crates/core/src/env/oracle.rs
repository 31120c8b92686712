//! Hand-coded controller that solves the task; a fixture proving the surrogate is solvable.

use nalgebra::Point3;

use super::scene::{finger_dofs, finger_flex_dofs};
use super::{EnvState, Environment, Part, ACTION_DIM, N_ACTUATED};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Engage,
    Stroke,
    Release,
    Return,
}

/// Closes the left hand on the body, then turns the cap with repeated
/// abduction strokes of the four right fingers: press in, sweep along the
/// unscrewing direction, lift off, sweep back.
///
/// Fingertips are steered in the bottle's cylindrical coordinates (radius
/// and height) by a small finite-difference IK on the two flexion joints,
/// since plain curling would lift them over the cap.
#[derive(Debug, Clone)]
pub struct TwistOracle {
    phase: Phase,
    phase_steps: usize,
}

impl Default for TwistOracle {
    fn default() -> Self {
        TwistOracle {
            phase: Phase::Engage,
            phase_steps: 0,
        }
    }
}

const FINGERS: [&str; 4] = ["index", "middle", "ring", "little"];
/// Target signed distance of tips while pressing (slightly inside the cap).
const PRESS_DEPTH: f64 = -0.002;
/// Extra radial clearance beyond the contact band while lifted off.
const LIFT: f64 = 0.006;
/// Abduction travel on either side of the start pose (rad).
const STROKE: f64 = 0.15;
/// Tip height within the cap, as a fraction of the cap height.
const TIP_HEIGHT: f64 = 0.5;

struct Finger {
    j4: usize,
    /// Proximal and middle flexion dofs.
    flex: [usize; 2],
    /// +1 if increasing the abduction angle moves the tip in the unscrewing direction.
    sign: f64,
}

impl TwistOracle {
    pub fn new() -> Self {
        Self::default()
    }

    fn action_slot(env: &Environment, hand: usize, dof: usize) -> Option<usize> {
        env.hands
            .actuated
            .iter()
            .position(|&d| d == dof)
            .map(|k| hand * N_ACTUATED + k)
    }

    /// Tip `f` in bottle cylindrical coordinates `(radius, height)`.
    fn tip_rz(env: &Environment, state: &EnvState, q: &[f64], f: usize) -> (f64, f64) {
        let p = env.hands.world_sites(1, &state.right_wrist, q)[env.hands.tip_sites[f]];
        let local = state.bottle.inverse_transform_point(&p);
        (local.x.hypot(local.y), local.z)
    }

    fn fingers(env: &Environment, state: &EnvState) -> Vec<Finger> {
        let right = &env.hands.right;
        let q = state.hand_q(1);
        let tips = env.hands.world_sites(1, &state.right_wrist, q);
        let center = state.bottle * Point3::origin();
        let axis = state.bottle.rotation * nalgebra::Vector3::z();
        let flex_all = finger_flex_dofs(right);
        FINGERS
            .iter()
            .enumerate()
            .map(|(f, name)| {
                let j4 = *finger_dofs(right, name)
                    .iter()
                    .find(|&&d| right.dof_name(d).ends_with("j4"))
                    .expect("finger has an abduction joint");
                let flex: Vec<usize> = flex_all
                    .iter()
                    .copied()
                    .filter(|&d| right.dof_joint(d).finger == *name)
                    .collect();
                let mut probe = q.to_vec();
                probe[j4] += 1e-4;
                env.hands.apply_mimic(&mut probe);
                let tip = tips[env.hands.tip_sites[f]];
                let moved = env.hands.world_sites(1, &state.right_wrist, &probe)[env.hands.tip_sites[f]];
                let rel = tip - center;
                let tangent = axis.cross(&(rel - axis * rel.dot(&axis)));
                let sign = if (moved - tip).dot(&tangent) >= 0.0 { 1.0 } else { -1.0 };
                Finger { j4, flex: [flex[0], flex[1]], sign }
            })
            .collect()
    }

    /// Flexion commands moving tip `f` toward `(r, z)`.
    fn steer(env: &Environment, state: &EnvState, finger: &Finger, f: usize, target: (f64, f64)) -> [f64; 2] {
        let q = state.hand_q(1).to_vec();
        let (r0, z0) = Self::tip_rz(env, state, &q, f);
        let h = 1e-5;
        let mut jac = [[0.0; 2]; 2];
        for (c, &d) in finger.flex.iter().enumerate() {
            let mut probe = q.clone();
            probe[d] += h;
            env.hands.apply_mimic(&mut probe);
            let (r1, z1) = Self::tip_rz(env, state, &probe, f);
            jac[0][c] = (r1 - r0) / h;
            jac[1][c] = (z1 - z0) / h;
        }
        let err = [target.0 - r0, target.1 - z0];
        // Damped least squares on the 2x2 system.
        let lambda = 1e-4;
        let jjt = nalgebra::Matrix2::new(
            jac[0][0] * jac[0][0] + jac[0][1] * jac[0][1] + lambda,
            jac[0][0] * jac[1][0] + jac[0][1] * jac[1][1],
            jac[0][0] * jac[1][0] + jac[0][1] * jac[1][1],
            jac[1][0] * jac[1][0] + jac[1][1] * jac[1][1] + lambda,
        );
        let y = jjt
            .try_inverse()
            .map(|m| m * nalgebra::Vector2::new(err[0], err[1]))
            .unwrap_or_else(nalgebra::Vector2::zeros);
        let dq = [
            jac[0][0] * y[0] + jac[1][0] * y[1],
            jac[0][1] * y[0] + jac[1][1] * y[1],
        ];
        let scale = env.config.joint_scale;
        let peak = dq[0].abs().max(dq[1].abs()) / scale;
        let shrink = if peak > 1.0 { 1.0 / peak } else { 1.0 };
        [dq[0] / scale * shrink, dq[1] / scale * shrink]
    }

    pub fn act(&mut self, env: &Environment, state: &EnvState) -> Vec<f64> {
        let mut a = vec![0.0; ACTION_DIM];
        let hands = &env.hands;
        let ns = hands.n_sites();
        let cfg = &env.config;

        // Left hand: close until the grasp holds, then keep the bottle at its start.
        if state.left_contact_count() < cfg.attach_contacts {
            for d in finger_flex_dofs(&hands.left) {
                if let Some(k) = Self::action_slot(env, 0, d) {
                    a[k] = 1.0;
                }
            }
        }
        if state.grasp.is_some() {
            let err = state.p_ini - state.bottle.translation.vector;
            for i in 0..3 {
                a[40 + i] = (err[i] / cfg.wrist_lin_scale).clamp(-1.0, 1.0);
            }
        }

        // Right hand.
        let limits = hands.right.limits();
        let q = state.hand_q(1);
        let fingers = Self::fingers(env, state);
        let home: Vec<f64> = fingers.iter().map(|f| env.layout.right_q.0[f.j4]).collect();
        let goal = |f: &Finger, k: usize, dir: f64| {
            (home[k] + dir * f.sign * STROKE).clamp(limits[f.j4].0, limits[f.j4].1)
        };
        let reached = |dir: f64| {
            fingers
                .iter()
                .enumerate()
                .all(|(k, f)| (q[f.j4] - goal(f, k, dir)).abs() < 1e-6)
        };
        let on_cap = hands.tip_sites[..4]
            .iter()
            .filter(|&&i| matches!(state.contacts.get(&(ns + i)), Some(c) if c.part == Part::Cap))
            .count();

        let next = match self.phase {
            Phase::Engage if on_cap >= 2 || self.phase_steps >= 6 => Phase::Stroke,
            Phase::Stroke if reached(1.0) => Phase::Release,
            Phase::Release if on_cap == 0 && self.phase_steps >= 1 => Phase::Return,
            Phase::Return if reached(-1.0) => Phase::Engage,
            p => p,
        };
        if next != self.phase {
            self.phase = next;
            self.phase_steps = 0;
        }

        let b = &env.bottle;
        let height = b.body_height + TIP_HEIGHT * b.cap_height;
        let pressed = (b.cap_radius + PRESS_DEPTH, height);
        let lifted = (b.cap_radius + cfg.contact_eps + LIFT, height);
        for (k, finger) in fingers.iter().enumerate() {
            let (target, abd_goal) = match self.phase {
                Phase::Engage => (pressed, None),
                Phase::Stroke => (pressed, Some(goal(finger, k, 1.0))),
                Phase::Release => (lifted, None),
                Phase::Return => (lifted, Some(goal(finger, k, -1.0))),
            };
            let flex = Self::steer(env, state, finger, k, target);
            for (c, &d) in finger.flex.iter().enumerate() {
                if let Some(slot) = Self::action_slot(env, 1, d) {
                    a[slot] = flex[c];
                }
            }
            if let (Some(g), Some(slot)) = (abd_goal, Self::action_slot(env, 1, finger.j4)) {
                a[slot] = ((g - q[finger.j4]) / cfg.joint_scale).clamp(-1.0, 1.0);
            }
        }
        self.phase_steps += 1;
        a
    }
}
