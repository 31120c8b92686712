//! Surrogate bimanual cap-unscrewing environment.
//!
//! Hands are kinematic: actions move joint targets, contacts come from a
//! signed-distance band around the bottle, and the cap turns in proportion to
//! the tangential speed of right fingertips touching it. Stage 1 pins the
//! bottle to the table; in stage 2 it rides on the left palm while at least
//! `attach_contacts` left-hand sites touch it and falls freely otherwise.

pub mod oracle;
pub mod render;
pub mod scene;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{Point3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::Pose;
use render::{Camera, PixelClass, Primitive, Rendered, Shape};
pub use scene::{make_bottle_sets, BottleSpec, Hands, Layout, Part, PlacementConfig};

/// Actuated joints per hand.
pub const N_ACTUATED: usize = 20;
pub const ACTION_DIM: usize = 2 * N_ACTUATED + 6;
pub const N_TACTILE: usize = 40;
pub const PROPRIO_DIM: usize = 48 + 48 + 7 + 6;

/// Reward weights of the stage-1 terms.
pub const ALPHA: [f64; 5] = [-5.0, 0.05, 0.5, 1.1, 0.5];
/// Reward weights of the stage-2 left-hand terms.
pub const BETA: [f64; 3] = [1.0, 1.0, 1.0];
/// Saturation of the cap-angle reward (radians).
pub const CAP_ANGLE_CLAMP: f64 = 7.0;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("action has length {0}, expected {ACTION_DIM}")]
    ActionLength(usize),
    #[error("action component {0} is not finite")]
    NonFiniteAction(usize),
    #[error("episode is over; reset before stepping")]
    Done,
    #[error("reward for stage {expected} requested on a stage-{got} state")]
    WrongStage { expected: u8, got: u8 },
    #[error("invalid bottle: {0}")]
    Bottle(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub dt: f64,
    pub horizon: usize,
    pub contact_eps: f64,
    pub joint_scale: f64,
    pub wrist_lin_scale: f64,
    pub wrist_ang_scale: f64,
    pub gravity: f64,
    pub attach_contacts: usize,
    /// End stage-2 episodes when the bottle center sinks below the table.
    pub terminate_on_drop: bool,
    pub image_size: usize,
    /// Uniform joint jitter (rad) on the right-hand fingers at reset.
    pub reset_noise: f64,
    pub placement: PlacementConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            dt: 1.0 / 30.0,
            horizon: 300,
            contact_eps: 0.01,
            joint_scale: 0.05,
            wrist_lin_scale: 0.01,
            wrist_ang_scale: 0.02,
            gravity: 9.81,
            attach_contacts: 3,
            terminate_on_drop: true,
            image_size: 224,
            reset_noise: 0.02,
            placement: PlacementConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contact {
    pub point: Point3<f64>,
    pub part: Part,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Success,
    Dropped,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub stage: u8,
    /// Left 24 then right 24 joint angles.
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub left_wrist: Pose,
    /// Linear then angular velocity of the left wrist (world frame).
    pub left_twist: [f64; 6],
    pub right_wrist: Pose,
    pub bottle: Pose,
    pub bottle_vel: Vector3<f64>,
    pub bottle_fixed: bool,
    /// Bottle pose in the left wrist frame while grasped.
    pub grasp: Option<Pose>,
    pub cap_angle: f64,
    pub cap_vel: f64,
    pub q_ini: UnitQuaternion<f64>,
    pub p_ini: Vector3<f64>,
    pub palm_target: Point3<f64>,
    /// Site index (left 0..20, right 20..40) to contact.
    pub contacts: BTreeMap<usize, Contact>,
    pub steps: usize,
    pub done: bool,
    pub outcome: Option<Outcome>,
}

impl EnvState {
    pub fn hand_q(&self, hand: usize) -> &[f64] {
        let n = self.q.len() / 2;
        &self.q[hand * n..(hand + 1) * n]
    }

    pub fn wrist(&self, hand: usize) -> &Pose {
        if hand == 0 {
            &self.left_wrist
        } else {
            &self.right_wrist
        }
    }

    pub fn left_contact_count(&self) -> usize {
        self.contacts.range(..N_TACTILE / 2).count()
    }

    /// 109 proprioceptive values: angles, velocities, left wrist pose (xyz, wxyz) and twist.
    pub fn proprioception(&self) -> Vec<f64> {
        let t = self.left_wrist.translation.vector;
        let r = self.left_wrist.rotation;
        let mut p = Vec::with_capacity(PROPRIO_DIM);
        p.extend_from_slice(&self.q);
        p.extend_from_slice(&self.qd);
        p.extend_from_slice(&[t.x, t.y, t.z, r.w, r.i, r.j, r.k]);
        p.extend_from_slice(&self.left_twist);
        p
    }

    pub fn tactile(&self) -> [u8; N_TACTILE] {
        let mut c = [0u8; N_TACTILE];
        for &i in self.contacts.keys() {
            c[i] = 1;
        }
        c
    }
}

/// Geometric quantities the rewards are built from.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardTerms {
    pub d_h2b: f64,
    pub n_con: f64,
    pub a_c: f64,
    pub c_flag: f64,
    pub v_c: f64,
    pub d_fz: f64,
    pub d_h2t: f64,
    pub d_o2i: f64,
    pub d_qua: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_hdis: f64,
    pub r_fcon: f64,
    pub r_cang: f64,
    pub r_cvel: f64,
    pub r_fdis: f64,
    pub r_htdis: f64,
    pub r_bdis: f64,
    pub r_brot: f64,
    pub r_left: f64,
    pub r_right: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub const NAMES: [&'static str; 11] = [
        "r_hdis", "r_fcon", "r_cang", "r_cvel", "r_fdis", "r_htdis", "r_bdis", "r_brot", "r_left",
        "r_right", "total",
    ];

    pub fn to_array(&self) -> [f64; 11] {
        [
            self.r_hdis,
            self.r_fcon,
            self.r_cang,
            self.r_cvel,
            self.r_fdis,
            self.r_htdis,
            self.r_bdis,
            self.r_brot,
            self.r_left,
            self.r_right,
            self.total,
        ]
    }
}

/// Angle between the bottle's current and reset orientations.
pub fn quaternion_deviation(q_bot: &UnitQuaternion<f64>, q_ini: &UnitQuaternion<f64>) -> f64 {
    let diff = q_bot * q_ini.inverse();
    2.0 * diff.imag().norm().min(1.0).asin()
}

fn right_terms(t: &RewardTerms, b: &mut RewardBreakdown) {
    b.r_cang = ALPHA[2] * t.a_c.min(CAP_ANGLE_CLAMP);
    b.r_cvel = ALPHA[3] * t.c_flag * t.v_c;
    b.r_fdis = ALPHA[4] * (-10.0 * t.d_fz).exp();
    b.r_right = b.r_cang + b.r_cvel + b.r_fdis;
}

pub fn stage1_reward(t: &RewardTerms) -> RewardBreakdown {
    let mut b = RewardBreakdown {
        r_hdis: ALPHA[0] * t.d_h2b,
        r_fcon: ALPHA[1] * t.n_con,
        ..Default::default()
    };
    b.r_left = b.r_hdis + b.r_fcon;
    right_terms(t, &mut b);
    b.total = b.r_left + b.r_right;
    b
}

pub fn stage2_reward(t: &RewardTerms) -> RewardBreakdown {
    let mut b = RewardBreakdown {
        r_htdis: BETA[0] * (-5.0 * t.d_h2t).exp(),
        r_bdis: BETA[1] * (-10.0 * t.d_o2i).exp(),
        r_brot: BETA[2] / (t.d_qua.abs() + 1.0),
        ..Default::default()
    };
    b.r_left = b.r_htdis + b.r_bdis + b.r_brot;
    right_terms(t, &mut b);
    b.total = b.r_left + b.r_right;
    b
}

/// Distance from a point to a segment.
pub fn point_segment_distance(p: &Point3<f64>, a: &Point3<f64>, b: &Point3<f64>) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

/// Success: the cap turned by strictly more than half a turn.
pub fn detect_success(state: &EnvState) -> bool {
    state.cap_angle > PI
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub success: bool,
    pub dropped: bool,
    pub timeout: bool,
    pub left_contacts: usize,
    pub attached: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub state: EnvState,
    pub reward: RewardBreakdown,
    pub terms: RewardTerms,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub image: render::Image,
    pub tactile: [u8; N_TACTILE],
    pub proprio: Vec<f64>,
}

/// One bottle, one configuration, and the layout derived from them.
#[derive(Debug, Clone)]
pub struct Environment {
    pub bottle: BottleSpec,
    pub config: EnvConfig,
    pub hands: Arc<Hands>,
    pub layout: Layout,
    pub camera: Camera,
}

impl Environment {
    pub fn new(bottle: BottleSpec, config: EnvConfig) -> Result<Self, EnvError> {
        Self::with_hands(bottle, config, Arc::new(Hands::default()))
    }

    pub fn with_hands(bottle: BottleSpec, config: EnvConfig, hands: Arc<Hands>) -> Result<Self, EnvError> {
        bottle.validate().map_err(EnvError::Bottle)?;
        let layout = scene::compute_layout(
            &hands,
            &bottle,
            config.contact_eps,
            config.attach_contacts,
            &config.placement,
        );
        Ok(Environment {
            bottle,
            config,
            hands,
            layout,
            camera: Camera::ego(config.image_size),
        })
    }

    pub fn reset(&self, stage: u8, seed: u64) -> EnvState {
        let n = self.hands.n_dof();
        let mut q = Vec::with_capacity(2 * n);
        q.extend_from_slice(&self.layout.left_q.0);
        let mut right = self.layout.right_q.0.clone();
        if self.config.reset_noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let limits = self.hands.right.limits();
            let mut jittered = right.clone();
            for &d in &self.hands.actuated {
                if self.hands.right.dof_joint(d).finger != "wrist" {
                    let v = jittered[d] + rng.random_range(-1.0..=1.0) * self.config.reset_noise;
                    jittered[d] = v.clamp(limits[d].0, limits[d].1);
                }
            }
            self.hands.apply_mimic(&mut jittered);
            let sites = self.hands.world_sites(1, &self.layout.right_wrist, &jittered);
            if scene::count_contacts(&sites, &self.bottle, &Pose::identity(), self.config.contact_eps) == 0 {
                right = jittered;
            }
        }
        q.extend_from_slice(&right);
        let bottle = Pose::identity();
        let mut state = EnvState {
            stage,
            qd: vec![0.0; 2 * n],
            q,
            left_wrist: self.layout.left_wrist,
            left_twist: [0.0; 6],
            right_wrist: self.layout.right_wrist,
            bottle,
            bottle_vel: Vector3::zeros(),
            bottle_fixed: stage == 1,
            grasp: None,
            cap_angle: 0.0,
            cap_vel: 0.0,
            q_ini: bottle.rotation,
            p_ini: bottle.translation.vector,
            palm_target: self.layout.palm_target,
            contacts: BTreeMap::new(),
            steps: 0,
            done: false,
            outcome: None,
        };
        state.contacts = self.contacts(&state);
        state
    }

    /// Contact set of a state computed from geometry.
    pub fn contacts(&self, state: &EnvState) -> BTreeMap<usize, Contact> {
        let mut out = BTreeMap::new();
        let ns = self.hands.n_sites();
        for hand in 0..2 {
            let sites = self.hands.world_sites(hand, state.wrist(hand), state.hand_q(hand));
            for (i, p) in sites.iter().enumerate() {
                let local = state.bottle.inverse_transform_point(p);
                let (b, c) = scene::bottle_sdf(&self.bottle, &local);
                if b.min(c) <= self.config.contact_eps {
                    let part = if c < b { Part::Cap } else { Part::Body };
                    out.insert(hand * ns + i, Contact { point: *p, part });
                }
            }
        }
        out
    }

    fn right_tips(&self, state: &EnvState) -> Vec<Point3<f64>> {
        let sites = self.hands.world_sites(1, &state.right_wrist, state.hand_q(1));
        self.hands.tip_sites.iter().map(|&i| sites[i]).collect()
    }

    pub fn left_palm(&self, state: &EnvState) -> Point3<f64> {
        self.hands.world_sites(0, &state.left_wrist, state.hand_q(0))[self.hands.palm_site]
    }

    pub fn reward_terms(&self, state: &EnvState) -> RewardTerms {
        let palm = self.left_palm(state);
        let base = state.bottle * Point3::origin();
        let top = state.bottle * Point3::new(0.0, 0.0, self.bottle.body_height);
        let cap_z = (state.bottle * self.bottle.cap_top()).z;
        let tips = self.right_tips(state);
        let ns = self.hands.n_sites();
        let c_flag = state
            .contacts
            .range(ns..)
            .any(|(_, c)| c.part == Part::Cap);
        RewardTerms {
            d_h2b: point_segment_distance(&palm, &base, &top),
            n_con: state.contacts.range(..ns).count() as f64,
            a_c: state.cap_angle,
            c_flag: if c_flag { 1.0 } else { 0.0 },
            v_c: state.cap_vel,
            d_fz: tips.iter().map(|t| (t.z - cap_z).abs()).sum::<f64>() / tips.len() as f64,
            d_h2t: (palm - state.palm_target).norm(),
            d_o2i: (state.bottle.translation.vector - state.p_ini).norm(),
            d_qua: quaternion_deviation(&state.bottle.rotation, &state.q_ini),
        }
    }

    pub fn reward_stage1(&self, state: &EnvState) -> Result<RewardBreakdown, EnvError> {
        if state.stage != 1 {
            return Err(EnvError::WrongStage { expected: 1, got: state.stage });
        }
        Ok(stage1_reward(&self.reward_terms(state)))
    }

    pub fn reward_stage2(&self, state: &EnvState) -> Result<RewardBreakdown, EnvError> {
        if state.stage != 2 {
            return Err(EnvError::WrongStage { expected: 2, got: state.stage });
        }
        Ok(stage2_reward(&self.reward_terms(state)))
    }

    pub fn reward(&self, state: &EnvState) -> RewardBreakdown {
        let t = self.reward_terms(state);
        if state.stage == 1 {
            stage1_reward(&t)
        } else {
            stage2_reward(&t)
        }
    }

    pub fn step(&self, state: &EnvState, action: &[f64]) -> Result<StepResult, EnvError> {
        if action.len() != ACTION_DIM {
            return Err(EnvError::ActionLength(action.len()));
        }
        if let Some(i) = action.iter().position(|a| !a.is_finite()) {
            return Err(EnvError::NonFiniteAction(i));
        }
        if state.done {
            return Err(EnvError::Done);
        }
        let cfg = &self.config;
        let dt = cfg.dt;
        let n = self.hands.n_dof();
        let a: Vec<f64> = action.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        let mut next = state.clone();

        for hand in 0..2 {
            let limits = self.hands.model(hand).limits();
            let q = &mut next.q[hand * n..(hand + 1) * n];
            for (k, &d) in self.hands.actuated.iter().enumerate() {
                let v = q[d] + a[hand * N_ACTUATED + k] * cfg.joint_scale;
                q[d] = v.clamp(limits[d].0, limits[d].1);
            }
            self.hands.apply_mimic(q);
        }
        for i in 0..2 * n {
            next.qd[i] = (next.q[i] - state.q[i]) / dt;
        }

        let lin = Vector3::new(a[40], a[41], a[42]) * cfg.wrist_lin_scale;
        let ang = Vector3::new(a[43], a[44], a[45]) * cfg.wrist_ang_scale;
        next.left_wrist.translation.vector += lin;
        next.left_wrist.rotation = UnitQuaternion::from_scaled_axis(ang) * state.left_wrist.rotation;
        next.left_twist = [
            lin.x / dt,
            lin.y / dt,
            lin.z / dt,
            ang.x / dt,
            ang.y / dt,
            ang.z / dt,
        ];

        if !state.bottle_fixed {
            if state.left_contact_count() >= cfg.attach_contacts {
                let grasp = state
                    .grasp
                    .unwrap_or_else(|| state.left_wrist.inverse() * state.bottle);
                next.grasp = Some(grasp);
                next.bottle = next.left_wrist * grasp;
                next.bottle_vel =
                    (next.bottle.translation.vector - state.bottle.translation.vector) / dt;
            } else {
                next.grasp = None;
                let mut v = if state.grasp.is_some() { Vector3::zeros() } else { state.bottle_vel };
                v.z -= cfg.gravity * dt;
                next.bottle_vel = v;
                next.bottle.translation.vector += v * dt;
            }
        }

        next.contacts = self.contacts(&next);

        // Cap: mean signed tangential speed of right fingertips on the cap.
        let ns = self.hands.n_sites();
        let old_tips = self.right_tips(state);
        let new_tips = self.right_tips(&next);
        let axis = next.bottle.rotation * Vector3::z();
        let center = next.bottle * Point3::origin();
        let bottle_shift = next.bottle.translation.vector - state.bottle.translation.vector;
        let mut speeds = Vec::new();
        for (k, &site) in self.hands.tip_sites.iter().enumerate() {
            if !matches!(next.contacts.get(&(ns + site)), Some(c) if c.part == Part::Cap) {
                continue;
            }
            let rel = new_tips[k] - center;
            let radial = rel - axis * rel.dot(&axis);
            if radial.norm() < 1e-9 {
                speeds.push(0.0);
                continue;
            }
            let tangent = axis.cross(&radial).normalize();
            let vel = (new_tips[k] - old_tips[k] - bottle_shift) / dt;
            speeds.push(vel.dot(&tangent));
        }
        next.cap_vel = if speeds.is_empty() {
            0.0
        } else {
            self.bottle.k_c * speeds.iter().sum::<f64>() / speeds.len() as f64
        };
        next.cap_angle += next.cap_vel * dt;
        next.steps += 1;

        let success = detect_success(&next);
        let dropped = !next.bottle_fixed && (next.bottle * self.bottle.body_center()).z < 0.0;
        let timeout = next.steps >= cfg.horizon;
        next.outcome = if success {
            Some(Outcome::Success)
        } else if dropped && cfg.terminate_on_drop {
            Some(Outcome::Dropped)
        } else if timeout {
            Some(Outcome::Timeout)
        } else {
            None
        };
        next.done = next.outcome.is_some();

        let terms = self.reward_terms(&next);
        let reward = if next.stage == 1 {
            stage1_reward(&terms)
        } else {
            stage2_reward(&terms)
        };
        let info = StepInfo {
            success,
            dropped,
            timeout,
            left_contacts: next.left_contact_count(),
            attached: next.grasp.is_some(),
        };
        Ok(StepResult {
            done: next.done,
            state: next,
            reward,
            terms,
            info,
        })
    }

    /// Scene primitives for the renderer.
    pub fn primitives(&self, state: &EnvState) -> Vec<Primitive> {
        let mut prims = vec![
            Primitive {
                shape: Shape::Table { half_extent: 0.5 },
                color: [0.55, 0.45, 0.35],
                class: PixelClass::Table,
            },
            Primitive {
                shape: Shape::Cylinder {
                    pose: state.bottle,
                    radius: self.bottle.body_radius,
                    z0: 0.0,
                    height: self.bottle.body_height,
                },
                color: [0.2, 0.45, 0.85],
                class: PixelClass::Body,
            },
            Primitive {
                shape: Shape::Cylinder {
                    pose: state.bottle,
                    radius: self.bottle.cap_radius,
                    z0: self.bottle.body_height,
                    height: self.bottle.cap_height,
                },
                color: [0.9, 0.2, 0.15],
                class: PixelClass::Cap,
            },
        ];
        for hand in 0..2 {
            let (color, class) = if hand == 0 {
                ([0.2, 0.75, 0.3], PixelClass::LeftHand)
            } else {
                ([0.95, 0.65, 0.2], PixelClass::RightHand)
            };
            let links = self.hands.world_links(hand, state.wrist(hand), state.hand_q(hand));
            for (i, p) in links.iter().enumerate() {
                prims.push(Primitive {
                    shape: Shape::Sphere {
                        center: *p,
                        radius: if i == 0 { 0.014 } else { 0.008 },
                    },
                    color,
                    class,
                });
            }
        }
        prims
    }

    pub fn render_with_ids(&self, state: &EnvState) -> Rendered {
        render::render(&self.camera, &self.primitives(state))
    }

    /// Ego-centric image and binary touch signal.
    pub fn render_observation(&self, state: &EnvState) -> (render::Image, [u8; N_TACTILE]) {
        (self.render_with_ids(state).image, state.tactile())
    }

    pub fn observe(&self, state: &EnvState) -> Observation {
        let (image, tactile) = self.render_observation(state);
        Observation {
            image,
            tactile,
            proprio: state.proprioception(),
        }
    }

    /// A random but geometrically consistent state near the reset layout,
    /// used by property tests of the reward code.
    pub fn sample_state(&self, stage: u8, rng: &mut impl Rng) -> EnvState {
        let mut s = self.reset(stage, rng.random());
        let n = self.hands.n_dof();
        for hand in 0..2 {
            let limits = self.hands.model(hand).limits();
            for d in 0..n {
                let v = s.q[hand * n + d] + rng.random_range(-0.6..=0.6);
                s.q[hand * n + d] = v.clamp(limits[d].0, limits[d].1);
                s.qd[hand * n + d] = rng.random_range(-2.0..=2.0);
            }
        }
        let jitter = |rng: &mut dyn rand::RngCore, r: f64| {
            Vector3::new(rng.random_range(-r..=r), rng.random_range(-r..=r), rng.random_range(-r..=r))
        };
        s.left_wrist.translation.vector += jitter(rng, 0.03);
        s.left_wrist.rotation = UnitQuaternion::from_scaled_axis(jitter(rng, 0.3)) * s.left_wrist.rotation;
        if stage == 2 {
            s.bottle.translation.vector += jitter(rng, 0.05);
            s.bottle.rotation = UnitQuaternion::from_scaled_axis(jitter(rng, 1.5));
        }
        s.cap_angle = rng.random_range(-1.0..=10.0);
        s.cap_vel = rng.random_range(-3.0..=3.0);
        s.contacts = self.contacts(&s);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn env() -> Environment {
        Environment::new(BottleSpec::easy(), EnvConfig::default()).unwrap()
    }

    #[test]
    fn reset_is_quiet_and_deterministic() {
        let e = env();
        for stage in [1, 2] {
            let s = e.reset(stage, 3);
            assert_eq!(s.cap_angle, 0.0);
            assert_eq!(quaternion_deviation(&s.bottle.rotation, &s.q_ini), 0.0);
            assert!(s.contacts.is_empty());
            assert_eq!(s.tactile(), [0u8; N_TACTILE]);
            assert_eq!(s, e.reset(stage, 3));
            assert_eq!(s.bottle_fixed, stage == 1);
            assert_eq!(s.proprioception().len(), PROPRIO_DIM);
        }
    }

    #[test]
    fn zero_action_in_stage_one_changes_nothing() {
        let e = env();
        let s = e.reset(1, 0);
        let r = e.step(&s, &[0.0; ACTION_DIM]).unwrap();
        assert_eq!(r.state.bottle, s.bottle);
        assert_eq!(r.state.cap_vel, 0.0);
        assert_eq!(r.reward.r_cvel, 0.0);
        assert_eq!(r.state.q, s.q);
    }

    #[test]
    fn free_fall_matches_semi_implicit_euler() {
        let config = EnvConfig {
            terminate_on_drop: false,
            ..EnvConfig::default()
        };
        let e = Environment::new(BottleSpec::easy(), config).unwrap();
        let mut s = e.reset(2, 0);
        // Open the left hand so it never grasps.
        for d in 0..24 {
            s.q[d] = e.hands.left.rest_configuration().0[d];
        }
        s.left_wrist.translation.vector.x -= 0.1;
        s.contacts = e.contacts(&s);
        let z0 = s.bottle.translation.vector.z;
        let dt = config.dt;
        for _ in 0..10 {
            s = e.step(&s, &[0.0; ACTION_DIM]).unwrap().state;
        }
        let drop = z0 - s.bottle.translation.vector.z;
        // Semi-implicit Euler after n steps: g dt^2 n (n + 1) / 2.
        assert_relative_eq!(drop, 9.81 * dt * dt * 55.0, epsilon = 1e-12);
        let closed_form = 0.5 * 9.81 * (10.0 * dt).powi(2);
        assert!((drop - closed_form).abs() <= 0.5 * 9.81 * dt * dt * 10.0 + 1e-12);
    }

    #[test]
    fn drop_ends_the_episode() {
        let e = env();
        let mut s = e.reset(2, 0);
        s.left_wrist.translation.vector.x -= 0.1;
        s.contacts = e.contacts(&s);
        let mut steps = 0;
        loop {
            let r = e.step(&s, &[0.0; ACTION_DIM]).unwrap();
            steps += 1;
            if r.done {
                assert_eq!(r.state.outcome, Some(Outcome::Dropped));
                break;
            }
            s = r.state;
        }
        assert!(steps < 10);
    }

    #[test]
    fn success_is_strictly_above_pi() {
        let e = env();
        let mut s = e.reset(1, 0);
        for (a, want) in [(0.0, false), (3.15, true), (PI, false)] {
            s.cap_angle = a;
            assert_eq!(detect_success(&s), want);
        }
    }

    #[test]
    fn stepping_a_finished_episode_fails() {
        let e = env();
        let mut s = e.reset(1, 0);
        s.done = true;
        assert_eq!(e.step(&s, &[0.0; ACTION_DIM]).unwrap_err(), EnvError::Done);
        let s = e.reset(1, 0);
        let mut a = [0.0; ACTION_DIM];
        a[3] = f64::NAN;
        assert_eq!(e.step(&s, &a).unwrap_err(), EnvError::NonFiniteAction(3));
        assert_eq!(e.step(&s, &a[..10]).unwrap_err(), EnvError::ActionLength(10));
    }

    #[test]
    fn reward_examples() {
        let t = RewardTerms { d_h2b: 0.2, d_fz: 100.0, ..Default::default() };
        assert_relative_eq!(stage1_reward(&t).total, -1.0, epsilon = 1e-12);
        let t = RewardTerms { a_c: 8.0, d_fz: 100.0, ..Default::default() };
        assert_relative_eq!(stage1_reward(&t).r_cang, 3.5);
        let t = RewardTerms { n_con: 4.0, d_fz: 0.0, ..Default::default() };
        let b = stage1_reward(&t);
        assert_relative_eq!(b.r_fcon, 0.2, epsilon = 1e-15);
        assert_relative_eq!(b.r_fdis, 0.5);
        let t = RewardTerms { d_fz: 100.0, ..Default::default() };
        assert_relative_eq!(stage2_reward(&t).r_left, 3.0);
        let t = RewardTerms { d_qua: PI, d_o2i: 0.1, ..Default::default() };
        let b = stage2_reward(&t);
        assert_relative_eq!(b.r_brot, 1.0 / (PI + 1.0));
        assert_relative_eq!(b.r_bdis, (-1.0f64).exp());
        assert!((b.r_brot - 0.2416).abs() < 2e-4);
    }

    #[test]
    fn half_turn_about_any_axis_gives_pi() {
        let q = UnitQuaternion::from_scaled_axis(Vector3::new(0.0, PI, 0.0));
        assert_relative_eq!(quaternion_deviation(&q, &UnitQuaternion::identity()), PI, epsilon = 1e-7);
    }

    #[test]
    fn stage_mismatch_is_an_error() {
        let e = env();
        let s = e.reset(1, 0);
        assert_eq!(e.reward_stage2(&s).unwrap_err(), EnvError::WrongStage { expected: 2, got: 1 });
        let b = e.reward_stage1(&s).unwrap();
        assert_eq!((b.r_htdis, b.r_bdis, b.r_brot), (0.0, 0.0, 0.0));
    }

    #[test]
    fn larger_bottle_covers_more_pixels() {
        let small = env();
        let mut spec = BottleSpec::easy();
        spec.body_radius *= 2.0;
        let big = Environment::new(spec, EnvConfig::default()).unwrap();
        let count = |e: &Environment| {
            let r = e.render_with_ids(&e.reset(1, 0));
            r.count(PixelClass::Body) + r.count(PixelClass::Cap)
        };
        assert!(count(&big) > count(&small));
    }

    #[test]
    fn images_ignore_the_contact_set() {
        let e = env();
        let s = e.reset(1, 0);
        let mut t = s.clone();
        t.contacts.insert(3, Contact { point: Point3::origin(), part: Part::Body });
        assert_eq!(e.render_observation(&s).0, e.render_observation(&t).0);
        assert_ne!(e.render_observation(&s).1, e.render_observation(&t).1);
    }
}
