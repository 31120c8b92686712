//! Synthetic stand-in for recorded human demonstrations.
//!
//! Each trajectory scripts a grasp-then-twist motion for two human hands as
//! noisy keyframes joined by Catmull-Rom splines. The hands are sampled into
//! a 1 kHz mocap stream, their sites produce 200 Hz taxel voltages, and both
//! streams are aligned to 30 Hz camera frames. Aligned human poses are then
//! retargeted to the robot hands, which are what the images show.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{Point3, Translation3, UnitQuaternion, Vector3};
use ndarray::{Array1, Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::store::{save_dataset, Manifest};
use super::{align_streams, binarize_tactile, make_object_label, Dataset, DatasetError, RawPose, StreamSample};
use super::{N_ACTION, N_TACTILE, OBJECT_DIM};
use crate::env::scene::{
    bottle_sdf, count_contacts, BODY_HEIGHT_RANGE, BODY_RADIUS_RANGE, CAP_HEIGHT_RANGE, CAP_RADIUS_RANGE, K_C_RANGE,
};
use crate::env::{BottleSpec, EnvConfig, Environment, Hands};
use crate::kinematics::{human21, HandModel, JointAngles, JointKind, Pose};
use crate::retarget::{retarget_trajectory, SolverConfig};

pub const CAMERA_SIZE_DEFAULT: usize = 224;

const VISUAL_HZ: f64 = 30.0;
const TACTILE_HZ: f64 = 200.0;
const MOCAP_HZ: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BottleRanges {
    pub body_radius: (f64, f64),
    pub body_height: (f64, f64),
    pub cap_radius: (f64, f64),
    pub cap_height: (f64, f64),
    pub k_c: (f64, f64),
}

impl Default for BottleRanges {
    fn default() -> Self {
        BottleRanges {
            body_radius: BODY_RADIUS_RANGE,
            body_height: BODY_HEIGHT_RANGE,
            cap_radius: CAP_RADIUS_RANGE,
            cap_height: CAP_HEIGHT_RANGE,
            k_c: K_C_RANGE,
        }
    }
}

impl BottleRanges {
    fn validate(&self) -> Result<(), DatasetError> {
        let fields = [
            ("body_radius", self.body_radius, BODY_RADIUS_RANGE),
            ("body_height", self.body_height, BODY_HEIGHT_RANGE),
            ("cap_radius", self.cap_radius, CAP_RADIUS_RANGE),
            ("cap_height", self.cap_height, CAP_HEIGHT_RANGE),
            ("k_c", self.k_c, K_C_RANGE),
        ];
        for (name, (lo, hi), (min, max)) in fields {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(DatasetError::Config(format!("{name} range [{lo}, {hi}] is empty")));
            }
            // The scripted layout is only validated inside the environment's ranges.
            if lo < min - 1e-12 || hi > max + 1e-12 {
                return Err(DatasetError::Config(format!(
                    "{name} range [{lo}, {hi}] leaves the supported [{min}, {max}]"
                )));
            }
        }
        if self.cap_radius.0 >= self.body_radius.1 - 0.005 {
            return Err(DatasetError::Config("cap radius range leaves no room below the body radius".into()));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> BottleSpec {
        let u = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        loop {
            let spec = BottleSpec {
                body_radius: u(rng, self.body_radius),
                body_height: u(rng, self.body_height),
                cap_radius: u(rng, self.cap_radius),
                cap_height: u(rng, self.cap_height),
                k_c: u(rng, self.k_c),
            };
            if spec.cap_radius < spec.body_radius - 0.005 {
                return spec;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub trajectories: usize,
    pub frames_per_trajectory: usize,
    /// Future-action window length.
    pub p: usize,
    pub image_size: usize,
    pub bottle: BottleRanges,
    /// Uniform xy offset of the scene on the table (m).
    pub position_jitter: f64,
    /// Uniform yaw of the scene about the bottle axis (rad).
    pub yaw_range: f64,
    /// Spacing of the spline keyframes (s).
    pub keyframe_interval: f64,
    /// Std of the per-keyframe joint noise (rad).
    pub joint_noise: f64,
    /// Std of the taxel voltage noise (V).
    pub tactile_noise: f64,
    pub contact_eps: f64,
    pub solver: SolverConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            trajectories: 8,
            frames_per_trajectory: 60,
            p: 5,
            image_size: CAMERA_SIZE_DEFAULT,
            bottle: BottleRanges::default(),
            position_jitter: 0.01,
            yaw_range: 0.4,
            keyframe_interval: 0.1,
            joint_noise: 0.03,
            tactile_noise: 0.03,
            contact_eps: 0.01,
            // Warm-started frames rarely need restarts.
            solver: SolverConfig {
                max_iterations: 100,
                restarts: 0,
                ..SolverConfig::default()
            },
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: &str| Err(DatasetError::Config(m.into()));
        if self.trajectories == 0 {
            return bad("need at least one trajectory");
        }
        if self.frames_per_trajectory <= self.p {
            return bad("frames_per_trajectory must exceed p");
        }
        if self.image_size == 0 {
            return bad("image_size must be positive");
        }
        let nonneg = [self.position_jitter, self.yaw_range, self.joint_noise, self.tactile_noise];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("jitter and noise levels must be finite and non-negative");
        }
        if !(self.keyframe_interval.is_finite() && self.keyframe_interval > 0.0) {
            return bad("keyframe_interval must be positive");
        }
        if !(self.contact_eps.is_finite() && self.contact_eps > 0.0) {
            return bad("contact_eps must be positive");
        }
        self.bottle.validate()
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn usable_frames(&self) -> usize {
        self.frames_per_trajectory - self.p
    }
}

/// Finger flexion dofs: rotations about the hand's y axis outside the thumb.
fn flexion_dofs(model: &HandModel) -> Vec<usize> {
    dofs_about(model, &Vector3::y())
}

/// Finger abduction dofs: rotations about the hand's z axis outside the thumb.
fn abduction_dofs(model: &HandModel) -> Vec<usize> {
    dofs_about(model, &Vector3::z())
}

fn dofs_about(model: &HandModel, axis: &Vector3<f64>) -> Vec<usize> {
    (0..model.n_dof())
        .filter(|&d| {
            let j = model.dof_joint(d);
            let aligned = match j.kind {
                JointKind::Revolute { axis: a, .. } => a.dot(axis).abs() > 0.99,
                JointKind::Fixed => false,
            };
            aligned && j.finger != "thumb" && j.finger != "wrist" && model.dof_mimic(d).is_none()
        })
        .collect()
}

fn set_clamped(q: &mut [f64], dofs: &[usize], value: f64, limits: &[(f64, f64)]) {
    for &d in dofs {
        q[d] = value.clamp(limits[d].0, limits[d].1);
    }
}

fn min_site_sdf(sites: &[Point3<f64>], bottle: &BottleSpec, pose: &Pose) -> (f64, f64) {
    sites.iter().fold((f64::INFINITY, f64::INFINITY), |(b, c), p| {
        let (sb, sc) = bottle_sdf(bottle, &pose.inverse_transform_point(p));
        (b.min(sb), c.min(sc))
    })
}

/// Scripted joint targets of one trajectory for both human hands.
struct Script {
    /// Left flexion at full grasp.
    grasp: f64,
    left_abduction: Vec<f64>,
    left_thumb: Vec<(usize, f64)>,
    /// How far inside the cap surface the pressing tips aim (m).
    depth: f64,
    /// Half-width of the azimuthal stroke around the cap (rad).
    stroke: f64,
    period: f64,
    grasp_time: f64,
}

/// A right finger that strokes the cap.
struct Presser {
    dofs: Vec<usize>,
    tip: usize,
    hover: Point3<f64>,
}

struct HumanScene {
    hands: Hands,
    left_wrist: Pose,
    right_wrist: Pose,
    left_flex: Vec<usize>,
    left_abd: Vec<usize>,
    right_pre: Vec<f64>,
    pressers: Vec<Presser>,
}

/// Right-hand flexion of the hovering pre-shape (rad).
const PRESHAPE: f64 = 0.3;
/// Fraction of the cap height at which the tips press.
const PRESS_HEIGHT: f64 = 0.7;
const RIGHT_CLEARANCE: f64 = 0.003;
const PRESSING_FINGERS: [&str; 2] = ["index", "middle"];

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

impl HumanScene {
    /// Places the human hands where the robot's canonical layout puts its palm
    /// and fingertips, then backs them off until all sites clear the bottle.
    fn new(env: &Environment, human: HandModel, clearance: f64) -> Self {
        let hands = Hands::new(human);
        let bottle = &env.bottle;
        let upright = Pose::identity();
        let layout = &env.layout;
        let robot = &env.hands;
        let eps = env.config.contact_eps;

        let left = &hands.left;
        let palm_robot = layout.left_wrist
            * robot.left.site_positions(&robot.left.fk_unchecked(&layout.left_q.0))[robot.palm_site];
        let rest = left.rest_configuration();
        let palm_human = left.site_positions(&left.fk_unchecked(&rest.0))[hands.palm_site];
        let rot = layout.left_wrist.rotation;
        let mut left_wrist = Pose::from_parts((palm_robot - rot * palm_human.coords).coords.into(), rot);
        for _ in 0..40 {
            let (b, c) = min_site_sdf(&hands.world_sites(0, &left_wrist, &rest.0), bottle, &upright);
            if b.min(c) >= clearance {
                break;
            }
            left_wrist.translation.vector.x -= clearance - b.min(c) + 1e-4;
        }

        let right = &hands.right;
        let mut pre = right.rest_configuration().0;
        set_clamped(&mut pre, &flexion_dofs(right), PRESHAPE, &right.limits());
        let centroid = |sites: &[Point3<f64>], tips: &[usize; 5]| nalgebra::center(&sites[tips[0]], &sites[tips[1]]);
        let robot_c = centroid(
            &robot.world_sites(1, &layout.right_wrist, &layout.right_q.0),
            &robot.tip_sites,
        );
        let human_c = centroid(&right.site_positions(&right.fk_unchecked(&pre)), &hands.tip_sites);
        let rot = layout.right_wrist.rotation;
        let mut right_wrist = Pose::from_parts((robot_c - rot * human_c.coords).coords.into(), rot);
        // Hover just above the pressing height so the fingers can reach down
        // onto the cap instead of curling over it.
        right_wrist.translation.vector.z += PRESS_HEIGHT * bottle.cap_height + bottle.body_height - robot_c.z;
        for _ in 0..40 {
            let (b, c) = min_site_sdf(&hands.world_sites(1, &right_wrist, &pre), bottle, &upright);
            let want = eps + RIGHT_CLEARANCE;
            if b >= want && c >= want {
                break;
            }
            if b < want {
                right_wrist.translation.vector.z += want - b + 1e-4;
            }
            if c < want {
                right_wrist.translation.vector.x += want - c + 1e-4;
            }
        }

        let sites = hands.world_sites(1, &right_wrist, &pre);
        let pressers = PRESSING_FINGERS
            .iter()
            .map(|&finger| {
                let k = ["index", "middle", "ring", "little", "thumb"].iter().position(|f| *f == finger).unwrap();
                let tip = hands.tip_sites[k];
                Presser {
                    dofs: (0..right.n_dof())
                        .filter(|&d| right.dof_joint(d).finger == finger && right.dof_mimic(d).is_none())
                        .collect(),
                    tip,
                    hover: sites[tip],
                }
            })
            .collect();

        HumanScene {
            left_flex: flexion_dofs(&hands.left),
            left_abd: abduction_dofs(&hands.left),
            right_pre: pre,
            pressers,
            hands,
            left_wrist,
            right_wrist,
        }
    }

    /// Smallest flexion on a grid that puts `need` left sites in contact.
    fn grasp_level(&self, bottle: &BottleSpec, eps: f64, need: usize) -> f64 {
        let left = &self.hands.left;
        let limits = left.limits();
        let mut q = left.rest_configuration();
        let mut g = 0.0;
        while g < 1.6 {
            g += 0.05;
            set_clamped(&mut q.0, &self.left_flex, g, &limits);
            let sites = self.hands.world_sites(0, &self.left_wrist, &q.0);
            if count_contacts(&sites, bottle, &Pose::identity(), eps) >= need {
                break;
            }
        }
        g
    }

    /// Moves one finger's dofs so its tip approaches `target` (damped least
    /// squares on a finite-difference Jacobian).
    fn reach(&self, q: &mut [f64], finger: &Presser, target: &Point3<f64>) {
        const H: f64 = 1e-6;
        const LAMBDA: f64 = 1e-5;
        let right = &self.hands.right;
        let limits = right.limits();
        let tip = |q: &[f64]| self.hands.world_sites(1, &self.right_wrist, q)[finger.tip];
        let n = finger.dofs.len();
        for _ in 0..40 {
            let p = tip(q);
            let err = target - p;
            if err.norm() < 1e-5 {
                break;
            }
            let mut jac = nalgebra::DMatrix::<f64>::zeros(3, n);
            for (c, &d) in finger.dofs.iter().enumerate() {
                let keep = q[d];
                q[d] = keep + H;
                let dp = (tip(q) - p) / H;
                q[d] = keep;
                jac.set_column(c, &dp);
            }
            let jjt = &jac * jac.transpose() + nalgebra::DMatrix::identity(3, 3) * LAMBDA;
            let Some(inv) = jjt.try_inverse() else { break };
            let dq = jac.transpose() * inv * nalgebra::DVector::from_column_slice(err.as_slice());
            for (c, &d) in finger.dofs.iter().enumerate() {
                q[d] = (q[d] + dq[c].clamp(-0.2, 0.2)).clamp(limits[d].0, limits[d].1);
            }
        }
    }

    /// Press fraction and stroke azimuth of the right hand at time `t`.
    ///
    /// Each cycle presses in, sweeps from `-stroke` to `+stroke`, lifts off
    /// and returns while hovering.
    fn stroke_state(s: &Script, t: f64) -> (f64, f64) {
        if t < s.grasp_time {
            return (0.0, 0.0);
        }
        let cycles = (t - s.grasp_time) / s.period;
        let (k, c) = (cycles.floor(), cycles.fract());
        let from = if k == 0.0 { 0.0 } else { s.stroke };
        let a = s.stroke;
        match c {
            c if c < 0.15 => (smoothstep(c / 0.15), from + (-a - from) * smoothstep(c / 0.15)),
            c if c < 0.55 => (1.0, -a + 2.0 * a * smoothstep((c - 0.15) / 0.4)),
            c if c < 0.7 => (1.0 - smoothstep((c - 0.55) / 0.15), a),
            c => (0.0, a - 2.0 * a * smoothstep((c - 0.7) / 0.3)),
        }
    }

    /// Scripted human joint angles at time `t` (before keyframe noise).
    /// `warm` carries the right-hand solution of the previous keyframe.
    fn profile(&self, s: &Script, bottle: &BottleSpec, t: f64, warm: &mut Vec<f64>) -> (Vec<f64>, Vec<f64>) {
        let left = &self.hands.left;
        let mut ql = left.rest_configuration().0;
        set_clamped(&mut ql, &self.left_flex, s.grasp * smoothstep(t / s.grasp_time), &left.limits());
        for (&d, &a) in self.left_abd.iter().zip(&s.left_abduction) {
            ql[d] = a;
        }
        for &(d, v) in &s.left_thumb {
            ql[d] = v;
        }

        let (press, azimuth) = Self::stroke_state(s, t);
        let spin = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), azimuth);
        let mut qr = warm.clone();
        for f in &self.pressers {
            let radial = Vector3::new(f.hover.x, f.hover.y, 0.0);
            let dir = if radial.norm() > 1e-9 { radial.normalize() } else { Vector3::x() };
            let on_cap = Point3::from(dir * (bottle.cap_radius - s.depth))
                + Vector3::z() * (bottle.body_height + PRESS_HEIGHT * bottle.cap_height);
            let target = spin * (f.hover + (on_cap - f.hover) * press);
            self.reach(&mut qr, f, &target);
        }
        *warm = qr.clone();
        (ql, qr)
    }
}

/// Uniform Catmull-Rom spline through keyframes spaced `dt` apart.
struct Spline {
    dt: f64,
    keys: Vec<Vec<f64>>,
}

impl Spline {
    fn eval(&self, t: f64) -> Vec<f64> {
        let n = self.keys.len();
        let s = (t / self.dt).clamp(0.0, (n - 1) as f64);
        let i = (s.floor() as usize).min(n - 2);
        let u = s - i as f64;
        let k = |j: isize| &self.keys[(i as isize + j).clamp(0, n as isize - 1) as usize];
        let (p0, p1, p2, p3) = (k(-1), k(0), k(1), k(2));
        (0..p1.len())
            .map(|d| {
                let (a, b, c, e) = (p0[d], p1[d], p2[d], p3[d]);
                0.5 * (2.0 * b
                    + (c - a) * u
                    + (2.0 * a - 5.0 * b + 4.0 * c - e) * u * u
                    + (3.0 * b - a - 3.0 * c + e) * u * u * u)
            })
            .collect()
    }
}

fn clamp_all(q: &mut [f64], limits: &[(f64, f64)]) {
    for (v, &(lo, hi)) in q.iter_mut().zip(limits) {
        *v = v.clamp(lo, hi);
    }
}

struct Trajectory {
    images: Vec<u8>,
    tactile: Vec<[u8; N_TACTILE]>,
    actions: Vec<[f32; N_ACTION]>,
    object: [f32; OBJECT_DIM],
    timestamps: Vec<f64>,
}

fn trajectory(
    config: &GeneratorConfig,
    robot: &Arc<Hands>,
    human: &HandModel,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory, DatasetError> {
    let bottle = config.bottle.sample(rng);
    let env_config = EnvConfig {
        image_size: config.image_size,
        contact_eps: config.contact_eps,
        reset_noise: 0.0,
        ..EnvConfig::default()
    };
    let env = Environment::with_hands(bottle, env_config, robot.clone()).map_err(|e| DatasetError::Config(e.to_string()))?;
    let eps = config.contact_eps;
    let scene = HumanScene::new(&env, human.clone(), 0.012);

    let u = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| rng.random_range(lo..=hi);
    let frames = config.frames_per_trajectory;
    let duration = (frames - 1) as f64 / VISUAL_HZ;
    let script = Script {
        grasp: scene.grasp_level(&bottle, eps, env.config.attach_contacts) * u(rng, 1.0, 1.15),
        left_abduction: scene.left_abd.iter().map(|_| u(rng, -0.05, 0.05)).collect(),
        left_thumb: (0..scene.hands.left.n_dof())
            .filter(|&d| scene.hands.left.dof_joint(d).finger == "thumb")
            .map(|d| {
                let (lo, hi) = scene.hands.left.limits()[d];
                (d, u(rng, 0.0, 0.3).clamp(lo, hi))
            })
            .collect(),
        depth: u(rng, 0.002, 0.004),
        stroke: u(rng, 0.3, 0.6),
        period: u(rng, 0.5, 0.8),
        grasp_time: u(rng, 0.2, 0.35) * duration,
    };

    // Noisy keyframes along the script, one spline per hand.
    let noise = Normal::new(0.0, config.joint_noise.max(1e-300)).expect("valid std");
    let n_keys = (duration / config.keyframe_interval).ceil() as usize + 2;
    let (limits_l, limits_r) = (scene.hands.left.limits(), scene.hands.right.limits());
    let mut keys_l = Vec::with_capacity(n_keys);
    let mut keys_r = Vec::with_capacity(n_keys);
    let mut warm = scene.right_pre.clone();
    for k in 0..n_keys {
        let (mut ql, mut qr) = scene.profile(&script, &bottle, k as f64 * config.keyframe_interval, &mut warm);
        for v in ql.iter_mut().chain(qr.iter_mut()) {
            if config.joint_noise > 0.0 {
                *v += noise.sample(rng);
            }
        }
        clamp_all(&mut ql, &limits_l);
        clamp_all(&mut qr, &limits_r);
        keys_l.push(ql);
        keys_r.push(qr);
    }
    let spline_l = Spline { dt: config.keyframe_interval, keys: keys_l };
    let spline_r = Spline { dt: config.keyframe_interval, keys: keys_r };
    let human_q = |t: f64| {
        let (mut l, mut r) = (spline_l.eval(t), spline_r.eval(t));
        clamp_all(&mut l, &limits_l);
        clamp_all(&mut r, &limits_r);
        (l, r)
    };

    let yaw = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), u(rng, -1.0, 1.0) * config.yaw_range);
    let offset = Vector3::new(
        u(rng, -1.0, 1.0) * config.position_jitter,
        u(rng, -1.0, 1.0) * config.position_jitter,
        0.0,
    );
    let world = Pose::from_parts(Translation3::from(offset), yaw);

    // Streams with independent clock phases.
    let visual: Vec<f64> = (0..frames).map(|k| k as f64 / VISUAL_HZ).collect();
    let stream_times = |rng: &mut ChaCha8Rng, hz: f64| {
        let start = -u(rng, 0.0, 1.0) / hz;
        let end = duration + 1.0 / hz;
        (0..).map(move |i| start + i as f64 / hz).take_while(move |&t| t <= end).collect::<Vec<f64>>()
    };
    let mocap: Vec<StreamSample> = stream_times(rng, MOCAP_HZ)
        .into_iter()
        .map(|t| {
            let (mut l, r) = human_q(t);
            l.extend(r);
            StreamSample { timestamp: t, payload: l }
        })
        .collect();
    let volt_noise = Normal::new(0.0, config.tactile_noise.max(1e-300)).expect("valid std");
    let (human_lw, human_rw) = (world * scene.left_wrist, world * scene.right_wrist);
    let mut tactile = Vec::new();
    for t in stream_times(rng, TACTILE_HZ) {
        let (l, r) = human_q(t);
        let mut payload = Vec::with_capacity(N_TACTILE);
        for (hand, wrist, q) in [(0, &human_lw, &l), (1, &human_rw, &r)] {
            for p in scene.hands.world_sites(hand, wrist, q) {
                let (b, c) = bottle_sdf(&bottle, &world.inverse_transform_point(&p));
                let base = if b.min(c) <= eps { u(rng, 0.6, 1.0) } else { u(rng, 0.0, 0.15) };
                let n = if config.tactile_noise > 0.0 { volt_noise.sample(rng) } else { 0.0 };
                payload.push((base + n).max(0.0));
            }
        }
        tactile.push(StreamSample { timestamp: t, payload });
    }

    let aligned = align_streams(&visual, &tactile, &mocap)?;
    let nh = scene.hands.n_dof();
    let human_l: Vec<JointAngles> = aligned
        .iter()
        .map(|a| JointAngles(mocap[a.mocap_index].payload[..nh].to_vec()))
        .collect();
    let human_r: Vec<JointAngles> = aligned
        .iter()
        .map(|a| JointAngles(mocap[a.mocap_index].payload[nh..].to_vec()))
        .collect();
    let robot_l = retarget_trajectory(&robot.left, &scene.hands.left, &human_l, &config.solver)?;
    let robot_r = retarget_trajectory(&robot.right, &scene.hands.right, &human_r, &config.solver)?;

    let mut state = env.reset(1, 0);
    state.bottle = world;
    state.left_wrist = world * env.layout.left_wrist;
    state.right_wrist = world * env.layout.right_wrist;
    let label = make_object_label(
        &RawPose::from_pose(&world),
        &RawPose::from_pose(&env.camera.pose),
        bottle.sizes(),
    )?;
    let mut out = Trajectory {
        images: Vec::with_capacity(frames * config.image_size * config.image_size * 3),
        tactile: Vec::with_capacity(frames),
        actions: Vec::with_capacity(frames),
        object: label.to_array().map(|v| v as f32),
        timestamps: visual.clone(),
    };
    for (k, a) in aligned.iter().enumerate() {
        let mut q = robot_l[k].q.0.clone();
        q.extend_from_slice(&robot_r[k].q.0);
        let mut action = [0f32; N_ACTION];
        for (dst, &v) in action.iter_mut().zip(&q) {
            *dst = v as f32;
        }
        state.q = q;
        out.images.extend_from_slice(&env.render_with_ids(&state).image.data);
        out.tactile.push(binarize_tactile(&tactile[a.tactile_index].payload)?);
        out.actions.push(action);
    }
    Ok(out)
}

/// Builds the dataset in memory; identical `(config, seed)` give identical arrays.
pub fn synthesize(config: &GeneratorConfig, seed: u64) -> Result<Dataset, DatasetError> {
    config.validate()?;
    let robot = Arc::new(Hands::default());
    let human = human21();
    let (f, p, s) = (config.frames_per_trajectory, config.p, config.image_size);
    let usable = config.usable_frames();
    let n = config.trajectories * usable;
    let mut images = Vec::with_capacity(n * s * s * 3);
    let mut tactile = Array2::<u8>::zeros((n, N_TACTILE));
    let mut actions = Array2::<f32>::zeros((n, N_ACTION));
    let mut future = Array3::<f32>::zeros((n, p, N_ACTION));
    let mut objects = Array2::<f32>::zeros((n, OBJECT_DIM));
    let mut timestamps = Array1::<f64>::zeros(n);
    let mut traj_ids = Array1::<u32>::zeros(n);
    let frame_bytes = s * s * 3;
    for k in 0..config.trajectories {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64 + 1);
        let t = trajectory(config, &robot, &human, &mut rng)?;
        debug_assert_eq!(t.actions.len(), f);
        for i in 0..usable {
            let row = k * usable + i;
            images.extend_from_slice(&t.images[i * frame_bytes..(i + 1) * frame_bytes]);
            tactile.row_mut(row).assign(&ndarray::ArrayView1::from(&t.tactile[i]));
            actions.row_mut(row).assign(&ndarray::ArrayView1::from(&t.actions[i]));
            for j in 0..p {
                future
                    .slice_mut(ndarray::s![row, j, ..])
                    .assign(&ndarray::ArrayView1::from(&t.actions[i + 1 + j]));
            }
            objects.row_mut(row).assign(&ndarray::ArrayView1::from(&t.object));
            timestamps[row] = t.timestamps[i];
            traj_ids[row] = k as u32;
        }
    }
    let ds = Dataset {
        manifest: Manifest::new(config, seed, n),
        images: Array4::from_shape_vec((n, s, s, 3), images).expect("image buffer size"),
        tactile,
        actions,
        future_actions: future,
        objects,
        timestamps,
        trajectory: traj_ids,
    };
    ds.check()?;
    Ok(ds)
}

/// Generates the dataset and writes it to `out`.
pub fn generate_synthetic_dataset(config: &GeneratorConfig, seed: u64, out: &Path) -> Result<Dataset, DatasetError> {
    let ds = synthesize(config, seed)?;
    save_dataset(&ds, out)?;
    Ok(ds)
}
