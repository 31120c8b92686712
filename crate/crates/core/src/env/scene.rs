//! Scene geometry: bottles, hand placement and the contact proxy.
//!
//! World frame: the table is the plane `z = 0`, the bottle stands at the
//! origin and its frame origin is the center of the body's base. The right
//! wrist hangs above the cap on the `+x` side with the fingers pointing down;
//! the left hand sits on the `-x` side with the fingers running along `+y` and
//! the thumb on top.

use nalgebra::{Matrix3, Point3, Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::kinematics::{robot24, HandModel, JointAngles, Pose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BottleSpec {
    pub body_radius: f64,
    pub body_height: f64,
    pub cap_radius: f64,
    pub cap_height: f64,
    /// Cap rotation per meter of tangential fingertip travel (rad/m).
    pub k_c: f64,
}

/// Sampling box for procedural bottles, `(min, max)` per parameter.
pub const BODY_RADIUS_RANGE: (f64, f64) = (0.030, 0.045);
pub const BODY_HEIGHT_RANGE: (f64, f64) = (0.12, 0.20);
pub const CAP_RADIUS_RANGE: (f64, f64) = (0.014, 0.022);
pub const CAP_HEIGHT_RANGE: (f64, f64) = (0.020, 0.030);
pub const K_C_RANGE: (f64, f64) = (25.0, 40.0);

/// Minimum normalized L-infinity distance between any seen and any unseen bottle.
pub const SET_MARGIN: f64 = 0.05;

impl BottleSpec {
    /// A mid-range bottle used by fixtures and smoke runs.
    pub fn easy() -> Self {
        BottleSpec {
            body_radius: 0.035,
            body_height: 0.16,
            cap_radius: 0.018,
            cap_height: 0.025,
            k_c: 35.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let all = [
            self.body_radius,
            self.body_height,
            self.cap_radius,
            self.cap_height,
            self.k_c,
        ];
        if all.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(format!("bottle parameters must be positive: {self:?}"));
        }
        if self.cap_radius >= self.body_radius {
            return Err("cap radius must be smaller than body radius".into());
        }
        Ok(())
    }

    pub fn sizes(&self) -> [f64; 4] {
        [self.body_radius, self.body_height, self.cap_radius, self.cap_height]
    }

    /// Cap top center in the bottle frame.
    pub fn cap_top(&self) -> Point3<f64> {
        Point3::new(0.0, 0.0, self.body_height + self.cap_height)
    }

    /// Body center in the bottle frame; used for the drop test.
    pub fn body_center(&self) -> Point3<f64> {
        Point3::new(0.0, 0.0, 0.5 * self.body_height)
    }

    fn normalized(&self) -> [f64; 5] {
        let n = |v: f64, (lo, hi): (f64, f64)| (v - lo) / (hi - lo);
        [
            n(self.body_radius, BODY_RADIUS_RANGE),
            n(self.body_height, BODY_HEIGHT_RANGE),
            n(self.cap_radius, CAP_RADIUS_RANGE),
            n(self.cap_height, CAP_HEIGHT_RANGE),
            n(self.k_c, K_C_RANGE),
        ]
    }

    /// Normalized L-infinity distance in parameter space.
    pub fn parameter_distance(&self, other: &BottleSpec) -> f64 {
        self.normalized()
            .iter()
            .zip(other.normalized())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        loop {
            let u = |rng: &mut dyn rand::RngCore, (lo, hi): (f64, f64)| rng.random_range(lo..=hi);
            let spec = BottleSpec {
                body_radius: u(rng, BODY_RADIUS_RANGE),
                body_height: u(rng, BODY_HEIGHT_RANGE),
                cap_radius: u(rng, CAP_RADIUS_RANGE),
                cap_height: u(rng, CAP_HEIGHT_RANGE),
                k_c: u(rng, K_C_RANGE),
            };
            if spec.cap_radius < spec.body_radius - 0.005 {
                return spec;
            }
        }
    }
}

/// Ten training and five held-out bottles.
///
/// Held-out bottles are rejection-sampled until each is at least
/// [`SET_MARGIN`] away from every training bottle.
pub fn make_bottle_sets(seed: u64) -> (Vec<BottleSpec>, Vec<BottleSpec>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seen: Vec<BottleSpec> = (0..10).map(|_| BottleSpec::sample(&mut rng)).collect();
    let mut unseen = Vec::with_capacity(5);
    while unseen.len() < 5 {
        let cand = BottleSpec::sample(&mut rng);
        if seen.iter().all(|s| s.parameter_distance(&cand) >= SET_MARGIN) {
            unseen.push(cand);
        }
    }
    (seen, unseen)
}

/// Which bottle part a point touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Part {
    Body,
    Cap,
}

/// Signed distance from a point to a solid cylinder standing on `z = z0`.
pub fn cylinder_sdf(p: &Point3<f64>, radius: f64, z0: f64, height: f64) -> f64 {
    let radial = (p.x * p.x + p.y * p.y).sqrt() - radius;
    let axial = (p.z - (z0 + 0.5 * height)).abs() - 0.5 * height;
    let outside = (radial.max(0.0).powi(2) + axial.max(0.0).powi(2)).sqrt();
    outside + radial.max(axial).min(0.0)
}

/// Signed distances to the body and the cap for a point in the bottle frame.
pub fn bottle_sdf(bottle: &BottleSpec, p_local: &Point3<f64>) -> (f64, f64) {
    (
        cylinder_sdf(p_local, bottle.body_radius, 0.0, bottle.body_height),
        cylinder_sdf(p_local, bottle.cap_radius, bottle.body_height, bottle.cap_height),
    )
}

/// Both hand models plus the derived index tables the environment needs.
#[derive(Debug, Clone)]
pub struct Hands {
    pub left: HandModel,
    pub right: HandModel,
    /// Dofs that receive an action component (mimic dofs excluded), per hand.
    pub actuated: Vec<usize>,
    /// `(mimic dof, driver dof)` pairs.
    pub mimic: Vec<(usize, usize)>,
    pub palm_site: usize,
    pub tip_sites: [usize; 5],
}

impl Default for Hands {
    fn default() -> Self {
        Hands::new(robot24())
    }
}

impl Hands {
    pub fn new(right: HandModel) -> Self {
        let left = right.mirrored(&format!("{}_left", right.name()));
        let actuated = (0..right.n_dof()).filter(|&d| right.dof_mimic(d).is_none()).collect();
        let mimic = (0..right.n_dof())
            .filter_map(|d| right.dof_mimic(d).map(|m| (d, m)))
            .collect();
        let site = |name: &str| {
            right
                .sites()
                .iter()
                .position(|s| s.name == name)
                .unwrap_or_else(|| panic!("hand model lacks site {name}"))
        };
        let palm_site = site("palm");
        let tips = right.fingertip_links();
        let mut tip_sites = [0usize; 5];
        for (i, link) in tips.iter().enumerate() {
            tip_sites[i] = right
                .sites()
                .iter()
                .position(|s| s.link == *link)
                .expect("every fingertip hosts a site");
        }
        Hands {
            left,
            right,
            actuated,
            mimic,
            palm_site,
            tip_sites,
        }
    }

    pub fn n_dof(&self) -> usize {
        self.right.n_dof()
    }

    pub fn n_sites(&self) -> usize {
        self.right.sites().len()
    }

    pub fn model(&self, hand: usize) -> &HandModel {
        if hand == 0 {
            &self.left
        } else {
            &self.right
        }
    }

    /// Copies every driver angle onto its tendon-coupled joint.
    pub fn apply_mimic(&self, q: &mut [f64]) {
        for &(d, m) in &self.mimic {
            q[d] = q[m];
        }
    }

    /// World-frame site positions of one hand.
    pub fn world_sites(&self, hand: usize, wrist: &Pose, q: &[f64]) -> Vec<Point3<f64>> {
        let model = self.model(hand);
        let poses = model.fk_unchecked(q);
        model.site_positions(&poses).into_iter().map(|p| wrist * p).collect()
    }

    /// World-frame link origins of one hand (wrist first).
    pub fn world_links(&self, hand: usize, wrist: &Pose, q: &[f64]) -> Vec<Point3<f64>> {
        self.model(hand)
            .fk_unchecked(q)
            .iter()
            .map(|p| wrist * Point3::from(p.translation.vector))
            .collect()
    }
}

/// Wrist orientation of the right hand: fingers down, palm toward `-x`.
pub fn right_wrist_rotation() -> UnitQuaternion<f64> {
    let m = Matrix3::from_columns(&[-Vector3::z(), Vector3::y(), Vector3::x()]);
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m))
}

/// Wrist orientation of the left hand: fingers along `+y`, palm toward `+x`,
/// thumb up.
pub fn left_wrist_rotation() -> UnitQuaternion<f64> {
    let m = Matrix3::from_columns(&[Vector3::y(), -Vector3::z(), -Vector3::x()]);
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m))
}

/// Fixed reset configuration of both hands for one bottle.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub right_wrist: Pose,
    pub right_q: JointAngles,
    pub left_wrist: Pose,
    pub left_q: JointAngles,
    /// One full closing action from `left_q` yields at least `attach_contacts` contacts.
    pub left_closing_steps: usize,
    /// Palm point the left hand should hold in stage 2.
    pub palm_target: Point3<f64>,
}

/// Geometric knobs of the pre-grasp placement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementConfig {
    /// Clearance of the right fingertips to the cap surface beyond the contact band.
    pub right_clearance: f64,
    /// Initial flexion (rad) of the right-hand proximal and middle joints.
    pub right_flex: f64,
    /// Clearance of the left palm site to the body.
    pub palm_clearance: f64,
    /// Flexion step used when searching the left pre-grasp.
    pub closing_step: f64,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        PlacementConfig {
            right_clearance: 0.004,
            right_flex: 0.3,
            palm_clearance: 0.012,
            closing_step: 0.05,
        }
    }
}

fn flex_dofs(model: &HandModel) -> Vec<usize> {
    (0..model.n_dof())
        .filter(|&d| {
            let name = model.dof_name(d);
            let j = &model.dof_joint(d);
            j.finger != "thumb" && j.finger != "wrist" && (name.ends_with("j3") || name.ends_with("j2") || name.ends_with("j1"))
        })
        .collect()
}

/// Actuated flexion dofs (proximal and middle) of the four fingers.
pub fn finger_flex_dofs(model: &HandModel) -> Vec<usize> {
    flex_dofs(model)
        .into_iter()
        .filter(|&d| model.dof_mimic(d).is_none())
        .collect()
}

/// Dofs of the named finger (by label), in model order.
pub fn finger_dofs(model: &HandModel, finger: &str) -> Vec<usize> {
    (0..model.n_dof())
        .filter(|&d| model.dof_joint(d).finger == finger)
        .collect()
}

/// Contact count of a hand against the whole bottle.
pub fn count_contacts(sites: &[Point3<f64>], bottle: &BottleSpec, bottle_pose: &Pose, eps: f64) -> usize {
    sites
        .iter()
        .filter(|p| {
            let local = bottle_pose.inverse_transform_point(p);
            let (b, c) = bottle_sdf(bottle, &local);
            b.min(c) <= eps
        })
        .count()
}

fn min_sdf(sites: &[Point3<f64>], bottle: &BottleSpec, bottle_pose: &Pose, skip: Option<usize>) -> f64 {
    sites
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != skip)
        .map(|(_, p)| {
            let (b, c) = bottle_sdf(bottle, &bottle_pose.inverse_transform_point(p));
            b.min(c)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Computes the canonical reset layout for a bottle.
///
/// Right hand: the middle and ring fingertips are centered on the cap's `+x`
/// face, three quarters up the cap, `eps + right_clearance` from its surface. Left hand:
/// the palm faces the body at mid-height, `palm_clearance` from it; the
/// fingers are then curled from an open pose in `closing_step` increments and
/// the pre-grasp is the last contact-free pose before `attach_contacts` sites
/// touch the bottle.
pub fn compute_layout(
    hands: &Hands,
    bottle: &BottleSpec,
    eps: f64,
    attach_contacts: usize,
    cfg: &PlacementConfig,
) -> Layout {
    let upright = Pose::identity();

    // Right hand.
    let right = &hands.right;
    let mut rq = right.rest_configuration();
    for d in flex_dofs(right) {
        rq.0[d] = cfg.right_flex;
    }
    for d in finger_dofs(right, "thumb") {
        rq.0[d] = 0.0f64.clamp(right.limits()[d].0, right.limits()[d].1);
    }
    hands.apply_mimic(&mut rq.0);
    let r_rot = right_wrist_rotation();
    let sites_local = right.site_positions(&right.fk_unchecked(&rq.0));
    let mid = |name: &str| sites_local[right.sites().iter().position(|s| s.name == name).unwrap()];
    let centroid = nalgebra::center(&mid("mf_tip"), &mid("rf_tip"));
    let target = Point3::new(
        bottle.cap_radius + eps + cfg.right_clearance,
        0.0,
        bottle.body_height + 0.75 * bottle.cap_height,
    );
    let r_pos = target - r_rot * centroid.coords;
    let mut right_wrist = Pose::from_parts(r_pos.coords.into(), r_rot);
    // Lift off the body top if the tips hover too close to it, then back off
    // sideways until every site clears the band around the cap.
    let want = eps + cfg.right_clearance;
    for _ in 0..20 {
        let world = hands.world_sites(1, &right_wrist, &rq.0);
        let body = world
            .iter()
            .map(|p| bottle_sdf(bottle, p).0)
            .fold(f64::INFINITY, f64::min);
        let cap = world
            .iter()
            .map(|p| bottle_sdf(bottle, p).1)
            .fold(f64::INFINITY, f64::min);
        if body >= want - 1e-12 && cap >= want - 1e-12 {
            break;
        }
        if body < want {
            right_wrist.translation.vector.z += want - body + 1e-4;
        }
        if cap < want {
            right_wrist.translation.vector.x += want - cap + 1e-4;
        }
    }

    // Left hand: place the palm, then search the pre-grasp flexion.
    let left = &hands.left;
    let l_rot = left_wrist_rotation();
    let lq_open = left.rest_configuration();
    let palm_local = left.site_positions(&left.fk_unchecked(&lq_open.0))[hands.palm_site];
    let palm_world = Point3::new(
        -(bottle.body_radius + cfg.palm_clearance),
        0.0,
        0.5 * bottle.body_height,
    );
    let l_pos = palm_world - l_rot * palm_local.coords;
    let mut left_wrist = Pose::from_parts(l_pos.coords.into(), l_rot);
    // The thumb base sits deeper on the palm side than the palm site.
    // Sites off the x axis move away more slowly than the wrist, so iterate.
    for _ in 0..20 {
        let world = hands.world_sites(0, &left_wrist, &lq_open.0);
        let clearance = min_sdf(&world, bottle, &upright, None);
        if clearance >= cfg.palm_clearance - 1e-12 {
            break;
        }
        left_wrist.translation.vector.x -= cfg.palm_clearance - clearance + 1e-4;
    }

    let flex = finger_flex_dofs(left);
    let limits = left.limits();
    let mut last_free = lq_open.clone();
    let mut steps_from_free = 0usize;
    let mut q = lq_open.clone();
    let mut found = false;
    for _ in 0..64 {
        let mut next = q.clone();
        for &d in &flex {
            next.0[d] = (next.0[d] + cfg.closing_step).clamp(limits[d].0, limits[d].1);
        }
        hands.apply_mimic(&mut next.0);
        let n = count_contacts(&hands.world_sites(0, &left_wrist, &next.0), bottle, &upright, eps);
        steps_from_free += 1;
        if n >= attach_contacts {
            found = true;
            break;
        }
        if n == 0 {
            last_free = next.clone();
            steps_from_free = 0;
        }
        q = next;
    }
    assert!(found, "left pre-grasp search did not close on the bottle {bottle:?}");
    let left_closing_steps = steps_from_free;

    let palm_target = left_wrist * left.site_positions(&left.fk_unchecked(&last_free.0))[hands.palm_site];
    Layout {
        right_wrist,
        right_q: rq,
        left_wrist,
        left_q: last_free,
        left_closing_steps,
        palm_target,
    }
}
