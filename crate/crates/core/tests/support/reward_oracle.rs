use nalgebra::Point3;
use vtao_core::env::{EnvState, Environment};

/// Straight-line transcription of both reward functions, recomputing every
/// geometric term from raw coordinates.
pub fn oracle_reward(env: &Environment, s: &EnvState) -> [f64; 11] {
    let b = &env.bottle;
    let eps = env.config.contact_eps;

    let sdf = |p: &Point3<f64>| -> (f64, f64) {
        let l = s.bottle.inverse_transform_point(p);
        let radial = (l.x * l.x + l.y * l.y).sqrt();
        let cyl = |r: f64, z0: f64, z1: f64| {
            let dr = radial - r;
            let dz = (z0 - l.z).max(l.z - z1);
            if dr > 0.0 && dz > 0.0 {
                (dr * dr + dz * dz).sqrt()
            } else {
                dr.max(dz)
            }
        };
        (
            cyl(b.body_radius, 0.0, b.body_height),
            cyl(b.cap_radius, b.body_height, b.body_height + b.cap_height),
        )
    };

    let left = env.hands.world_sites(0, &s.left_wrist, s.hand_q(0));
    let right = env.hands.world_sites(1, &s.right_wrist, s.hand_q(1));
    let palm = left[env.hands.palm_site];

    // Palm to the body axis segment.
    let a = s.bottle.transform_point(&Point3::origin());
    let top = s.bottle.transform_point(&Point3::new(0.0, 0.0, b.body_height));
    let ab = top - a;
    let t = ((palm - a).dot(&ab) / ab.dot(&ab)).clamp(0.0, 1.0);
    let d_h2b = (palm - (a + ab * t)).norm();

    let n_con = left
        .iter()
        .filter(|p| {
            let (x, y) = sdf(p);
            x.min(y) <= eps
        })
        .count() as f64;
    let c_flag = right.iter().any(|p| {
        let (x, y) = sdf(p);
        x.min(y) <= eps && y < x
    });
    let cap_top = s.bottle.transform_point(&Point3::new(0.0, 0.0, b.body_height + b.cap_height)).z;
    let tips: Vec<f64> = env.hands.tip_sites.iter().map(|&i| right[i].z).collect();
    let d_fz = tips.iter().map(|z| (z - cap_top).abs()).sum::<f64>() / tips.len() as f64;

    let r_hdis = -5.0 * d_h2b;
    let r_fcon = 0.05 * n_con;
    let r_cang = 0.5 * s.cap_angle.min(7.0);
    let r_cvel = 1.1 * if c_flag { 1.0 } else { 0.0 } * s.cap_vel;
    let r_fdis = 0.5 * (-10.0 * d_fz).exp();
    let r_right = r_cang + r_cvel + r_fdis;

    if s.stage == 1 {
        let r_left = r_hdis + r_fcon;
        return [r_hdis, r_fcon, r_cang, r_cvel, r_fdis, 0.0, 0.0, 0.0, r_left, r_right, r_left + r_right];
    }

    let d_h2t = (palm - s.palm_target).norm();
    let d_o2i = (s.bottle.translation.vector - s.p_ini).norm();
    // Vector part of q_bot * conj(q_ini), expanded by hand.
    let (p, q) = (s.bottle.rotation.quaternion(), s.q_ini.quaternion());
    let (w1, x1, y1, z1) = (p.w, p.i, p.j, p.k);
    let (w2, x2, y2, z2) = (q.w, -q.i, -q.j, -q.k);
    let x = w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2;
    let y = w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2;
    let z = w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2;
    let d_qua = 2.0 * (x * x + y * y + z * z).sqrt().min(1.0).asin();

    let r_htdis = (-5.0 * d_h2t).exp();
    let r_bdis = (-10.0 * d_o2i).exp();
    let r_brot = 1.0 / (d_qua.abs() + 1.0);
    let r_left = r_htdis + r_bdis + r_brot;
    [0.0, 0.0, r_cang, r_cvel, r_fdis, r_htdis, r_bdis, r_brot, r_left, r_right, r_left + r_right]
}
