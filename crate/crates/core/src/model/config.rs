use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::dataset::{N_ACTION, N_TACTILE};
use crate::kinematics::robot24;

/// How the 48 joint angles are grouped into action tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionGranularity {
    /// One token per joint, 24 per hand.
    PerJoint,
    /// One token per finger, 5 per hand; the wrist joins the index finger.
    PerFinger,
    /// One token per hand.
    PerHand,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HandSet {
    Both,
    RightOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskRatios {
    pub visual: f64,
    pub tactile: f64,
    pub action: f64,
    pub null: f64,
}

impl Default for MaskRatios {
    fn default() -> Self {
        MaskRatios { visual: 0.75, tactile: 0.5, action: 0.5, null: 0.0 }
    }
}

impl MaskRatios {
    pub fn zero() -> Self {
        MaskRatios { visual: 0.0, tactile: 0.0, action: 0.0, null: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub img: f64,
    pub tac: f64,
    pub bot: f64,
    pub act: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { img: 1.0, tac: 2.0, bot: 5.0, act: 2.0 }
    }
}

impl LossWeights {
    /// Weighted total of the four component losses.
    pub fn combine(&self, img: f64, tac: f64, bot: f64, act: f64) -> f64 {
        self.img * img + self.tac * tac + self.bot * bot + self.act * act
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    /// Hidden width of the transformer MLPs as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub mask: MaskRatios,
    /// Future action steps to predict; 0 reconstructs the current action only.
    pub p: usize,
    pub granularity: ActionGranularity,
    pub use_v: bool,
    pub use_t: bool,
    pub use_a: bool,
    /// Reconstruct the bottle label from the null tokens.
    pub use_o: bool,
    pub tactile_hands: HandSet,
    pub action_hands: HandSet,
    pub null_tokens: usize,
    /// One decoder trunk per objective instead of a shared one.
    pub separate_decoders: bool,
    /// Learned positional tables; fixed sinusoids otherwise.
    pub learned_pos: bool,
    /// Whether the encoder is pretrained before RL (`false` for `-Scr` runs).
    pub pretrained: bool,
    pub weights: LossWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 256,
            enc_depth: 4,
            enc_heads: 8,
            dec_depth: 2,
            dec_heads: 8,
            mlp_ratio: 4,
            patch_size: 16,
            image_size: 224,
            mask: MaskRatios::default(),
            p: 5,
            granularity: ActionGranularity::PerJoint,
            use_v: true,
            use_t: true,
            use_a: true,
            use_o: true,
            tactile_hands: HandSet::Both,
            action_hands: HandSet::Both,
            null_tokens: 8,
            separate_decoders: false,
            learned_pos: true,
            pretrained: true,
            weights: LossWeights::default(),
        }
    }
}

/// Token groups implied by a config.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLayout {
    pub visual: usize,
    /// Taxel index of each tactile token.
    pub tactile: Vec<usize>,
    /// Joint indices (into the 48) carried by each action token.
    pub action: Vec<Vec<usize>>,
    pub null: usize,
}

impl TokenLayout {
    /// Widest action group; narrower groups are zero-padded to it.
    pub fn action_width(&self) -> usize {
        self.action.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// CLS plus every group.
    pub fn total(&self) -> usize {
        1 + self.visual + self.tactile.len() + self.action.len() + self.null
    }

    pub fn group_sizes(&self) -> [usize; 4] {
        [self.visual, self.tactile.len(), self.action.len(), self.null]
    }

    /// Joints covered by the action tokens, in ascending order.
    pub fn action_dofs(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.action.iter().flatten().copied().collect();
        d.sort_unstable();
        d
    }
}

/// Robot joint groups of one hand for per-finger tokens.
fn finger_groups() -> Vec<Vec<usize>> {
    let robot = robot24();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut wrist = Vec::new();
    for (finger, dofs) in robot.finger_groups() {
        if finger == "wrist" {
            wrist = dofs;
        } else {
            groups.push(dofs);
        }
    }
    // The forearm joints move every finger; they ride with the first one.
    let mut first = wrist;
    first.extend(&groups[0]);
    groups[0] = first;
    groups
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        let m = &self.mask;
        for (name, r) in [("visual", m.visual), ("tactile", m.tactile), ("action", m.action), ("null", m.null)] {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("{name} mask ratio {r} is outside [0, 1)"));
            }
        }
        if self.embed_dim == 0 || self.enc_heads == 0 || self.dec_heads == 0 || self.mlp_ratio == 0 {
            return bad("widths and head counts must be positive".into());
        }
        if self.embed_dim % self.enc_heads != 0 || self.embed_dim % self.dec_heads != 0 {
            return bad(format!("embed_dim {} is not divisible by the head counts", self.embed_dim));
        }
        if self.use_v && (self.patch_size == 0 || self.image_size % self.patch_size != 0) {
            return bad(format!("patch {} does not tile image {}", self.patch_size, self.image_size));
        }
        if self.use_o && self.null_tokens == 0 {
            return bad("object reconstruction needs at least one null token".into());
        }
        let w = &self.weights;
        if [w.img, w.tac, w.bot, w.act].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("loss weights must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn layout(&self) -> TokenLayout {
        let hands: &[usize] = match self.action_hands {
            HandSet::Both => &[0, 1],
            HandSet::RightOnly => &[1],
        };
        let per_hand = N_ACTION / 2;
        let action = if !self.use_a {
            Vec::new()
        } else {
            match self.granularity {
                ActionGranularity::PerJoint => hands
                    .iter()
                    .flat_map(|&h| (0..per_hand).map(move |j| vec![h * per_hand + j]))
                    .collect(),
                ActionGranularity::PerHand => {
                    hands.iter().map(|&h| (h * per_hand..(h + 1) * per_hand).collect()).collect()
                }
                ActionGranularity::PerFinger => {
                    let groups = finger_groups();
                    hands
                        .iter()
                        .flat_map(|&h| groups.iter().map(move |g| g.iter().map(|&j| h * per_hand + j).collect()))
                        .collect()
                }
            }
        };
        let tactile = if !self.use_t {
            Vec::new()
        } else {
            match self.tactile_hands {
                HandSet::Both => (0..N_TACTILE).collect(),
                HandSet::RightOnly => (N_TACTILE / 2..N_TACTILE).collect(),
            }
        };
        TokenLayout {
            visual: if self.use_v { (self.image_size / self.patch_size).pow(2) } else { 0 },
            tactile,
            action,
            null: if self.use_o { self.null_tokens } else { 0 },
        }
    }

    /// True when there is nothing to reconstruct, so pretraining is a no-op.
    pub fn is_empty(&self) -> bool {
        !(self.use_v || self.use_t || self.use_a || self.use_o)
    }
}

/// Every baseline and ablation id accepted by [`configure_ablation`].
pub const ABLATION_NAMES: [&str; 17] = [
    "V", "T", "A", "VT", "VTA", "VTO", "VTA-Scr", "VTAO", "v1", "v2", "v3", "v4", "v5", "v6", "v7", "v8", "Base",
];

/// Config of a named baseline, starting from `base` for the scale constants.
pub fn configure_ablation_from(name: &str, base: &ModelConfig) -> Result<ModelConfig, ModelError> {
    let mut c = base.clone();
    let mods = |c: &mut ModelConfig, v: bool, t: bool, a: bool, o: bool| {
        c.use_v = v;
        c.use_t = t;
        c.use_a = a;
        c.use_o = o;
    };
    c.pretrained = true;
    c.p = base.p;
    c.granularity = ActionGranularity::PerJoint;
    c.tactile_hands = HandSet::Both;
    c.action_hands = HandSet::Both;
    match name {
        "V" => mods(&mut c, true, false, false, false),
        "T" => mods(&mut c, false, true, false, false),
        "A" => mods(&mut c, false, false, true, false),
        "VT" | "v3" => mods(&mut c, true, true, false, false),
        "VTA" | "v1" => mods(&mut c, true, true, true, false),
        "VTO" => mods(&mut c, true, true, false, true),
        "VTA-Scr" => {
            mods(&mut c, true, true, true, false);
            c.pretrained = false;
        }
        "VTAO" => mods(&mut c, true, true, true, true),
        "v2" => {
            mods(&mut c, true, true, true, false);
            c.action_hands = HandSet::RightOnly;
        }
        "v4" => {
            mods(&mut c, true, true, false, false);
            c.tactile_hands = HandSet::RightOnly;
        }
        "v5" => {
            mods(&mut c, true, true, true, false);
            c.p = 0;
        }
        "v6" => {
            mods(&mut c, true, true, true, false);
            c.p = 1;
        }
        "v7" => {
            mods(&mut c, true, true, true, false);
            c.granularity = ActionGranularity::PerHand;
        }
        "v8" => {
            mods(&mut c, true, true, true, false);
            c.granularity = ActionGranularity::PerFinger;
        }
        "Base" => {
            mods(&mut c, false, false, false, false);
            c.pretrained = false;
        }
        other => return Err(ModelError::Config(format!("unknown baseline {other:?}"))),
    }
    Ok(c)
}

pub fn configure_ablation(name: &str) -> Result<ModelConfig, ModelError> {
    configure_ablation_from(name, &ModelConfig::default())
}
