use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{MaskRatios, TokenLayout};
use super::ModelError;

/// Masked positions of one sample, per group, sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MaskPlan {
    pub visual: Vec<usize>,
    pub tactile: Vec<usize>,
    pub action: Vec<usize>,
    pub null: Vec<usize>,
    pub seed: u64,
}

/// Number of tokens masked out of `n` at `ratio`, rounding half away from zero.
pub fn masked_count(n: usize, ratio: f64) -> usize {
    ((n as f64) * ratio).round() as usize
}

fn pick(n: usize, ratio: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v = index::sample(rng, n, masked_count(n, ratio)).into_vec();
    v.sort_unstable();
    v
}

impl MaskPlan {
    /// Nothing masked.
    pub fn none() -> Self {
        MaskPlan::default()
    }

    pub fn groups(&self) -> [&[usize]; 4] {
        [&self.visual, &self.tactile, &self.action, &self.null]
    }

    /// Kept positions of each group, ascending.
    pub fn kept(&self, layout: &TokenLayout) -> [Vec<usize>; 4] {
        let sizes = layout.group_sizes();
        let groups = self.groups();
        std::array::from_fn(|g| {
            let masked = groups[g];
            (0..sizes[g]).filter(|i| masked.binary_search(i).is_err()).collect()
        })
    }

    /// Encoder sequence length: CLS plus every kept token.
    pub fn encoder_len(&self, layout: &TokenLayout) -> usize {
        let sizes = layout.group_sizes();
        1 + sizes.iter().zip(self.groups()).map(|(n, m)| n - m.len()).sum::<usize>()
    }

    pub fn check(&self, layout: &TokenLayout) -> Result<(), ModelError> {
        let names = ["visual", "tactile", "action", "null"];
        for ((g, n), name) in self.groups().iter().zip(layout.group_sizes()).zip(names) {
            let sorted = g.windows(2).all(|w| w[0] < w[1]);
            if !sorted || g.last().is_some_and(|&last| last >= n) {
                return Err(ModelError::Plan(format!("{name} mask {g:?} does not fit a group of {n}")));
            }
        }
        Ok(())
    }
}

/// Samples masked positions uniformly without replacement, with exact counts.
pub fn sample_mask(layout: &TokenLayout, ratios: &MaskRatios, seed: u64) -> MaskPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [v, c, a, o] = layout.group_sizes();
    MaskPlan {
        visual: pick(v, ratios.visual, &mut rng),
        tactile: pick(c, ratios.tactile, &mut rng),
        action: pick(a, ratios.action, &mut rng),
        null: pick(o, ratios.null, &mut rng),
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn default_counts() {
        let layout = ModelConfig::default().layout();
        let plan = sample_mask(&layout, &MaskRatios::default(), 3);
        assert_eq!(plan.visual.len(), 147);
        assert_eq!(plan.tactile.len(), 20);
        assert_eq!(plan.action.len(), 24);
        assert!(plan.null.is_empty());
        assert_eq!(plan.encoder_len(&layout), 102);
        assert_eq!(MaskPlan::none().encoder_len(&layout), 293);
        assert_eq!(sample_mask(&layout, &MaskRatios::zero(), 3).encoder_len(&layout), 293);
        plan.check(&layout).unwrap();
        assert_eq!(plan, sample_mask(&layout, &MaskRatios::default(), 3));
        assert_ne!(plan, sample_mask(&layout, &MaskRatios::default(), 4));
    }

    #[test]
    fn out_of_range_plans_are_rejected() {
        let layout = ModelConfig::default().layout();
        let plan = MaskPlan { tactile: vec![3, 40], ..MaskPlan::none() };
        assert!(plan.check(&layout).is_err());
        let plan = MaskPlan { visual: vec![5, 5], ..MaskPlan::none() };
        assert!(plan.check(&layout).is_err());
    }
}
