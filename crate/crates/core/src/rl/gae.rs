use ndarray::Array2;

/// Generalized advantage estimates and value targets for `T x N` rollouts.
///
/// `dones[t][i]` marks that the transition at `t` ended its episode, so the
/// recursion does not bootstrap across it. `last_values` are the critic's
/// values of the states following the final step.
pub fn gae(
    rewards: &Array2<f64>,
    values: &Array2<f64>,
    dones: &Array2<bool>,
    last_values: &[f64],
    gamma: f64,
    lambda: f64,
) -> (Array2<f64>, Array2<f64>) {
    let (t_len, n) = rewards.dim();
    let mut adv = Array2::zeros((t_len, n));
    for i in 0..n {
        let mut next_value = last_values[i];
        let mut acc = 0.0;
        for t in (0..t_len).rev() {
            let live = if dones[[t, i]] { 0.0 } else { 1.0 };
            let delta = rewards[[t, i]] + gamma * next_value * live - values[[t, i]];
            acc = delta + gamma * lambda * live * acc;
            adv[[t, i]] = acc;
            next_value = values[[t, i]];
        }
    }
    let returns = &adv + values;
    (adv, returns)
}
