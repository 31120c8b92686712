use serde::{Deserialize, Serialize};

use super::DatasetError;

/// Timestamps closer than this are treated as equidistant (tie goes to the earlier sample).
const TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSample {
    pub timestamp: f64,
    pub payload: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedFrame {
    pub visual_ts: f64,
    pub tactile_index: usize,
    pub mocap_index: usize,
    /// `selected_ts - visual_ts` for each stream.
    pub tactile_error: f64,
    pub mocap_error: f64,
}

fn check_stream(name: &'static str, ts: &[f64]) -> Result<(), DatasetError> {
    if ts.is_empty() {
        return Err(DatasetError::EmptyStream { stream: name });
    }
    if let Some(i) = ts.iter().position(|t| !t.is_finite()) {
        return Err(DatasetError::NotIncreasing { stream: name, index: i });
    }
    if let Some(i) = ts.windows(2).position(|w| w[1] <= w[0]) {
        return Err(DatasetError::NotIncreasing { stream: name, index: i + 1 });
    }
    Ok(())
}

/// Index of the sample nearest to `t`; ties go to the earlier sample.
fn nearest(ts: &[f64], t: f64) -> usize {
    let after = ts.partition_point(|&s| s < t);
    if after == 0 {
        return 0;
    }
    if after == ts.len() {
        return ts.len() - 1;
    }
    let before = after - 1;
    if t - ts[before] <= ts[after] - t + TIE_TOLERANCE {
        before
    } else {
        after
    }
}

fn align_one(name: &'static str, visual: &[f64], ts: &[f64]) -> Result<Vec<usize>, DatasetError> {
    check_stream(name, ts)?;
    // A single sample has no period; it only covers its own instant.
    let period = if ts.len() > 1 {
        (ts[ts.len() - 1] - ts[0]) / (ts.len() - 1) as f64
    } else {
        0.0
    };
    let (lo, hi) = (ts[0] - period, ts[ts.len() - 1] + period);
    let uncovered: Vec<usize> = visual
        .iter()
        .enumerate()
        .filter(|(_, &t)| t < lo - TIE_TOLERANCE || t > hi + TIE_TOLERANCE)
        .map(|(i, _)| i)
        .collect();
    if !uncovered.is_empty() {
        return Err(DatasetError::Coverage { stream: name, frames: uncovered });
    }
    Ok(visual.iter().map(|&t| nearest(ts, t)).collect())
}

/// Picks, for every visual timestamp, the nearest tactile and mocap sample.
pub fn align_streams(
    visual_ts: &[f64],
    tactile: &[StreamSample],
    mocap: &[StreamSample],
) -> Result<Vec<AlignedFrame>, DatasetError> {
    check_stream("visual", visual_ts)?;
    let t_ts: Vec<f64> = tactile.iter().map(|s| s.timestamp).collect();
    let m_ts: Vec<f64> = mocap.iter().map(|s| s.timestamp).collect();
    let t_idx = align_one("tactile", visual_ts, &t_ts)?;
    let m_idx = align_one("mocap", visual_ts, &m_ts)?;
    Ok(visual_ts
        .iter()
        .zip(t_idx.into_iter().zip(m_idx))
        .map(|(&v, (ti, mi))| AlignedFrame {
            visual_ts: v,
            tactile_index: ti,
            mocap_index: mi,
            tactile_error: t_ts[ti] - v,
            mocap_error: m_ts[mi] - v,
        })
        .collect())
}
