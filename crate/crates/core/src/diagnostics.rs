//! Empirical estimators for the reward distance between two sets of state
//! transitions and for the discounted state-transition distribution error.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{pair_matrix, ObservationPair};
use crate::error::{check_dim, invalid, Error, Result};
use crate::math;
use crate::nn::Matrix;
use crate::reward::RewardParams;

/// Function of a state transition `(s, s′)`.
pub type PairFn<'a> = Box<dyn Fn(&[f64], &[f64]) -> f64 + 'a>;

pub enum Candidate<'a> {
    Zero,
    Learned(&'a RewardParams),
    Custom(PairFn<'a>),
}

impl Candidate<'_> {
    fn mean(&self, pairs: &[ObservationPair]) -> f64 {
        let n = pairs.len() as f64;
        match self {
            Candidate::Zero => 0.0,
            Candidate::Learned(r) => {
                let m = pair_matrix(pairs.iter().map(|p| (p.s.as_slice(), p.s_next.as_slice())), r.state_dim());
                r.values(&m).iter().sum::<f64>() / n
            }
            Candidate::Custom(f) => pairs.iter().map(|p| f(&p.s, &p.s_next)).sum::<f64>() / n,
        }
    }
}

/// Finite reward class; the zero function is always a member, so distances
/// are never negative.
pub struct RewardFunctionSet<'a> {
    candidates: Vec<Candidate<'a>>,
}

impl Default for RewardFunctionSet<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> RewardFunctionSet<'a> {
    pub fn new() -> Self {
        Self {
            candidates: vec![Candidate::Zero],
        }
    }

    pub fn with_learned(mut self, r: &'a RewardParams) -> Self {
        self.candidates.push(Candidate::Learned(r));
        self
    }

    pub fn with_fn(mut self, f: impl Fn(&[f64], &[f64]) -> f64 + 'a) -> Self {
        self.candidates.push(Candidate::Custom(Box::new(f)));
        self
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// `max_r (mean_a r − mean_b r)` over the candidate set.
pub fn empirical_lfo_reward_distance(
    set: &RewardFunctionSet<'_>,
    pairs_a: &[ObservationPair],
    pairs_b: &[ObservationPair],
) -> Result<f64> {
    if pairs_a.is_empty() || pairs_b.is_empty() {
        return Err(Error::Empty { what: "pair set" });
    }
    let mut best = f64::NEG_INFINITY;
    for c in &set.candidates {
        let d = c.mean(pairs_a) - c.mean(pairs_b);
        if !d.is_finite() {
            return Err(Error::NonFinite { op: "reward distance" });
        }
        best = best.max(d);
    }
    Ok(best)
}

/// `ĉ_r = Σ_i r(s⁽ⁱ⁾, s′⁽ⁱ⁾)` for a non-negative reward.
pub fn empirical_reward_coefficient(r: impl Fn(&[f64], &[f64]) -> f64, pairs: &[ObservationPair]) -> Result<f64> {
    let mut total = 0.0;
    for p in pairs {
        let v = r(&p.s, &p.s_next);
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "reward coefficient" });
        }
        if v < 0.0 {
            return Err(invalid("reward", "must be non-negative on every pair"));
        }
        total += v;
    }
    Ok(total)
}

/// Weights `r(s⁽ⁱ⁾, s′⁽ⁱ⁾) / ĉ_r`.
pub fn normalized_reward_distribution(
    r: impl Fn(&[f64], &[f64]) -> f64,
    pairs: &[ObservationPair],
) -> Result<Vec<f64>> {
    let c = empirical_reward_coefficient(&r, pairs)?;
    if c <= 0.0 {
        return Err(invalid("reward coefficient", "must be positive to normalize"));
    }
    Ok(pairs.iter().map(|p| r(&p.s, &p.s_next) / c).collect())
}

/// A regular grid over chosen state coordinates, applied to both `s` and
/// `s′`.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramGrid {
    pub coords: Vec<usize>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub bins: usize,
}

impl HistogramGrid {
    pub fn new(coords: Vec<usize>, lo: Vec<f64>, hi: Vec<f64>, bins: usize) -> Result<Self> {
        check_dim("grid lower bounds", coords.len(), lo.len())?;
        check_dim("grid upper bounds", coords.len(), hi.len())?;
        if bins == 0 || coords.is_empty() {
            return Err(invalid("grid", "needs at least one coordinate and one bin"));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l < h)) {
            return Err(invalid("grid", "needs lo < hi on every coordinate"));
        }
        Ok(Self { coords, lo, hi, bins })
    }

    /// 16 bins over the two positions of the point-mass task.
    pub fn point_mass_positions() -> Self {
        Self::new(vec![0, 1], vec![-5.0, -5.0], vec![5.0, 5.0], 16).expect("valid grid")
    }

    /// Number of histogram axes (`2 ×` chosen coordinates).
    pub fn axes(&self) -> usize {
        2 * self.coords.len()
    }

    pub fn num_bins(&self) -> usize {
        self.bins.pow(self.axes() as u32)
    }

    fn axis_bin(&self, axis: usize, v: f64) -> (usize, bool) {
        let c = axis % self.coords.len();
        let (lo, hi) = (self.lo[c], self.hi[c]);
        if !(v >= lo) {
            return (0, v < lo || v.is_nan());
        }
        if v > hi {
            return (self.bins - 1, true);
        }
        let k = ((v - lo) / (hi - lo) * self.bins as f64) as usize;
        (k.min(self.bins - 1), false)
    }

    /// Flat bin index of `(s, s′)`, and whether any coordinate was clamped.
    pub fn bin_index(&self, s: &[f64], s_next: &[f64]) -> (usize, bool) {
        let mut idx = 0;
        let mut clamped = false;
        let n = self.coords.len();
        for axis in 0..self.axes() {
            let src = if axis < n { s } else { s_next };
            let (k, c) = self.axis_bin(axis, src[self.coords[axis % n]]);
            idx = idx * self.bins + k;
            clamped |= c;
        }
        (idx, clamped)
    }

    /// Bin center as the chosen coordinates of `s` followed by those of `s′`.
    pub fn bin_center(&self, mut idx: usize) -> Vec<f64> {
        let axes = self.axes();
        let n = self.coords.len();
        let mut out = vec![0.0; axes];
        for axis in (0..axes).rev() {
            let k = idx % self.bins;
            idx /= self.bins;
            let c = axis % n;
            let width = (self.hi[c] - self.lo[c]) / self.bins as f64;
            out[axis] = self.lo[c] + (k as f64 + 0.5) * width;
        }
        out
    }

    /// Every bin center as a `num_bins × axes` matrix.
    pub fn centers(&self) -> Matrix {
        let rows: Vec<Vec<f64>> = (0..self.num_bins()).map(|i| self.bin_center(i)).collect();
        Matrix::from_rows(&rows)
    }
}

/// Discounted occupancy of state transitions over a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTransitionHistogram {
    pub grid: HistogramGrid,
    pub weights: Vec<f64>,
    pub gamma: f64,
    /// Pairs that fell outside the grid and were assigned to boundary bins.
    pub out_of_grid: usize,
}

/// Histogram of `(s_t, s_{t+1})` weighted by `(1 − γ)γᵗ` and normalized.
/// Each trajectory is its sequence of visited states.
pub fn estimate_state_transition_distribution(
    trajectories: &[Vec<Vec<f64>>],
    grid: &HistogramGrid,
    gamma: f64,
) -> Result<StateTransitionHistogram> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(invalid("gamma", "must lie in [0,1)"));
    }
    let mut weights = vec![0.0; grid.num_bins()];
    let mut out_of_grid = 0;
    let mut total = 0.0;
    let need = grid.coords.iter().copied().max().unwrap_or(0) + 1;
    for traj in trajectories {
        for (t, w) in traj.windows(2).enumerate() {
            if w[0].len() < need || w[1].len() < need {
                return Err(Error::DimensionMismatch {
                    what: "trajectory state",
                    expected: need,
                    found: w[0].len().min(w[1].len()),
                });
            }
            let (idx, clamped) = grid.bin_index(&w[0], &w[1]);
            out_of_grid += clamped as usize;
            let mass = (1.0 - gamma) * math::powf(gamma, t as f64);
            weights[idx] += mass;
            total += mass;
        }
    }
    if !(total > 0.0) {
        return Err(Error::Empty { what: "trajectory transitions" });
    }
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(StateTransitionHistogram {
        grid: grid.clone(),
        weights,
        gamma,
        out_of_grid,
    })
}

/// `C_r · min_π Σ_bins 𝓡(bin)(μ̂_E(bin) − μ̂_π(bin))` with `C_r = Σ_bins r`
/// and `𝓡 = r / C_r`, for per-bin reward values.
pub fn state_transition_error(r_bins: &[f64], expert: &[f64], agents: &[&[f64]]) -> Result<f64> {
    if agents.is_empty() {
        return Err(Error::Empty { what: "agent histograms" });
    }
    check_dim("expert histogram", r_bins.len(), expert.len())?;
    if r_bins.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(invalid("reward", "must be non-negative on every bin"));
    }
    let c: f64 = r_bins.iter().sum();
    if c <= 0.0 {
        return Err(invalid("reward coefficient", "must be positive to normalize"));
    }
    let mut best = f64::INFINITY;
    for a in agents {
        check_dim("agent histogram", r_bins.len(), a.len())?;
        let inner: f64 = r_bins
            .iter()
            .zip(expert.iter().zip(a.iter()))
            .map(|(r, (e, p))| (r / c) * (e - p))
            .sum();
        best = best.min(inner);
    }
    Ok(c * best)
}

/// [`state_transition_error`] with `r` evaluated at the bin centers of the
/// shared grid. `r` receives the chosen coordinates of `s` and of `s′`.
pub fn empirical_state_transition_error(
    r: impl Fn(&[f64], &[f64]) -> f64,
    expert: &StateTransitionHistogram,
    agents: &[&StateTransitionHistogram],
) -> Result<f64> {
    for a in agents {
        if a.grid != expert.grid {
            return Err(invalid("histogram grid", "must be shared by all histograms"));
        }
    }
    let n = expert.grid.coords.len();
    let r_bins: Vec<f64> = (0..expert.grid.num_bins())
        .map(|i| {
            let c = expert.grid.bin_center(i);
            r(&c[..n], &c[n..])
        })
        .collect();
    let lists: Vec<&[f64]> = agents.iter().map(|a| a.weights.as_slice()).collect();
    state_transition_error(&r_bins, &expert.weights, &lists)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(s: &[f64], s_next: &[f64]) -> ObservationPair {
        ObservationPair::new(s.to_vec(), s_next.to_vec())
    }

    #[test]
    fn distance_examples() {
        let a = vec![pair(&[1.0, 0.0], &[0.0, 0.0]), pair(&[3.0, 0.0], &[0.0, 0.0])];
        let b = vec![pair(&[0.5, 1.0], &[0.0, 0.0])];
        assert_eq!(empirical_lfo_reward_distance(&RewardFunctionSet::new(), &a, &b).unwrap(), 0.0);
        let consts = RewardFunctionSet::new().with_fn(|_, _| 1.0);
        assert_eq!(empirical_lfo_reward_distance(&consts, &a, &b).unwrap(), 0.0);
        let first = RewardFunctionSet::new().with_fn(|s, _| s[0]);
        assert_eq!(empirical_lfo_reward_distance(&first, &a, &b).unwrap(), 1.5);
        assert!(empirical_lfo_reward_distance(&first, &a, &[]).is_err());
    }

    #[test]
    fn coefficient_examples() {
        let pairs = vec![
            pair(&[0.0, 0.0], &[1.0, 2.0]),
            pair(&[1.0, 1.0], &[0.5, 1.0]),
            pair(&[-1.0, 2.0], &[1.0, -1.0]),
        ];
        let l1 = |s: &[f64], t: &[f64]| s.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>();
        assert!((empirical_reward_coefficient(l1, &pairs).unwrap() - 8.5).abs() < 1e-12);
        assert_eq!(empirical_reward_coefficient(|_, _| 1.0, &pairs).unwrap(), 3.0);
        assert!(empirical_reward_coefficient(|_, _| -1.0, &pairs).is_err());
        let w = normalized_reward_distribution(|s, _| if s[0] == 0.0 { 3.0 } else { 1.0 }, &pairs[..2]).unwrap();
        assert_eq!(w, vec![0.75, 0.25]);
        assert!(normalized_reward_distribution(|_, _| 0.0, &pairs).is_err());
    }

    #[test]
    fn histogram_discounting() {
        let grid = HistogramGrid::new(vec![0], vec![0.0], vec![4.0], 4).unwrap();
        let traj = vec![vec![vec![0.5], vec![1.5], vec![2.5]]];
        let h = estimate_state_transition_distribution(&traj, &grid, 0.5).unwrap();
        let (i0, _) = grid.bin_index(&[0.5], &[1.5]);
        let (i1, _) = grid.bin_index(&[1.5], &[2.5]);
        assert!((h.weights[i0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((h.weights[i1] - 1.0 / 3.0).abs() < 1e-15);
        let h0 = estimate_state_transition_distribution(&traj, &grid, 0.0).unwrap();
        assert_eq!(h0.weights[i0], 1.0);
        assert!((h.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_grid_is_clamped_and_counted() {
        let grid = HistogramGrid::new(vec![0], vec![0.0], vec![1.0], 2).unwrap();
        let traj = vec![vec![vec![-3.0], vec![7.0]]];
        let h = estimate_state_transition_distribution(&traj, &grid, 0.9).unwrap();
        assert_eq!(h.out_of_grid, 1);
        assert_eq!(h.weights[grid.bin_index(&[0.0], &[1.0]).0], 1.0);
    }

    #[test]
    fn two_bin_examples() {
        let e = [1.0, 0.0];
        let p = [0.0, 1.0];
        assert_eq!(state_transition_error(&[2.0, 2.0], &e, &[&p]).unwrap(), 0.0);
        assert_eq!(state_transition_error(&[4.0, 0.0], &e, &[&p]).unwrap(), 4.0);
        assert_eq!(state_transition_error(&[4.0, 0.0], &e, &[&p, &e]).unwrap(), 0.0);
        assert!(state_transition_error(&[-1.0, 0.0], &e, &[&p]).is_err());
    }

    #[test]
    fn bin_centers_round_trip() {
        let g = HistogramGrid::point_mass_positions();
        assert_eq!(g.num_bins(), 65_536);
        for idx in [0, 1, 17, 4_097, 65_535] {
            let c = g.bin_center(idx);
            assert_eq!(g.bin_index(&c[..2], &c[2..]).0, idx);
        }
    }
}
