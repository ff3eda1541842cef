//! Batch fitted Q-iteration with forecast substitution, plus the day-level
//! closed loop: epsilon-greedy exploration, experience collection and the
//! daily policy refresh.
//!
//! The iteration core is generic over the [`Regressor`] so the same loop can
//! be driven by the convolutional network in production and by an exact
//! tabular regressor in oracle tests.

mod env;

pub use env::{run_day, ClusterEnv, DayRecord, HistoryMode, PeriodOutcome, PeriodRecord};

use std::collections::VecDeque;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::aggregation::{AugmentedState, StateTimeGrid};
use crate::error::{Error, Result};
use crate::neuralnet::{EncodedState, InputEncoder, QNetwork, Sample};

/// Aggregate power targets the controller may request, kW, ascending from
/// zero to the cluster rating.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSet {
    levels: Vec<f64>,
}

impl ActionSet {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidArgument("empty action set".into()));
        }
        if levels[0] != 0.0 {
            return Err(Error::InvalidArgument(
                "action levels must start at zero".into(),
            ));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) || levels.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "action levels must be finite and strictly ascending".into(),
            ));
        }
        Ok(Self { levels })
    }

    /// `n` equidistant levels from 0 to the cluster rating.
    pub fn equidistant(n: usize, max_kw: f64) -> Result<Self> {
        if n < 2 || max_kw <= 0.0 {
            return Err(Error::InvalidArgument(
                "need at least two levels and a positive rating".into(),
            ));
        }
        Self::new(
            (0..n)
                .map(|i| max_kw * i as f64 / (n - 1) as f64)
                .collect(),
        )
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// One experience tuple as collected by the closed loop.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: AugmentedState,
    /// Requested aggregate action, kW.
    pub action_kw: f64,
    pub next_state: AugmentedState,
    /// Per-device action actually executed after the backup filter.
    pub u_phys: Vec<bool>,
    /// Absolute control-period index of `state`.
    pub period_index: usize,
}

/// Append-only store of transitions with an optional FIFO cap. The buffer
/// keeps the device power ratings so the stage cost of any tuple can be
/// re-priced under a new day's tariff.
#[derive(Debug, Clone)]
pub struct ExperienceBuffer {
    powers: Vec<f64>,
    capacity: Option<usize>,
    transitions: VecDeque<Transition>,
}

impl ExperienceBuffer {
    pub fn new(powers: Vec<f64>, capacity: Option<usize>) -> Self {
        Self {
            powers,
            capacity,
            transitions: VecDeque::new(),
        }
    }

    pub fn push(&mut self, transition: Transition) {
        debug_assert_eq!(transition.u_phys.len(), self.powers.len());
        if let Some(cap) = self.capacity {
            while self.transitions.len() >= cap {
                self.transitions.pop_front();
            }
        }
        self.transitions.push_back(transition);
    }

    pub fn extend(&mut self, transitions: impl IntoIterator<Item = Transition>) {
        for t in transitions {
            self.push(t);
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.transitions.iter()
    }

    pub fn powers(&self) -> &[f64] {
        &self.powers
    }

    /// Executed power of one tuple, kW.
    pub fn phys_power_kw(&self, t: &Transition) -> f64 {
        t.u_phys
            .iter()
            .zip(&self.powers)
            .filter(|(&on, _)| on)
            .map(|(_, p)| p)
            .sum()
    }

    /// Columnar export, one row per transition: period and state scalars,
    /// the flattened grid, the action, the count of devices that physically
    /// ran, and the successor state.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let (n_bin, n_his) = match self.transitions.front() {
            Some(t) => (t.state.grid.n_bin(), t.state.grid.n_his()),
            None => (0, 0),
        };
        let mut header = vec![
            "period_index".to_string(),
            "hour".to_string(),
            "t_out".to_string(),
            "action_kw".to_string(),
            "u_phys_count".to_string(),
            "next_hour".to_string(),
            "next_t_out".to_string(),
        ];
        for k in 0..n_bin * n_his {
            header.push(format!("g{k}"));
        }
        for k in 0..n_bin * n_his {
            header.push(format!("ng{k}"));
        }
        w.write_record(&header)?;
        for t in &self.transitions {
            let mut row = vec![
                t.period_index.to_string(),
                t.state.hour.to_string(),
                t.state.t_out.to_string(),
                t.action_kw.to_string(),
                t.u_phys.iter().filter(|&&v| v).count().to_string(),
                t.next_state.hour.to_string(),
                t.next_state.t_out.to_string(),
            ];
            row.extend(t.state.grid.counts().iter().map(|c| c.to_string()));
            row.extend(t.next_state.grid.counts().iter().map(|c| c.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Rebuilds a buffer from [`ExperienceBuffer::save_csv`] output.
    /// Per-device attribution is not stored, so the executed set is
    /// reconstructed as the first `u_phys_count` devices; with homogeneous
    /// ratings every derived quantity is unchanged.
    pub fn load_csv(
        path: &Path,
        powers: Vec<f64>,
        capacity: Option<usize>,
        n_bin: usize,
        n_his: usize,
    ) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let cells = n_bin * n_his;
        let mut buffer = Self::new(powers, capacity);
        for record in r.records() {
            let record = record?;
            if record.len() != 7 + 2 * cells {
                return Err(Error::ShapeMismatch(format!(
                    "buffer row has {} columns, expected {}",
                    record.len(),
                    7 + 2 * cells
                )));
            }
            let get = |i: usize| -> Result<f64> {
                record[i]
                    .parse()
                    .map_err(|e| Error::InvalidConfig(format!("buffer column {i}: {e}")))
            };
            let period_index = get(0)? as usize;
            let hour = get(1)? as u32;
            let t_out = get(2)?;
            let action_kw = get(3)?;
            let count = get(4)? as usize;
            let next_hour = get(5)? as u32;
            let next_t_out = get(6)?;
            let parse_grid = |offset: usize| -> Result<StateTimeGrid> {
                let mut counts = Vec::with_capacity(cells);
                for k in 0..cells {
                    counts.push(record[offset + k].parse::<u32>().map_err(|e| {
                        Error::InvalidConfig(format!("buffer grid column {}: {e}", offset + k))
                    })?);
                }
                Ok(StateTimeGrid::from_raw(n_bin, n_his, counts))
            };
            let mut u_phys = vec![false; buffer.powers.len()];
            for flag in u_phys.iter_mut().take(count) {
                *flag = true;
            }
            buffer.push(Transition {
                state: AugmentedState {
                    hour,
                    grid: parse_grid(7)?,
                    t_out,
                },
                action_kw,
                next_state: AugmentedState {
                    hour: next_hour,
                    grid: parse_grid(7 + cells)?,
                    t_out: next_t_out,
                },
                u_phys,
                period_index,
            });
        }
        Ok(buffer)
    }
}

/// Regression backend for fitted Q-iteration.
pub trait Regressor {
    type State: Sync;
    type Action: Sync;

    fn predict(&self, state: &Self::State, action: &Self::Action) -> f64;

    /// Minimum predicted value over the action set; override when per-state
    /// work can be shared across actions.
    fn min_over_actions(&self, state: &Self::State, actions: &[Self::Action]) -> f64 {
        actions
            .iter()
            .map(|a| self.predict(state, a))
            .fold(f64::INFINITY, f64::min)
    }

    /// Regress `(state, action) -> target`; returns the training error.
    fn fit(
        &mut self,
        states: &[&Self::State],
        actions: &[&Self::Action],
        targets: &[f64],
        iteration: usize,
    ) -> Result<f64>;
}

/// One tuple as consumed by the iteration core: the successor state already
/// has the forecast substituted and the cost is already priced.
#[derive(Debug, Clone)]
pub struct CoreTransition<S, A> {
    pub state: S,
    pub action: A,
    pub next_state: S,
    pub cost: f64,
}

/// The iteration core: for N = 1..horizon, build targets
/// `c + min_u Q_{N-1}(x', u)` (the bootstrap term is dropped at N = 1, where
/// the previous estimate is identically zero) and regress. Returns the final
/// regression error.
pub fn fitted_q_core<R>(
    tuples: &[CoreTransition<R::State, R::Action>],
    actions: &[R::Action],
    regressor: &mut R,
    horizon: usize,
) -> Result<f64>
where
    R: Regressor + Sync,
{
    if tuples.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    if actions.is_empty() {
        return Err(Error::InvalidArgument("empty action set".into()));
    }
    let states: Vec<&R::State> = tuples.iter().map(|t| &t.state).collect();
    let action_refs: Vec<&R::Action> = tuples.iter().map(|t| &t.action).collect();
    let mut last_error = 0.0;
    for n in 1..=horizon {
        let targets: Vec<f64> = if n == 1 {
            tuples.iter().map(|t| t.cost).collect()
        } else {
            let shared: &R = regressor;
            tuples
                .par_iter()
                .map(|t| t.cost + shared.min_over_actions(&t.next_state, actions))
                .collect()
        };
        for (index, v) in targets.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteTarget {
                    index,
                    iteration: n,
                });
            }
        }
        last_error = regressor.fit(&states, &action_refs, &targets, n)?;
    }
    Ok(last_error)
}

/// Network-backed regressor over encoded states and normalized actions.
pub struct NetRegressor<'a> {
    pub net: &'a mut QNetwork,
    pub train_seed: u64,
}

impl Regressor for NetRegressor<'_> {
    type State = EncodedState;
    type Action = f64;

    fn predict(&self, state: &EncodedState, action: &f64) -> f64 {
        let scalars = self
            .net
            .compose_scalars(state.hour_norm, state.t_out_norm, *action);
        self.net.forward(&state.grid, &scalars)
    }

    fn min_over_actions(&self, state: &EncodedState, actions: &[f64]) -> f64 {
        let features = self.net.conv_features(&state.grid);
        actions
            .iter()
            .map(|&a| {
                let scalars = self
                    .net
                    .compose_scalars(state.hour_norm, state.t_out_norm, a);
                self.net.q_from_features(&features, &scalars)
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn fit(
        &mut self,
        states: &[&EncodedState],
        actions: &[&f64],
        targets: &[f64],
        iteration: usize,
    ) -> Result<f64> {
        let scalars: Vec<Vec<f64>> = states
            .iter()
            .zip(actions)
            .map(|(s, &&a)| self.net.compose_scalars(s.hour_norm, s.t_out_norm, a))
            .collect();
        let samples: Vec<Sample<'_>> = states
            .iter()
            .zip(&scalars)
            .map(|(s, sc)| Sample {
                grid: &s.grid,
                scalars: sc,
            })
            .collect();
        let seed = self
            .train_seed
            .wrapping_mul(0x9e3779b97f4a7c15)
            .wrapping_add(iteration as u64);
        self.net.train(&samples, targets, seed)
    }
}

/// Settings of one fitted-Q-iteration call.
#[derive(Debug, Clone, Copy)]
pub struct FqiOptions {
    /// Number of value-iteration sweeps; one optimization horizon.
    pub horizon: usize,
    /// Base seed for the per-iteration training shuffles.
    pub train_seed: u64,
}

/// Runs Q-iteration over the buffer for the coming day: tuple costs are
/// priced with the new day's tariff at the tuple's hour, and the observed
/// outside temperature in each successor state is replaced by the new day's
/// forecast for that hour.
pub fn fitted_q_iteration(
    buffer: &ExperienceBuffer,
    net: &mut QNetwork,
    encoder: &InputEncoder,
    actions: &ActionSet,
    day_prices: &[f64],
    day_forecast: &[f64],
    dt: f64,
    options: &FqiOptions,
) -> Result<f64> {
    if buffer.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let steps = encoder.steps_per_day as usize;
    if day_prices.len() != steps || day_forecast.len() != steps {
        return Err(Error::LengthMismatch(format!(
            "day series must have {steps} periods, got {} prices / {} forecasts",
            day_prices.len(),
            day_forecast.len()
        )));
    }
    let tuples: Vec<CoreTransition<EncodedState, f64>> = buffer
        .iter()
        .map(|t| {
            let cost = dt * day_prices[(t.state.hour - 1) as usize] * buffer.phys_power_kw(t);
            let next_hour = t.next_state.hour;
            let next_state = EncodedState {
                grid: encoder.encode_grid(&t.next_state.grid),
                hour_norm: encoder.hour_norm(next_hour),
                t_out_norm: encoder.t_out_norm(day_forecast[(next_hour - 1) as usize]),
            };
            CoreTransition {
                state: encoder.encode_state(&t.state),
                action: encoder.action_norm(t.action_kw),
                next_state,
                cost,
            }
        })
        .collect();
    let actions_norm: Vec<f64> = actions
        .levels()
        .iter()
        .map(|&a| encoder.action_norm(a))
        .collect();
    let mut regressor = NetRegressor {
        net,
        train_seed: options.train_seed,
    };
    fitted_q_core(&tuples, &actions_norm, &mut regressor, options.horizon)
}

/// Daily exploration probability: `min(1, d^-0.7)`.
pub fn exploration_probability(day: usize) -> f64 {
    exploration_probability_with(day, 0.7)
}

/// Harmonic decay with a configurable exponent.
pub fn exploration_probability_with(day: usize, exponent: f64) -> f64 {
    assert!(day >= 1, "days are 1-based");
    (day as f64).powf(-exponent).min(1.0)
}

/// Epsilon-greedy action selection over the action set, kW.
pub fn select_action(
    net: &QNetwork,
    encoder: &InputEncoder,
    state: &AugmentedState,
    actions: &ActionSet,
    epsilon: f64,
    rng: &mut impl Rng,
) -> f64 {
    debug_assert!((0.0..=1.0).contains(&epsilon));
    if rng.random::<f64>() < epsilon {
        return actions.levels()[rng.random_range(0..actions.len())];
    }
    let grid = encoder.encode_grid(&state.grid);
    let actions_norm: Vec<f64> = actions
        .levels()
        .iter()
        .map(|&a| encoder.action_norm(a))
        .collect();
    let (idx, _) = net.min_q(
        &grid,
        encoder.hour_norm(state.hour),
        encoder.t_out_norm(state.t_out),
        &actions_norm,
    );
    actions.levels()[idx]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::{ablation_grid, BinVector};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    /// Exact tabular regressor over a tiny discrete MDP.
    #[derive(Default)]
    struct Tabular {
        table: HashMap<(usize, usize), f64>,
        /// Targets seen at each iteration, for invariant checks.
        history: Vec<Vec<f64>>,
    }

    impl Regressor for Tabular {
        type State = usize;
        type Action = usize;

        fn predict(&self, s: &usize, a: &usize) -> f64 {
            *self.table.get(&(*s, *a)).unwrap_or(&0.0)
        }

        fn fit(
            &mut self,
            states: &[&usize],
            actions: &[&usize],
            targets: &[f64],
            _iteration: usize,
        ) -> Result<f64> {
            for ((s, a), t) in states.iter().zip(actions).zip(targets) {
                self.table.insert((**s, **a), *t);
            }
            self.history.push(targets.to_vec());
            Ok(0.0)
        }
    }

    /// Deterministic 2-state/2-action MDP: next = s xor a.
    fn toy_tuples(costs: &[[f64; 2]; 2]) -> Vec<CoreTransition<usize, usize>> {
        let mut tuples = Vec::new();
        for s in 0..2 {
            for a in 0..2 {
                tuples.push(CoreTransition {
                    state: s,
                    action: a,
                    next_state: s ^ a,
                    cost: costs[s][a],
                });
            }
        }
        tuples
    }

    fn value_iteration(costs: &[[f64; 2]; 2], n: usize) -> [[f64; 2]; 2] {
        let mut q = [[0.0f64; 2]; 2];
        for _ in 0..n {
            let mut next = [[0.0f64; 2]; 2];
            for s in 0..2 {
                for a in 0..2 {
                    let ns = s ^ a;
                    next[s][a] = costs[s][a] + q[ns][0].min(q[ns][1]);
                }
            }
            q = next;
        }
        q
    }

    #[test]
    fn core_matches_value_iteration_exactly() {
        let costs = [[1.0, 0.25], [0.5, 2.0]];
        let tuples = toy_tuples(&costs);
        for horizon in 1..=24 {
            let mut reg = Tabular::default();
            fitted_q_core(&tuples, &[0, 1], &mut reg, horizon).unwrap();
            let expect = value_iteration(&costs, horizon);
            for s in 0..2 {
                for a in 0..2 {
                    assert_eq!(
                        reg.predict(&s, &a),
                        expect[s][a],
                        "N={horizon} s={s} a={a}"
                    );
                }
            }
        }
    }

    #[test]
    fn first_iteration_targets_equal_costs() {
        let costs = [[1.0, 0.25], [0.5, 2.0]];
        let tuples = toy_tuples(&costs);
        let mut reg = Tabular::default();
        fitted_q_core(&tuples, &[0, 1], &mut reg, 3).unwrap();
        assert_eq!(reg.history[0], vec![1.0, 0.25, 0.5, 2.0]);
    }

    #[test]
    fn targets_bounded_and_monotone_for_nonnegative_costs() {
        let costs = [[0.3, 0.0], [0.9, 0.45]];
        let c_max: f64 = 0.9;
        let tuples = toy_tuples(&costs);
        let mut reg = Tabular::default();
        fitted_q_core(&tuples, &[0, 1], &mut reg, 24).unwrap();
        for (n, targets) in reg.history.iter().enumerate() {
            for &t in targets {
                assert!(t >= 0.0 && t <= (n + 1) as f64 * c_max, "N={} t={t}", n + 1);
            }
        }
        for w in reg.history.windows(2) {
            for (a, b) in w[0].iter().zip(&w[1]) {
                assert!(b >= a, "targets decreased: {a} -> {b}");
            }
        }
    }

    #[test]
    fn empty_buffer_is_rejected() {
        let tuples: Vec<CoreTransition<usize, usize>> = Vec::new();
        let mut reg = Tabular::default();
        assert!(matches!(
            fitted_q_core(&tuples, &[0, 1], &mut reg, 4),
            Err(Error::EmptyBuffer)
        ));
    }

    #[test]
    fn non_finite_targets_are_rejected() {
        let costs = [[f64::NAN, 0.25], [0.5, 2.0]];
        let tuples = toy_tuples(&costs);
        let mut reg = Tabular::default();
        assert!(matches!(
            fitted_q_core(&tuples, &[0, 1], &mut reg, 2),
            Err(Error::NonFiniteTarget { .. })
        ));
    }

    #[test]
    fn exploration_probability_values() {
        assert_eq!(exploration_probability(1), 1.0);
        assert_relative_eq!(exploration_probability(2), 0.61557, epsilon = 1e-5);
        assert_relative_eq!(exploration_probability(32), 0.08839, epsilon = 1e-5);
        assert!(exploration_probability(1000) < 0.01);
    }

    #[test]
    fn action_set_construction() {
        let a = ActionSet::equidistant(11, 50.0).unwrap();
        assert_eq!(a.len(), 11);
        assert_eq!(a.levels()[0], 0.0);
        assert_eq!(a.levels()[10], 50.0);
        assert_relative_eq!(a.levels()[1], 5.0);
        assert!(ActionSet::new(vec![]).is_err());
        assert!(ActionSet::new(vec![1.0, 2.0]).is_err());
        assert!(ActionSet::new(vec![0.0, 2.0, 2.0]).is_err());
    }

    fn tiny_net_cfg() -> crate::neuralnet::QNetworkConfig {
        crate::neuralnet::QNetworkConfig {
            grid_h: 2,
            grid_w: 2,
            conv1_filters: 1,
            conv1_kernel: 1,
            conv2_filters: 1,
            conv2_kernel: 1,
            conv_hidden: 2,
            scalar_hidden: 2,
            merge_hidden: 2,
            ..Default::default()
        }
    }

    fn dummy_state(hour: u32) -> AugmentedState {
        let b = BinVector { counts: vec![3, 1] };
        AugmentedState {
            hour,
            grid: ablation_grid(&b, 2),
            t_out: 5.0,
        }
    }

    #[test]
    fn uniform_exploration_is_uniform() {
        let net = QNetwork::zeroed(tiny_net_cfg()).unwrap();
        let encoder = InputEncoder::new(4, 2.0);
        let actions = ActionSet::equidistant(11, 2.0).unwrap();
        let state = dummy_state(3);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let draws = 10_000;
        let mut counts = vec![0usize; actions.len()];
        for _ in 0..draws {
            let a = select_action(&net, &encoder, &state, &actions, 1.0, &mut rng);
            let idx = actions
                .levels()
                .iter()
                .position(|&l| l == a)
                .expect("action from the set");
            counts[idx] += 1;
        }
        // Chi-square against uniform over 11 levels: 10 dof, 1% critical 23.2.
        let expected = draws as f64 / actions.len() as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 23.2, "chi-square {chi2}");
        // And per-level three-sigma band.
        let p = 1.0 / actions.len() as f64;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts {
            assert!((c as f64 - expected).abs() <= 3.0 * sigma, "count {c}");
        }
    }

    #[test]
    fn greedy_zero_net_picks_lowest_level() {
        let net = QNetwork::zeroed(tiny_net_cfg()).unwrap();
        let encoder = InputEncoder::new(4, 2.0);
        let actions = ActionSet::equidistant(5, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = select_action(&net, &encoder, &dummy_state(1), &actions, 0.0, &mut rng);
        assert_eq!(a, 0.0);
    }

    #[test]
    fn action_sequence_is_reproducible() {
        let net = QNetwork::new(tiny_net_cfg(), 5).unwrap();
        let encoder = InputEncoder::new(4, 2.0);
        let actions = ActionSet::equidistant(5, 2.0).unwrap();
        let state = dummy_state(7);
        let seq = |seed: u64| -> Vec<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| select_action(&net, &encoder, &state, &actions, 0.4, &mut rng))
                .collect()
        };
        assert_eq!(seq(9), seq(9));
        assert_ne!(seq(9), seq(10));
    }
}
