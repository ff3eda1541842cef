//! The physical side of the closed loop: observes the cluster into an
//! augmented state, dispatches the aggregate action through the auction and
//! steps the thermal simulation one control period at a time.

use rand::Rng;

use super::{select_action, ActionSet, Transition};
use crate::aggregation::{ablation_grid, bin_cluster, AugmentedState, HistoryRing, SupportPoints};
use crate::dispatch::{bids_from_cluster, clear, dispatch};
use crate::error::{Error, Result};
use crate::neuralnet::{InputEncoder, QNetwork};
use crate::sim::{stage_cost, step_cluster, GainProcess, TclParameters, TclState};

/// How the state-time grid is assembled each period.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HistoryMode {
    /// Stack the true trailing histograms.
    Full,
    /// Ablation: copy the newest histogram across all columns, discarding
    /// the history while keeping the input shape.
    CopyLast,
}

/// Simulated cluster plus the aggregation state owned by the control loop.
#[derive(Debug, Clone)]
pub struct ClusterEnv {
    params: Vec<TclParameters>,
    states: Vec<TclState>,
    support: SupportPoints,
    ring: HistoryRing,
    n_his: usize,
    gains: GainProcess,
    dt: f64,
    substeps: usize,
    steps_per_day: usize,
    mode: HistoryMode,
    period: usize,
    current: Option<(AugmentedState, f64)>,
}

impl ClusterEnv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: Vec<TclParameters>,
        initial: TclState,
        n_bin: usize,
        n_his: usize,
        gains: GainProcess,
        dt: f64,
        substeps: usize,
        steps_per_day: usize,
        mode: HistoryMode,
    ) -> Result<Self> {
        if params.is_empty() {
            return Err(Error::EmptyCluster);
        }
        if dt <= 0.0 || substeps == 0 || steps_per_day == 0 {
            return Err(Error::InvalidArgument(
                "dt, substeps and steps_per_day must be positive".into(),
            ));
        }
        let states = vec![initial; params.len()];
        Ok(Self {
            params,
            states,
            support: SupportPoints::new(n_bin)?,
            ring: HistoryRing::new(n_his)?,
            n_his,
            gains,
            dt,
            substeps,
            steps_per_day,
            mode,
            period: 0,
            current: None,
        })
    }

    pub fn n_devices(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[TclParameters] {
        &self.params
    }

    pub fn states(&self) -> &[TclState] {
        &self.states
    }

    pub fn period(&self) -> usize {
        self.period
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn total_power_kw(&self) -> f64 {
        self.params.iter().map(|p| p.power_kw).sum()
    }

    pub fn current_observation(&self) -> Option<&AugmentedState> {
        self.current.as_ref().map(|(s, _)| s)
    }

    /// Hour of day of the current period, in `1..=steps_per_day`.
    pub fn hour(&self) -> u32 {
        (self.period % self.steps_per_day) as u32 + 1
    }

    /// Bins the cluster, advances the history and assembles the state for
    /// the current period. Must alternate with [`ClusterEnv::apply`].
    pub fn observe(&mut self, t_out: f64) -> Result<AugmentedState> {
        if self.current.is_some() {
            return Err(Error::InvalidArgument(
                "period already observed; apply an action first".into(),
            ));
        }
        let t_airs: Vec<f64> = self.states.iter().map(|s| s.t_air).collect();
        let b = bin_cluster(&t_airs, &self.params, &self.support);
        let grid = match self.mode {
            HistoryMode::Full => self.ring.push(b),
            HistoryMode::CopyLast => {
                self.ring.push(b.clone());
                ablation_grid(&b, self.n_his)
            }
        };
        let state = AugmentedState {
            hour: self.hour(),
            grid,
            t_out,
        };
        self.current = Some((state.clone(), t_out));
        Ok(state)
    }

    /// Dispatches the aggregate request over the cluster, applies the backup
    /// filter and integrates one control period.
    pub fn apply(&mut self, u_target_kw: f64, price: f64) -> Result<PeriodOutcome> {
        let (_, t_out) = self.current.take().ok_or_else(|| {
            Error::InvalidArgument("apply called before observing the period".into())
        })?;
        let t_airs: Vec<f64> = self.states.iter().map(|s| s.t_air).collect();
        let bids = bids_from_cluster(&t_airs, &self.params);
        let p_star = clear(&bids, u_target_kw.max(0.0));
        let u_requested = dispatch(&bids, p_star);
        let q = self.gains.sample_all(self.period, self.params.len());
        let out = step_cluster(
            &mut self.states,
            &self.params,
            &u_requested,
            t_out,
            self.dt,
            self.substeps,
            &q,
        )?;
        let cost = stage_cost(&out.u_phys, &self.params, price, self.dt);
        self.period += 1;
        Ok(PeriodOutcome {
            u_phys: out.u_phys,
            energy_kwh: out.energy_kwh,
            power_kw: out.energy_kwh / self.dt,
            cost,
        })
    }
}

/// Result of one control period.
#[derive(Debug, Clone)]
pub struct PeriodOutcome {
    pub u_phys: Vec<bool>,
    pub energy_kwh: f64,
    pub power_kw: f64,
    pub cost: f64,
}

/// Per-period log row of a day.
#[derive(Debug, Clone)]
pub struct PeriodRecord {
    pub period_index: usize,
    pub hour: u32,
    pub price: f64,
    pub action_kw: f64,
    pub power_kw: f64,
    pub cost: f64,
}

/// One simulated day.
#[derive(Debug, Clone)]
pub struct DayRecord {
    pub transitions: Vec<Transition>,
    pub cost: f64,
    pub periods: Vec<PeriodRecord>,
}

/// Runs one day of closed-loop control: observe, select with epsilon-greedy,
/// dispatch, step, record. `outside` must hold one more period than `prices`
/// so the final successor state can be observed.
#[allow(clippy::too_many_arguments)]
pub fn run_day(
    env: &mut ClusterEnv,
    net: &QNetwork,
    encoder: &InputEncoder,
    actions: &ActionSet,
    prices: &[f64],
    outside: &[f64],
    epsilon: f64,
    rng: &mut impl Rng,
) -> Result<DayRecord> {
    let steps = prices.len();
    if outside.len() != steps + 1 {
        return Err(Error::LengthMismatch(format!(
            "outside needs {} periods (one past the horizon), got {}",
            steps + 1,
            outside.len()
        )));
    }
    let mut state = match env.current_observation() {
        Some(s) => s.clone(),
        None => env.observe(outside[0])?,
    };
    let mut transitions = Vec::with_capacity(steps);
    let mut periods = Vec::with_capacity(steps);
    let mut cost = 0.0;
    for k in 0..steps {
        let period_index = env.period();
        let action_kw = select_action(net, encoder, &state, actions, epsilon, rng);
        let out = env.apply(action_kw, prices[k])?;
        let next_state = env.observe(outside[k + 1])?;
        debug_assert_eq!(
            next_state.hour,
            state.hour % env.steps_per_day as u32 + 1,
            "hour must advance cyclically"
        );
        cost += out.cost;
        periods.push(PeriodRecord {
            period_index,
            hour: state.hour,
            price: prices[k],
            action_kw,
            power_kw: out.power_kw,
            cost: out.cost,
        });
        transitions.push(Transition {
            state,
            action_kw,
            next_state: next_state.clone(),
            u_phys: out.u_phys,
            period_index,
        });
        state = next_state;
    }
    Ok(DayRecord {
        transitions,
        cost,
        periods,
    })
}
