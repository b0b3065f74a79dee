//! Episodic interaction with an RMMDP and the state augmentation that
//! earmarks state-action pairs for joint reward samples.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{sort_pairs_stable, MomentKey, Pair, RewardSupport, Rmmdp, Step, Trajectory};
use crate::policy::Policy;

/// Black-box episodic environment. Nothing here exposes the latent context.
pub trait EpisodicEnv {
    fn num_states(&self) -> usize;
    fn num_actions(&self) -> usize;
    fn horizon(&self) -> usize;
    fn support_size(&self) -> usize;

    /// Reward values; rewards are reported by index into this support.
    fn support(&self) -> RewardSupport;

    /// Starts a new episode and returns the initial state.
    fn reset(&mut self) -> usize;

    /// Plays `action`; returns `(reward index, next state)`.
    fn step(&mut self, action: usize) -> (usize, usize);
}

/// Simulator that draws a latent context once per episode.
pub struct RmmdpEnv<'a, R> {
    model: &'a Rmmdp,
    rng: R,
    latent: usize,
    state: usize,
}

fn draw<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

impl<'a, R: Rng> RmmdpEnv<'a, R> {
    pub fn new(model: &'a Rmmdp, rng: R) -> Self {
        RmmdpEnv {
            model,
            rng,
            latent: 0,
            state: 0,
        }
    }

    /// Context of the current episode. Diagnostics only.
    pub fn latent(&self) -> usize {
        self.latent
    }

    pub fn rng_mut(&mut self) -> &mut R {
        &mut self.rng
    }
}

impl<R: Rng> EpisodicEnv for RmmdpEnv<'_, R> {
    fn num_states(&self) -> usize {
        self.model.num_states()
    }

    fn num_actions(&self) -> usize {
        self.model.num_actions()
    }

    fn horizon(&self) -> usize {
        self.model.horizon()
    }

    fn support_size(&self) -> usize {
        self.model.support_size()
    }

    fn support(&self) -> RewardSupport {
        self.model.support().clone()
    }

    fn reset(&mut self) -> usize {
        self.latent = draw(&mut self.rng, self.model.weights());
        self.state = draw(&mut self.rng, self.model.init());
        self.state
    }

    fn step(&mut self, action: usize) -> (usize, usize) {
        let row = self.model.reward_row(self.latent, self.state, action);
        let reward = draw(&mut self.rng, row);
        let next = draw(&mut self.rng, self.model.transition_row(self.state, action));
        self.state = next;
        (reward, next)
    }
}

/// Flag of an augmented action: skip, include the current pair, or include
/// it and close the collection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mark {
    Skip,
    Include,
    Commit,
}

impl Mark {
    /// Tie-breaking order `{0, 1, -1}`.
    pub const ALL: [Mark; 3] = [Mark::Skip, Mark::Include, Mark::Commit];

    pub fn as_i8(self) -> i8 {
        match self {
            Mark::Skip => 0,
            Mark::Include => 1,
            Mark::Commit => -1,
        }
    }

    pub fn from_i8(b: i8) -> Option<Mark> {
        match b {
            0 => Some(Mark::Skip),
            1 => Some(Mark::Include),
            -1 => Some(Mark::Commit),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AugmentedAction {
    pub action: usize,
    pub mark: Mark,
}

/// State `(i, v, s)` of the augmented MDP. `index` is 1-based; `index = d+1`
/// means the collection has been closed.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AugmentedState {
    pub index: usize,
    pub slots: Vec<Option<Pair>>,
    pub state: usize,
}

impl AugmentedState {
    pub fn initial(degree: usize, state: usize) -> Self {
        AugmentedState {
            index: 1,
            slots: vec![None; degree],
            state,
        }
    }

    pub fn degree(&self) -> usize {
        self.slots.len()
    }

    pub fn is_closed(&self) -> bool {
        self.index > self.degree()
    }

    /// Filled slots `v_1 … v_{i-1}` (all of them once closed).
    pub fn filled(&self) -> Vec<Pair> {
        self.slots.iter().flatten().copied().collect()
    }
}

/// Deterministic augmentation rule. Once closed (`i = d+1`) every mark is a
/// no-op and only the base state moves.
pub fn augmented_step(cur: &AugmentedState, act: AugmentedAction, next_base: usize) -> AugmentedState {
    let d = cur.degree();
    let mut next = AugmentedState {
        index: cur.index,
        slots: cur.slots.clone(),
        state: next_base,
    };
    if cur.index <= d {
        if act.mark != Mark::Skip {
            next.slots[cur.index - 1] = Some(Pair::new(cur.state, act.action));
        }
        next.index = match act.mark {
            Mark::Commit => d + 1,
            Mark::Include => cur.index + 1,
            Mark::Skip => cur.index,
        };
    }
    next
}

/// Joint reward sample collected during one episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Committed {
    /// Pairs sorted into key order; ties keep their time order.
    pub key: MomentKey,
    /// Reward indices permuted alongside the pairs.
    pub rewards: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeRecord {
    pub trajectory: Trajectory,
    pub committed: Option<Committed>,
    /// State reached after the last step.
    pub final_state: usize,
    /// Augmented index after the last step (`None` for plain episodes).
    pub final_index: Option<usize>,
    /// Time steps whose pair entered the collection.
    pub marked_steps: Vec<usize>,
}

/// Runs one episode, choosing augmented actions with `choose(t, state)`
/// (`t` is 0-based). The collected sample is returned only at episode end.
pub fn run_augmented_episode<E, F>(env: &mut E, degree: usize, mut choose: F) -> EpisodeRecord
where
    E: EpisodicEnv + ?Sized,
    F: FnMut(usize, &AugmentedState) -> AugmentedAction,
{
    let horizon = env.horizon();
    let s0 = env.reset();
    let mut aug = AugmentedState::initial(degree, s0);
    let mut steps = Vec::with_capacity(horizon);
    let mut collected = Vec::with_capacity(degree);
    let mut marked_steps = Vec::new();
    let mut pending: Option<(Vec<Pair>, Vec<usize>)> = None;
    for t in 0..horizon {
        let act = choose(t, &aug);
        let s = aug.state;
        let (reward, next_state) = env.step(act.action);
        let active = aug.index <= degree;
        if active && act.mark != Mark::Skip {
            collected.push(reward);
            marked_steps.push(t);
        }
        let next = augmented_step(&aug, act, next_state);
        if active && next.is_closed() {
            let pairs = next.slots[..aug.index].iter().map(|p| p.expect("filled")).collect();
            pending = Some((pairs, collected[..aug.index].to_vec()));
        }
        steps.push(Step {
            state: s,
            action: act.action,
            reward,
        });
        aug = next;
    }
    let committed = if aug.is_closed() {
        pending.map(|(pairs, z)| {
            let (key, rewards) = sort_pairs_stable(&pairs, &z);
            Committed { key, rewards }
        })
    } else {
        None
    };
    EpisodeRecord {
        trajectory: Trajectory::new(steps),
        committed,
        final_state: aug.state,
        final_index: Some(aug.index),
        marked_steps,
    }
}

/// Samples one episode under a plain history-dependent policy. The latent
/// context is recorded on the trajectory for diagnostics.
pub fn sample_episode<R: Rng>(model: &Rmmdp, policy: &dyn Policy, rng: &mut R) -> EpisodeRecord {
    let mut env = RmmdpEnv::new(model, rng);
    let s0 = env.reset();
    let latent = env.latent();
    let mut state = s0;
    let mut steps: Vec<Step> = Vec::with_capacity(model.horizon());
    for _ in 0..model.horizon() {
        let u: f64 = env.rng_mut().random();
        let action = policy.sample(&steps, state, model.num_actions(), u);
        let (reward, next) = env.step(action);
        steps.push(Step {
            state,
            action,
            reward,
        });
        state = next;
    }
    EpisodeRecord {
        trajectory: Trajectory {
            steps,
            latent: Some(latent),
        },
        committed: None,
        final_state: state,
        final_index: None,
        marked_steps: Vec::new(),
    }
}

/// One line of the trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLogLine {
    pub seed: u64,
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<usize>,
    pub committed: Option<CommittedLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommittedLog {
    pub key: String,
    pub z: Vec<usize>,
}

impl EpisodeLogLine {
    pub fn new(seed: u64, rec: &EpisodeRecord) -> Self {
        let steps = &rec.trajectory.steps;
        EpisodeLogLine {
            seed,
            states: steps.iter().map(|s| s.state).collect(),
            actions: steps.iter().map(|s| s.action).collect(),
            rewards: steps.iter().map(|s| s.reward).collect(),
            committed: rec.committed.as_ref().map(|c| CommittedLog {
                key: c.key.to_string(),
                z: c.rewards.clone(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::example_e1;
    use crate::policy::FixedActions;
    use crate::rng::seeded;

    fn aug(index: usize, slots: Vec<Option<Pair>>, state: usize) -> AugmentedState {
        AugmentedState { index, slots, state }
    }

    #[test]
    fn commit_from_first_slot() {
        let cur = AugmentedState::initial(3, 2);
        let next = augmented_step(&cur, AugmentedAction { action: 1, mark: Mark::Commit }, 0);
        assert_eq!(next, aug(4, vec![Some(Pair::new(2, 1)), None, None], 0));
    }

    #[test]
    fn skip_keeps_slots() {
        let slots = vec![Some(Pair::new(0, 0)), None, None];
        let cur = aug(2, slots.clone(), 1);
        let next = augmented_step(&cur, AugmentedAction { action: 0, mark: Mark::Skip }, 2);
        assert_eq!(next, aug(2, slots, 2));
    }

    #[test]
    fn include_at_last_slot_closes() {
        let cur = aug(2, vec![Some(Pair::new(0, 0)), None], 1);
        let next = augmented_step(&cur, AugmentedAction { action: 1, mark: Mark::Include }, 0);
        assert_eq!(next.index, 3);
        assert_eq!(next.slots[1], Some(Pair::new(1, 1)));
    }

    #[test]
    fn closed_state_ignores_marks() {
        let cur = aug(3, vec![Some(Pair::new(0, 0)), Some(Pair::new(0, 1))], 0);
        for mark in Mark::ALL {
            let next = augmented_step(&cur, AugmentedAction { action: 1, mark }, 0);
            assert_eq!(next.slots, cur.slots);
            assert_eq!(next.index, 3);
        }
    }

    #[test]
    fn deterministic_model_gives_unique_trajectory() {
        let e1 = example_e1(3);
        let det = e1.with_latent(vec![1.0], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        for seed in 0..20 {
            let rec = sample_episode(&det, &FixedActions::new(vec![0, 1, 0]), &mut seeded(seed));
            assert_eq!(rec.trajectory.rewards(), vec![1, 0, 1]);
        }
    }

    #[test]
    fn replay_is_deterministic() {
        let e1 = example_e1(4);
        let p = FixedActions::constant(0, 4);
        let a = sample_episode(&e1, &p, &mut seeded(99));
        let b = sample_episode(&e1, &p, &mut seeded(99));
        assert_eq!(a, b);
    }

    #[test]
    fn no_commit_without_closing() {
        let e1 = example_e1(2);
        let mut env = RmmdpEnv::new(&e1, seeded(1));
        let rec = run_augmented_episode(&mut env, 3, |_, _| AugmentedAction {
            action: 0,
            mark: Mark::Include,
        });
        assert_eq!(rec.final_index, Some(3));
        assert!(rec.committed.is_none());
    }
}
