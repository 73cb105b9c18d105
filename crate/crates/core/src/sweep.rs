//! Batch experiments over many independent worlds: exhaustive placement
//! over small trees, randomized two-user and detection trials, the toggle
//! sweep, and the retry calibration. Every case builds its own world, so
//! the batches go through [`par::map`].

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::channel::{ChangeKind, ChannelView, Flag, ModeChange};
use crate::desync::{
    boundary_links, detect_boundary, one_user_desync, two_user_desync, Collide, DesyncError,
    DesyncPlan, Detection,
};
use crate::engine::{Config, World};
use crate::par::{self, Exec};
use crate::scenario::{attempts_with_seed, Scenario, ScenarioError};
use crate::topology::{Client, ClientId, Link, ServerId, Ticks, Topology};

pub const CHANNEL: &str = "#sweep";

fn names(n: usize) -> Vec<ServerId> {
    (0..n).map(|i| ServerId::new(format!("S{i}"))).collect()
}

/// Every labelled tree on 2 to `max_servers` servers, unit latency.
pub fn all_trees(max_servers: usize) -> Vec<Topology> {
    let mut out = Vec::new();
    for n in 2..=max_servers {
        let names = names(n);
        let len = n - 2;
        let total = n.pow(len as u32);
        for code in 0..total {
            let mut seq = Vec::with_capacity(len);
            let mut c = code;
            for _ in 0..len {
                seq.push(c % n);
                c /= n;
            }
            out.push(Topology::from_pruefer(&names, &seq, 1));
        }
    }
    out
}

/// A uniformly random labelled tree with latencies in `1..=max_latency`.
pub fn random_tree(rng: &mut impl Rng, servers: usize, max_latency: Ticks) -> Topology {
    let seq: Vec<usize> = (0..servers.saturating_sub(2))
        .map(|_| rng.gen_range(0..servers))
        .collect();
    Topology::from_pruefer(&names(servers), &seq, 1)
        .with_latencies(|_| rng.gen_range(1..=max_latency))
        .expect("relabelled latencies keep the tree")
}

/// A world on `tree` with `a` and `b` homed as given, both opped on a
/// synchronised channel.
pub fn pair_world(tree: &Topology, a_home: &ServerId, b_home: &ServerId, config: Config) -> World {
    let topo = tree
        .with_clients([
            Client::new("a", a_home.as_str()),
            Client::new("b", b_home.as_str()),
        ])
        .expect("homes come from the tree");
    let mut world = World::new(topo, config);
    let mut view = ChannelView::new(CHANNEL);
    view.members = BTreeSet::from([ClientId::from("a"), ClientId::from("b")]);
    view.ops = view.members.clone();
    world.install_channel(view).expect("fresh channel");
    world
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlacementCase {
    pub tree: usize,
    pub a_home: ServerId,
    pub b_home: ServerId,
    pub target: Link,
    pub how: Collide,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlacementOutcome {
    pub case: PlacementCase,
    pub landed: BTreeSet<Link>,
}

impl PlacementOutcome {
    pub fn exact(&self) -> bool {
        self.landed.len() == 1 && self.landed.contains(&self.case.target)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Summary<T> {
    pub cases: usize,
    pub failures: Vec<T>,
}

/// Every (tree, home of a, home of b, link on their path, collision kind).
pub fn placement_cases(trees: &[Topology]) -> Vec<PlacementCase> {
    let mut cases = Vec::new();
    for (i, t) in trees.iter().enumerate() {
        for ha in t.servers() {
            for hb in t.servers() {
                if ha == hb {
                    continue;
                }
                for target in t.path_links(ha, hb).expect("tree is connected") {
                    for how in [Collide::Deop, Collide::Kick] {
                        cases.push(PlacementCase {
                            tree: i,
                            a_home: ha.clone(),
                            b_home: hb.clone(),
                            target: target.clone(),
                            how,
                        });
                    }
                }
            }
        }
    }
    cases
}

pub fn run_placement(
    trees: &[Topology],
    case: &PlacementCase,
) -> Result<PlacementOutcome, DesyncError> {
    let mut world = pair_world(
        &trees[case.tree],
        &case.a_home,
        &case.b_home,
        Config::default(),
    );
    let plan = DesyncPlan::new(
        CHANNEL,
        &"a".into(),
        &"b".into(),
        case.target.clone(),
        case.how,
    );
    one_user_desync(&mut world, &plan)?;
    world.run_until_quiescent()?;
    Ok(PlacementOutcome {
        case: case.clone(),
        landed: boundary_links(&world, CHANNEL),
    })
}

/// One-user placement on every tree with up to `max_servers` servers.
pub fn placement_sweep(
    exec: Exec,
    max_servers: usize,
) -> Result<Summary<PlacementOutcome>, DesyncError> {
    let trees = all_trees(max_servers);
    let cases = placement_cases(&trees);
    let outcomes = par::map(exec, &cases, |c| run_placement(&trees, c));
    let mut failures = Vec::new();
    for o in outcomes {
        let o = o?;
        if !o.exact() {
            failures.push(o);
        }
    }
    Ok(Summary {
        cases: cases.len(),
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TwoUserTrial {
    pub links: Vec<(Link, Ticks)>,
    pub a_home: ServerId,
    pub b_home: ServerId,
    pub target: Link,
    pub one_user: BTreeSet<Link>,
    /// Landed edges for each skew in `-2..=2`.
    pub by_skew: Vec<(i64, BTreeSet<Link>)>,
    pub path: Vec<Link>,
}

impl TwoUserTrial {
    pub fn zero_skew_matches(&self) -> bool {
        self.by_skew
            .iter()
            .find(|(s, _)| *s == 0)
            .is_some_and(|(_, landed)| landed == &self.one_user)
    }

    pub fn stays_on_path(&self) -> bool {
        self.by_skew
            .iter()
            .all(|(_, landed)| landed.iter().all(|l| self.path.contains(l)))
    }
}

#[derive(Debug, Clone)]
struct TrialSpec {
    tree: Topology,
    a_home: ServerId,
    b_home: ServerId,
    target: Link,
    how: Collide,
}

fn random_specs(
    trials: usize,
    seed: u64,
    min_servers: usize,
    max_servers: usize,
) -> Vec<TrialSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials)
        .map(|_| {
            let n = rng.gen_range(min_servers..=max_servers);
            let tree = random_tree(&mut rng, n, 4);
            let mut homes = tree.servers().to_vec();
            homes.shuffle(&mut rng);
            let (a_home, b_home) = (homes[0].clone(), homes[1].clone());
            let path = tree
                .path_links(&a_home, &b_home)
                .expect("tree is connected");
            let target = path.choose(&mut rng).expect("distinct homes").clone();
            let how = if rng.gen() {
                Collide::Deop
            } else {
                Collide::Kick
            };
            TrialSpec {
                tree,
                a_home,
                b_home,
                target,
                how,
            }
        })
        .collect()
}

fn two_user_trial(spec: &TrialSpec) -> Result<TwoUserTrial, DesyncError> {
    let plan = DesyncPlan::new(
        CHANNEL,
        &"a".into(),
        &"b".into(),
        spec.target.clone(),
        spec.how,
    );
    let mut world = pair_world(&spec.tree, &spec.a_home, &spec.b_home, Config::default());
    one_user_desync(&mut world, &plan)?;
    world.run_until_quiescent()?;
    let one_user = boundary_links(&world, CHANNEL);
    let meeting = spec.tree.latency_diameter() + 3;
    let mut by_skew = Vec::new();
    for skew in -2..=2 {
        let mut world = pair_world(&spec.tree, &spec.a_home, &spec.b_home, Config::default());
        two_user_desync(&mut world, &plan, meeting, skew)?;
        world.run_until_quiescent()?;
        by_skew.push((skew, boundary_links(&world, CHANNEL)));
    }
    Ok(TwoUserTrial {
        path: spec.tree.path_links(&spec.a_home, &spec.b_home)?,
        links: spec.tree.links().collect(),
        a_home: spec.a_home.clone(),
        b_home: spec.b_home.clone(),
        target: spec.target.clone(),
        one_user,
        by_skew,
    })
}

/// Random trees of 2 to 6 servers with latencies 1 to 4.
pub fn two_user_trials(
    exec: Exec,
    trials: usize,
    seed: u64,
) -> Result<Vec<TwoUserTrial>, DesyncError> {
    let specs = random_specs(trials, seed, 2, 6);
    par::map(exec, &specs, two_user_trial).into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DetectionTrial {
    pub links: Vec<(Link, Ticks)>,
    pub oracle: BTreeSet<Link>,
    pub detected: Option<Link>,
    /// Outcome of probing an untouched copy of the same channel.
    pub undisturbed_synced: bool,
}

impl DetectionTrial {
    pub fn correct(&self) -> bool {
        self.undisturbed_synced
            && self.oracle.len() == 1
            && self
                .detected
                .as_ref()
                .is_some_and(|d| self.oracle.contains(d))
    }
}

// Deop only: after a kick desync neither side lists the other client, so
// the prober's message is never routed across the boundary.
fn detection_trial(spec: &TrialSpec) -> Result<DetectionTrial, DesyncError> {
    let (a, b) = (ClientId::from("a"), ClientId::from("b"));
    let plan = DesyncPlan::new(CHANNEL, &a, &b, spec.target.clone(), Collide::Deop);
    let mut world = pair_world(&spec.tree, &spec.a_home, &spec.b_home, Config::default());
    one_user_desync(&mut world, &plan)?;
    world.run_until_quiescent()?;
    let oracle = boundary_links(&world, CHANNEL);
    let detected = match detect_boundary(&mut world, CHANNEL, &a, &b)? {
        Detection::Boundary { edge, .. } => Some(edge),
        Detection::Synced => None,
    };
    let mut fresh = pair_world(&spec.tree, &spec.a_home, &spec.b_home, Config::default());
    let undisturbed_synced = matches!(
        detect_boundary(&mut fresh, CHANNEL, &a, &b),
        Ok(Detection::Synced)
    );
    Ok(DetectionTrial {
        links: spec.tree.links().collect(),
        oracle,
        detected,
        undisturbed_synced,
    })
}

/// Single-boundary worlds on random trees of 2 to 6 servers.
pub fn detection_trials(
    exec: Exec,
    trials: usize,
    seed: u64,
) -> Result<Vec<DetectionTrial>, DesyncError> {
    let specs = random_specs(trials, seed, 2, 6);
    par::map(exec, &specs, detection_trial)
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ToggleCase {
    pub flag: Flag,
    pub initially_set: bool,
    pub first: (ServerId, bool),
    pub second: (ServerId, bool),
    pub offset: Ticks,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ToggleOutcome {
    pub case: ToggleCase,
    /// Flag state on each server at quiescence.
    pub finals: Vec<bool>,
}

impl ToggleOutcome {
    pub fn converged(&self) -> bool {
        self.finals.windows(2).all(|w| w[0] == w[1])
    }
}

fn toggle_chain() -> Topology {
    let servers = ["C", "B", "A", "X", "Y", "Z"];
    let clients = servers
        .iter()
        .map(|s| Client::new(s.to_lowercase(), *s))
        .collect();
    Topology::chain(&servers, 1, clients).expect("chain")
}

/// Every pair of concurrent i/m/n/t changes from two different servers
/// on the 6-server chain, with the second fired 0 to diameter ticks later.
pub fn toggle_cases() -> Vec<ToggleCase> {
    let topo = toggle_chain();
    let servers = topo.servers().to_vec();
    let mut cases = Vec::new();
    for flag in [
        Flag::InviteOnly,
        Flag::Moderated,
        Flag::NoExternal,
        Flag::TopicControl,
    ] {
        for initially_set in [false, true] {
            for p in &servers {
                for q in &servers {
                    if p == q {
                        continue;
                    }
                    for (s1, s2) in [(true, true), (true, false), (false, true), (false, false)] {
                        for offset in 0..=topo.latency_diameter() {
                            cases.push(ToggleCase {
                                flag,
                                initially_set,
                                first: (p.clone(), s1),
                                second: (q.clone(), s2),
                                offset,
                            });
                        }
                    }
                }
            }
        }
    }
    cases
}

pub fn run_toggle(case: &ToggleCase) -> Result<ToggleOutcome, DesyncError> {
    let topo = toggle_chain();
    let mut world = World::new(topo.clone(), Config::default());
    let mut view = ChannelView::new(CHANNEL);
    view.members = topo.clients().map(|c| c.nick.clone()).collect();
    view.ops = view.members.clone();
    if case.initially_set {
        view.flags.insert(case.flag);
    }
    world.install_channel(view).expect("fresh channel");
    for ((server, set), at) in [(&case.first, 0), (&case.second, case.offset)] {
        let nick = ClientId::new(server.as_str().to_lowercase());
        let kind = ChangeKind::Flag {
            flag: case.flag,
            set: *set,
        };
        world.issue(at, ModeChange::by(&nick, CHANNEL, kind))?;
    }
    world.run_until_quiescent()?;
    let finals = topo
        .servers()
        .iter()
        .map(|s| world.view_or_empty(s, CHANNEL).has(case.flag))
        .collect();
    Ok(ToggleOutcome {
        case: case.clone(),
        finals,
    })
}

pub fn toggle_sweep(exec: Exec) -> Result<Summary<ToggleOutcome>, DesyncError> {
    let cases = toggle_cases();
    let mut failures = Vec::new();
    for o in par::map(exec, &cases, run_toggle) {
        let o = o?;
        if !o.converged() {
            failures.push(o);
        }
    }
    Ok(Summary {
        cases: cases.len(),
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AttemptStats {
    pub trials: usize,
    /// Attempts needed, mapped to how many trials needed that many.
    pub histogram: BTreeMap<u32, usize>,
    /// Trials that never desynchronised within the attempt budget.
    pub exhausted: usize,
    /// Median over all trials, counting exhausted ones as the budget + 1.
    pub median: u32,
}

/// Repeats the retry loop of `scenario` `trials` times with seeds drawn
/// from `seed`.
pub fn attempt_stats(
    exec: Exec,
    scenario: &Scenario,
    trials: usize,
    max_attempts: u32,
    seed: u64,
) -> Result<AttemptStats, ScenarioError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..trials).map(|_| rng.gen()).collect();
    let results = par::map(exec, &seeds, |s| {
        match attempts_with_seed(scenario, max_attempts, *s) {
            Ok(n) => Ok(n),
            Err(ScenarioError::MaxAttemptsExceeded(_)) => Ok(max_attempts + 1),
            Err(e) => Err(e),
        }
    });
    let mut counts = results.into_iter().collect::<Result<Vec<u32>, _>>()?;
    counts.sort_unstable();
    let mut histogram = BTreeMap::new();
    let mut exhausted = 0;
    for &c in &counts {
        if c > max_attempts {
            exhausted += 1;
        } else {
            *histogram.entry(c).or_insert(0) += 1;
        }
    }
    Ok(AttemptStats {
        trials,
        histogram,
        exhausted,
        median: counts.get(counts.len() / 2).copied().unwrap_or(0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_counts_follow_cayley() {
        assert_eq!(all_trees(2).len(), 1);
        assert_eq!(all_trees(4).len(), 1 + 3 + 16);
        assert!(all_trees(5)
            .iter()
            .all(|t| t.links().count() + 1 == t.servers().len()));
    }

    #[test]
    fn placement_on_small_trees_is_exact() {
        let s = placement_sweep(Exec::Sequential, 4).unwrap();
        assert!(s.cases > 0);
        assert!(s.failures.is_empty(), "{:?}", s.failures.first());
    }

    #[test]
    fn random_trees_have_bounded_latency() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_tree(&mut rng, 6, 4);
        assert!(t.links().all(|(_, l)| (1..=4).contains(&l)));
    }

    #[test]
    fn toggle_case_count() {
        assert_eq!(toggle_cases().len(), 4 * 2 * 30 * 4 * 6);
    }

    #[test]
    fn detection_trials_are_deterministic() {
        let a = detection_trials(Exec::Sequential, 5, 9).unwrap();
        let b = detection_trials(Exec::Parallel, 5, 9).unwrap();
        assert_eq!(a, b);
    }
}
