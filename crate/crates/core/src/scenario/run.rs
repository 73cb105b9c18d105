use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::channel::{ChannelView, Flag, ServerNotice};
use crate::desync::{
    boundary_links, detect_boundary, detect_boundary_blind, is_synced, one_user_desync,
    two_user_desync, BlindDetection, DesyncError, DesyncPlan, Detection, Injection,
};
use crate::engine::{Config, World};
use crate::splitjoin::{netjoin, netjoin_link, netsplit, SplitRecord};
use crate::topology::{Link, ServerId, Ticks};
use crate::trace::TraceRecord;

use super::{
    Action, Assertion, Check, ScalarField, Scenario, ScenarioError, Servers, SetField, SetOp, Timed,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum DetectOutcome {
    Edge(Link),
    Foreign(ServerId),
    Synced,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AssertionResult {
    pub assertion: String,
    pub passed: bool,
    pub expected: String,
    pub actual: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub name: Option<String>,
    pub seed: u64,
    pub results: Vec<AssertionResult>,
    pub quiescent_at: Ticks,
    pub dump: serde_json::Value,
    pub trace: Vec<TraceRecord>,
    pub notices: Vec<ServerNotice>,
    pub detections: Vec<DetectOutcome>,
    pub injections: Vec<Injection>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &AssertionResult> {
        self.results.iter().filter(|r| !r.passed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}

pub fn build_world(s: &Scenario) -> Result<World, ScenarioError> {
    let mut config = Config {
        seed: s.seed,
        jitter: s.jitter,
        ps_conflict_fixed: s.ps_conflict_fixed,
        ..Config::default()
    };
    if let Some(m) = s.max_ticks {
        config.max_ticks = m;
    }
    let mut world = World::new(s.topology()?, config);
    for ch in &s.channels {
        world.install_channel(ch.clone())?;
    }
    Ok(world)
}

pub fn run_scenario(s: &Scenario) -> Result<RunReport, ScenarioError> {
    run_observed(s, |_, _| {}).map(|(_, report)| report)
}

enum Item<'a> {
    Act(&'a Timed),
    Check(usize, &'a Assertion),
}

/// Runs a scenario, calling `observe` before each action and once more
/// (with `None`) at quiescence. Returns the final world with the report.
pub fn run_observed(
    s: &Scenario,
    mut observe: impl FnMut(&World, Option<&Timed>),
) -> Result<(World, RunReport), ScenarioError> {
    let mut world = build_world(s)?;
    let mut timeline: Vec<(Ticks, u8, usize, Item<'_>)> = Vec::new();
    for (i, t) in s.actions.iter().enumerate() {
        timeline.push((t.at, 0, i, Item::Act(t)));
    }
    let mut finals = Vec::new();
    for (i, a) in s.assertions.iter().enumerate() {
        match a.at {
            Some(at) => timeline.push((at, 1, i, Item::Check(i, a))),
            None => finals.push((i, a)),
        }
    }
    timeline.sort_by_key(|(t, k, i, _)| (*t, *k, *i));

    let mut results: Vec<Option<AssertionResult>> = vec![None; s.assertions.len()];
    let mut records: BTreeMap<Link, SplitRecord> = BTreeMap::new();
    let mut detections = Vec::new();
    let mut injections = Vec::new();
    for (_, _, _, item) in timeline {
        match item {
            Item::Act(t) => {
                observe(&world, Some(t));
                execute(
                    &mut world,
                    t,
                    &mut records,
                    &mut detections,
                    &mut injections,
                )?;
            }
            Item::Check(i, a) => {
                world.run_through(a.at.expect("timed"));
                let now = world.now();
                results[i] = Some(evaluate(&world, &a.check, &detections, now));
            }
        }
    }
    let quiescent_at = world.run_until_quiescent()?;
    observe(&world, None);
    for (i, a) in finals {
        results[i] = Some(evaluate(&world, &a.check, &detections, quiescent_at));
    }
    let report = RunReport {
        name: s.name.clone(),
        seed: s.seed,
        results: results
            .into_iter()
            .map(|r| r.expect("every assertion evaluated"))
            .collect(),
        quiescent_at,
        dump: world.dump(),
        trace: world.trace().to_vec(),
        notices: world.notices().to_vec(),
        detections,
        injections,
    };
    Ok((world, report))
}

fn execute(
    world: &mut World,
    t: &Timed,
    records: &mut BTreeMap<Link, SplitRecord>,
    detections: &mut Vec<DetectOutcome>,
    injections: &mut Vec<Injection>,
) -> Result<(), ScenarioError> {
    world.advance_to(t.at)?;
    match &t.action {
        Action::Command(c) => {
            world.issue(t.at, c.clone())?;
        }
        Action::Split(link) => {
            let rec = netsplit(world, link, t.at)?;
            records.insert(link.clone(), rec);
        }
        Action::Rejoin(link) => match records.remove(link) {
            Some(rec) => netjoin(world, &rec, t.at)?,
            None => netjoin_link(world, link, t.at)?,
        },
        Action::DesyncOne {
            a,
            b,
            target,
            channel,
            how,
        } => {
            let plan = DesyncPlan::new(channel, a, b, target.clone(), *how);
            injections.push(one_user_desync(world, &plan)?);
        }
        Action::DesyncTwo {
            a,
            b,
            target,
            channel,
            how,
            meeting,
            skew,
        } => {
            let plan = DesyncPlan::new(channel, a, b, target.clone(), *how);
            injections.push(two_user_desync(world, &plan, *meeting, *skew)?);
        }
        Action::Detect {
            channel,
            prober,
            helper,
            blind,
        } => {
            let outcome = if *blind {
                match detect_boundary_blind(world, channel, prober, helper) {
                    Ok(BlindDetection::Foreign(s)) => DetectOutcome::Foreign(s),
                    Ok(BlindDetection::Synced) => DetectOutcome::Synced,
                    Err(DesyncError::ProbeInconclusive) => DetectOutcome::Inconclusive,
                    Err(e) => return Err(e.into()),
                }
            } else {
                match detect_boundary(world, channel, prober, helper) {
                    Ok(Detection::Boundary { edge, .. }) => DetectOutcome::Edge(edge),
                    Ok(Detection::Synced) => DetectOutcome::Synced,
                    Err(DesyncError::ProbeInconclusive) => DetectOutcome::Inconclusive,
                    Err(e) => return Err(e.into()),
                }
            };
            detections.push(outcome);
        }
    }
    Ok(())
}

fn selected(world: &World, servers: &Servers) -> Vec<ServerId> {
    match servers {
        Servers::All => world.topology().servers().to_vec(),
        Servers::List(l) => l.clone(),
    }
}

fn set_of(view: &ChannelView, field: SetField) -> BTreeSet<String> {
    let names = |s: &BTreeSet<crate::topology::ClientId>| s.iter().map(|c| c.to_string()).collect();
    match field {
        SetField::Members => names(&view.members),
        SetField::Ops => names(&view.ops),
        SetField::Voices => names(&view.voices),
        SetField::Bans => view.bans.clone(),
        SetField::Exceptions => view.exceptions.clone(),
    }
}

fn render_set(s: &BTreeSet<String>) -> String {
    format!("{{{}}}", s.iter().cloned().collect::<Vec<_>>().join(","))
}

fn scalar_of(view: &ChannelView, field: ScalarField) -> Option<String> {
    match field {
        ScalarField::Creator => view.creator.as_ref().map(|c| c.to_string()),
        ScalarField::Topic => view.topic.as_ref().map(|t| t.text.clone()),
        ScalarField::Key => view.key.clone(),
        ScalarField::Limit => view.limit.map(|l| l.to_string()),
        ScalarField::Flags => (!view.flags.is_empty()).then(|| view.flag_string()),
    }
}

fn normalize_flags(s: &str) -> String {
    let letters: BTreeSet<char> = s.trim_start_matches('+').chars().collect();
    let mut out = String::from("+");
    out.extend(
        Flag::ALL
            .iter()
            .map(|f| f.letter())
            .filter(|c| letters.contains(c)),
    );
    out
}

fn show(v: &Option<String>) -> String {
    v.clone().unwrap_or_else(|| "none".into())
}

fn result(check: &Check, passed: bool, expected: String, actual: String) -> AssertionResult {
    AssertionResult {
        assertion: check.to_string(),
        passed,
        expected,
        actual,
    }
}

/// Evaluates one check against the world as it stands.
fn evaluate(
    world: &World,
    check: &Check,
    detections: &[DetectOutcome],
    now: Ticks,
) -> AssertionResult {
    match check {
        Check::Set {
            field,
            servers,
            channel,
            op,
        } => {
            let mut ok = true;
            let mut actual = Vec::new();
            for s in selected(world, servers) {
                let set = set_of(&world.view_or_empty(&s, channel), *field);
                ok &= match op {
                    SetOp::Equals(want) => &set == want,
                    SetOp::Contains(n) => set.contains(n),
                    SetOp::Lacks(n) => !set.contains(n),
                };
                actual.push(format!("{s}={}", render_set(&set)));
            }
            let expected = match op {
                SetOp::Equals(want) => render_set(want),
                SetOp::Contains(n) => format!("contains {n}"),
                SetOp::Lacks(n) => format!("lacks {n}"),
            };
            result(check, ok, expected, actual.join(" "))
        }
        Check::Scalar {
            field,
            servers,
            channel,
            value,
        } => {
            let want = match field {
                ScalarField::Flags => value.as_deref().map(normalize_flags).filter(|f| f != "+"),
                _ => value.clone(),
            };
            let mut ok = true;
            let mut actual = Vec::new();
            for s in selected(world, servers) {
                let got = scalar_of(&world.view_or_empty(&s, channel), *field);
                ok &= got == want;
                actual.push(format!("{s}={}", show(&got)));
            }
            result(check, ok, show(&want), actual.join(" "))
        }
        Check::Boundary { channel, edges } => {
            let got = boundary_links(world, channel);
            let render = |e: &BTreeSet<Link>| {
                if e.is_empty() {
                    "none".to_string()
                } else {
                    e.iter()
                        .map(|l| l.to_string())
                        .collect::<Vec<_>>()
                        .join(",")
                }
            };
            result(check, &got == edges, render(edges), render(&got))
        }
        Check::Synced { channel, expect } => {
            let got = is_synced(world, channel);
            let word = |b: bool| if b { "synced" } else { "desynced" }.to_string();
            result(check, got == *expect, word(*expect), word(got))
        }
        Check::SameView {
            channel,
            left,
            right,
            equal,
        } => {
            let diff = world
                .view_or_empty(left, channel)
                .differences(&world.view_or_empty(right, channel));
            let actual = if diff.is_empty() {
                "equal".to_string()
            } else {
                format!("differ in {}", diff.join(","))
            };
            let expected = if *equal { "equal" } else { "different" }.to_string();
            result(check, diff.is_empty() == *equal, expected, actual)
        }
        Check::Notices {
            servers,
            kind,
            culprit,
            count,
        } => {
            let keep = |n: &&ServerNotice| {
                kind.is_none_or(|k| n.kind == k) && culprit.as_ref().is_none_or(|c| &n.culprit == c)
            };
            let got = match servers {
                Some(sel) => selected(world, sel)
                    .iter()
                    .map(|s| world.notice_log(s).iter().filter(keep).count())
                    .sum(),
                None => world.notices().iter().filter(keep).count(),
            };
            result(check, got == *count, count.to_string(), got.to_string())
        }
        Check::Trace { observer, lines } => {
            let got = world.trace_of(observer);
            let want: Vec<&str> = lines.iter().map(String::as_str).collect();
            let json = |v: &[&str]| serde_json::to_string(v).expect("strings serialize");
            result(check, got == want, json(&want), json(&got))
        }
        Check::TraceHas {
            observer,
            line,
            present,
        } => {
            let got = world.trace_of(observer).contains(&line.as_str());
            let word = |b: bool| if b { "present" } else { "absent" }.to_string();
            result(check, got == *present, word(*present), word(got))
        }
        Check::TraceCount {
            observer,
            since,
            count,
        } => {
            let got = world
                .trace()
                .iter()
                .filter(|r| &r.observer == observer && since.is_none_or(|t| r.tick >= t))
                .count();
            result(check, got == *count, count.to_string(), got.to_string())
        }
        Check::Order {
            observer,
            first,
            second,
        } => {
            let lines = world.trace_of(observer);
            let i = lines.iter().position(|l| l == first);
            let j = lines.iter().position(|l| l == second);
            let ok = matches!((i, j), (Some(i), Some(j)) if i < j);
            let actual = format!("positions {i:?} and {j:?}");
            result(check, ok, "first before second".into(), actual)
        }
        Check::Quiescent(t) => result(check, now == *t, t.to_string(), now.to_string()),
        Check::Detect(want) => {
            let got = detections.last();
            let actual = got.map_or("no detection".to_string(), |d| d.to_string());
            result(check, got == Some(want), want.to_string(), actual)
        }
        Check::Numeric {
            client,
            code,
            server,
        } => {
            let got: Vec<String> = world
                .numerics()
                .iter()
                .filter(|n| &n.client == client)
                .map(|n| format!("{}@{}", n.numeric.code, n.server))
                .collect();
            let ok = world.numerics().iter().any(|n| {
                &n.client == client
                    && n.numeric.code == *code
                    && server.as_ref().is_none_or(|s| &n.server == s)
            });
            let expected = match server {
                Some(s) => format!("{code}@{s}"),
                None => code.to_string(),
            };
            result(check, ok, expected, format!("[{}]", got.join(",")))
        }
        Check::Numerics { client, count } => {
            let got = world
                .numerics()
                .iter()
                .filter(|n| &n.client == client)
                .count();
            result(check, got == *count, count.to_string(), got.to_string())
        }
    }
}

/// Reruns `s` with fresh seeds until its desync action leaves the channel
/// desynchronised. Returns the number of attempts used.
pub fn attempt_until_desynced(s: &Scenario, max_attempts: u32) -> Result<u32, ScenarioError> {
    attempts_with_seed(s, max_attempts, s.seed)
}

/// As [`attempt_until_desynced`], drawing the per-attempt seeds from `seed`.
pub fn attempts_with_seed(
    s: &Scenario,
    max_attempts: u32,
    seed: u64,
) -> Result<u32, ScenarioError> {
    let channel = s
        .actions
        .iter()
        .find_map(|t| match &t.action {
            Action::DesyncOne { channel, .. } | Action::DesyncTwo { channel, .. } => {
                Some(channel.clone())
            }
            _ => None,
        })
        .ok_or(ScenarioError::NoDesyncAction)?;
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 1..=max_attempts {
        let mut sc = s.clone();
        sc.seed = seeds.gen();
        let (world, _) = run_observed(&sc, |_, _| {})?;
        if !is_synced(&world, &channel) {
            return Ok(attempt);
        }
    }
    Err(ScenarioError::MaxAttemptsExceeded(max_attempts))
}
