//! Netsplits and netjoins.
//!
//! A split drops the far side's clients from every view (the usual quit on
//! split) and leaves modes alone. A join makes each junction server burst
//! its channel state across the restored link: a JOIN per member carrying
//! the member's privileges, then every mode, key, limit, topic and list
//! entry it holds. The bursts cross in flight, so a value held differently
//! on both sides ends up swapped, exactly like two concurrent flowing
//! changes.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::channel::{Actor, ChangeKind, ChannelView, Flag, ListKind, ModeChange};
use crate::engine::{EngineError, World};
use crate::scenario::{run_observed, Action, RunReport, Scenario, ScenarioError};
use crate::topology::{ClientId, Link, ServerId, Ticks};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SplitError {
    #[error("unknown link {0}")]
    UnknownLink(Link),
    #[error("link {0} is already down")]
    LinkDown(Link),
    #[error("link {0} is still up")]
    EdgeStillPresent(Link),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SplitRecord {
    pub link: Link,
    pub time: Ticks,
    /// The two halves; `sides.0` holds the link's first endpoint.
    pub sides: (BTreeSet<ServerId>, BTreeSet<ServerId>),
}

fn halves(world: &World, link: &Link) -> (BTreeSet<ServerId>, BTreeSet<ServerId>) {
    let mut blocked = world.down_links().clone();
    blocked.insert(link.clone());
    let (x, y) = link.endpoints();
    (
        world.topology().reachable(x, &blocked),
        world.topology().reachable(y, &blocked),
    )
}

/// Cuts `link` at `time`, running everything scheduled before then first.
pub fn netsplit(world: &mut World, link: &Link, time: Ticks) -> Result<SplitRecord, SplitError> {
    if world.topology().link_latency(link).is_none() {
        return Err(SplitError::UnknownLink(link.clone()));
    }
    if !world.is_live(link) {
        return Err(SplitError::LinkDown(link.clone()));
    }
    world.advance_to(time)?;
    let sides = halves(world, link);
    world.cut_link(link);
    let (x, y) = link.endpoints();
    let mut quit_seen: BTreeSet<(ClientId, ClientId)> = BTreeSet::new();
    for (side, near, far) in [(&sides.0, x, y), (&sides.1, y, x)] {
        let reason = format!("{near} {far}");
        for server in side {
            for channel in world.channels() {
                let view = world.view_or_empty(server, &channel);
                let gone: Vec<ClientId> = view
                    .members
                    .iter()
                    .filter(|m| {
                        world
                            .topology()
                            .client(m)
                            .map_or(true, |c| !side.contains(&c.home))
                    })
                    .cloned()
                    .collect();
                if gone.is_empty() {
                    continue;
                }
                let watchers: Vec<ClientId> = view
                    .members
                    .iter()
                    .filter(|m| world.locals(server).contains(*m))
                    .cloned()
                    .collect();
                let v = world.view_mut(server, &channel);
                for m in &gone {
                    v.remove_member(m);
                }
                for w in &watchers {
                    for m in &gone {
                        if quit_seen.insert((w.clone(), m.clone())) {
                            world.deliver(w, format!("<-- {m} has quit [{reason}]"));
                        }
                    }
                }
            }
        }
    }
    Ok(SplitRecord {
        link: link.clone(),
        time,
        sides,
    })
}

/// Everything a junction server tells the other side about one channel.
pub fn burst(view: &ChannelView, junction: &ServerId) -> Vec<ModeChange> {
    let actor = Actor::Server(junction.clone());
    let mut out = Vec::new();
    let mut push = |kind| {
        out.push(ModeChange {
            actor: actor.clone(),
            channel: view.name.clone(),
            kind,
            burst: true,
        })
    };
    for m in &view.members {
        push(ChangeKind::Join {
            who: m.clone(),
            key: None,
            grants: view.grants_of(m),
        });
    }
    if let Some(k) = &view.key {
        push(ChangeKind::Key(Some(k.clone())));
    }
    if let Some(l) = view.limit {
        push(ChangeKind::Limit(Some(l)));
    }
    for f in Flag::ALL {
        if view.has(f) {
            push(ChangeKind::Flag { flag: f, set: true });
        }
    }
    if let Some(t) = &view.topic {
        push(ChangeKind::Topic(t.clone()));
    }
    for (list, entries) in [
        (ListKind::Ban, &view.bans),
        (ListKind::Exception, &view.exceptions),
    ] {
        for mask in entries {
            push(ChangeKind::List {
                list,
                mask: mask.clone(),
                add: true,
            });
        }
    }
    out
}

/// Restores the link of `record` at `time`. Both junction servers send
/// their bursts at once; they arrive one link latency later.
pub fn netjoin(world: &mut World, record: &SplitRecord, time: Ticks) -> Result<(), SplitError> {
    let link = &record.link;
    if world.topology().link_latency(link).is_none() {
        return Err(SplitError::UnknownLink(link.clone()));
    }
    if world.is_live(link) {
        return Err(SplitError::EdgeStillPresent(link.clone()));
    }
    world.advance_to(time)?;
    world.restore_link(link);
    let (x, y) = link.endpoints();
    let (x, y) = (x.clone(), y.clone());
    let mut outgoing: BTreeMap<(ServerId, ServerId), Vec<ModeChange>> = BTreeMap::new();
    for channel in world.channels() {
        for (from, to) in [(&x, &y), (&y, &x)] {
            let view = world.view_or_empty(from, &channel);
            if view.exists() {
                outgoing
                    .entry((from.clone(), to.clone()))
                    .or_default()
                    .extend(burst(&view, from));
            }
        }
    }
    for ((from, to), changes) in outgoing {
        for change in changes {
            let id = world.fresh_change();
            world.send(id, change, &from, &to);
        }
    }
    Ok(())
}

/// Netjoin by link, for callers that did not keep the split record.
pub fn netjoin_link(world: &mut World, link: &Link, time: Ticks) -> Result<(), SplitError> {
    let record = SplitRecord {
        link: link.clone(),
        time,
        sides: halves(world, link),
    };
    netjoin(world, &record, time)
}

/// Op sets per server, per channel.
pub type OpMap = BTreeMap<ServerId, BTreeMap<String, BTreeSet<ClientId>>>;

fn op_map(world: &World) -> OpMap {
    let channels = world.channels();
    world
        .topology()
        .servers()
        .iter()
        .map(|s| {
            let ops = channels
                .iter()
                .map(|c| (c.clone(), world.view_or_empty(s, c).ops))
                .collect();
            (s.clone(), ops)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitsurfReport {
    /// Ops just before the first split; `None` if the script never splits.
    pub before: Option<OpMap>,
    pub after: OpMap,
    pub run: RunReport,
}

impl SplitsurfReport {
    /// Servers on which `client` holds ops in `channel` at the end.
    pub fn op_servers(&self, channel: &str, client: &ClientId) -> BTreeSet<ServerId> {
        self.after
            .iter()
            .filter(|(_, chans)| chans.get(channel).is_some_and(|ops| ops.contains(client)))
            .map(|(s, _)| s.clone())
            .collect()
    }
}

/// Runs a script that hides ops behind a boundary and then splits and
/// rejoins, recording who is op where before the split and at the end.
pub fn replay_splitsurf(script: &Scenario) -> Result<SplitsurfReport, ScenarioError> {
    let mut before = None;
    let mut after = OpMap::new();
    let (_, run) = run_observed(script, |world, next| match next {
        Some(t) if before.is_none() && matches!(t.action, Action::Split(_)) => {
            before = Some(op_map(world))
        }
        None => after = op_map(world),
        _ => {}
    })?;
    Ok(SplitsurfReport { before, after, run })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Config;
    use crate::topology::{Client, Topology};

    fn world() -> World {
        let topo = Topology::chain(
            &["C", "B", "A", "X", "Y", "Z"],
            1,
            vec![Client::new("a", "A"), Client::new("x", "X")],
        )
        .unwrap();
        let mut w = World::new(topo, Config::default());
        let mut v = ChannelView::new("#channel");
        v.members = ["a", "x"].iter().map(|n| ClientId::from(*n)).collect();
        v.ops = v.members.clone();
        v.limit = Some(10);
        w.install_channel(v).unwrap();
        w
    }

    fn members(w: &World, s: &str) -> Vec<String> {
        w.view_or_empty(&s.into(), "#channel")
            .members
            .iter()
            .map(|m| m.to_string())
            .collect()
    }

    #[test]
    fn split_drops_far_side_members() {
        let mut w = world();
        let rec = netsplit(&mut w, &Link::new("A", "X"), 0).unwrap();
        assert_eq!(rec.sides.0.len(), 3);
        for s in ["C", "B", "A"] {
            assert_eq!(members(&w, s), vec!["a"]);
        }
        for s in ["X", "Y", "Z"] {
            assert_eq!(members(&w, s), vec!["x"]);
        }
        w.run_until_quiescent().unwrap();
        assert_eq!(w.trace_of("a"), vec!["<-- x has quit [A X]"]);
        assert_eq!(w.view_or_empty(&"Z".into(), "#channel").limit, Some(10));
    }

    #[test]
    fn leaf_split_isolates_the_leaf() {
        let mut w = world();
        let rec = netsplit(&mut w, &Link::new("Y", "Z"), 0).unwrap();
        assert_eq!(rec.sides.1, BTreeSet::from([ServerId::from("Z")]));
        assert!(members(&w, "Z").is_empty());
    }

    #[test]
    fn split_errors() {
        let mut w = world();
        assert_eq!(
            netsplit(&mut w, &Link::new("A", "Z"), 0),
            Err(SplitError::UnknownLink(Link::new("A", "Z")))
        );
        let rec = netsplit(&mut w, &Link::new("A", "X"), 0).unwrap();
        assert_eq!(
            netsplit(&mut w, &Link::new("A", "X"), 0),
            Err(SplitError::LinkDown(Link::new("A", "X")))
        );
        netjoin(&mut w, &rec, 1).unwrap();
        assert_eq!(
            netjoin(&mut w, &rec, 2),
            Err(SplitError::EdgeStillPresent(Link::new("A", "X")))
        );
    }

    #[test]
    fn immediate_rejoin_restores_views() {
        let mut w = world();
        let before: Vec<_> = w
            .topology()
            .servers()
            .iter()
            .map(|s| w.view_or_empty(s, "#channel"))
            .collect();
        let rec = netsplit(&mut w, &Link::new("A", "X"), 0).unwrap();
        netjoin(&mut w, &rec, 0).unwrap();
        w.run_until_quiescent().unwrap();
        let after: Vec<_> = w
            .topology()
            .servers()
            .iter()
            .map(|s| w.view_or_empty(s, "#channel"))
            .collect();
        assert_eq!(before, after);
    }

    fn hidden_ops() -> Scenario {
        crate::scenario::builtin("hidden-ops")
            .unwrap()
            .scenario()
            .unwrap()
    }

    #[test]
    fn splitsurf_spreads_hidden_ops() {
        let r = replay_splitsurf(&hidden_ops()).unwrap();
        let h1 = ClientId::from("h1");
        let before = r.before.as_ref().unwrap();
        assert!(before[&ServerId::from("A")]["#channel"].contains(&h1));
        assert!(!before[&ServerId::from("B")]["#channel"].contains(&h1));
        assert_eq!(r.op_servers("#channel", &h1).len(), 3);
    }

    #[test]
    fn without_the_split_hidden_ops_stay_on_a() {
        let mut s = hidden_ops();
        s.actions
            .retain(|t| !matches!(t.action, Action::Split(_) | Action::Rejoin(_)));
        s.assertions.retain(|a| a.at.is_some());
        let r = replay_splitsurf(&s).unwrap();
        assert!(r.before.is_none());
        for h in ["h1", "h2"] {
            assert_eq!(
                r.op_servers("#channel", &h.into()),
                BTreeSet::from([ServerId::from("A")])
            );
        }
    }

    #[test]
    fn conflicting_limits_swap_on_join() {
        let mut w = world();
        let rec = netsplit(&mut w, &Link::new("A", "X"), 0).unwrap();
        w.issue(
            1,
            ModeChange::by(&"x".into(), "#channel", ChangeKind::Limit(Some(11))),
        )
        .unwrap();
        w.run_until_quiescent().unwrap();
        netjoin(&mut w, &rec, 10).unwrap();
        w.run_until_quiescent().unwrap();
        assert_eq!(w.view_or_empty(&"A".into(), "#channel").limit, Some(11));
        assert_eq!(w.view_or_empty(&"X".into(), "#channel").limit, Some(10));
    }
}
