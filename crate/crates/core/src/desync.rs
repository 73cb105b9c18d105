//! Deliberate desynchronisation and boundary detection.
//!
//! Two ops fire mutually exclusive commands (each deops or kicks the other)
//! timed so both reach the two ends of a chosen link at the same instant.
//! Each command is then refused on the far side of that link, which leaves
//! the boundary exactly there.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::channel::{ChangeKind, Flag, ModeChange};
use crate::engine::{EngineError, World};
use crate::topology::{ClientId, Link, ServerId, Ticks, TopologyError};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DesyncError {
    #[error("link {0} is not on the path between the two clients")]
    NotOnPath(Link),
    #[error("{0} is not an operator on its own server")]
    NotOp(ClientId),
    #[error("meeting time t{meeting} is too early; it must be after t{earliest}")]
    MeetingTimeTooEarly { meeting: Ticks, earliest: Ticks },
    #[error("probe drew no error reply")]
    ProbeInconclusive,
    #[error(transparent)]
    Engine(#[from] EngineError),
}

impl From<TopologyError> for DesyncError {
    fn from(e: TopologyError) -> Self {
        DesyncError::Engine(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Collide {
    Deop,
    Kick,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DesyncPlan {
    pub channel: String,
    pub a: ClientId,
    pub b: ClientId,
    pub target: Link,
    /// Issued by `b`, removing `a`.
    pub against_a: ModeChange,
    /// Issued by `a`, removing `b`.
    pub against_b: ModeChange,
}

impl DesyncPlan {
    pub fn new(
        channel: &str,
        a: &ClientId,
        b: &ClientId,
        target: Link,
        how: Collide,
    ) -> DesyncPlan {
        let against = |by: &ClientId, victim: &ClientId| {
            let kind = match how {
                Collide::Deop => ChangeKind::Op {
                    target: victim.clone(),
                    set: false,
                },
                Collide::Kick => ChangeKind::Kick {
                    target: victim.clone(),
                },
            };
            ModeChange::by(by, channel, kind)
        };
        DesyncPlan {
            channel: channel.to_owned(),
            a: a.clone(),
            b: b.clone(),
            target,
            against_a: against(b, a),
            against_b: against(a, b),
        }
    }
}

/// When each client fires.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Injection {
    pub a_at: Ticks,
    pub b_at: Ticks,
    /// Measured latency from `a` to the target endpoint on its side.
    pub x: Ticks,
    /// Measured latency from `b` to the target endpoint on its side.
    pub y: Ticks,
}

/// The target link's endpoints ordered `(X, Y)` with `X` on `a`'s side.
fn orient(world: &World, plan: &DesyncPlan) -> Result<(ServerId, ServerId), DesyncError> {
    let topo = world.topology();
    let ha = &topo.client(&plan.a)?.home;
    let hb = &topo.client(&plan.b)?.home;
    if !topo.path_links(ha, hb)?.contains(&plan.target) {
        return Err(DesyncError::NotOnPath(plan.target.clone()));
    }
    let (p, q) = plan.target.endpoints();
    if topo.hops(ha, p)? < topo.hops(ha, q)? {
        Ok((p.clone(), q.clone()))
    } else {
        Ok((q.clone(), p.clone()))
    }
}

fn require_op(world: &World, channel: &str, c: &ClientId) -> Result<(), DesyncError> {
    let home = &world.topology().client(c)?.home;
    if world.view_or_empty(home, channel).ops.contains(c) {
        Ok(())
    } else {
        Err(DesyncError::NotOp(c.clone()))
    }
}

/// Measures both latencies, then fires the two commands so they reach the
/// target link's endpoints together. The client with the shorter latency
/// waits for the difference.
pub fn one_user_desync(world: &mut World, plan: &DesyncPlan) -> Result<Injection, DesyncError> {
    let (xs, ys) = orient(world, plan)?;
    require_op(world, &plan.channel, &plan.a)?;
    require_op(world, &plan.channel, &plan.b)?;
    let x = world.measure_latency(&plan.a, &xs)?;
    let y = world.measure_latency(&plan.b, &ys)?;
    let now = world.now();
    let (a_at, b_at) = if x <= y {
        (now + (y - x), now)
    } else {
        (now, now + (x - y))
    };
    schedule_pair(world, plan, a_at, b_at)?;
    Ok(Injection { a_at, b_at, x, y })
}

fn schedule_pair(
    world: &mut World,
    plan: &DesyncPlan,
    a_at: Ticks,
    b_at: Ticks,
) -> Result<(), DesyncError> {
    if a_at <= b_at {
        world.issue(a_at, plan.against_b.clone())?;
        world.issue(b_at, plan.against_a.clone())?;
    } else {
        world.issue(b_at, plan.against_a.clone())?;
        world.issue(a_at, plan.against_b.clone())?;
    }
    Ok(())
}

/// Both clients measure their own latency, exchange the figures, and fire
/// at an agreed time `meeting`; the nearer one adds the difference. `b`'s
/// clock runs `skew` ticks behind the shared clock.
pub fn two_user_desync(
    world: &mut World,
    plan: &DesyncPlan,
    meeting: Ticks,
    skew: i64,
) -> Result<Injection, DesyncError> {
    let (xs, ys) = orient(world, plan)?;
    require_op(world, &plan.channel, &plan.a)?;
    require_op(world, &plan.channel, &plan.b)?;
    let x = world.measure_latency(&plan.a, &xs)?;
    let y = world.measure_latency(&plan.b, &ys)?;
    let now = world.now();
    let earliest = now + x.abs_diff(y);
    if meeting <= earliest || (meeting as i64) + skew < now as i64 {
        return Err(DesyncError::MeetingTimeTooEarly { meeting, earliest });
    }
    let a_at = meeting + y.saturating_sub(x);
    let b_at = ((meeting + x.saturating_sub(y)) as i64 + skew) as Ticks;
    schedule_pair(world, plan, a_at, b_at)?;
    Ok(Injection { a_at, b_at, x, y })
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct BoundaryEdge {
    pub link: Link,
    pub channel: String,
    /// View fields that differ across the link.
    pub difference: Vec<&'static str>,
}

/// Every live link whose two endpoints hold different views of `channel`.
/// Links that are down separate the network and are not boundaries.
pub fn ground_truth_boundaries(world: &World, channel: &str) -> Vec<BoundaryEdge> {
    let mut out = Vec::new();
    for link in world.live_links() {
        let (p, q) = link.endpoints();
        let difference = world
            .view_or_empty(p, channel)
            .differences(&world.view_or_empty(q, channel));
        if !difference.is_empty() {
            out.push(BoundaryEdge {
                link,
                channel: channel.to_owned(),
                difference,
            });
        }
    }
    out
}

pub fn is_synced(world: &World, channel: &str) -> bool {
    ground_truth_boundaries(world, channel).is_empty()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Detection {
    Boundary {
        edge: Link,
        /// The foreign server that returned the error.
        reported_by: ServerId,
        numeric: u16,
    },
    Synced,
}

/// What a client without a map of the network learns from the probe.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum BlindDetection {
    Foreign(ServerId),
    Synced,
}

fn cmd(by: &ClientId, channel: &str, kind: ChangeKind) -> ModeChange {
    ModeChange::by(by, channel, kind)
}

/// Issues `change` now and runs to quiescence.
fn settle(world: &mut World, change: ModeChange) -> Result<crate::engine::ChangeId, DesyncError> {
    let id = world.issue(world.now(), change)?;
    world.run_until_quiescent()?;
    Ok(id)
}

/// First error reply the prober got on `channel` after `since`.
fn probe_reply(
    world: &World,
    channel: &str,
    prober: &ClientId,
    since: usize,
) -> Option<(ServerId, u16)> {
    world.numerics()[since..]
        .iter()
        .find(|n| &n.client == prober && n.channel == channel)
        .map(|n| (n.server.clone(), n.numeric.code))
}

/// Sends a message from the prober and returns the server that refused it.
fn probe(
    world: &mut World,
    channel: &str,
    prober: &ClientId,
) -> Result<Option<(ServerId, u16)>, DesyncError> {
    let since = world.numerics().len();
    let text = "probe".to_owned();
    settle(
        world,
        cmd(
            prober,
            channel,
            ChangeKind::Privmsg {
                text,
                claims_membership: false,
            },
        ),
    )?;
    Ok(probe_reply(world, channel, prober, since))
}

/// Runs the probes and reports the server that answered with an error.
/// First the moderation probe: `helper` sets +m, which only takes hold on
/// its own side, and the prober speaks. If that draws no reply (the prober
/// can speak everywhere), `helper` kicks the prober and sets +n instead.
fn run_probes(
    world: &mut World,
    channel: &str,
    prober: &ClientId,
    helper: &ClientId,
) -> Result<Option<(ServerId, u16)>, DesyncError> {
    world.run_until_quiescent()?;
    let moderate = |set| ChangeKind::Flag {
        flag: Flag::Moderated,
        set,
    };
    let id = settle(world, cmd(helper, channel, moderate(true)))?;
    let set_here = world.receipts_for(id).any(|r| r.applied);
    let reply = probe(world, channel, prober)?;
    if set_here {
        settle(world, cmd(helper, channel, moderate(false)))?;
    }
    if reply.is_some() {
        return Ok(reply);
    }
    settle(
        world,
        cmd(
            helper,
            channel,
            ChangeKind::Kick {
                target: prober.clone(),
            },
        ),
    )?;
    settle(
        world,
        cmd(
            helper,
            channel,
            ChangeKind::Flag {
                flag: Flag::NoExternal,
                set: true,
            },
        ),
    )?;
    probe(world, channel, prober)
}

/// Locates the boundary between the prober's side and the helper's side.
/// An error from the prober's own server means the channel looks the same
/// everywhere the message went.
pub fn detect_boundary(
    world: &mut World,
    channel: &str,
    prober: &ClientId,
    helper: &ClientId,
) -> Result<Detection, DesyncError> {
    let home = world.topology().client(prober)?.home.clone();
    match run_probes(world, channel, prober, helper)? {
        None => Err(DesyncError::ProbeInconclusive),
        Some((server, _)) if server == home => Ok(Detection::Synced),
        Some((server, numeric)) => {
            let path = world.topology().path(&home, &server)?;
            let prev = path[path.len() - 2].clone();
            Ok(Detection::Boundary {
                edge: Link::new(prev, server.clone()),
                reported_by: server,
                numeric,
            })
        }
    }
}

pub fn detect_boundary_blind(
    world: &mut World,
    channel: &str,
    prober: &ClientId,
    helper: &ClientId,
) -> Result<BlindDetection, DesyncError> {
    let home = world.topology().client(prober)?.home.clone();
    match run_probes(world, channel, prober, helper)? {
        None => Err(DesyncError::ProbeInconclusive),
        Some((server, _)) if server == home => Ok(BlindDetection::Synced),
        Some((server, _)) => Ok(BlindDetection::Foreign(server)),
    }
}

/// Links of the boundaries as a set, for comparisons.
pub fn boundary_links(world: &World, channel: &str) -> BTreeSet<Link> {
    ground_truth_boundaries(world, channel)
        .into_iter()
        .map(|b| b.link)
        .collect()
}
