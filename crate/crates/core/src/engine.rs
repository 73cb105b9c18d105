//! Discrete-event core.
//!
//! Events are ordered by `(time, seq)` where `seq` is handed out at
//! scheduling time, so equal-time events run in the order they were
//! scheduled. Links are FIFO: every link has a fixed latency, so two relays
//! sent over the same link in order also arrive in order.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::channel::{
    apply_local, apply_remote, Actor, ChangeKind, ChannelView, ModeChange, NoticeDraft, Numeric,
    ServerNotice, Site,
};
use crate::topology::{ClientId, Link, ServerId, Ticks, Topology, TopologyError};
use crate::trace::{notice_observer, to_jsonl, TraceRecord};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EngineError {
    #[error("cannot schedule at t{at}: current time is t{now}")]
    TimeInPast { at: Ticks, now: Ticks },
    #[error("no quiescence within {0} ticks")]
    BudgetExceeded(Ticks),
    #[error("{0} is unreachable from {1}")]
    Unreachable(ServerId, ServerId),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    pub seed: u64,
    /// Latency measurements are perturbed by a uniform integer in
    /// `[-jitter, jitter]`.
    pub jitter: Ticks,
    pub ps_conflict_fixed: bool,
    /// Longest a single `run_until_quiescent` may advance the clock.
    pub max_ticks: Ticks,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            jitter: 0,
            ps_conflict_fixed: true,
            max_ticks: 100_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct ChangeId(pub u64);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    /// A client command arriving at its home server.
    Inject {
        id: ChangeId,
        change: ModeChange,
    },
    /// A change arriving over the link from `from`.
    Relay {
        id: ChangeId,
        change: ModeChange,
        from: ServerId,
        epoch: u64,
    },
    Deliver {
        to: ClientId,
        line: String,
    },
    Numeric {
        to: ClientId,
        from: ServerId,
        channel: String,
        numeric: Numeric,
    },
    Ping {
        client: ClientId,
        target: ServerId,
        returning: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimEvent {
    pub time: Ticks,
    pub seq: u64,
    pub site: ServerId,
    pub payload: Payload,
}

impl Ord for SimEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// What a server did with a change.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Receipt {
    pub change: ChangeId,
    pub server: ServerId,
    pub time: Ticks,
    pub applied: bool,
    pub forwarded: bool,
}

/// An error reply as received by the client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NumericEvent {
    pub tick: Ticks,
    pub client: ClientId,
    pub server: ServerId,
    pub channel: String,
    pub numeric: Numeric,
}

impl NumericEvent {
    pub fn line(&self) -> String {
        format!(
            "-!- [{}] from {}: {}: {}",
            self.numeric.code, self.server, self.channel, self.numeric.text
        )
    }
}

#[derive(Debug, Clone)]
pub struct World {
    topology: Topology,
    config: Config,
    now: Ticks,
    seq: u64,
    next_change: u64,
    queue: BinaryHeap<Reverse<SimEvent>>,
    views: BTreeMap<ServerId, BTreeMap<String, ChannelView>>,
    locals: BTreeMap<ServerId, BTreeSet<ClientId>>,
    down: BTreeSet<Link>,
    epochs: BTreeMap<Link, u64>,
    notices: Vec<ServerNotice>,
    logs: BTreeMap<ServerId, Vec<ServerNotice>>,
    numerics: Vec<NumericEvent>,
    trace: Vec<TraceRecord>,
    receipts: Vec<Receipt>,
    rng: ChaCha8Rng,
    ping_reply: Option<Ticks>,
}

impl World {
    pub fn new(topology: Topology, config: Config) -> World {
        let mut locals: BTreeMap<ServerId, BTreeSet<ClientId>> = topology
            .servers()
            .iter()
            .map(|s| (s.clone(), BTreeSet::new()))
            .collect();
        for c in topology.clients() {
            locals
                .get_mut(&c.home)
                .expect("validated")
                .insert(c.nick.clone());
        }
        let views = topology
            .servers()
            .iter()
            .map(|s| (s.clone(), BTreeMap::new()))
            .collect();
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        World {
            topology,
            config,
            now: 0,
            seq: 0,
            next_change: 0,
            queue: BinaryHeap::new(),
            views,
            locals,
            down: BTreeSet::new(),
            epochs: BTreeMap::new(),
            notices: Vec::new(),
            logs: BTreeMap::new(),
            numerics: Vec::new(),
            trace: Vec::new(),
            receipts: Vec::new(),
            rng,
            ping_reply: None,
        }
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn now(&self) -> Ticks {
        self.now
    }

    pub fn is_quiescent(&self) -> bool {
        self.queue.is_empty()
    }

    /// Installs the same view of a channel on every server, as if it had
    /// been created and fully propagated before the run starts.
    pub fn install_channel(&mut self, view: ChannelView) -> Result<(), EngineError> {
        for m in &view.members {
            self.topology.client(m)?;
        }
        for views in self.views.values_mut() {
            views.insert(view.name.clone(), view.clone());
        }
        Ok(())
    }

    pub fn view(&self, server: &ServerId, channel: &str) -> Option<&ChannelView> {
        self.views.get(server)?.get(channel)
    }

    /// The view on `server`, or an empty one if the server never saw the
    /// channel.
    pub fn view_or_empty(&self, server: &ServerId, channel: &str) -> ChannelView {
        self.view(server, channel)
            .cloned()
            .unwrap_or_else(|| ChannelView::new(channel))
    }

    pub(crate) fn view_mut(&mut self, server: &ServerId, channel: &str) -> &mut ChannelView {
        self.views
            .get_mut(server)
            .expect("known server")
            .entry(channel.to_owned())
            .or_insert_with(|| ChannelView::new(channel))
    }

    /// Every channel name known to any server.
    pub fn channels(&self) -> BTreeSet<String> {
        self.views
            .values()
            .flat_map(|v| v.keys().cloned())
            .collect()
    }

    pub fn locals(&self, server: &ServerId) -> &BTreeSet<ClientId> {
        &self.locals[server]
    }

    pub fn is_live(&self, link: &Link) -> bool {
        self.topology.link_latency(link).is_some() && !self.down.contains(link)
    }

    pub fn down_links(&self) -> &BTreeSet<Link> {
        &self.down
    }

    pub fn live_links(&self) -> Vec<Link> {
        self.topology
            .links()
            .map(|(l, _)| l)
            .filter(|l| !self.down.contains(l))
            .collect()
    }

    /// Servers reachable from `s` over live links.
    pub fn component(&self, s: &ServerId) -> BTreeSet<ServerId> {
        self.topology.reachable(s, &self.down)
    }

    pub(crate) fn cut_link(&mut self, link: &Link) {
        self.down.insert(link.clone());
        *self.epochs.entry(link.clone()).or_insert(0) += 1;
    }

    pub(crate) fn restore_link(&mut self, link: &Link) {
        self.down.remove(link);
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn trace_of(&self, observer: &str) -> Vec<&str> {
        crate::trace::lines_for(&self.trace, observer)
    }

    pub fn trace_jsonl(&self) -> String {
        to_jsonl(&self.trace)
    }

    /// Every notice raised, once per dropped change.
    pub fn notices(&self) -> &[ServerNotice] {
        &self.notices
    }

    /// The `&channel` log of one server.
    pub fn notice_log(&self, server: &ServerId) -> &[ServerNotice] {
        self.logs.get(server).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn numerics(&self) -> &[NumericEvent] {
        &self.numerics
    }

    pub fn receipts(&self) -> &[Receipt] {
        &self.receipts
    }

    pub fn receipts_for(&self, id: ChangeId) -> impl Iterator<Item = &Receipt> {
        self.receipts.iter().filter(move |r| r.change == id)
    }

    /// State dump keyed by server, then channel.
    pub fn dump(&self) -> serde_json::Value {
        serde_json::to_value(&self.views).expect("views serialize")
    }

    pub fn dump_json(&self) -> String {
        serde_json::to_string_pretty(&self.views).expect("views serialize")
    }

    fn next_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    pub fn schedule(
        &mut self,
        time: Ticks,
        site: ServerId,
        payload: Payload,
    ) -> Result<u64, EngineError> {
        if time < self.now {
            return Err(EngineError::TimeInPast {
                at: time,
                now: self.now,
            });
        }
        let seq = self.next_seq();
        self.queue.push(Reverse(SimEvent {
            time,
            seq,
            site,
            payload,
        }));
        Ok(seq)
    }

    /// A client issues `change` at `time`; it reaches the client's home
    /// server after the client's link latency.
    pub fn issue(&mut self, time: Ticks, change: ModeChange) -> Result<ChangeId, EngineError> {
        let nick = change
            .actor
            .client()
            .expect("clients issue commands")
            .clone();
        let client = self.topology.client(&nick)?.clone();
        if time < self.now {
            return Err(EngineError::TimeInPast {
                at: time,
                now: self.now,
            });
        }
        let id = self.fresh_change();
        self.schedule(
            time + client.link_latency,
            client.home,
            Payload::Inject { id, change },
        )?;
        Ok(id)
    }

    pub(crate) fn fresh_change(&mut self) -> ChangeId {
        self.next_change += 1;
        ChangeId(self.next_change)
    }

    /// Sends `change` from `from` to its neighbour `to`, arriving after the
    /// link latency. Dropped on arrival if the link went down meanwhile.
    pub(crate) fn send(
        &mut self,
        id: ChangeId,
        change: ModeChange,
        from: &ServerId,
        to: &ServerId,
    ) {
        let link = Link::new(from, to);
        let latency = self.topology.link_latency(&link).expect("neighbours");
        let epoch = self.epochs.get(&link).copied().unwrap_or(0);
        let at = self.now + latency;
        self.schedule(
            at,
            to.clone(),
            Payload::Relay {
                id,
                change,
                from: from.clone(),
                epoch,
            },
        )
        .expect("future time");
    }

    /// Queues a line for `to`, shown after the client's link latency.
    pub(crate) fn deliver(&mut self, to: &ClientId, line: String) {
        let client = self.topology.client(to).expect("known client");
        let (home, at) = (client.home.clone(), self.now + client.link_latency);
        self.schedule(
            at,
            home,
            Payload::Deliver {
                to: to.clone(),
                line,
            },
        )
        .expect("future time");
    }

    fn reply(&mut self, to: &ClientId, from: &ServerId, channel: &str, numeric: Numeric) {
        let client = self.topology.client(to).expect("known client");
        let home = client.home.clone();
        let at = self.now + self.topology.one_way_latency(to, from).expect("known");
        self.schedule(
            at,
            home,
            Payload::Numeric {
                to: to.clone(),
                from: from.clone(),
                channel: channel.to_owned(),
                numeric,
            },
        )
        .expect("future time");
    }

    /// Records a notice in the log of every server reachable from `site`
    /// without crossing `blocked`.
    fn raise_notice(
        &mut self,
        site: &ServerId,
        channel: &str,
        draft: NoticeDraft,
        blocked: Option<Link>,
    ) {
        let notice = ServerNotice {
            server: site.clone(),
            time: self.now,
            channel: channel.to_owned(),
            culprit: draft.culprit,
            kind: draft.kind,
            detail: draft.detail,
        };
        let mut cut = self.down.clone();
        cut.extend(blocked);
        for s in self.topology.reachable(site, &cut) {
            self.trace.push(TraceRecord {
                tick: self.now,
                observer: notice_observer(s.as_str()),
                line: notice.line(),
            });
            self.logs.entry(s).or_default().push(notice.clone());
        }
        self.notices.push(notice);
    }

    fn live_neighbors(&self, site: &ServerId) -> Vec<ServerId> {
        self.topology
            .neighbors(site)
            .map(|(n, _)| n.clone())
            .filter(|n| !self.down.contains(&Link::new(site, n)))
            .collect()
    }

    /// Next hops from `site` towards the homes of the channel's members, as
    /// this server sees them.
    fn member_hops(&self, site: &ServerId, channel: &str) -> BTreeSet<ServerId> {
        let mut hops = BTreeSet::new();
        let Some(view) = self.view(site, channel) else {
            return hops;
        };
        for m in &view.members {
            let Ok(client) = self.topology.client(m) else {
                continue;
            };
            if &client.home != site {
                if let Ok(path) = self.topology.path(site, &client.home) {
                    hops.insert(path[1].clone());
                }
            }
        }
        hops
    }

    fn forward(
        &mut self,
        id: ChangeId,
        change: &ModeChange,
        site: &ServerId,
        except: Option<&ServerId>,
    ) {
        let mut targets = self.live_neighbors(site);
        if matches!(change.kind, ChangeKind::Privmsg { .. }) {
            let hops = self.member_hops(site, &change.channel);
            targets.retain(|n| hops.contains(n));
        }
        for n in targets {
            if Some(&n) != except {
                self.send(id, change.clone(), site, &n);
            }
        }
    }

    fn site<'a>(
        locals: &'a BTreeMap<ServerId, BTreeSet<ClientId>>,
        server: &'a ServerId,
        fixed: bool,
    ) -> Site<'a> {
        Site {
            server,
            locals: &locals[server],
            ps_conflict_fixed: fixed,
        }
    }

    /// Executes the earliest event. `None` when the queue is empty.
    pub fn step(&mut self) -> Option<SimEvent> {
        let Reverse(event) = self.queue.pop()?;
        self.now = event.time;
        let site = event.site.clone();
        match &event.payload {
            Payload::Inject { id, change } => {
                let actor = change.actor.client().expect("client command").clone();
                let fixed = self.config.ps_conflict_fixed;
                let view = self
                    .views
                    .get_mut(&site)
                    .expect("known server")
                    .entry(change.channel.clone())
                    .or_insert_with(|| ChannelView::new(&change.channel));
                let out = apply_local(view, &World::site(&self.locals, &site, fixed), change);
                self.receipts.push(Receipt {
                    change: *id,
                    server: site.clone(),
                    time: self.now,
                    applied: out.applied,
                    forwarded: out.relay.is_some(),
                });
                for n in out.numerics {
                    self.reply(&actor, &site, &change.channel, n);
                }
                for n in out.notify {
                    self.deliver(&n.to, n.line);
                }
                if let Some(relay) = out.relay {
                    self.forward(*id, &relay, &site, None);
                }
            }
            Payload::Relay {
                id,
                change,
                from,
                epoch,
            } => {
                let link = Link::new(from, &site);
                if self.down.contains(&link)
                    || self.epochs.get(&link).copied().unwrap_or(0) != *epoch
                {
                    return Some(event);
                }
                let fixed = self.config.ps_conflict_fixed;
                let view = self
                    .views
                    .get_mut(&site)
                    .expect("known server")
                    .entry(change.channel.clone())
                    .or_insert_with(|| ChannelView::new(&change.channel));
                let out = apply_remote(view, &World::site(&self.locals, &site, fixed), change);
                self.receipts.push(Receipt {
                    change: *id,
                    server: site.clone(),
                    time: self.now,
                    applied: out.applied,
                    forwarded: out.forward,
                });
                for n in out.notify {
                    self.deliver(&n.to, n.line);
                }
                for d in out.notices {
                    self.raise_notice(&site, &change.channel, d, Some(link.clone()));
                }
                if let Actor::Client(sender) = &change.actor {
                    for n in out.numerics_to_origin {
                        self.reply(sender, &site, &change.channel, n);
                    }
                }
                if out.forward {
                    self.forward(*id, change, &site, Some(from));
                }
            }
            Payload::Deliver { to, line } => self.trace.push(TraceRecord {
                tick: self.now,
                observer: to.to_string(),
                line: line.clone(),
            }),
            Payload::Numeric {
                to,
                from,
                channel,
                numeric,
            } => {
                let ev = NumericEvent {
                    tick: self.now,
                    client: to.clone(),
                    server: from.clone(),
                    channel: channel.clone(),
                    numeric: *numeric,
                };
                self.trace.push(TraceRecord {
                    tick: self.now,
                    observer: to.to_string(),
                    line: ev.line(),
                });
                self.numerics.push(ev);
            }
            Payload::Ping {
                client,
                target,
                returning,
            } => {
                let home = self
                    .topology
                    .client(client)
                    .expect("known client")
                    .home
                    .clone();
                let returning = *returning || &site == target;
                let dest = if returning {
                    home.clone()
                } else {
                    target.clone()
                };
                if returning && site == home {
                    let lat = self.topology.client(client).expect("known").link_latency;
                    self.ping_reply = Some(self.now + lat);
                } else if let Ok(path) = self.topology.path(&site, &dest) {
                    let next = path[1].clone();
                    let link = Link::new(&site, &next);
                    if !self.down.contains(&link) {
                        let at = self.now + self.topology.link_latency(&link).expect("neighbours");
                        let payload = Payload::Ping {
                            client: client.clone(),
                            target: target.clone(),
                            returning,
                        };
                        self.schedule(at, next, payload).expect("future time");
                    }
                }
            }
        }
        Some(event)
    }

    /// Runs every event scheduled strictly before `t`, then sets the clock
    /// to `t`.
    pub fn advance_to(&mut self, t: Ticks) -> Result<(), EngineError> {
        if t < self.now {
            return Err(EngineError::TimeInPast {
                at: t,
                now: self.now,
            });
        }
        while self.queue.peek().is_some_and(|Reverse(e)| e.time < t) {
            self.step();
        }
        self.now = t;
        Ok(())
    }

    /// Runs every event scheduled at or before `t`.
    pub fn run_through(&mut self, t: Ticks) {
        while self.queue.peek().is_some_and(|Reverse(e)| e.time <= t) {
            self.step();
        }
    }

    /// Steps until the queue is empty and returns the time of the last
    /// event.
    pub fn run_until_quiescent(&mut self) -> Result<Ticks, EngineError> {
        let limit = self.now.saturating_add(self.config.max_ticks);
        while let Some(Reverse(e)) = self.queue.peek() {
            if e.time > limit {
                return Err(EngineError::BudgetExceeded(self.config.max_ticks));
            }
            self.step();
        }
        Ok(self.now)
    }

    /// Estimates the one-way latency from client `c` to server `s` by
    /// timing a ping and its echo. The probe runs on a private copy of the
    /// network so it does not disturb the channel state; with jitter
    /// configured, the round trip is perturbed before halving.
    pub fn measure_latency(&mut self, c: &ClientId, s: &ServerId) -> Result<Ticks, EngineError> {
        let client = self.topology.client(c)?.clone();
        if !self.topology.contains(s) {
            return Err(TopologyError::UnknownServer(s.clone()).into());
        }
        let mut probe = World::new(self.topology.clone(), Config::default());
        probe.down = self.down.clone();
        let payload = Payload::Ping {
            client: c.clone(),
            target: s.clone(),
            returning: false,
        };
        probe.schedule(client.link_latency, client.home.clone(), payload)?;
        probe.run_until_quiescent()?;
        let rtt = probe
            .ping_reply
            .ok_or_else(|| EngineError::Unreachable(s.clone(), client.home.clone()))?;
        let jitter = self.config.jitter as i64;
        let noise = if jitter > 0 {
            self.rng.gen_range(-jitter..=jitter)
        } else {
            0
        };
        let rtt = (rtt as i64 + noise).max(0) as Ticks;
        Ok(rtt / 2)
    }
}
