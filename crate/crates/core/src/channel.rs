//! Per-server channel replica and the rules for applying changes to it.
//!
//! Every server keeps its own [`ChannelView`]. A change is applied locally
//! on the originating server, then relayed hop by hop; each receiving
//! server re-checks the actor's rights against *its own* view. A change
//! that fails that check is dropped there and never forwarded, which is all
//! it takes for two servers to end up disagreeing about a channel.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::topology::{ClientId, ServerId};

/// Who issued a change: a client, or a server acting on its own authority
/// (netjoin bursts, channel creation).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Actor {
    Client(ClientId),
    Server(ServerId),
}

impl Actor {
    pub fn client(&self) -> Option<&ClientId> {
        match self {
            Actor::Client(c) => Some(c),
            Actor::Server(_) => None,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Actor::Client(c) => c.as_str(),
            Actor::Server(s) => s.as_str(),
        }
    }
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Flag {
    InviteOnly,
    Moderated,
    NoExternal,
    TopicControl,
    Private,
    Secret,
    Anonymous,
}

impl Flag {
    pub const ALL: [Flag; 7] = [
        Flag::InviteOnly,
        Flag::Moderated,
        Flag::NoExternal,
        Flag::TopicControl,
        Flag::Private,
        Flag::Secret,
        Flag::Anonymous,
    ];

    pub fn letter(self) -> char {
        match self {
            Flag::InviteOnly => 'i',
            Flag::Moderated => 'm',
            Flag::NoExternal => 'n',
            Flag::TopicControl => 't',
            Flag::Private => 'p',
            Flag::Secret => 's',
            Flag::Anonymous => 'a',
        }
    }

    pub fn from_letter(c: char) -> Option<Flag> {
        Flag::ALL.into_iter().find(|f| f.letter() == c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ListKind {
    Ban,
    Exception,
}

impl ListKind {
    pub fn letter(self) -> char {
        match self {
            ListKind::Ban => 'b',
            ListKind::Exception => 'e',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Topic {
    pub text: String,
    pub setter: String,
}

/// Privileges handed out with a join: on channel creation, or replayed by
/// a netjoin burst.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct Grants {
    pub op: bool,
    pub voice: bool,
    pub creator: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChangeKind {
    Topic(Topic),
    Key(Option<String>),
    Limit(Option<u32>),
    Voice {
        target: ClientId,
        set: bool,
    },
    Op {
        target: ClientId,
        set: bool,
    },
    Creator {
        target: ClientId,
        set: bool,
    },
    Flag {
        flag: Flag,
        set: bool,
    },
    List {
        list: ListKind,
        mask: String,
        add: bool,
    },
    Kick {
        target: ClientId,
    },
    Join {
        who: ClientId,
        key: Option<String>,
        grants: Grants,
    },
    Part {
        who: ClientId,
    },
    Privmsg {
        text: String,
        claims_membership: bool,
    },
}

/// How concurrent conflicting changes of a kind behave.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModeClass {
    /// Always overwrites; two concurrent changes cross and each side ends
    /// with the other's value.
    Flowing,
    /// Flag modes that a server refuses (and does not relay) when they
    /// would not change anything.
    Toggle,
    /// Changes that act on the other actor's rights or presence; each one
    /// dies at the first server where its actor has already lost them.
    Colliding,
}

impl ChangeKind {
    /// `None` for plain traffic (join, part, privmsg).
    pub fn class(&self) -> Option<ModeClass> {
        use ChangeKind::*;
        match self {
            Topic(_) | Key(_) | Limit(_) | Voice { .. } | List { .. } => Some(ModeClass::Flowing),
            Flag { flag, .. } => match flag {
                self::Flag::Private | self::Flag::Secret => Some(ModeClass::Flowing),
                _ => Some(ModeClass::Toggle),
            },
            Op { .. } | Creator { .. } | Kick { .. } => Some(ModeClass::Colliding),
            Join { .. } | Part { .. } | Privmsg { .. } => None,
        }
    }

    /// Mode-string rendering used in client lines, e.g. `-o x` or `+l 10`.
    pub fn mode_text(&self) -> String {
        let sign = |set: bool| if set { '+' } else { '-' };
        match self {
            ChangeKind::Key(Some(k)) => format!("+k {k}"),
            ChangeKind::Key(None) => "-k".into(),
            ChangeKind::Limit(Some(l)) => format!("+l {l}"),
            ChangeKind::Limit(None) => "-l".into(),
            ChangeKind::Voice { target, set } => format!("{}v {target}", sign(*set)),
            ChangeKind::Op { target, set } => format!("{}o {target}", sign(*set)),
            ChangeKind::Creator { target, set } => format!("{}O {target}", sign(*set)),
            ChangeKind::Flag { flag, set } => format!("{}{}", sign(*set), flag.letter()),
            ChangeKind::List { list, mask, add } => {
                format!("{}{} {mask}", sign(*add), list.letter())
            }
            ChangeKind::Topic(t) => format!("topic {}", t.text),
            ChangeKind::Kick { target } => format!("kick {target}"),
            ChangeKind::Join { who, .. } => format!("join {who}"),
            ChangeKind::Part { who } => format!("part {who}"),
            ChangeKind::Privmsg { .. } => "privmsg".into(),
        }
    }

    fn target(&self) -> Option<&ClientId> {
        match self {
            ChangeKind::Voice { target, .. }
            | ChangeKind::Op { target, .. }
            | ChangeKind::Creator { target, .. }
            | ChangeKind::Kick { target } => Some(target),
            _ => None,
        }
    }
}

/// A change travelling through the network.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModeChange {
    pub actor: Actor,
    pub channel: String,
    pub kind: ChangeKind,
    /// Part of a netjoin burst.
    pub burst: bool,
}

impl ModeChange {
    pub fn new(actor: Actor, channel: impl Into<String>, kind: ChangeKind) -> Self {
        ModeChange {
            actor,
            channel: channel.into(),
            kind,
            burst: false,
        }
    }

    pub fn by(nick: &ClientId, channel: impl Into<String>, kind: ChangeKind) -> Self {
        ModeChange::new(Actor::Client(nick.clone()), channel, kind)
    }
}

pub fn classify(change: &ModeChange) -> Option<ModeClass> {
    change.kind.class()
}

/// Error replies sent back to a client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Numeric {
    pub code: u16,
    pub text: &'static str,
}

impl Numeric {
    pub const NO_SUCH_CHANNEL: Numeric = Numeric {
        code: 403,
        text: "no such channel",
    };
    pub const CANNOT_SEND: Numeric = Numeric {
        code: 404,
        text: "cannot send to channel",
    };
    pub const THEY_NOT_ON_CHANNEL: Numeric = Numeric {
        code: 441,
        text: "they aren't on that channel",
    };
    pub const NOT_ON_CHANNEL: Numeric = Numeric {
        code: 442,
        text: "you're not on that channel",
    };
    pub const CHANNEL_FULL: Numeric = Numeric {
        code: 471,
        text: "cannot join channel (+l)",
    };
    pub const INVITE_ONLY: Numeric = Numeric {
        code: 473,
        text: "cannot join channel (+i)",
    };
    pub const BANNED: Numeric = Numeric {
        code: 474,
        text: "cannot join channel (+b)",
    };
    pub const BAD_KEY: Numeric = Numeric {
        code: 475,
        text: "cannot join channel (+k)",
    };
    pub const NOT_OPERATOR: Numeric = Numeric {
        code: 482,
        text: "you're not channel operator",
    };

    pub const TABLE: [Numeric; 9] = [
        Numeric::NO_SUCH_CHANNEL,
        Numeric::CANNOT_SEND,
        Numeric::THEY_NOT_ON_CHANNEL,
        Numeric::NOT_ON_CHANNEL,
        Numeric::CHANNEL_FULL,
        Numeric::INVITE_ONLY,
        Numeric::BANNED,
        Numeric::BAD_KEY,
        Numeric::NOT_OPERATOR,
    ];

    pub fn from_code(code: u16) -> Option<Numeric> {
        Numeric::TABLE.into_iter().find(|n| n.code == code)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoticeKind {
    FakeMode,
    FakeJoin,
}

impl fmt::Display for NoticeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoticeKind::FakeMode => "fake_mode",
            NoticeKind::FakeJoin => "fake_join",
        })
    }
}

/// A `&channel` log entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerNotice {
    /// Server that dropped the offending change.
    pub server: ServerId,
    pub time: u64,
    pub channel: String,
    pub culprit: String,
    pub kind: NoticeKind,
    pub detail: String,
}

impl ServerNotice {
    pub fn line(&self) -> String {
        format!(
            "{} on {} by {} ({}) at {}",
            self.kind, self.channel, self.culprit, self.detail, self.server
        )
    }
}

/// A notice before the engine stamps it with server and time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoticeDraft {
    pub kind: NoticeKind,
    pub culprit: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Notify {
    pub to: ClientId,
    pub line: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenyReason {
    NoOps,
    NotCreator,
    NotOnChannel,
}

impl DenyReason {
    fn numeric(self) -> Numeric {
        match self {
            DenyReason::NoOps | DenyReason::NotCreator => Numeric::NOT_OPERATOR,
            DenyReason::NotOnChannel => Numeric::NOT_ON_CHANNEL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Permit,
    Deny(DenyReason),
}

/// One server's replica of a channel.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelView {
    pub name: String,
    pub members: BTreeSet<ClientId>,
    pub ops: BTreeSet<ClientId>,
    pub voices: BTreeSet<ClientId>,
    pub creator: Option<ClientId>,
    pub topic: Option<Topic>,
    pub key: Option<String>,
    pub limit: Option<u32>,
    pub flags: BTreeSet<Flag>,
    pub bans: BTreeSet<String>,
    pub exceptions: BTreeSet<String>,
}

/// The server applying a change, and the clients homed on it.
#[derive(Debug, Clone, Copy)]
pub struct Site<'a> {
    pub server: &'a ServerId,
    pub locals: &'a BTreeSet<ClientId>,
    /// Resolve +p/+s netjoin conflicts in favour of +s instead of swapping.
    pub ps_conflict_fixed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LocalOutcome {
    pub applied: bool,
    /// The change to relay to neighbouring servers, if any.
    pub relay: Option<ModeChange>,
    pub notify: Vec<Notify>,
    pub numerics: Vec<Numeric>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RemoteOutcome {
    pub applied: bool,
    pub forward: bool,
    pub notify: Vec<Notify>,
    pub notices: Vec<NoticeDraft>,
    pub numerics_to_origin: Vec<Numeric>,
}

impl ChannelView {
    pub fn new(name: impl Into<String>) -> Self {
        ChannelView {
            name: name.into(),
            ..Default::default()
        }
    }

    /// A channel no one is on does not exist.
    pub fn exists(&self) -> bool {
        !self.members.is_empty()
    }

    pub fn has(&self, flag: Flag) -> bool {
        self.flags.contains(&flag)
    }

    pub fn is_uncollidable(&self) -> bool {
        self.name.starts_with('!')
    }

    pub fn grants_of(&self, c: &ClientId) -> Grants {
        Grants {
            op: self.ops.contains(c),
            voice: self.voices.contains(c),
            creator: self.creator.as_ref() == Some(c),
        }
    }

    pub fn flag_string(&self) -> String {
        let mut s = String::from("+");
        s.extend(
            Flag::ALL
                .iter()
                .filter(|f| self.has(**f))
                .map(|f| f.letter()),
        );
        s
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        if !self.ops.is_subset(&self.members) {
            return Err(format!("{}: ops not a subset of members", self.name));
        }
        if !self.voices.is_subset(&self.members) {
            return Err(format!("{}: voices not a subset of members", self.name));
        }
        if let Some(c) = &self.creator {
            if !self.ops.contains(c) {
                return Err(format!("{}: creator {c} lacks ops", self.name));
            }
        }
        if self.has(Flag::Private) && self.has(Flag::Secret) {
            return Err(format!("{}: both +p and +s", self.name));
        }
        if !self.exists() && *self != ChannelView::new(self.name.clone()) {
            return Err(format!("{}: empty channel still carries state", self.name));
        }
        Ok(())
    }

    /// Names of the fields that differ from `other` (the name is ignored).
    pub fn differences(&self, other: &ChannelView) -> Vec<&'static str> {
        let mut out = Vec::new();
        let mut cmp = |name, differs: bool| {
            if differs {
                out.push(name)
            }
        };
        cmp("members", self.members != other.members);
        cmp("ops", self.ops != other.ops);
        cmp("voices", self.voices != other.voices);
        cmp("creator", self.creator != other.creator);
        cmp("topic", self.topic != other.topic);
        cmp("key", self.key != other.key);
        cmp("limit", self.limit != other.limit);
        cmp("flags", self.flags != other.flags);
        cmp("bans", self.bans != other.bans);
        cmp("exceptions", self.exceptions != other.exceptions);
        out
    }

    pub(crate) fn add_member(&mut self, who: &ClientId, grants: Grants) {
        self.members.insert(who.clone());
        if grants.op || grants.creator {
            self.ops.insert(who.clone());
        }
        if grants.voice {
            self.voices.insert(who.clone());
        }
        if grants.creator {
            self.creator = Some(who.clone());
        }
    }

    pub(crate) fn remove_member(&mut self, who: &ClientId) {
        self.members.remove(who);
        self.ops.remove(who);
        self.voices.remove(who);
        if self.creator.as_ref() == Some(who) {
            self.creator = None;
        }
        if !self.exists() {
            *self = ChannelView::new(std::mem::take(&mut self.name));
        }
    }

    /// Would applying `kind` change anything?
    pub fn has_effect(&self, kind: &ChangeKind) -> bool {
        match kind {
            ChangeKind::Flag { flag, set } => self.has(*flag) != *set,
            ChangeKind::Topic(t) => self.topic.as_ref() != Some(t),
            ChangeKind::Key(k) => &self.key != k,
            ChangeKind::Limit(l) => &self.limit != l,
            ChangeKind::Voice { target, set } => self.voices.contains(target) != *set,
            ChangeKind::Op { target, set } => self.ops.contains(target) != *set,
            ChangeKind::Creator { target, set } => (self.creator.as_ref() == Some(target)) != *set,
            ChangeKind::List { list, mask, add } => {
                let l = match list {
                    ListKind::Ban => &self.bans,
                    ListKind::Exception => &self.exceptions,
                };
                l.contains(mask) != *add
            }
            ChangeKind::Kick { target } => self.members.contains(target),
            ChangeKind::Join { who, .. } => !self.members.contains(who),
            ChangeKind::Part { who } => self.members.contains(who),
            ChangeKind::Privmsg { .. } => false,
        }
    }

    /// Mutates the view. Targets that are not members are ignored.
    pub fn apply_effect(&mut self, kind: &ChangeKind) {
        if let Some(target) = kind.target() {
            if !self.members.contains(target) {
                return;
            }
        }
        match kind {
            ChangeKind::Topic(t) => self.topic = Some(t.clone()),
            ChangeKind::Key(k) => self.key = k.clone(),
            ChangeKind::Limit(l) => self.limit = *l,
            ChangeKind::Voice { target, set } => set_member(&mut self.voices, target, *set),
            ChangeKind::Op { target, set } => {
                set_member(&mut self.ops, target, *set);
                if !set && self.creator.as_ref() == Some(target) {
                    self.creator = None;
                }
            }
            ChangeKind::Creator { target, set } => {
                if *set {
                    self.creator = Some(target.clone());
                    self.ops.insert(target.clone());
                } else if self.creator.as_ref() == Some(target) {
                    self.creator = None;
                }
            }
            ChangeKind::Flag { flag, set } => {
                if *set {
                    match flag {
                        Flag::Private => {
                            self.flags.remove(&Flag::Secret);
                        }
                        Flag::Secret => {
                            self.flags.remove(&Flag::Private);
                        }
                        _ => {}
                    }
                    self.flags.insert(*flag);
                } else {
                    self.flags.remove(flag);
                }
            }
            ChangeKind::List { list, mask, add } => {
                let l = match list {
                    ListKind::Ban => &mut self.bans,
                    ListKind::Exception => &mut self.exceptions,
                };
                if *add {
                    l.insert(mask.clone());
                } else {
                    l.remove(mask);
                }
            }
            ChangeKind::Kick { target } => self.remove_member(target),
            ChangeKind::Join { who, grants, .. } => self.add_member(who, *grants),
            ChangeKind::Part { who } => self.remove_member(who),
            ChangeKind::Privmsg { .. } => {}
        }
    }

    pub(crate) fn local_members(&self, site: &Site<'_>) -> Vec<ClientId> {
        self.members
            .iter()
            .filter(|m| site.locals.contains(*m))
            .cloned()
            .collect()
    }
}

fn set_member(set: &mut BTreeSet<ClientId>, who: &ClientId, on: bool) {
    if on {
        set.insert(who.clone());
    } else {
        set.remove(who);
    }
}

/// Display nick for `speaker` on this view: everyone is `anonymous` on a
/// `+a` channel.
pub fn render_nick(view: &ChannelView, speaker: &str) -> String {
    if view.has(Flag::Anonymous) {
        "anonymous".into()
    } else {
        speaker.to_owned()
    }
}

/// The line clients on this view see for `change`.
pub fn render_line(view: &ChannelView, change: &ModeChange) -> String {
    let chan = &change.channel;
    let nick = render_nick(view, change.actor.name());
    match &change.kind {
        ChangeKind::Topic(t) => {
            let setter = match change.actor {
                Actor::Client(_) => nick,
                Actor::Server(_) => render_nick(view, &t.setter),
            };
            format!("-X- Topic ({chan}): changed by {setter}: {}", t.text)
        }
        ChangeKind::Kick { target } => format!("-+- {target} was kicked from {chan} by {nick}"),
        ChangeKind::Join { who, .. } => {
            format!("--> {} has joined {chan}", render_nick(view, who.as_str()))
        }
        ChangeKind::Part { who } => {
            format!("<-- {} has left {chan}", render_nick(view, who.as_str()))
        }
        ChangeKind::Privmsg { text, .. } => format!("<{nick}> {text}"),
        other => format!("-+- mode/{chan} [{}] by {nick}", other.mode_text()),
    }
}

/// Whether a change by `actor` is allowed on this view.
pub fn authorize(view: &ChannelView, actor: &Actor, kind: &ChangeKind) -> Verdict {
    let Actor::Client(who) = actor else {
        return Verdict::Permit;
    };
    let op = view.ops.contains(who);
    let need_ops = if op {
        Verdict::Permit
    } else {
        Verdict::Deny(DenyReason::NoOps)
    };
    match kind {
        ChangeKind::Join { .. } | ChangeKind::Part { .. } | ChangeKind::Privmsg { .. } => {
            Verdict::Permit
        }
        ChangeKind::Topic(_) => {
            if view.has(Flag::TopicControl) {
                need_ops
            } else if view.members.contains(who) {
                Verdict::Permit
            } else {
                Verdict::Deny(DenyReason::NotOnChannel)
            }
        }
        ChangeKind::Flag {
            flag: Flag::Anonymous,
            ..
        }
        | ChangeKind::Creator { .. } => {
            if view.creator.as_ref() == Some(who) {
                Verdict::Permit
            } else {
                Verdict::Deny(DenyReason::NotCreator)
            }
        }
        _ => need_ops,
    }
}

/// Message check. `claims_membership` is whether the sender's own server
/// lists it as a member; a sender that believes it is joined but is missing
/// here gets 442 rather than 404.
pub fn privmsg_check(
    view: &ChannelView,
    sender: &ClientId,
    claims_membership: bool,
) -> Result<(), Numeric> {
    let member = view.members.contains(sender);
    if view.has(Flag::NoExternal) && !member {
        return Err(if claims_membership {
            Numeric::NOT_ON_CHANNEL
        } else {
            Numeric::CANNOT_SEND
        });
    }
    if view.has(Flag::Moderated) && !view.ops.contains(sender) && !view.voices.contains(sender) {
        return Err(Numeric::CANNOT_SEND);
    }
    if view.bans.contains(sender.as_str()) && !view.exceptions.contains(sender.as_str()) {
        return Err(Numeric::CANNOT_SEND);
    }
    Ok(())
}

fn notify_all(to: Vec<ClientId>, line: String) -> Vec<Notify> {
    to.into_iter()
        .map(|to| Notify {
            to,
            line: line.clone(),
        })
        .collect()
}

fn reject(numeric: Numeric) -> LocalOutcome {
    LocalOutcome {
        numerics: vec![numeric],
        ..Default::default()
    }
}

/// Applies a command from a client homed on `site`.
pub fn apply_local(view: &mut ChannelView, site: &Site<'_>, change: &ModeChange) -> LocalOutcome {
    let Actor::Client(actor) = &change.actor else {
        panic!("apply_local takes client commands only");
    };
    if view.name.is_empty() {
        view.name.clone_from(&change.channel);
    }
    match &change.kind {
        ChangeKind::Join { who, key, .. } => {
            if view.members.contains(who) {
                return LocalOutcome::default();
            }
            let grants = if !view.exists() {
                Grants {
                    op: true,
                    voice: false,
                    creator: view.is_uncollidable(),
                }
            } else {
                if view.has(Flag::InviteOnly) {
                    return reject(Numeric::INVITE_ONLY);
                }
                if view.key.is_some() && view.key != *key {
                    return reject(Numeric::BAD_KEY);
                }
                if view.limit.is_some_and(|l| view.members.len() >= l as usize) {
                    return reject(Numeric::CHANNEL_FULL);
                }
                if view.bans.contains(who.as_str()) && !view.exceptions.contains(who.as_str()) {
                    return reject(Numeric::BANNED);
                }
                Grants::default()
            };
            let relayed = ModeChange {
                kind: ChangeKind::Join {
                    who: who.clone(),
                    key: key.clone(),
                    grants,
                },
                ..change.clone()
            };
            view.apply_effect(&relayed.kind);
            let line = render_line(view, &relayed);
            LocalOutcome {
                applied: true,
                notify: notify_all(view.local_members(site), line),
                relay: Some(relayed),
                numerics: vec![],
            }
        }
        _ if !view.exists() => reject(Numeric::NO_SUCH_CHANNEL),
        ChangeKind::Privmsg { text, .. } => {
            let claims = view.members.contains(actor);
            if let Err(n) = privmsg_check(view, actor, claims) {
                return reject(n);
            }
            let line = render_line(view, change);
            let to = view
                .local_members(site)
                .into_iter()
                .filter(|m| m != actor)
                .collect();
            LocalOutcome {
                applied: true,
                relay: Some(ModeChange {
                    kind: ChangeKind::Privmsg {
                        text: text.clone(),
                        claims_membership: claims,
                    },
                    ..change.clone()
                }),
                notify: notify_all(to, line),
                numerics: vec![],
            }
        }
        ChangeKind::Part { who } => {
            if !view.members.contains(who) {
                return reject(Numeric::NOT_ON_CHANNEL);
            }
            let line = render_line(view, change);
            let to = view.local_members(site);
            view.apply_effect(&change.kind);
            LocalOutcome {
                applied: true,
                relay: Some(change.clone()),
                notify: notify_all(to, line),
                numerics: vec![],
            }
        }
        kind => {
            if let Verdict::Deny(reason) = authorize(view, &change.actor, kind) {
                return reject(reason.numeric());
            }
            if let Some(target) = kind.target() {
                if !view.members.contains(target) {
                    return reject(Numeric::THEY_NOT_ON_CHANNEL);
                }
            }
            if kind.class() == Some(ModeClass::Toggle) && !view.has_effect(kind) {
                return LocalOutcome::default();
            }
            let to = view.local_members(site);
            view.apply_effect(kind);
            let line = render_line(view, change);
            LocalOutcome {
                applied: true,
                relay: Some(change.clone()),
                notify: notify_all(to, line),
                numerics: vec![],
            }
        }
    }
}

/// Applies a change that arrived over a server link.
pub fn apply_remote(view: &mut ChannelView, site: &Site<'_>, change: &ModeChange) -> RemoteOutcome {
    if view.name.is_empty() {
        view.name.clone_from(&change.channel);
    }
    let kind = &change.kind;
    match kind {
        ChangeKind::Join { who, .. } => {
            if view.members.contains(who) {
                return RemoteOutcome {
                    notices: vec![NoticeDraft {
                        kind: NoticeKind::FakeJoin,
                        culprit: who.to_string(),
                        detail: "join".into(),
                    }],
                    ..Default::default()
                };
            }
            view.apply_effect(kind);
            let line = render_line(view, change);
            let to = view
                .local_members(site)
                .into_iter()
                .filter(|m| m != who)
                .collect();
            RemoteOutcome {
                applied: true,
                forward: true,
                notify: notify_all(to, line),
                ..Default::default()
            }
        }
        ChangeKind::Part { who } => {
            if !view.members.contains(who) {
                return RemoteOutcome {
                    forward: true,
                    ..Default::default()
                };
            }
            let line = render_line(view, change);
            let to = view
                .local_members(site)
                .into_iter()
                .filter(|m| m != who)
                .collect();
            view.apply_effect(kind);
            RemoteOutcome {
                applied: true,
                forward: true,
                notify: notify_all(to, line),
                ..Default::default()
            }
        }
        ChangeKind::Privmsg {
            claims_membership, ..
        } => {
            let sender = change.actor.client().expect("messages come from clients");
            if let Err(n) = privmsg_check(view, sender, *claims_membership) {
                return RemoteOutcome {
                    numerics_to_origin: vec![n],
                    ..Default::default()
                };
            }
            let line = render_line(view, change);
            let to = view
                .local_members(site)
                .into_iter()
                .filter(|m| m != sender)
                .collect();
            RemoteOutcome {
                applied: true,
                forward: true,
                notify: notify_all(to, line),
                ..Default::default()
            }
        }
        _ => {
            if authorize(view, &change.actor, kind) != Verdict::Permit {
                return RemoteOutcome {
                    notices: vec![NoticeDraft {
                        kind: NoticeKind::FakeMode,
                        culprit: change.actor.to_string(),
                        detail: kind.mode_text(),
                    }],
                    ..Default::default()
                };
            }
            let class = kind.class();
            if class == Some(ModeClass::Toggle) && !view.has_effect(kind) {
                return RemoteOutcome::default();
            }
            if change.burst && site.ps_conflict_fixed {
                if let ChangeKind::Flag {
                    flag: Flag::Private,
                    set: true,
                } = kind
                {
                    if view.has(Flag::Secret) {
                        return RemoteOutcome::default();
                    }
                }
            }
            if let Some(target) = kind.target() {
                if !view.members.contains(target) {
                    return RemoteOutcome {
                        forward: true,
                        ..Default::default()
                    };
                }
            }
            let to = view.local_members(site);
            view.apply_effect(kind);
            let line = render_line(view, change);
            RemoteOutcome {
                applied: true,
                forward: true,
                notify: notify_all(to, line),
                ..Default::default()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(n: &str) -> ClientId {
        ClientId::from(n)
    }

    fn view(members: &[&str], ops: &[&str]) -> ChannelView {
        let mut v = ChannelView::new("#channel");
        v.members = members.iter().map(|m| c(m)).collect();
        v.ops = ops.iter().map(|m| c(m)).collect();
        v
    }

    fn locals(names: &[&str]) -> BTreeSet<ClientId> {
        names.iter().map(|n| c(n)).collect()
    }

    fn site<'a>(server: &'a ServerId, locals: &'a BTreeSet<ClientId>) -> Site<'a> {
        Site {
            server,
            locals,
            ps_conflict_fixed: true,
        }
    }

    fn topic(by: &str, text: &str) -> ModeChange {
        ModeChange::by(
            &c(by),
            "#channel",
            ChangeKind::Topic(Topic {
                text: text.into(),
                setter: by.into(),
            }),
        )
    }

    fn deop(by: &str, target: &str) -> ModeChange {
        ModeChange::by(
            &c(by),
            "#channel",
            ChangeKind::Op {
                target: c(target),
                set: false,
            },
        )
    }

    fn flag(by: &str, flag: Flag, set: bool) -> ModeChange {
        ModeChange::by(&c(by), "#channel", ChangeKind::Flag { flag, set })
    }

    #[test]
    fn classification() {
        assert_eq!(classify(&topic("a", "x")), Some(ModeClass::Flowing));
        assert_eq!(classify(&deop("a", "x")), Some(ModeClass::Colliding));
        assert_eq!(
            classify(&flag("a", Flag::Moderated, true)),
            Some(ModeClass::Toggle)
        );
        for f in [
            Flag::InviteOnly,
            Flag::Moderated,
            Flag::NoExternal,
            Flag::TopicControl,
        ] {
            assert_eq!(
                ChangeKind::Flag {
                    flag: f,
                    set: false
                }
                .class(),
                Some(ModeClass::Toggle)
            );
        }
        for f in [Flag::Private, Flag::Secret] {
            assert_eq!(
                ChangeKind::Flag { flag: f, set: true }.class(),
                Some(ModeClass::Flowing)
            );
        }
        assert_eq!(
            ChangeKind::Key(Some("k".into())).class(),
            Some(ModeClass::Flowing)
        );
        assert_eq!(
            ChangeKind::Limit(Some(10)).class(),
            Some(ModeClass::Flowing)
        );
        assert_eq!(
            ChangeKind::Voice {
                target: c("x"),
                set: true
            }
            .class(),
            Some(ModeClass::Flowing)
        );
        assert_eq!(
            ChangeKind::Kick { target: c("x") }.class(),
            Some(ModeClass::Colliding)
        );
        assert_eq!(
            ChangeKind::Creator {
                target: c("x"),
                set: true
            }
            .class(),
            Some(ModeClass::Colliding)
        );
        assert_eq!(ChangeKind::Part { who: c("x") }.class(), None);
    }

    #[test]
    fn authorization() {
        let v = view(&["a", "x"], &["a"]);
        let a = Actor::Client(c("a"));
        let x = Actor::Client(c("x"));
        let kick = ChangeKind::Kick { target: c("x") };
        assert_eq!(authorize(&v, &a, &kick), Verdict::Permit);
        assert_eq!(authorize(&v, &x, &kick), Verdict::Deny(DenyReason::NoOps));
        assert_eq!(authorize(&v, &x, &topic("x", "t").kind), Verdict::Permit);
        let mut t = v.clone();
        t.flags.insert(Flag::TopicControl);
        assert_eq!(
            authorize(&t, &x, &topic("x", "t").kind),
            Verdict::Deny(DenyReason::NoOps)
        );
        assert_eq!(
            authorize(&v, &Actor::Server("A".into()), &kick),
            Verdict::Permit
        );
        let outsider = Actor::Client(c("q"));
        assert_eq!(
            authorize(&v, &outsider, &topic("q", "t").kind),
            Verdict::Deny(DenyReason::NotOnChannel)
        );
    }

    #[test]
    fn no_effect_toggle_is_rejected_and_not_relayed() {
        let server = ServerId::from("A");
        let loc = locals(&["a"]);
        let mut v = view(&["a"], &["a"]);
        let out = apply_local(
            &mut v,
            &site(&server, &loc),
            &flag("a", Flag::InviteOnly, false),
        );
        assert!(!out.applied);
        assert!(out.relay.is_none());
        assert!(out.numerics.is_empty());
        let out = apply_local(
            &mut v,
            &site(&server, &loc),
            &flag("a", Flag::InviteOnly, true),
        );
        assert!(out.applied && out.relay.is_some());
    }

    #[test]
    fn local_topic_is_applied_and_shown() {
        let server = ServerId::from("A");
        let loc = locals(&["a"]);
        let mut v = view(&["a", "x"], &["a", "x"]);
        let out = apply_local(&mut v, &site(&server, &loc), &topic("a", "I am a!"));
        assert!(out.applied && out.relay.is_some());
        assert_eq!(
            out.notify,
            vec![Notify {
                to: c("a"),
                line: "-X- Topic (#channel): changed by a: I am a!".into()
            }]
        );
    }

    #[test]
    fn identical_limit_still_flows() {
        let server = ServerId::from("A");
        let loc = locals(&["a"]);
        let mut v = view(&["a"], &["a"]);
        let set = ModeChange::by(&c("a"), "#channel", ChangeKind::Limit(Some(10)));
        assert!(apply_local(&mut v, &site(&server, &loc), &set)
            .relay
            .is_some());
        assert!(apply_local(&mut v, &site(&server, &loc), &set)
            .relay
            .is_some());
        assert_eq!(v.limit, Some(10));
    }

    #[test]
    fn local_errors() {
        let server = ServerId::from("A");
        let loc = locals(&["a", "x"]);
        let s = site(&server, &loc);
        let mut v = view(&["a", "x"], &["a"]);
        assert_eq!(
            apply_local(&mut v, &s, &deop("x", "a")).numerics,
            vec![Numeric::NOT_OPERATOR]
        );
        assert_eq!(
            apply_local(&mut v, &s, &deop("a", "q")).numerics,
            vec![Numeric::THEY_NOT_ON_CHANNEL]
        );
        let mut empty = ChannelView::new("#nowhere");
        let out = apply_local(
            &mut empty,
            &s,
            &ModeChange::by(&c("a"), "#nowhere", ChangeKind::Limit(None)),
        );
        assert_eq!(out.numerics, vec![Numeric::NO_SUCH_CHANNEL]);
        let part = ModeChange::by(&c("q"), "#channel", ChangeKind::Part { who: c("q") });
        assert_eq!(
            apply_local(&mut v, &s, &part).numerics,
            vec![Numeric::NOT_ON_CHANNEL]
        );
    }

    #[test]
    fn later_remote_topic_overwrites() {
        let server = ServerId::from("A");
        let loc = locals(&["a"]);
        let s = site(&server, &loc);
        let mut v = view(&["a", "x"], &["a", "x"]);
        apply_local(&mut v, &s, &topic("a", "I am a!"));
        let out = apply_remote(&mut v, &s, &topic("x", "I am x!"));
        assert!(out.applied && out.forward);
        assert_eq!(v.topic.as_ref().unwrap().text, "I am x!");
        assert_eq!(
            out.notify[0].line,
            "-X- Topic (#channel): changed by x: I am x!"
        );
    }

    #[test]
    fn remote_deop_from_deopped_actor_dies() {
        let server = ServerId::from("X");
        let loc = locals(&["x"]);
        let s = site(&server, &loc);
        let mut v = view(&["a", "x"], &["a", "x"]);
        apply_local(&mut v, &s, &deop("x", "a"));
        let out = apply_remote(&mut v, &s, &deop("a", "x"));
        assert!(!out.applied && !out.forward);
        assert_eq!(out.notices.len(), 1);
        assert_eq!(out.notices[0].kind, NoticeKind::FakeMode);
        assert_eq!(out.notices[0].culprit, "a");
        assert_eq!(v.ops, locals(&["x"]));
    }

    #[test]
    fn rejoin_of_present_member_is_a_fake_join() {
        let server = ServerId::from("C");
        let loc = locals(&["c"]);
        let s = site(&server, &loc);
        let mut v = view(&["a", "b", "c"], &["c"]);
        let join = ModeChange::by(
            &c("a"),
            "#channel",
            ChangeKind::Join {
                who: c("a"),
                key: None,
                grants: Grants::default(),
            },
        );
        let out = apply_remote(&mut v, &s, &join);
        assert!(!out.forward);
        assert_eq!(out.notices[0].kind, NoticeKind::FakeJoin);
        assert_eq!(out.notices[0].culprit, "a");
        assert!(out.notify.is_empty());
    }

    #[test]
    fn toggle_remote_no_effect_is_dropped_silently() {
        let server = ServerId::from("A");
        let loc = locals(&["a"]);
        let s = site(&server, &loc);
        let mut v = view(&["a", "x"], &["a", "x"]);
        v.flags.insert(Flag::Moderated);
        let out = apply_remote(&mut v, &s, &flag("x", Flag::Moderated, true));
        assert_eq!(out, RemoteOutcome::default());
    }

    #[test]
    fn message_checks() {
        let mut v = view(&["a", "v"], &["a"]);
        v.flags.insert(Flag::Moderated);
        v.voices.insert(c("v"));
        assert_eq!(privmsg_check(&v, &c("v"), true), Ok(()));
        assert_eq!(privmsg_check(&v, &c("a"), true), Ok(()));
        v.voices.clear();
        assert_eq!(privmsg_check(&v, &c("v"), true), Err(Numeric::CANNOT_SEND));
        let open = view(&["a"], &[]);
        assert_eq!(privmsg_check(&open, &c("outsider"), false), Ok(()));
        let mut n = open.clone();
        n.flags.insert(Flag::NoExternal);
        assert_eq!(
            privmsg_check(&n, &c("outsider"), false),
            Err(Numeric::CANNOT_SEND)
        );
        assert_eq!(
            privmsg_check(&n, &c("kicked"), true),
            Err(Numeric::NOT_ON_CHANNEL)
        );
        let mut banned = open.clone();
        banned.bans.insert("z".into());
        assert_eq!(
            privmsg_check(&banned, &c("z"), false),
            Err(Numeric::CANNOT_SEND)
        );
        banned.exceptions.insert("z".into());
        assert_eq!(privmsg_check(&banned, &c("z"), false), Ok(()));
    }

    #[test]
    fn anonymous_rendering() {
        let mut v = view(&["a"], &[]);
        assert_eq!(render_nick(&v, "a"), "a");
        v.flags.insert(Flag::Anonymous);
        assert_eq!(render_nick(&v, "a"), "anonymous");
    }

    #[test]
    fn deop_of_creator_drops_creator_status() {
        let mut v = view(&["b"], &["b"]);
        v.creator = Some(c("b"));
        v.apply_effect(&ChangeKind::Op {
            target: c("b"),
            set: false,
        });
        assert_eq!(v.creator, None);
        v.check_invariants().unwrap();
    }

    #[test]
    fn first_join_creates_and_ops() {
        let server = ServerId::from("A");
        let loc = locals(&["a"]);
        let s = site(&server, &loc);
        let mut v = ChannelView::new("!chan");
        let join = ModeChange::by(
            &c("a"),
            "!chan",
            ChangeKind::Join {
                who: c("a"),
                key: None,
                grants: Grants::default(),
            },
        );
        let out = apply_local(&mut v, &s, &join);
        let relayed = out.relay.unwrap();
        assert!(matches!(
            relayed.kind,
            ChangeKind::Join {
                grants: Grants {
                    op: true,
                    creator: true,
                    ..
                },
                ..
            }
        ));
        assert_eq!(v.creator, Some(c("a")));
        v.check_invariants().unwrap();
    }

    #[test]
    fn join_restrictions() {
        let server = ServerId::from("A");
        let loc = locals(&["n"]);
        let s = site(&server, &loc);
        let join = |key: Option<&str>| {
            ModeChange::by(
                &c("n"),
                "#channel",
                ChangeKind::Join {
                    who: c("n"),
                    key: key.map(Into::into),
                    grants: Grants::default(),
                },
            )
        };
        let mut v = view(&["a"], &["a"]);
        v.flags.insert(Flag::InviteOnly);
        assert_eq!(
            apply_local(&mut v.clone(), &s, &join(None)).numerics,
            vec![Numeric::INVITE_ONLY]
        );
        v.flags.clear();
        v.key = Some("sekrit".into());
        assert_eq!(
            apply_local(&mut v.clone(), &s, &join(None)).numerics,
            vec![Numeric::BAD_KEY]
        );
        assert!(apply_local(&mut v.clone(), &s, &join(Some("sekrit"))).applied);
        v.key = None;
        v.limit = Some(1);
        assert_eq!(
            apply_local(&mut v.clone(), &s, &join(None)).numerics,
            vec![Numeric::CHANNEL_FULL]
        );
        v.limit = None;
        v.bans.insert("n".into());
        assert_eq!(
            apply_local(&mut v.clone(), &s, &join(None)).numerics,
            vec![Numeric::BANNED]
        );
    }

    #[test]
    fn last_member_leaving_destroys_state() {
        let mut v = view(&["a"], &["a"]);
        v.limit = Some(3);
        v.apply_effect(&ChangeKind::Part { who: c("a") });
        assert_eq!(v, ChannelView::new("#channel"));
    }

    #[test]
    fn p_and_s_exclude_each_other() {
        let mut v = view(&["a"], &["a"]);
        v.apply_effect(&ChangeKind::Flag {
            flag: Flag::Private,
            set: true,
        });
        v.apply_effect(&ChangeKind::Flag {
            flag: Flag::Secret,
            set: true,
        });
        assert_eq!(v.flag_string(), "+s");
        v.check_invariants().unwrap();
    }
}
