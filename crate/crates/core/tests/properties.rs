use std::collections::{BTreeMap, BTreeSet, VecDeque};

use proptest::prelude::*;

use ircdesync::channel::{ChangeKind, ChannelView, Flag, ModeChange, Topic};
use ircdesync::desync::{
    boundary_links, ground_truth_boundaries, one_user_desync, Collide, DesyncPlan,
};
use ircdesync::engine::{Config, World};
use ircdesync::scenario::{builtin, parse_scenario, run_observed};
use ircdesync::splitjoin::{netjoin, netsplit};
use ircdesync::topology::{Client, ClientId, Link, ServerId, Ticks, Topology};

fn names(n: usize) -> Vec<ServerId> {
    (0..n).map(|i| ServerId::new(format!("S{i}"))).collect()
}

/// A tree on `n` servers plus per-link latencies, from a Prüfer code.
fn tree() -> impl Strategy<Value = Topology> {
    (2usize..=7).prop_flat_map(|n| {
        (
            proptest::collection::vec(0..n, n - 2),
            proptest::collection::vec(1u64..=5, n - 1),
        )
            .prop_map(move |(seq, lats)| {
                let mut lats = lats.into_iter();
                Topology::from_pruefer(&names(n), &seq, 1)
                    .with_latencies(|_| lats.next().unwrap())
                    .unwrap()
            })
    })
}

/// Breadth-first search over the link list, independent of `Topology::path`.
fn bfs_path(t: &Topology, s: &ServerId, d: &ServerId) -> Vec<ServerId> {
    let mut adj: BTreeMap<ServerId, Vec<ServerId>> = BTreeMap::new();
    for (l, _) in t.links() {
        let (x, y) = l.endpoints();
        adj.entry(x.clone()).or_default().push(y.clone());
        adj.entry(y.clone()).or_default().push(x.clone());
    }
    let mut prev: BTreeMap<ServerId, ServerId> = BTreeMap::new();
    let mut seen = BTreeSet::from([s.clone()]);
    let mut queue = VecDeque::from([s.clone()]);
    while let Some(u) = queue.pop_front() {
        for v in adj.get(&u).into_iter().flatten() {
            if seen.insert(v.clone()) {
                prev.insert(v.clone(), u.clone());
                queue.push_back(v.clone());
            }
        }
    }
    let mut path = vec![d.clone()];
    while path.last() != Some(s) {
        path.push(prev[path.last().unwrap()].clone());
    }
    path.reverse();
    path
}

fn chain_world(n: usize) -> World {
    let servers: Vec<String> = (0..n).map(|i| format!("S{i}")).collect();
    let refs: Vec<&str> = servers.iter().map(String::as_str).collect();
    let clients = (0..n)
        .map(|i| Client::new(format!("c{i}"), format!("S{i}")))
        .collect();
    let topo = Topology::chain(&refs, 1, clients).unwrap();
    let mut world = World::new(topo.clone(), Config::default());
    let mut view = ChannelView::new("#p");
    view.members = topo.clients().map(|c| c.nick.clone()).collect();
    view.ops = view.members.clone();
    world.install_channel(view).unwrap();
    world
}

#[derive(Debug, Clone)]
enum Cmd {
    Topic(u8),
    Key(Option<u8>),
    Limit(Option<u32>),
    Flag(Flag, bool),
    Op(usize, bool),
    Voice(usize, bool),
    Kick(usize),
    Ban(u8, bool),
}

fn cmd() -> impl Strategy<Value = Cmd> {
    let flag = prop::sample::select(vec![
        Flag::InviteOnly,
        Flag::Moderated,
        Flag::NoExternal,
        Flag::TopicControl,
        Flag::Private,
        Flag::Secret,
    ]);
    prop_oneof![
        (0u8..3).prop_map(Cmd::Topic),
        proptest::option::of(0u8..3).prop_map(Cmd::Key),
        proptest::option::of(5u32..8).prop_map(Cmd::Limit),
        (flag, any::<bool>()).prop_map(|(f, s)| Cmd::Flag(f, s)),
        (0usize..6, any::<bool>()).prop_map(|(t, s)| Cmd::Op(t, s)),
        (0usize..6, any::<bool>()).prop_map(|(t, s)| Cmd::Voice(t, s)),
        (0usize..6).prop_map(Cmd::Kick),
        (0u8..3, any::<bool>()).prop_map(|(m, s)| Cmd::Ban(m, s)),
    ]
}

fn change(actor: usize, n: usize, c: &Cmd) -> ModeChange {
    let nick = |i: usize| ClientId::new(format!("c{}", i % n));
    let kind = match c {
        Cmd::Topic(t) => ChangeKind::Topic(Topic {
            text: format!("topic {t}"),
            setter: nick(actor).to_string(),
        }),
        Cmd::Key(k) => ChangeKind::Key(k.map(|k| format!("key{k}"))),
        Cmd::Limit(l) => ChangeKind::Limit(*l),
        Cmd::Flag(f, s) => ChangeKind::Flag { flag: *f, set: *s },
        Cmd::Op(t, s) => ChangeKind::Op {
            target: nick(*t),
            set: *s,
        },
        Cmd::Voice(t, s) => ChangeKind::Voice {
            target: nick(*t),
            set: *s,
        },
        Cmd::Kick(t) => ChangeKind::Kick { target: nick(*t) },
        Cmd::Ban(m, add) => ChangeKind::List {
            list: ircdesync::channel::ListKind::Ban,
            mask: format!("*!*@host{m}"),
            add: *add,
        },
    };
    ModeChange::by(&nick(actor), "#p", kind)
}

/// Issues each command on its own and lets it settle, so no two changes
/// are ever in flight together.
fn apply_settled(world: &mut World, n: usize, cmds: &[(usize, Cmd)]) {
    for (actor, c) in cmds {
        let now = world.now();
        world.issue(now, change(*actor, n, c)).unwrap();
        world.run_until_quiescent().unwrap();
    }
}

fn views(world: &World) -> Vec<ChannelView> {
    world
        .topology()
        .servers()
        .iter()
        .map(|s| world.view_or_empty(s, "#p"))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn paths_match_breadth_first_search(t in tree(), i in 0usize..7, j in 0usize..7) {
        let servers = t.servers();
        let (s, d) = (&servers[i % servers.len()], &servers[j % servers.len()]);
        let path = t.path(s, d).unwrap();
        prop_assert_eq!(&path, &bfs_path(&t, s, d));
        prop_assert_eq!(t.hops(s, d).unwrap(), path.len() - 1);
        let sum: Ticks = path
            .windows(2)
            .map(|w| t.link_latency(&Link::new(w[0].clone(), w[1].clone())).unwrap())
            .sum();
        prop_assert_eq!(t.path_latency(s, d).unwrap(), sum);
        let diameter = servers
            .iter()
            .flat_map(|a| servers.iter().map(move |b| (a, b)))
            .map(|(a, b)| bfs_path(&t, a, b).len() - 1)
            .max()
            .unwrap();
        prop_assert_eq!(t.hop_diameter(), diameter);
    }

    #[test]
    fn one_user_placement_on_weighted_trees(t in tree(), i in 0usize..7, j in 0usize..7, k in 0usize..7, kick in any::<bool>()) {
        let servers = t.servers().to_vec();
        let (ha, hb) = (servers[i % servers.len()].clone(), servers[j % servers.len()].clone());
        prop_assume!(ha != hb);
        let path = t.path_links(&ha, &hb).unwrap();
        let target = path[k % path.len()].clone();
        let topo = t.with_clients([Client::new("a", ha.as_str()), Client::new("b", hb.as_str())]).unwrap();
        let mut world = World::new(topo, Config::default());
        let mut view = ChannelView::new("#p");
        view.members = BTreeSet::from([ClientId::from("a"), ClientId::from("b")]);
        view.ops = view.members.clone();
        world.install_channel(view).unwrap();
        let how = if kick { Collide::Kick } else { Collide::Deop };
        let plan = DesyncPlan::new("#p", &"a".into(), &"b".into(), target.clone(), how);
        one_user_desync(&mut world, &plan).unwrap();
        world.run_until_quiescent().unwrap();
        prop_assert_eq!(boundary_links(&world, "#p"), BTreeSet::from([target]));
    }

    #[test]
    fn views_keep_their_invariants(
        n in 3usize..=6,
        cmds in proptest::collection::vec((0usize..6, 0u64..4, cmd()), 1..12),
    ) {
        let mut world = chain_world(n);
        for (actor, at, c) in &cmds {
            // Concurrent commands on purpose: invariants must survive races too.
            world.issue(*at, change(*actor, n, c)).unwrap();
        }
        world.run_until_quiescent().unwrap();
        for v in views(&world) {
            prop_assert!(v.check_invariants().is_ok(), "{:?}", v.check_invariants());
        }
    }

    #[test]
    fn split_then_immediate_join_is_identity(
        n in 2usize..=6,
        k in 0usize..5,
        cmds in proptest::collection::vec((0usize..6, cmd()), 0..10),
    ) {
        let mut world = chain_world(n);
        apply_settled(&mut world, n, &cmds);
        let before = views(&world);
        let link = Link::new(format!("S{}", k % (n - 1)), format!("S{}", k % (n - 1) + 1));
        let now = world.now();
        let rec = netsplit(&mut world, &link, now).unwrap();
        netjoin(&mut world, &rec, now).unwrap();
        world.run_until_quiescent().unwrap();
        prop_assert_eq!(views(&world), before);
    }

    #[test]
    fn netjoin_leaves_only_flowing_differences(
        n in 2usize..=6,
        k in 0usize..5,
        cmds in proptest::collection::vec((0usize..6, cmd()), 0..14),
    ) {
        let mut world = chain_world(n);
        let link = Link::new(format!("S{}", k % (n - 1)), format!("S{}", k % (n - 1) + 1));
        let rec = netsplit(&mut world, &link, 0).unwrap();
        apply_settled(&mut world, n, &cmds);
        let side_views: Vec<ChannelView> = [rec.link.endpoints().0, rec.link.endpoints().1]
            .iter()
            .map(|s| world.view_or_empty(s, "#p"))
            .collect();
        let now = world.now();
        netjoin(&mut world, &rec, now).unwrap();
        world.run_until_quiescent().unwrap();

        let union: BTreeSet<ClientId> = side_views.iter().flat_map(|v| v.members.iter().cloned()).collect();
        for v in views(&world) {
            prop_assert_eq!(&v.members, &union);
        }
        // Each client keeps the privileges its own side gave it.
        for (side, servers) in [(&side_views[0], &rec.sides.0), (&side_views[1], &rec.sides.1)] {
            for m in &side.members {
                let home = &world.topology().client(m).unwrap().home;
                if !servers.contains(home) {
                    continue;
                }
                for v in views(&world) {
                    prop_assert_eq!(v.ops.contains(m), side.ops.contains(m));
                }
            }
        }
        for b in ground_truth_boundaries(&world, "#p") {
            for field in &b.difference {
                let ok = match *field {
                    "topic" | "key" | "limit" => true,
                    "flags" => {
                        let (p, q) = b.link.endpoints();
                        let fp = world.view_or_empty(p, "#p").flags;
                        let fq = world.view_or_empty(q, "#p").flags;
                        fp.symmetric_difference(&fq).all(|f| matches!(f, Flag::Private | Flag::Secret))
                    }
                    _ => false,
                };
                prop_assert!(ok, "netjoin left a {} difference on {}", field, b.link);
            }
        }
    }

    #[test]
    fn toggle_pairs_converge_on_weighted_trees(
        t in tree(),
        i in 0usize..7,
        j in 0usize..7,
        flag in prop::sample::select(vec![Flag::InviteOnly, Flag::Moderated, Flag::NoExternal, Flag::TopicControl]),
        initially in any::<bool>(),
        signs in (any::<bool>(), any::<bool>()),
        offset in 0u64..12,
    ) {
        let servers = t.servers().to_vec();
        let (p, q) = (servers[i % servers.len()].clone(), servers[j % servers.len()].clone());
        let topo = t.with_clients([Client::new("p", p.as_str()), Client::new("q", q.as_str())]).unwrap();
        let mut world = World::new(topo, Config::default());
        let mut view = ChannelView::new("#p");
        view.members = BTreeSet::from([ClientId::from("p"), ClientId::from("q")]);
        view.ops = view.members.clone();
        if initially {
            view.flags.insert(flag);
        }
        world.install_channel(view).unwrap();
        world.issue(0, ModeChange::by(&"p".into(), "#p", ChangeKind::Flag { flag, set: signs.0 })).unwrap();
        world.issue(offset, ModeChange::by(&"q".into(), "#p", ChangeKind::Flag { flag, set: signs.1 })).unwrap();
        world.run_until_quiescent().unwrap();
        let states: BTreeSet<bool> = servers.iter().map(|s| world.view_or_empty(s, "#p").has(flag)).collect();
        prop_assert_eq!(states.len(), 1);
    }

    #[test]
    fn scenario_text_round_trips(
        n in 2usize..=5,
        lat in 1u64..4,
        seed in any::<u64>(),
        jitter in 0u64..3,
        fixed in any::<bool>(),
        actions in proptest::collection::vec((0u64..5, 0usize..8, 0usize..5), 0..8),
    ) {
        let servers: Vec<String> = (0..n).map(|i| format!("S{i}")).collect();
        let mut text = format!("chain {} latency {lat}\n", servers.join(" "));
        for i in 0..n {
            text += &format!("client c{i} @S{i}\n");
        }
        text += "channel #p members c0,c1 ops c0 modes +nt limit 5 topic \"hello there\" by c0\n";
        text += &format!("seed {seed}\njitter {jitter}\npolicy ps_conflict_fixed={fixed}\n");
        let mut at = 0;
        for (step, verb, who) in actions {
            at += step;
            let c = format!("c{}", who % n);
            text += &match verb {
                0 => format!("@{at} topic {c} #p some words\n"),
                1 => format!("@{at} mode {c} #p +o c0\n"),
                2 => format!("@{at} mode {c} #p -l\n"),
                3 => format!("@{at} kick {c} #p c1\n"),
                4 => format!("@{at} msg {c} #p hi\n"),
                5 => format!("@{at} join {c} #p\n"),
                6 => format!("@{at} split S0-S1\n"),
                _ => format!("@{at} part {c} #p\n"),
            };
        }
        text += "assert ops @* #p contains c0\nassert topic @S0 #p == \"hello there\"\nassert notices == 0\n";
        let parsed = parse_scenario(&text).unwrap();
        let again = parse_scenario(&parsed.to_string()).unwrap();
        prop_assert_eq!(parsed, again);
    }

    #[test]
    fn runs_are_deterministic(seed in any::<u64>(), jitter in 0u64..3) {
        let mut s = builtin("jittered-desync").unwrap().scenario().unwrap();
        s.seed = seed;
        s.jitter = jitter;
        let run = || {
            let (w, r) = run_observed(&s, |_, _| {}).unwrap();
            (w.trace_jsonl(), w.dump_json(), r.to_json())
        };
        prop_assert_eq!(run(), run());
    }
}
