use std::collections::{BTreeMap, BTreeSet};

use agora_core::identification::{
    parse_request, step_identification, ExpertFeedback, IdentificationLimits, QueryStatus,
    RoundInput, Verdict,
};
use agora_core::messaging::{
    Body, Delivery, Envelope, NetworkState, Router, SendReceipt, StatusBody,
};
use agora_core::ontology::{CapabilitySet, Ontology, TagEntry, TaskMode};
use agora_core::planner::{
    apply_critique, classify_task, decompose, Atomicity, Constraints, EditOp, ExpertEdit, Task,
    Workflow,
};
use agora_core::provisioning::{
    alternating_offers, auction_winner, negotiate, run_auction, NegotiationMode, Quote,
    Strategy as BidStrategy,
};
use agora_core::registrar::{is_registrar, registrar_id, AgentKind, Registration, Registry};
use agora_core::{AgentId, Capability, Rational, Tag, TaskId};
use proptest::prelude::*;

fn caps(items: impl IntoIterator<Item = usize>) -> CapabilitySet {
    items
        .into_iter()
        .map(|i| Capability::new(format!("c{i}")))
        .collect()
}

fn provider(id: String, capabilities: CapabilitySet, at: u64) -> Registration {
    Registration {
        agent_id: id.into(),
        kind: AgentKind::Provider,
        environment: "provisioning".into(),
        domains: BTreeSet::new(),
        capabilities,
        price_schedule: BTreeMap::new(),
        location: String::new(),
        registered_at: at,
    }
}

/// Registries of providers over capabilities `c0..c5`, each a bitmask.
fn registry_strategy(max: usize) -> impl Strategy<Value = Vec<(u8, u64)>> {
    prop::collection::vec((1u8..64, 0u64..20), 0..max)
}

fn build_registry(layout: &[(u8, u64)]) -> Registry {
    let mut r = Registry::new();
    for (i, (mask, at)) in layout.iter().enumerate() {
        let set = caps((0..6).filter(|b| mask & (1 << b) != 0));
        r.register(provider(format!("p{i:03}"), set, *at)).unwrap();
    }
    r
}

fn status(conversation: &str, sender: &str, recipient: &str, env: &str, seq: u64) -> Envelope {
    Envelope::new(
        conversation.into(),
        sender.into(),
        recipient.into(),
        env.into(),
        seq,
        Body::Status(StatusBody {
            subject: "probe".into(),
            detail: serde_json::Value::Null,
        }),
    )
}

fn agent(id: &str, env: &str) -> Registration {
    Registration {
        agent_id: id.into(),
        kind: AgentKind::Consumer,
        environment: env.into(),
        domains: BTreeSet::new(),
        capabilities: CapabilitySet::new(),
        price_schedule: BTreeMap::new(),
        location: String::new(),
        registered_at: 0,
    }
}

const NAMES: [&str; 7] = ["a", "b", "c", "d", "x", "y", "registrar"];

fn routing_registry() -> Registry {
    let mut r = Registry::new();
    for (id, env) in [
        ("a", "identification"),
        ("b", "identification"),
        ("c", "provisioning"),
        ("d", "provisioning"),
    ] {
        r.register(agent(id, env)).unwrap();
    }
    r.introduce_on(&"a".into(), &"c".into(), "k1".into())
        .unwrap();
    r
}

type Send = (usize, usize, bool, u8, u64);

fn run_sends(
    sends: &[Send],
    network: NetworkState,
    change: Option<(u64, NetworkState)>,
) -> Vec<Delivery> {
    let reg = routing_registry();
    let mut router = Router::new(network).unwrap();
    if let Some((at, state)) = change {
        router.set_network(state, at).unwrap();
    }
    let mut seq: BTreeMap<String, u64> = BTreeMap::new();
    let mut out = Vec::new();
    let mut now = 0;
    for (s, r, env_flag, conv, dt) in sends {
        now += dt;
        out.extend(router.advance(now));
        let sender = NAMES[*s];
        let n = seq.entry(sender.into()).or_insert(0);
        *n += 1;
        let env = if *env_flag {
            "identification"
        } else {
            "provisioning"
        };
        let conv = format!("k{conv}");
        router.send(&reg, status(&conv, sender, NAMES[*r], env, *n), now);
    }
    out.extend(router.advance(now + 1000));
    out
}

fn send_strategy() -> impl Strategy<Value = Vec<Send>> {
    prop::collection::vec(
        (0usize..7, 0usize..7, any::<bool>(), 0u8..3, 0u64..3),
        0..60,
    )
}

fn delivered_multiset(deliveries: &[Delivery]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for d in deliveries {
        *m.entry(serde_json::to_string(&d.envelope).unwrap())
            .or_insert(0) += 1;
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn routing_is_deterministic_gated_and_fifo(sends in send_strategy(), jitter in 0u64..4, seed in any::<u64>()) {
        let net = NetworkState { base_latency: 1, jitter, drop_probability: Rational::new(1, 5), partitions: vec![], rng_seed: seed };
        let first = run_sends(&sends, net.clone(), None);
        let second = run_sends(&sends, net, None);
        prop_assert_eq!(&first, &second);

        let reg = routing_registry();
        let mut last: BTreeMap<(AgentId, String), u64> = BTreeMap::new();
        for d in &first {
            let e = &d.envelope;
            prop_assert!(reg.is_registered(&e.sender) && reg.is_registered(&e.recipient));
            if !is_registrar(&e.sender) && !is_registrar(&e.recipient) {
                let same = reg.environment_of(&e.sender) == reg.environment_of(&e.recipient);
                prop_assert!(same || reg.token_for(&e.conversation_id, &e.sender, &e.recipient).is_some());
            }
            let key = (e.sender.clone(), e.conversation_id.to_string());
            if let Some(prev) = last.get(&key) {
                prop_assert!(e.seq > *prev);
            }
            last.insert(key, e.seq);
        }
    }

    #[test]
    fn partition_holds_are_lossless(sends in send_strategy(), cut in 0u64..20, span in 1u64..40) {
        let base = NetworkState::default();
        let split = NetworkState {
            partitions: vec![["a", "c"].into_iter().map(AgentId::from).collect()],
            ..NetworkState::default()
        };
        let reference = run_sends(&sends, base.clone(), None);

        let reg = routing_registry();
        let mut router = Router::new(base.clone()).unwrap();
        router.set_network(split, cut).unwrap();
        router.set_network(base, cut + span).unwrap();
        let mut seq: BTreeMap<&str, u64> = BTreeMap::new();
        let mut got = Vec::new();
        let mut now = 0;
        for (s, r, env_flag, conv, dt) in &sends {
            now += dt;
            got.extend(router.advance(now));
            let n = seq.entry(NAMES[*s]).or_insert(0);
            *n += 1;
            let env = if *env_flag { "identification" } else { "provisioning" };
            router.send(&reg, status(&format!("k{conv}"), NAMES[*s], NAMES[*r], env, *n), now);
        }
        got.extend(router.advance(now + cut + span + 1000));
        prop_assert_eq!(router.held_count(), 0);
        prop_assert_eq!(delivered_multiset(&got), delivered_multiset(&reference));
    }

    #[test]
    fn discovery_matches_brute_force(layout in registry_strategy(200), query in 1u8..64, gone in prop::collection::vec(0usize..200, 0..10)) {
        let mut reg = build_registry(&layout);
        for g in gone {
            let _ = reg.deregister(&AgentId::new(format!("p{g:03}")));
        }
        let required = caps((0..6).filter(|b| query & (1 << b) != 0));
        let found = reg.find_providers(&required).unwrap();
        let mut brute: Vec<(u64, AgentId)> = reg
            .iter()
            .filter(|r| required.iter().all(|c| r.capabilities.contains(c)))
            .map(|r| (r.registered_at, r.agent_id.clone()))
            .collect();
        brute.sort();
        let brute: Vec<AgentId> = brute.into_iter().map(|(_, id)| id).collect();
        prop_assert_eq!(&found, &brute);
        for id in &found {
            prop_assert!(reg.is_registered(id));
        }
        let task = Task {
            task_id: "t".into(),
            required_capabilities: required,
            constraints: Constraints { budget: Rational::ONE, deadline: None, mode: TaskMode::Negotiate },
            depends_on: BTreeSet::new(),
            atomicity: Atomicity::Unclassified,
        };
        let expected = if brute.is_empty() { Atomicity::Complex } else { Atomicity::Atomic };
        prop_assert_eq!(classify_task(&task, &reg), expected);
    }

    #[test]
    fn expert_ranking_is_a_strict_total_order(experts in prop::collection::vec((0usize..4, 0u64..5), 1..20), query in 0usize..4) {
        let names = ["medical", "medical.cardiology", "medical.cardiology.pediatric", "legal"];
        let mut tags = BTreeMap::new();
        for (i, n) in names.iter().enumerate() {
            let parent = match i { 1 => Some("medical".into()), 2 => Some("medical.cardiology".into()), _ => None };
            tags.insert(Tag::from(*n), TagEntry { parent, ..TagEntry::default() });
        }
        let ontology = Ontology::new(tags, vec![]).unwrap();
        let mut reg = Registry::new();
        for (i, (d, at)) in experts.iter().enumerate() {
            reg.register(Registration {
                agent_id: AgentId::new(format!("e{i:02}")),
                kind: AgentKind::DomainExpert,
                environment: "identification".into(),
                domains: [Tag::from(names[*d])].into_iter().collect(),
                capabilities: CapabilitySet::new(),
                price_schedule: BTreeMap::new(),
                location: String::new(),
                registered_at: *at,
            }).unwrap();
        }
        let q: BTreeSet<Tag> = [Tag::from(names[query])].into_iter().collect();
        let ranked = reg.find_experts(&q, &ontology).unwrap();
        for w in ranked.windows(2) {
            let a = (std::cmp::Reverse(w[0].match_score), w[0].registered_at, &w[0].agent_id);
            let b = (std::cmp::Reverse(w[1].match_score), w[1].registered_at, &w[1].agent_id);
            prop_assert!(a < b);
        }
        for r in &ranked {
            prop_assert!(r.match_score > Rational::ZERO && r.match_score <= Rational::ONE);
        }
    }
}

fn medical_ontology() -> Ontology {
    let mut tags = BTreeMap::new();
    tags.insert(Tag::from("medical"), TagEntry::default());
    tags.insert(
        Tag::from("medical.cardiology"),
        TagEntry {
            parent: Some("medical".into()),
            keywords: ["chest pain", "palpitations", "shortness of breath"]
                .into_iter()
                .map(String::from)
                .collect(),
            required_attributes: ["location", "age"].into_iter().map(String::from).collect(),
            services: vec![],
        },
    );
    tags.insert(
        Tag::from("medical.dermatology"),
        TagEntry {
            parent: Some("medical".into()),
            keywords: ["rash", "itching"].into_iter().map(String::from).collect(),
            required_attributes: ["age"].into_iter().map(String::from).collect(),
            services: vec![],
        },
    );
    Ontology::new(tags, vec![]).unwrap()
}

fn verdict_strategy() -> impl Strategy<Value = u8> {
    0u8..4
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn identification_terminates_and_is_sound(
        rounds in prop::collection::vec((prop::collection::vec(verdict_strategy(), 0..4), any::<bool>(), any::<bool>()), 0..12),
        text_pick in 0usize..3,
    ) {
        let ontology = medical_ontology();
        let limits = IdentificationLimits::default();
        let text = ["chest pain and shortness of breath", "rash", "nothing relevant"][text_pick];
        let mut sem = parse_request("r".into(), text, &BTreeMap::new(), &ontology, &limits).unwrap();
        for c in sem.tags.values() {
            prop_assert!(*c > Rational::ZERO && *c <= Rational::ONE);
        }
        let mut script = rounds.into_iter();
        let mut steps = 0;
        while !sem.status.is_terminal() {
            let (verdicts, supply, confirm) = script.next().unwrap_or((vec![0], true, true));
            let feedbacks: Vec<ExpertFeedback> = verdicts.iter().enumerate().map(|(i, v)| {
                let verdict = match v {
                    0 => Verdict::Approve,
                    1 => Verdict::NeedMoreData(["age".to_string()].into_iter().collect()),
                    2 => Verdict::ReferDomain([Tag::from("medical.cardiology")].into_iter().collect()),
                    _ => Verdict::Reject("no".into()),
                };
                ExpertFeedback::new(format!("e{i}"), verdict)
            }).collect();
            let input: BTreeMap<String, String> = if supply {
                sem.missing_info.iter().map(|k| (k.clone(), "v".to_string())).collect()
            } else {
                BTreeMap::new()
            };
            let round = RoundInput { solicited: feedbacks.len(), feedbacks: feedbacks.clone(), consumer_input: input, consumer_confirmed: confirm };
            let before = sem.clone();
            sem = step_identification(&sem, &round, &ontology, &limits).unwrap();
            steps += 1;
            prop_assert!(sem.iteration <= limits.max_rounds);
            for key in before.attributes.keys() {
                prop_assert!(sem.attributes.contains_key(key));
            }
            for key in &sem.missing_info {
                prop_assert!(!sem.attributes.contains_key(key));
            }
            if sem.status == QueryStatus::Identified {
                prop_assert!(!feedbacks.is_empty());
                prop_assert!(feedbacks.iter().all(|f| f.verdict == Verdict::Approve));
                prop_assert!(sem.missing_info.is_empty());
            }
        }
        prop_assert!(steps <= limits.max_rounds as usize);
    }

    #[test]
    fn decomposition_is_sound(layout in registry_strategy(200), root in 1u8..64, budget in 1i128..10_000) {
        let reg = build_registry(&layout);
        let required = caps((0..6).filter(|b| root & (1 << b) != 0));
        let task = Task {
            task_id: "root".into(),
            required_capabilities: required.clone(),
            constraints: Constraints { budget: Rational::new(budget, 7), deadline: None, mode: TaskMode::Negotiate },
            depends_on: BTreeSet::new(),
            atomicity: Atomicity::Unclassified,
        };
        match decompose(&task, &[], &reg) {
            Ok(d) => {
                let mut union = CapabilitySet::new();
                let mut total = Rational::ZERO;
                for leaf in &d.leaves {
                    prop_assert_eq!(classify_task(leaf, &reg), Atomicity::Atomic);
                    prop_assert!(leaf.required_capabilities.is_disjoint(&union));
                    union.extend(leaf.required_capabilities.iter().cloned());
                    total += leaf.budget();
                }
                prop_assert_eq!(union, required.clone());
                prop_assert_eq!(total, task.budget());
                prop_assert!(d.depth <= required.len());
            }
            Err(_) => {
                let orphan = required.iter().any(|c| reg.find_providers(&[c.clone()].into_iter().collect()).unwrap().is_empty());
                prop_assert!(orphan);
            }
        }
    }

    #[test]
    fn critique_is_atomic(ops in prop::collection::vec((0u8..3, 0usize..4, 0usize..4), 1..6)) {
        let mut reg = Registry::new();
        reg.register(Registration {
            agent_id: "sol".into(),
            kind: AgentKind::SolutionExpert,
            environment: "provisioning".into(),
            domains: [Tag::from("medical")].into_iter().collect(),
            capabilities: CapabilitySet::new(),
            price_schedule: BTreeMap::new(),
            location: String::new(),
            registered_at: 0,
        }).unwrap();
        let mut w = Workflow { workflow_id: "wf".into(), request_id: "r".into(), tasks: BTreeMap::new(), revision: 0 };
        for i in 0..4 {
            let deps: BTreeSet<TaskId> = if i > 0 { [TaskId::new(format!("t{}", i - 1))].into_iter().collect() } else { BTreeSet::new() };
            w.tasks.insert(TaskId::new(format!("t{i}")), Task {
                task_id: TaskId::new(format!("t{i}")),
                required_capabilities: caps([i]),
                constraints: Constraints { budget: Rational::integer(10), deadline: None, mode: TaskMode::Negotiate },
                depends_on: deps,
                atomicity: Atomicity::Unclassified,
            });
        }
        let edits: Vec<ExpertEdit> = ops.iter().map(|(kind, a, b)| {
            let id = TaskId::new(format!("t{a}"));
            let op = match kind {
                0 => EditOp::Reorder { task_id: id, depends_on: [TaskId::new(format!("t{b}"))].into_iter().collect() },
                1 => EditOp::RemoveTask { task_id: id },
                _ => EditOp::Rebudget { task_id: id, budget: Rational::integer(*b as i128 - 1) },
            };
            ExpertEdit { expert_id: "sol".into(), op }
        }).collect();
        let before = w.clone();
        match apply_critique(&w, &edits, &reg, &Ontology::default(), true) {
            Ok(next) => {
                prop_assert!(next.topological_order().is_some());
                prop_assert!(next.tasks.values().all(|t| !t.budget().is_negative()));
                prop_assert_eq!(next.revision, 1);
            }
            Err(_) => prop_assert_eq!(&w, &before),
        }
    }

    #[test]
    fn mechanisms_are_rational_and_within_budget(
        costs in prop::collection::vec((0i128..200, 0i128..4), 1..6),
        budget in 1i128..300,
        rounds in 1u32..12,
        seed in any::<u64>(),
    ) {
        let task = Task {
            task_id: "t".into(),
            required_capabilities: caps([0]),
            constraints: Constraints { budget: Rational::integer(budget), deadline: None, mode: TaskMode::Negotiate },
            depends_on: BTreeSet::new(),
            atomicity: Atomicity::Atomic,
        };
        let quotes: Vec<Quote> = costs.iter().enumerate().map(|(i, (c, m))| Quote {
            provider: AgentId::new(format!("p{i}")),
            cost: Rational::integer(*c),
            strategy: BidStrategy { opening_markup: Rational::new(*m, 2), concession_rate: Rational::ONE },
            free: false,
        }).collect();
        let cost_of = |p: &AgentId| quotes.iter().find(|q| &q.provider == p).unwrap().cost;
        for mode in [NegotiationMode::Cooperative, NegotiationMode::Competitive] {
            let r = negotiate(&task, &quotes, mode, rounds).unwrap();
            if let Some(a) = r.agreement {
                prop_assert!(a.price >= cost_of(&a.provider));
                prop_assert!(a.price <= task.budget());
            }
        }
        let auction = run_auction(&task, &quotes, seed, "t/auction/0").unwrap();
        prop_assert_eq!(auction_winner(&auction.bids, auction.reserve), auction.winner.clone());
        if let Some(w) = auction.winner {
            prop_assert!(w.price <= auction.reserve);
            prop_assert!(w.price >= cost_of(&w.bidder));
        }
        for q in &quotes {
            let mut trace = Vec::new();
            if let Some((_, price)) = alternating_offers(task.budget(), q, rounds, &mut trace) {
                prop_assert!(price >= q.cost && price <= task.budget());
            }
        }
    }
}

#[test]
fn registrar_is_always_registered() {
    assert!(Registry::new().is_registered(&registrar_id()));
    let receipt = {
        let reg = routing_registry();
        let mut router = Router::new(NetworkState::default()).unwrap();
        router.send(&reg, status("k9", "registrar", "c", "provisioning", 1), 0)
    };
    assert!(matches!(receipt, SendReceipt::Queued { .. }));
}
