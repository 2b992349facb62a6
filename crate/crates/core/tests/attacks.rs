use cycleguard::alloc::{seeded_entropy, MemoryPool};
use cycleguard::attack::{
    evaluate, run_attack, run_rop, shellcode_success_probability, Action, AttackBody, AttackError, AttackScript,
    AttackerKnowledge, CaseId, Gadget, GadgetChain, ShellcodeSite, Verdict,
};
use cycleguard::memory::Address;
use cycleguard::protection::{SchemeKind, StackKnowledge};
use cycleguard::scenario::Scenario;
use cycleguard::scheduler::Simulation;
use proptest::prelude::*;

fn ardupilot() -> Scenario {
    Scenario::bundled("ardupilot_like").unwrap()
}

fn sim(sc: &Scenario, kind: SchemeKind) -> Simulation {
    sc.simulation_for(kind, 99).unwrap()
}

fn script(actions: Vec<Action>) -> AttackScript {
    AttackScript {
        case: CaseId::Case(1),
        name: "probe".into(),
        task: "update_gcs_send".into(),
        body: AttackBody::Payload(actions),
        knowledge: AttackerKnowledge::default(),
    }
}

fn verdicts(kind: SchemeKind) -> Vec<(CaseId, Verdict)> {
    let sc = ardupilot();
    let mut s = sim(&sc, kind);
    let mut rng = seeded_entropy(5);
    sc.attacks.iter().map(|a| (a.case, evaluate(&mut s, a, &mut rng).unwrap().verdict)).collect()
}

#[test]
fn cycle_oriented_verdict_classes() {
    use Verdict::*;
    let expected = [
        (CaseId::Case(1), BlockedByPrivilege),
        (CaseId::Case(2), BlockedByPrivilege),
        (CaseId::Case(3), BlockedByMpu),
        (CaseId::Case(4), BlockedByMpu),
        (CaseId::Case(5), BlockedByMpu),
        (CaseId::Case(6), DefeatedByRandomization),
        (CaseId::Case(7), BlockedByMpu),
        (CaseId::Case(8), BlockedByMpu),
        (CaseId::Rop, BlockedByMpu),
    ];
    assert_eq!(verdicts(SchemeKind::CycleOriented), expected);
}

#[test]
fn unprotected_baseline_falls_to_everything() {
    assert!(verdicts(SchemeKind::None).iter().all(|(_, v)| *v == Verdict::Succeeded));
}

#[test]
fn task_views_block_every_case() {
    assert!(verdicts(SchemeKind::TaskOriented).iter().all(|(_, v)| *v != Verdict::Succeeded));
}

#[test]
fn attacks_leave_no_trace() {
    let sc = ardupilot();
    for kind in SchemeKind::ALL {
        let mut s = sim(&sc, kind);
        let mut rng = seeded_entropy(1);
        s.engine.enter_task_context(&mut s.machine, "update_gcs_send", s.entropy.as_mut()).unwrap();
        let surface = s.engine.attack_surface(&s.machine, "update_gcs_send").unwrap();
        for attack in &sc.attacks {
            let before = s.machine.digest();
            run_attack(&mut s.machine, &surface, attack, &mut rng).unwrap();
            assert_eq!(s.machine.digest(), before, "{kind} case {}", attack.case);
        }
    }
}

#[test]
fn randomized_stack_is_never_exact() {
    let sc = ardupilot();
    let mut case6 = sc.attack(CaseId::Case(6)).unwrap().clone();
    case6.knowledge.stack_base = StackKnowledge::Exact;
    let mut s = sim(&sc, SchemeKind::CycleOriented);
    let out = evaluate(&mut s, &case6, &mut seeded_entropy(2)).unwrap();
    let p = out.success_probability.expect("entry address was guessed");
    assert!((p - 1.0 / 577.0).abs() < 1e-12);
}

#[test]
fn exhaustive_guessing_always_lands() {
    let sc = ardupilot();
    let mut case6 = sc.attack(CaseId::Case(6)).unwrap().clone();
    case6.knowledge.guesses_per_cycle = 577;
    let mut s = sim(&sc, SchemeKind::CycleOriented);
    let mut rng = seeded_entropy(3);
    for _ in 0..20 {
        assert_eq!(evaluate(&mut s, &case6, &mut rng).unwrap().verdict, Verdict::Succeeded);
    }
}

#[test]
fn unmapped_targets_are_invalid() {
    let sc = ardupilot();
    let mut s = sim(&sc, SchemeKind::CycleOriented);
    let bad = script(vec![Action::WriteMem { addr: Address(0x3000_0000), bytes: vec![1] }]);
    assert!(matches!(evaluate(&mut s, &bad, &mut seeded_entropy(0)), Err(AttackError::InvalidScript(_))));
}

fn in_context<T>(kind: SchemeKind, f: impl FnOnce(&mut Simulation, &Scenario) -> T) -> T {
    let sc = ardupilot();
    let mut s = sim(&sc, kind);
    s.engine.enter_task_context(&mut s.machine, "update_gcs_send", s.entropy.as_mut()).unwrap();
    let out = f(&mut s, &sc);
    s.engine.leave_task_context(&mut s.machine).unwrap();
    out
}

#[test]
fn rop_chains() {
    in_context(SchemeKind::CycleOriented, |s, sc| {
        let surface = s.engine.attack_surface(&s.machine, "update_gcs_send").unwrap();
        let mut rng = seeded_entropy(4);
        let flash = |off: u32| Address(0x0800_5000 + off);

        let empty = run_rop(&mut s.machine, &surface, &GadgetChain::default(), &mut rng).unwrap();
        assert_eq!(empty.verdict, Verdict::Succeeded);
        assert!(empty.effects.is_empty());

        // Gadgets that only scribble over the attacker's own buffer.
        let own = surface.buffers["tx_bounce"];
        let chain = GadgetChain {
            gadgets: vec![
                Gadget { addr: flash(0), effects: vec![] },
                Gadget {
                    addr: flash(0x100),
                    effects: vec![Action::WriteMem { addr: own.start, bytes: vec![0xAA; 16] }],
                },
            ],
            terminal: vec![],
        };
        let out = run_rop(&mut s.machine, &surface, &chain, &mut rng).unwrap();
        assert_eq!(out.verdict, Verdict::Succeeded);
        let pool = *s.machine.pool().pool();
        assert!(out.effects.iter().all(|a| a.0 >= pool.base.0 && a.0 <= pool.end_inclusive()));

        let privileged_gadget = GadgetChain {
            gadgets: vec![Gadget { addr: sc.symbol("kill").unwrap(), effects: vec![] }],
            terminal: vec![],
        };
        assert_eq!(
            run_rop(&mut s.machine, &surface, &privileged_gadget, &mut rng).unwrap().verdict,
            Verdict::BlockedByPrivilege
        );

        let data_gadget = GadgetChain {
            gadgets: vec![Gadget { addr: sc.symbol("user_data").unwrap(), effects: vec![] }],
            terminal: vec![],
        };
        assert!(matches!(
            run_rop(&mut s.machine, &surface, &data_gadget, &mut rng),
            Err(AttackError::InvalidScript(_))
        ));
    });
}

#[test]
fn return_overwrite_into_kernel_code() {
    let kill = ardupilot().symbol("kill").unwrap();
    let attempt = script(vec![Action::OverwriteReturn { target: kill }]);
    for (kind, expected) in
        [(SchemeKind::None, Verdict::Succeeded), (SchemeKind::CycleOriented, Verdict::BlockedByPrivilege)]
    {
        let out = in_context(kind, |s, _| {
            let surface = s.engine.attack_surface(&s.machine, "update_gcs_send").unwrap();
            run_attack(&mut s.machine, &surface, &attempt, &mut seeded_entropy(0)).unwrap()
        });
        assert_eq!(out.verdict, expected, "{kind}");
    }
}

fn action(addrs: Vec<u32>) -> impl Strategy<Value = Action> {
    let pick = prop::sample::select(addrs);
    prop_oneof![
        (pick.clone(), 1usize..8).prop_map(|(a, n)| Action::WriteMem { addr: Address(a), bytes: vec![0x5A; n] }),
        pick.clone().prop_map(|a| Action::CallAddr { addr: Address(a), args: vec![] }),
        pick.prop_map(|a| Action::OverwriteReturn { target: Address(a) }),
    ]
}

fn payload() -> impl Strategy<Value = Vec<Action>> {
    let sc = ardupilot();
    let mut addrs: Vec<u32> = sc.symbols.values().map(|a| a.0).collect();
    addrs.extend([0x0800_9000, 0x2000_2000, 0x2000_4800, 0x4000_4000]);
    (prop::collection::vec(action(addrs), 1..4), any::<bool>()).prop_map(|(body, inject)| match inject {
        true => vec![Action::InjectShellcode { site: ShellcodeSite::Stack, body }],
        false => body,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// Protection never creates attack capability.
    #[test]
    fn success_implies_baseline_success(actions in payload(), seed in any::<u64>()) {
        let sc = ardupilot();
        let probe = script(actions);
        let mut baseline = sim(&sc, SchemeKind::None);
        let base = evaluate(&mut baseline, &probe, &mut seeded_entropy(seed)).unwrap();
        for kind in [SchemeKind::TaskOriented, SchemeKind::CycleOriented] {
            let mut s = sim(&sc, kind);
            let mut probe = probe.clone();
            probe.knowledge.guesses_per_cycle = 577;
            let out = evaluate(&mut s, &probe, &mut seeded_entropy(seed)).unwrap();
            if out.verdict == Verdict::Succeeded {
                prop_assert_eq!(base.verdict, Verdict::Succeeded, "{} succeeded where the baseline did not", kind);
            }
        }
    }

    #[test]
    fn success_probability_monotone(pool in 1024u32..8192, stack in 8u32..1024, guesses in 1u32..50) {
        let p = |size: u32, stack: u32, k: u32| {
            shellcode_success_probability(&MemoryPool { base: Address(0x2000_0000), size }, stack, 8, k)
        };
        prop_assert!(p(pool + 64, stack, guesses) <= p(pool, stack, guesses));
        prop_assert!(p(pool, stack + 8, guesses) >= p(pool, stack, guesses));
        prop_assert!(p(pool, stack, guesses + 1) >= p(pool, stack, guesses));
    }
}
