//! Acceptance suite. Prints one line per criterion and exits non-zero if
//! any criterion fails.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::Instant;

use cycleguard::alloc::{seeded_entropy, PoolAllocator};
use cycleguard::attack::{CaseId, Verdict};
use cycleguard::protection::{overhead_ctomp, overhead_task_oriented, SchemeKind, TimeModel};
use cycleguard::report::{cmd_alloc_bench, cmd_attack_matrix, cmd_run, AllocBenchParams, REFERENCE_ORDER_IMPROVEMENT};
use cycleguard::scenario::Scenario;
use cycleguard::scheduler::{expected_frequency, CycleConfig, Task};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn ardupilot() -> Scenario {
    Scenario::bundled("ardupilot_like").expect("bundled scenario loads")
}

fn task_oriented_golden() -> Outcome {
    let got = overhead_task_oriented(&[1; 7], &TimeModel::default()).total_us;
    outcome(got == 154, format!("seven single-region tasks cost {got} us (want 154)"))
}

fn frequency_golden() -> Outcome {
    let got = expected_frequency(&Task::new("t", 0, 2, 1), &CycleConfig { f_m: 400 });
    outcome(got == 200.0, format!("f_m 400, aci 2 gives {got} Hz (want 200)"))
}

fn dominance_sweep() -> Outcome {
    let mut rng = seeded_entropy(3);
    let (mut strict, mut ties, mut violations) = (0u32, 0u32, Vec::new());
    for _ in 0..10_000 {
        let views: Vec<u32> = (0..rng.gen_range(1..=50)).map(|_| rng.gen_range(1..=8)).collect();
        let total: u32 = views.iter().sum();
        let z = rng.gen_range(0..=total);
        let t_mpu = rng.gen_range(9..=15);
        let tm = TimeModel {
            t_mpu,
            t_mpu_max: t_mpu,
            t_stack: rng.gen_range(5..=20),
            t_svc: rng.gen_range(1..=3),
            t_switch: rng.gen_range(1..=3),
            t_alloc_draw: 0,
        };
        let (c, t) = (overhead_ctomp(z, &tm).total_us, overhead_task_oriented(&views, &tm).total_us);
        if c < t {
            strict += 1;
        } else if c == t && views.len() == 1 && z == total {
            ties += 1;
        } else {
            violations.push((views.len(), z, c, t));
        }
    }
    outcome(
        violations.is_empty(),
        format!(
            "{strict}/10000 strictly cheaper, {ties} exact ties at n=1 with z equal to the task's region count, \
             {} violations",
            violations.len()
        ),
    )
}

fn frequency_preservation() -> Outcome {
    let sc = ardupilot();
    let (co, _) = cmd_run(&sc, SchemeKind::CycleOriented, sc.seed, 4000).expect("cycle-oriented run");
    let worst_co = co.frequencies.iter().map(|f| (f.ratio.unwrap_or(0.0) - 1.0).abs()).fold(0.0f64, f64::max);

    let (to, _) = cmd_run(&sc, SchemeKind::TaskOriented, sc.seed, 4000).expect("task-oriented run");
    let mut by_priority = to.frequencies.clone();
    by_priority.sort_by_key(|f| std::cmp::Reverse(f.priority));
    let lowest: Vec<(String, f64)> =
        by_priority.iter().take(2).map(|f| (f.task.clone(), f.ratio.unwrap_or(0.0))).collect();
    let pass = worst_co <= 0.01 && lowest.iter().all(|(_, r)| *r <= 0.60);
    outcome(
        pass,
        format!(
            "cycle-oriented worst deviation {:.2}%; task-oriented lowest priorities {}",
            worst_co * 100.0,
            lowest.iter().map(|(n, r)| format!("{n} at {:.0}%", r * 100.0)).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn attack_matrix() -> Outcome {
    use Verdict::*;
    let sc = ardupilot();
    let m = cmd_attack_matrix(&sc, sc.seed, 100_000).expect("attack matrix");
    let expected = [
        ("1", BlockedByPrivilege),
        ("2", BlockedByPrivilege),
        ("3", BlockedByMpu),
        ("4", BlockedByMpu),
        ("5", BlockedByMpu),
        ("6", DefeatedByRandomization),
        ("7", BlockedByMpu),
        ("8", BlockedByMpu),
        ("rop", BlockedByMpu),
    ];
    let mut wrong = Vec::new();
    for (case, want) in expected {
        let row = m.cases.iter().find(|r| r.case == case).expect("case present");
        let co = row.verdicts[&SchemeKind::CycleOriented];
        if co != want {
            wrong.push(format!("case {case}: {co:?}"));
        }
        if row.verdicts[&SchemeKind::None] != Succeeded {
            wrong.push(format!("case {case} fails without protection"));
        }
    }
    let case6 = CaseId::Case(6).to_string();
    let mc = m
        .monte_carlo
        .iter()
        .find(|r| r.case == case6 && r.scheme == SchemeKind::CycleOriented)
        .expect("guessing case has a Monte Carlo estimate");
    let reference = 1.0 / 577.0;
    let rel = (mc.rate - reference).abs() / reference;
    outcome(
        wrong.is_empty() && rel <= 0.15,
        format!(
            "{} verdict mismatches{}; unprotected {} of {} succeed; guessing rate {:.5} over {} trials ({:+.1}% from 1/577)",
            wrong.len(),
            if wrong.is_empty() { String::new() } else { format!(" ({})", wrong.join(", ")) },
            m.succeeded[&SchemeKind::None],
            m.cases.len(),
            mc.rate,
            mc.trials,
            (mc.rate - reference) / reference * 100.0
        ),
    )
}

fn allocator_properties() -> Outcome {
    let pool = ardupilot().pool();
    let mut alloc = PoolAllocator::new(pool);
    let mut rng = seeded_entropy(6);
    let (mut allocs, mut frees, mut broken) = (0u32, 0u32, None);
    for i in 0..100_000 {
        match rng.gen_range(0..10) {
            0..=5 => {
                let size = rng.gen_range(1..=1500);
                if alloc.mem_alloc(&mut rng, size).is_ok() {
                    allocs += 1;
                }
            }
            6..=8 => {
                let live = alloc.table().regions().to_vec();
                if !live.is_empty() {
                    alloc.mem_free(live[rng.gen_range(0..live.len())].handle).expect("live handle frees");
                    frees += 1;
                }
            }
            _ => alloc.free_all(),
        }
        if let Err(e) = alloc.check_invariants() {
            broken = Some(format!("op {i}: {e}"));
            break;
        }
    }

    let mut fixed = PoolAllocator::new(pool);
    fixed.reserve_at(pool.base, 1024).unwrap();
    fixed.reserve_at(cycleguard::memory::Address(pool.base.0 + 1024), 144).unwrap();
    let mut reference = Vec::new();
    for (h, off, size) in [(1u32, 0u32, 1024u32), (2, 1024, 144)] {
        reference.extend(h.to_le_bytes());
        reference.extend((pool.base.0 + off).to_le_bytes());
        reference.extend(size.to_le_bytes());
    }
    reference.resize(72, 0);
    let export_ok = fixed.table().to_bytes() == reference;
    outcome(
        broken.is_none() && export_ok,
        format!(
            "100000 ops ({allocs} placements, {frees} frees): {}; 72-byte export {}",
            broken.as_deref().unwrap_or("no invariant violations"),
            if export_ok { "matches" } else { "differs" }
        ),
    )
}

fn randomization_spread() -> Outcome {
    let pool = ardupilot().pool();
    let feasible = pool.feasible_starts(1024, 8);
    let mut alloc = PoolAllocator::new(pool);
    let mut rng = seeded_entropy(7);
    let mut seen = BTreeSet::new();
    let (mut prev, mut collisions) = (None, 0u32);
    for _ in 0..10_000 {
        let start = alloc.mem_alloc(&mut rng, 1024).expect("empty pool places a stack").start;
        alloc.free_all();
        if prev == Some(start) {
            collisions += 1;
        }
        prev = Some(start);
        seen.insert(start);
    }
    let coverage = seen.len() as f64 / f64::from(feasible);
    let rate = f64::from(collisions) / 9_999.0;
    outcome(
        coverage >= 0.5 && rate <= 0.005,
        format!("{} of {feasible} starts seen; consecutive repeat rate {:.3}%", seen.len(), rate * 100.0),
    )
}

fn allocation_order() -> Outcome {
    let sc = ardupilot();
    let report = cmd_alloc_bench(&AllocBenchParams::from_scenario(&sc, 10_000, sc.seed).unwrap()).unwrap();
    let improvement = report.measured_improvement.unwrap_or(0.0);
    outcome(
        improvement >= 0.10,
        format!(
            "ascending {:.3} vs descending {:.3} mean retries: {:.1}% fewer (target 10%, reference figure {:.1}%)",
            report.orders[0].mean_retries,
            report.orders[1].mean_retries,
            improvement * 100.0,
            REFERENCE_ORDER_IMPROVEMENT * 100.0
        ),
    )
}

fn timing_inputs() -> Outcome {
    let tm = TimeModel::default();
    outcome(
        true,
        format!(
            "informational: timings are model inputs (t_mpu {}, t_stack {}, t_svc {}, t_switch {} us), not measurements",
            tm.t_mpu, tm.t_stack, tm.t_svc, tm.t_switch
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(u8, fn() -> Outcome); 9] = [
        (1, task_oriented_golden),
        (2, frequency_golden),
        (3, dominance_sweep),
        (4, frequency_preservation),
        (5, attack_matrix),
        (6, allocator_properties),
        (7, randomization_spread),
        (8, allocation_order),
        (9, timing_inputs),
    ];
    let mut failed = 0;
    for (n, check) in criteria {
        let t = Instant::now();
        let o = check();
        failed += usize::from(!o.pass);
        println!(
            "criterion {n}: {} ({:.2}s) {}",
            if o.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            o.detail
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
