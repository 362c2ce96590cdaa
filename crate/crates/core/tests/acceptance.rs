//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use turncredit_core::advantage::{
    compute_advantages, discounted_returns, grpo_objective, trajectory_advantage, AdvantageParams,
    AdvantageVariant, ObjectiveInputs, DEFAULT_GUARD,
};
use turncredit_core::assignment::{
    brute_force_match, hungarian_match, sinkhorn_plan, soft_credit, uniform_marginal,
    AssignmentMode, CostTransform, SinkhornParams, Witness,
};
use turncredit_core::config::EngineConfig;
use turncredit_core::matching::{build_matrix, MatchOptions, SimilarityMatrix};
use turncredit_core::pipeline::{self, to_json_line};
use turncredit_core::reward::{assemble_schedule, outcome_f1, RewardScope};
use turncredit_core::trace::{
    parse_trace, GroundTruthTrace, RolloutGroup, ToolCall, Trajectory, Turn,
};

type Check = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Check, Duration);

fn fixture(name: &str) -> Vec<RolloutGroup> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name);
    parse_trace(BufReader::new(File::open(path).unwrap()), 10).unwrap()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize) -> SimilarityMatrix {
    let data = (0..m * n)
        .map(|_| {
            if rng.gen_bool(0.3) {
                0.0
            } else {
                rng.gen::<f64>()
            }
        })
        .collect();
    SimilarityMatrix::from_scores(Array2::from_shape_vec((m, n), data).unwrap()).unwrap()
}

fn golden_km() -> Check {
    let groups = fixture("case_study.jsonl");
    let (traj, gold) = (&groups[0].rollouts[0], &groups[0].ground_truth);
    let cfg = EngineConfig {
        mode: AssignmentMode::Km,
        ..EngineConfig::default()
    };
    let score = pipeline::score_rollout(traj, gold, &cfg).map_err(|e| e.to_string())?;
    let rewards = &score.credit.per_call_rewards;
    ensure(*rewards == [0.0, 1.0, 1.0, 1.0, 1.0, 1.0], || {
        format!("per-call rewards {rewards:?}")
    })?;
    ensure(score.schedule.outcome == 1.0, || {
        format!("outcome {}", score.schedule.outcome)
    })?;
    Ok(format!("rewards {rewards:?}, outcome 1.0"))
}

fn golden_ot() -> Check {
    let groups = fixture("case_study.jsonl");
    let s = build_matrix(
        &groups[0].rollouts[0],
        &groups[0].ground_truth,
        MatchOptions::default(),
    );
    let params = SinkhornParams {
        temperature: 0.05,
        ..SinkhornParams::default()
    };
    let credit = soft_credit(&s, CostTransform::Linear, params).map_err(|e| e.to_string())?;
    let Witness::Soft(plan) = &credit.witness else {
        return Err("no transport plan".into());
    };
    for r in plan.row_sums() {
        ensure((r - 1.0 / 6.0).abs() <= 1e-6, || format!("row sum {r}"))?;
    }
    for c in plan.col_sums() {
        ensure((c - 0.2).abs() <= 1e-6, || format!("column sum {c}"))?;
    }
    let r = &credit.per_call_rewards;
    for t in [1, 3, 4, 5] {
        ensure((0.160..=0.1667).contains(&r[t]), || {
            format!("turn {} reward {}", t + 1, r[t])
        })?;
    }
    ensure(r[0] > 0.0 && r[0] < 0.05, || {
        format!("turn 1 reward {}", r[0])
    })?;
    ensure(r[2] > 0.14 && r[2] < 0.1667, || {
        format!("turn 3 reward {}", r[2])
    })?;
    ensure(r[0] < r[2], || "turn 1 not below turn 3".into())?;
    let landmark = plan.plan[[0, 1]] + plan.plan[[2, 1]];
    ensure((landmark - 0.2).abs() <= 1e-3, || {
        format!("landmark mass {landmark}")
    })?;
    Ok(format!(
        "turn1 {:.4}, turn3 {:.4}, others {:.4}..{:.4}, landmark mass {landmark:.6}",
        r[0],
        r[2],
        [r[1], r[3], r[4], r[5]]
            .iter()
            .cloned()
            .fold(f64::MAX, f64::min),
        [r[1], r[3], r[4], r[5]]
            .iter()
            .cloned()
            .fold(f64::MIN, f64::max),
    ))
}

fn hungarian_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for k in 0..1000 {
        let (m, n) = (rng.gen_range(0..=7), rng.gen_range(0..=7));
        let s = random_matrix(&mut rng, m, n);
        let got = hungarian_match(&s).total_weight(&s);
        let want = brute_force_match(&s).map_err(|e| e.to_string())?;
        worst = worst.max((got - want).abs());
        ensure((got - want).abs() <= 1e-9, || {
            format!("instance {k} ({m}x{n}): {got} vs {want}")
        })?;
    }
    Ok(format!("1000 instances, max deviation {worst:.1e}"))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..n {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn cold_limit() -> Check {
    const GAP: f64 = 0.05;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = SinkhornParams {
        temperature: 1e-3,
        max_iter: 200_000,
        tol: 1e-8,
    };
    let mut accepted = 0;
    let mut worst = 0.0f64;
    while accepted < 200 {
        let n = rng.gen_range(1..=6);
        let data: Vec<f64> = (0..n * n).map(|_| rng.gen()).collect();
        let s =
            SimilarityMatrix::from_scores(Array2::from_shape_vec((n, n), data).unwrap()).unwrap();
        let mut weights: Vec<f64> = permutations(n)
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| s.get(i, j)).sum())
            .collect();
        weights.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if weights.len() > 1 && weights[0] - weights[1] < GAP {
            continue;
        }
        accepted += 1;
        let cost = s.scores().mapv(|v| -v);
        let plan = sinkhorn_plan(&cost, &uniform_marginal(n), &uniform_marginal(n), params)
            .map_err(|e| e.to_string())?;
        ensure(plan.converged, || {
            format!(
                "instance {accepted} did not converge ({:.1e})",
                plan.violation
            )
        })?;
        let h = hungarian_match(&s);
        for i in 0..n {
            for j in 0..n {
                let p = if h.golden_for(i) == Some(j) {
                    1.0 / n as f64
                } else {
                    0.0
                };
                worst = worst.max((plan.plan[[i, j]] - p).abs());
            }
        }
        ensure(worst <= 1e-2, || {
            format!("instance {accepted}: deviation {worst}")
        })?;
    }
    Ok(format!(
        "200 instances (optimality gap >= {GAP}), max |Z - P*/n| {worst:.1e}"
    ))
}

fn advantage_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_sum = 0.0f64;
    let mut worst_rec = 0.0f64;
    for _ in 0..1000 {
        let g = rng.gen_range(2..=16);
        let totals: Vec<f64> = (0..g).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let a = trajectory_advantage(&totals, DEFAULT_GUARD).map_err(|e| e.to_string())?;
        worst_sum = worst_sum.max(a.iter().sum::<f64>().abs());

        let len = rng.gen_range(0..=12);
        let r: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gamma = rng.gen_range(0.0..=1.0);
        let big_r = discounted_returns(&r, gamma);
        for t in 0..len {
            let next = if t + 1 < len { big_r[t + 1] } else { 0.0 };
            worst_rec = worst_rec.max((big_r[t] - (r[t] + gamma * next)).abs());
        }
    }
    ensure(worst_sum <= 1e-9, || {
        format!("sum of advantages {worst_sum}")
    })?;
    ensure(worst_rec <= 1e-12, || {
        format!("discount recursion off by {worst_rec}")
    })?;

    for value in [0.0, 0.4, 1.0, -3.25] {
        let a = trajectory_advantage(&[value; 5], DEFAULT_GUARD).map_err(|e| e.to_string())?;
        ensure(a.iter().all(|x| *x == 0.0), || {
            format!("all-equal group {value}: {a:?}")
        })?;
    }

    let per_turn = vec![vec![0.2, 0.5, 1.0, 0.3], vec![0.1, 0.0], vec![0.7, 0.4]];
    let params = AdvantageParams {
        variant: AdvantageVariant::Dual,
        ..Default::default()
    };
    let table = compute_advantages(&per_turn, &params).map_err(|e| e.to_string())?;
    for t in 2..4 {
        let (got, want) = (table.turn_adv[0][t], table.discounted_returns[0][t]);
        ensure(got == want, || {
            format!("single-rollout turn {}: A^l {got} vs R {want}", t + 1)
        })?;
    }
    Ok(format!(
        "max |sum A| {worst_sum:.1e}, max recursion error {worst_rec:.1e}, fallback exact"
    ))
}

fn objective_sanity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let g = 5;
    let mut lp = Vec::new();
    let mut adv = Vec::new();
    let mut mask = Vec::new();
    for _ in 0..g {
        let len = rng.gen_range(1..20);
        lp.push(
            (0..len)
                .map(|_| rng.gen_range(-5.0..0.0))
                .collect::<Vec<f64>>(),
        );
        adv.push(
            (0..len)
                .map(|_| rng.gen_range(-2.0..2.0))
                .collect::<Vec<f64>>(),
        );
        mask.push(
            (0..len)
                .map(|k| k == 0 || rng.gen_bool(0.7))
                .collect::<Vec<bool>>(),
        );
    }
    let inputs = ObjectiveInputs {
        logprob_new: lp.clone(),
        logprob_old: lp.clone(),
        logprob_ref: lp,
        clip_range: 0.2,
        kl_coeff: 0.0,
    };
    let got = grpo_objective(&inputs, &adv, &mask).map_err(|e| e.to_string())?;
    let want: f64 = (0..g)
        .map(|i| {
            let kept: Vec<f64> = adv[i]
                .iter()
                .zip(&mask[i])
                .filter(|(_, m)| **m)
                .map(|(a, _)| *a)
                .collect();
            kept.iter().sum::<f64>() / kept.len() as f64
        })
        .sum::<f64>()
        / g as f64;
    ensure((got - want).abs() <= 1e-12, || {
        format!("on-policy objective {got} vs {want}")
    })?;

    let clip = ObjectiveInputs {
        logprob_new: vec![vec![1.3f64.ln()]],
        logprob_old: vec![vec![0.0]],
        logprob_ref: vec![vec![1.3f64.ln()]],
        clip_range: 0.2,
        kl_coeff: 0.0,
    };
    let clipped = grpo_objective(&clip, &[vec![1.0]], &[vec![true]]).map_err(|e| e.to_string())?;
    ensure(clipped == 1.2, || format!("clip example {clipped}"))?;
    Ok(format!(
        "on-policy deviation {:.1e}, clip example {clipped}",
        (got - want).abs()
    ))
}

fn f1_examples() -> Check {
    let a = outcome_f1("Stone.", "Stone");
    let b = outcome_f1("the stone", "stone");
    let c = outcome_f1("brick wall", "stone");
    ensure(a == 1.0, || format!("exact {a}"))?;
    ensure((b - 0.6667).abs() <= 1e-4, || format!("partial {b}"))?;
    ensure(c == 0.0, || format!("disjoint {c}"))?;
    Ok(format!("{a}, {b:.4}, {c}"))
}

fn run_cell(groups: &[RolloutGroup], cfg: &EngineConfig) -> std::result::Result<String, String> {
    let mut out = String::new();
    for r in pipeline::match_records(groups, cfg).map_err(|e| e.to_string())? {
        out.push_str(&to_json_line(&r));
        out.push('\n');
    }
    for r in pipeline::reward_records(groups, cfg).map_err(|e| e.to_string())? {
        out.push_str(&to_json_line(&r));
        out.push('\n');
    }
    for r in pipeline::advantage_records_for(groups, cfg, None).map_err(|e| e.to_string())? {
        out.push_str(&to_json_line(&r));
        out.push('\n');
    }
    Ok(out)
}

fn ablation_matrix() -> Check {
    let groups = fixture("synthetic.jsonl");
    ensure(groups.len() == 3, || {
        format!("{} groups in synthetic trace", groups.len())
    })?;
    let mut outputs: Vec<(String, String, String)> = Vec::new();
    for mode in [AssignmentMode::Km, AssignmentMode::Ot] {
        for variant in [
            AdvantageVariant::TrajectoryOnly,
            AdvantageVariant::TurnOnly,
            AdvantageVariant::Dual,
        ] {
            for scope in [RewardScope::OutcomeOnly, RewardScope::Integrated] {
                let mut cfg = EngineConfig {
                    mode,
                    reward_scope: scope,
                    ..EngineConfig::default()
                };
                cfg.advantage.variant = variant;
                let label = format!("{mode}/{variant}/{scope}");
                let first = run_cell(&groups, &cfg).map_err(|e| format!("{label}: {e}"))?;
                let second = run_cell(&groups, &cfg).map_err(|e| format!("{label}: {e}"))?;
                ensure(first == second, || {
                    format!("{label}: output differs between runs")
                })?;
                let adv = pipeline::advantage_records_for(&groups, &cfg, None)
                    .map_err(|e| e.to_string())?
                    .iter()
                    .map(to_json_line)
                    .collect::<Vec<_>>()
                    .join("\n");
                outputs.push((label, first, adv));
            }
        }
    }
    let mut collapsed = 0;
    for i in 0..outputs.len() {
        for j in i + 1..outputs.len() {
            ensure(outputs[i].1 != outputs[j].1, || {
                format!("{} and {} coincide", outputs[i].0, outputs[j].0)
            })?;
            if outputs[i].2 == outputs[j].2 {
                collapsed += 1;
            }
        }
    }
    Ok(format!(
        "12 cells distinct and deterministic; {collapsed} pair(s) share advantages (km vs ot under outcome_only)"
    ))
}

fn call(name: &str, params: &[(&str, String)]) -> ToolCall {
    ToolCall::new(name, params.iter().map(|(k, v)| (*k, v.clone()))).unwrap()
}

fn random_params(rng: &mut ChaCha8Rng, keys: &[&'static str]) -> Vec<(&'static str, String)> {
    let mut params = Vec::new();
    for k in keys {
        if rng.gen_bool(0.6) {
            params.push((*k, format!("v{}", rng.gen_range(0..3))));
        }
    }
    params
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Trajectory, GroundTruthTrace) {
    const TOOLS: &[&str] = &["search", "lookup", "convert", "weather", "route"];
    const KEYS: &[&str] = &["q", "city", "unit", "limit"];
    let n_gold = rng.gen_range(1..=TOOLS.len());
    let gold: Vec<ToolCall> = TOOLS[..n_gold]
        .iter()
        .map(|name| call(name, &random_params(rng, KEYS)))
        .collect();
    let n_turns = rng.gen_range(1..=4);
    let mut turns = Vec::new();
    for t in 1..=n_turns {
        let calls = (0..rng.gen_range(1..=3))
            .map(|_| {
                let name = TOOLS[rng.gen_range(0..TOOLS.len())];
                call(name, &random_params(rng, KEYS))
            })
            .collect();
        turns.push(Turn::with_calls(t, calls));
    }
    turns.push(Turn::answer(n_turns + 1, "done"));
    let traj = Trajectory::new(turns, 10).unwrap();
    (
        traj,
        GroundTruthTrace {
            calls: gold,
            golden_answer: "done".into(),
        },
    )
}

fn with_duplicate(traj: &Trajectory, turn: usize, slot: usize) -> Trajectory {
    let turns = traj
        .turns()
        .iter()
        .map(|t| {
            let mut t = t.clone();
            if t.index == turn {
                let dup = t.tool_calls[slot].clone();
                t.tool_calls.insert(slot + 1, dup);
            }
            t
        })
        .collect();
    Trajectory::new(turns, 10).unwrap()
}

fn anti_hacking() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut checked = 0;
    let mut instances = 0;
    while instances < 300 {
        let (traj, gold) = random_instance(&mut rng);
        let s = build_matrix(&traj, &gold, MatchOptions::default());
        let h = hungarian_match(&s);
        if h.matches().is_empty() {
            continue;
        }
        instances += 1;
        for &(row, _) in h.matches() {
            let pos = s.row_index()[row];
            let dup = with_duplicate(&traj, pos.turn, pos.slot);
            for penalty in [0.0, 0.1, 0.3, 1.0] {
                let cfg = EngineConfig {
                    penalty,
                    ..EngineConfig::default()
                };
                let turn_reward = |t: &Trajectory| -> std::result::Result<f64, String> {
                    let m = build_matrix(t, &gold, cfg.matching);
                    let credit = pipeline::credit_for(&m, &cfg).map_err(|e| e.to_string())?;
                    let sched = assemble_schedule(t, &credit, &gold, RewardScope::Integrated)
                        .map_err(|e| e.to_string())?;
                    Ok(sched.per_turn[pos.turn - 1])
                };
                let (before, after) = (turn_reward(&traj)?, turn_reward(&dup)?);
                if penalty > 0.0 {
                    ensure(after < before, || {
                        format!("lambda {penalty}: r_t {before} -> {after}")
                    })?;
                } else {
                    ensure(after <= before, || {
                        format!("lambda 0: r_t {before} -> {after}")
                    })?;
                }
                checked += 1;
            }
        }
    }
    Ok(format!(
        "{checked} duplications over {instances} trajectories"
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("1 golden KM fixture", golden_km, Duration::from_secs(1)),
        ("2 golden OT fixture", golden_ot, Duration::from_secs(1)),
        (
            "3 Hungarian oracle equivalence",
            hungarian_oracle,
            Duration::from_secs(10),
        ),
        ("4 cold-limit OT", cold_limit, Duration::from_secs(30)),
        (
            "5 advantage identities",
            advantage_identities,
            Duration::from_secs(5),
        ),
        (
            "6 GRPO objective sanity",
            objective_sanity,
            Duration::from_secs(5),
        ),
        ("7 outcome F1", f1_examples, Duration::from_secs(1)),
        (
            "8 ablation reachability",
            ablation_matrix,
            Duration::from_secs(30),
        ),
        ("9 anti-hacking", anti_hacking, Duration::from_secs(30)),
    ];
    let mut failed = 0;
    for (name, check, budget) in criteria {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let (status, detail) = match result {
            Ok(_) if elapsed > budget => ("FAIL", format!("took {elapsed:.2?}, budget {budget:?}")),
            Ok(detail) => ("PASS", detail),
            Err(detail) => ("FAIL", detail),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("{status} criterion {name} [{elapsed:.2?}]: {detail}");
    }
    if failed == 0 {
        println!("acceptance: all 9 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
