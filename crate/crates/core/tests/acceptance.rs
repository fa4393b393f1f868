//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

use std::collections::BTreeMap;
use std::io::{BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::thread;
use std::time::{Duration, Instant};

use rand::Rng;
use serde_json::json;
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF};

use diagon::analytics::{gini, hhi, lorenz_points, random_reciprocity_baseline, reciprocity};
use diagon::economy::{
    avg_payment_ratio, base_reward, classify_payment, contract_reward, contractor_profit, llm_call_cost, poster_profit,
    reputation_dispute_rate, AgentId, AgentState, MarketConfig, PaymentStatus, PriceTable, SkillCluster, TaskSpec,
};
use diagon::execution::{cached_execution, default_catalog, CacheEntry, CacheKey, ExecutionCache, ExecutionPlan, ExecutionResult, Tier};
use diagon::experiment::{cmd_run, serve_on, ExperimentSpec};
use diagon::market::listing::{surge_cooldown, surge_escalate, ContractListing, SurgePool};
use diagon::market::log::{RunLog, TransactionRecord};
use diagon::market::{settle_autarky, Market, MarketState, Mode, RoundOutcome};
use diagon::policy::external::{run_reference_agent, ReferenceBehaviour, ReferenceStats};
use diagon::policy::{
    builtin_policy, AgentPolicy, AutarkyObservation, BeliefObservation, BidDecision, BidObservation, DecisionContext, PaymentObservation,
    PlanObservation, PolicyError, Selection, SelectionObservation, OraclePoster, ORACLE_BINS,
};
use diagon::rng::seeded;

type Verdict = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn market_with(config: &MarketConfig, mode: Mode, policy: &str) -> Market {
    let cfg = config.clone();
    Market::new(config.clone(), default_catalog(), mode, |_| builtin_policy(policy, &cfg).expect("builtin"))
        .expect("valid config")
}

fn run_log(mut market: Market) -> RunLog {
    market.run().expect("run completes");
    RunLog::from_entries(market.take_log()).expect("log parses")
}

fn baseline(seed: u64) -> MarketConfig {
    MarketConfig { seed, ..MarketConfig::default() }
}

fn formula_suite() -> Verdict {
    let start = Instant::now();
    let deepseek = PriceTable::new("deepseek", "deepseek-v3", 0.26, 0.38);
    let claude = PriceTable::new("claude", "claude", 1.0, 5.0);
    let task = |c_ref: f64, pass_rate: f64| TaskSpec {
        task_id: "t".into(),
        domain: SkillCluster::ALL[0],
        c_ref,
        pass_rate,
        source: "x".into(),
    };
    let cases: Vec<(&str, f64, f64)> = vec![
        ("llm_call_cost deepseek", llm_call_cost(&deepseek, 1_000_000, 0), 0.26),
        ("llm_call_cost zero", llm_call_cost(&claude, 0, 0), 0.0),
        ("llm_call_cost claude", llm_call_cost(&claude, 500_000, 100_000), 1.0),
        ("base_reward easy", base_reward(&task(0.02, 1.0), 5.0).unwrap(), 0.10),
        ("base_reward hard", base_reward(&task(0.02, 0.5), 5.0).unwrap(), 0.20),
        ("base_reward identity", base_reward(&task(1.0, 1.0), 1.0).unwrap(), 1.0),
        ("contract_reward mu10", contract_reward(0.20, 10.0), 2.0),
        ("contract_reward mu1", contract_reward(0.20, 1.0), 0.20),
        ("contract_reward mu5", contract_reward(0.20, 5.0), 1.0),
        ("poster_profit full", poster_profit(2.0, 1.0, 1.5, 0.01), 0.49),
        ("poster_profit floor", poster_profit(2.0, 0.5, 1.5, 0.0), 1.25),
        ("poster_profit zero", poster_profit(0.0, 1.0, 0.0, 0.0), 0.0),
        ("contractor_profit", contractor_profit(0.95, 1.5, 10.0, 0.05, 0.01), 0.915),
        ("contractor_profit loss", contractor_profit(0.5, 1.0, 10.0, 0.10, 0.0), -0.5),
        ("contractor_profit identity", contractor_profit(1.0, 1.0, 1.0, 0.0, 0.0), 1.0),
        ("avg_payment_ratio empty", avg_payment_ratio(&[]), 0.0),
        ("avg_payment_ratio pair", avg_payment_ratio(&[1.0, 0.5]), 0.75),
        ("avg_payment_ratio single", avg_payment_ratio(&[0.95]), 0.95),
        ("dispute_rate mixed", reputation_dispute_rate(&[1.0, 0.9, 0.5]), 2.0 / 3.0),
        ("dispute_rate clean", reputation_dispute_rate(&[1.0, 1.0]), 0.0),
        ("dispute_rate empty", reputation_dispute_rate(&[]), 0.0),
    ];
    for (name, got, want) in &cases {
        ensure!(close(*got, *want, 1e-9), "{name}: got {got}, want {want}");
    }
    ensure!(base_reward(&task(0.02, 0.0), 5.0).is_err(), "pass_rate 0 accepted");
    for (rho, want) in [(0.95, PaymentStatus::Approve), (0.949, PaymentStatus::Dispute), (1.0, PaymentStatus::Approve)] {
        let got = classify_payment(rho).map_err(|e| e.to_string())?;
        ensure!(got == want, "classify_payment({rho}) = {got:?}");
    }
    ensure!(classify_payment(0.3).is_err(), "rho below the floor classified");
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!("{} numeric examples and 3 classifications in {elapsed:?}", cases.len()))
}

fn flow(t: &TransactionRecord) -> f64 {
    let earned = match t.mode {
        Mode::Market => t.reward,
        Mode::Autarky => t.rho * t.reward,
    };
    earned - t.mu * t.exec_cost - t.poster_backbone - t.contractor_backbone
}

fn check_conservation(log: &RunLog, initial: f64) -> Result<(f64, usize), String> {
    let mut prev = initial;
    let mut worst = 0.0f64;
    let mut events = 0;
    for r in &log.rounds {
        let s = &r.summary;
        let flows: f64 = r.transactions.iter().map(flow).sum::<f64>() - s.overhead_backbone;
        let delta = s.total_wealth - prev;
        worst = worst.max((delta - flows).abs());
        ensure!(
            close(delta, flows, 1e-6),
            "round {}: wealth moved {delta} but the log books {flows}",
            s.round
        );
        let from_lines: f64 = s.agents.iter().map(|a| a.wealth).sum::<f64>() + s.platform_balance;
        ensure!(close(from_lines, s.total_wealth, 1e-9), "round {}: agent lines sum to {from_lines}", s.round);
        if let Some(ev) = &r.evolution {
            events += 1;
            ensure!(
                close(ev.total_before, ev.total_after, 1e-9),
                "round {}: evolution moved {} -> {}",
                ev.round,
                ev.total_before,
                ev.total_after
            );
        }
        prev = s.total_wealth;
    }
    Ok((worst, events))
}

fn conservation() -> Verdict {
    let start = Instant::now();
    let config = baseline(7);
    let initial = config.n_agents as f64 * config.w0;
    let log = run_log(market_with(&config, Mode::Market, "baseline"));
    ensure!(log.rounds.len() == 24, "{} rounds logged", log.rounds.len());
    let (worst, events) = check_conservation(&log, initial)?;
    let elapsed = start.elapsed();
    ensure!(events == 4, "{events} evolution events");
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(format!("24 rounds, worst residual {worst:.2e}, {events} evolution events conserved, {elapsed:?}"))
}

fn floor_and_threshold() -> Verdict {
    let mut n = 0;
    let mut adversarial = baseline(3);
    adversarial.disposition = diagon::economy::Disposition::Adversarial;
    let runs = [
        (baseline(7), "baseline"),
        (baseline(8), "random"),
        (baseline(9), "lowest-price"),
        (adversarial, "baseline"),
    ];
    for (config, policy) in &runs {
        let log = run_log(market_with(config, Mode::Market, policy));
        for t in log.transactions() {
            n += 1;
            ensure!((0.5..=1.0).contains(&t.rho), "{policy} listing {}: rho {}", t.listing_id, t.rho);
            let want = classify_payment(t.rho).map_err(|e| e.to_string())?;
            ensure!(t.status == want, "listing {}: status {:?} for rho {}", t.listing_id, t.status, t.rho);
        }
    }
    ensure!(n > 0, "no records");
    Ok(format!("{n} records across {} runs, all rho in [0.5, 1] with matching status", runs.len()))
}

/// Baseline trader that only bids on listings that already failed at
/// least once.
struct SurgeHunter(Box<dyn AgentPolicy>);

impl AgentPolicy for SurgeHunter {
    fn name(&self) -> &str {
        "surge-hunter"
    }
    fn decide_bids(&mut self, obs: &BidObservation, ctx: &mut DecisionContext<'_>) -> Result<Vec<BidDecision>, PolicyError> {
        let mut obs = obs.clone();
        obs.listings.retain(|l| l.surge_depth >= 1);
        self.0.decide_bids(&obs, ctx)
    }
    fn decide_selection(&mut self, obs: &SelectionObservation, ctx: &mut DecisionContext<'_>) -> Result<Selection, PolicyError> {
        self.0.decide_selection(obs, ctx)
    }
    fn decide_plan(&mut self, obs: &PlanObservation, ctx: &mut DecisionContext<'_>) -> Result<ExecutionPlan, PolicyError> {
        self.0.decide_plan(obs, ctx)
    }
    fn decide_payment(&mut self, obs: &PaymentObservation, ctx: &mut DecisionContext<'_>) -> Result<f64, PolicyError> {
        self.0.decide_payment(obs, ctx)
    }
    fn update_belief(&mut self, obs: &BeliefObservation, ctx: &mut DecisionContext<'_>) -> Result<String, PolicyError> {
        self.0.update_belief(obs, ctx)
    }
    fn decide_autarky(
        &mut self,
        obs: &AutarkyObservation,
        ctx: &mut DecisionContext<'_>,
    ) -> Result<Option<ExecutionPlan>, PolicyError> {
        self.0.decide_autarky(obs, ctx)
    }
    fn offspring(&self) -> Box<dyn AgentPolicy> {
        Box::new(SurgeHunter(self.0.offspring()))
    }
}

fn check_escalation(outcome: &RoundOutcome) -> Result<usize, String> {
    let mut surged = 0;
    for l in &outcome.listings {
        ensure!(
            l.surge_depth == outcome.round - l.round_posted,
            "listing {} posted in round {} offered in round {} at depth {}",
            l.listing_id,
            l.round_posted,
            outcome.round,
            l.surge_depth
        );
        let want = l.original_reward * 1.15f64.powi(l.surge_depth as i32);
        ensure!(close(l.current_reward, want, 1e-9), "listing {}: reward {} want {want}", l.listing_id, l.current_reward);
        surged += usize::from(l.is_surged());
    }
    Ok(surged)
}

fn surge_law() -> Verdict {
    // nobody ever bids: every listing keeps failing
    let config = MarketConfig { rounds: 8, ..baseline(5) };
    let mut market = market_with(&config, Mode::Market, "silent");
    let mut deepest = 0;
    let mut surged = 0;
    for _ in 0..config.rounds {
        let outcome = market.run_round().map_err(|e| e.to_string())?;
        ensure!(outcome.records.is_empty(), "round {}: silent market settled", outcome.round);
        surged += check_escalation(&outcome)?;
        for l in &outcome.listings {
            ensure!(close(l.original_reward, l.base_reward, 1e-12), "listing {} started above base", l.listing_id);
            deepest = deepest.max(l.surge_depth);
        }
    }
    ensure!(deepest == config.rounds - 1, "deepest escalation {deepest}");

    // cooldown on matched surge listings carries over to the next posting of the task
    let config = MarketConfig { rounds: 12, ..baseline(6) };
    let cfg = config.clone();
    let mut market = Market::new(config.clone(), default_catalog(), Mode::Market, |_| {
        Box::new(SurgeHunter(builtin_policy("baseline", &cfg).unwrap()))
    })
    .map_err(|e| e.to_string())?;
    let mut cooled = 0;
    for _ in 0..config.rounds {
        let mut levels = market.state().surge_levels.clone();
        let outcome = market.run_round().map_err(|e| e.to_string())?;
        surged += check_escalation(&outcome)?;
        let by_id: BTreeMap<u64, &ContractListing> = outcome.listings.iter().map(|l| (l.listing_id, l)).collect();
        for l in outcome.listings.iter().filter(|l| !l.is_surged()) {
            let level = levels.get(&l.task.task_id).copied().unwrap_or(1.0);
            ensure!(
                close(l.original_reward, l.base_reward * level, 1e-9),
                "fresh listing {} of {}: {} vs base {} at level {level}",
                l.listing_id,
                l.task.task_id,
                l.original_reward,
                l.base_reward
            );
        }
        for t in &outcome.records {
            let l = by_id[&t.listing_id];
            if l.current_reward > l.base_reward * (1.0 + 1e-12) {
                cooled += 1;
                let next = (l.current_reward * 0.95).max(l.base_reward) / l.base_reward;
                if next > 1.0 + 1e-12 {
                    levels.insert(l.task.task_id.clone(), next);
                } else {
                    levels.remove(&l.task.task_id);
                }
            }
        }
        let got = &market.state().surge_levels;
        ensure!(got.len() == levels.len(), "round {}: {} surge levels, want {}", outcome.round, got.len(), levels.len());
        for (task, want) in &levels {
            let have = got.get(task).copied().unwrap_or(f64::NAN);
            ensure!(close(have, *want, 1e-9), "round {}: level of {task} is {have}, want {want}", outcome.round);
        }
    }
    ensure!(cooled > 0, "no surge listing ever matched");

    let listing = ContractListing {
        listing_id: 1,
        task: default_catalog().tasks()[0].clone(),
        poster: AgentId(1),
        base_reward: 1.0,
        original_reward: 1.0,
        current_reward: 1.0,
        surge_depth: 0,
        poster_avg_rho: 0.0,
        poster_family_visible: None,
        round_posted: 1,
    };
    let once = surge_escalate(listing.clone(), 0.15);
    ensure!(close(once.current_reward, 1.15, 1e-9), "one escalation gives {}", once.current_reward);
    let twice = surge_escalate(once.clone(), 0.15);
    ensure!(close(twice.current_reward, 1.3225, 1e-9), "two escalations give {}", twice.current_reward);
    ensure!(close(surge_escalate(listing.clone(), 0.0).current_reward, 1.0, 1e-12), "alpha 0 moved the reward");
    ensure!(close(surge_cooldown(once, 0.05).current_reward, 1.0925, 1e-9), "cooldown of 1.15");
    ensure!(close(surge_cooldown(listing, 0.05).current_reward, 1.0, 1e-12), "cooldown went below the floor");
    let two = surge_cooldown(surge_cooldown(twice, 0.05), 0.05);
    ensure!(close(two.current_reward, 1.3225 * 0.95 * 0.95, 1e-9), "two cooldowns give {}", two.current_reward);
    Ok(format!(
        "{surged} surged offers match R0*1.15^d (depth up to {deepest}); {cooled} matched surges cooled 5% with floor"
    ))
}

fn normal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    if b <= a {
        return 0.0;
    }
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let x = a + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    s * h / 3.0
}

/// Mean of a Gaussian clamped into [lo, hi], by quadrature.
fn clamped_mean(mu: f64, sigma: f64, lo: f64, hi: f64) -> f64 {
    let pdf = |x| normal_pdf(x, mu, sigma);
    let (left, right) = (mu - 12.0 * sigma, mu + 12.0 * sigma);
    let below = simpson(pdf, left, lo, 20_000);
    let above = simpson(pdf, hi, right, 20_000);
    let inside = simpson(|x| x * pdf(x), lo, hi, 20_000);
    lo * below + hi * above + inside
}

fn oracle_calibration() -> Verdict {
    let poster = OraclePoster::default();
    let qualities = [0.0, 0.3, 0.7, 1.0];
    let mut rng = seeded(2024);
    let mut means = Vec::new();
    let mut detail = Vec::new();
    for (bin, q) in ORACLE_BINS.iter().zip(qualities) {
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let rho = poster.decide_payment(q, 0.0, &mut rng);
            ensure!((0.5..=1.0).contains(&rho), "{} draw {rho} outside the floor", bin.label);
            sum += rho;
        }
        let empirical = sum / n as f64;
        let oracle = clamped_mean(bin.mean, bin.std, 0.5, 1.0);
        ensure!(
            close(empirical, oracle, 0.01),
            "{} bin: empirical {empirical:.4} vs integrated {oracle:.4}",
            bin.label
        );
        detail.push(format!("{} {empirical:.4}/{oracle:.4}", bin.label));
        means.push(empirical);
    }
    ensure!(means.windows(2).all(|w| w[0] < w[1]), "bin means not increasing: {means:?}");
    let table: Vec<f64> = ORACLE_BINS.iter().map(|b| b.mean).collect();
    ensure!(table == vec![0.593, 0.672, 0.868, 0.980], "table means {table:?}");
    Ok(format!("empirical/integrated: {}", detail.join(", ")))
}

fn gini_brute(v: &[f64]) -> f64 {
    let total: f64 = v.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut diff = 0.0;
    for a in v {
        for b in v {
            diff += (a - b).abs();
        }
    }
    diff / (2.0 * v.len() as f64 * total)
}

fn hhi_brute(v: &[f64]) -> f64 {
    let total: f64 = v.iter().sum();
    v.iter().map(|x| x * x).sum::<f64>() / (total * total)
}

fn reciprocity_brute(edges: &[(u32, u32)]) -> f64 {
    let mut distinct: Vec<(u32, u32)> = Vec::new();
    for &(u, v) in edges {
        if u != v && !distinct.contains(&(u, v)) {
            distinct.push((u, v));
        }
    }
    if distinct.is_empty() {
        return 0.0;
    }
    let mutual = distinct.iter().filter(|&&(u, v)| distinct.contains(&(v, u))).count();
    mutual as f64 / distinct.len() as f64
}

fn lorenz_brute(v: &[f64]) -> Vec<(f64, f64)> {
    let n = v.len();
    let total: f64 = v.iter().sum();
    let mut left = v.to_vec();
    let mut acc = 0.0;
    let mut out = Vec::new();
    for k in 1..=n {
        let (idx, _) = left.iter().enumerate().fold((0, f64::INFINITY), |best, (i, &x)| if x < best.1 { (i, x) } else { best });
        acc += left.swap_remove(idx);
        let y = if total > 0.0 { acc / total } else { k as f64 / n as f64 };
        out.push((k as f64 / n as f64, y));
    }
    out
}

fn metric_oracles() -> Verdict {
    let mut rng = seeded(99);
    for case in 0..1000 {
        let n = rng.random_range(1..=50);
        let values: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < 0.2 { 0.0 } else { rng.random_range(0.0..100.0) })
            .collect();
        let g = gini(&values).map_err(|e| e.to_string())?;
        ensure!(close(g, gini_brute(&values), 1e-9), "case {case}: gini {g} vs {}", gini_brute(&values));
        if values.iter().sum::<f64>() > 0.0 {
            let h = hhi(&values).map_err(|e| e.to_string())?;
            ensure!(close(h, hhi_brute(&values), 1e-9), "case {case}: hhi {h} vs {}", hhi_brute(&values));
        }
        let lp = lorenz_points(&values).map_err(|e| e.to_string())?;
        let lb = lorenz_brute(&values);
        ensure!(lp.len() == lb.len(), "case {case}: {} lorenz points", lp.len());
        for (p, b) in lp.iter().zip(&lb) {
            ensure!(close(p.0, b.0, 1e-9) && close(p.1, b.1, 1e-9), "case {case}: lorenz {p:?} vs {b:?}");
        }
        let nodes = rng.random_range(1..=10u32);
        let m = rng.random_range(0..=50);
        let edges: Vec<(u32, u32)> = (0..m).map(|_| (rng.random_range(0..nodes), rng.random_range(0..nodes))).collect();
        let r = reciprocity(&edges);
        ensure!(close(r, reciprocity_brute(&edges), 1e-9), "case {case}: reciprocity {r} vs {}", reciprocity_brute(&edges));
    }

    // kappa * N distinct contracts among N agents
    let (nodes, m, trials) = (25u32, 50usize, 2000);
    let mut total = 0.0;
    for _ in 0..trials {
        let mut edges: Vec<(u32, u32)> = Vec::with_capacity(m);
        while edges.len() < m {
            let e = (rng.random_range(0..nodes), rng.random_range(0..nodes));
            if e.0 != e.1 && !edges.contains(&e) {
                edges.push(e);
            }
        }
        total += reciprocity_brute(&edges);
    }
    let sampled = total / trials as f64;
    let library = random_reciprocity_baseline(nodes as usize, m, trials, &mut rng);
    ensure!(close(sampled, 0.08, 0.02), "rejection-sampled baseline {sampled:.4}");
    ensure!(close(library, 0.08, 0.02), "library baseline {library:.4}");
    Ok(format!(
        "1000 instances agree within 1e-9; random reciprocity at 50 edges on 25 nodes {:.2}% (library {:.2}%)",
        100.0 * sampled,
        100.0 * library
    ))
}

fn check_evolution(config: &MarketConfig, period: u32, count: usize) -> Result<usize, String> {
    let mut market = market_with(config, Mode::Market, "baseline");
    let mut events = 0;
    for _ in 0..config.rounds {
        let before: BTreeMap<AgentId, f64> = market.state().agents.iter().map(|a| (a.agent_id, a.wealth)).collect();
        let outcome = market.run_round().map_err(|e| e.to_string())?;
        let due = outcome.round % period == 0;
        ensure!(due == outcome.evolution.is_some(), "round {}: evolution ran = {}", outcome.round, !due);
        let Some(ev) = outcome.evolution else { continue };
        events += 1;
        ensure!(
            ev.deactivated.len() == count && ev.spawned.len() == count,
            "round {}: {} deactivated, {} spawned",
            ev.round,
            ev.deactivated.len(),
            ev.spawned.len()
        );
        let state = market.state();
        ensure!(state.active_ids().len() == config.n_agents, "round {}: population drifted", ev.round);
        for (s, (_, w)) in ev.spawned.iter().zip(&ev.deactivated) {
            ensure!(s.wealth == *w, "child {:?} got {} but its paired balance was {w}", s.child, s.wealth);
        }
        for s in &ev.spawned {
            let child = state.agent(s.child).ok_or("missing child")?;
            let parent = state.agent(s.parent).ok_or("missing parent")?;
            ensure!(
                child.payment_history_as_poster.is_empty() && child.payment_history_as_contractor.is_empty(),
                "child {:?} has history",
                s.child
            );
            ensure!(child.poster_avg_rho() == 0.0 && child.contractor_avg_rho() == 0.0, "child avg rho nonzero");
            ensure!(child.belief.is_empty(), "child inherited a belief");
            ensure!(child.generation == parent.generation + 1, "child generation {}", child.generation);
            ensure!(child.family == parent.family && child.skill == parent.skill, "child traits differ from parent");
            ensure!(child.wealth == s.wealth && !before.contains_key(&s.child), "child wealth or id wrong");
        }
        for (id, _) in &ev.deactivated {
            let dead = state.agent(*id).ok_or("missing deactivated agent")?;
            ensure!(!dead.active, "agent {id:?} still active");
            ensure!(before.contains_key(id), "agent {id:?} was never in the population");
            ensure!(dead.wealth == 0.0, "agent {id:?} kept {} after its balance moved", dead.wealth);
        }
    }
    Ok(events)
}

fn evolution_mechanics() -> Verdict {
    let default = baseline(4);
    let events = check_evolution(&default, 6, 1)?;
    ensure!(events == 4, "{events} default events");
    let fierce = MarketConfig { elimination_period: 3, eliminations: 3, reproductions: 3, ..baseline(4) };
    let fierce_events = check_evolution(&fierce, 3, 3)?;
    ensure!(fierce_events == 8, "{fierce_events} fierce events");
    Ok(format!(
        "default 1+1 at rounds 6/12/18/24 ({:.0}% turnover), fierce 3+3 in {fierce_events} events, children start clean",
        100.0 / default.n_agents as f64
    ))
}

fn autarky_contract() -> Verdict {
    let config = baseline(12);
    let mut market = market_with(&config, Mode::Autarky, "baseline");
    market.run().map_err(|e| e.to_string())?;
    let state = market.state();
    let mut n = 0;
    for t in &state.transactions {
        n += 1;
        ensure!(t.mode == Mode::Autarky, "market record in autarky");
        ensure!(t.rho == t.quality, "listing {}: rho {} vs q {}", t.listing_id, t.rho, t.quality);
        ensure!(t.poster == t.contractor, "listing {} executed by someone else", t.listing_id);
    }
    ensure!(n > 0, "no autarky records");
    for a in &state.agents {
        ensure!(
            a.payment_history_as_poster.is_empty() && a.payment_history_as_contractor.is_empty(),
            "agent {:?} gained reputation entries",
            a.agent_id
        );
    }
    let log = RunLog::from_entries(market.take_log()).map_err(|e| e.to_string())?;
    let (worst, _) = check_conservation(&log, config.n_agents as f64 * config.w0)?;

    let one = MarketConfig { n_agents: 2, ..MarketConfig::default() };
    let task = default_catalog().tasks()[0].clone();
    let listing = ContractListing {
        listing_id: 1,
        task,
        poster: AgentId(1),
        base_reward: 2.0,
        original_reward: 2.0,
        current_reward: 2.0,
        surge_depth: 0,
        poster_avg_rho: 0.0,
        poster_family_visible: None,
        round_posted: 1,
    };
    let plan = ExecutionPlan::new(Tier::Mid, Vec::new());
    let mut profits = Vec::new();
    for q in [1.0, 0.0] {
        let mut state = MarketState {
            mode: Mode::Autarky,
            round: 1,
            agents: vec![AgentState::new(AgentId(1), one.families[0].clone(), SkillCluster::ALL[0], 1.0)],
            surge_pool: SurgePool::default(),
            surge_levels: BTreeMap::new(),
            open_listings: Vec::new(),
            transactions: Vec::new(),
            round_records: Vec::new(),
            evolution: Vec::new(),
            platform_balance: 0.0,
            next_listing_id: 2,
        };
        let exec = ExecutionResult { quality: q, exec_cost: 0.05, output_preview: String::new(), from_cache: false };
        let record = settle_autarky(&mut state, &one, &listing, &plan, &exec, 0.0, 1);
        ensure!(record.rho == q, "rho {} for q {q}", record.rho);
        ensure!(state.agents[0].payment_history_as_poster.is_empty(), "history written");
        profits.push(record.contractor_profit);
    }
    ensure!(close(profits[0], 1.5, 1e-9), "q=1 profit {}", profits[0]);
    ensure!(close(profits[1], -0.5, 1e-9), "q=0 profit {}", profits[1]);
    Ok(format!("{n} records with rho == q, no reputation entries, worst residual {worst:.1e}; profit example 1.5 and -0.5"))
}

fn determinism() -> Verdict {
    let start = Instant::now();
    let dirs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().expect("tempdir")).collect();
    let mut logs = Vec::new();
    for (dir, seed) in dirs.iter().zip([21u64, 21, 22]) {
        let spec = ExperimentSpec {
            name: "det".into(),
            seeds: vec![seed],
            output_dir: dir.path().to_path_buf(),
            ..ExperimentSpec::default()
        };
        let run = cmd_run(&spec).map_err(|e| e.to_string())?;
        logs.push(std::fs::read(&run.seeds[0].log_path).map_err(|e| e.to_string())?);
    }
    let elapsed = start.elapsed();
    ensure!(logs[0] == logs[1], "same seed produced different logs");
    ensure!(logs[0] != logs[2], "different seeds produced identical logs");
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("{} byte logs identical for equal seeds, different across seeds, {elapsed:?} for three runs", logs[0].len()))
}

fn specialisation() -> Verdict {
    let start = Instant::now();
    let (mut n, mut matched) = (0u64, 0u64);
    let mut per_seed = Vec::new();
    for seed in 1..=5 {
        let config = baseline(seed);
        ensure!(config.execution.skill_bonus == 0.15, "skill bonus {}", config.execution.skill_bonus);
        let log = run_log(market_with(&config, Mode::Market, "baseline"));
        let (mut sn, mut sm) = (0u64, 0u64);
        for t in log.transactions() {
            sn += 1;
            sm += u64::from(t.skill_matched);
        }
        per_seed.push(format!("{:.2}", sm as f64 / sn as f64));
        n += sn;
        matched += sm;
    }
    let share = matched as f64 / n as f64;
    let p = if matched == 0 { 1.0 } else { Binomial::new(0.2, n).unwrap().sf(matched - 1) };
    let elapsed = start.elapsed();
    ensure!(share >= 0.30, "skill-matched share {share:.3} is less than 10 pp above 0.20");
    ensure!(p < 0.01, "binomial p = {p:.3e}");
    ensure!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
    Ok(format!("{matched}/{n} = {share:.3} skill-matched (per seed {}), one-sided p = {p:.1e}", per_seed.join(" ")))
}

fn quality_bins(records: &[f64]) -> [u64; 4] {
    let mut bins = [0; 4];
    for &q in records {
        bins[OraclePoster::bin_index(q)] += 1;
    }
    bins
}

fn cache_behaviour() -> Verdict {
    let key = CacheKey { task_id: "t".into(), tier: Tier::Mid, skill_match: false };
    let mut cache = ExecutionCache::new();
    let mut calls = 0;
    let mut rng = seeded(1);
    let sample = ExecutionResult { quality: 1.0, exec_cost: 0.02, output_preview: "ok".into(), from_cache: false };
    let first = cached_execution(&mut cache, &key, |_| { calls += 1; sample.clone() }, &mut rng);
    ensure!(calls == 1 && cache.len() == 1 && !first.from_cache, "write-through: {calls} calls, {} entries", cache.len());

    let mut cache = ExecutionCache::new();
    for q in [1.0, 0.0] {
        cache.insert(key.clone(), CacheEntry { quality: q, exec_cost: 0.02, output_preview: String::new() });
    }
    let draw = |seed: u64, cache: &mut ExecutionCache| -> Vec<f64> {
        let mut rng = seeded(seed);
        (0..10_000)
            .map(|_| cached_execution(cache, &key, |_| panic!("hit expected"), &mut rng).quality)
            .collect()
    };
    let hits = draw(5, &mut cache);
    let ones = hits.iter().filter(|&&q| q == 1.0).count() as f64 / hits.len() as f64;
    ensure!(close(ones, 0.5, 0.02), "uniform sampling gave {ones:.4} for the first entry");
    ensure!(hits == draw(5, &mut cache), "identical seed and cache state gave a different sequence");
    ensure!(cache.len() == 2, "hits wrote to the cache");

    // engine runs with and without replay over the same seeds
    let mut shared = ExecutionCache::new();
    let (mut cached_q, mut fresh_q) = (Vec::new(), Vec::new());
    let mut replayed = 0;
    for seed in 1..=9 {
        let config = MarketConfig { use_cache: true, ..baseline(seed) };
        let cfg = config.clone();
        let mut market = Market::new(config, default_catalog(), Mode::Market, |_| builtin_policy("baseline", &cfg).unwrap())
            .map_err(|e| e.to_string())?
            .with_cache(std::mem::take(&mut shared));
        let before = market.cache().len();
        market.run().map_err(|e| e.to_string())?;
        let settled = market.state().transactions.len();
        replayed += settled - (market.cache().len() - before);
        cached_q.extend(market.state().transactions.iter().map(|t| t.quality));
        shared = market.cache().clone();

        let mut plain = market_with(&baseline(seed), Mode::Market, "baseline");
        plain.run().map_err(|e| e.to_string())?;
        fresh_q.extend(plain.state().transactions.iter().map(|t| t.quality));
    }
    let a = quality_bins(&cached_q);
    let b = quality_bins(&fresh_q);
    let (na, nb) = (cached_q.len() as f64, fresh_q.len() as f64);
    let mut stat = 0.0;
    let mut cols = 0;
    for k in 0..4 {
        let col = (a[k] + b[k]) as f64;
        if col == 0.0 {
            continue;
        }
        cols += 1;
        for (obs, n) in [(a[k] as f64, na), (b[k] as f64, nb)] {
            let expected = col * n / (na + nb);
            stat += (obs - expected).powi(2) / expected;
        }
    }
    let df = (cols - 1) as f64;
    let p = ChiSquared::new(df).unwrap().sf(stat);
    ensure!(cached_q.len() >= 10_000 && fresh_q.len() >= 10_000, "only {} / {} executions", cached_q.len(), fresh_q.len());
    ensure!(p > 0.01, "quality bins differ: cached {a:?} vs fresh {b:?}, chi2 {stat:.2} on {df} df, p = {p:.2e}");
    Ok(format!(
        "write-through and 50/50 sampling ({ones:.3}); {} cached ({replayed} replayed) vs {} fresh executions, chi2 {stat:.2} on {df} df, p = {p:.3}",
        cached_q.len(),
        fresh_q.len()
    ))
}

fn reference_client(addr: std::net::SocketAddr, agents: Vec<u32>, behaviour: ReferenceBehaviour) -> thread::JoinHandle<std::io::Result<ReferenceStats>> {
    thread::spawn(move || {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut writer = stream.try_clone()?;
        writeln!(writer, "{}", json!({ "hello": { "agents": agents } }))?;
        run_reference_agent(BufReader::new(stream), writer, behaviour)
    })
}

fn wire_protocol() -> Verdict {
    let start = Instant::now();
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut spec = ExperimentSpec::from_toml(
        r#"
        name = "wire"
        seeds = [3]
        agent_timeout_secs = 0.05
        [config]
        rounds = 6
        [policies.assign]
        "1" = "serve"
        "2" = "serve"
        "3" = "serve"
        "#,
    )
    .map_err(|e| e.to_string())?;
    spec.output_dir = out.path().to_path_buf();
    let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    let addr = listener.local_addr().map_err(|e| e.to_string())?;
    let clients = [
        (1, reference_client(addr, vec![1], ReferenceBehaviour::Cooperative)),
        (2, reference_client(addr, vec![2], ReferenceBehaviour::Silent)),
        (3, reference_client(addr, vec![3], ReferenceBehaviour::Malformed)),
    ];
    let run = serve_on(&spec, listener).map_err(|e| e.to_string())?;
    let mut stats = BTreeMap::new();
    for (id, handle) in clients {
        let s = handle.join().map_err(|_| "client thread panicked")?.map_err(|e| e.to_string())?;
        stats.insert(id, s);
    }
    let log = &run.seeds[0].log;
    ensure!(log.rounds.len() == 6, "{} rounds completed", log.rounds.len());
    let coop = &stats[&1];
    ensure!(coop.rounds_seen == 6, "cooperative agent saw {} rounds", coop.rounds_seen);
    ensure!(coop.queries_sent > 0 && coop.answers == coop.queries_sent, "{} queries, {} answers", coop.queries_sent, coop.answers);
    let coop_contracts = log.transactions().filter(|t| t.contractor == AgentId(1) || t.poster == AgentId(1)).count();
    ensure!(coop_contracts > 0, "cooperative agent never traded");

    let incidents: Vec<_> = log.rounds.iter().flat_map(|r| &r.incidents).collect();
    let of = |id: u32, needle: &str| incidents.iter().filter(|i| i.agent == Some(AgentId(id)) && i.detail.contains(needle)).count();
    let (timeouts, malformed) = (of(2, "timed out"), of(3, "protocol violation"));
    ensure!(timeouts > 0, "no timeout incidents for the silent agent");
    ensure!(malformed > 0, "no protocol incidents for the malformed agent");
    let coop_incidents: Vec<&str> = incidents.iter().filter(|i| i.agent == Some(AgentId(1))).map(|i| i.detail.as_str()).collect();
    ensure!(coop_incidents.is_empty(), "cooperative agent caused incidents: {coop_incidents:?}");
    for t in log.transactions() {
        ensure!(t.contractor != AgentId(2) && t.contractor != AgentId(3), "defaulted agent won listing {}", t.listing_id);
        ensure!(t.poster != AgentId(2) && t.poster != AgentId(3), "defaulted agent awarded listing {}", t.listing_id);
    }
    Ok(format!(
        "6 rounds served; reference agent {} requests, {} queries answered, {coop_contracts} trades; {timeouts} timeout and {malformed} malformed incidents defaulted; {:?}",
        coop.requests,
        coop.answers,
        start.elapsed()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 12] = [
        ("formula suite", formula_suite),
        ("wealth conservation", conservation),
        ("payment floor and threshold", floor_and_threshold),
        ("surge law", surge_law),
        ("oracle poster calibration", oracle_calibration),
        ("metric oracles", metric_oracles),
        ("evolution mechanics", evolution_mechanics),
        ("autarky contract", autarky_contract),
        ("determinism", determinism),
        ("directional specialisation", specialisation),
        ("cache behaviour", cache_behaviour),
        ("wire protocol", wire_protocol),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let verdict = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match verdict {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
