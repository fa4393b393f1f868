use crate::economy::{AgentId, AgentState, MarketConfig};
use crate::market::log::{EvolutionRecord, Spawn};

/// Why an evolution event did not run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionSkipped {
    pub active: usize,
    pub needed: usize,
}

fn total_wealth(agents: &[AgentState]) -> f64 {
    agents.iter().map(|a| a.wealth).sum()
}

/// Deactivate the poorest `eliminations` agents and let the richest
/// `reproductions` agents each spawn a child.
///
/// Ranking is by wealth, richest first, ties to the lower id. The richest
/// parent's child takes the poorest eliminated balance, and so on down
/// both lists. Paired eliminated balances move to the child, so total
/// wealth over all agents is unchanged. Unpaired eliminated agents keep
/// their balance; unpaired children start at zero.
pub fn evolution_step(
    agents: &mut Vec<AgentState>,
    config: &MarketConfig,
    round: u32,
) -> Result<EvolutionRecord, EvolutionSkipped> {
    let total_before = total_wealth(agents);
    let e = config.eliminations;
    let mut ranked: Vec<usize> = (0..agents.len()).filter(|&i| agents[i].active).collect();
    if ranked.len() < e + 1 {
        return Err(EvolutionSkipped { active: ranked.len(), needed: e + 1 });
    }
    ranked.sort_by(|&a, &b| {
        agents[b].wealth.total_cmp(&agents[a].wealth).then(agents[a].agent_id.cmp(&agents[b].agent_id))
    });

    // poorest first
    let eliminated: Vec<usize> = ranked[ranked.len() - e..].iter().rev().copied().collect();
    let survivors = &ranked[..ranked.len() - e];
    let parents: Vec<usize> = survivors.iter().take(config.reproductions).copied().collect();

    let mut deactivated = Vec::with_capacity(e);
    for &i in &eliminated {
        agents[i].active = false;
        deactivated.push((agents[i].agent_id, agents[i].wealth));
    }

    let mut next_id = agents.iter().map(|a| a.agent_id.0).max().unwrap_or(0) + 1;
    let mut spawned = Vec::with_capacity(parents.len());
    for (k, &p) in parents.iter().enumerate() {
        let endowment = match eliminated.get(k) {
            Some(&dead) => std::mem::replace(&mut agents[dead].wealth, 0.0),
            None => 0.0,
        };
        let parent = &agents[p];
        let mut child = AgentState::new(AgentId(next_id), parent.family.clone(), parent.skill, endowment);
        child.generation = parent.generation + 1;
        child.parent = Some(parent.agent_id);
        spawned.push(Spawn { child: child.agent_id, parent: parent.agent_id, wealth: endowment });
        agents.push(child);
        next_id += 1;
    }

    Ok(EvolutionRecord {
        round,
        deactivated,
        spawned,
        total_before,
        total_after: total_wealth(agents),
    })
}
