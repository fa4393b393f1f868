use serde::{Deserialize, Serialize};

use crate::economy::{AgentId, TaskSpec, Usd};

/// Poster id used when the platform settles an orphaned surge listing.
pub const PLATFORM: AgentId = AgentId(0);

/// A task posted on the open market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractListing {
    pub listing_id: u64,
    pub task: TaskSpec,
    pub poster: AgentId,
    /// Contract reward with no surge premium.
    pub base_reward: Usd,
    /// Reward when the listing was first posted (base times any carried premium).
    pub original_reward: Usd,
    pub current_reward: Usd,
    pub surge_depth: u32,
    pub poster_avg_rho: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poster_family_visible: Option<String>,
    pub round_posted: u32,
}

impl ContractListing {
    pub fn is_surged(&self) -> bool {
        self.surge_depth > 0
    }
}

/// A sealed bid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bid {
    pub listing_id: u64,
    pub bidder: AgentId,
    pub price: Usd,
    pub proposal: String,
    pub bidder_dispute_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bidder_family_visible: Option<String>,
}

/// Raise the reward after a failed match: `R_d = R_0 (1 + alpha)^d`.
pub fn surge_escalate(mut listing: ContractListing, alpha: f64) -> ContractListing {
    listing.surge_depth += 1;
    listing.current_reward = listing.original_reward * (1.0 + alpha).powi(listing.surge_depth as i32);
    listing
}

/// Cool an inflated reward by `cooldown` after a successful match, never
/// going below the unsurged contract reward.
pub fn surge_cooldown(mut listing: ContractListing, cooldown: f64) -> ContractListing {
    listing.current_reward = (listing.current_reward * (1.0 - cooldown)).max(listing.base_reward);
    listing
}

/// Listings that failed to match, offered again before fresh tasks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SurgePool {
    pub entries: Vec<ContractListing>,
}

impl SurgePool {
    pub fn push(&mut self, listing: ContractListing) {
        debug_assert!(listing.surge_depth >= 1);
        self.entries.push(listing);
    }

    pub fn drain(&mut self) -> Vec<ContractListing> {
        std::mem::take(&mut self.entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
