//! Synthetic traffic for the gateway: power-law query sampling, a
//! position-based click model, oracle relevance and a session driver.

pub mod click;
pub mod run;
pub mod traffic;
pub mod world;

pub use click::{simulate_clicks, ClickModel, ElementDistribution, Examination, ShownDoc};
pub use run::{run_simulation, HttpTarget, SimTarget, SimulationSummary};
pub use traffic::{sample_queries, QuerySampler, TrafficConfig};
pub use world::{OracleSystem, ReversedSystem, World};

/// SplitMix64 over a pair, used to derive independent sub-seeds.
pub fn sub_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
