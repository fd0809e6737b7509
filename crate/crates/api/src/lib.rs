//! HTTP service over the Seastar model: resource objects, traversal,
//! selection queries, derived metrics, webhooks and cache tiers.

pub mod error;
pub mod query;
pub mod server;
pub mod tier;
pub mod view;
pub mod webhook;

pub use error::ApiError;
pub use server::{master_router, serve, tier_router, Master, StatsHook};
pub use tier::{Mode, TierConfig, TierProxy};
pub use view::{CallerIdentity, ResourceObject, View};
pub use webhook::{Dispatcher, DispatcherConfig};
