//! Partner-choice benchmark with rare significant events.
//!
//! A focal agent meets a stream of partners. With probability `p` a partner is
//! cooperative and offers an investment on a fixed grid; otherwise it refuses
//! everything. The episode ends on the first mutually accepted cooperation (the
//! only reward) or after `100 / p` steps, so the expected number of significant
//! meetings per episode does not depend on `p`.
//!
//! Two policy-search methods are provided over the same environment:
//!
//! * [`ppo`]: clipped-surrogate PPO with an adaptive KL penalty, on small dense
//!   networks built with [`nets`].
//! * [`cmaes`]: a full-covariance evolution strategy over a 34-dimensional
//!   genome, one episode per candidate.
//!
//! [`harness`] runs seeded experiments and persists learning curves and
//! re-evaluation scores; [`analysis`] turns them into summary tables,
//! Mann-Whitney comparisons and policy probes.

pub mod analysis;
pub mod cmaes;
pub mod env;
pub mod exec;
pub mod harness;
pub mod nets;
pub mod policy;
pub mod ppo;
pub mod seed;

pub use env::EnvConfig;
pub use nets::{ParamVector, Preset};
