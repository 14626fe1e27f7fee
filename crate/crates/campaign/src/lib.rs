//! Parameter-sweep campaigns driven through the experiment service API.

pub mod predict;
pub mod report;
pub mod runner;
pub mod spec;

pub use predict::{predict_makespan, DomainError};
pub use report::{CampaignReport, RunOutcome, RunRecord};
pub use runner::{run_campaign, CampaignError};
pub use spec::{expand, Axis, AxisValue, CampaignSpec, Point, SpecError};
