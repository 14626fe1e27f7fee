//! Core of the simhub runtime manager: the experiment model, the SysDef and
//! SysCfg formats, system storage, the SysAPI container executor and the
//! compute backends.

pub mod api;
pub mod backends;
pub mod client;
pub mod executor;
pub mod format;
pub mod fsutil;
pub mod model;
pub mod storage;

pub use format::{merge, parse_syscfg, parse_sysdef, render_syscfg, EffectiveConfig, FormatError};
pub use model::*;
