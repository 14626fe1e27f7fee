use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use simhub_core::{BackendId, Capacity, ExperimentId, SystemId};

use crate::predict::predict_makespan;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunOutcome {
    Finished,
    BuildFailed,
    RunFailed,
    TimedOut,
    /// The service rejected a request for this run.
    Error,
}

impl RunOutcome {
    pub fn succeeded(self) -> bool {
        self == RunOutcome::Finished
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentId>,
    pub outcome: RunOutcome,
    /// Duration of the run action as reported by the backend, 0 without one.
    pub duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub index: usize,
    pub coords: Vec<usize>,
    pub experiment: Option<ExperimentId>,
    pub outcome: RunOutcome,
    pub duration_s: f64,
    /// Seconds after campaign start.
    pub submitted_at_s: f64,
    pub finished_at_s: f64,
    /// Every attempt, the last one being the reported outcome.
    pub attempts: Vec<Attempt>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Median run duration of finished runs.
    pub per_run_s: f64,
    /// Ideal model for the measured per-run duration.
    pub ideal_makespan_s: f64,
    /// Efficiency that makes the model match the measured makespan.
    pub fitted_efficiency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub system: SystemId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<BackendId>,
    pub parallelism: Capacity,
    pub runs: Vec<RunRecord>,
    /// First submission to last completion.
    pub makespan_s: f64,
    pub total_cpu_time_s: f64,
    pub failures: usize,
    /// Highest number of simultaneously active experiments.
    pub max_active: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<Prediction>,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

impl CampaignReport {
    /// Builds the report; `runs` must be ordered by point index.
    pub fn new(
        system: SystemId,
        backend: Option<BackendId>,
        parallelism: Capacity,
        runs: Vec<RunRecord>,
        max_active: usize,
    ) -> Self {
        let makespan_s = if runs.is_empty() {
            0.0
        } else {
            let first = runs.iter().map(|r| r.submitted_at_s).fold(f64::INFINITY, f64::min);
            let last = runs.iter().map(|r| r.finished_at_s).fold(0.0, f64::max);
            (last - first).max(0.0)
        };
        let total_cpu_time_s = runs.iter().map(|r| r.duration_s).sum();
        let failures = runs.iter().filter(|r| !r.outcome.succeeded()).count();
        let mut finished: Vec<f64> = runs
            .iter()
            .filter(|r| r.outcome.succeeded())
            .map(|r| r.duration_s)
            .collect();
        let p = parallelism.limit().unwrap_or(runs.len()).max(1) as u64;
        let prediction = median(&mut finished).and_then(|per_run_s| {
            let ideal = predict_makespan(runs.len() as u64, per_run_s, p, 1.0, 1.0).ok()?;
            Some(Prediction {
                per_run_s,
                ideal_makespan_s: ideal,
                fitted_efficiency: if makespan_s > 0.0 { (ideal / makespan_s).min(1.0) } else { 1.0 },
            })
        });
        Self {
            system,
            backend,
            parallelism,
            runs,
            makespan_s,
            total_cpu_time_s,
            failures,
            max_active,
            prediction,
        }
    }

    /// Table with the columns "Compute Environment | Execution Time".
    pub fn summary_table(&self) -> String {
        let env = format!(
            "{} (parallelism {})",
            self.backend.as_ref().map_or("default backend", |b| b.as_str()),
            self.parallelism
        );
        let rows = [
            (format!("{env}, measured"), Some(self.makespan_s)),
            (
                format!("{env}, ideal model"),
                self.prediction.as_ref().map(|p| p.ideal_makespan_s),
            ),
        ];
        let mut out = String::new();
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(19);
        let _ = writeln!(out, "| {:width$} | Execution Time |", "Compute Environment");
        let _ = writeln!(out, "|{}|----------------|", "-".repeat(width + 2));
        for (name, secs) in rows {
            let t = secs.map_or_else(|| "n/a".to_string(), human_duration);
            let _ = writeln!(out, "| {name:width$} | {t:14} |");
        }
        let _ = writeln!(
            out,
            "{} runs, {} failed, total run time {}, peak {} active",
            self.runs.len(),
            self.failures,
            human_duration(self.total_cpu_time_s),
            self.max_active
        );
        if let Some(p) = &self.prediction {
            let _ = writeln!(
                out,
                "median run {}, fitted efficiency {:.2}",
                human_duration(p.per_run_s),
                p.fitted_efficiency
            );
        }
        out
    }
}

pub fn human_duration(secs: f64) -> String {
    if secs >= 3600.0 {
        format!("{:.1} h", secs / 3600.0)
    } else if secs >= 60.0 {
        format!("{:.1} min", secs / 60.0)
    } else if secs >= 1.0 {
        format!("{secs:.2} s")
    } else {
        format!("{:.1} ms", secs * 1000.0)
    }
}
