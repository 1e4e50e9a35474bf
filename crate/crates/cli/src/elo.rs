//! `ideaforest elo`: one Bradley-Terry fit over every head-to-head found
//! in one or more log directories.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ideaforest_core::metrics::{head_to_head_matches, EloError, EloTable};

use crate::logs::LogSet;
use crate::{write_atomic, CliError};

pub const ELO_HEADER: &str = "agent,rating,n_matches";

pub fn cmd_elo(log_dirs: &[PathBuf], out: &Path) -> Result<EloTable, CliError> {
    let logs = LogSet::load(log_dirs)?;
    let attempts = logs.attempts_by_agent()?;
    let agents: Vec<String> = attempts.keys().cloned().collect();
    if agents.len() < 2 {
        return Err(CliError::EloDisconnected(format!(
            "{} agent(s) found, ratings need head-to-heads between at least two",
            agents.len()
        )));
    }
    let hib = logs.higher_is_better();
    let matches = head_to_head_matches(&attempts, |t| hib.get(t).copied().unwrap_or(true));
    let table = EloTable::fit(&matches).map_err(|e| match e {
        EloError::DisconnectedComparisonGraph(_) => CliError::EloDisconnected(e.to_string()),
        other => CliError::Other(other.to_string()),
    })?;
    let mut csv = format!("{ELO_HEADER}\n");
    for (agent, r) in &table.ratings {
        writeln!(csv, "{agent},{},{}", r.rating, r.n_matches).unwrap();
    }
    write_atomic(&out.join("elo.csv"), csv.as_bytes())?;
    Ok(table)
}
