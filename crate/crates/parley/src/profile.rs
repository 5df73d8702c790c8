//! Task profiles: a scenario plus two agent personas with private goals.

use serde::{Deserialize, Serialize};
use std::io::BufRead;
use std::path::Path;
use thiserror::Error;

/// One agent's persona. The goal is private: it is rendered only into its
/// own agent's prompts, never the partner's.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub name: String,
    pub background: String,
    pub personality: String,
    pub secrets: String,
    pub goal: String,
}

impl AgentProfile {
    /// First whitespace token of the name, used for the secrets label.
    pub fn first_name(&self) -> &str {
        self.name.split_whitespace().next().unwrap_or(&self.name)
    }
}

/// A social task: scenario text and exactly two agents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskProfile {
    pub task_id: String,
    pub scenario: String,
    pub agents: [AgentProfile; 2],
    #[serde(default)]
    pub hard_flag: bool,
}

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("invalid profile {task_id:?}: {reason}")]
    InvalidProfile { task_id: String, reason: String },
    #[error("cannot read tasks file: {0}")]
    Io(#[from] std::io::Error),
    #[error("tasks file line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
}

impl TaskProfile {
    /// Both goals non-empty, names non-empty and distinct.
    pub fn validate(&self) -> Result<(), ProfileError> {
        let invalid = |reason: &str| ProfileError::InvalidProfile {
            task_id: self.task_id.clone(),
            reason: reason.to_string(),
        };
        for agent in &self.agents {
            if agent.name.trim().is_empty() {
                return Err(invalid("agent name is empty"));
            }
            if agent.goal.trim().is_empty() {
                return Err(invalid("agent goal is empty"));
            }
        }
        if self.agents[0].name == self.agents[1].name {
            return Err(invalid("agent names are not distinct"));
        }
        Ok(())
    }

    pub fn agent(&self, index: usize) -> &AgentProfile {
        &self.agents[index]
    }

    pub fn partner(&self, index: usize) -> &AgentProfile {
        &self.agents[1 - index]
    }
}

/// Loads task profiles from a JSON Lines file, one task per line.
/// Blank lines are skipped; every parsed task is validated.
pub fn load_tasks(path: &Path) -> Result<Vec<TaskProfile>, ProfileError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut tasks = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let task: TaskProfile = serde_json::from_str(&line)
            .map_err(|source| ProfileError::Json { line: idx + 1, source })?;
        task.validate()?;
        tasks.push(task);
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn sample() -> TaskProfile {
        TaskProfile {
            task_id: "t0".into(),
            scenario: "Two friends at a charity event.".into(),
            agents: [
                AgentProfile {
                    name: "Hendrick Heinz".into(),
                    background: "chef".into(),
                    personality: "impulsive".into(),
                    secrets: "faked credentials".into(),
                    goal: "convince".into(),
                },
                AgentProfile {
                    name: "Ethan Smith".into(),
                    background: "developer".into(),
                    personality: "reserved".into(),
                    secrets: "donates secretly".into(),
                    goal: "stay stable".into(),
                },
            ],
            hard_flag: false,
        }
    }

    #[test]
    fn valid_profile_passes() {
        assert!(sample().validate().is_ok());
    }

    #[test]
    fn empty_goal_rejected() {
        let mut task = sample();
        task.agents[1].goal.clear();
        assert!(task.validate().is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut task = sample();
        task.agents[1].name = task.agents[0].name.clone();
        assert!(task.validate().is_err());
    }

    #[test]
    fn first_name_is_first_token() {
        assert_eq!(sample().agents[0].first_name(), "Hendrick");
    }

    #[test]
    fn loads_jsonl_and_skips_blank_lines() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "{}", serde_json::to_string(&sample()).unwrap()).unwrap();
        writeln!(file).unwrap();
        writeln!(file, "{}", serde_json::to_string(&sample()).unwrap()).unwrap();
        let tasks = load_tasks(file.path()).unwrap();
        assert_eq!(tasks.len(), 2);
        assert_eq!(tasks[0].agents[1].name, "Ethan Smith");
    }
}
