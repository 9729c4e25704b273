//! End-of-shift action forms.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timefmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionType {
    CalledInStaff,
    SentStaffHome,
    NoAction,
}

impl ActionType {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "called-in-staff" => Ok(Self::CalledInStaff),
            "sent-staff-home" => Ok(Self::SentStaffHome),
            "no-action" => Ok(Self::NoAction),
            other => Err(Error::Validation(format!(
                "unknown action_type {other:?}; expected called-in-staff, sent-staff-home or no-action"
            ))),
        }
    }
}

/// Form as submitted, before validation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ShiftActionInput {
    pub shift_id: String,
    pub timestamp: String,
    pub action_type: String,
    #[serde(default)]
    pub free_text: Option<String>,
    /// Client-generated idempotency key.
    #[serde(default)]
    pub client_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftAction {
    pub seq: u64,
    pub shift_id: String,
    #[serde(with = "timefmt::minute")]
    pub timestamp: NaiveDateTime,
    pub action_type: ActionType,
    pub free_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionAck {
    pub action: ShiftAction,
    /// False when the submission repeated an earlier `client_id`.
    pub created: bool,
}

#[derive(Debug, Default)]
pub struct ActionLog {
    actions: Vec<ShiftAction>,
    by_client: HashMap<String, usize>,
    writer: Option<BufWriter<File>>,
}

impl ActionLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut log = Self::default();
        if path.exists() {
            for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let a: ShiftAction = serde_json::from_str(&line).map_err(|e| {
                    Error::Validation(format!("{} line {}: {e}", path.display(), n + 1))
                })?;
                log.push(a);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        log.writer = Some(BufWriter::new(file));
        Ok(log)
    }

    fn push(&mut self, a: ShiftAction) {
        if let Some(c) = &a.client_id {
            self.by_client.insert(c.clone(), self.actions.len());
        }
        self.actions.push(a);
    }

    pub fn record(&mut self, input: ShiftActionInput) -> Result<ActionAck> {
        let shift_id = input.shift_id.trim().to_string();
        if shift_id.is_empty() {
            return Err(Error::Validation("shift_id is required".into()));
        }
        let timestamp = timefmt::parse(&input.timestamp).ok_or_else(|| {
            Error::Validation(format!(
                "timestamp {:?} is not YYYY-MM-DDTHH:MM",
                input.timestamp
            ))
        })?;
        let action_type = ActionType::parse(input.action_type.trim())?;
        let client_id = input.client_id.filter(|c| !c.trim().is_empty());
        if let Some(&i) = client_id.as_ref().and_then(|c| self.by_client.get(c)) {
            return Ok(ActionAck {
                action: self.actions[i].clone(),
                created: false,
            });
        }
        let action = ShiftAction {
            seq: self.actions.len() as u64 + 1,
            shift_id,
            timestamp,
            action_type,
            free_text: input.free_text.unwrap_or_default(),
            client_id,
        };
        if let Some(w) = self.writer.as_mut() {
            serde_json::to_writer(&mut *w, &action)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        self.push(action.clone());
        Ok(ActionAck {
            action,
            created: true,
        })
    }

    /// Actions with timestamp in `[from, to)`, in submission order.
    pub fn query(&self, from: NaiveDateTime, to: NaiveDateTime) -> Vec<ShiftAction> {
        self.actions
            .iter()
            .filter(|a| a.timestamp >= from && a.timestamp < to)
            .cloned()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}
