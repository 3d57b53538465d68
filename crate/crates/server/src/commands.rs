//! Remote command tracking and its audit log (`audit.jsonl`).

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ServerError;

pub const AUDIT_FILE: &str = "audit.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CommandStatus {
    Queued,
    Delivered,
    Acked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Gprs,
    Sms,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub id: u32,
    pub imei: String,
    pub text: String,
    pub status: CommandStatus,
    pub channel: Option<Channel>,
    pub reply: Option<String>,
    pub created_ms: u64,
    pub updated_ms: u64,
}

/// Command state plus the append-only audit trail of every transition.
#[derive(Debug, Default)]
pub(crate) struct CommandLog {
    file: Option<File>,
    pub commands: BTreeMap<u32, CommandRecord>,
}

impl CommandLog {
    /// Replays the audit log; the last line for an id is its current state.
    pub fn open(dir: &Path, writable: bool) -> Result<Self, ServerError> {
        let path = dir.join(AUDIT_FILE);
        let mut commands = BTreeMap::new();
        if path.exists() {
            for (n, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CommandRecord>(&line) {
                    Ok(c) => {
                        commands.insert(c.id, c);
                    }
                    // A torn last line from a crash mid-write.
                    Err(e) => log::warn!("{} line {}: {e}", path.display(), n + 1),
                }
            }
        }
        let file = if writable {
            let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
            // Terminate a torn line so the next entry starts on its own line.
            let len = f.metadata()?.len();
            if len > 0 {
                let mut last = [0u8; 1];
                let mut r = File::open(&path)?;
                r.seek(SeekFrom::Start(len - 1))?;
                r.read_exact(&mut last)?;
                if last[0] != b'\n' {
                    f.write_all(b"\n")?;
                }
            }
            Some(f)
        } else {
            None
        };
        Ok(CommandLog { file, commands })
    }

    pub fn next_id(&self) -> u32 {
        self.commands.keys().next_back().map_or(1, |k| k + 1)
    }

    pub fn record(&mut self, c: CommandRecord) -> Result<(), ServerError> {
        if let Some(f) = self.file.as_mut() {
            let mut line = serde_json::to_string(&c).expect("command serializes");
            line.push('\n');
            f.write_all(line.as_bytes())?;
        }
        self.commands.insert(c.id, c);
        Ok(())
    }
}
