use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub core_version: &'static str,
    /// RFC 3339, UTC. The only field that differs between identical runs.
    pub timestamp: String,
    pub command: String,
    pub args: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<InputFile>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub settings: serde_json::Map<String, serde_json::Value>,
}

impl Provenance {
    pub fn new(command: &str) -> Self {
        Provenance {
            tool: "elanova",
            version: env!("CARGO_PKG_VERSION"),
            core_version: elanova::VERSION,
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            input: None,
            seed: None,
            settings: serde_json::Map::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl Serialize) {
        self.settings.insert(
            key.to_string(),
            serde_json::to_value(value).unwrap_or(serde_json::Value::Null),
        );
    }
}

/// Reads the whole input once, so the hash covers exactly the parsed bytes.
pub fn read_input(path: &Path) -> Result<(Vec<u8>, InputFile)> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .with_context(|| format!("reading {}", path.display()))?;
    let digest = Sha256::digest(&buf);
    let sha256 = digest.iter().map(|b| format!("{b:02x}")).collect();
    let info = InputFile {
        path: path.display().to_string(),
        sha256,
        bytes: buf.len(),
    };
    Ok((buf, info))
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    schema_version: u32,
    provenance: &'a Provenance,
    #[serde(flatten)]
    body: &'a T,
}

/// Pretty JSON with the provenance block, to `out` or standard output.
pub fn write_json<T: Serialize>(out: Option<&Path>, prov: &Provenance, body: &T) -> Result<()> {
    let env = Envelope {
        schema_version: SCHEMA_VERSION,
        provenance: prov,
        body,
    };
    let mut text = serde_json::to_string_pretty(&env)?;
    text.push('\n');
    write_text(out, &text)
}

pub fn write_text(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            Ok(stdout.flush()?)
        }
    }
}
