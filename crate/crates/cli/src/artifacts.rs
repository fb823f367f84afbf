//! Run outputs: CSV tables, a JSON-lines mirror and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use dislocgas_core::report::Verdict;
use serde::Serialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

pub const MANIFEST_SCHEMA: u32 = 1;

/// One CSV table, also mirrored into `results.jsonl`.
pub struct Table {
    pub name: String,
    csv: Vec<u8>,
    records: Vec<Value>,
}

impl Table {
    pub fn new<T: Serialize>(name: &str, rows: &[T]) -> Result<Self, String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut records = Vec::with_capacity(rows.len());
        for r in rows {
            w.serialize(r).map_err(|e| format!("table {name}: {e}"))?;
            records.push(serde_json::to_value(r).map_err(|e| e.to_string())?);
        }
        let csv = w.into_inner().map_err(|e| e.to_string())?;
        Ok(Table { name: name.to_string(), csv, records })
    }
}

/// Everything a subcommand produces; the first table becomes `results.csv`.
pub struct Output {
    pub tables: Vec<Table>,
    pub summary: Value,
    pub verdict: Verdict,
}

impl Output {
    pub fn new(verdict: Verdict) -> Self {
        Output { tables: Vec::new(), summary: Value::Object(Map::new()), verdict }
    }

    pub fn table<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<(), String> {
        self.tables.push(Table::new(name, rows)?);
        Ok(())
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(Value::Null);
        self.summary.as_object_mut().expect("summary is an object").insert(key.to_string(), v);
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub struct ManifestInput<'a> {
    pub subcommand: &'a str,
    pub config_text: &'a str,
    pub config: &'a crate::config::ExperimentConfig,
    pub seed: u64,
    pub threads: usize,
    pub exit_code: i32,
    pub error: Option<&'a str>,
}

/// Write the tables, `results.jsonl` and `manifest.json`; returns the file names.
pub fn write(dir: &Path, out: Option<&Output>, m: &ManifestInput) -> Result<Vec<PathBuf>, String> {
    let io = |p: &Path, e: std::io::Error| format!("{}: {e}", p.display());
    let mut files = Vec::new();
    let mut hashes = Map::new();
    if let Some(out) = out {
        let mut jsonl = String::new();
        for (k, t) in out.tables.iter().enumerate() {
            let file = if k == 0 { "results.csv".to_string() } else { format!("{}.csv", t.name) };
            let path = dir.join(&file);
            fs::write(&path, &t.csv).map_err(|e| io(&path, e))?;
            hashes.insert(file.clone(), json!(sha256_hex(&t.csv)));
            files.push(path);
            for r in &t.records {
                let mut obj = Map::new();
                obj.insert("table".into(), json!(t.name));
                if let Value::Object(fields) = r {
                    obj.extend(fields.clone());
                }
                jsonl.push_str(&Value::Object(obj).to_string());
                jsonl.push('\n');
            }
        }
        let path = dir.join("results.jsonl");
        fs::write(&path, &jsonl).map_err(|e| io(&path, e))?;
        hashes.insert("results.jsonl".into(), json!(sha256_hex(jsonl.as_bytes())));
        files.push(path);
    }
    let manifest = json!({
        "schema_version": MANIFEST_SCHEMA,
        "tool": env!("CARGO_PKG_NAME"),
        "tool_version": env!("CARGO_PKG_VERSION"),
        "subcommand": m.subcommand,
        "seed": m.seed,
        "threads": m.threads,
        "config_sha256": sha256_hex(m.config_text.as_bytes()),
        "config_text": m.config_text,
        "config": m.config,
        "tables": out.map(|o| o.tables.iter().map(|t| t.name.clone()).collect::<Vec<_>>()).unwrap_or_default(),
        "table_sha256": hashes,
        "summary": out.map(|o| o.summary.clone()).unwrap_or(Value::Null),
        "verdict": out.map(|o| o.verdict.as_str()),
        "error": m.error,
        "exit_code": m.exit_code,
    });
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| e.to_string())?;
    fs::write(&path, text + "\n").map_err(|e| io(&path, e))?;
    files.push(path);
    Ok(files)
}
