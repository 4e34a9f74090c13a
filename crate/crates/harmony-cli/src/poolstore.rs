//! Seed-pool store: a line-delimited JSON file mapping each prompt key to
//! its searched candidate list. Field order per line: `prompt`,
//! `candidates` (each `seed`, `accuracy`), `warnings`. Lines are written in
//! prompt order so regeneration is deterministic.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use anyhow::{Context, Result};
use harmony_core::pns::{SeedCandidate, SeedPool};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CandidateRecord {
    seed: u64,
    accuracy: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PoolRecord {
    prompt: String,
    candidates: Vec<CandidateRecord>,
    warnings: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct PoolStore {
    pools: BTreeMap<String, SeedPool>,
}

impl PoolStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, prompt: &str) -> Option<&SeedPool> {
        self.pools.get(prompt)
    }

    pub fn insert(&mut self, pool: SeedPool) {
        self.pools.insert(pool.prompt_key.clone(), pool);
    }

    pub fn len(&self) -> usize {
        self.pools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pools.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::new());
        }
        let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let mut store = Self::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: PoolRecord = serde_json::from_str(&line)
                .with_context(|| format!("pool store line {}", i + 1))?;
            store.insert(SeedPool {
                prompt_key: rec.prompt,
                candidates: rec
                    .candidates
                    .iter()
                    .map(|c| SeedCandidate {
                        seed: c.seed,
                        accuracy: c.accuracy,
                        alignment: None,
                    })
                    .collect(),
                warnings: rec.warnings,
            });
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut f =
            fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        for pool in self.pools.values() {
            let rec = PoolRecord {
                prompt: pool.prompt_key.clone(),
                candidates: pool
                    .candidates
                    .iter()
                    .map(|c| CandidateRecord {
                        seed: c.seed,
                        accuracy: c.accuracy,
                    })
                    .collect(),
                warnings: pool.warnings.clone(),
            };
            writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        }
        Ok(())
    }
}
