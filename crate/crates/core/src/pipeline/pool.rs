use std::collections::{HashSet, VecDeque};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::task::TaskDomain;
use crate::error::{Error, Result};
use crate::policy::Sequence;
use crate::rng::StreamKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Seed,
    SelfInstruct,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub instruction: Sequence,
    pub provenance: Provenance,
}

/// Deduplicated instruction pool.
///
/// Seed entries persist forever. Self-instruct entries are evicted oldest
/// first once the pool reaches `cap`.
#[derive(Debug, Clone, PartialEq)]
pub struct InstructionPool {
    seeds: Vec<Sequence>,
    generated: VecDeque<Sequence>,
    index: HashSet<Sequence>,
    cap: usize,
}

impl InstructionPool {
    pub fn new(seeds: Vec<Sequence>, cap: usize) -> Result<Self> {
        let mut index = HashSet::new();
        for s in &seeds {
            if !index.insert(s.clone()) {
                return Err(Error::InvalidInput("duplicate seed instruction".into()));
            }
        }
        if cap < seeds.len() {
            return Err(Error::InvalidInput(format!(
                "pool cap {cap} is smaller than the {} seed instructions",
                seeds.len()
            )));
        }
        Ok(Self {
            seeds,
            generated: VecDeque::new(),
            index,
            cap,
        })
    }

    /// `n` distinct random tasks drawn from `key`'s stream.
    pub fn seeded(domain: &TaskDomain, n: usize, cap: usize, key: StreamKey) -> Result<Self> {
        let mut rng = key.rng();
        let mut seen = HashSet::new();
        let mut seeds = Vec::with_capacity(n);
        let mut tries = 0;
        while seeds.len() < n {
            tries += 1;
            if tries > 1000 * n.max(1) {
                return Err(Error::InvalidInput(format!(
                    "task domain too small for {n} distinct seed instructions"
                )));
            }
            let instr = domain.instruction(&domain.random_task(&mut rng));
            if seen.insert(instr.clone()) {
                seeds.push(instr);
            }
        }
        Self::new(seeds, cap)
    }

    pub fn len(&self) -> usize {
        self.seeds.len() + self.generated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_seeds(&self) -> usize {
        self.seeds.len()
    }

    pub fn contains(&self, instruction: &Sequence) -> bool {
        self.index.contains(instruction)
    }

    /// Entries in pool order: seeds first, then generated oldest to newest.
    pub fn entries(&self) -> impl Iterator<Item = PoolEntry> + '_ {
        let seeds = self.seeds.iter().map(|s| PoolEntry {
            instruction: s.clone(),
            provenance: Provenance::Seed,
        });
        let gen = self.generated.iter().map(|s| PoolEntry {
            instruction: s.clone(),
            provenance: Provenance::SelfInstruct,
        });
        seeds.chain(gen)
    }

    /// Instructions eligible as self-instruct exemplars.
    pub fn exemplars(&self, seeds_only: bool) -> Vec<&Sequence> {
        if seeds_only {
            self.seeds.iter().collect()
        } else {
            self.seeds.iter().chain(self.generated.iter()).collect()
        }
    }

    /// Appends a validated self-instruct instruction. Returns false for duplicates.
    pub fn push_generated(&mut self, instruction: Sequence) -> bool {
        if self.index.contains(&instruction) {
            return false;
        }
        if self.len() >= self.cap {
            match self.generated.pop_front() {
                Some(old) => {
                    self.index.remove(&old);
                }
                None => return false,
            }
        }
        self.index.insert(instruction.clone());
        self.generated.push_back(instruction);
        true
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(
            out,
            "{}",
            serde_json::to_string(&PoolHeader { cap: self.cap })?
        )?;
        for entry in self.entries() {
            writeln!(out, "{}", serde_json::to_string(&entry)?)?;
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path)?;
        let malformed = |line: usize, msg: String| Error::Malformed {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        let header: PoolHeader = match lines.next() {
            Some((_, l)) => serde_json::from_str(l).map_err(|e| malformed(1, e.to_string()))?,
            None => return Err(malformed(1, "empty pool file".into())),
        };
        let mut seeds = Vec::new();
        let mut generated = Vec::new();
        for (i, line) in lines {
            let entry: PoolEntry =
                serde_json::from_str(line).map_err(|e| malformed(i + 1, e.to_string()))?;
            match entry.provenance {
                Provenance::Seed => seeds.push(entry.instruction),
                Provenance::SelfInstruct => generated.push(entry.instruction),
            }
        }
        let mut pool = Self::new(seeds, header.cap)?;
        for g in generated {
            pool.push_generated(g);
        }
        Ok(pool)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoolHeader {
    cap: usize,
}
