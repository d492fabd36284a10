//! Output layout, stage dependencies and content-hash caching.
//!
//! Every stage writes into its own directory under the output root and
//! finishes by writing `manifest.json`: the stage's input hash (its config
//! sections, the master seed and the output digests of the stages it reads),
//! plus a sha256 per output file. A stage whose manifest matches the current
//! inputs and whose files still hash the same is skipped.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{hash_json, PipelineConfig};
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    WorldGen,
    Train,
    Eval,
    Attribute,
    PatchCurve,
    Decode,
    Reconstruct,
    Discriminate,
    Edit,
    Profile,
    Stats,
    Report,
}

impl Stage {
    /// Pipeline order.
    pub const ALL: [Stage; 12] = [
        Stage::WorldGen,
        Stage::Train,
        Stage::Eval,
        Stage::Attribute,
        Stage::PatchCurve,
        Stage::Decode,
        Stage::Reconstruct,
        Stage::Discriminate,
        Stage::Edit,
        Stage::Profile,
        Stage::Stats,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::WorldGen => "world-gen",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Attribute => "attribute",
            Stage::PatchCurve => "patch-curve",
            Stage::Decode => "decode",
            Stage::Reconstruct => "reconstruct",
            Stage::Discriminate => "discriminate",
            Stage::Edit => "edit",
            Stage::Profile => "profile",
            Stage::Stats => "stats",
            Stage::Report => "report",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }

    pub fn dir(self) -> &'static str {
        match self {
            Stage::WorldGen => "world",
            Stage::PatchCurve => "patch",
            s => s.name(),
        }
    }

    /// The artifact named when a later stage finds this one missing.
    pub fn primary(self) -> &'static str {
        match self {
            Stage::WorldGen => "tokens.bin",
            Stage::Train => "checkpoint.bin",
            Stage::Eval => "eval.json",
            Stage::Attribute => "attributions.jsonl",
            Stage::PatchCurve => "patch_curves.json",
            Stage::Decode => "critical_features.jsonl",
            Stage::Reconstruct => "reconstructions.jsonl",
            Stage::Discriminate => "discriminability.jsonl",
            Stage::Edit => "edits.jsonl",
            Stage::Profile => "profile_edits.jsonl",
            Stage::Stats => "stats.json",
            Stage::Report => "report.json",
        }
    }

    /// Stages whose outputs this one reads.
    pub fn deps(self) -> &'static [Stage] {
        use Stage::*;
        match self {
            WorldGen => &[],
            Train => &[WorldGen],
            Eval => &[WorldGen, Train],
            Attribute => &[WorldGen, Train],
            PatchCurve => &[WorldGen, Train, Eval, Attribute],
            Decode => &[WorldGen, Eval, Attribute],
            Reconstruct => &[WorldGen, Train, Decode],
            Discriminate => &[WorldGen, Train, Decode],
            Edit => &[WorldGen, Train, Attribute, Decode],
            Profile => &[WorldGen, Train, Edit],
            Stats => &[WorldGen, Eval, PatchCurve, Reconstruct, Discriminate, Edit, Profile],
            Report => &[
                WorldGen,
                Eval,
                PatchCurve,
                Decode,
                Reconstruct,
                Discriminate,
                Edit,
                Profile,
                Stats,
            ],
        }
    }

    /// The config this stage's outputs depend on directly.
    fn config_slice(self, cfg: &PipelineConfig) -> Result<Value> {
        Ok(match self {
            Stage::WorldGen => json!({
                "world": v(&cfg.world)?,
                "splits": v(&cfg.data.splits)?,
                "inputs": input_file_digests(cfg)?,
            }),
            Stage::Train => json!({
                "model": v(&cfg.model)?,
                "train": v(&cfg.train)?,
                "shuffle_labels": cfg.data.shuffle_labels,
            }),
            Stage::Eval => json!({
                "min_noise_ceiling": cfg.attribution.min_noise_ceiling,
                "shuffle_labels": cfg.data.shuffle_labels,
            }),
            Stage::Attribute => json!({
                "steps": cfg.attribution.steps,
                "reduction": v(&cfg.attribution.reduction)?,
            }),
            Stage::PatchCurve => json!({
                "patch_ks": cfg.attribution.patch_ks,
                "shuffle_labels": cfg.data.shuffle_labels,
            }),
            Stage::Decode => json!({
                "k_top": cfg.attribution.k_top,
                "decode": v(&cfg.decode)?,
                "q_hi": cfg.counterfactual.q_hi,
                "q_lo": cfg.counterfactual.q_lo,
                "shuffle_labels": cfg.data.shuffle_labels,
            }),
            Stage::Reconstruct | Stage::Discriminate => json!({
                "counterfactual": v(&cfg.counterfactual)?,
            }),
            Stage::Edit => json!({ "guard": cfg.guard() }),
            Stage::Profile => json!({ "profile": v(&cfg.profile)? }),
            Stage::Stats => json!({ "stats": v(&cfg.stats)? }),
            Stage::Report => json!({}),
        })
    }
}

fn v<T: Serialize>(x: &T) -> Result<Value> {
    Ok(serde_json::to_value(x)?)
}

/// Ingested token and response files are hashed by content, so replacing
/// them invalidates the world stage.
fn input_file_digests(cfg: &PipelineConfig) -> Result<Value> {
    let mut out = serde_json::Map::new();
    for (key, p) in [("tokens", &cfg.data.tokens), ("responses", &cfg.data.responses)] {
        if let Some(p) = p {
            out.insert(key.into(), Value::String(sha256_file(p)?));
        }
    }
    Ok(Value::Object(out))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub input_hash: String,
    pub seed: u64,
    /// sha256 of every output file, by file name.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    /// Digest over the output hashes; what downstream stages key on.
    pub fn output_digest(&self) -> String {
        hash_json(&serde_json::to_value(&self.outputs).expect("map serializes"))
    }
}

/// Why a stage cannot be reused.
#[derive(Debug, Clone, PartialEq)]
pub enum Freshness {
    Fresh,
    Missing,
    Stale(String),
}

pub struct Workspace {
    pub root: PathBuf,
    pub config: PipelineConfig,
    pub config_hash: String,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>, config: PipelineConfig) -> Self {
        let config_hash = config.hash();
        Self {
            root: root.into(),
            config,
            config_hash,
        }
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.dir())
    }

    pub fn path(&self, stage: Stage, file: &str) -> PathBuf {
        self.stage_dir(stage).join(file)
    }

    fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.path(stage, "manifest.json")
    }

    pub fn manifest(&self, stage: Stage) -> Result<Option<Manifest>> {
        let p = self.manifest_path(stage);
        if !p.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    /// The input hash `stage` would have if it ran now. Dependencies must
    /// have manifests.
    pub fn input_hash(&self, stage: Stage) -> Result<String> {
        let mut deps = serde_json::Map::new();
        for &d in stage.deps() {
            let m = self.manifest(d)?.ok_or_else(|| self.dependency_error(stage, d))?;
            deps.insert(d.name().into(), Value::String(m.output_digest()));
        }
        Ok(hash_json(&json!({
            "stage": stage.name(),
            "seed": self.seed(),
            "config": stage.config_slice(&self.config)?,
            "deps": deps,
        })))
    }

    fn dependency_error(&self, stage: Stage, dep: Stage) -> CliError {
        CliError::Dependency {
            stage: stage.name(),
            needs: dep.name(),
            missing: self.path(dep, dep.primary()),
        }
    }

    /// Whether `stage`'s outputs on disk match the current config and
    /// inputs, checking its dependencies transitively.
    pub fn freshness(&self, stage: Stage) -> Result<Freshness> {
        let Some(m) = self.manifest(stage)? else {
            return Ok(Freshness::Missing);
        };
        for &d in stage.deps() {
            match self.freshness(d)? {
                Freshness::Fresh => {}
                Freshness::Missing => return Ok(Freshness::Stale(format!("`{}` has no outputs", d.name()))),
                Freshness::Stale(r) => return Ok(Freshness::Stale(format!("`{}` is stale ({r})", d.name()))),
            }
        }
        if m.input_hash != self.input_hash(stage)? {
            return Ok(Freshness::Stale("config, seed or inputs changed".into()));
        }
        for (file, digest) in &m.outputs {
            let p = self.path(stage, file);
            if !p.exists() {
                return Ok(Freshness::Stale(format!("{file} is missing")));
            }
            if &sha256_file(&p)? != digest {
                return Ok(Freshness::Stale(format!("{file} was modified")));
            }
        }
        Ok(Freshness::Fresh)
    }

    /// Every direct dependency must exist and be current.
    pub fn check_deps(&self, stage: Stage) -> Result<()> {
        for &d in stage.deps() {
            match self.freshness(d)? {
                Freshness::Fresh => {}
                Freshness::Missing => return Err(self.dependency_error(stage, d)),
                Freshness::Stale(reason) => {
                    return Err(CliError::Stale {
                        stage: stage.name(),
                        needs: d.name(),
                        reason,
                    })
                }
            }
        }
        Ok(())
    }

    /// Clears the stage's manifest and opens a writer for its outputs.
    pub fn begin(&self, stage: Stage) -> Result<StageWriter<'_>> {
        let dir = self.stage_dir(stage);
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let m = self.manifest_path(stage);
        if m.exists() {
            fs::remove_file(&m).map_err(|e| CliError::io(&m, e))?;
        }
        Ok(StageWriter {
            ws: self,
            stage,
            dir,
            files: Vec::new(),
        })
    }
}

/// Collects a stage's output files and seals them with a manifest.
pub struct StageWriter<'a> {
    ws: &'a Workspace,
    stage: Stage,
    dir: PathBuf,
    files: Vec<String>,
}

impl StageWriter<'_> {
    /// Path for a file the caller writes itself; it is hashed on `finish`.
    pub fn file(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        self.dir.join(name)
    }

    /// Pretty JSON object carrying `config_hash` and `seed` next to the
    /// value's own fields.
    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut v = serde_json::to_value(value)?;
        let annotated = match v.as_object_mut() {
            Some(obj) => {
                obj.insert("config_hash".into(), Value::String(self.ws.config_hash.clone()));
                obj.insert("seed".into(), json!(self.ws.seed()));
                v
            }
            None => json!({
                "config_hash": self.ws.config_hash,
                "seed": self.ws.seed(),
                "value": v,
            }),
        };
        let p = self.file(name);
        let mut text = serde_json::to_string_pretty(&annotated)?;
        text.push('\n');
        fs::write(&p, text).map_err(|e| CliError::io(&p, e))
    }

    pub fn jsonl<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let p = self.file(name);
        let f = File::create(&p).map_err(|e| CliError::io(&p, e))?;
        let mut w = BufWriter::new(f);
        for r in rows {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| CliError::io(&p, e))?;
        }
        w.flush().map_err(|e| CliError::io(&p, e))
    }

    pub fn csv<R: Serialize>(&mut self, name: &str, rows: &[R]) -> Result<()> {
        let p = self.file(name);
        let mut w = csv::Writer::from_path(&p)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| CliError::io(&p, e))
    }

    pub fn finish(self) -> Result<Manifest> {
        let mut outputs = BTreeMap::new();
        for f in &self.files {
            outputs.insert(f.clone(), sha256_file(&self.dir.join(f))?);
        }
        let manifest = Manifest {
            stage: self.stage.name().into(),
            config_hash: self.ws.config_hash.clone(),
            input_hash: self.ws.input_hash(self.stage)?,
            seed: self.ws.seed(),
            outputs,
        };
        let p = self.ws.manifest_path(self.stage);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(&p, text).map_err(|e| CliError::io(&p, e))?;
        Ok(manifest)
    }
}

pub fn read_json_value(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
