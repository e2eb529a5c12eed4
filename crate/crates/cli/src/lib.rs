//! Subcommand implementations behind the `expmem` binary.

pub mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use expmem_core::agent::prompt::{self, PromptTemplates};
use expmem_core::agent::{AgentGateway, MockAgent, MockAgentScript, RemoteAgent};
use expmem_core::checksum::sha256_hex;
use expmem_core::construction::{self, ConstructionConfig};
use expmem_core::corpus::{load_corpus, write_corpus};
use expmem_core::evaluation::{
    compute_metrics, default_grid, run_ablation, run_eval, AblationGrid, EvalConfig,
    MemoryAccess, RunLog, RunSink,
};
use expmem_core::retrieval::embedding::{HttpEmbedder, MemoEmbedder};
use expmem_core::{
    normalize, CaseRecord, EmbeddingProvider, ExperienceNote, MemoryStore, MockEmbedder, Taxonomy,
};
use serde::Serialize;
use serde_json::{json, Value};

use config::{AgentSettings, EmbedderSettings, LoadedConfig, Overrides};

/// How a command finished.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// Completed, but some cases failed and were logged as such.
    Partial,
}

impl Outcome {
    pub fn exit_code(self) -> u8 {
        match self {
            Outcome::Success => 0,
            Outcome::Partial => 2,
        }
    }

    fn from_failures(failures: usize) -> Self {
        if failures > 0 {
            Outcome::Partial
        } else {
            Outcome::Success
        }
    }
}

/// Everything a run command needs, built from the configuration.
struct Runtime {
    loaded: LoadedConfig,
    taxonomy: Taxonomy,
    agent: Box<dyn AgentGateway>,
    provider: MemoEmbedder<Box<dyn EmbeddingProvider>>,
    /// Checksums of the input files, keyed by role.
    inputs: BTreeMap<String, String>,
}

fn file_checksum(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

fn read_cases(path: &Path, role: &str) -> Result<Vec<CaseRecord>> {
    if !path.exists() {
        bail!("{role} not found: {}", path.display());
    }
    load_corpus(path).with_context(|| format!("cannot load {role} {}", path.display()))
}

impl Runtime {
    fn new(loaded: LoadedConfig) -> Result<Self> {
        let cfg = &loaded.config;
        let mut inputs = BTreeMap::new();
        let taxonomy = match &cfg.paths.taxonomy {
            Some(p) => {
                let p = loaded.resolve(p);
                Taxonomy::load(&p).with_context(|| format!("cannot load taxonomy {}", p.display()))?
            }
            None => Taxonomy::default_taxonomy(),
        };
        inputs.insert("taxonomy".into(), taxonomy.checksum());

        let agent: Box<dyn AgentGateway> = match &cfg.agent {
            None => bail!("no agent configured: add an [agent] section or pass --mock-agent"),
            Some(AgentSettings::Mock { script }) => {
                let path = loaded.resolve(script);
                inputs.insert("mock_script".into(), file_checksum(&path)?);
                let script = MockAgentScript::load(&path).map_err(|e| anyhow!(e))?;
                Box::new(MockAgent::new(script).map_err(|e| anyhow!(e))?)
            }
            Some(AgentSettings::Remote(remote)) => {
                if remote.endpoint.url.is_empty() {
                    bail!("remote agent needs a url");
                }
                let prompts = match &cfg.paths.prompts {
                    Some(dir) => PromptTemplates::load_dir(&loaded.resolve(dir))
                        .context("cannot read prompt templates")?,
                    None => PromptTemplates::default(),
                };
                Box::new(RemoteAgent::new(remote.clone(), prompts))
            }
        };

        let inner: Box<dyn EmbeddingProvider> = match &cfg.embedder {
            EmbedderSettings::Mock { dimension, seed } => {
                Box::new(MockEmbedder::new(*dimension, *seed))
            }
            EmbedderSettings::Remote {
                dimension,
                endpoint,
            } => {
                if endpoint.url.is_empty() {
                    bail!("remote embedder needs a url");
                }
                Box::new(HttpEmbedder::new(endpoint.clone(), *dimension))
            }
        };
        Ok(Self {
            loaded,
            taxonomy,
            agent,
            provider: MemoEmbedder::new(inner),
            inputs,
        })
    }

    fn cases(&mut self, role: &str) -> Result<Vec<CaseRecord>> {
        let cfg = &self.loaded.config;
        let value = if role == "corpus" {
            &cfg.paths.corpus
        } else {
            &cfg.paths.testset
        };
        let path = self.loaded.path(role, value)?;
        let cases = read_cases(&path, role)?;
        self.inputs.insert(role.into(), file_checksum(&path)?);
        Ok(cases)
    }

    fn metadata(&self) -> Value {
        json!({
            "config": self.loaded.config.echo(),
            "inputs": self.inputs,
            "agent": self.agent.identity(),
            "embedder": self.provider.describe(),
        })
    }

    fn construction_config(&self) -> ConstructionConfig {
        let c = &self.loaded.config;
        ConstructionConfig {
            rounds: c.rounds,
            retrieval: c.retrieval.clone(),
            snapshot: c.snapshot,
            candidates: c.candidates,
            grading: c.grading,
            workers: c.workers,
        }
    }

    fn eval_config(&self) -> EvalConfig {
        let c = &self.loaded.config;
        EvalConfig {
            retrieval: c.retrieval.clone(),
            candidates: c.candidates,
            grading: c.grading,
            trials: c.trials,
            workers: c.workers,
        }
    }

    fn store_path(&self) -> Result<PathBuf> {
        self.loaded.path("store", &self.loaded.config.paths.store)
    }

    fn logs_dir(&self) -> Result<PathBuf> {
        let dir = self.loaded.logs_dir();
        fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
        Ok(dir)
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
    }
    Ok(())
}

/// Writes `{metadata, <key>: body, checksum}` where the checksum covers the
/// serialized body.
fn write_document<T: Serialize>(path: &Path, metadata: &Value, key: &str, body: &T) -> Result<()> {
    let body = serde_json::to_value(body)?;
    let checksum = sha256_hex(serde_json::to_string(&body)?.as_bytes());
    let mut doc = serde_json::Map::new();
    doc.insert("metadata".into(), metadata.clone());
    doc.insert(key.into(), body);
    doc.insert("checksum".into(), Value::String(checksum));
    let mut text = serde_json::to_string_pretty(&Value::Object(doc))?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let footer = format!("checksum: {}\n", sha256_hex(text.as_bytes()));
    fs::write(path, format!("{text}{footer}")).with_context(|| format!("cannot write {}", path.display()))
}

pub fn cmd_build(config_path: &Path, overrides: &Overrides) -> Result<Outcome> {
    let mut rt = Runtime::new(config::load(config_path, overrides)?)?;
    let corpus = rt.cases("corpus")?;
    let store_path = rt.store_path()?;
    let log_path = rt.logs_dir()?.join("construction.jsonl");
    let cfg = rt.construction_config();
    let (store, log) = construction::build(rt.taxonomy.clone(), &corpus, rt.agent.as_ref(), &rt.provider, &cfg)?;
    ensure_parent(&store_path)?;
    construction::save_build(&store, &log, &store_path, &log_path, &rt.metadata())?;

    let counts: Vec<String> = log
        .summary()
        .iter()
        .map(|(action, n)| format!("{}={n}", serde_json::to_value(action).unwrap().as_str().unwrap_or("?")))
        .collect();
    println!(
        "built {} notes from {} cases ({}); store: {}",
        store.len(),
        corpus.len(),
        counts.join(", "),
        store_path.display()
    );
    Ok(Outcome::from_failures(log.failures()))
}

/// Rejects test sets that overlap the construction corpus by id or, when
/// every case carries a year, by publication time.
fn check_split(corpus: &[CaseRecord], testset: &[CaseRecord]) -> Result<()> {
    let ids: std::collections::HashSet<&str> = corpus.iter().map(|c| c.id.as_str()).collect();
    if let Some(dup) = testset.iter().find(|c| ids.contains(c.id.as_str())) {
        bail!("test case '{}' also appears in the construction corpus", dup.id);
    }
    let years = |cs: &[CaseRecord]| cs.iter().map(|c| c.published_year).collect::<Option<Vec<i32>>>();
    if let (Some(cy), Some(ty)) = (years(corpus), years(testset)) {
        if let (Some(latest), Some(earliest)) = (cy.iter().max(), ty.iter().min()) {
            if latest >= earliest {
                bail!(
                    "temporal split violated: construction corpus reaches {latest} but the test set starts at {earliest}"
                );
            }
        }
    }
    Ok(())
}

fn failures(logs: &[RunLog]) -> usize {
    logs.iter().map(RunLog::failures).sum()
}

pub fn cmd_eval(config_path: &Path, overrides: &Overrides, baseline_only: bool) -> Result<Outcome> {
    let mut rt = Runtime::new(config::load(config_path, overrides)?)?;
    let testset = rt.cases("testset")?;
    if let Some(p) = rt.loaded.config.paths.corpus.as_deref() {
        if rt.loaded.resolve(p).exists() {
            let corpus = rt.cases("corpus")?;
            check_split(&corpus, &testset)?;
        }
    }
    let store_path = rt.store_path();
    let store = if baseline_only {
        None
    } else {
        let path = store_path?;
        if !path.exists() {
            bail!("store not found: {} (run `expmem build` first)", path.display());
        }
        let store = MemoryStore::load(&path, rt.taxonomy.clone())
            .with_context(|| format!("cannot load store {}", path.display()))?;
        Some((store, file_checksum(&path)?))
    };

    let logs_dir = rt.logs_dir()?;
    let config = rt.eval_config();
    let base_meta = rt.metadata();
    let sink = RunSink {
        dir: Some(logs_dir.clone()),
        metadata: base_meta.clone(),
    };
    let baseline = run_eval(&testset, rt.agent.as_ref(), None, &config, &sink)?;
    let Some((store, store_sum)) = store else {
        let correct: usize = baseline.iter().map(RunLog::correct).sum();
        println!(
            "baseline: {correct}/{} correct over {} trial(s); logs in {}",
            testset.len() * baseline.len(),
            baseline.len(),
            logs_dir.display()
        );
        return Ok(Outcome::from_failures(failures(&baseline)));
    };

    rt.inputs.insert("store".into(), store_sum);
    let exp_meta = rt.metadata();
    let sink = RunSink {
        dir: Some(logs_dir.clone()),
        metadata: exp_meta.clone(),
    };
    let memory = MemoryAccess {
        store: &store,
        provider: &rt.provider,
    };
    let exp = run_eval(&testset, rt.agent.as_ref(), Some(memory), &config, &sink)?;
    let report = compute_metrics(&baseline, &exp)?;
    write_document(&logs_dir.join("report.json"), &exp_meta, "report", &report)?;
    let table = report.to_table("w/ memory");
    write_text(&logs_dir.join("report.txt"), &table)?;
    print!("{table}");
    Ok(Outcome::from_failures(failures(&baseline) + failures(&exp)))
}

pub fn load_grid(path: Option<&Path>) -> Result<AblationGrid> {
    let Some(path) = path else {
        return Ok(default_grid());
    };
    let text = fs::read_to_string(path)
        .with_context(|| format!("grid file not found: {}", path.display()))?;
    let grid: AblationGrid =
        toml::from_str(&text).with_context(|| format!("invalid grid file {}", path.display()))?;
    if grid.rows.is_empty() {
        bail!("grid file {} has no rows", path.display());
    }
    Ok(grid)
}

pub fn cmd_ablate(config_path: &Path, overrides: &Overrides, grid: Option<&Path>) -> Result<Outcome> {
    let grid = load_grid(grid)?;
    let mut rt = Runtime::new(config::load(config_path, overrides)?)?;
    let corpus = rt.cases("corpus")?;
    let testset = rt.cases("testset")?;
    check_split(&corpus, &testset)?;
    let table = run_ablation(
        &testset,
        &corpus,
        &rt.taxonomy,
        rt.agent.as_ref(),
        &rt.provider,
        &grid,
        &rt.construction_config(),
        &rt.eval_config(),
    )?;
    let dir = rt.logs_dir()?;
    let mut meta = rt.metadata();
    meta["grid"] = serde_json::to_value(&grid)?;
    write_document(&dir.join("ablation.json"), &meta, "ablation", &table)?;
    let text = table.to_table();
    write_text(&dir.join("ablation.txt"), &text)?;
    print!("{text}");
    Ok(Outcome::Success)
}

/// Store filters for `inspect`; all comparisons use normalized text.
#[derive(Debug, Clone, Default)]
pub struct NoteFilter {
    pub department: Option<String>,
    pub organ: Option<String>,
    pub label: Option<String>,
}

impl NoteFilter {
    pub fn matches(&self, note: &ExperienceNote) -> bool {
        let eq = |want: &Option<String>, have: &str| {
            want.as_deref().is_none_or(|w| normalize(w) == normalize(have))
        };
        eq(&self.department, &note.department)
            && eq(&self.organ, &note.organ_region)
            && self.label.as_deref().is_none_or(|l| {
                note.differentials
                    .labels()
                    .iter()
                    .any(|x| x.normalized() == normalize(l))
            })
    }
}

pub fn render_for_inspection(note: &ExperienceNote) -> String {
    let mut out = prompt::render_note(note);
    out.push_str("Provenance:\n");
    for p in &note.provenance {
        let phase = serde_json::to_value(p.phase).expect("phase serializes");
        out.push_str(&format!("- {} ({})\n", p.case_id, phase.as_str().unwrap_or("?")));
    }
    out
}

pub fn cmd_inspect(
    store_path: &Path,
    taxonomy_path: Option<&Path>,
    filter: &NoteFilter,
) -> Result<Outcome> {
    let taxonomy = match taxonomy_path {
        Some(p) => Taxonomy::load(p).with_context(|| format!("cannot load taxonomy {}", p.display()))?,
        None => Taxonomy::default_taxonomy(),
    };
    if !store_path.exists() {
        bail!("store not found: {}", store_path.display());
    }
    let store = MemoryStore::load(store_path, taxonomy)
        .with_context(|| format!("cannot load store {}", store_path.display()))?;
    let notes: Vec<&ExperienceNote> = store.notes().into_iter().filter(|n| filter.matches(n)).collect();
    for note in &notes {
        println!("{}", render_for_inspection(note));
    }
    println!("{} note{}", notes.len(), if notes.len() == 1 { "" } else { "s" });
    Ok(Outcome::Success)
}

/// Splits `corpus` by publication year: `year < boundary` goes to
/// construction, the rest to test. Returns (construction, test) counts.
pub fn split_corpus(cases: Vec<CaseRecord>, boundary: i32) -> Result<(Vec<CaseRecord>, Vec<CaseRecord>)> {
    let mut construction = Vec::new();
    let mut test = Vec::new();
    for case in cases {
        match case.published_year {
            None => bail!("case '{}' has no published_year", case.id),
            Some(y) if y < boundary => construction.push(case),
            Some(_) => test.push(case),
        }
    }
    Ok((construction, test))
}

pub fn cmd_split(corpus: &Path, boundary: i32, construction_out: &Path, test_out: &Path) -> Result<Outcome> {
    let cases = read_cases(corpus, "corpus")?;
    let total = cases.len();
    let (construction, test) = split_corpus(cases, boundary)?;
    if test.is_empty() {
        tracing::warn!(boundary, "no case is published in or after the boundary year; test set is empty");
        eprintln!("warning: test set is empty (no case published in {boundary} or later)");
    }
    for (path, cases) in [(construction_out, &construction), (test_out, &test)] {
        ensure_parent(path)?;
        write_corpus(path, cases).with_context(|| format!("cannot write {}", path.display()))?;
    }
    println!(
        "split {total} cases at {boundary}: {} construction, {} test",
        construction.len(),
        test.len()
    );
    Ok(Outcome::Success)
}
