//! Experiment orchestration: staged artifacts with manifests, evaluation
//! of planner configurations over seeds, the ablation grid, and the
//! dimensionality and pool analyses.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::apm::{epoch_csv, train_apm, Apm, ApmConfig, EncoderInput};
use crate::decomposer::{
    area_coverage, distinct, error_lower_bound, make_pool, memory_matrix, pool_error, reduce,
    IndexSolver, MultiScalePool, ALL_SELECTION_FAMILY, DEFAULT_FAMILY,
};
use crate::effectmem::{
    build_memory, effect_csv, train_extractor, EffectConfig, EffectExtractor, FeatureMemory,
};
use crate::error::{Error, Result};
use crate::explorer::{explore, ExplorationConfig, KnowledgeGraph};
use crate::io;
use crate::learncore;
use crate::planner::{
    run_episode, trace_text, Episode, EpisodeStatus, Models, PlanResult, PlannerConfig, Strand,
    Task,
};
use crate::taskgen::{sample_paths, split, text_hash, Dataset, DatasetSplit, TaskSample};
use crate::world::{GroundedAction, SceneGraph, World};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub per_length: usize,
    pub min_length: usize,
    pub max_length: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            per_length: 80,
            min_length: 1,
            max_length: 6,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecomposerConfig {
    pub rank: usize,
    pub centered: bool,
}

impl Default for DecomposerConfig {
    fn default() -> Self {
        DecomposerConfig {
            rank: 32,
            centered: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub dims: Vec<usize>,
    pub ks: Vec<usize>,
    pub partial: Vec<(usize, usize)>,
    pub all: Vec<(usize, usize)>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            dims: vec![4, 8, 16, 32, 64],
            ks: vec![1, 2, 5, 10, 15, 20, 30],
            partial: DEFAULT_FAMILY.to_vec(),
            all: ALL_SELECTION_FAMILY.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    /// `desk`, `full`, or a path to a world file.
    pub world: String,
    /// Model seeds; graph and dataset use their own fixed seeds.
    pub seeds: Vec<u64>,
    pub explore: ExplorationConfig,
    pub dataset: DatasetConfig,
    pub apm: ApmConfig,
    pub effect: EffectConfig,
    pub decomposer: DecomposerConfig,
    pub planner: PlannerConfig,
    pub analysis: AnalysisConfig,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            world: "desk".into(),
            seeds: vec![0, 1, 2],
            explore: ExplorationConfig::default(),
            dataset: DatasetConfig::default(),
            apm: ApmConfig {
                epochs: 40,
                lr: 0.01,
                ..ApmConfig::default()
            },
            effect: EffectConfig {
                epochs: 20,
                ..EffectConfig::default()
            },
            decomposer: DecomposerConfig::default(),
            planner: PlannerConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl HarnessConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::artifact(path, e.to_string()))?;
        io::in_file(path, HarnessConfig::from_toml(&text))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

pub fn load_world(spec: &str) -> Result<World> {
    match spec {
        "desk" => Ok(World::desk()),
        "full" => Ok(World::full()),
        path => {
            let p = Path::new(path);
            let text = fs::read_to_string(p).map_err(|e| Error::artifact(p, e.to_string()))?;
            io::in_file(p, World::parse(&text))
        }
    }
}

fn json_hash<T: Serialize>(v: &T) -> String {
    text_hash(&serde_json::to_string(v).expect("serializable"))[..16].to_string()
}

/// Artifact locations under one output directory.
#[derive(Clone, Debug)]
pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Paths { root: root.into() }
    }
    pub fn kg(&self) -> PathBuf {
        self.root.join("kg.txt")
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.txt")
    }
    pub fn split(&self) -> PathBuf {
        self.root.join("split.txt")
    }
    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed{seed}"))
    }
    pub fn apm(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("apm.wts")
    }
    pub fn apm_log(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("apm_log.csv")
    }
    pub fn effect(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("effect.wts")
    }
    pub fn effect_log(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("effect_log.csv")
    }
    pub fn memory(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("memory.txt")
    }
    pub fn traces(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("traces")
    }
    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub seed: Option<u64>,
    pub config_hash: String,
    pub wall_time_secs: f64,
    pub outputs: Vec<String>,
}

fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

pub fn write_manifest(output: &Path, m: &Manifest) -> Result<()> {
    io::write_artifact(
        &manifest_path(output),
        &serde_json::to_string_pretty(m).expect("manifest"),
    )
}

pub fn read_manifest(output: &Path) -> Option<Manifest> {
    let text = fs::read_to_string(manifest_path(output)).ok()?;
    serde_json::from_str(&text).ok()
}

/// Whether `output` exists and was produced under `hash`.
fn fresh(output: &Path, hash: &str) -> bool {
    output.exists() && read_manifest(output).is_some_and(|m| m.config_hash == hash)
}

fn finish(
    stage: &str,
    seed: Option<u64>,
    hash: &str,
    started: Instant,
    outputs: &[&Path],
) -> Result<()> {
    let m = Manifest {
        stage: stage.into(),
        seed,
        config_hash: hash.into(),
        wall_time_secs: started.elapsed().as_secs_f64(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    write_manifest(outputs[0], &m)
}

/// Upstream-aware hashes identifying each stage's inputs.
pub struct StageHashes {
    pub kg: String,
    pub dataset: String,
}

impl StageHashes {
    pub fn new(cfg: &HarnessConfig, world: &World) -> Self {
        let kg = json_hash(&(world.source_hash(), &cfg.explore));
        let dataset = json_hash(&(&kg, &cfg.dataset));
        StageHashes { kg, dataset }
    }
    pub fn apm(&self, cfg: &HarnessConfig, seed: u64) -> String {
        json_hash(&(&self.dataset, &cfg.apm, seed))
    }
    pub fn effect(&self, cfg: &HarnessConfig, seed: u64) -> String {
        json_hash(&(&self.dataset, &cfg.effect, seed))
    }
    pub fn memory(&self, cfg: &HarnessConfig, seed: u64) -> String {
        json_hash(&(self.effect(cfg, seed), "memory"))
    }
}

pub fn stage_explore(cfg: &HarnessConfig, world: &World, paths: &Paths) -> Result<KnowledgeGraph> {
    let t = Instant::now();
    let kg = explore(world, &cfg.explore);
    log::info!(
        "explored {} nodes, {} edges",
        kg.node_count(),
        kg.edges.len()
    );
    let out = paths.kg();
    kg.save(&out)?;
    finish(
        "explore",
        None,
        &StageHashes::new(cfg, world).kg,
        t,
        &[&out],
    )?;
    Ok(kg)
}

pub fn stage_dataset(
    cfg: &HarnessConfig,
    world: &World,
    kg: &KnowledgeGraph,
    paths: &Paths,
) -> Result<(Dataset, DatasetSplit)> {
    let t = Instant::now();
    let d = &cfg.dataset;
    let mut rng = learncore::rng(d.seed);
    let (samples, report) = sample_paths(
        world,
        kg,
        d.per_length,
        d.min_length..=d.max_length,
        &mut rng,
    )?;
    for (len, got) in &report.shortfalls {
        log::warn!("length {len}: only {got} of {} samples", d.per_length);
    }
    let sp = split(&samples, &mut rng);
    let ds = Dataset {
        kg_hash: text_hash(&kg.to_text()),
        samples,
    };
    ds.save(&paths.dataset())?;
    sp.save(&paths.split())?;
    let hash = StageHashes::new(cfg, world).dataset;
    finish(
        "gen-dataset",
        None,
        &hash,
        t,
        &[&paths.dataset(), &paths.split()],
    )?;
    Ok((ds, sp))
}

/// Graph, dataset and split shared by all seeds.
pub struct Common {
    pub world: World,
    pub kg: KnowledgeGraph,
    pub ds: Dataset,
    pub split: DatasetSplit,
}

impl Common {
    pub fn load(cfg: &HarnessConfig, paths: &Paths) -> Result<Self> {
        let world = load_world(&cfg.world)?;
        let kg = KnowledgeGraph::load(&paths.kg(), &world)?;
        let ds = Dataset::load(&paths.dataset())?;
        if ds.kg_hash != text_hash(&kg.to_text()) {
            return Err(Error::artifact(
                paths.dataset(),
                "dataset was generated from a different graph",
            ));
        }
        let split = DatasetSplit::load(&paths.split())?;
        let n = ds.samples.len();
        if split
            .train
            .iter()
            .chain(&split.val)
            .chain(&split.test)
            .any(|&i| i >= n)
        {
            return Err(Error::artifact(
                paths.split(),
                "split indexes past the dataset",
            ));
        }
        Ok(Common {
            world,
            kg,
            ds,
            split,
        })
    }

    pub fn test_samples(&self) -> Vec<&TaskSample> {
        self.split
            .test
            .iter()
            .map(|&i| &self.ds.samples[i])
            .collect()
    }
}

pub fn stage_train_apm(cfg: &HarnessConfig, c: &Common, seed: u64, paths: &Paths) -> Result<Apm> {
    let t = Instant::now();
    let (apm, log) = train_apm(&c.world, &c.kg, &c.ds, &c.split, &cfg.apm, seed)?;
    apm.save(&paths.apm(seed))?;
    io::write_artifact(&paths.apm_log(seed), &epoch_csv(&log))?;
    let hash = StageHashes::new(cfg, &c.world).apm(cfg, seed);
    finish(
        "train-apm",
        Some(seed),
        &hash,
        t,
        &[&paths.apm(seed), &paths.apm_log(seed)],
    )?;
    Ok(apm)
}

pub fn stage_train_effect(
    cfg: &HarnessConfig,
    c: &Common,
    seed: u64,
    paths: &Paths,
) -> Result<EffectExtractor> {
    let t = Instant::now();
    let (ex, log) = train_extractor(&c.world, &c.kg, &c.ds, &c.split, &cfg.effect, seed)?;
    ex.save(&paths.effect(seed))?;
    io::write_artifact(&paths.effect_log(seed), &effect_csv(&log))?;
    let hash = StageHashes::new(cfg, &c.world).effect(cfg, seed);
    finish(
        "train-effect",
        Some(seed),
        &hash,
        t,
        &[&paths.effect(seed), &paths.effect_log(seed)],
    )?;
    Ok(ex)
}

pub fn stage_memory(
    cfg: &HarnessConfig,
    c: &Common,
    ex: &EffectExtractor,
    seed: u64,
    paths: &Paths,
) -> Result<FeatureMemory> {
    let t = Instant::now();
    let mem = build_memory(ex, &c.kg, &c.ds, &c.split)?;
    mem.save(&paths.memory(seed))?;
    let hash = StageHashes::new(cfg, &c.world).memory(cfg, seed);
    finish("build-memory", Some(seed), &hash, t, &[&paths.memory(seed)])?;
    Ok(mem)
}

/// Runs every missing or stale stage for all configured seeds.
pub fn run_pipeline(cfg: &HarnessConfig, paths: &Paths) -> Result<()> {
    let world = load_world(&cfg.world)?;
    let h = StageHashes::new(cfg, &world);
    if !fresh(&paths.kg(), &h.kg) {
        stage_explore(cfg, &world, paths)?;
    }
    if !fresh(&paths.dataset(), &h.dataset) || !paths.split().exists() {
        let kg = KnowledgeGraph::load(&paths.kg(), &world)?;
        stage_dataset(cfg, &world, &kg, paths)?;
    }
    let c = Common::load(cfg, paths)?;
    for &seed in &cfg.seeds {
        if !fresh(&paths.apm(seed), &h.apm(cfg, seed)) {
            stage_train_apm(cfg, &c, seed, paths)?;
        }
        if !fresh(&paths.effect(seed), &h.effect(cfg, seed)) {
            stage_train_effect(cfg, &c, seed, paths)?;
        }
        if !fresh(&paths.memory(seed), &h.memory(cfg, seed)) {
            let ex = EffectExtractor::load(&paths.effect(seed), &c.world)?;
            stage_memory(cfg, &c, &ex, seed, paths)?;
        }
    }
    Ok(())
}

/// Trained models of one seed.
pub struct SeedModels {
    pub seed: u64,
    pub apm: Apm,
    pub extractor: EffectExtractor,
    pub memory: FeatureMemory,
}

impl SeedModels {
    pub fn load(c: &Common, paths: &Paths, seed: u64) -> Result<Self> {
        let memory = FeatureMemory::load(&paths.memory(seed))?;
        if memory.train_hash != crate::effectmem::train_hash(&c.ds, &c.split) {
            return Err(Error::artifact(
                paths.memory(seed),
                "memory was built from a different training split",
            ));
        }
        Ok(SeedModels {
            seed,
            apm: Apm::load(&paths.apm(seed), &c.world)?,
            extractor: EffectExtractor::load(&paths.effect(seed), &c.world)?,
            memory,
        })
    }
}

pub fn make_solver(
    mem: &FeatureMemory,
    rank: Option<usize>,
    centered: bool,
) -> Result<IndexSolver> {
    let a_f = memory_matrix(mem);
    match rank {
        None => Ok(IndexSolver::unreduced(&a_f)),
        Some(r) => {
            let r = r.min(mem.len()).min(mem.d_up);
            Ok(IndexSolver::new(&a_f, reduce(&a_f, r, centered)?))
        }
    }
}

/// A planner configuration under evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub name: String,
    pub planner: PlannerConfig,
    /// Project onto the leading singular vectors before solving.
    pub use_reduction: bool,
}

impl EvalSpec {
    pub fn fingerprint(&self, dec: &DecomposerConfig) -> String {
        json_hash(&(&self.planner, self.use_reduction, dec))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub task_id: usize,
    pub gt_length: usize,
    pub success: bool,
    pub provenance: Option<String>,
    pub plan_length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub seed: u64,
    pub fingerprint: String,
    pub outcomes: Vec<TaskOutcome>,
    pub pools_checked: usize,
    pub bound_violations: usize,
}

impl EvalReport {
    /// `gt_length -> (successes, total)`.
    pub fn counts(&self) -> BTreeMap<usize, (usize, usize)> {
        let mut m = BTreeMap::new();
        for o in &self.outcomes {
            let e = m.entry(o.gt_length).or_insert((0, 0));
            e.0 += o.success as usize;
            e.1 += 1;
        }
        m
    }

    pub fn rate(&self, gt_length: usize) -> Option<f64> {
        self.counts()
            .get(&gt_length)
            .map(|&(s, t)| s as f64 / t as f64)
    }

    pub fn average(&self) -> f64 {
        if self.outcomes.is_empty() {
            return 0.0;
        }
        self.outcomes.iter().filter(|o| o.success).count() as f64 / self.outcomes.len() as f64
    }
}

pub fn mean_average(reports: &[EvalReport]) -> f64 {
    if reports.is_empty() {
        return 0.0;
    }
    reports.iter().map(EvalReport::average).sum::<f64>() / reports.len() as f64
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct EpisodeKey {
    task: usize,
    strand: Strand,
    reduced: bool,
    max_step: usize,
    regenerate: bool,
    lenient: bool,
}

/// Evaluation state for one seed. Episodes are pure functions of their
/// key, so they are cached and shared between configurations.
pub struct SeedEval<'a> {
    pub common: &'a Common,
    pub models: &'a SeedModels,
    tasks: Vec<(&'a TaskSample, SceneGraph, SceneGraph)>,
    reduced: IndexSolver,
    unreduced: IndexSolver,
    cache: HashMap<EpisodeKey, Episode>,
}

impl<'a> SeedEval<'a> {
    pub fn new(common: &'a Common, models: &'a SeedModels, dec: &DecomposerConfig) -> Result<Self> {
        let tasks = common
            .test_samples()
            .into_iter()
            .map(|s| {
                let start = common.kg.state(&s.start())?;
                let goal = common.kg.state(&s.goal())?;
                Ok((s, (*start).clone(), (*goal).clone()))
            })
            .collect::<Result<_>>()?;
        Ok(SeedEval {
            common,
            models,
            tasks,
            reduced: make_solver(&models.memory, Some(dec.rank), dec.centered)?,
            unreduced: make_solver(&models.memory, None, false)?,
            cache: HashMap::new(),
        })
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    fn episode(
        &mut self,
        task: usize,
        strand: Strand,
        reduced: bool,
        cfg: &PlannerConfig,
    ) -> Result<Episode> {
        let key = EpisodeKey {
            task,
            strand,
            reduced: reduced && matches!(strand, Strand::Pool(..)),
            max_step: cfg.max_step,
            regenerate: cfg.regenerate,
            lenient: cfg.lenient,
        };
        if let Some(ep) = self.cache.get(&key) {
            return Ok(ep.clone());
        }
        let (sample, start, goal) = &self.tasks[task];
        let models = Models {
            apm: &self.models.apm,
            extractor: &self.models.extractor,
            memory: &self.models.memory,
            solver: if key.reduced {
                &self.reduced
            } else {
                &self.unreduced
            },
        };
        let t = Task {
            start,
            goal,
            constraints: &sample.constraints,
        };
        let ep = run_episode(&self.common.world, &t, &models, strand, cfg)?;
        self.cache.insert(key, ep.clone());
        Ok(ep)
    }

    /// Same result as [`crate::planner::plan_m3`] with the chosen solver.
    pub fn plan(&mut self, task: usize, spec: &EvalSpec) -> Result<PlanResult> {
        let cfg = &spec.planner;
        let mut episodes = Vec::new();
        if cfg.use_apm_direct {
            let ep = self.episode(task, Strand::Apm, spec.use_reduction, cfg)?;
            if ep.status == EpisodeStatus::Success {
                return Ok(PlanResult {
                    success: true,
                    plan: ep.plan.clone(),
                    provenance: Some(Strand::Apm),
                    episodes: vec![ep],
                });
            }
            episodes.push(ep);
        }
        let mut strands: Vec<Strand> = cfg
            .family
            .0
            .iter()
            .map(|&(k, s)| Strand::Pool(k, s))
            .collect();
        if cfg.apm_strand {
            strands.push(Strand::Apm);
        }
        let mut winner = None;
        for strand in strands {
            let ep = self.episode(task, strand, spec.use_reduction, cfg)?;
            if winner.is_none() && ep.status == EpisodeStatus::Success {
                winner = Some(episodes.len());
            }
            episodes.push(ep);
        }
        Ok(match winner {
            Some(i) => PlanResult {
                success: true,
                plan: episodes[i].plan.clone(),
                provenance: Some(episodes[i].strand),
                episodes,
            },
            None => PlanResult {
                success: false,
                plan: Vec::new(),
                provenance: None,
                episodes,
            },
        })
    }

    /// Plans every test task; optionally writes one trace file per task.
    pub fn evaluate(
        &mut self,
        spec: &EvalSpec,
        dec: &DecomposerConfig,
        traces: Option<&Path>,
    ) -> Result<EvalReport> {
        let mut report = EvalReport {
            name: spec.name.clone(),
            seed: self.models.seed,
            fingerprint: spec.fingerprint(dec),
            outcomes: Vec::with_capacity(self.tasks.len()),
            pools_checked: 0,
            bound_violations: 0,
        };
        for t in 0..self.tasks.len() {
            let res = self.plan(t, spec)?;
            let sample = self.tasks[t].0;
            let gt = distinct(&sample.gt_actions).len();
            for ep in &res.episodes {
                for pool in &ep.pools {
                    report.pools_checked += 1;
                    if pool_error(&pool.actions, &sample.gt_actions)
                        < error_lower_bound(pool.actions.len(), gt)
                    {
                        report.bound_violations += 1;
                    }
                }
            }
            if let Some(dir) = traces {
                io::write_artifact(
                    &dir.join(format!("task{}.txt", sample.id)),
                    &trace_text(sample.id, &res),
                )?;
            }
            report.outcomes.push(TaskOutcome {
                task_id: sample.id,
                gt_length: sample.gt_length(),
                success: res.success,
                provenance: res.provenance.map(|s| s.to_string()),
                plan_length: res.plan.len(),
            });
        }
        Ok(report)
    }

    /// Start-to-goal task features for all test tasks.
    pub fn task_features(&self) -> Result<Vec<Vec<f64>>> {
        self.tasks
            .iter()
            .map(|(_, s, g)| {
                self.models
                    .extractor
                    .feature(&EncoderInput::new(s), &EncoderInput::new(g))
            })
            .collect()
    }

    pub fn gt_sets(&self) -> Vec<Vec<GroundedAction>> {
        self.tasks
            .iter()
            .map(|(s, _, _)| s.gt_actions.clone())
            .collect()
    }
}

pub const EVAL_HEADER: &str = "seed,gt_length,successes,total";

pub fn eval_csv(reports: &[EvalReport]) -> String {
    let mut s = format!("{EVAL_HEADER}\n");
    for r in reports {
        for (len, (succ, total)) in r.counts() {
            s.push_str(&format!("{},{len},{succ},{total}\n", r.seed));
        }
    }
    s
}

/// Per-length and average success rates, mean over reports.
pub fn summary_csv(rows: &[(String, Vec<EvalReport>)]) -> String {
    let lengths: BTreeSet<usize> = rows
        .iter()
        .flat_map(|(_, rs)| rs.iter().flat_map(|r| r.counts().into_keys()))
        .collect();
    let mut s = String::from("name,fingerprint");
    for l in &lengths {
        s.push_str(&format!(",len{l}"));
    }
    s.push_str(",average\n");
    for (name, reports) in rows {
        let fp = reports
            .first()
            .map(|r| r.fingerprint.as_str())
            .unwrap_or("-");
        s.push_str(&format!("{name},{fp}"));
        for l in &lengths {
            let rates: Vec<f64> = reports.iter().filter_map(|r| r.rate(*l)).collect();
            let m = if rates.is_empty() {
                0.0
            } else {
                rates.iter().sum::<f64>() / rates.len() as f64
            };
            s.push_str(&format!(",{m:.4}"));
        }
        s.push_str(&format!(",{:.4}\n", mean_average(reports)));
    }
    s
}

pub fn default_spec(cfg: &HarnessConfig) -> EvalSpec {
    EvalSpec {
        name: "m3".into(),
        planner: cfg.planner.clone(),
        use_reduction: true,
    }
}

fn all_selection(family: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let sizes: BTreeSet<usize> = family.iter().map(|p| p.0).collect();
    sizes.into_iter().map(|k| (k, k)).collect()
}

/// Ablation rows. `single_*` entries expand to one candidate per pool
/// pair; the best candidate is reported.
pub fn ablation_grid(cfg: &HarnessConfig) -> Vec<(String, Vec<EvalSpec>)> {
    let base = &cfg.planner;
    let family = base.family.0.clone();
    let spec = |name: &str, fam: Vec<(usize, usize)>, direct: bool, reduction: bool| EvalSpec {
        name: name.into(),
        planner: PlannerConfig {
            family: MultiScalePool(fam),
            use_apm_direct: direct,
            ..base.clone()
        },
        use_reduction: reduction,
    };
    let singles = |pairs: Vec<(usize, usize)>, tag: &str| -> Vec<EvalSpec> {
        pairs
            .into_iter()
            .map(|p| spec(&format!("apm+single{p:?}+pca+{tag}"), vec![p], true, true))
            .collect()
    };
    vec![
        (
            "apm_only".into(),
            vec![spec("apm_only", vec![], true, true)],
        ),
        (
            "apm+single+pca+all".into(),
            singles(all_selection(&family), "all"),
        ),
        (
            "apm+single+pca+partial".into(),
            singles(family.clone(), "partial"),
        ),
        (
            "apm+multi+pca+all".into(),
            vec![spec(
                "apm+multi+pca+all",
                all_selection(&family),
                true,
                true,
            )],
        ),
        (
            "apm+multi+partial".into(),
            vec![spec("apm+multi+partial", family.clone(), true, false)],
        ),
        (
            "multi+pca+partial".into(),
            vec![spec("multi+pca+partial", family.clone(), false, true)],
        ),
        ("m3".into(), vec![spec("m3", family, true, true)]),
    ]
}

/// Everything loaded for a multi-seed evaluation.
pub struct Evaluation {
    pub common: Common,
    pub models: Vec<SeedModels>,
}

impl Evaluation {
    pub fn load(cfg: &HarnessConfig, paths: &Paths) -> Result<Self> {
        let common = Common::load(cfg, paths)?;
        let models = cfg
            .seeds
            .iter()
            .map(|&s| SeedModels::load(&common, paths, s))
            .collect::<Result<_>>()?;
        Ok(Evaluation { common, models })
    }

    pub fn seed_evals(&self, dec: &DecomposerConfig) -> Result<Vec<SeedEval<'_>>> {
        self.models
            .iter()
            .map(|m| SeedEval::new(&self.common, m, dec))
            .collect()
    }
}

pub fn evaluate_all(
    evals: &mut [SeedEval<'_>],
    spec: &EvalSpec,
    dec: &DecomposerConfig,
) -> Result<Vec<EvalReport>> {
    evals
        .iter_mut()
        .map(|e| e.evaluate(spec, dec, None))
        .collect()
}

/// One row per ablation entry: the reports of its best candidate.
pub fn ablate(
    evals: &mut [SeedEval<'_>],
    cfg: &HarnessConfig,
) -> Result<Vec<(String, Vec<EvalReport>)>> {
    let mut rows = Vec::new();
    for (row, candidates) in ablation_grid(cfg) {
        let mut best: Option<Vec<EvalReport>> = None;
        for spec in &candidates {
            let reports = evaluate_all(evals, spec, &cfg.decomposer)?;
            if best
                .as_ref()
                .is_none_or(|b| mean_average(&reports) > mean_average(b))
            {
                best = Some(reports);
            }
        }
        rows.push((row, best.unwrap_or_default()));
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[(String, Vec<EvalReport>)]) -> String {
    let mut s = String::from("row,config,fingerprint,seed,gt_length,successes,total\n");
    for (row, reports) in rows {
        for r in reports {
            for (len, (succ, total)) in r.counts() {
                s.push_str(&format!(
                    "{row},{},{},{},{len},{succ},{total}\n",
                    r.name, r.fingerprint, r.seed
                ));
            }
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoverageRow {
    pub seed: u64,
    /// `None` for the unreduced baseline.
    pub dimension: Option<usize>,
    pub k: usize,
    pub coverage: f64,
}

/// Area coverage of top-K pools built from each test task's start-to-goal
/// feature, for every dimension and K.
pub fn analyze_dims(evals: &[SeedEval<'_>], cfg: &HarnessConfig) -> Result<Vec<CoverageRow>> {
    let mut rows = Vec::new();
    for e in evals {
        let feats = e.task_features()?;
        let gts = e.gt_sets();
        let mem = &e.models.memory;
        let mut dims: Vec<Option<usize>> = vec![None];
        dims.extend(
            cfg.analysis
                .dims
                .iter()
                .filter(|&&d| d >= 1 && d <= mem.len().min(mem.d_up))
                .map(|&d| Some(d)),
        );
        for dim in dims {
            let solver = make_solver(mem, dim, cfg.decomposer.centered)?;
            let weights: Vec<Vec<f64>> = feats
                .iter()
                .map(|f| solver.solve(f))
                .collect::<Result<_>>()?;
            for &k in &cfg.analysis.ks {
                let items: Vec<_> = weights
                    .iter()
                    .zip(&gts)
                    .map(|(w, gt)| Ok((make_pool(w, &mem.actions, k, 1)?.actions, gt.clone())))
                    .collect::<Result<_>>()?;
                rows.push(CoverageRow {
                    seed: e.models.seed,
                    dimension: dim,
                    k,
                    coverage: area_coverage(&items),
                });
            }
        }
    }
    Ok(rows)
}

/// `(dimension, k) -> mean coverage` over seeds.
pub fn mean_coverage(rows: &[CoverageRow]) -> BTreeMap<(Option<usize>, usize), f64> {
    let mut acc: BTreeMap<(Option<usize>, usize), (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry((r.dimension, r.k)).or_insert((0.0, 0));
        e.0 += r.coverage;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(k, (s, n))| (k, s / n as f64))
        .collect()
}

pub fn dims_csv(rows: &[CoverageRow]) -> String {
    let dim = |d: Option<usize>| d.map_or("none".to_string(), |d| d.to_string());
    let mut s = String::from("seed,dimension,k,area_coverage\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.seed,
            dim(r.dimension),
            r.k,
            r.coverage
        ));
    }
    for ((d, k), c) in mean_coverage(rows) {
        s.push_str(&format!("mean,{},{k},{c}\n", dim(d)));
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolRow {
    pub pool_size: usize,
    pub select_count: usize,
    pub reports: Vec<EvalReport>,
}

impl PoolRow {
    pub fn partial(&self) -> bool {
        self.select_count < self.pool_size
    }
}

/// Success per single pool configuration, APM used only for ranking
/// inside the pool.
pub fn analyze_pool(evals: &mut [SeedEval<'_>], cfg: &HarnessConfig) -> Result<Vec<PoolRow>> {
    let mut pairs: Vec<(usize, usize)> = cfg.analysis.partial.clone();
    pairs.extend(
        cfg.analysis
            .all
            .iter()
            .copied()
            .filter(|p| !cfg.analysis.partial.contains(p)),
    );
    let mut rows = Vec::new();
    for (k, s) in pairs {
        let spec = EvalSpec {
            name: format!("pool({k},{s})"),
            planner: PlannerConfig {
                family: MultiScalePool(vec![(k, s)]),
                use_apm_direct: false,
                apm_strand: false,
                ..cfg.planner.clone()
            },
            use_reduction: true,
        };
        rows.push(PoolRow {
            pool_size: k,
            select_count: s,
            reports: evaluate_all(evals, &spec, &cfg.decomposer)?,
        });
    }
    Ok(rows)
}

pub fn pool_csv(rows: &[PoolRow]) -> String {
    let mut s = String::from("pool_size,select_count,selection,seed,successes,total\n");
    for r in rows {
        let sel = if r.partial() { "partial" } else { "all" };
        for rep in &r.reports {
            let succ = rep.outcomes.iter().filter(|o| o.success).count();
            s.push_str(&format!(
                "{},{},{sel},{},{succ},{}\n",
                r.pool_size,
                r.select_count,
                rep.seed,
                rep.outcomes.len()
            ));
        }
    }
    s
}

/// For each pool size that has both kinds, the best partial-selection
/// mean success and the all-selection mean success.
pub fn partial_vs_all(rows: &[PoolRow]) -> Vec<(usize, f64, f64)> {
    let mut out = Vec::new();
    let sizes: BTreeSet<usize> = rows.iter().map(|r| r.pool_size).collect();
    for k in sizes {
        let best_partial = rows
            .iter()
            .filter(|r| r.pool_size == k && r.partial())
            .map(|r| mean_average(&r.reports))
            .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))));
        let all = rows
            .iter()
            .find(|r| r.pool_size == k && !r.partial())
            .map(|r| mean_average(&r.reports));
        if let (Some(p), Some(a)) = (best_partial, all) {
            out.push((k, p, a));
        }
    }
    out
}

/// Pairs `(K, dimension)` where coverage drops as K grows.
pub fn coverage_monotonicity_violations(rows: &[CoverageRow]) -> Vec<(u64, Option<usize>, usize)> {
    type Curves = BTreeMap<(u64, Option<usize>), Vec<(usize, f64)>>;
    let mut by: Curves = BTreeMap::new();
    for r in rows {
        by.entry((r.seed, r.dimension))
            .or_default()
            .push((r.k, r.coverage));
    }
    let mut bad = Vec::new();
    for ((seed, dim), mut v) in by {
        v.sort_by_key(|x| x.0);
        for w in v.windows(2) {
            if w[1].1 < w[0].1 {
                bad.push((seed, dim, w[1].0));
            }
        }
    }
    bad
}

/// Evaluates the configured planner, writes traces, `eval.csv` and
/// `eval_summary.csv`.
pub fn stage_evaluate(cfg: &HarnessConfig, paths: &Paths) -> Result<Vec<EvalReport>> {
    let t = Instant::now();
    let ev = Evaluation::load(cfg, paths)?;
    let mut evals = ev.seed_evals(&cfg.decomposer)?;
    let spec = default_spec(cfg);
    let mut reports = Vec::new();
    for e in evals.iter_mut() {
        let dir = paths.traces(e.models.seed);
        reports.push(e.evaluate(&spec, &cfg.decomposer, Some(&dir))?);
    }
    let out = paths.file("eval.csv");
    io::write_artifact(&out, &eval_csv(&reports))?;
    io::write_artifact(
        &paths.file("eval_summary.csv"),
        &summary_csv(&[(spec.name.clone(), reports.clone())]),
    )?;
    finish(
        "evaluate",
        None,
        &spec.fingerprint(&cfg.decomposer),
        t,
        &[&out],
    )?;
    Ok(reports)
}

pub fn stage_ablate(cfg: &HarnessConfig, paths: &Paths) -> Result<Vec<(String, Vec<EvalReport>)>> {
    let t = Instant::now();
    let ev = Evaluation::load(cfg, paths)?;
    let mut evals = ev.seed_evals(&cfg.decomposer)?;
    let rows = ablate(&mut evals, cfg)?;
    let out = paths.file("ablate.csv");
    io::write_artifact(&out, &ablation_csv(&rows))?;
    io::write_artifact(&paths.file("ablate_summary.csv"), &summary_csv(&rows))?;
    finish(
        "ablate",
        None,
        &json_hash(&(&cfg.planner, &cfg.decomposer)),
        t,
        &[&out],
    )?;
    Ok(rows)
}

pub fn stage_analyze_dims(cfg: &HarnessConfig, paths: &Paths) -> Result<Vec<CoverageRow>> {
    let t = Instant::now();
    let ev = Evaluation::load(cfg, paths)?;
    let evals = ev.seed_evals(&cfg.decomposer)?;
    let rows = analyze_dims(&evals, cfg)?;
    let out = paths.file("dims.csv");
    io::write_artifact(&out, &dims_csv(&rows))?;
    finish(
        "analyze-dims",
        None,
        &json_hash(&(&cfg.analysis, &cfg.decomposer)),
        t,
        &[&out],
    )?;
    Ok(rows)
}

pub fn stage_analyze_pool(cfg: &HarnessConfig, paths: &Paths) -> Result<Vec<PoolRow>> {
    let t = Instant::now();
    let ev = Evaluation::load(cfg, paths)?;
    let mut evals = ev.seed_evals(&cfg.decomposer)?;
    let rows = analyze_pool(&mut evals, cfg)?;
    let out = paths.file("pool.csv");
    io::write_artifact(&out, &pool_csv(&rows))?;
    finish(
        "analyze-pool",
        None,
        &json_hash(&(&cfg.analysis, &cfg.planner)),
        t,
        &[&out],
    )?;
    Ok(rows)
}
