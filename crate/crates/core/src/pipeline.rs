//! Phase runner: split -> train-target -> distill -> gen-adv ->
//! train-inversion -> evaluate -> defend -> report, with content-hash
//! skipping recorded in `state.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use advinv_nn::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{build_training_set, AugmentPolicy, TrainingSet};
use crate::blackbox::{simba_batch_snapshots, summarize, AdversarialSet, SimbaParams, SimbaSummary};
use crate::config::{ModelConfig, OracleKind, Phase, RunConfig, VariantConfig};
use crate::datahub::{build_split, load_source, select_side, LabeledImages, LoadOptions, Side, SideData, SourceData, SplitManifest};
use crate::defense::{adversarial_train, robust_accuracy, write_defense_curve, DefenseConfig, DefensePoint};
use crate::distill::{harvest_soft_labels, target_fingerprint, train_shadow, DistillSet, ShadowReport};
use crate::error::{CoreError, Result};
use crate::evalkit::{
    append_metrics, attack_accuracy, consistency_sweep, diversity_report, read_metrics, recon_error, variance_probe,
    MetricsRecord,
};
use crate::invert::{reconstruct, train_inversion, InversionLog, InversionLossConfig};
use crate::modelzoo::{accuracy, build_model, train_classifier, CountingOracle, ModelHandle, ModelShape, QueryOnly, QueryOracle, TrainLog};
use crate::util::{self, derive_seed, file_hash, Fingerprint};

/// Held-out public images used to report shadow agreement.
const HELD_OUT: usize = 1000;
const GRID: usize = 32;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(CoreError),
    #[error("phase {phase} failed: {source}")]
    Phase { phase: Phase, source: CoreError },
}

impl PipelineError {
    /// Process exit code: 2 for configuration errors, 1 for phase failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Phase { .. } => 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub input_hash: String,
    /// Run-relative output path -> content hash.
    pub outputs: BTreeMap<String, String>,
    pub seconds: f64,
    #[serde(default)]
    pub counters: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub phases: BTreeMap<String, PhaseRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PhaseOutcome {
    Ran,
    Skipped,
}

/// One point of an attack-budget curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetPoint {
    pub oracle: OracleKind,
    pub max_rounds: usize,
    #[serde(flatten)]
    pub summary: SimbaSummary,
}

/// Side data a phase works on.
struct Data {
    source: SourceData,
    manifest: SplitManifest,
    private: SideData,
    public: SideData,
}

/// Public images used by the attacker.
struct PublicSets {
    shadow: LabeledImages,
    inversion: LabeledImages,
    held: LabeledImages,
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub dir: PathBuf,
    config_hash: String,
    state: RunState,
    source: Option<SourceData>,
}

fn rel(p: &str) -> String {
    p.to_string()
}

impl Pipeline {
    /// Prepare the run directory and write the effective config.
    pub fn open(cfg: RunConfig) -> std::result::Result<Self, PipelineError> {
        cfg.validate().map_err(PipelineError::Config)?;
        let dir = cfg.run_dir();
        let setup = || -> Result<Self> {
            fs::create_dir_all(&dir)?;
            let config_hash = cfg.hash()?;
            let text = cfg.to_toml()?;
            let cpath = dir.join("config.toml");
            if fs::read_to_string(&cpath).ok().as_deref() != Some(text.as_str()) {
                fs::write(&cpath, text)?;
            }
            let spath = dir.join("state.json");
            let state = if spath.exists() { util::read_json(&spath)? } else { RunState::default() };
            Ok(Self { cfg: cfg.clone(), dir: dir.clone(), config_hash, state, source: None })
        };
        setup().map_err(PipelineError::Config)
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    /// Run the configured phases in canonical order.
    pub fn run_all(&mut self) -> std::result::Result<Vec<(Phase, PhaseOutcome)>, PipelineError> {
        let mut phases = self.cfg.phases.clone();
        phases.sort();
        phases.dedup();
        let mut out = Vec::new();
        for p in phases {
            if p == Phase::Defend && self.cfg.defense.is_none() {
                continue;
            }
            out.push((p, self.run_phase(p)?));
        }
        Ok(out)
    }

    pub fn run_phase(&mut self, phase: Phase) -> std::result::Result<PhaseOutcome, PipelineError> {
        let wrap = |source| PipelineError::Phase { phase, source };
        let input = self.input_hash(phase).map_err(wrap)?;
        if self.is_current(phase, &input).map_err(wrap)? {
            log::info!("{phase}: inputs unchanged, skipped");
            return Ok(PhaseOutcome::Skipped);
        }
        log::info!("{phase}: running");
        let t = Instant::now();
        let (outputs, counters) = self.execute(phase).map_err(wrap)?;
        let mut hashed = BTreeMap::new();
        for o in outputs {
            hashed.insert(o.clone(), file_hash(&self.dir.join(&o)).map_err(wrap)?);
        }
        let rec = PhaseRecord { input_hash: input, outputs: hashed, seconds: t.elapsed().as_secs_f64(), counters };
        self.state.phases.insert(phase.as_str().into(), rec);
        util::write_json(&self.dir.join("state.json"), &self.state).map_err(wrap)?;
        Ok(PhaseOutcome::Ran)
    }

    fn is_current(&self, phase: Phase, input: &str) -> Result<bool> {
        let Some(rec) = self.state.phases.get(phase.as_str()) else { return Ok(false) };
        if rec.input_hash != input {
            return Ok(false);
        }
        for (p, h) in &rec.outputs {
            let path = self.dir.join(p);
            if !path.exists() || &file_hash(&path)? != h {
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn record(&self, phase: Phase) -> Result<&PhaseRecord> {
        self.state.phases.get(phase.as_str()).ok_or_else(|| {
            CoreError::Missing { path: self.dir.join("state.json"), reason: format!("phase {phase} has not run") }
        })
    }

    fn output_hash(&self, phase: Phase, name: &str) -> Result<String> {
        self.record(phase)?
            .outputs
            .get(name)
            .cloned()
            .ok_or_else(|| CoreError::Missing { path: self.dir.join(name), reason: format!("not produced by {phase}") })
    }

    fn upstream(&self, phase: Phase) -> Result<String> {
        let r = self.record(phase)?;
        let mut f = Fingerprint::new().str(&r.input_hash);
        for (k, v) in &r.outputs {
            f = f.str(k).str(v);
        }
        Ok(f.finish())
    }

    fn input_hash(&self, phase: Phase) -> Result<String> {
        let c = &self.cfg;
        let f = Fingerprint::new().str(phase.as_str()).u64(c.seed);
        let f = match phase {
            Phase::Split => {
                // the manifest carries the source digest; moving the data must not invalidate runs
                let mut d = c.data.clone();
                d.root = PathBuf::new();
                f.str(&js(&d))
            }
            Phase::TrainTarget => f.str(&self.upstream(Phase::Split)?).str(&js(&c.target)).str(&js(&c.evaluators)),
            Phase::Distill => f
                .str(&self.upstream(Phase::TrainTarget)?)
                .str(&js(&c.shadow))
                .u64(c.inversion.public_limit as u64),
            Phase::GenAdv => f
                .str(&self.upstream(Phase::Distill)?)
                .str(&js(&c.attack))
                .u64(c.attack_limit as u64)
                .str(&js(&self.needed_oracles())),
            Phase::TrainInversion => {
                let f = f.str(&self.upstream(Phase::Distill)?).str(&js(&c.inversion)).str(&js(&c.variants));
                if self.needed_oracles().is_empty() {
                    f
                } else {
                    f.str(&self.upstream(Phase::GenAdv)?)
                }
            }
            Phase::Evaluate => f
                .str(&self.upstream(Phase::TrainInversion)?)
                .str(&js(&c.probe))
                .u64(c.inversion.eval_limit as u64),
            Phase::Defend => f
                .str(&self.upstream(Phase::TrainTarget)?)
                .str(&js(&c.defense))
                .str(&js(&c.shadow))
                .str(&js(&c.inversion))
                .str(&js(&c.attack))
                .str(&js(&c.variants)),
            Phase::Report => {
                let m = self.dir.join("metrics.jsonl");
                let h = if m.exists() { file_hash(&m)? } else { String::new() };
                let mut f = f.str(&h);
                for p in [Phase::Evaluate, Phase::Defend] {
                    if let Ok(r) = self.record(p) {
                        f = f.str(&js(&r.counters)).u64(r.seconds.to_bits());
                    }
                }
                f
            }
        };
        Ok(f.finish())
    }

    fn needed_oracles(&self) -> Vec<OracleKind> {
        let mut o: Vec<OracleKind> =
            self.cfg.variants.iter().filter(|v| v.augment).map(|v| self.cfg.variant_oracle(v)).collect();
        o.sort_by_key(|k| *k as u8);
        o.dedup();
        o
    }

    fn seed(&self, label: &str) -> u64 {
        derive_seed(self.cfg.seed, label)
    }

    fn source(&mut self) -> Result<&SourceData> {
        if self.source.is_none() {
            let d = &self.cfg.data;
            let opts = LoadOptions {
                root: d.root.clone(),
                image_size: d.image_size,
                test_fraction: d.test_fraction,
                synthetic: d.synthetic.clone(),
            };
            self.source = Some(load_source(&d.dataset, &opts)?);
        }
        Ok(self.source.as_ref().expect("loaded"))
    }

    fn data(&mut self) -> Result<Data> {
        let source = self.source()?.clone();
        let manifest = SplitManifest::load(&self.dir.join("split/manifest.json"))?;
        let private = select_side(&source, &manifest, Side::Private)?;
        let public = select_side(&source, &manifest, Side::Public)?;
        Ok(Data { source, manifest, private, public })
    }

    fn public_sets(&self, public: &SideData) -> PublicSets {
        let s = self.seed("public");
        PublicSets {
            shadow: public.train.limit(self.cfg.shadow.public_limit, s),
            inversion: public.train.limit(self.cfg.inversion.public_limit, s),
            held: public.test.limit(HELD_OUT, self.seed("held-out")),
        }
    }

    fn classifier_shape(&self, d: &Data) -> ModelShape {
        ModelShape::Classifier { image: d.source.image_shape().to_vec(), classes: d.private.classes.len() }
    }

    fn load_model(&self, rel_path: &str) -> Result<ModelHandle> {
        ModelHandle::load(&self.dir.join(rel_path))
    }

    fn execute(&mut self, phase: Phase) -> Result<(Vec<String>, BTreeMap<String, f64>)> {
        match phase {
            Phase::Split => self.phase_split(),
            Phase::TrainTarget => self.phase_train_target(),
            Phase::Distill => self.phase_distill(),
            Phase::GenAdv => self.phase_gen_adv(),
            Phase::TrainInversion => self.phase_train_inversion(),
            Phase::Evaluate => self.phase_evaluate(),
            Phase::Defend => self.phase_defend(),
            Phase::Report => {
                let outputs = crate::report::write_run_report(&self.dir)?;
                Ok((outputs, BTreeMap::new()))
            }
        }
    }

    fn phase_split(&mut self) -> Result<(Vec<String>, BTreeMap<String, f64>)> {
        let scheme = self.cfg.data.split.clone();
        let seed = self.cfg.data.split_seed;
        let m = build_split(self.source()?, &scheme, seed)?;
        fs::create_dir_all(self.dir.join("split"))?;
        m.save(&self.dir.join("split/manifest.json"))?;
        let mut counters = BTreeMap::new();
        counters.insert("private_classes".into(), m.private_class_ids.len() as f64);
        counters.insert("public_classes".into(), m.public_class_ids.len() as f64);
        Ok((vec![rel("split/manifest.json")], counters))
    }

    fn phase_train_target(&mut self) -> Result<(Vec<String>, BTreeMap<String, f64>)> {
        let d = self.data()?;
        let shape = self.classifier_shape(&d);
        fs::create_dir_all(self.dir.join("models"))?;
        let mut counters = BTreeMap::new();
        let mut outputs = Vec::new();
        let roles: Vec<(String, ModelConfig)> = std::iter::once(("target".to_string(), self.cfg.target.clone()))
            .chain(self.cfg.evaluators.iter().enumerate().map(|(i, e)| (evaluator_name(i, e), e.clone())))
            .collect();
        for (name, mc) in roles {
            let seed = self.seed(&name);
            let mut m = build_model(mc.arch, shape.clone(), mc.width, None, seed)?;
            let t = Instant::now();
            let log = train_classifier(&mut m, &d.private.train, Some(&d.private.test), &mc.train, seed)?;
            let acc = accuracy(&m, &d.private.test)?;
            log::info!("{name} ({}) test accuracy {acc:.4}", mc.arch);
            let path = format!("models/{name}.ckpt");
            m.save(&self.dir.join(&path))?;
            util::write_json(&self.dir.join(format!("models/{name}.log.json")), &log)?;
            counters.insert(format!("{name}_test_acc"), acc);
            counters.insert(format!("{name}_seconds"), t.elapsed().as_secs_f64());
            outputs.push(path);
        }
        Ok((outputs, counters))
    }

    fn phase_distill(&mut self) -> Result<(Vec<String>, BTreeMap<String, f64>)> {
        let d = self.data()?;
        let target = self.load_model("models/target.ckpt")?;
        let sets = self.public_sets(&d.public);
        fs::create_dir_all(self.dir.join("cache"))?;
        let oracle = CountingOracle::new(QueryOnly(&target));
        let fp = target_fingerprint(&self.output_hash(Phase::TrainTarget, "models/target.ckpt")?, &d.manifest.checksum);
        let cache = self.dir.join("cache/soft_labels.csv");
        let (shadow_set, held_set, _) = harvest(&oracle, &sets, &fp, Some(&cache))?;
        let t = Instant::now();
        let (shadow, report) = fit_shadow(&self.cfg, self.classifier_shape(&d), &shadow_set, &held_set, self.seed("shadow"))?;
        shadow.save(&self.dir.join("models/shadow.ckpt"))?;
        util::write_json(&self.dir.join("models/shadow.log.json"), &report)?;
        let mut counters = BTreeMap::new();
        counters.insert("harvest_queries".into(), oracle.queries() as f64);
        counters.insert("shadow_agreement".into(), report.agreement);
        counters.insert("shadow_seconds".into(), t.elapsed().as_secs_f64());
        Ok((vec![rel("cache/soft_labels.csv"), rel("models/shadow.ckpt")], counters))
    }

    /// Clean inversion samples rebuilt from the harvest cache; errors when
    /// the cache would need new target queries.
    fn clean_samples(&mut self, d: &Data, target: &ModelHandle) -> Result<DistillSet> {
        let sets = self.public_sets(&d.public);
        let fp = target_fingerprint(&self.output_hash(Phase::TrainTarget, "models/target.ckpt")?, &d.manifest.checksum);
        let (set, stats) =
            harvest_soft_labels(&QueryOnly(target), &sets.inversion.images, &fp, Some(&self.dir.join("cache/soft_labels.csv")), 512)?;
        if stats.new_queries > 0 {
            return Err(CoreError::Data(format!("harvest cache is missing {} inversion samples", stats.new_queries)));
        }
        Ok(set)
    }

    fn attack_images(&self, clean: &DistillSet) -> Tensor {
        let n = clean.len();
        let lim = if self.cfg.attack_limit == 0 { n } else { self.cfg.attack_limit.min(n) };
        clean.images.select(&(0..lim).collect::<Vec<_>>())
    }

    fn phase_gen_adv(&mut self) -> Result<(Vec<String>, BTreeMap<String, f64>)> {
        let d = self.data()?;
        let target = self.load_model("models/target.ckpt")?;
        let shadow = self.load_model("models/shadow.ckpt")?;
        let clean = self.clean_samples(&d, &target)?;
        let xs = self.attack_images(&clean);
        let counter = CountingOracle::new(QueryOnly(&target));
        let mut outputs = Vec::new();
        let mut counters = BTreeMap::new();
        for kind in self.needed_oracles() {
            let before = counter.queries();
            let oracle: &dyn QueryOracle = match kind {
                OracleKind::Target => &counter,
                OracleKind::Shadow => &shadow,
            };
            let t = Instant::now();
            let (adv, curve) = run_attack(kind, oracle, &xs, &self.cfg, self.cfg.attack.epsilon, self.cfg.attack.max_rounds, self.seed("simba"))?;
            let name = oracle_name(kind);
            let sub = format!("adv/{name}");
            adv.save(&self.dir.join(&sub), true)?;
            util::write_json(&self.dir.join(format!("{sub}/budget.json")), &curve)?;
            outputs.push(format!("{sub}/index.csv"));
            outputs.push(format!("{sub}/images.f32"));
            counters.insert(format!("{name}_target_queries"), (counter.queries() - before) as f64);
            counters.insert(format!("{name}_seconds"), t.elapsed().as_secs_f64());
            if let Some(last) = curve.last() {
                counters.insert(format!("{name}_asr"), last.summary.asr);
            }
        }
        Ok((outputs, counters))
    }

    fn training_set(&self, clean: &DistillSet, v: &VariantConfig) -> Result<TrainingSet> {
        if !v.augment {
            return build_training_set(clean, None, &AugmentPolicy::default());
        }
        let adv = AdversarialSet::load(&self.dir.join(format!("adv/{}", oracle_name(self.cfg.variant_oracle(v)))))?;
        build_training_set(clean, Some(&adv), &AugmentPolicy { ratio: 1.0, seed: self.seed("augment") })
    }

    fn phase_train_inversion(&mut self) -> Result<(Vec<String>, BTreeMap<String, f64>)> {
        let d = self.data()?;
        let target = self.load_model("models/target.ckpt")?;
        let shadow = self.load_model("models/shadow.ckpt")?;
        let clean = self.clean_samples(&d, &target)?;
        let mut outputs = Vec::new();
        let mut counters = BTreeMap::new();
        for v in self.cfg.variants.clone() {
            let set = self.training_set(&clean, &v)?;
            counters.insert(format!("{}_samples", v.name), set.len() as f64);
            for r in 0..self.cfg.inversion.repeats {
                let (inv, log, secs) = fit_inversion(&self.cfg, &v, &set, &shadow, self.seed(&format!("inversion/{r}")))?;
                let path = format!("models/inv-{}-{r}.ckpt", v.name);
                inv.save(&self.dir.join(&path))?;
                let side = InversionSidecar { variant: v.clone(), repeat: r, seconds: secs, log };
                util::write_json(&self.dir.join(format!("models/inv-{}-{r}.json", v.name)), &side)?;
                outputs.push(path);
            }
        }
        Ok((outputs, counters))
    }

    fn eval_set(&self, d: &Data) -> LabeledImages {
        d.private.test.limit(self.cfg.inversion.eval_limit, self.seed("eval"))
    }

    fn phase_evaluate(&mut self) -> Result<(Vec<String>, BTreeMap<String, f64>)> {
        let d = self.data()?;
        let target = self.load_model("models/target.ckpt")?;
        let shadow = self.load_model("models/shadow.ckpt")?;
        let evaluators: Vec<(String, ModelHandle)> = self
            .cfg
            .evaluators
            .iter()
            .enumerate()
            .map(|(i, e)| Ok((e.arch.as_str().to_string(), self.load_model(&format!("models/{}.ckpt", evaluator_name(i, e)))?)))
            .collect::<Result<_>>()?;
        let clean = self.clean_samples(&d, &target)?;
        let evalset = self.eval_set(&d);
        let oracle = CountingOracle::new(QueryOnly(&target));
        let sup = oracle.query(&evalset.images)?;
        fs::create_dir_all(self.dir.join("figures"))?;
        util::save_grid(&self.dir.join("figures/originals.png"), &head(&evalset.images, GRID), 8)?;
        let run_id = self.run_id();
        let mut records = Vec::new();
        let timings = self.timings();
        for rec in self.budget_records()? {
            records.push(rec);
        }
        for v in self.cfg.variants.clone() {
            let metric = self.cfg.variant_metric(&v);
            let mut errs = Vec::new();
            let mut accs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            let mut secs = Vec::new();
            let mut diversity = None;
            for r in 0..self.cfg.inversion.repeats {
                let inv = self.load_model(&format!("models/inv-{}-{r}.ckpt", v.name))?;
                let side: InversionSidecar = util::read_json(&self.dir.join(format!("models/inv-{}-{r}.json", v.name)))?;
                secs.push(side.seconds);
                let rec = reconstruct(&inv, &sup)?;
                errs.push(recon_error(&evalset.images, &rec, metric)?);
                for (name, ev) in &evaluators {
                    accs.entry(name.clone()).or_default().push(attack_accuracy(&rec, &evalset.labels, ev)?);
                }
                if r == 0 {
                    util::save_grid(&self.dir.join(format!("figures/recon-{}.png", v.name)), &head(&rec, GRID), 8)?;
                    if v.augment {
                        let set = self.training_set(&clean, &v)?;
                        diversity = Some(diversity_report(&inv, &set, &shadow, metric)?);
                    }
                }
            }
            let mut m = MetricsRecord {
                run_id: run_id.clone(),
                config_hash: self.config_hash.clone(),
                variant: v.name.clone(),
                params: variant_params(&self.cfg, &v),
                recon_error: util::mean(&errs),
                attack_accuracy: accs.iter().map(|(k, a)| (k.clone(), util::mean(a))).collect(),
                diversity,
                ..Default::default()
            };
            m.wall_times = timings.clone();
            m.wall_times.insert("train-inversion".into(), util::mean(&secs));
            m.extra.insert("train_inversion_std".into(), util::stddev(&secs));
            for (r, t) in secs.iter().enumerate() {
                m.extra.insert(format!("train_inversion_seconds_{r}"), *t);
            }
            m.extra.insert("repeats".into(), errs.len() as f64);
            if let Some((first, a)) = accs.iter().next() {
                m.extra.insert(format!("{first}_std"), util::stddev(a));
            }
            if v.augment {
                let kind = self.cfg.variant_oracle(&v);
                let curve: Vec<BudgetPoint> =
                    util::read_json(&self.dir.join(format!("adv/{}/budget.json", oracle_name(kind))))?;
                if let Some(last) = curve.last() {
                    m.asr = Some(last.summary.asr);
                    m.mean_l2 = Some(last.summary.mean_l2_success);
                }
                if let Ok(r) = self.record(Phase::GenAdv) {
                    if let Some(q) = r.counters.get(&format!("{}_target_queries", oracle_name(kind))) {
                        m.extra.insert("gen_adv_target_queries".into(), *q);
                    }
                }
            }
            records.push(m);
        }
        let mut counters = BTreeMap::new();
        counters.insert("eval_queries".into(), oracle.queries() as f64);
        if let Some(p) = self.cfg.probe.clone() {
            fs::create_dir_all(self.dir.join("probe"))?;
            let seed = self.seed("probe");
            let ood = d.public.test.limit(p.limit, seed);
            let ind = d.private.test.limit(p.limit, seed);
            let mut rows = Vec::new();
            for (dist, data) in [("in-distribution", &ind), ("out-of-distribution", &ood)] {
                for r in consistency_sweep(&QueryOnly(&target), &data.images, &p.noises, &p.ks, p.trials, seed)? {
                    rows.push(ConsistencyCsvRow {
                        data: dist.into(),
                        noise: r.noise,
                        k: r.k,
                        consistency: r.consistency,
                        exact: r.exact,
                    });
                }
            }
            write_csv(&self.dir.join("probe/consistency.csv"), &rows)?;
            let vp: Vec<_> = [0.1, 0.3, 0.5]
                .iter()
                .map(|&s| variance_probe(s, s / 2.0, 256, 2000, seed))
                .collect::<Result<_>>()?;
            write_csv(&self.dir.join("probe/variance.csv"), &vp)?;
        }
        let path = self.dir.join("metrics.jsonl");
        let keep: Vec<MetricsRecord> = if path.exists() {
            read_metrics(&path)?.into_iter().filter(|r| r.variant.starts_with("defense:")).collect()
        } else {
            Vec::new()
        };
        if path.exists() {
            fs::remove_file(&path)?;
        }
        for r in keep.iter().chain(&records) {
            append_metrics(&path, r)?;
        }
        let mut outputs = vec![rel("figures/originals.png")];
        if self.cfg.probe.is_some() {
            outputs.push(rel("probe/consistency.csv"));
        }
        Ok((outputs, counters))
    }

    fn run_id(&self) -> String {
        format!("{}-{}", self.cfg.name, &self.config_hash[..12])
    }

    fn timings(&self) -> BTreeMap<String, f64> {
        self.state.phases.iter().map(|(k, r)| (k.clone(), r.seconds)).collect()
    }

    fn budget_records(&self) -> Result<Vec<MetricsRecord>> {
        let mut out = Vec::new();
        for kind in self.needed_oracles() {
            let p = self.dir.join(format!("adv/{}/budget.json", oracle_name(kind)));
            let curve: Vec<BudgetPoint> = util::read_json(&p)?;
            for b in curve {
                let mut m = MetricsRecord {
                    run_id: self.run_id(),
                    config_hash: self.config_hash.clone(),
                    variant: format!("budget:{}:{}", oracle_name(kind), b.max_rounds),
                    asr: Some(b.summary.asr),
                    mean_l2: Some(b.summary.mean_l2_success),
                    ..Default::default()
                };
                m.params.insert("oracle".into(), oracle_name(kind).into());
                m.params.insert("max_rounds".into(), b.max_rounds.to_string());
                m.params.insert("epsilon".into(), self.cfg.attack.epsilon.to_string());
                m.params.insert("k".into(), self.cfg.attack.k.to_string());
                m.extra.insert("mean_queries".into(), b.summary.mean_queries);
                m.extra.insert("mean_l2_all".into(), b.summary.mean_l2);
                m.extra.insert("attacks".into(), b.summary.attacks as f64);
                out.push(m);
            }
        }
        Ok(out)
    }

    fn phase_defend(&mut self) -> Result<(Vec<String>, BTreeMap<String, f64>)> {
        let def = self.cfg.defense.clone().ok_or_else(|| CoreError::Config("no [defense] section".into()))?;
        let d = self.data()?;
        let shape = self.classifier_shape(&d);
        let target = self.load_model("models/target.ckpt")?;
        let nr_eval = self.load_model(&format!("models/{}.ckpt", evaluator_name(0, &self.cfg.evaluators[0])))?;
        let variants: Vec<VariantConfig> = [&def.baseline, &def.ours]
            .iter()
            .map(|n| self.cfg.variants.iter().find(|v| &v.name == *n).cloned().expect("validated"))
            .collect();
        let evalset = self.eval_set(&d);
        let sets = self.public_sets(&d.public);
        let mut points = Vec::new();
        let mut records = Vec::new();
        let mut counters = BTreeMap::new();
        for &gamma in &def.gammas {
            let tag = format!("g{gamma}");
            let gdir = self.dir.join(format!("defense/{tag}"));
            fs::create_dir_all(&gdir)?;
            let dc = DefenseConfig { gamma, mix_ratio: def.mix_ratio };
            let seed = self.seed(&format!("defense/{tag}"));
            let mut dt = build_model(self.cfg.target.arch, shape.clone(), self.cfg.target.width, None, seed)?;
            let log: TrainLog = adversarial_train(&mut dt, &d.private.train, Some(&d.private.test), &dc, &def.train, seed)?;
            dt.save(&gdir.join("target.ckpt"))?;
            util::write_json(&gdir.join("target.log.json"), &log)?;
            let e0 = &self.cfg.evaluators[0];
            let mut rob_eval = build_model(e0.arch, shape.clone(), e0.width, None, seed ^ 1)?;
            adversarial_train(&mut rob_eval, &d.private.train, None, &dc, &def.train, seed ^ 1)?;
            rob_eval.save(&gdir.join("evaluator.ckpt"))?;
            let std_acc = accuracy(&dt, &d.private.test)?;
            let rob_acc = robust_accuracy(&dt, &d.private.test, gamma)?;
            let undefended_rob = robust_accuracy(&target, &d.private.test, gamma)?;
            counters.insert(format!("{tag}_std_acc"), std_acc);
            counters.insert(format!("{tag}_rob_acc"), rob_acc);
            counters.insert(format!("{tag}_undefended_rob_acc"), undefended_rob);
            let oracle = CountingOracle::new(QueryOnly(&dt));
            let fp = target_fingerprint(&dt.fingerprint()?, &d.manifest.checksum);
            let (shadow_set, held_set, inv_set) = harvest(&oracle, &sets, &fp, Some(&gdir.join("soft_labels.csv")))?;
            let (shadow, _) = fit_shadow(&self.cfg, shape.clone(), &shadow_set, &held_set, seed ^ 2)?;
            let eps = def_eps(&def, &self.cfg);
            let rounds = def.max_rounds.unwrap_or(self.cfg.attack.max_rounds);
            let mut adv: BTreeMap<OracleKind, AdversarialSet> = BTreeMap::new();
            let sup = oracle.query(&evalset.images)?;
            let mut accs: Vec<(f64, f64)> = Vec::new();
            for v in &variants {
                let set = if v.augment {
                    let kind = self.cfg.variant_oracle(v);
                    if !adv.contains_key(&kind) {
                        let clean_img = {
                            let n = inv_set.len();
                            let lim = if self.cfg.attack_limit == 0 { n } else { self.cfg.attack_limit.min(n) };
                            inv_set.images.select(&(0..lim).collect::<Vec<_>>())
                        };
                        let o: &dyn QueryOracle = match kind {
                            OracleKind::Target => &oracle,
                            OracleKind::Shadow => &shadow,
                        };
                        let (a, curve) = run_attack(kind, o, &clean_img, &self.cfg, eps, rounds, seed ^ 3)?;
                        if let Some(last) = curve.last() {
                            counters.insert(format!("{tag}_{}_asr", oracle_name(kind)), last.summary.asr);
                        }
                        adv.insert(kind, a);
                    }
                    build_training_set(&inv_set, adv.get(&kind), &AugmentPolicy::default())?
                } else {
                    build_training_set(&inv_set, None, &AugmentPolicy::default())?
                };
                let (mut nr, mut rb) = (Vec::new(), Vec::new());
                for r in 0..self.cfg.inversion.repeats {
                    let (inv, _, _) = fit_inversion(&self.cfg, v, &set, &shadow, seed ^ (16 + r as u64))?;
                    let rec = reconstruct(&inv, &sup)?;
                    if r == 0 {
                        util::save_grid(&gdir.join(format!("recon-{}.png", v.name)), &head(&rec, GRID), 8)?;
                    }
                    nr.push(attack_accuracy(&rec, &evalset.labels, &nr_eval)?);
                    rb.push(attack_accuracy(&rec, &evalset.labels, &rob_eval)?);
                }
                let pair = (util::mean(&nr), util::mean(&rb));
                let mut m = MetricsRecord {
                    run_id: self.run_id(),
                    config_hash: self.config_hash.clone(),
                    variant: format!("defense:{gamma}:{}", v.name),
                    params: variant_params(&self.cfg, v),
                    ..Default::default()
                };
                m.params.insert("gamma".into(), gamma.to_string());
                m.attack_accuracy.insert("nr".into(), pair.0);
                m.attack_accuracy.insert("rob".into(), pair.1);
                m.extra.insert("std_acc".into(), std_acc);
                m.extra.insert("rob_acc".into(), rob_acc);
                records.push(m);
                accs.push(pair);
            }
            points.push(DefensePoint {
                gamma: gamma.to_string().parse().unwrap_or(gamma as f64),
                std_acc,
                rob_acc,
                nr_base: accs[0].0,
                rob_base: accs[0].1,
                nr_ours: accs[1].0,
                rob_ours: accs[1].1,
            });
        }
        write_defense_curve(&self.dir.join("defense/curve.csv"), &points)?;
        let path = self.dir.join("metrics.jsonl");
        let keep: Vec<MetricsRecord> = if path.exists() {
            read_metrics(&path)?.into_iter().filter(|r| !r.variant.starts_with("defense:")).collect()
        } else {
            Vec::new()
        };
        if path.exists() {
            fs::remove_file(&path)?;
        }
        for r in keep.iter().chain(&records) {
            append_metrics(&path, r)?;
        }
        Ok((vec![rel("defense/curve.csv")], counters))
    }
}

fn def_eps(def: &crate::config::DefenseSection, cfg: &RunConfig) -> f32 {
    def.epsilon.unwrap_or(cfg.attack.epsilon)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct InversionSidecar {
    variant: VariantConfig,
    repeat: usize,
    seconds: f64,
    log: InversionLog,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConsistencyCsvRow {
    pub data: String,
    pub noise: f64,
    pub k: usize,
    pub consistency: f64,
    #[serde(default)]
    pub exact: f64,
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn evaluator_name(i: usize, e: &ModelConfig) -> String {
    format!("eval-{i}-{}", e.arch)
}

fn oracle_name(k: OracleKind) -> &'static str {
    match k {
        OracleKind::Target => "target",
        OracleKind::Shadow => "shadow",
    }
}

fn head(t: &Tensor, n: usize) -> Tensor {
    t.select(&(0..n.min(t.batch())).collect::<Vec<_>>())
}

fn variant_params(cfg: &RunConfig, v: &VariantConfig) -> BTreeMap<String, String> {
    let mut p = BTreeMap::new();
    p.insert("lambda".into(), v.lambda.to_string());
    p.insert("augment".into(), v.augment.to_string());
    p.insert("recon_metric".into(), format!("{:?}", cfg.variant_metric(v)).to_lowercase());
    p.insert("target".into(), cfg.target.arch.to_string());
    p.insert("shadow".into(), cfg.shadow.model.arch.to_string());
    if v.augment {
        p.insert("query_oracle".into(), oracle_name(cfg.variant_oracle(v)).into());
        p.insert("k".into(), cfg.attack.k.to_string());
        p.insert("epsilon".into(), cfg.attack.epsilon.to_string());
        p.insert("max_rounds".into(), cfg.attack.max_rounds.to_string());
    }
    p
}

/// Soft labels for the shadow set, the held-out set and the inversion set.
fn harvest(
    oracle: &dyn QueryOracle,
    sets: &PublicSets,
    fp: &str,
    cache: Option<&Path>,
) -> Result<(DistillSet, DistillSet, DistillSet)> {
    let (shadow, _) = harvest_soft_labels(oracle, &sets.shadow.images, fp, cache, 512)?;
    let (held, _) = harvest_soft_labels(oracle, &sets.held.images, fp, cache, 512)?;
    let (inv, _) = harvest_soft_labels(oracle, &sets.inversion.images, fp, cache, 512)?;
    Ok((shadow, held, inv))
}

fn fit_shadow(
    cfg: &RunConfig,
    shape: ModelShape,
    train: &DistillSet,
    held: &DistillSet,
    seed: u64,
) -> Result<(ModelHandle, ShadowReport)> {
    let s = &cfg.shadow;
    let mut m = build_model(s.model.arch, shape, s.model.width, None, seed)?;
    let rep = train_shadow(&mut m, train, Some(held), &s.model.train, s.temperature, seed)?;
    log::info!("shadow agreement {:.4}", rep.agreement);
    Ok((m, rep))
}

fn run_attack(
    kind: OracleKind,
    oracle: &dyn QueryOracle,
    xs: &Tensor,
    cfg: &RunConfig,
    epsilon: f32,
    max_rounds: usize,
    seed: u64,
) -> Result<(AdversarialSet, Vec<BudgetPoint>)> {
    let params = SimbaParams { epsilon, k: cfg.attack.k, max_rounds, direction_space: cfg.attack.direction_space };
    let mut budgets: Vec<usize> = cfg.attack.all_budgets().into_iter().filter(|&b| b <= max_rounds).collect();
    if budgets.last() != Some(&max_rounds) {
        budgets.push(max_rounds);
    }
    let (finals, snaps) = simba_batch_snapshots(oracle, xs, &params, seed, cfg.attack.workers, &budgets)?;
    let curve = budgets
        .iter()
        .zip(&snaps)
        .map(|(&b, s)| BudgetPoint { oracle: kind, max_rounds: b, summary: summarize(s) })
        .collect();
    Ok((AdversarialSet::from_traces(xs, &finals)?, curve))
}

fn fit_inversion(
    cfg: &RunConfig,
    v: &VariantConfig,
    set: &TrainingSet,
    shadow: &ModelHandle,
    seed: u64,
) -> Result<(ModelHandle, InversionLog, f64)> {
    let classes = set.supervision.shape()[1];
    let image = set.images.shape()[1..].to_vec();
    let mut inv = build_model(
        crate::modelzoo::ArchId::InversionDecoder,
        ModelShape::Decoder { classes, image },
        cfg.inversion.width,
        None,
        seed,
    )?;
    let loss = InversionLossConfig { lambda: v.lambda, recon_metric: cfg.variant_metric(v) };
    let t = Instant::now();
    let log = train_inversion(&mut inv, set, Some(shadow), &loss, &cfg.inversion.train, seed, |_, _| Ok(()))?;
    Ok((inv, log, t.elapsed().as_secs_f64()))
}

fn js<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).unwrap_or_default()
}
