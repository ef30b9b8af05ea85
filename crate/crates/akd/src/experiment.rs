//! Multi-seed experiment runs, tradeoff sweeps and defense comparisons.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::time::Instant;

use akd_core::audit::{proxy_leakage_auc, AuditOutcome};
use akd_core::data::{build_attack_set, generate_synthetic_task, make_splits, AttackEvalSet, DatasetSplits};
use akd_core::distill::{run_distillation, DistillEpoch};
use akd_core::dpsgd::{train_dpsgd, DpConfig};
use akd_core::metrics::{
    calibrate_kid_max, generalization_gap, gauss_defense, loss_histogram, nkid, translate_all, LossHistogram,
    RandomConvExtractor,
};
use akd_core::mia::{attack_scores_with, auc_roc, AttackRecord, RocResult};
use akd_core::stats::MeanStd;
use akd_core::train::{train_regular, EpochStats};
use akd_core::{GeneratorModel, ImageTensor, RngState, Translator};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{params_digest, save_generator, Dtype};
use crate::config::{DatasetConfig, Defense, ExperimentConfig, SCHEMA_VERSION};
use crate::dataset::load_dataset;
use crate::error::{io, Error, Result};

/// Metric names carried in [`ExperimentReport::aggregate`].
pub const METRICS: [&str; 6] = ["auc", "nkid", "kid_raw", "gap", "overlap", "proxy_auc"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub auc: f64,
    pub nkid: f64,
    pub kid_raw: f64,
    pub kid_max: f64,
    pub gap: f64,
    pub overlap: f64,
    pub mean_member_score: f64,
    pub mean_nonmember_score: f64,
    /// Present for distillation defenses only.
    pub proxy_audit: Option<AuditOutcome>,
    pub proxy_label_reads: Option<usize>,
    pub teacher_queries: Option<usize>,
    pub teacher_digest: String,
    pub deployed_digest: Option<String>,
    pub histogram: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum SeedOutcome {
    Ok(SeedMetrics),
    Failed { stage: String, error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub index: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub outcome: SeedOutcome,
}

impl SeedRecord {
    pub fn metrics(&self) -> Option<&SeedMetrics> {
        match &self.outcome {
            SeedOutcome::Ok(m) => Some(m),
            SeedOutcome::Failed { .. } => None,
        }
    }

    fn metric(&self, name: &str) -> Option<f64> {
        let m = self.metrics()?;
        Some(match name {
            "auc" => m.auc,
            "nkid" => m.nkid,
            "kid_raw" => m.kid_raw,
            "gap" => m.gap,
            "overlap" => m.overlap,
            "proxy_auc" => return m.proxy_audit.as_ref().and_then(AuditOutcome::auc),
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub versions: BTreeMap<String, String>,
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedRecord>,
    /// Mean and sample std over successful seeds; metrics without any value
    /// are left out.
    pub aggregate: BTreeMap<String, MeanStd>,
    pub n_ok: usize,
    pub n_failed: usize,
}

impl ExperimentReport {
    pub fn values(&self, metric: &str) -> Vec<f64> {
        self.seeds.iter().filter_map(|s| s.metric(metric)).collect()
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.aggregate.get(metric).map(|m| m.mean)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per seed.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["index", "seed", "status", "auc", "nkid", "kid_raw", "gap", "overlap", "proxy_auc"])?;
        for s in &self.seeds {
            let mut row = vec![s.index.to_string(), s.seed.to_string()];
            row.push(if s.metrics().is_some() { "ok".into() } else { "failed".into() });
            for m in METRICS {
                row.push(s.metric(m).map(|v| v.to_string()).unwrap_or_default());
            }
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn aggregate(seeds: &[SeedRecord]) -> BTreeMap<String, MeanStd> {
    let mut out = BTreeMap::new();
    for m in METRICS {
        let values: Vec<f64> = seeds.iter().filter_map(|s| s.metric(m)).collect();
        if !values.is_empty() {
            out.insert(m.to_string(), MeanStd::of(&values));
        }
    }
    out
}

/// Wall-clock seconds per seed and stage, kept out of the report so that the
/// report stays byte-stable.
#[derive(Clone, Debug, Default, Serialize)]
pub struct Timing {
    pub seeds: Vec<BTreeMap<&'static str, f64>>,
    pub total: f64,
}

struct Teacher {
    model: GeneratorModel,
    log: Vec<EpochStats>,
}

struct StageError {
    stage: &'static str,
    error: Error,
}

trait Stage<T> {
    fn stage(self, name: &'static str) -> std::result::Result<T, StageError>;
}

impl<T, E: Into<Error>> Stage<T> for std::result::Result<T, E> {
    fn stage(self, name: &'static str) -> std::result::Result<T, StageError> {
        self.map_err(|e| StageError { stage: name, error: e.into() })
    }
}

fn xs(samples: &[akd_core::data::PairedSample]) -> Vec<ImageTensor> {
    samples.iter().map(|s| s.x().clone()).collect()
}

fn ys(samples: &[akd_core::data::PairedSample]) -> Result<Vec<ImageTensor>> {
    samples
        .iter()
        .map(|s| s.y().cloned().ok_or_else(|| Error::Config(format!("sample `{}` has no ground truth", s.id()))))
        .collect()
}

fn digest_hex(g: &GeneratorModel) -> String {
    format!("{:016x}", params_digest(&g.params))
}

/// Runs experiments, reusing trained teachers across runs that share the
/// dataset, architecture, teacher settings and seed.
#[derive(Default)]
pub struct Runner {
    teachers: HashMap<String, Teacher>,
    /// Print per-seed progress to stderr.
    pub verbose: bool,
}

impl Runner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cached_teachers(&self) -> usize {
        self.teachers.len()
    }

    fn splits(&self, cfg: &ExperimentConfig, k: usize) -> Result<DatasetSplits> {
        match &cfg.dataset {
            DatasetConfig::Synthetic(s) => {
                let seed = s.seed.wrapping_add(k as u64);
                let n = s.n_train + s.n_proxy + s.n_test;
                let pool = generate_synthetic_task(seed, n, s.image_size, s.image_size)?;
                Ok(make_splits(&pool, s.n_train, s.n_proxy, s.n_test, seed)?)
            }
            DatasetConfig::Folder { path } => load_dataset(path),
        }
    }

    fn teacher(&mut self, cfg: &ExperimentConfig, k: usize, splits: &DatasetSplits) -> Result<&Teacher> {
        let dp: Option<&DpConfig> = match &cfg.defense {
            Defense::DpSgd(dp) => Some(dp),
            _ => None,
        };
        let key = serde_json::to_string(&(&cfg.dataset, &cfg.arch, &cfg.teacher, k, dp))?;
        if !self.teachers.contains_key(&key) {
            let tcfg = akd_core::train::TrainConfig { seed: cfg.run_seed(k), ..cfg.teacher.clone() };
            let out = match dp {
                Some(dp) => train_dpsgd(splits, &cfg.arch, &tcfg, dp)?,
                None => train_regular(splits, &cfg.arch, &tcfg)?,
            };
            self.teachers.insert(key.clone(), Teacher { model: out.generator, log: out.log });
        }
        Ok(&self.teachers[&key])
    }

    fn run_seed(
        &mut self,
        cfg: &ExperimentConfig,
        k: usize,
        out: Option<&Path>,
        timing: &mut BTreeMap<&'static str, f64>,
    ) -> std::result::Result<SeedMetrics, StageError> {
        let seed = cfg.run_seed(k);
        let mut clock = Instant::now();
        let mut lap = |name: &'static str, timing: &mut BTreeMap<&'static str, f64>| {
            timing.insert(name, clock.elapsed().as_secs_f64());
            clock = Instant::now();
        };
        let splits = self.splits(cfg, k).stage("data")?;
        lap("data", timing);
        let teacher = self.teacher(cfg, k, &splits).stage("teacher")?;
        let teacher_model = teacher.model.clone();
        let teacher_log = teacher.log.clone();
        lap("teacher", timing);

        let mut student = None;
        let mut label_reads = None;
        let mut queries = None;
        let mut distill_log: Vec<DistillEpoch> = Vec::new();
        if let Some(dcfg) = cfg.defense.distill() {
            let dcfg = akd_core::distill::DistillConfig { seed: dcfg.seed.wrapping_add(k as u64), ..dcfg };
            let arch = dcfg.student_arch.clone().unwrap_or_else(|| cfg.arch.clone());
            let reads = |s: &DatasetSplits| s.proxy.iter().map(|p| p.label_reads()).sum::<usize>();
            let before = reads(&splits);
            let outcome = run_distillation(&teacher_model, &splits.proxy, &arch, &dcfg).stage("distill")?;
            label_reads = Some(reads(&splits) - before);
            queries = Some(outcome.teacher_queries);
            distill_log = outcome.log;
            student = Some(outcome.student);
            lap("distill", timing);
        }

        let deployed: Box<dyn Translator + '_> = match (&cfg.defense, &student) {
            (_, Some(s)) => Box::new(s),
            (Defense::Gauss { sigma }, None) => Box::new(gauss_defense(&teacher_model, *sigma).stage("defense")?),
            _ => Box::new(&teacher_model),
        };

        let set: AttackEvalSet = build_attack_set(&splits, seed).stage("attack")?;
        let records = attack_scores_with(deployed.as_ref(), &set, seed, cfg.attack.n_draws).stage("attack")?;
        let roc = auc_roc(&records).stage("attack")?;
        lap("attack", timing);

        let (metrics, hist) = self.utility(cfg, &splits, &set, deployed.as_ref(), &records, seed).stage("metrics")?;
        let proxy_audit = match &student {
            Some(s) => Some(proxy_leakage_auc(s, &splits, seed).stage("proxy_audit")?),
            None => None,
        };
        lap("metrics", timing);

        let hist_name = format!("hist_{seed}.csv");
        if let Some(dir) = out {
            write_seed_files(dir, seed, &hist, &records, &roc, &teacher_model, &teacher_log, student.as_ref(), &distill_log)
                .stage("output")?;
        }
        let member: Vec<f64> = records.iter().filter(|r| r.is_member).map(|r| r.score).collect();
        let nonmember: Vec<f64> = records.iter().filter(|r| !r.is_member).map(|r| r.score).collect();
        Ok(SeedMetrics {
            auc: roc.auc,
            nkid: metrics.0,
            kid_raw: metrics.1,
            kid_max: metrics.2,
            gap: metrics.3,
            overlap: hist.overlap,
            mean_member_score: akd_core::stats::mean(&member),
            mean_nonmember_score: akd_core::stats::mean(&nonmember),
            proxy_audit,
            proxy_label_reads: label_reads,
            teacher_queries: queries,
            teacher_digest: digest_hex(&teacher_model),
            deployed_digest: student.as_ref().map(digest_hex),
            histogram: hist_name,
        })
    }

    /// (nkid, kid_raw, kid_max, gap) and the score histogram.
    fn utility(
        &self,
        cfg: &ExperimentConfig,
        splits: &DatasetSplits,
        set: &AttackEvalSet,
        g: &dyn Translator,
        records: &[AttackRecord],
        seed: u64,
    ) -> Result<((f64, f64, f64, f64), LossHistogram)> {
        let channels = splits.test.first().map(|s| s.x().channels()).unwrap_or(3);
        let fx = RandomConvExtractor::new(cfg.metrics.fx_seed, channels, cfg.metrics.fx_dim)?;
        let test_x = xs(&splits.test);
        let test_y = ys(&splits.test)?;
        let kid_max = calibrate_kid_max(&test_y, &fx)?;
        let root = RngState::new(seed).split(0x7574_696c);
        let outputs = translate_all(g, &test_x, &mut root.split(1))?;
        let nk = nkid(&outputs, &test_y, &fx, kid_max)?;
        let train_x = xs(&set.members);
        let train_y = ys(&set.members)?;
        let gap = generalization_gap(g, &train_x, &test_x, &train_y, &test_y, &fx, kid_max, &mut root.split(2))?;
        let member: Vec<f64> = records.iter().filter(|r| r.is_member).map(|r| r.score).collect();
        let nonmember: Vec<f64> = records.iter().filter(|r| !r.is_member).map(|r| r.score).collect();
        let hist = loss_histogram(&member, &nonmember, cfg.metrics.n_bins)?;
        Ok(((nk.nkid, nk.kid.kid_raw, kid_max, gap), hist))
    }

    /// Runs every seed of `cfg`. With `out` set, writes `report.json`,
    /// `timing.json`, per-seed CSVs and checkpoints there.
    pub fn run(&mut self, cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentReport> {
        cfg.validate()?;
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(io(dir))?;
        }
        let start = Instant::now();
        let mut timing = Timing::default();
        let mut seeds = Vec::with_capacity(cfg.n_seeds);
        for k in 0..cfg.n_seeds {
            let mut t = BTreeMap::new();
            let outcome = match self.run_seed(cfg, k, out, &mut t) {
                Ok(m) => SeedOutcome::Ok(m),
                Err(e) => SeedOutcome::Failed { stage: e.stage.to_string(), error: e.error.to_string() },
            };
            if self.verbose {
                match &outcome {
                    SeedOutcome::Ok(m) => eprintln!(
                        "[{}] seed {}: auc {:.3} nkid {:.2} gap {:.2} overlap {:.3}",
                        cfg.defense,
                        cfg.run_seed(k),
                        m.auc,
                        m.nkid,
                        m.gap,
                        m.overlap
                    ),
                    SeedOutcome::Failed { stage, error } => {
                        eprintln!("[{}] seed {} failed in {stage}: {error}", cfg.defense, cfg.run_seed(k))
                    }
                }
            }
            seeds.push(SeedRecord { index: k, seed: cfg.run_seed(k), outcome });
            timing.seeds.push(t);
        }
        timing.total = start.elapsed().as_secs_f64();
        let n_ok = seeds.iter().filter(|s| s.metrics().is_some()).count();
        let report = ExperimentReport {
            schema_version: SCHEMA_VERSION,
            versions: BTreeMap::from([("akd".to_string(), env!("CARGO_PKG_VERSION").to_string())]),
            config: cfg.clone(),
            aggregate: aggregate(&seeds),
            n_ok,
            n_failed: seeds.len() - n_ok,
            seeds,
        };
        if let Some(dir) = out {
            let p = dir.join("report.json");
            fs::write(&p, report.to_json()?).map_err(io(&p))?;
            let p = dir.join("timing.json");
            fs::write(&p, serde_json::to_string_pretty(&timing)?).map_err(io(&p))?;
        }
        Ok(report)
    }
}

#[derive(Serialize)]
struct HistRow {
    bin_left: f64,
    bin_right: f64,
    member_p: f64,
    nonmember_p: f64,
}

#[derive(Serialize)]
struct ScoreRow<'a> {
    sample_id: &'a str,
    score: f64,
    is_member: bool,
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io(path))
}

pub fn write_histogram_csv(path: &Path, h: &LossHistogram) -> Result<()> {
    write_csv(
        path,
        (0..h.member_p.len()).map(|i| HistRow {
            bin_left: h.edges[i],
            bin_right: h.edges[i + 1],
            member_p: h.member_p[i],
            nonmember_p: h.nonmember_p[i],
        }),
    )
}

pub fn write_scores_csv(path: &Path, records: &[AttackRecord]) -> Result<()> {
    write_csv(
        path,
        records.iter().map(|r| ScoreRow { sample_id: &r.sample_id, score: r.score, is_member: r.is_member }),
    )
}

#[allow(clippy::too_many_arguments)]
fn write_seed_files(
    dir: &Path,
    seed: u64,
    hist: &LossHistogram,
    records: &[AttackRecord],
    roc: &RocResult,
    teacher: &GeneratorModel,
    teacher_log: &[EpochStats],
    student: Option<&GeneratorModel>,
    distill_log: &[DistillEpoch],
) -> Result<()> {
    write_histogram_csv(&dir.join(format!("hist_{seed}.csv")), hist)?;
    write_scores_csv(&dir.join(format!("scores_{seed}.csv")), records)?;
    let p = dir.join(format!("roc_{seed}.json"));
    fs::write(&p, serde_json::to_string(roc)?).map_err(io(&p))?;
    let ckpt = dir.join("ckpt").join(seed.to_string());
    save_generator(teacher, &ckpt.join("teacher"), Dtype::Float64)?;
    fs::create_dir_all(&ckpt).map_err(io(&ckpt))?;
    let p = ckpt.join("teacher_log.csv");
    let mut w = csv::Writer::from_path(&p)?;
    w.write_record(["epoch", "d_loss", "g_loss", "train_l1"])?;
    for e in teacher_log {
        w.write_record([e.epoch.to_string(), e.d_loss.to_string(), e.g_loss.to_string(), e.l1.to_string()])?;
    }
    w.flush().map_err(io(&p))?;
    if let Some(s) = student {
        save_generator(s, &ckpt.join("student"), Dtype::Float64)?;
        write_csv(&ckpt.join("distill_log.csv"), distill_log)?;
    }
    Ok(())
}

pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentReport> {
    Runner::new().run(cfg, out)
}

/// What a sweep varies.
#[derive(Clone, Debug, PartialEq)]
pub enum Knob {
    /// Noise scale of the base config's gauss or dp_sgd defense.
    Sigma(Vec<f64>),
    Defense(Vec<Defense>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub label: String,
    pub sigma: Option<f64>,
    pub mean_auc: Option<f64>,
    pub mean_nkid: Option<f64>,
    pub n_ok: usize,
    pub error: Option<String>,
}

fn with_sigma(base: &ExperimentConfig, sigma: f64) -> Result<ExperimentConfig> {
    let defense = match &base.defense {
        Defense::Gauss { .. } => Defense::Gauss { sigma },
        Defense::DpSgd(dp) => Defense::DpSgd(DpConfig { sigma, ..*dp }),
        other => {
            return Err(Error::Config(format!("a sigma sweep needs a gauss or dp_sgd defense, not `{}`", other.name())))
        }
    };
    Ok(ExperimentConfig { defense, ..base.clone() })
}

/// One averaged (auc, nkid) point per knob value. Per-point failures are
/// recorded and the sweep continues.
pub fn run_tradeoff_sweep(
    runner: &mut Runner,
    base: &ExperimentConfig,
    knob: &Knob,
    out: Option<&Path>,
) -> Result<Vec<TradeoffPoint>> {
    let configs: Vec<(String, Option<f64>, Result<ExperimentConfig>)> = match knob {
        Knob::Sigma(values) => {
            if !matches!(base.defense, Defense::Gauss { .. } | Defense::DpSgd(_)) {
                return Err(Error::Config("a sigma sweep needs a gauss or dp_sgd defense".into()));
            }
            values.iter().map(|&s| (format!("{}", s), Some(s), with_sigma(base, s))).collect()
        }
        Knob::Defense(list) => list
            .iter()
            .map(|d| (d.to_string(), None, Ok(ExperimentConfig { defense: d.clone(), ..base.clone() })))
            .collect(),
    };
    let mut points = Vec::with_capacity(configs.len());
    for (label, sigma, cfg) in configs {
        let result = cfg.and_then(|c| runner.run(&c, None));
        points.push(match result {
            Ok(r) => TradeoffPoint {
                label,
                sigma,
                mean_auc: r.mean("auc"),
                mean_nkid: r.mean("nkid"),
                n_ok: r.n_ok,
                error: None,
            },
            Err(e) => TradeoffPoint { label, sigma, mean_auc: None, mean_nkid: None, n_ok: 0, error: Some(e.to_string()) },
        });
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io(dir))?;
        write_csv(&dir.join("tradeoff.csv"), &points)?;
    }
    Ok(points)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub defense: String,
    pub auc: Option<MeanStd>,
    pub nkid: Option<MeanStd>,
    pub n_ok: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AkdVsDmp {
    pub akd_nkid: f64,
    pub dmp_nkid: f64,
    pub auc_difference: f64,
    pub akd_better_utility: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Sorted by mean auc, then mean nkid.
    pub rows: Vec<ComparisonRow>,
    pub akd_vs_dmp: Option<AkdVsDmp>,
}

/// Runs each config and ranks the defenses. All configs must share the
/// dataset, architecture, teacher and seed settings.
pub fn compare_defenses(runner: &mut Runner, configs: &[ExperimentConfig]) -> Result<Comparison> {
    let first = configs.first().ok_or_else(|| Error::Config("nothing to compare".into()))?;
    for c in configs {
        if c.dataset != first.dataset || c.arch != first.arch || c.teacher != first.teacher || c.n_seeds != first.n_seeds {
            return Err(Error::Config(
                "compared configs must share the dataset, arch, teacher and n_seeds blocks".into(),
            ));
        }
    }
    let mut rows = Vec::with_capacity(configs.len());
    let mut by_name: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for c in configs {
        let r = runner.run(c, None)?;
        let auc = r.aggregate.get("auc").copied();
        let nkid = r.aggregate.get("nkid").copied();
        if let (Some(a), Some(n)) = (auc, nkid) {
            by_name.entry(c.defense.name()).or_insert((a.mean, n.mean));
        }
        rows.push(ComparisonRow { defense: c.defense.to_string(), auc, nkid, n_ok: r.n_ok });
    }
    let key = |r: &ComparisonRow| (r.auc.map_or(f64::INFINITY, |m| m.mean), r.nkid.map_or(f64::INFINITY, |m| m.mean));
    rows.sort_by(|a, b| key(a).partial_cmp(&key(b)).unwrap_or(std::cmp::Ordering::Equal));
    let akd_vs_dmp = match (by_name.get("akd"), by_name.get("dmp")) {
        (Some(&(akd_auc, akd_nkid)), Some(&(dmp_auc, dmp_nkid))) => Some(AkdVsDmp {
            akd_nkid,
            dmp_nkid,
            auc_difference: akd_auc - dmp_auc,
            akd_better_utility: akd_nkid < dmp_nkid,
        }),
        _ => None,
    };
    Ok(Comparison { rows, akd_vs_dmp })
}
