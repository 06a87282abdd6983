//! Pipeline orchestration: each command reads and extends a run directory
//! containing a config snapshot, a manifest, checkpoints, and metric CSVs.
//!
//! All randomness flows from the master seed through fixed ChaCha streams:
//! 0 teacher init, 1 teacher adversarial training, 2 supernet init,
//! 3 search Gumbel noise, 4 derived student init, 5 augmentation.
//! Evaluation derives per-attack, per-batch generators internally. Batch
//! order depends only on (seed, epoch). Everything downstream is therefore
//! a pure function of config plus seed, which is what makes re-runs
//! byte-identical.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{evaluate, AttackConfig, AttackKind, EvalRow, EvalSpec};
use crate::config::{DataConfig, RunConfig};
use crate::data::{augment, ingest_cifar, load_subset, save_dataset, synth_dataset, Dataset};
use crate::error::{Error, Result};
use crate::gumbel::TauSchedule;
use crate::nn::{count_macs, BlockSpec, Network, SuperNet};
use crate::optim::LrSchedule;
use crate::report::{
    attention_images, summary_csv, sweep_csv, sweep_svg, tutor_histogram_csv, write_pgm,
    SummaryRow, SweepPoint,
};
use crate::search::{
    adversarial_train_teacher, derive, ArchDescription, ArmKind, SearchConfig, SearchState,
    TrainConfig, TrainState,
};
use crate::snapshot::{load_network, load_supernet, save_network, save_supernet};

/// Element type for the whole pipeline; f32 halves the arithmetic cost and
/// every loss term stays far above its precision floor at desk scale.
pub type Prec = f32;

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const TEACHER_METRICS: &str = "teacher_metrics.csv";
pub const SEARCH_CKPT: &str = "search.ckpt";
pub const SEARCH_METRICS: &str = "search_metrics.csv";
pub const ARCH_FILE: &str = "arch.toml";
pub const STUDENT_CKPT: &str = "student.ckpt";
pub const TRAIN_METRICS: &str = "train_metrics.csv";
pub const EVAL_CSV: &str = "eval.csv";
pub const REPORT_DIR: &str = "report";

/// Records which phases have produced which files, all relative to the
/// run directory. Empty string means the phase has not run.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunManifest {
    pub run_id: String,
    pub seed: u64,
    pub arm: String,
    pub config: String,
    pub teacher: String,
    pub teacher_metrics: String,
    pub search_checkpoint: String,
    pub search_metrics: String,
    pub arch: String,
    pub student: String,
    pub train_metrics: String,
    pub eval: String,
    pub report: Vec<String>,
}

impl RunManifest {
    fn fresh(cfg: &RunConfig) -> Self {
        RunManifest {
            run_id: cfg.run_id.clone(),
            seed: cfg.seed,
            arm: cfg.search.arm.clone(),
            config: CONFIG_FILE.into(),
            ..Default::default()
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::PhaseOrder {
                need: "search",
                detail: format!("no manifest in {}", dir.display()),
            });
        }
        let text = fs::read_to_string(&path)?;
        toml::from_str(&text).map_err(|e| Error::MalformedFile {
            path: path.display().to_string(),
            offset: 0,
            reason: format!("manifest parse: {e}"),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Config {
            message: format!("manifest serialize: {e}"),
        })?;
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    /// Every referenced artifact must exist on disk.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        let mut all: Vec<&str> = vec![
            &self.config,
            &self.teacher,
            &self.teacher_metrics,
            &self.search_checkpoint,
            &self.search_metrics,
            &self.arch,
            &self.student,
            &self.train_metrics,
            &self.eval,
        ];
        all.extend(self.report.iter().map(String::as_str));
        for rel in all {
            if !rel.is_empty() && !dir.join(rel).exists() {
                return Err(Error::MissingArtifact {
                    what: "manifest entry".into(),
                    path: dir.join(rel).display().to_string(),
                });
            }
        }
        Ok(())
    }

    /// Path of a phase output, or a phase-order diagnostic naming the
    /// command that should have produced it.
    fn require(&self, dir: &Path, rel: &str, need: &'static str) -> Result<PathBuf> {
        if rel.is_empty() {
            return Err(Error::PhaseOrder {
                need,
                detail: format!("run `{need}` first on {}", dir.display()),
            });
        }
        let path = dir.join(rel);
        if !path.exists() {
            return Err(Error::MissingArtifact {
                what: "checkpoint".into(),
                path: path.display().to_string(),
            });
        }
        Ok(path)
    }
}

/// Commands re-run inside an existing run directory prefer its config
/// snapshot over the passed file, so a later phase can never silently
/// diverge from what the search phase recorded.
pub fn load_run_config(
    config_path: &Path,
    out: &Path,
    prefer_snapshot: bool,
    seed: Option<u64>,
    sets: &[String],
) -> Result<RunConfig> {
    let snapshot = out.join(CONFIG_FILE);
    let base = if prefer_snapshot && snapshot.exists() {
        RunConfig::load(&snapshot)?
    } else {
        RunConfig::load(config_path)?
    };
    let mut cfg = base.apply_overrides(sets)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn build_datasets(cfg: &RunConfig) -> Result<(Dataset<Prec>, Dataset<Prec>)> {
    let d = &cfg.data;
    match d.source.as_str() {
        "synth" => Ok((
            synth_dataset(d.classes, d.train_per_class, d.size, d.seed)?,
            synth_dataset(d.classes, d.test_per_class, d.size, d.seed + 1)?,
        )),
        "file" => Ok((
            load_subset(Path::new(&d.train_path), d.train_per_class)?,
            load_subset(Path::new(&d.test_path), d.test_per_class)?,
        )),
        other => Err(Error::Config {
            message: format!("unknown data source '{other}'"),
        }),
    }
}

fn augmented(ds: &Dataset<Prec>, d: &DataConfig, rng: &mut ChaCha8Rng) -> Result<Dataset<Prec>> {
    let images = augment(&ds.images, d.flip, d.crop_pad, rng);
    Dataset::new(images, ds.labels.clone(), ds.classes)
}

fn augment_enabled(d: &DataConfig) -> bool {
    d.flip || d.crop_pad > 0
}

struct MetricsWriter {
    w: std::io::BufWriter<fs::File>,
}

impl MetricsWriter {
    fn create(path: &Path, header: &str) -> Result<Self> {
        let mut w = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(w, "{header}")?;
        Ok(MetricsWriter { w })
    }

    fn row(&mut self, line: &str) -> Result<()> {
        writeln!(self.w, "{line}")?;
        self.w.flush()?;
        Ok(())
    }
}

fn teacher_spec(cfg: &RunConfig) -> Vec<BlockSpec> {
    cfg.teacher
        .channels
        .iter()
        .zip(&cfg.teacher.pool_after)
        .map(|(&channels, &pool_after)| BlockSpec {
            channels,
            pool_after,
        })
        .collect()
}

/// Load the teacher checkpoint if the run directory already has one
/// (ablations pre-train one per seed and share it across arms), otherwise
/// train it adversarially and save both checkpoint and loss trace.
fn ensure_teacher(
    cfg: &RunConfig,
    train: &Dataset<Prec>,
    ckpt: &Path,
    metrics: Option<&Path>,
) -> Result<Network<Prec>> {
    if ckpt.exists() {
        return load_network(ckpt);
    }
    let mut net = Network::build(
        train.channels(),
        cfg.data.classes,
        &teacher_spec(cfg),
        &mut stream_rng(cfg.seed, 0),
    );
    let tcfg = TrainConfig {
        schedule: LrSchedule::Step,
        lr: cfg.teacher.lr,
        momentum: 0.9,
        weight_decay: cfg.teacher.weight_decay,
        batch_size: cfg.teacher.batch_size,
        epochs: cfg.teacher.epochs,
        gamma_t: 0.0,
    };
    // Warmup reuses the adversarial trainer at epsilon 0, which is plain
    // clean training, then the adversarial phase starts from those weights.
    let mut attack_rng = stream_rng(cfg.seed, 1);
    let mut trace = Vec::new();
    if cfg.teacher.warmup > 0 {
        let wcfg = TrainConfig {
            epochs: cfg.teacher.warmup,
            ..tcfg
        };
        let warm = AttackConfig::pgd(0.0, cfg.teacher.steps);
        trace =
            adversarial_train_teacher(&mut net, train, &warm, &wcfg, cfg.seed, &mut attack_rng)?;
    }
    let acfg = AttackConfig::pgd(cfg.teacher.epsilon, cfg.teacher.steps);
    trace.extend(adversarial_train_teacher(
        &mut net,
        train,
        &acfg,
        &tcfg,
        cfg.seed,
        &mut attack_rng,
    )?);
    if let Some(path) = metrics {
        let mut csv = MetricsWriter::create(path, "epoch,loss")?;
        for (epoch, loss) in trace.iter().enumerate() {
            csv.row(&format!("{epoch},{loss}"))?;
        }
    }
    save_network(ckpt, &net)?;
    Ok(net)
}

pub fn cmd_search(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    cfg.save(&out.join(CONFIG_FILE))?;
    let arm = ArmKind::parse(&cfg.search.arm)?;
    let (train, test) = build_datasets(cfg)?;
    let mut manifest = RunManifest::fresh(cfg);

    let teacher = if arm.uses_teacher() {
        let ckpt = out.join(TEACHER_CKPT);
        let metrics = out.join(TEACHER_METRICS);
        let had_ckpt = ckpt.exists();
        let net = ensure_teacher(cfg, &train, &ckpt, Some(&metrics))?;
        manifest.teacher = TEACHER_CKPT.into();
        if !had_ckpt {
            manifest.teacher_metrics = TEACHER_METRICS.into();
        }
        println!(
            "teacher ready: {} layers, {} params",
            net.n_layers(),
            net.param_count()
        );
        Some(net)
    } else {
        None
    };

    let supernet = SuperNet::build(
        train.channels(),
        cfg.data.classes,
        &cfg.stage_specs(),
        &mut stream_rng(cfg.seed, 2),
    )?;
    let search_cfg = SearchConfig {
        arm,
        epochs: cfg.search.epochs,
        batch_size: cfg.search.batch_size,
        weight_lr: cfg.search.weight_lr,
        arch_lr: cfg.search.arch_lr,
        momentum: cfg.search.momentum,
        weight_decay: cfg.search.weight_decay,
        gamma_s: cfg.search.gamma_s,
        tau: TauSchedule {
            initial: cfg.search.tau_initial,
            decay: cfg.search.tau_decay,
        },
    };
    let mut state = SearchState::new(
        supernet,
        teacher,
        search_cfg,
        train.hw(),
        cfg.seed,
        stream_rng(cfg.seed, 3),
    )?;
    let mut csv = MetricsWriter::create(
        &out.join(SEARCH_METRICS),
        "epoch,tau,ce,kl,attn,n_f,loss,clean_acc",
    )?;
    let mut aug_rng = stream_rng(cfg.seed, 5);
    for _ in 0..cfg.search.epochs {
        let m = if augment_enabled(&cfg.data) {
            let aug = augmented(&train, &cfg.data, &mut aug_rng)?;
            state.run_epoch(&aug, &test)?
        } else {
            state.run_epoch(&train, &test)?
        };
        csv.row(&format!(
            "{},{},{},{},{},{},{},{}",
            m.epoch, m.tau, m.ce, m.kl, m.attn, m.n_f, m.loss, m.clean_acc
        ))?;
        println!(
            "search epoch={} tau={:.3} loss={:.4} clean_acc={:.3}",
            m.epoch, m.tau, m.loss, m.clean_acc
        );
    }
    save_supernet(&out.join(SEARCH_CKPT), &state.supernet, state.conn.as_ref())?;
    manifest.search_checkpoint = SEARCH_CKPT.into();
    manifest.search_metrics = SEARCH_METRICS.into();
    manifest.save(out)?;
    manifest.verify(out)?;
    Ok(manifest)
}

pub fn cmd_derive(cfg: &RunConfig, out: &Path) -> Result<ArchDescription> {
    let mut manifest = RunManifest::load(out)?;
    let ckpt = manifest.require(out, &manifest.search_checkpoint.clone(), "search")?;
    let (supernet, conn) = load_supernet::<Prec>(&ckpt)?;
    let (train, _) = build_datasets(cfg)?;
    let (arch, _) = derive(
        &supernet,
        conn.as_ref(),
        train.hw(),
        &mut stream_rng(cfg.seed, 4),
    );
    arch.validate(&supernet, conn.as_ref().map(|c| c.n_t()), train.hw())?;
    let text = toml::to_string_pretty(&arch).map_err(|e| Error::Config {
        message: format!("arch serialize: {e}"),
    })?;
    fs::write(out.join(ARCH_FILE), text)?;
    manifest.arch = ARCH_FILE.into();
    manifest.save(out)?;
    println!(
        "derived arch: channels={:?} tutors={:?} macs={}",
        arch.channels, arch.tutors, arch.macs
    );
    Ok(arch)
}

fn load_arch(out: &Path, manifest: &RunManifest) -> Result<ArchDescription> {
    let path = manifest.require(out, &manifest.arch, "derive")?;
    let text = fs::read_to_string(&path)?;
    toml::from_str(&text).map_err(|e| Error::MalformedFile {
        path: path.display().to_string(),
        offset: 0,
        reason: format!("arch parse: {e}"),
    })
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut manifest = RunManifest::load(out)?;
    let arch = load_arch(out, &manifest)?;
    let ckpt = manifest.require(out, &manifest.search_checkpoint.clone(), "search")?;
    let (supernet, conn) = load_supernet::<Prec>(&ckpt)?;
    let (train, test) = build_datasets(cfg)?;
    arch.validate(&supernet, conn.as_ref().map(|c| c.n_t()), train.hw())?;
    let arm = ArmKind::parse(&cfg.search.arm)?;
    let teacher = if arm.uses_teacher() {
        let path = manifest.require(out, &manifest.teacher.clone(), "search")?;
        Some(load_network::<Prec>(&path)?)
    } else {
        None
    };
    // Stream 4 matches cmd_derive, so the trained student starts from the
    // exact weights the derive step reported.
    let student = supernet.materialize(&arch.channels, &mut stream_rng(cfg.seed, 4));
    let tutors = if arm.uses_attention() {
        arch.tutors.clone()
    } else {
        Vec::new()
    };
    let mut tcfg = match cfg.train.profile.as_str() {
        "imagenet" => TrainConfig::imagenet_profile(cfg.train.epochs, cfg.train.batch_size),
        _ => TrainConfig::cifar_profile(cfg.train.epochs, cfg.train.batch_size),
    };
    tcfg.gamma_t = cfg.train.gamma_t;
    if cfg.train.lr > 0.0 {
        tcfg.lr = cfg.train.lr;
    }
    let mut state = TrainState::new(student, teacher, tutors, arm, tcfg, cfg.seed)?;
    let mut csv = MetricsWriter::create(
        &out.join(TRAIN_METRICS),
        "epoch,lr,ce,kl,attn,loss,clean_acc",
    )?;
    let mut aug_rng = stream_rng(cfg.seed, 5);
    for _ in 0..cfg.train.epochs {
        let m = if augment_enabled(&cfg.data) {
            let aug = augmented(&train, &cfg.data, &mut aug_rng)?;
            state.run_epoch(&aug, &test)?
        } else {
            state.run_epoch(&train, &test)?
        };
        csv.row(&format!(
            "{},{},{},{},{},{},{}",
            m.epoch, m.lr, m.ce, m.kl, m.attn, m.loss, m.clean_acc
        ))?;
        println!(
            "train epoch={} lr={:.4} loss={:.4} clean_acc={:.3}",
            m.epoch, m.lr, m.loss, m.clean_acc
        );
    }
    save_network(&out.join(STUDENT_CKPT), &state.student)?;
    manifest.student = STUDENT_CKPT.into();
    manifest.train_metrics = TRAIN_METRICS.into();
    manifest.save(out)?;
    manifest.verify(out)?;
    Ok(())
}

fn eval_specs(cfg: &RunConfig) -> Vec<EvalSpec> {
    let a = &cfg.attack;
    vec![
        EvalSpec::clean(),
        EvalSpec {
            kind: AttackKind::Fgsm,
            config: AttackConfig::fgsm(a.epsilon),
        },
        EvalSpec {
            kind: AttackKind::Pgd,
            config: AttackConfig::pgd(a.epsilon, a.steps),
        },
        EvalSpec {
            kind: AttackKind::MiFgsm,
            config: AttackConfig::mi_fgsm(a.epsilon, a.steps),
        },
    ]
}

pub fn cmd_attack(cfg: &RunConfig, out: &Path) -> Result<Vec<EvalRow>> {
    let mut manifest = RunManifest::load(out)?;
    let path = manifest.require(out, &manifest.student.clone(), "train")?;
    let student = load_network::<Prec>(&path)?;
    let (_, test) = build_datasets(cfg)?;
    let rows = evaluate(
        &student,
        &test,
        &eval_specs(cfg),
        cfg.attack.batch_size,
        cfg.seed,
    )?;
    let mut lines = vec!["model_id,attack,epsilon,steps,accuracy,n_samples".to_string()];
    for r in &rows {
        lines.push(format!(
            "{},{},{},{},{},{}",
            cfg.run_id, r.attack, r.epsilon, r.steps, r.accuracy, r.n
        ));
        println!(
            "attack {} eps={} acc={:.3}",
            r.attack, r.epsilon, r.accuracy
        );
    }
    crate::report::write_lines(&out.join(EVAL_CSV), &lines)?;
    manifest.eval = EVAL_CSV.into();
    manifest.save(out)?;
    manifest.verify(out)?;
    Ok(rows)
}

fn read_csv(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect())
}

fn eval_accuracy(rows: &[Vec<String>], attack: &str, path: &Path) -> Result<f64> {
    let row = rows
        .iter()
        .find(|r| r.len() >= 5 && r[1] == attack)
        .ok_or_else(|| Error::MalformedFile {
            path: path.display().to_string(),
            offset: 0,
            reason: format!("no '{attack}' row"),
        })?;
    row[4].parse().map_err(|_| Error::MalformedFile {
        path: path.display().to_string(),
        offset: 0,
        reason: format!("bad accuracy in '{attack}' row"),
    })
}

pub fn cmd_report(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let mut manifest = RunManifest::load(out)?;
    let student_path = manifest.require(out, &manifest.student.clone(), "train")?;
    let eval_path = manifest.require(out, &manifest.eval.clone(), "attack")?;
    let arch = load_arch(out, &manifest)?;
    let student = load_network::<Prec>(&student_path)?;
    let (_, test) = build_datasets(cfg)?;
    let dir = out.join(REPORT_DIR);
    fs::create_dir_all(&dir)?;
    let mut rel: Vec<String> = Vec::new();
    fn emit(dir: &Path, rel: &mut Vec<String>, name: &str) -> PathBuf {
        rel.push(format!("{REPORT_DIR}/{name}"));
        dir.join(name)
    }

    // Accuracy-vs-epsilon sweep under PGD.
    let specs: Vec<EvalSpec> = cfg
        .attack
        .sweep
        .iter()
        .map(|&e| EvalSpec {
            kind: AttackKind::Pgd,
            config: AttackConfig::pgd(e as f64 / 255.0, cfg.attack.steps),
        })
        .collect();
    let rows = evaluate(&student, &test, &specs, cfg.attack.batch_size, cfg.seed)?;
    let points: Vec<SweepPoint> = cfg
        .attack
        .sweep
        .iter()
        .zip(&rows)
        .map(|(&e, r)| SweepPoint {
            eps255: e,
            accuracy: r.accuracy,
        })
        .collect();
    let p = emit(&dir, &mut rel, "accuracy_vs_eps.csv");
    sweep_csv(&p, "pgd", cfg.attack.steps, &points)?;
    let p = emit(&dir, &mut rel, "accuracy_vs_eps.svg");
    sweep_svg(
        &p,
        &format!("{} PGD accuracy vs epsilon", cfg.run_id),
        &points,
    )?;

    // Attention maps of the first test image, student and teacher.
    let (image, _) = test.gather(&[0]);
    for (i, (h, w, vals)) in attention_images(&student, &image)?.iter().enumerate() {
        let p = emit(&dir, &mut rel, &format!("student_attn_l{i}.pgm"));
        write_pgm(&p, *h, *w, vals)?;
    }
    let teacher = if manifest.teacher.is_empty() {
        None
    } else {
        Some(load_network::<Prec>(&out.join(&manifest.teacher))?)
    };
    if let Some(t) = &teacher {
        for (i, (h, w, vals)) in attention_images(t, &image)?.iter().enumerate() {
            let p = emit(&dir, &mut rel, &format!("teacher_attn_l{i}.pgm"));
            write_pgm(&p, *h, *w, vals)?;
        }
    }

    // Tutor histogram over teacher layers.
    let n_t = teacher.as_ref().map(|t| t.n_layers()).unwrap_or(0);
    let p = emit(&dir, &mut rel, "tutor_histogram.csv");
    tutor_histogram_csv(&p, &arch.tutors, n_t)?;

    // Table-style summary with independent cost columns.
    let eval_rows = read_csv(&eval_path)?;
    let summary = SummaryRow {
        model_id: cfg.run_id.clone(),
        clean: eval_accuracy(&eval_rows, "clean", &eval_path)?,
        fgsm: eval_accuracy(&eval_rows, "fgsm", &eval_path)?,
        pgd: eval_accuracy(&eval_rows, "pgd", &eval_path)?,
        mi_fgsm: eval_accuracy(&eval_rows, "mi_fgsm", &eval_path)?,
        params: student.param_count(),
        macs: count_macs(&student, test.hw()),
    };
    let p = emit(&dir, &mut rel, "summary.csv");
    summary_csv(&p, &summary)?;

    let files: Vec<PathBuf> = rel.iter().map(|r| out.join(r)).collect();
    manifest.report = rel;
    manifest.save(out)?;
    manifest.verify(out)?;
    println!("report: {} files in {}", files.len(), dir.display());
    Ok(files)
}

/// One ablation result row; `pgd_max` is PGD accuracy at the largest
/// sweep budget.
#[derive(Clone, Debug)]
pub struct AblateRow {
    pub arm: &'static str,
    pub seed: u64,
    pub clean: f64,
    pub fgsm: f64,
    pub pgd: f64,
    pub mi_fgsm: f64,
    pub pgd_max: f64,
}

fn run_ablate_job(cfg: &RunConfig, out: &Path, arm: ArmKind, seed: u64) -> Result<AblateRow> {
    let dir = out.join(format!("{}_s{seed}", arm.name()));
    fs::create_dir_all(&dir)?;
    let mut rc = cfg.clone();
    rc.seed = seed;
    rc.search.arm = arm.name().into();
    rc.run_id = format!("{}_s{seed}", arm.name());
    if arm.uses_teacher() {
        let shared = out.join(format!("teacher_s{seed}.ckpt"));
        if shared.exists() && !dir.join(TEACHER_CKPT).exists() {
            fs::copy(&shared, dir.join(TEACHER_CKPT))?;
        }
    }
    cmd_search(&rc, &dir)?;
    cmd_derive(&rc, &dir)?;
    cmd_train(&rc, &dir)?;
    let rows = cmd_attack(&rc, &dir)?;
    let acc = |name: &str| {
        rows.iter()
            .find(|r| r.attack == name)
            .map(|r| r.accuracy)
            .unwrap_or(f64::NAN)
    };
    let eps_max = *rc.attack.sweep.iter().max().unwrap_or(&8);
    let student = load_network::<Prec>(&dir.join(STUDENT_CKPT))?;
    let (_, test) = build_datasets(&rc)?;
    let max_rows = evaluate(
        &student,
        &test,
        &[EvalSpec {
            kind: AttackKind::Pgd,
            config: AttackConfig::pgd(eps_max as f64 / 255.0, rc.attack.steps),
        }],
        rc.attack.batch_size,
        rc.seed,
    )?;
    Ok(AblateRow {
        arm: arm.name(),
        seed,
        clean: acc("clean"),
        fgsm: acc("fgsm"),
        pgd: acc("pgd"),
        mi_fgsm: acc("mi_fgsm"),
        pgd_max: max_rows[0].accuracy,
    })
}

/// Run all four arms over the configured seeds and write a comparison
/// CSV. Jobs are independent run directories; `threads` caps how many run
/// at once. Row order is fixed (arm-major, then seed) regardless of the
/// execution schedule.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path, threads: usize) -> Result<Vec<AblateRow>> {
    cfg.validate()?;
    if cfg.ablate.seeds.is_empty() {
        return Err(Error::Config {
            message: "ablate.seeds must not be empty".into(),
        });
    }
    fs::create_dir_all(out)?;
    let (train, _) = build_datasets(cfg)?;
    // One adversarially trained teacher per seed, shared by the three
    // teacher arms.
    for &seed in &cfg.ablate.seeds {
        let mut rc = cfg.clone();
        rc.seed = seed;
        let ckpt = out.join(format!("teacher_s{seed}.ckpt"));
        if !ckpt.exists() {
            println!("training shared teacher for seed {seed}");
            ensure_teacher(&rc, &train, &ckpt, None)?;
        }
    }
    let jobs: Vec<(ArmKind, u64)> = ArmKind::all()
        .into_iter()
        .flat_map(|arm| cfg.ablate.seeds.iter().map(move |&s| (arm, s)))
        .collect();
    let mut rows: Vec<AblateRow> = Vec::with_capacity(jobs.len());
    for wave in jobs.chunks(threads.max(1)) {
        let handles: Vec<_> = wave
            .iter()
            .map(|&(arm, seed)| {
                let cfg = cfg.clone();
                let out = out.to_path_buf();
                std::thread::spawn(move || run_ablate_job(&cfg, &out, arm, seed))
            })
            .collect();
        for h in handles {
            rows.push(h.join().map_err(|_| Error::Config {
                message: "ablation worker panicked".into(),
            })??);
        }
    }
    let eps_max = *cfg.attack.sweep.iter().max().unwrap_or(&8);
    let mut lines = vec![format!(
        "arm,seed,clean,fgsm,pgd,mi_fgsm,pgd_eps{eps_max}_255"
    )];
    for r in &rows {
        lines.push(format!(
            "{},{},{},{},{},{},{}",
            r.arm, r.seed, r.clean, r.fgsm, r.pgd, r.mi_fgsm, r.pgd_max
        ));
    }
    crate::report::write_lines(&out.join("ablation.csv"), &lines)?;
    for arm in ArmKind::all() {
        let sel: Vec<&AblateRow> = rows.iter().filter(|r| r.arm == arm.name()).collect();
        let mean =
            |f: fn(&AblateRow) -> f64| sel.iter().map(|r| f(r)).sum::<f64>() / sel.len() as f64;
        println!(
            "ablate {}: clean={:.3} pgd={:.3} pgd@{}={:.3} (mean over {} seeds)",
            arm.name(),
            mean(|r| r.clean),
            mean(|r| r.pgd),
            eps_max,
            mean(|r| r.pgd_max),
            sel.len()
        );
    }
    Ok(rows)
}

pub fn cmd_ingest(cfg: &RunConfig) -> Result<PathBuf> {
    if cfg.ingest.input.is_empty() || cfg.ingest.output.is_empty() {
        return Err(Error::Config {
            message: "ingest.input and ingest.output must be set".into(),
        });
    }
    let ds = ingest_cifar::<Prec>(
        Path::new(&cfg.ingest.input),
        cfg.ingest.per_class,
        cfg.ingest.size,
    )?;
    let out = PathBuf::from(&cfg.ingest.output);
    save_dataset(&ds, &out)?;
    println!(
        "ingested {} samples ({} classes, {}x{}) -> {}",
        ds.len(),
        ds.classes,
        ds.hw().0,
        ds.hw().1,
        out.display()
    );
    Ok(out)
}
