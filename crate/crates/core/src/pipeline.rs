//! The stages of a run, each reading its inputs from and writing its
//! artifacts to one output directory.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::eval::{
    ablation_suite, ablation_table, bench_attention, default_ablation_grid, finalization_gap, heuristic_conversion, AblationRow,
    EvalReport, QualityProbe, ScalingReport, ScoreStats,
};
use crate::config::RunConfig;
use crate::model::{load_checkpoint, save_checkpoint, Frozen, LayerKind, ToyTransformer};
use crate::teacher::train_teacher;
use crate::trajectory::{collect, TrajectorySet};
use crate::transfer::train;

pub const CONFIG_FILE: &str = "config.toml";
pub const TEACHER_FILE: &str = "teacher.ckpt";
pub const TEACHER_LOG: &str = "teacher_log.jsonl";
pub const TRAJECTORY_FILE: &str = "trajectories.bin";
pub const STUDENT_FILE: &str = "student.ckpt";
pub const TRANSFER_LOG: &str = "transfer_log.jsonl";
pub const FINALIZED_FILE: &str = "finalized.ckpt";
pub const SAMPLES_FILE: &str = "samples.json";
pub const REPORT_FILE: &str = "report.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const BENCH_FILE: &str = "bench.json";
pub const ABLATION_FILE: &str = "ablation.json";
pub const ABLATION_TABLE: &str = "ablation.txt";

/// Model precision of every stage.
pub type Precision = f32;

/// Independent seeds for the stages of one run.
fn stage_seed(seed: u64, stage: u64) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(stage.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

const TEACHER_STAGE: u64 = 1;
const COLLECT_STAGE: u64 = 2;
const TRANSFER_STAGE: u64 = 3;
const EVAL_STAGE: u64 = 4;
const BENCH_STAGE: u64 = 5;

/// An output directory and the config its artifacts are produced under.
#[derive(Clone, Debug)]
pub struct Run {
    pub config: RunConfig,
    pub dir: PathBuf,
}

/// Which model a stage reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelChoice {
    Teacher,
    Student,
    Finalized,
}

impl ModelChoice {
    fn file(self) -> &'static str {
        match self {
            ModelChoice::Teacher => TEACHER_FILE,
            ModelChoice::Student => STUDENT_FILE,
            ModelChoice::Finalized => FINALIZED_FILE,
        }
    }
}

impl std::str::FromStr for ModelChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(ModelChoice::Teacher),
            "student" => Ok(ModelChoice::Student),
            "finalized" => Ok(ModelChoice::Finalized),
            other => Err(Error::Config(format!(
                "unknown model `{other}` (expected teacher, student or finalized)"
            ))),
        }
    }
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_json_lines<V: Serialize>(path: &Path, values: &[V]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for v in values {
        serde_json::to_writer(&mut w, v).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct LossLine {
    step: usize,
    loss: f64,
}

#[derive(Serialize)]
struct SampleFile<'a> {
    model: &'a str,
    shape: &'a [usize],
    data: Vec<f32>,
}

impl Run {
    /// Creates `dir` if needed and records the resolved config in it.
    pub fn new(config: RunConfig, dir: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        fs::write(dir.join(CONFIG_FILE), config.to_toml())?;
        Ok(Self { config, dir })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    fn require(&self, file: &str) -> Result<PathBuf> {
        let p = self.path(file);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingInput(p))
        }
    }

    pub fn load_model(&self, which: ModelChoice) -> Result<ToyTransformer<Precision>> {
        let model = load_checkpoint(&self.require(which.file())?)?;
        if model.config() != &self.config.model() {
            return Err(Error::Config(format!(
                "{} was trained with a different model shape than the config",
                which.file()
            )));
        }
        Ok(model)
    }

    pub fn load_trajectories(&self) -> Result<TrajectorySet<Precision>> {
        TrajectorySet::load(&self.require(TRAJECTORY_FILE)?)
    }

    fn quality_probe(&self) -> Result<QualityProbe<Precision>> {
        let c = &self.config;
        Ok(QualityProbe::new(
            c.schedule()?,
            c.eval_samples,
            &[c.seq_len, c.d_state],
            c.probe_batch,
            c.sw2_projections,
            stage_seed(c.seed, EVAL_STAGE),
        ))
    }

    /// Flow-matching pre-training of the softmax teacher.
    pub fn train_teacher(&self) -> Result<String> {
        let c = &self.config;
        let (model, losses) = train_teacher::<Precision>(&c.model(), &c.teacher(), stage_seed(c.seed, TEACHER_STAGE))?;
        save_checkpoint(&model, &self.path(TEACHER_FILE))?;
        let lines: Vec<LossLine> = losses.iter().enumerate().map(|(step, &loss)| LossLine { step, loss }).collect();
        write_json_lines(&self.path(TEACHER_LOG), &lines)?;
        let tail = &losses[losses.len().saturating_sub(50)..];
        let mean = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
        Ok(format!(
            "teacher: {} parameters, {} steps, final loss {mean:.5}",
            model.num_parameters(),
            losses.len()
        ))
    }

    /// Integrates the teacher from noise and stores every step.
    pub fn collect(&self) -> Result<String> {
        let c = &self.config;
        let teacher = self.load_model(ModelChoice::Teacher)?;
        let set = collect(
            &teacher,
            &c.schedule()?,
            c.seq_len,
            c.d_state,
            c.n_trajectories,
            stage_seed(c.seed, COLLECT_STAGE),
        )?;
        set.save(&self.path(TRAJECTORY_FILE))?;
        Ok(format!("collected {} records from {} trajectories", set.len(), set.n_trajectories()))
    }

    /// Summary of the stored trajectories.
    pub fn stats(&self) -> Result<String> {
        Ok(self.load_trajectories()?.stats().to_string())
    }

    /// Selective transfer from the teacher into a mixed student.
    pub fn transfer(&self) -> Result<String> {
        let c = &self.config;
        let teacher = self.load_model(ModelChoice::Teacher)?;
        let data = self.load_trajectories()?;
        let seed = stage_seed(c.seed, TRANSFER_STAGE);
        let student = teacher.to_mixed(&mut ChaCha8Rng::seed_from_u64(seed))?;
        let mut log = BufWriter::new(fs::File::create(self.path(TRANSFER_LOG))?);
        let outcome = train(student, &Frozen::new(&teacher), &data, &c.transfer(), seed, Some(&mut log))?;
        log.flush()?;
        save_checkpoint(&outcome.student, &self.path(STUDENT_FILE))?;
        let scores = outcome.scores();
        let stats = ScoreStats::of(&scores);
        Ok(format!(
            "transfer: {} steps, {} of {} layers round to linear, max |r - round(r)| = {:.2e}\nscores: {}",
            outcome.history.len(),
            stats.n_linear,
            scores.len(),
            stats.max_rounding_error,
            scores.iter().map(|r| format!("{r:.4}")).collect::<Vec<_>>().join(" ")
        ))
    }

    /// Rounds the student's scores and keeps one branch per layer.
    pub fn finalize(&self) -> Result<String> {
        let student = self.load_model(ModelChoice::Student)?;
        let finalized = student.finalize();
        save_checkpoint(&finalized, &self.path(FINALIZED_FILE))?;
        let kinds: Vec<&str> = finalized
            .layer_kinds()
            .iter()
            .map(|k| match k {
                LayerKind::Softmax => "softmax",
                LayerKind::Linear => "linear",
                LayerKind::Mixed => "mixed",
            })
            .collect();
        Ok(format!("finalized layers: {}", kinds.join(" ")))
    }

    pub fn sample(&self, which: ModelChoice) -> Result<String> {
        let model = self.load_model(which)?;
        let probe = self.quality_probe()?;
        let x = probe.samples(&model)?;
        let name = match which {
            ModelChoice::Teacher => "teacher",
            ModelChoice::Student => "student",
            ModelChoice::Finalized => "finalized",
        };
        write_json(
            &self.path(SAMPLES_FILE),
            &SampleFile {
                model: name,
                shape: x.shape(),
                data: x.data().to_vec(),
            },
        )?;
        Ok(format!("wrote {} {name} samples", x.shape()[0]))
    }

    /// Quality of the student and its finalised form against the teacher,
    /// plus the greedy layer-search baseline at the same target.
    pub fn eval(&self) -> Result<EvalReport> {
        let c = &self.config;
        let teacher = self.load_model(ModelChoice::Teacher)?;
        let student = self.load_model(ModelChoice::Student)?;
        let finalized = match self.load_model(ModelChoice::Finalized) {
            Ok(m) => m,
            Err(Error::MissingInput(_)) => student.finalize(),
            Err(e) => return Err(e),
        };
        let mut report = EvalReport::new(c, c.seed)?;
        let probe = self.quality_probe()?;

        let start = Instant::now();
        let reference = probe.samples(&teacher)?;
        let sw2_mixed = probe.sw2(&probe.samples(&student)?, &reference)?;
        let sw2_final = probe.sw2(&probe.samples(&finalized)?, &reference)?;
        let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(c.seed, EVAL_STAGE));
        let data = c.data.sample::<Precision, _>(c.eval_samples, c.seq_len, c.d_state, &mut rng)?;
        let sw2_data = probe.sw2(&reference, &data)?;
        report.wall_secs.insert("sw2".into(), start.elapsed().as_secs_f64());

        let scores: Vec<f64> = student.scores().into_iter().flatten().map(f64::from).collect();
        let stats = ScoreStats::of(&scores);
        report.insert("sw2_mixed_vs_teacher", sw2_mixed)?;
        report.insert("sw2_finalized_vs_teacher", sw2_final)?;
        report.insert("sw2_teacher_vs_data", sw2_data)?;
        report.insert("finalization_gap", finalization_gap(&student, &probe.probe)?)?;
        report.insert("n_linear", finalized.layer_kinds().iter().filter(|k| **k == LayerKind::Linear).count() as f64)?;
        report.insert("score_mean", stats.mean)?;
        report.insert("score_max_rounding_error", stats.max_rounding_error)?;

        let start = Instant::now();
        let target = c.target.min(c.n_layers);
        let (_, greedy) = heuristic_conversion(&teacher, target, &probe.probe, 0.5, stage_seed(c.seed, EVAL_STAGE))?;
        report.insert("sw2_greedy_untrained_vs_teacher", probe.sw2(&probe.samples(&greedy)?, &reference)?)?;
        report.wall_secs.insert("layer_search".into(), start.elapsed().as_secs_f64());

        write_json(&self.path(REPORT_FILE), &report)?;
        write_json(&self.path(TIMINGS_FILE), &report.wall_secs)?;
        Ok(report)
    }

    pub fn bench_attention(&self) -> Result<ScalingReport> {
        let c = &self.config;
        let report = bench_attention(&c.bench_n, c.bench_d, c.bench_repeats, stage_seed(c.seed, BENCH_STAGE))?;
        write_json(&self.path(BENCH_FILE), &report)?;
        Ok(report)
    }

    /// Runs the default ablation grid; `progress` sees each finished row.
    pub fn ablate(&self, progress: impl FnMut(&AblationRow)) -> Result<Vec<AblationRow>> {
        let c = &self.config;
        if let Some(t) = c.ablation_targets.iter().find(|&&t| t > c.n_layers) {
            return Err(Error::Config(format!("ablation target {t} exceeds n_layers {}", c.n_layers)));
        }
        let teacher = self.load_model(ModelChoice::Teacher)?;
        let data = self.load_trajectories()?;
        let base = c.transfer();
        let cells = default_ablation_grid(&base, &c.ablation_targets, &c.ablation_lambdas, &c.ablation_seeds);
        let rows = ablation_suite(&teacher, &data, &base, &cells, &self.quality_probe()?, progress)?;
        write_json(&self.path(ABLATION_FILE), &rows)?;
        fs::write(self.path(ABLATION_TABLE), ablation_table(&rows))?;
        Ok(rows)
    }
}

/// Sample set of a model as written by [`Run::sample`].
pub fn read_samples(path: &Path) -> Result<DenseArray<f32>> {
    #[derive(serde::Deserialize)]
    struct Owned {
        shape: Vec<usize>,
        data: Vec<f32>,
    }
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let owned: Owned = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    DenseArray::new(&owned.shape, owned.data)
}
