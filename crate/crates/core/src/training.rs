//! Mini-batch training with Adam/AdamW and the hyperparameter grid search.

use std::cmp::Ordering;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ClipTensor;
use crate::error::{Error, Result};
use crate::evaluation::evaluate_model;
use crate::model::{build_model, save_checkpoint, Gradients, Model, ModelConfig};
use crate::nn;
use crate::seed;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    #[default]
    Adam,
    /// Adam with decoupled weight decay.
    AdamW,
}

impl Solver {
    pub fn name(self) -> &'static str {
        match self {
            Solver::Adam => "adam",
            Solver::AdamW => "adamw",
        }
    }
}

impl std::str::FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(Solver::Adam),
            "adamw" => Ok(Solver::AdamW),
            other => Err(Error::Config(format!("unknown solver {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    #[serde(default)]
    pub solver: Solver,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Decoupled decay rate; only used by AdamW.
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_weight_decay() -> f64 {
    0.01
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            solver: Solver::Adam,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 30,
            weight_decay: default_weight_decay(),
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay {} must be non-negative",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Adam moment estimates.
struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-8;

impl Adam {
    fn new(model: &Model) -> Self {
        let zeros = || model.params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        Self { m: zeros(), v: zeros(), step: 0 }
    }

    fn update(&mut self, model: &mut Model, grads: &Gradients, cfg: &SolverConfig) {
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step);
        let c2 = 1.0 - BETA2.powi(self.step);
        let lr = cfg.learning_rate;
        let decay = match cfg.solver {
            Solver::Adam => 0.0,
            Solver::AdamW => lr * cfg.weight_decay,
        };
        for (i, param) in model.params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads.0[i]);
            for j in 0..param.data.len() {
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
                let step = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + EPSILON);
                param.data[j] -= step + decay * param.data[j];
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Percentage of training clips classified correctly during the epoch.
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model_config: ModelConfig,
    pub solver_config: SolverConfig,
    pub epochs: Vec<EpochRecord>,
    /// Rank-1 accuracy on the held-out clips, if any were given.
    pub test_accuracy: Option<f64>,
    pub wall_time_secs: f64,
}

impl TrainReport {
    pub fn final_train_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_accuracy)
    }
}

fn check_clips(config: &ModelConfig, clips: &[ClipTensor], what: &str) -> Result<()> {
    let want = config.input_shape.as_array();
    for c in clips {
        if c.shape() != want {
            return Err(Error::Shape(format!(
                "{what} clip {} has shape {:?}, model expects {want:?}",
                c.clip_id,
                c.shape()
            )));
        }
        if c.label >= config.num_classes {
            return Err(Error::Invalid(format!(
                "{what} clip {} has label {} but the model has {} classes",
                c.clip_id, c.label, config.num_classes
            )));
        }
    }
    Ok(())
}

/// Trains a fresh model on `train` and, if `test` is nonempty, reports its
/// rank-1 accuracy there. Identical inputs and seeds give identical models.
pub fn train_model(
    config: &ModelConfig,
    solver: &SolverConfig,
    train: &[ClipTensor],
    test: &[ClipTensor],
) -> Result<(Model, TrainReport)> {
    let start = Instant::now();
    solver.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let mut model = build_model(config)?;
    check_clips(config, train, "training")?;
    check_clips(config, test, "test")?;

    let mut rng = seed::rng(solver.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut adam = Adam::new(&model);
    let mut grads = Gradients::zeros_like(&model);
    let mut epochs = Vec::with_capacity(solver.epochs);

    for epoch in 0..solver.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for batch in order.chunks(solver.batch_size) {
            grads.fill_zero();
            let weight = 1.0 / batch.len() as f64;
            for &i in batch {
                let clip = &train[i];
                let (loss, logits) = model
                    .accumulate_loss_gradients(clip, clip.label, weight, &mut grads)
                    .map_err(|e| match e {
                        Error::NonFinite(m) => Error::Diverged(format!("epoch {epoch}: {m}")),
                        e => e,
                    })?;
                if !loss.is_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite loss at epoch {epoch} on clip {}",
                        clip.clip_id
                    )));
                }
                loss_sum += loss;
                hits += usize::from(nn::argmax(&logits) == clip.label);
            }
            adam.update(&mut model, &grads, solver);
        }
        if !model.all_finite() {
            return Err(Error::Diverged(format!("non-finite weights after epoch {epoch}")));
        }
        epochs.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / train.len() as f64,
            train_accuracy: 100.0 * hits as f64 / train.len() as f64,
        });
    }

    let test_accuracy = if test.is_empty() {
        None
    } else {
        Some(evaluate_model(&model, test)?.rank1)
    };
    let report = TrainReport {
        model_config: config.clone(),
        solver_config: solver.clone(),
        epochs,
        test_accuracy,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

/// One grid point. Seeds in `model` and `solver` are ignored; the search
/// derives them from the root seed and the cell id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub model: ModelConfig,
    pub solver: SolverConfig,
}

impl GridPoint {
    /// Stable hex id of the seed-free configuration.
    pub fn cell_id(&self) -> String {
        let mut m = self.model.clone();
        let mut s = self.solver.clone();
        m.seed = 0;
        s.seed = 0;
        let text = serde_json::to_string(&(m, s)).expect("configs serialize");
        format!("{:016x}", seed::hash_str(&text))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub cell_id: String,
    pub model: ModelConfig,
    pub solver: SolverConfig,
    /// Validation rank-1 accuracy; `None` if the cell failed.
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

/// The standard grid: `alpha` in {4, 16}, `beta` in {1/8, 1/16}, solver in
/// {Adam, AdamW} and batch size in {16, 32}, everything else from the
/// templates.
pub fn default_grid(model: &ModelConfig, solver: &SolverConfig) -> Vec<GridPoint> {
    let mut out = Vec::with_capacity(16);
    for alpha in [4, 16] {
        for beta in [1.0 / 8.0, 1.0 / 16.0] {
            for kind in [Solver::Adam, Solver::AdamW] {
                for batch_size in [16, 32] {
                    out.push(GridPoint {
                        model: ModelConfig { alpha, beta, ..model.clone() },
                        solver: SolverConfig { solver: kind, batch_size, ..solver.clone() },
                    });
                }
            }
        }
    }
    out
}

/// Ranking order: higher accuracy first, failed cells last, then
/// ascending `(alpha, beta, solver)`, batch size and cell id.
pub fn compare_cells(a: &GridCell, b: &GridCell) -> Ordering {
    let acc = |c: &GridCell| c.accuracy.unwrap_or(f64::NEG_INFINITY);
    acc(b)
        .total_cmp(&acc(a))
        .then(a.model.alpha.cmp(&b.model.alpha))
        .then(a.model.beta.total_cmp(&b.model.beta))
        .then(a.solver.solver.cmp(&b.solver.solver))
        .then(a.solver.batch_size.cmp(&b.solver.batch_size))
        .then_with(|| a.cell_id.cmp(&b.cell_id))
}

/// Trains every grid point on `train`, scores it on `val` and returns the
/// cells ranked best first. Cells that fail keep their error message and
/// rank last. `jobs` bounds the number of concurrent trainings; the result
/// does not depend on it. With `checkpoint_dir`, each trained model is saved
/// as `<cell_id>.ckpt` there.
pub fn grid_search(
    points: &[GridPoint],
    train: &[ClipTensor],
    val: &[ClipTensor],
    root_seed: u64,
    jobs: usize,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<GridCell>> {
    if points.is_empty() {
        return Err(Error::Config("grid search space is empty".into()));
    }
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    if val.is_empty() {
        return Err(Error::Invalid("grid search needs validation clips".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let run = |p: &GridPoint| -> GridCell {
        let cell_id = p.cell_id();
        let tag = u64::from_str_radix(&cell_id, 16).expect("hex id");
        let model = ModelConfig { seed: seed::derive(root_seed, &[tag, 0]), ..p.model.clone() };
        let solver = SolverConfig { seed: seed::derive(root_seed, &[tag, 1]), ..p.solver.clone() };
        let outcome = model
            .validate()
            .and_then(|_| train_model(&model, &solver, train, val))
            .and_then(|(trained, report)| {
                if let Some(dir) = checkpoint_dir {
                    save_checkpoint(&trained, &dir.join(format!("{cell_id}.ckpt")))?;
                }
                Ok(report)
            });
        let (accuracy, error) = match outcome {
            Ok(report) => (report.test_accuracy, None),
            Err(e) => (None, Some(e.to_string())),
        };
        GridCell { cell_id, model, solver, accuracy, error }
    };
    let mut cells: Vec<GridCell> = pool.install(|| points.par_iter().map(run).collect());
    cells.sort_by(compare_cells);
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InputShape;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            alpha: 2,
            beta: 0.5,
            base_channels: 4,
            stage_depths: vec![1],
            num_classes: 2,
            input_shape: InputShape { frames: 4, height: 8, width: 8, channels: 1 },
            stem_stride: 2,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    /// Class 1 clips carry a bright square; class 0 clips are dark.
    fn toy_clips(n: usize) -> Vec<ClipTensor> {
        (0..n)
            .map(|i| {
                let label = i % 2;
                let mut data = vec![0.1f32; 4 * 8 * 8];
                if label == 1 {
                    for t in 0..4 {
                        for y in 2..6 {
                            for x in 2..6 {
                                data[(t * 8 + y) * 8 + x] = 0.9;
                            }
                        }
                    }
                }
                let n = data.len();
                data[i % n] += 0.05;
                ClipTensor::new([4, 8, 8, 1], data, label, format!("c{i}")).unwrap()
            })
            .collect()
    }

    fn solver() -> SolverConfig {
        SolverConfig { learning_rate: 1e-2, batch_size: 4, epochs: 5, seed: 9, ..Default::default() }
    }

    #[test]
    fn learns_a_separable_toy_problem() {
        let clips = toy_clips(12);
        let (_, report) = train_model(&tiny_config(), &solver(), &clips, &clips).unwrap();
        assert_eq!(report.final_train_accuracy(), Some(100.0));
        assert_eq!(report.test_accuracy, Some(100.0));
        assert!(report.epochs.last().unwrap().mean_loss < report.epochs[0].mean_loss);
    }

    #[test]
    fn training_is_deterministic() {
        let clips = toy_clips(8);
        let s = SolverConfig { epochs: 2, ..solver() };
        let (a, _) = train_model(&tiny_config(), &s, &clips, &[]).unwrap();
        let (b, _) = train_model(&tiny_config(), &s, &clips, &[]).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn adamw_shrinks_weights_relative_to_adam() {
        let clips = toy_clips(8);
        let base = SolverConfig { epochs: 2, weight_decay: 5.0, ..solver() };
        let (adam, _) = train_model(&tiny_config(), &base, &clips, &[]).unwrap();
        let w = SolverConfig { solver: Solver::AdamW, ..base };
        let (adamw, _) = train_model(&tiny_config(), &w, &clips, &[]).unwrap();
        let norm = |m: &Model| m.params.iter().flat_map(|p| &p.data).map(|v| v * v).sum::<f64>();
        assert!(norm(&adamw) < norm(&adam));
    }

    #[test]
    fn rejects_bad_inputs() {
        let clips = toy_clips(4);
        assert!(train_model(&tiny_config(), &solver(), &[], &[]).is_err());
        let bad_lr = SolverConfig { learning_rate: 0.0, ..solver() };
        assert!(train_model(&tiny_config(), &bad_lr, &clips, &[]).is_err());
        let no_epochs = SolverConfig { epochs: 0, ..solver() };
        assert!(matches!(
            train_model(&tiny_config(), &no_epochs, &clips, &[]),
            Err(Error::Config(_))
        ));
        let three = ModelConfig { input_shape: InputShape { frames: 6, ..tiny_config().input_shape }, ..tiny_config() };
        assert!(matches!(
            train_model(&three, &solver(), &clips, &[]),
            Err(Error::Shape(_))
        ));
        let mut labelled = toy_clips(4);
        labelled[0].label = 5;
        assert!(train_model(&tiny_config(), &solver(), &labelled, &[]).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let clips = toy_clips(8);
        let wild = SolverConfig { learning_rate: 1e308, epochs: 3, ..solver() };
        assert!(matches!(
            train_model(&tiny_config(), &wild, &clips, &[]),
            Err(Error::Diverged(_))
        ));
    }

    #[test]
    fn default_grid_has_sixteen_distinct_cells() {
        let grid = default_grid(&ModelConfig::default(), &SolverConfig::default());
        let mut ids: Vec<_> = grid.iter().map(GridPoint::cell_id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 16);
    }

    #[test]
    fn cell_id_ignores_seeds() {
        let p = GridPoint { model: tiny_config(), solver: solver() };
        let mut q = p.clone();
        q.model.seed = 77;
        q.solver.seed = 78;
        assert_eq!(p.cell_id(), q.cell_id());
    }

    #[test]
    fn ranking_breaks_ties_by_config_then_puts_failures_last() {
        let cell = |alpha, acc: Option<f64>, solver| GridCell {
            cell_id: format!("{alpha}{solver:?}"),
            model: ModelConfig { alpha, ..tiny_config() },
            solver: SolverConfig { solver, ..SolverConfig::default() },
            accuracy: acc,
            error: None,
        };
        let mut cells = vec![
            cell(16, Some(90.0), Solver::Adam),
            cell(4, None, Solver::Adam),
            cell(4, Some(90.0), Solver::AdamW),
            cell(4, Some(90.0), Solver::Adam),
            cell(16, Some(95.0), Solver::AdamW),
        ];
        cells.sort_by(compare_cells);
        let order: Vec<_> = cells.iter().map(|c| (c.model.alpha, c.solver.solver, c.accuracy)).collect();
        assert_eq!(
            order,
            vec![
                (16, Solver::AdamW, Some(95.0)),
                (4, Solver::Adam, Some(90.0)),
                (4, Solver::AdamW, Some(90.0)),
                (16, Solver::Adam, Some(90.0)),
                (4, Solver::Adam, None),
            ]
        );
    }

    #[test]
    fn grid_search_is_independent_of_job_count() {
        let clips = toy_clips(8);
        let t = tiny_config();
        let s = SolverConfig { epochs: 1, ..solver() };
        let points = vec![
            GridPoint { model: t.clone(), solver: s.clone() },
            GridPoint { model: ModelConfig { alpha: 4, ..t.clone() }, solver: s.clone() },
            // alpha 3 does not divide 4 frames
            GridPoint { model: ModelConfig { alpha: 3, ..t.clone() }, solver: s.clone() },
        ];
        let one = grid_search(&points, &clips, &clips, 5, 1, None).unwrap();
        let two = grid_search(&points, &clips, &clips, 5, 2, None).unwrap();
        assert_eq!(one, two);
        let last = one.last().unwrap();
        assert_eq!(last.model.alpha, 3);
        assert!(last.accuracy.is_none() && last.error.is_some());
    }

    #[test]
    fn grid_search_saves_one_checkpoint_per_trained_cell() {
        let clips = toy_clips(4);
        let s = SolverConfig { epochs: 1, ..solver() };
        let points = vec![
            GridPoint { model: tiny_config(), solver: s.clone() },
            GridPoint { model: ModelConfig { alpha: 3, ..tiny_config() }, solver: s },
        ];
        let dir = tempfile::tempdir().unwrap();
        let cells = grid_search(&points, &clips, &clips, 1, 1, Some(dir.path())).unwrap();
        let ok = &cells[0];
        let model = crate::model::load_checkpoint(&dir.path().join(format!("{}.ckpt", ok.cell_id))).unwrap();
        assert_eq!(model.config, ok.model);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        assert!(grid_search(&[], &clips, &clips, 1, 1, None).is_err());
    }
}
