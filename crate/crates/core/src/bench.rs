//! Synthetic multi-domain task generator and the Transfer / Average / Last
//! accuracy-matrix metrics.
//!
//! Each task draws its own unit class centres and a random orthogonal
//! rotation `Q_t`; a sample of class `c` is `Q_t (μ_c + ε)` with
//! `ε ~ N(0, σ² I)`. Rotations make the tasks distinct domains while keeping
//! the class geometry intact.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{normalize, orthonormal_columns, Matrix, SeededRng};
use crate::model::{argmax, ClassPrototypes, FrozenBackbone};

const TASK_STREAM: u64 = 0x7A5C_0000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    pub tasks: usize,
    pub classes: usize,
    pub input_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub separation: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            tasks: 5,
            classes: 10,
            input_dim: 32,
            train_per_class: 25,
            test_per_class: 40,
            separation: 1.0,
            noise: 0.35,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("tasks", self.tasks),
            ("classes", self.classes),
            ("input_dim", self.input_dim),
            ("train_per_class", self.train_per_class),
            ("test_per_class", self.test_per_class),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("tasks.{name} must be >= 1")));
        }
        if !(self.noise > 0.0) || !self.noise.is_finite() {
            return Err(Error::config("tasks.noise must be positive"));
        }
        if !(self.separation > 0.0) || !self.separation.is_finite() {
            return Err(Error::config("tasks.separation must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub task_id: usize,
    pub classes: usize,
    /// Noise-free class centres in input space, `Q_t μ_c`.
    pub centers: Vec<Vec<f64>>,
    pub rotation: Matrix,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl TaskDataset {
    /// Class embeddings for this task from a pristine tower.
    pub fn prototypes(&self, tower: &FrozenBackbone) -> Result<ClassPrototypes> {
        ClassPrototypes::from_centers(tower, &self.centers)
    }
}

/// Generates `spec.tasks` datasets; task `t` only reads its own RNG stream.
pub fn gen_tasks(spec: &SyntheticTaskSpec) -> Result<Vec<TaskDataset>> {
    spec.validate()?;
    (1..=spec.tasks).map(|t| gen_task(spec, t)).collect()
}

fn gen_task(spec: &SyntheticTaskSpec, task_id: usize) -> Result<TaskDataset> {
    let d = spec.input_dim;
    let mut rng = SeededRng::derive(spec.seed, TASK_STREAM + task_id as u64);
    let rotation = orthonormal_columns(&Matrix::gaussian(d, d, 1.0, &mut rng))?;
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            normalize(&rng.gaussian_vec(d, 1.0))
                .into_iter()
                .map(|v| v * spec.separation)
                .collect()
        })
        .collect();
    let centers = means
        .iter()
        .map(|m| rotation.matvec(m))
        .collect::<Result<Vec<_>>>()?;

    let draw = |per_class: usize, rng: &mut SeededRng| -> Result<Vec<Sample>> {
        let mut out = Vec::with_capacity(per_class * spec.classes);
        for _ in 0..per_class {
            for (label, mean) in means.iter().enumerate() {
                let noisy: Vec<f64> = mean.iter().map(|m| m + spec.noise * rng.next_gaussian()).collect();
                out.push(Sample {
                    x: rotation.matvec(&noisy)?,
                    label,
                });
            }
        }
        Ok(out)
    };
    let train = draw(spec.train_per_class, &mut rng)?;
    let test = draw(spec.test_per_class, &mut rng)?;
    Ok(TaskDataset {
        task_id,
        classes: spec.classes,
        centers,
        rotation,
        train,
        test,
    })
}

/// Test accuracy in percent of a merged snapshot.
pub fn evaluate(snapshot: &FrozenBackbone, prototypes: &ClassPrototypes, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for s in samples {
        if argmax(&snapshot.forward_eval(&s.x, prototypes)?) == s.label {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / samples.len() as f64)
}

/// `M[t][j]`: accuracy (%) on task `j` after training task `t` (0-based here).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let t = rows.len();
        if t == 0 {
            return Err(Error::config("accuracy matrix is empty"));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != t {
                return Err(Error::config(format!(
                    "accuracy matrix row {} has {} entries, expected {t}",
                    i + 1,
                    row.len()
                )));
            }
            if let Some(v) = row.iter().find(|v| !(0.0..=100.0).contains(*v)) {
                return Err(Error::config(format!("accuracy {v} outside [0, 100]")));
            }
        }
        Ok(Self { rows })
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, t: usize, j: usize) -> f64 {
        self.rows[t][j]
    }

    /// CSV with header `task_1..task_T` and two-decimal values.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let header: Vec<String> = (1..=self.tasks()).map(|j| format!("task_{j}")).collect();
        out.write_record(&header).map_err(csv_err)?;
        for row in &self.rows {
            out.write_record(row.iter().map(|v| format!("{v:.2}"))).map_err(csv_err)?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(r);
        let header = reader.headers().map_err(csv_err)?.clone();
        let t = header.len();
        for (j, name) in header.iter().enumerate() {
            if name.trim() != format!("task_{}", j + 1) {
                return Err(Error::config(format!("unexpected matrix header column '{name}'")));
            }
        }
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(csv_err)?;
            if rec.len() != t {
                return Err(Error::config(format!(
                    "matrix row {} has {} fields, expected {t}",
                    rows.len() + 1,
                    rec.len()
                )));
            }
            let row = rec
                .iter()
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::config(format!("matrix value '{f}' is not a number")))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Self::new(rows)
    }

    /// The matrix as it reads back from its two-decimal CSV form.
    pub fn rounded(&self) -> Self {
        Self::read_csv(self.to_csv_string().as_bytes()).expect("own csv parses")
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::config(format!("csv: {e}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub overall: f64,
    /// Entry `j` is `null` where the metric is undefined for task `j`.
    pub per_task: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Absent when there is a single task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<MetricSummary>,
    pub average: MetricSummary,
    pub last: MetricSummary,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

/// `Transfer(j)` = mean of `M[t][j]` over rows trained before task `j`;
/// defined from the second task on. `None` when there is only one task.
pub fn transfer_metric(m: &AccuracyMatrix) -> Option<MetricSummary> {
    let t = m.tasks();
    if t < 2 {
        return None;
    }
    let per_task: Vec<Option<f64>> = (0..t)
        .map(|j| (j >= 1).then(|| mean((0..j).map(|r| m.get(r, j)))))
        .collect();
    let overall = mean(per_task.iter().flatten().copied());
    Some(MetricSummary { overall, per_task })
}

/// `Average(j)` = mean over all rows; overall = mean of column means.
pub fn average_metric(m: &AccuracyMatrix) -> MetricSummary {
    let t = m.tasks();
    let cols: Vec<f64> = (0..t).map(|j| mean((0..t).map(|r| m.get(r, j)))).collect();
    MetricSummary {
        overall: mean(cols.iter().copied()),
        per_task: cols.into_iter().map(Some).collect(),
    }
}

/// `Last(j)` = final row.
pub fn last_metric(m: &AccuracyMatrix) -> MetricSummary {
    let row = &m.rows()[m.tasks() - 1];
    MetricSummary {
        overall: mean(row.iter().copied()),
        per_task: row.iter().copied().map(Some).collect(),
    }
}

pub fn metrics_report(m: &AccuracyMatrix) -> MetricsReport {
    MetricsReport {
        transfer: transfer_metric(m),
        average: average_metric(m),
        last: last_metric(m),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::matmul;
    use crate::model::ModelConfig;

    fn small_spec() -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            tasks: 2,
            classes: 4,
            input_dim: 8,
            train_per_class: 3,
            test_per_class: 5,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic_and_sized() {
        let a = gen_tasks(&small_spec()).unwrap();
        let b = gen_tasks(&small_spec()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].train.len(), 12);
        assert_eq!(a[0].test.len(), 20);
        assert!(a.iter().flat_map(|t| t.train.iter().chain(&t.test)).all(|s| s.label < 4));
        assert_ne!(a[0].rotation, a[1].rotation);
    }

    #[test]
    fn task_streams_independent_of_task_count() {
        let mut longer = small_spec();
        longer.tasks = 4;
        let a = gen_tasks(&small_spec()).unwrap();
        let b = gen_tasks(&longer).unwrap();
        assert_eq!(a[..], b[..2]);
    }

    #[test]
    fn rotations_are_orthogonal() {
        for task in gen_tasks(&SyntheticTaskSpec::default()).unwrap() {
            let q = &task.rotation;
            let qtq = matmul(&q.transpose(), q).unwrap();
            assert!(qtq.max_abs_diff(&Matrix::identity(q.rows())) < 1e-10);
        }
    }

    #[test]
    fn noiseless_limit_is_perfect() {
        let spec = SyntheticTaskSpec {
            noise: 1e-9,
            ..small_spec()
        };
        let tasks = gen_tasks(&spec).unwrap();
        let tower = FrozenBackbone::random(8, &ModelConfig::default(), &mut SeededRng::new(1));
        for task in &tasks {
            // nearest centre in input space
            for s in task.train.iter().chain(&task.test) {
                let d: Vec<f64> = task
                    .centers
                    .iter()
                    .map(|c| -c.iter().zip(&s.x).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                    .collect();
                assert_eq!(argmax(&d), s.label);
            }
            let protos = task.prototypes(&tower).unwrap();
            assert_eq!(evaluate(&tower, &protos, &task.test).unwrap(), 100.0);
        }
    }

    #[test]
    fn random_prototypes_give_chance_accuracy() {
        let spec = SyntheticTaskSpec {
            tasks: 1,
            classes: 10,
            input_dim: 16,
            test_per_class: 100,
            ..Default::default()
        };
        let task = gen_tasks(&spec).unwrap().remove(0);
        let cfg = ModelConfig::default();
        let tower = FrozenBackbone::random(16, &cfg, &mut SeededRng::new(4));
        // clustered data makes one draw lumpy, so average over many
        let mut rng = SeededRng::new(5);
        let draws = 60;
        let mut total = 0.0;
        for _ in 0..draws {
            let protos = ClassPrototypes::new((0..10).map(|_| rng.gaussian_vec(cfg.hidden_dim, 1.0)).collect()).unwrap();
            let acc = evaluate(&tower, &protos, &task.test).unwrap();
            assert_eq!(acc, evaluate(&tower, &protos, &task.test).unwrap());
            total += acc;
        }
        assert_eq!(task.test.len(), 1000);
        let mean = total / draws as f64;
        assert!((mean - 10.0).abs() < 5.0, "mean acc {mean}");
    }

    #[test]
    fn metric_edge_cases() {
        let one = AccuracyMatrix::new(vec![vec![42.0]]).unwrap();
        assert!(transfer_metric(&one).is_none());
        assert_eq!(average_metric(&one).overall, 42.0);
        assert_eq!(last_metric(&one).overall, 42.0);

        let c = AccuracyMatrix::new(vec![vec![7.5; 3]; 3]).unwrap();
        assert_eq!(transfer_metric(&c).unwrap().overall, 7.5);
        assert_eq!(average_metric(&c).overall, 7.5);
        assert_eq!(last_metric(&c).overall, 7.5);
    }

    #[test]
    fn transfer_ignores_diagonal_and_below() {
        let base = vec![
            vec![50.0, 60.0, 70.0],
            vec![55.0, 65.0, 75.0],
            vec![45.0, 66.0, 80.0],
        ];
        let mut poisoned = base.clone();
        poisoned[1][1] = 0.0;
        poisoned[2][1] = 100.0;
        poisoned[2][2] = 3.0;
        poisoned[1][0] = 99.0;
        let a = transfer_metric(&AccuracyMatrix::new(base).unwrap()).unwrap();
        let b = transfer_metric(&AccuracyMatrix::new(poisoned).unwrap()).unwrap();
        assert_eq!(a.per_task, b.per_task);
        assert_eq!(a.per_task, vec![None, Some(60.0), Some(72.5)]);
    }

    #[test]
    fn last_ignores_earlier_row_order() {
        let m = AccuracyMatrix::new(vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]]).unwrap();
        let p = AccuracyMatrix::new(vec![vec![4.0, 5.0, 6.0], vec![1.0, 2.0, 3.0], vec![7.0, 8.0, 9.0]]).unwrap();
        assert_eq!(last_metric(&m), last_metric(&p));
    }

    #[test]
    fn csv_roundtrip_and_validation() {
        let m = AccuracyMatrix::new(vec![vec![12.345, 50.0], vec![99.999, 0.0]]).unwrap();
        let s = m.to_csv_string();
        assert_eq!(s, "task_1,task_2\n12.35,50.00\n100.00,0.00\n");
        let back = AccuracyMatrix::read_csv(s.as_bytes()).unwrap();
        assert_eq!(back.to_csv_string(), s);
        assert!(AccuracyMatrix::read_csv("task_1,task_2\n1.0\n2.0,3.0\n".as_bytes()).is_err());
        assert!(AccuracyMatrix::read_csv("task_1,task_2\n1.0,2.0\n".as_bytes()).is_err());
        assert!(AccuracyMatrix::new(vec![vec![101.0]]).is_err());
    }
}
