//! Class-probability sources: a synthetic softmax classifier, labeled Gaussian
//! mixture data, probability-table file exchange, and the analytic HPS
//! inflation bound.
//!
//! The synthetic task is a `C`-class isotropic Gaussian mixture. Its Bayes
//! posterior is exactly a softmax-linear map, so [`bayes_classifier`] gives an
//! optimal classifier with no training step, and the inflation constant of the
//! robust baselines has a closed form: the HPS score is `1 − softmax(Wx+b)[y]`,
//! the softmax Jacobian has spectral norm at most `½`, so a perturbation of
//! norm `r` moves the score by at most `M_r = ½·σ_max(W)·r`.
//!
//! Probability tables carry externally computed class probabilities (CSV or
//! JSON) so real model outputs can be calibrated without loading any network.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::noise::PerturbationBudget;
use crate::scores::{ProbabilityVector, ScoreKind};
use crate::seed::{stage_rng, Stage};
use crate::{Error, Result};

/// A linear-softmax classifier: `predict_proba(x) = softmax(Wx + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxClassifier {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl SoftmaxClassifier {
    /// Build from a `C×d` weight matrix and length-`C` bias vector.
    ///
    /// Weights must be finite. Bias entries of `-∞` are allowed (they encode
    /// classes of prior zero); `+∞` and `NaN` are not.
    pub fn new(weights: Vec<Vec<f64>>, bias: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::EmptyInput("classifier needs at least one class"));
        }
        if weights.len() != bias.len() {
            return Err(Error::ShapeMismatch {
                message: "weight rows vs bias entries",
                left: weights.len(),
                right: bias.len(),
            });
        }
        let dim = weights[0].len();
        if dim == 0 {
            return Err(Error::invalid("weights", "zero-dimensional inputs"));
        }
        for row in &weights {
            if row.len() != dim {
                return Err(Error::ShapeMismatch {
                    message: "weight row lengths",
                    left: dim,
                    right: row.len(),
                });
            }
            if row.iter().any(|w| !w.is_finite()) {
                return Err(Error::invalid("weights", "non-finite entry"));
            }
        }
        if bias.iter().any(|b| b.is_nan() || *b == f64::INFINITY) {
            return Err(Error::invalid("bias", "NaN or +inf entry"));
        }
        Ok(Self { weights, bias })
    }

    pub fn class_count(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.weights[0].len()
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// Class probabilities `softmax(Wx + b)`, computed with the max-shift
    /// trick so logits of magnitude up to about 700 stay NaN-free.
    pub fn predict_proba(&self, x: &[f64]) -> Result<ProbabilityVector> {
        if x.len() != self.dim() {
            return Err(Error::ShapeMismatch {
                message: "input vs classifier dimension",
                left: x.len(),
                right: self.dim(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("x", "non-finite input coordinate"));
        }
        let logits: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>())
            .collect();
        let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        if max == f64::NEG_INFINITY {
            return Err(Error::invalid("bias", "all logits are -inf"));
        }
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        ProbabilityVector::new(exps.iter().map(|e| e / total).collect())
    }
}

/// A desk-scale synthetic classification task: class means in `R^d`, shared
/// isotropic covariance `σ_x²I`, and class priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    means: Vec<Vec<f64>>,
    sigma_x: f64,
    priors: Vec<f64>,
}

/// Mean separation used by [`SyntheticTaskSpec::default_task`]. Chosen so the
/// Bayes accuracy of the default tasks lands in the 0.70..0.95 band.
pub const DEFAULT_SEPARATION: f64 = 2.5;

impl SyntheticTaskSpec {
    pub fn new(means: Vec<Vec<f64>>, sigma_x: f64, priors: Vec<f64>) -> Result<Self> {
        if means.len() < 2 {
            return Err(Error::invalid("means", "need at least two classes"));
        }
        if means.len() != priors.len() {
            return Err(Error::ShapeMismatch {
                message: "class means vs priors",
                left: means.len(),
                right: priors.len(),
            });
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::invalid("means", "zero-dimensional means"));
        }
        for mu in &means {
            if mu.len() != dim {
                return Err(Error::ShapeMismatch {
                    message: "mean vector lengths",
                    left: dim,
                    right: mu.len(),
                });
            }
            if mu.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("means", "non-finite mean coordinate"));
            }
        }
        if !(sigma_x.is_finite() && sigma_x > 0.0) {
            return Err(Error::invalid(
                "sigma_x",
                format!("{sigma_x} not a finite value > 0"),
            ));
        }
        if priors.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid("priors", "negative or non-finite prior"));
        }
        let total: f64 = priors.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "priors",
                format!("priors sum to {total}, not 1"),
            ));
        }
        Ok(Self {
            means,
            sigma_x,
            priors,
        })
    }

    /// The default task: uniform priors, `σ_x = 1`, and axis-aligned means
    /// `μ_c = 2.5·(1 + ⌊c/d⌋)·e_{c mod d}`, which keeps distinct classes
    /// separated even when there are more classes than dimensions.
    pub fn default_task(classes: usize, dim: usize) -> Result<Self> {
        Self::with_separation(classes, dim, DEFAULT_SEPARATION, 1.0)
    }

    /// As [`SyntheticTaskSpec::default_task`] with explicit mean separation
    /// and noise scale.
    pub fn with_separation(
        classes: usize,
        dim: usize,
        separation: f64,
        sigma_x: f64,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid("classes", "need at least two classes"));
        }
        if dim == 0 {
            return Err(Error::invalid("dim", "dimension must be at least 1"));
        }
        let means = (0..classes)
            .map(|c| {
                let mut mu = vec![0.0; dim];
                mu[c % dim] = separation * (1 + c / dim) as f64;
                mu
            })
            .collect();
        let priors = vec![1.0 / classes as f64; classes];
        Self::new(means, sigma_x, priors)
    }

    pub fn class_count(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn sigma_x(&self) -> f64 {
        self.sigma_x
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }
}

/// A labeled sample set `(x_i, y_i)` with `x_i ∈ R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    xs: Vec<Vec<f64>>,
    ys: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(xs: Vec<Vec<f64>>, ys: Vec<usize>) -> Result<Self> {
        if xs.len() != ys.len() {
            return Err(Error::ShapeMismatch {
                message: "inputs vs labels",
                left: xs.len(),
                right: ys.len(),
            });
        }
        Ok(Self { xs, ys })
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn xs(&self) -> &[Vec<f64>] {
        &self.xs
    }

    pub fn ys(&self) -> &[usize] {
        &self.ys
    }
}

/// Draw `n` labeled samples: `y_i` from the priors, `x_i ~ N(μ_{y_i}, σ_x²I)`.
///
/// Each sample uses its own sub-seed, so the output is independent of
/// evaluation order.
pub fn generate_synthetic_dataset(spec: &SyntheticTaskSpec, n: usize, seed: u64) -> LabeledDataset {
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = stage_rng(seed, Stage::DataGen, i as u64);
        let t: f64 = rng.gen();
        let mut acc = 0.0;
        let mut y = spec.class_count() - 1;
        for (c, &p) in spec.priors.iter().enumerate() {
            acc += p;
            if t < acc {
                y = c;
                break;
            }
        }
        let x = spec.means[y]
            .iter()
            .map(|mu| mu + spec.sigma_x * rng.sample::<f64, _>(StandardNormal))
            .collect();
        xs.push(x);
        ys.push(y);
    }
    LabeledDataset { xs, ys }
}

/// The Bayes-optimal classifier of a synthetic task.
///
/// For an isotropic Gaussian mixture the posterior is softmax-linear with
/// `W_c = μ_c/σ_x²` and `b_c = ln π_c − ‖μ_c‖²/(2σ_x²)`, so no training is
/// needed. Zero-prior classes get a `-∞` bias and probability zero.
pub fn bayes_classifier(spec: &SyntheticTaskSpec) -> SoftmaxClassifier {
    let s2 = spec.sigma_x * spec.sigma_x;
    let weights: Vec<Vec<f64>> = spec
        .means
        .iter()
        .map(|mu| mu.iter().map(|m| m / s2).collect())
        .collect();
    let bias = spec
        .means
        .iter()
        .zip(&spec.priors)
        .map(|(mu, &pi)| {
            let sq: f64 = mu.iter().map(|m| m * m).sum();
            if pi > 0.0 {
                pi.ln() - sq / (2.0 * s2)
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    SoftmaxClassifier::new(weights, bias).expect("task spec already validated")
}

/// One row of a probability table: a sample id, its true label, and the model's
/// class-probability vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub id: u64,
    pub label: usize,
    pub probs: ProbabilityVector,
}

/// Externally computed class probabilities for a set of labeled samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityTable {
    rows: Vec<TableRow>,
    class_count: usize,
}

/// On-disk encoding for probability tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Json,
}

impl TableFormat {
    /// Infer the format from a file extension (`.json` means JSON, anything
    /// else means CSV).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => TableFormat::Json,
            _ => TableFormat::Csv,
        }
    }
}

impl ProbabilityTable {
    /// Validate row consistency: unique ids, one shared class count, labels in
    /// range. An empty table is allowed and has class count zero.
    pub fn from_rows(rows: Vec<TableRow>) -> Result<Self> {
        let class_count = rows.first().map_or(0, |r| r.probs.class_count());
        let mut seen = HashSet::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            if row.probs.class_count() != class_count {
                return Err(Error::ShapeMismatch {
                    message: "class counts across table rows",
                    left: class_count,
                    right: row.probs.class_count(),
                });
            }
            if row.label >= class_count {
                return Err(Error::LabelOutOfRange {
                    label: row.label,
                    classes: class_count,
                });
            }
            if !seen.insert(row.id) {
                return Err(Error::Data {
                    path: "<rows>".into(),
                    message: format!("duplicate sample id {} at row {}", row.id, i + 1),
                });
            }
        }
        Ok(Self { rows, class_count })
    }

    /// Run a classifier over a dataset and collect its outputs, with ids
    /// `0..n` in dataset order.
    pub fn from_predictions(clf: &SoftmaxClassifier, dataset: &LabeledDataset) -> Result<Self> {
        let rows = dataset
            .xs()
            .iter()
            .zip(dataset.ys())
            .enumerate()
            .map(|(i, (x, &y))| {
                if y >= clf.class_count() {
                    return Err(Error::LabelOutOfRange {
                        label: y,
                        classes: clf.class_count(),
                    });
                }
                Ok(TableRow {
                    id: i as u64,
                    label: y,
                    probs: clf.predict_proba(x)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(rows)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[TableRow] {
        &self.rows
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn data_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Data {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Write a probability table. CSV uses the header `id,label,p0,...,p{C-1}`;
/// JSON is an array of `{id, label, probs}` objects. Both print floats in
/// shortest round-trip form, so load-after-save is bit-exact.
pub fn save_probability_table(
    table: &ProbabilityTable,
    path: &Path,
    format: TableFormat,
) -> Result<()> {
    let text = match format {
        TableFormat::Csv => {
            let mut out = String::from("id,label");
            for c in 0..table.class_count() {
                write!(out, ",p{c}").expect("string write");
            }
            out.push('\n');
            for row in table.rows() {
                write!(out, "{},{}", row.id, row.label).expect("string write");
                for p in row.probs.as_slice() {
                    write!(out, ",{p}").expect("string write");
                }
                out.push('\n');
            }
            out
        }
        TableFormat::Json => {
            let mut text = serde_json::to_string_pretty(table.rows())
                .map_err(|e| data_err(path, e.to_string()))?;
            text.push('\n');
            text
        }
    };
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Read and validate a probability table; malformed rows are reported with
/// their 1-based data row number.
pub fn load_probability_table(path: &Path, format: TableFormat) -> Result<ProbabilityTable> {
    match format {
        TableFormat::Csv => load_csv(path),
        TableFormat::Json => load_json(path),
    }
}

fn load_csv(path: &Path) -> Result<ProbabilityTable> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let header = reader
        .headers()
        .map_err(|e| data_err(path, format!("unreadable header: {e}")))?
        .clone();
    if header.len() < 3 || &header[0] != "id" || &header[1] != "label" {
        return Err(data_err(path, "header must start with id,label,p0,..."));
    }
    let class_count = header.len() - 2;
    for c in 0..class_count {
        if &header[c + 2] != format!("p{c}").as_str() {
            return Err(data_err(
                path,
                format!("header column {} should be p{c}", c + 3),
            ));
        }
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row_no = i + 1;
        let record = record.map_err(|e| data_err(path, format!("row {row_no}: {e}")))?;
        if record.len() != header.len() {
            return Err(data_err(
                path,
                format!(
                    "row {row_no}: {} fields, expected {}",
                    record.len(),
                    header.len()
                ),
            ));
        }
        let id: u64 = record[0]
            .parse()
            .map_err(|_| data_err(path, format!("row {row_no}: bad id {:?}", &record[0])))?;
        let label: usize = record[1]
            .parse()
            .map_err(|_| data_err(path, format!("row {row_no}: bad label {:?}", &record[1])))?;
        let probs = record
            .iter()
            .skip(2)
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| data_err(path, format!("row {row_no}: bad probability {f:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let probs = ProbabilityVector::new(probs)
            .map_err(|e| data_err(path, format!("row {row_no}: {e}")))?;
        if label >= class_count {
            return Err(data_err(
                path,
                format!("row {row_no}: label {label} out of range for {class_count} classes"),
            ));
        }
        rows.push(TableRow { id, label, probs });
    }
    ProbabilityTable::from_rows(rows).map_err(|e| match e {
        Error::Data { message, .. } => data_err(path, message),
        other => other,
    })
}

fn load_json(path: &Path) -> Result<ProbabilityTable> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let rows: Vec<TableRow> =
        serde_json::from_str(&text).map_err(|e| data_err(path, e.to_string()))?;
    ProbabilityTable::from_rows(rows).map_err(|e| match e {
        Error::Data { message, .. } => data_err(path, message),
        other => other,
    })
}

/// The analytic HPS inflation constant `M_r = ½·σ_max(W)·r`.
///
/// The HPS score difference under a perturbation `ε` is a difference of
/// softmax outputs; the softmax map is `½`-Lipschitz from logits to
/// probabilities (in ℓ2), and logits move by at most `σ_max(W)·‖ε‖`. APS has
/// no comparably tidy bound and is rejected; supply `--m-r` for APS runs.
pub fn inflation_bound(
    clf: &SoftmaxClassifier,
    budget: &PerturbationBudget,
    score_kind: ScoreKind,
) -> Result<f64> {
    match score_kind {
        ScoreKind::Hps => Ok(0.5 * spectral_norm(&clf.weights) * budget.radius()),
        ScoreKind::Aps => Err(Error::UnsupportedScoreKind {
            operation: "inflation_bound",
            detail: "no analytic APS inflation constant; pass an explicit M_r",
        }),
    }
}

/// Largest singular value of a `C×d` matrix via Jacobi eigenvalue iteration on
/// the `C×C` Gram matrix. Exact for symmetric matrices regardless of eigenvalue
/// ties, which power iteration does not guarantee.
fn spectral_norm(w: &[Vec<f64>]) -> f64 {
    let c = w.len();
    let mut gram = vec![vec![0.0; c]; c];
    for i in 0..c {
        for j in i..c {
            let dot: f64 = w[i].iter().zip(&w[j]).map(|(a, b)| a * b).sum();
            gram[i][j] = dot;
            gram[j][i] = dot;
        }
    }
    max_eigenvalue_symmetric(gram).max(0.0).sqrt()
}

fn max_eigenvalue_symmetric(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    if n == 0 {
        return 0.0;
    }
    let scale = a
        .iter()
        .flatten()
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
        .max(1e-300);
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
            .map(|(p, q)| a[p][q] * a[p][q])
            .sum();
        if off.sqrt() <= 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).fold(f64::NEG_INFINITY, f64::max)
}
