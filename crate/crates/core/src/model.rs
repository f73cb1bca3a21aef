//! Multiclass logistic regression: the local loss `f_p`, its gradient, and
//! evaluation helpers.
//!
//! Every agent's loss is normalized by the *global* sample count `I`, so that
//! summing the local losses over agents gives the centralized objective.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};

/// A `J x K` real matrix. Holds the global model `w` and the per-agent
/// `z_p`, `lambda_p` and noise matrices, which all share one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMatrix(Array2<f64>);

impl ParamMatrix {
    pub fn zeros(features: usize, classes: usize) -> Self {
        Self(Array2::zeros((features, classes)))
    }

    pub fn filled(features: usize, classes: usize, value: f64) -> Self {
        Self(Array2::from_elem((features, classes), value))
    }

    pub fn from_array(entries: Array2<f64>) -> Self {
        Self(entries)
    }

    /// Builds a matrix from row-major entries.
    pub fn from_vec(features: usize, classes: usize, entries: Vec<f64>) -> Result<Self> {
        let len = entries.len();
        Array2::from_shape_vec((features, classes), entries)
            .map(Self)
            .map_err(|_| Error::shape(format!("{} entries", features * classes), len))
    }

    pub fn from_fn(features: usize, classes: usize, f: impl FnMut((usize, usize)) -> f64) -> Self {
        Self(Array2::from_shape_fn((features, classes), f))
    }

    /// `(J, K)`.
    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn as_array_mut(&mut self) -> &mut Array2<f64> {
        &mut self.0
    }

    pub fn into_array(self) -> Array2<f64> {
        self.0
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.0[[j, k]]
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn l1_norm(&self) -> f64 {
        self.0.iter().map(|v| v.abs()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn linf_norm(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Sum of absolute entrywise differences.
    pub fn l1_distance(&self, other: &ParamMatrix) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(Zip::from(&self.0)
            .and(&other.0)
            .fold(0.0, |acc, a, b| acc + (a - b).abs()))
    }

    pub fn ensure_same_shape(&self, other: &ParamMatrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(())
    }

    pub(crate) fn ensure_shape(&self, shape: (usize, usize)) -> Result<()> {
        if self.shape() != shape {
            return Err(Error::shape(
                format!("{shape:?}"),
                format!("{:?}", self.shape()),
            ));
        }
        Ok(())
    }
}

impl From<Array2<f64>> for ParamMatrix {
    fn from(entries: Array2<f64>) -> Self {
        Self(entries)
    }
}

/// One agent's training data: an `I_p x J` feature matrix and an `I_p x K`
/// one-hot label matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentData {
    features: Array2<f64>,
    labels: Array2<f64>,
}

impl AgentData {
    pub fn new(features: Array2<f64>, labels: Array2<f64>) -> Result<Self> {
        if features.nrows() != labels.nrows() {
            return Err(Error::shape(
                format!("{} label rows", features.nrows()),
                labels.nrows(),
            ));
        }
        for (i, row) in labels.rows().into_iter().enumerate() {
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || ones + zeros != row.len() {
                return Err(Error::invalid(format!("label row {i} is not one-hot")));
            }
        }
        if let Some(bad) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite feature in row {}",
                bad / features.ncols().max(1)
            )));
        }
        Ok(Self { features, labels })
    }

    /// Converts class indices to one-hot rows.
    pub fn from_class_indices(
        features: Array2<f64>,
        classes: &[usize],
        num_classes: usize,
    ) -> Result<Self> {
        if features.nrows() != classes.len() {
            return Err(Error::shape(
                format!("{} labels", features.nrows()),
                classes.len(),
            ));
        }
        let mut labels = Array2::zeros((classes.len(), num_classes));
        for (i, &c) in classes.iter().enumerate() {
            if c >= num_classes {
                return Err(Error::invalid(format!(
                    "label {c} in row {i} is out of range for {num_classes} classes"
                )));
            }
            labels[[i, c]] = 1.0;
        }
        Self::new(features, labels)
    }

    pub fn empty(features: usize, classes: usize) -> Self {
        Self {
            features: Array2::zeros((0, features)),
            labels: Array2::zeros((0, classes)),
        }
    }

    pub fn rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows() == 0
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.ncols()
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn labels(&self) -> ArrayView2<'_, f64> {
        self.labels.view()
    }

    /// Class index of row `i`.
    pub fn class_of(&self, i: usize) -> usize {
        self.labels
            .row(i)
            .iter()
            .position(|&v| v == 1.0)
            .expect("labels are one-hot")
    }

    pub fn class_indices(&self) -> Vec<usize> {
        (0..self.rows()).map(|i| self.class_of(i)).collect()
    }

    /// The dataset with row `i` removed.
    pub fn without_row(&self, i: usize) -> AgentData {
        let keep: Vec<usize> = (0..self.rows()).filter(|&r| r != i).collect();
        self.select_rows(&keep)
    }

    pub fn select_rows(&self, rows: &[usize]) -> AgentData {
        AgentData {
            features: self.features.select(Axis(0), rows),
            labels: self.labels.select(Axis(0), rows),
        }
    }

    /// Appends an all-ones feature column.
    pub fn with_bias_column(&self) -> AgentData {
        let mut features = Array2::ones((self.rows(), self.num_features() + 1));
        features
            .slice_mut(ndarray::s![.., ..self.num_features()])
            .assign(&self.features);
        AgentData {
            features,
            labels: self.labels.clone(),
        }
    }

    /// Stacks several datasets with equal column counts.
    pub fn concat(parts: &[AgentData]) -> Result<AgentData> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("cannot concatenate zero datasets"))?;
        let (j, k) = (first.num_features(), first.num_classes());
        for p in parts {
            if p.num_features() != j || p.num_classes() != k {
                return Err(Error::shape(
                    format!("{j} features, {k} classes"),
                    format!("{} features, {} classes", p.num_features(), p.num_classes()),
                ));
            }
        }
        let features: Vec<_> = parts.iter().map(|p| p.features.view()).collect();
        let labels: Vec<_> = parts.iter().map(|p| p.labels.view()).collect();
        Ok(AgentData {
            features: ndarray::concatenate(Axis(0), &features).expect("checked shapes"),
            labels: ndarray::concatenate(Axis(0), &labels).expect("checked shapes"),
        })
    }
}

/// Problem sizes shared by all agents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProblemDims {
    /// `P`
    pub agents: usize,
    /// `J`
    pub features: usize,
    /// `K`
    pub classes: usize,
    /// `I`, the global sample count over all agents.
    pub samples: usize,
    /// Regularization weight `beta`.
    pub beta: f64,
}

impl ProblemDims {
    /// Derives `P`, `J`, `K` and `I` from the agents' datasets.
    pub fn from_agents(agents: &[AgentData], beta: f64) -> Result<Self> {
        let first = agents
            .first()
            .ok_or_else(|| Error::invalid("at least one agent is required"))?;
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::config("beta", "must be a finite value >= 0"));
        }
        let (features, classes) = (first.num_features(), first.num_classes());
        for (p, a) in agents.iter().enumerate() {
            if a.num_features() != features || a.num_classes() != classes {
                return Err(Error::shape(
                    format!("{features} features and {classes} classes"),
                    format!(
                        "agent {p} with {} features and {} classes",
                        a.num_features(),
                        a.num_classes()
                    ),
                ));
            }
        }
        Ok(Self {
            agents: agents.len(),
            features,
            classes,
            samples: agents.iter().map(AgentData::rows).sum(),
            beta,
        })
    }

    pub fn param_shape(&self) -> (usize, usize) {
        (self.features, self.classes)
    }

    fn check(&self, z: &ParamMatrix, data: &AgentData) -> Result<()> {
        z.ensure_shape(self.param_shape())?;
        if data.num_features() != self.features || data.num_classes() != self.classes {
            return Err(Error::shape(
                format!("{}x{} data", self.features, self.classes),
                format!("{}x{} data", data.num_features(), data.num_classes()),
            ));
        }
        if data.rows() > 0 && self.samples == 0 {
            return Err(Error::invalid("global sample count I is zero"));
        }
        Ok(())
    }
}

// ln(1e-300); lower bound on any log-probability.
const MIN_LOG_PROB: f64 = -690.775_527_898_213_7;

fn log_sum_exp(row: ArrayView1<'_, f64>) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax class probabilities `h_k(w; x)` for one feature vector.
pub fn softmax_probs(w: &ParamMatrix, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if x.len() != w.shape().0 {
        return Err(Error::shape(
            format!("feature vector of length {}", w.shape().0),
            x.len(),
        ));
    }
    let mut logits = x.dot(w.as_array());
    softmax_in_place(logits.view_mut());
    Ok(logits)
}

fn softmax_in_place(mut row: ndarray::ArrayViewMut1<'_, f64>) {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    row.mapv_inplace(|v| (v - max).exp());
    let total = row.sum();
    row.mapv_inplace(|v| v / total);
}

/// Row-wise softmax of `X w` minus the one-hot labels, i.e. the `I_p x K`
/// matrix of `h_k(w; x_i) - y_ik`.
pub(crate) fn softmax_residuals(w: &ParamMatrix, data: &AgentData) -> Array2<f64> {
    let mut probs = data.features.dot(w.as_array());
    for row in probs.rows_mut() {
        softmax_in_place(row);
    }
    probs -= &data.labels;
    probs
}

/// Local objective `f_p(z)`: cross-entropy summed over the agent's rows and
/// scaled by `1/I`, plus `(beta/P) ||z||^2`.
pub fn local_loss(z: &ParamMatrix, data: &AgentData, dims: &ProblemDims) -> Result<f64> {
    dims.check(z, data)?;
    let reg = dims.beta / dims.agents as f64 * z.iter().map(|v| v * v).sum::<f64>();
    if data.is_empty() {
        return Ok(reg);
    }
    let logits = data.features.dot(z.as_array());
    let mut total = 0.0;
    for (logit_row, label_row) in logits.rows().into_iter().zip(data.labels.rows()) {
        let lse = log_sum_exp(logit_row);
        for (&logit, &y) in logit_row.iter().zip(label_row.iter()) {
            if y != 0.0 {
                total -= y * (logit - lse).max(MIN_LOG_PROB);
            }
        }
    }
    Ok(total / dims.samples as f64 + reg)
}

/// Gradient of [`local_loss`]:
/// `(1/I) sum_i x_ij (h_k(z; x_i) - y_ik) + (2 beta / P) z_jk`.
pub fn local_gradient(
    z: &ParamMatrix,
    data: &AgentData,
    dims: &ProblemDims,
) -> Result<ParamMatrix> {
    dims.check(z, data)?;
    let reg_scale = 2.0 * dims.beta / dims.agents as f64;
    let mut grad = z.as_array() * reg_scale;
    if !data.is_empty() {
        let residuals = softmax_residuals(z, data);
        let data_term = data.features.t().dot(&residuals);
        grad.scaled_add(1.0 / dims.samples as f64, &data_term);
    }
    Ok(ParamMatrix(grad))
}

fn argmax_lowest(values: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}

/// Predicted class: the most probable class, ties going to the lowest index.
///
/// Softmax is monotone, so this is evaluated on the logits directly.
pub fn predict(w: &ParamMatrix, x: ArrayView1<'_, f64>) -> Result<usize> {
    if x.len() != w.shape().0 {
        return Err(Error::shape(
            format!("feature vector of length {}", w.shape().0),
            x.len(),
        ));
    }
    Ok(argmax_lowest(x.dot(w.as_array()).view()))
}

/// Fraction of rows whose predicted class differs from the label.
pub fn testing_error(w: &ParamMatrix, test: &AgentData) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::invalid("testing error needs a nonempty test set"));
    }
    if test.num_features() != w.shape().0 || test.num_classes() != w.shape().1 {
        return Err(Error::shape(
            format!("{:?}", w.shape()),
            format!("{}x{} test data", test.num_features(), test.num_classes()),
        ));
    }
    let logits = test.features.dot(w.as_array());
    let wrong = logits
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(i, row)| argmax_lowest(row.view()) != test.class_of(*i))
        .count();
    Ok(wrong as f64 / test.rows() as f64)
}

/// `F(z) = sum_p f_p(z_p)`.
pub fn global_objective(
    z_list: &[ParamMatrix],
    agents: &[AgentData],
    dims: &ProblemDims,
) -> Result<f64> {
    if z_list.len() != agents.len() {
        return Err(Error::shape(
            format!("{} parameter matrices", agents.len()),
            z_list.len(),
        ));
    }
    z_list
        .iter()
        .zip(agents)
        .map(|(z, d)| local_loss(z, d, dims))
        .sum()
}
