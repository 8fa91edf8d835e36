//! Training objectives: DINO self-distillation, the dense multi-sensor
//! alignment loss (MSAD) and their weighted sum.
//!
//! Every function here is a pure function of its inputs. Tensor-valued
//! functions keep the autograd graph intact, so the returned scalars can be
//! back-propagated directly. Shapes follow the batch-first convention:
//!
//! * DINO outputs are `(batch, K)` probability or logit matrices, one per view.
//! * Global MSAD embeddings are `(N, D)`; patchwise ones are `(N, T, D)`.

use candle_core::{DType, Device, Tensor, D};

use crate::ops::{l2_normalize_last, log_softmax_last, softmax_last};
use crate::{Error, Result};

/// Probabilities below this value are clamped before taking a logarithm.
pub const LOG_EPSILON: f64 = 1e-8;

/// Tolerance on the unit row-sum invariant of every probability row.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Rows with a squared norm below this are rejected by the MSAD cosine.
const MIN_NORM: f64 = 1e-12;

/// Default MSAD temperature.
pub const DEFAULT_MSAD_TAU: f64 = 0.07;

/// A validated categorical distribution over `K` outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Shape("probability vector must be non-empty".into()));
        }
        if let Some(i) = values.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Internal(format!(
                "probability entry {i} = {} outside [0, 1]",
                values[i]
            )));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::Internal(format!(
                "probability vector sums to {sum}"
            )));
        }
        Ok(Self(values))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn one_hot(k: usize, index: usize) -> Self {
        let mut v = vec![0.0; k];
        v[index] = 1.0;
        Self(v)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.0, (1, self.0.len()), &Device::Cpu)?)
    }
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    Ok(())
}

fn centered_scaled(logits: &Tensor, temperature: f64, center: Option<&Tensor>) -> Result<Tensor> {
    check_temperature(temperature)?;
    let k = logits.dim(D::Minus1)?;
    let shifted = match center {
        Some(c) => {
            if c.elem_count() != k {
                return Err(Error::Shape(format!(
                    "center has {} entries but logits have {k}",
                    c.elem_count()
                )));
            }
            logits.broadcast_sub(&c.flatten_all()?.to_dtype(logits.dtype())?)?
        }
        None => logits.clone(),
    };
    Ok((shifted / temperature)?)
}

/// `softmax((logits - center) / temperature)` along the last axis.
///
/// The center is only passed on the teacher branch.
pub fn sharpen(logits: &Tensor, temperature: f64, center: Option<&Tensor>) -> Result<Tensor> {
    softmax_last(&centered_scaled(logits, temperature, center)?)
}

/// Log of [`sharpen`], computed stably. Used on the student branch.
pub fn sharpen_log(logits: &Tensor, temperature: f64, center: Option<&Tensor>) -> Result<Tensor> {
    log_softmax_last(&centered_scaled(logits, temperature, center)?)
}

/// Single-vector form of [`sharpen`].
pub fn dino_sharpen(
    logits: &[f64],
    temperature: f64,
    center: Option<&[f64]>,
) -> Result<ProbabilityVector> {
    let l = Tensor::from_slice(logits, (1, logits.len()), &Device::Cpu)?;
    let c = center
        .map(|c| Tensor::from_slice(c, c.len(), &Device::Cpu))
        .transpose()?;
    let p = sharpen(&l, temperature, c.as_ref())?;
    ProbabilityVector::new(p.flatten_all()?.to_vec1::<f64>()?)
}

/// Mean cross-entropy over every (teacher global view `g`, student view `v`)
/// pair with `v != g`. `student_log[g]` must be the student's view of the same
/// crop as `teacher[g]`, so global views come first in the student list.
fn cross_view_entropy(student_log: &[Tensor], teacher: &[Tensor]) -> Result<Tensor> {
    if student_log.is_empty() || teacher.is_empty() {
        return Err(Error::Usage(
            "DINO loss needs at least one student and one teacher view".into(),
        ));
    }
    if teacher.len() > student_log.len() {
        return Err(Error::Usage(format!(
            "{} teacher views but only {} student views",
            teacher.len(),
            student_log.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    let mut terms = 0usize;
    for (g, t) in teacher.iter().enumerate() {
        for (v, s) in student_log.iter().enumerate() {
            if v == g {
                continue;
            }
            if s.dims() != t.dims() {
                return Err(Error::Shape(format!(
                    "student view {v} has shape {:?}, teacher view {g} has {:?}",
                    s.dims(),
                    t.dims()
                )));
            }
            let ce = (t * s)?.sum(D::Minus1)?.neg()?.mean_all()?;
            total = Some(match total {
                Some(acc) => (acc + ce)?,
                None => ce,
            });
            terms += 1;
        }
    }
    match total {
        Some(t) => Ok((t / terms as f64)?),
        None => Err(Error::Usage(
            "DINO loss has no (teacher, student) pair with distinct views".into(),
        )),
    }
}

fn check_rows_stochastic(p: &Tensor, what: &str) -> Result<()> {
    let rows = p.flatten_to(D::Minus2)?.to_dtype(DType::F64)?;
    let rows = rows.reshape(((), p.dim(D::Minus1)?))?.to_vec2::<f64>()?;
    for (i, row) in rows.iter().enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOLERANCE || row.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Internal(format!(
                "{what} row {i} is not a distribution (sum {s})"
            )));
        }
    }
    Ok(())
}

/// DINO cross-entropy on probability inputs.
///
/// `student` holds one `(batch, K)` probability matrix per view with the
/// global views first; `teacher` holds the global views only.
pub fn dino_loss(student: &[Tensor], teacher: &[Tensor]) -> Result<Tensor> {
    for (i, t) in teacher.iter().enumerate() {
        check_rows_stochastic(t, &format!("teacher view {i}"))?;
    }
    let logs = student
        .iter()
        .enumerate()
        .map(|(i, s)| {
            check_rows_stochastic(s, &format!("student view {i}"))?;
            Ok(s.maximum(LOG_EPSILON)?.log()?)
        })
        .collect::<Result<Vec<_>>>()?;
    cross_view_entropy(&logs, teacher)
}

/// DINO cross-entropy starting from raw student logits; the path used in training.
pub fn dino_loss_from_logits(
    student_logits: &[Tensor],
    student_temperature: f64,
    teacher: &[Tensor],
) -> Result<Tensor> {
    let logs = student_logits
        .iter()
        .map(|s| sharpen_log(s, student_temperature, None))
        .collect::<Result<Vec<_>>>()?;
    cross_view_entropy(&logs, teacher)
}

/// DINO loss over single probability vectors (batch of one per view).
pub fn dino_loss_vectors(
    student: &[ProbabilityVector],
    teacher: &[ProbabilityVector],
) -> Result<f64> {
    let s = student.iter().map(|p| p.to_tensor()).collect::<Result<Vec<_>>>()?;
    let t = teacher.iter().map(|p| p.to_tensor()).collect::<Result<Vec<_>>>()?;
    Ok(dino_loss(&s, &t)?.to_scalar::<f64>()?)
}

/// `momentum * center + (1 - momentum) * mean(teacher_batch_outputs, axis 0)`.
///
/// The result is detached; the center never carries gradient.
pub fn update_center(center: &Tensor, teacher_batch_outputs: &Tensor, momentum: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Parameter(format!(
            "center momentum must be in [0, 1], got {momentum}"
        )));
    }
    let k = center.elem_count();
    let (_, kb) = teacher_batch_outputs.dims2()?;
    if kb != k {
        return Err(Error::Shape(format!(
            "center has {k} entries but teacher outputs have {kb}"
        )));
    }
    let mean = teacher_batch_outputs
        .detach()
        .to_dtype(center.dtype())?
        .mean(0)?
        .reshape(center.shape())?;
    Ok(((center.detach() * momentum)? + (mean * (1.0 - momentum))?)?)
}

/// Row-stochastic cross-sensor similarity matrices.
///
/// `pa[i][j]` is the probability that sensor-A item `i` matches sensor-B item
/// `j`; `pb` is the same with the sensors exchanged. `token_count` is zero in
/// global-token mode.
#[derive(Debug, Clone)]
pub struct SimilarityMatrices {
    pub pa: Tensor,
    pub pb: Tensor,
    pub tau: f64,
    pub token_count: usize,
}

impl SimilarityMatrices {
    pub fn batch_size(&self) -> usize {
        self.pa.dims()[0]
    }

    /// The same matrices with the sensor roles exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            pa: self.pb.clone(),
            pb: self.pa.clone(),
            tau: self.tau,
            token_count: self.token_count,
        }
    }
}

fn check_nonzero_norms(tokens: &Tensor, side: &str) -> Result<()> {
    let (n, t, _) = tokens.dims3()?;
    let sq = tokens
        .detach()
        .to_dtype(DType::F64)?
        .sqr()?
        .sum(D::Minus1)?
        .to_vec2::<f64>()?;
    for (i, row) in sq.iter().enumerate().take(n) {
        for (k, v) in row.iter().enumerate().take(t) {
            if !(*v > MIN_NORM) {
                return Err(Error::Numeric(if t == 1 {
                    format!("sensor {side} embedding {i} has zero norm")
                } else {
                    format!("sensor {side} embedding {i}, token {k} has zero norm")
                }));
            }
        }
    }
    Ok(())
}

/// `(N, T, D)` inputs to per-token softmaxes averaged over tokens.
fn token_averaged_probabilities(ta: &Tensor, tb: &Tensor, tau: f64) -> Result<(Tensor, Tensor)> {
    check_temperature(tau)?;
    check_nonzero_norms(ta, "A")?;
    check_nonzero_norms(tb, "B")?;
    // (T, N, D) so the token axis becomes a matmul batch axis.
    let an = l2_normalize_last(ta, 0.0)?.transpose(0, 1)?.contiguous()?;
    let bn = l2_normalize_last(tb, 0.0)?.transpose(0, 1)?.contiguous()?;
    let sims = an.matmul(&bn.t()?)?;
    let pa = softmax_last(&(&sims / tau)?)?.mean(0)?;
    let pb = softmax_last(&(sims.t()? / tau)?)?.mean(0)?;
    Ok((pa, pb))
}

/// Cross-sensor probabilities from one global embedding per item.
pub fn msad_probabilities_global(va: &Tensor, vb: &Tensor, tau: f64) -> Result<SimilarityMatrices> {
    let (na, da) = va.dims2()?;
    let (nb, db) = vb.dims2()?;
    if (na, da) != (nb, db) {
        return Err(Error::Shape(format!(
            "sensor A embeddings are {na}x{da}, sensor B embeddings are {nb}x{db}"
        )));
    }
    let (pa, pb) = token_averaged_probabilities(&va.unsqueeze(1)?, &vb.unsqueeze(1)?, tau)?;
    Ok(SimilarityMatrices {
        pa,
        pb,
        tau,
        token_count: 0,
    })
}

/// Cross-sensor probabilities computed per patch token and averaged over the
/// `T` tokens, so each row stays a distribution.
pub fn msad_probabilities_patchwise(
    tokens_a: &Tensor,
    tokens_b: &Tensor,
    tau: f64,
) -> Result<SimilarityMatrices> {
    let sa = tokens_a.dims3()?;
    let sb = tokens_b.dims3()?;
    if sa != sb {
        return Err(Error::Shape(format!(
            "sensor A tokens are {sa:?} (N, T, D), sensor B tokens are {sb:?}"
        )));
    }
    let (pa, pb) = token_averaged_probabilities(tokens_a, tokens_b, tau)?;
    Ok(SimilarityMatrices {
        pa,
        pb,
        tau,
        token_count: sa.1,
    })
}

/// Label-smoothed pairing targets: `1 - alpha` on the diagonal and
/// `alpha / (n - 1)` elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMatrix {
    n: usize,
    alpha: f64,
    values: Vec<f64>,
}

impl TargetMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.values, (self.n, self.n), device)?.to_dtype(dtype)?)
    }
}

pub fn smooth_targets(n: usize, alpha: f64) -> Result<TargetMatrix> {
    if n == 0 {
        return Err(Error::Parameter("target matrix needs n >= 1".into()));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Parameter(format!(
            "smoothing alpha must be in [0, 1), got {alpha}"
        )));
    }
    if alpha > 0.0 && n == 1 {
        return Err(Error::Parameter(
            "label smoothing with alpha > 0 needs a batch of at least 2".into(),
        ));
    }
    let off = if n > 1 { alpha / (n - 1) as f64 } else { 0.0 };
    let mut values = vec![off; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0 - alpha;
    }
    Ok(TargetMatrix { n, alpha, values })
}

/// MSAD loss value plus the number of probabilities clamped at [`LOG_EPSILON`].
#[derive(Debug, Clone)]
pub struct MsadLoss {
    pub value: Tensor,
    pub clamped: usize,
}

fn count_below(p: &Tensor, eps: f64) -> Result<usize> {
    Ok(p.detach()
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?
        .into_iter()
        .filter(|v| *v < eps)
        .count())
}

/// `-(1 / 2N) * sum_ij (y_ij log pa_ij + y_ij log pb_ij)` with the same
/// smoothed targets for both directions.
pub fn msad_loss(sim: &SimilarityMatrices, targets: &TargetMatrix) -> Result<MsadLoss> {
    let n = sim.batch_size();
    if targets.n() != n || sim.pb.dims() != [n, n] || sim.pa.dims() != [n, n] {
        return Err(Error::Shape(format!(
            "similarity matrices are {:?}/{:?} but targets are {}x{}",
            sim.pa.dims(),
            sim.pb.dims(),
            targets.n(),
            targets.n()
        )));
    }
    let clamped = count_below(&sim.pa, LOG_EPSILON)? + count_below(&sim.pb, LOG_EPSILON)?;
    if clamped > 0 {
        log::debug!("msad: clamped {clamped} probabilities at {LOG_EPSILON:e}");
    }
    let y = targets.to_tensor(sim.pa.dtype(), sim.pa.device())?;
    let log_a = sim.pa.maximum(LOG_EPSILON)?.log()?;
    let log_b = sim.pb.maximum(LOG_EPSILON)?.log()?;
    let total = ((&y * log_a)? + (&y * log_b)?)?.sum_all()?;
    let value = (total * (-1.0 / (2.0 * n as f64)))?;
    Ok(MsadLoss { value, clamped })
}

/// Weight of the MSAD term in the combined objective. The DINO term always
/// has weight one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    lambda: f64,
}

impl LossWeights {
    pub const DINO_WEIGHT: f64 = 1.0;

    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Parameter(format!(
                "MSAD weight lambda must be finite and >= 0, got {lambda}"
            )));
        }
        Ok(Self { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 0.1 }
    }
}

/// `dino + lambda * msad`. With `lambda == 0` the DINO tensor is returned
/// untouched so no MSAD gradient (or NaN) can leak in.
pub fn xstars_loss(dino: &Tensor, msad: &Tensor, weights: LossWeights) -> Result<Tensor> {
    if weights.lambda == 0.0 {
        return Ok(dino.clone());
    }
    Ok((dino + (msad * weights.lambda)?)?)
}

/// Scalar form of [`xstars_loss`].
pub fn xstars_loss_value(dino: f64, msad: f64, weights: LossWeights) -> f64 {
    if weights.lambda == 0.0 {
        dino
    } else {
        dino + weights.lambda * msad
    }
}
