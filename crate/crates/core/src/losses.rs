//! Training objectives: masked binary cross-entropy (hard loss), the
//! symmetric NT-Xent contrastive objective (projector training and soft
//! loss), a mean-squared-error soft loss, and the adaptive coefficient
//! balancer that weighs hard against soft loss.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par;
use crate::tensor::{dot, CustomOp, Matrix, Tape, TensorError, Var};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside BCE.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("loss mask is empty")]
    EmptyMask,
    #[error("mask index {index} out of range for {len} rows")]
    MaskOutOfRange { index: usize, len: usize },
    #[error("{0}")]
    Shape(String),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("balancer used before its initial losses were recorded")]
    BalancerNotInitialized,
    #[error("balancer needs positive loss values, got L_c={hard}, L_kd={soft}")]
    NonPositiveLoss { hard: f64, soft: f64 },
    #[error("invalid balancer setting: {0}")]
    BalancerConfig(String),
    #[error("coefficients alpha={alpha}, beta={beta} must lie in [0, 1] and sum to 1")]
    Coefficients { alpha: f64, beta: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

// ---------------------------------------------------------------------------
// Binary cross-entropy

struct BceOp {
    labels: Vec<f64>,
    mask: Vec<usize>,
}

impl CustomOp for BceOp {
    fn name(&self) -> &'static str {
        "bce"
    }

    fn backward(&self, inputs: &[&Matrix], _: &Matrix, out_grad: &Matrix, needs: &[bool]) -> Vec<Option<Matrix>> {
        if !needs[0] {
            return vec![None];
        }
        let p = inputs[0];
        let scale = out_grad.get(0, 0) / self.mask.len() as f64;
        let mut grad = Matrix::zeros(p.rows(), 1);
        for &i in &self.mask {
            let pi = p.get(i, 0);
            if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&pi) {
                continue;
            }
            let y = self.labels[i];
            let g = grad.get(i, 0) + scale * (-y / pi + (1.0 - y) / (1.0 - pi));
            grad.set(i, 0, g);
        }
        vec![Some(grad)]
    }
}

/// Mean binary cross-entropy of the probability column `probs` against
/// `labels`, over the nodes in `mask`.
pub fn bce(tape: &mut Tape, probs: Var, labels: &[u8], mask: &[usize]) -> Result<Var, LossError> {
    let p = tape.value(probs);
    if p.cols() != 1 || p.rows() != labels.len() {
        return Err(LossError::Shape(format!(
            "bce expects a {}x1 probability column, got {:?}",
            labels.len(),
            p.shape()
        )));
    }
    if mask.is_empty() {
        return Err(LossError::EmptyMask);
    }
    let mut total = 0.0;
    for &i in mask {
        if i >= labels.len() {
            return Err(LossError::MaskOutOfRange { index: i, len: labels.len() });
        }
        let pi = p.get(i, 0).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        total -= if labels[i] == 1 { pi.ln() } else { (1.0 - pi).ln() };
    }
    let value = Matrix::scalar(total / mask.len() as f64);
    let op = BceOp {
        labels: labels.iter().map(|&y| y as f64).collect(),
        mask: mask.to_vec(),
    };
    Ok(tape.custom(&[probs], value, Box::new(op))?)
}

// ---------------------------------------------------------------------------
// NT-Xent

/// Contrastive objective settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    /// Temperature `tau > 0`.
    pub tau: f64,
    /// Apply a learnable linear map to both sides before the cosine.
    pub sim_head: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            sim_head: false,
        }
    }
}

/// Per-row log-denominators are kept shifted by `1/tau` so every exponent
/// is `<= 0`.
fn shifted_exp(sim: f64, tau: f64) -> f64 {
    ((sim - 1.0) / tau).exp()
}

/// `D_i = sum_j e(x_i . y_j) + sum_{j != i} e(x_i . x_j)` for every row of
/// `x`, with unit-norm rows and shifted exponentials.
fn denominators(x: &Matrix, y: &Matrix, tau: f64) -> Vec<f64> {
    par::map_range(x.rows(), |i| {
        let xi = x.row(i);
        let mut cross = 0.0;
        for j in 0..y.rows() {
            cross += shifted_exp(dot(xi, y.row(j)), tau);
        }
        let mut own = 0.0;
        for j in 0..x.rows() {
            if j != i {
                own += shifted_exp(dot(xi, x.row(j)), tau);
            }
        }
        cross + own
    })
}

/// Gradient of the summed per-anchor losses w.r.t. the rows of `x`, before
/// the `1 / (2 n tau)` factor. `dx`, `dy` are the shifted denominators of
/// the `x`- and `y`-anchored terms.
fn side_gradient(x: &Matrix, y: &Matrix, dx: &[f64], dy: &[f64], tau: f64) -> Matrix {
    let k = x.cols();
    let mut out = Matrix::zeros(x.rows(), k);
    par::for_each_row(out.as_mut_slice(), k, |i, row| {
        let xi = x.row(i);
        let inv_i = 1.0 / dx[i];
        for j in 0..y.rows() {
            let yj = y.row(j);
            let w = shifted_exp(dot(xi, yj), tau) * (inv_i + 1.0 / dy[j]);
            for (o, &v) in row.iter_mut().zip(yj) {
                *o += w * v;
            }
        }
        for (o, &v) in row.iter_mut().zip(y.row(i)) {
            *o -= 2.0 * v;
        }
        for j in 0..x.rows() {
            if j == i {
                continue;
            }
            let xj = x.row(j);
            let w = shifted_exp(dot(xi, xj), tau) * (inv_i + 1.0 / dx[j]);
            for (o, &v) in row.iter_mut().zip(xj) {
                *o += w * v;
            }
        }
    });
    out
}

/// Above this many rows the similarity blocks are not materialised.
pub const DENSE_ROW_LIMIT: usize = 4096;

/// Exponentiated similarity blocks `E_ab`, `E_aa`, `E_bb` (self blocks with
/// a zero diagonal), all shifted by `1/tau`.
struct DenseBlocks {
    ab: Matrix,
    aa: Matrix,
    bb: Matrix,
}

fn exp_block(x: &Matrix, y: &Matrix, tau: f64) -> Matrix {
    let mut s = x.matmul_nt(y).expect("equal widths");
    let cols = s.cols();
    par::for_each_row(s.as_mut_slice(), cols, |_, row| {
        for v in row.iter_mut() {
            *v = shifted_exp(*v, tau);
        }
    });
    s
}

/// Symmetric self block: exponentials for the upper triangle only, then
/// mirrored; zero diagonal.
fn exp_self_block(x: &Matrix, tau: f64) -> Matrix {
    let mut s = x.matmul_nt(x).expect("equal widths");
    let n = s.cols();
    par::for_each_row(s.as_mut_slice(), n, |i, row| {
        row[i] = 0.0;
        for v in &mut row[i + 1..] {
            *v = shifted_exp(*v, tau);
        }
    });
    for i in 0..n {
        for j in 0..i {
            let v = s.get(j, i);
            s.set(i, j, v);
        }
    }
    s
}

impl DenseBlocks {
    fn new(a: &Matrix, b: &Matrix, tau: f64) -> Self {
        Self {
            ab: exp_block(a, b, tau),
            aa: exp_self_block(a, tau),
            bb: exp_self_block(b, tau),
        }
    }

    fn denominators(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.ab.rows();
        let da: Vec<f64> = (0..n).map(|i| self.ab.row(i).iter().sum::<f64>() + self.aa.row(i).iter().sum::<f64>()).collect();
        let mut db: Vec<f64> = (0..n).map(|i| self.bb.row(i).iter().sum::<f64>()).collect();
        let mut col = vec![0.0; n];
        for i in 0..n {
            for (c, &v) in col.iter_mut().zip(self.ab.row(i)) {
                *c += v;
            }
        }
        for (d, c) in db.iter_mut().zip(col) {
            *d += c;
        }
        (da, db)
    }
}

/// `W[i][j] = e[i][j] * (inv_row[i] + inv_col[j])`.
fn weighted(e: &Matrix, inv_row: &[f64], inv_col: &[f64]) -> Matrix {
    let mut w = e.clone();
    let cols = w.cols();
    par::for_each_row(w.as_mut_slice(), cols, |i, row| {
        let r = inv_row[i];
        for (v, &c) in row.iter_mut().zip(inv_col) {
            *v *= r + c;
        }
    });
    w
}

/// `w x` for an `n x n` weight block, computed with long inner loops.
fn block_times(w: &Matrix, x: &Matrix) -> Matrix {
    w.matmul_nt(&x.transpose()).expect("shapes")
}

/// `wᵀ x` for an `n x n` weight block.
fn block_t_times(w: &Matrix, x: &Matrix) -> Matrix {
    x.matmul_tn(w).expect("shapes").transpose()
}

struct NtXentOp {
    tau: f64,
    denom_a: Vec<f64>,
    denom_b: Vec<f64>,
    dense: Option<DenseBlocks>,
}

impl CustomOp for NtXentOp {
    fn name(&self) -> &'static str {
        "nt_xent"
    }

    fn backward(&self, inputs: &[&Matrix], _: &Matrix, out_grad: &Matrix, needs: &[bool]) -> Vec<Option<Matrix>> {
        let (za, zb) = (inputs[0], inputs[1]);
        let n = za.rows() as f64;
        let factor = out_grad.get(0, 0) / (2.0 * n * self.tau);
        let (da, db) = (&self.denom_a, &self.denom_b);
        match &self.dense {
            Some(e) => {
                let inv_a: Vec<f64> = da.iter().map(|d| 1.0 / d).collect();
                let inv_b: Vec<f64> = db.iter().map(|d| 1.0 / d).collect();
                let p_ab = weighted(&e.ab, &inv_a, &inv_b);
                let ga = needs[0].then(|| {
                    let mut g = block_times(&p_ab, zb);
                    g.add_assign(&block_times(&weighted(&e.aa, &inv_a, &inv_a), za)).expect("shapes");
                    g.axpy(-2.0, zb).expect("shapes");
                    g.scale(factor)
                });
                let gb = needs[1].then(|| {
                    let mut g = block_t_times(&p_ab, za);
                    g.add_assign(&block_times(&weighted(&e.bb, &inv_b, &inv_b), zb)).expect("shapes");
                    g.axpy(-2.0, za).expect("shapes");
                    g.scale(factor)
                });
                vec![ga, gb]
            }
            None => {
                let ga = needs[0].then(|| side_gradient(za, zb, da, db, self.tau).scale(factor));
                let gb = needs[1].then(|| side_gradient(zb, za, db, da, self.tau).scale(factor));
                vec![ga, gb]
            }
        }
    }
}

/// Symmetric NT-Xent over unit-norm rows: the mean over `i` of
/// `(l(a_i, b_i) + l(b_i, a_i)) / 2`. Up to [`DENSE_ROW_LIMIT`] rows the
/// exponentiated similarity blocks are kept for the backward pass; beyond
/// it memory stays `O(n k)` and similarities are recomputed.
fn nt_xent_normalized(tape: &mut Tape, za: Var, zb: Var, tau: f64, dense: bool) -> Result<Var, LossError> {
    let (a, b) = (tape.value(za), tape.value(zb));
    let (blocks, denom_a, denom_b) = if dense {
        let blocks = DenseBlocks::new(a, b, tau);
        let (da, db) = blocks.denominators();
        (Some(blocks), da, db)
    } else {
        (None, denominators(a, b, tau), denominators(b, a, tau))
    };
    let n = a.rows();
    let mut total = 0.0;
    for i in 0..n {
        let pos = dot(a.row(i), b.row(i));
        total += -2.0 * (pos - 1.0) / tau + denom_a[i].ln() + denom_b[i].ln();
    }
    let value = Matrix::scalar(total / (2.0 * n as f64));
    let op = NtXentOp {
        tau,
        denom_a,
        denom_b,
        dense: blocks,
    };
    Ok(tape.custom(&[za, zb], value, Box::new(op))?)
}

/// Learnable similarity head `x W + b` applied to both sides.
#[derive(Clone, Copy, Debug)]
pub struct SimHead {
    pub weight: Var,
    pub bias: Var,
}

/// Contrastive loss between row-aligned representations `h` and
/// `h_prime` (row `i` of each forms the positive pair).
pub fn nt_xent(
    tape: &mut Tape,
    h: Var,
    h_prime: Var,
    tau: f64,
    head: Option<SimHead>,
) -> Result<Var, LossError> {
    if !(tau > 0.0) {
        return Err(LossError::Temperature(tau));
    }
    let (sa, sb) = (tape.value(h).shape(), tape.value(h_prime).shape());
    if sa != sb || sa.0 == 0 {
        return Err(LossError::Shape(format!("nt_xent inputs {sa:?} and {sb:?}")));
    }
    let (mut a, mut b) = (h, h_prime);
    if let Some(SimHead { weight, bias }) = head {
        let pa = tape.matmul(a, weight)?;
        a = tape.add_row_bias(pa, bias)?;
        let pb = tape.matmul(b, weight)?;
        b = tape.add_row_bias(pb, bias)?;
    }
    let za = tape.row_l2_normalize(a)?;
    let zb = tape.row_l2_normalize(b)?;
    nt_xent_normalized(tape, za, zb, tau, sa.0 <= DENSE_ROW_LIMIT)
}

/// [`nt_xent`] forced onto the recomputing `O(n k)`-memory kernel.
pub fn nt_xent_streamed(tape: &mut Tape, h: Var, h_prime: Var, tau: f64) -> Result<Var, LossError> {
    if !(tau > 0.0) {
        return Err(LossError::Temperature(tau));
    }
    let (sa, sb) = (tape.value(h).shape(), tape.value(h_prime).shape());
    if sa != sb || sa.0 == 0 {
        return Err(LossError::Shape(format!("nt_xent inputs {sa:?} and {sb:?}")));
    }
    let za = tape.row_l2_normalize(h)?;
    let zb = tape.row_l2_normalize(h_prime)?;
    nt_xent_normalized(tape, za, zb, tau, false)
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64, LossError> {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(LossError::Tensor(TensorError::ZeroRow { op: "cosine", row: 0 }));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Single anchor term `l(h_i, h'_i)` evaluated directly from its
/// definition with plain cosine similarity:
/// `-log( e^{s(h_i,h'_i)/tau} / (sum_j e^{s(h_i,h'_j)/tau} + sum_{j!=i} e^{s(h_i,h_j)/tau}) )`.
pub fn nt_xent_pair(i: usize, h: &Matrix, h_prime: &Matrix, tau: f64) -> Result<f64, LossError> {
    if h.shape() != h_prime.shape() || i >= h.rows() {
        return Err(LossError::Shape(format!("pair {i} of {:?}/{:?}", h.shape(), h_prime.shape())));
    }
    if !(tau > 0.0) {
        return Err(LossError::Temperature(tau));
    }
    let hi = h.row(i);
    let positive = (cosine(hi, h_prime.row(i))? / tau).exp();
    let mut denom = 0.0;
    for j in 0..h.rows() {
        denom += (cosine(hi, h_prime.row(j))? / tau).exp();
        if j != i {
            denom += (cosine(hi, h.row(j))? / tau).exp();
        }
    }
    Ok(-(positive / denom).ln())
}

/// Mean cosine similarity of row-aligned pairs.
pub fn mean_positive_cosine(h: &Matrix, h_prime: &Matrix) -> Result<f64, LossError> {
    if h.shape() != h_prime.shape() || h.rows() == 0 {
        return Err(LossError::Shape(format!("{:?} vs {:?}", h.shape(), h_prime.shape())));
    }
    let mut total = 0.0;
    for i in 0..h.rows() {
        total += cosine(h.row(i), h_prime.row(i))?;
    }
    Ok(total / h.rows() as f64)
}

/// Mean squared difference, the low-memory alternative soft loss.
pub fn mse(tape: &mut Tape, h: Var, target: Var) -> Result<Var, LossError> {
    let diff = tape.sub(h, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq)?)
}

// ---------------------------------------------------------------------------
// Adaptive coefficients

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub alpha: f64,
    pub beta: f64,
}

impl Coefficients {
    pub fn from_alpha(alpha: f64) -> Self {
        Self { alpha, beta: 1.0 - alpha }
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.alpha)
            && (0.0..=1.0).contains(&self.beta)
            && self.alpha + self.beta == 1.0
    }
}

/// Tracks the relative decrease of the hard and soft losses and assigns
/// the larger coefficient to the one that has decreased less.
#[derive(Clone, Debug)]
pub struct Balancer {
    rate: f64,
    gamma: f64,
    initial: Option<(f64, f64)>,
    alpha_prev: f64,
}

impl Balancer {
    /// `rate` is the smoothing rate in `[0, 1]`, `gamma > 0` the exponent
    /// applied to the relative losses.
    pub fn new(rate: f64, gamma: f64) -> Result<Self, LossError> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(LossError::BalancerConfig(format!("rate {rate} outside [0, 1]")));
        }
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(LossError::BalancerConfig(format!("gamma {gamma} must be positive")));
        }
        Ok(Self {
            rate,
            gamma,
            initial: None,
            alpha_prev: 0.5,
        })
    }

    pub fn initial_losses(&self) -> Option<(f64, f64)> {
        self.initial
    }

    pub fn previous_alpha(&self) -> f64 {
        self.alpha_prev
    }

    /// Records the epoch-0 losses; epoch 0 uses `alpha = beta = 0.5`.
    pub fn start(&mut self, hard: f64, soft: f64) -> Result<Coefficients, LossError> {
        check_positive(hard, soft)?;
        self.initial = Some((hard, soft));
        self.alpha_prev = 0.5;
        Ok(Coefficients::from_alpha(0.5))
    }

    /// Coefficients for an epoch `t >= 1` given that epoch's losses.
    pub fn update(&mut self, hard: f64, soft: f64) -> Result<Coefficients, LossError> {
        let (hard0, soft0) = self.initial.ok_or(LossError::BalancerNotInitialized)?;
        check_positive(hard, soft)?;
        let rel_hard = (hard / hard0).powf(self.gamma);
        let rel_soft = (soft / soft0).powf(self.gamma);
        let share = rel_hard / (rel_hard + rel_soft);
        let alpha = (self.rate * share + (1.0 - self.rate) * self.alpha_prev).clamp(0.0, 1.0);
        self.alpha_prev = alpha;
        Ok(Coefficients::from_alpha(alpha))
    }
}

fn check_positive(hard: f64, soft: f64) -> Result<(), LossError> {
    if hard > 0.0 && soft > 0.0 && hard.is_finite() && soft.is_finite() {
        Ok(())
    } else {
        Err(LossError::NonPositiveLoss { hard, soft })
    }
}

/// `alpha * hard + beta * soft`. The coefficients are constants; no
/// gradient flows into them.
pub fn distill_loss(tape: &mut Tape, hard: Var, soft: Var, c: Coefficients) -> Result<Var, LossError> {
    if !c.is_valid() {
        return Err(LossError::Coefficients {
            alpha: c.alpha,
            beta: c.beta,
        });
    }
    let a = tape.scale(hard, c.alpha)?;
    let b = tape.scale(soft, c.beta)?;
    Ok(tape.add(a, b)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn bce_value(p: &[f64], y: &[u8]) -> f64 {
        let mut tape = Tape::new();
        let v = tape.leaf(Matrix::column(p), true);
        let mask: Vec<usize> = (0..p.len()).collect();
        let l = bce(&mut tape, v, y, &mask).unwrap();
        tape.value(l).get(0, 0)
    }

    #[test]
    fn bce_reference_values() {
        assert!((bce_value(&[0.5, 0.5, 0.5], &[1, 0, 1]) - 2f64.ln()).abs() < 1e-15);
        assert!(bce_value(&[1.0, 0.0], &[1, 0]) < 1e-11);
        assert!((bce_value(&[0.9], &[1]) - 0.105_360_515_657_826_3).abs() < 1e-12);
    }

    #[test]
    fn bce_empty_mask_rejected() {
        let mut tape = Tape::new();
        let v = tape.leaf(Matrix::column(&[0.5]), true);
        assert!(matches!(bce(&mut tape, v, &[1], &[]), Err(LossError::EmptyMask)));
    }

    fn fused(h: &Matrix, hp: &Matrix, tau: f64) -> f64 {
        let mut tape = Tape::new();
        let a = tape.leaf(h.clone(), true);
        let b = tape.leaf(hp.clone(), true);
        let l = nt_xent(&mut tape, a, b, tau, None).unwrap();
        tape.value(l).get(0, 0)
    }

    #[test]
    fn pair_reference_values() {
        // n = 2, identical rows: every similarity is 1 -> log(2n - 1).
        let same = m(&[&[1.0, 2.0], &[1.0, 2.0]]);
        assert!((nt_xent_pair(0, &same, &same, 0.7).unwrap() - 3f64.ln()).abs() < 1e-12);
        // positive 1, negatives -1, tau 0.5.
        let h = m(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        let expected = (1.0 + 2.0 * (-4f64).exp()).ln();
        assert!((nt_xent_pair(0, &h, &h, 0.5).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.035_976).abs() < 1e-6);
        // orthonormal, tau 1.
        let e = Matrix::identity(2);
        let expected = -(1f64.exp() / (1f64.exp() + 2.0)).ln();
        assert!((nt_xent_pair(1, &e, &e, 1.0).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.551_445).abs() < 1e-6);
    }

    #[test]
    fn fused_matches_pairwise_definition() {
        let h = m(&[&[0.3, -1.0, 2.0], &[1.5, 0.2, -0.4], &[-0.7, 0.9, 0.1], &[0.2, 0.2, 0.9]]);
        let hp = m(&[&[0.1, -0.8, 1.0], &[2.0, 0.1, 0.0], &[-1.0, 1.0, 0.5], &[0.4, -0.3, 0.6]]);
        for tau in [0.2, 0.5, 1.3] {
            let direct: f64 = (0..4)
                .map(|i| nt_xent_pair(i, &h, &hp, tau).unwrap() + nt_xent_pair(i, &hp, &h, tau).unwrap())
                .sum::<f64>()
                / 8.0;
            assert!((fused(&h, &hp, tau) - direct).abs() < 1e-12, "tau {tau}");
            assert!((fused(&h, &hp, tau) - fused(&hp, &h, tau)).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_and_streamed_kernels_agree() {
        let h = m(&[&[0.3, -1.0, 2.0], &[1.5, 0.2, -0.4], &[-0.7, 0.9, 0.1], &[0.2, 0.2, 0.9], &[1.0, 1.0, 1.0]]);
        let hp = m(&[&[0.1, -0.8, 1.0], &[2.0, 0.1, 0.0], &[-1.0, 1.0, 0.5], &[0.4, -0.3, 0.6], &[0.0, 0.5, -1.0]]);
        let run = |streamed: bool| {
            let mut tape = Tape::new();
            let a = tape.leaf(h.clone(), true);
            let b = tape.leaf(hp.clone(), true);
            let l = if streamed {
                nt_xent_streamed(&mut tape, a, b, 0.4).unwrap()
            } else {
                nt_xent(&mut tape, a, b, 0.4, None).unwrap()
            };
            tape.backward(l).unwrap();
            (tape.value(l).get(0, 0), tape.grad(a).unwrap().clone(), tape.grad(b).unwrap().clone())
        };
        let (v1, ga1, gb1) = run(false);
        let (v2, ga2, gb2) = run(true);
        assert!((v1 - v2).abs() < 1e-12);
        assert!(ga1.max_abs_diff(&ga2) < 1e-12);
        assert!(gb1.max_abs_diff(&gb2) < 1e-12);
    }

    #[test]
    fn zero_rows_and_bad_tau_rejected() {
        let h = m(&[&[0.0, 0.0], &[1.0, 0.0]]);
        let mut tape = Tape::new();
        let a = tape.leaf(h.clone(), true);
        assert!(nt_xent(&mut tape, a, a, 0.5, None).is_err());
        assert!(nt_xent_pair(0, &h, &h, 0.5).is_err());
        let ok = tape.leaf(Matrix::identity(2), true);
        assert!(matches!(nt_xent(&mut tape, ok, ok, 0.0, None), Err(LossError::Temperature(_))));
    }

    #[test]
    fn balancer_closed_forms() {
        let mut b = Balancer::new(1.0, 1.0).unwrap();
        assert_eq!(b.start(2.0, 4.0).unwrap(), Coefficients { alpha: 0.5, beta: 0.5 });
        let c = b.update(1.0, 4.0).unwrap();
        assert!((c.alpha - 1.0 / 3.0).abs() < 1e-12);
        assert!((c.beta - 2.0 / 3.0).abs() < 1e-12);
        let c = b.update(1.0, 2.0).unwrap();
        assert_eq!(c.alpha, 0.5);

        let mut frozen = Balancer::new(0.0, 0.1).unwrap();
        frozen.start(1.0, 1.0).unwrap();
        for t in 1..20 {
            assert_eq!(frozen.update(1.0 / t as f64, 3.0).unwrap().alpha, 0.5);
        }
    }

    #[test]
    fn balancer_errors() {
        let mut b = Balancer::new(1.0, 1.0).unwrap();
        assert!(matches!(b.update(1.0, 1.0), Err(LossError::BalancerNotInitialized)));
        assert!(matches!(b.start(0.0, 1.0), Err(LossError::NonPositiveLoss { .. })));
        assert!(Balancer::new(1.5, 1.0).is_err());
        assert!(Balancer::new(0.5, 0.0).is_err());
    }

    #[test]
    fn distill_loss_arithmetic_and_contract() {
        let mut tape = Tape::new();
        let hard = tape.leaf(Matrix::scalar(0.6), true);
        let soft = tape.leaf(Matrix::scalar(1.0), true);
        let l = distill_loss(&mut tape, hard, soft, Coefficients::from_alpha(0.5)).unwrap();
        assert!((tape.value(l).get(0, 0) - 0.8).abs() < 1e-15);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(hard).unwrap().get(0, 0), 0.5);
        let bad = Coefficients { alpha: 0.7, beta: 0.7 };
        assert!(distill_loss(&mut tape, hard, soft, bad).is_err());
    }
}
