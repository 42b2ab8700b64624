//! Cosine similarity and the two contrastive losses, with analytic gradients.
//!
//! Stage 1 aligns images and symbols against text through a shared softmax
//! structure: total = −(1/2N) Σ_i [log softmax_i(sim(z_img, z_txt)/τ) +
//! log softmax_i(sim(z_sym, z_txt)/τ)], each softmax taken row-wise over the
//! N text candidates. Stage 2 sums one such term per ordered modality pair
//! (img-txt, img-sym, sym-txt) with factor 1/N. With uniform similarities the
//! losses evaluate to exactly ln N and 3·ln N, which the tests pin down.
//!
//! All softmaxes subtract the row maximum before exponentiation so the
//! uniform-similarity identities survive large 1/τ values.

use std::collections::BTreeMap;

use crate::encoders::TemperatureParam;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Modality {
    Image,
    Symbol,
    Text,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Symbol => "symbol",
            Modality::Text => "text",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "image" => Ok(Modality::Image),
            "symbol" => Ok(Modality::Symbol),
            "text" => Ok(Modality::Text),
            other => Err(Error::InvalidArgument(format!(
                "unknown modality {other:?}"
            ))),
        }
    }
}

/// N×D embedding rows for one modality. `normalized` records whether the rows
/// have been passed through [`normalize`]; the loss and retrieval entry points
/// require it.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    pub vectors: Vec<f64>,
    pub n: usize,
    pub dim: usize,
    pub modality: Modality,
    pub normalized: bool,
}

impl EmbeddingBatch {
    pub fn new(modality: Modality, n: usize, dim: usize, vectors: Vec<f64>) -> Result<Self> {
        if vectors.len() != n * dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{n}x{dim} = {} values", n * dim),
                got: format!("{} values", vectors.len()),
            });
        }
        Ok(EmbeddingBatch {
            vectors,
            n,
            dim,
            modality,
            normalized: false,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }
}

/// Row-major dense matrix, the shape used by similarity grids.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Scales every row to unit L2 norm and sets the `normalized` flag.
pub fn normalize(batch: &EmbeddingBatch) -> Result<EmbeddingBatch> {
    let mut out = batch.clone();
    for i in 0..batch.n {
        let row = batch.row(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroRow { row: i });
        }
        for (o, v) in out.vectors[i * batch.dim..(i + 1) * batch.dim]
            .iter_mut()
            .zip(row)
        {
            *o = v / norm;
        }
    }
    out.normalized = true;
    Ok(out)
}

/// Backpropagates through [`normalize`]: given raw rows z with unit-normalized
/// rows ẑ = z/‖z‖ and upstream gradients d wrt ẑ, returns gradients wrt z,
/// row-wise (d − ẑ·(ẑᵀd)) / ‖z‖.
pub fn normalize_backward(raw: &EmbeddingBatch, d_normalized: &[f64]) -> Vec<f64> {
    assert_eq!(d_normalized.len(), raw.n * raw.dim);
    let mut out = vec![0.0; raw.n * raw.dim];
    for i in 0..raw.n {
        let z = raw.row(i);
        let d = &d_normalized[i * raw.dim..(i + 1) * raw.dim];
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let inner: f64 = z.iter().zip(d).map(|(a, b)| a * b).sum::<f64>() / (norm * norm);
        for k in 0..raw.dim {
            out[i * raw.dim + k] = (d[k] - z[k] * inner) / norm;
        }
    }
    out
}

/// Entry (i, j) = dot(a_i, b_j). On normalized inputs this is the cosine
/// similarity; both batches must be normalized and share D.
pub fn similarity_matrix(a: &EmbeddingBatch, b: &EmbeddingBatch) -> Result<Matrix> {
    if !a.normalized {
        return Err(Error::UnnormalizedInput {
            modality: a.modality.name(),
        });
    }
    if !b.normalized {
        return Err(Error::UnnormalizedInput {
            modality: b.modality.name(),
        });
    }
    if a.dim != b.dim {
        return Err(Error::DimMismatch {
            left: a.dim,
            right: b.dim,
        });
    }
    let mut m = Matrix::zeros(a.n, b.n);
    for i in 0..a.n {
        let ra = a.row(i);
        for j in 0..b.n {
            let rb = b.row(j);
            m.data[i * b.n + j] = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
        }
    }
    Ok(m)
}

/// Loss value with its per-pair decomposition. Pair keys are "img-txt",
/// "img-sym", and "sym-txt"; entries always sum to `total`.
/// `temperature_value` is the effective temperature τ after clamping.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_pair: BTreeMap<String, f64>,
    pub temperature_value: f64,
}

/// Loss-shape switches; both default off to match the as-written equations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LossOptions {
    /// Average both softmax directions per pair instead of the single
    /// written direction; constants are adjusted so the uniform-similarity
    /// values stay at ln N (stage 1) and 3·ln N (stage 2).
    pub symmetric: bool,
    /// Exclude same-class off-diagonal entries from every softmax
    /// denominator. Requires labels.
    pub label_masked_negatives: bool,
}

/// Gradients of a loss with respect to its (normalized) embedding inputs and
/// the temperature parameter.
#[derive(Clone, Debug)]
pub struct LossGrads {
    pub d_img: Vec<f64>,
    pub d_sym: Option<Vec<f64>>,
    pub d_txt: Vec<f64>,
    pub d_log_inverse_tau: f64,
}

/// Stage-1 warm-up loss, image→text and symbol→text terms under the 1/2N
/// factor.
pub fn stage1_loss(
    z_img: &EmbeddingBatch,
    z_sym: &EmbeddingBatch,
    z_txt: &EmbeddingBatch,
    temperature: &TemperatureParam,
) -> Result<LossBreakdown> {
    stage1_loss_with(
        z_img,
        Some(z_sym),
        z_txt,
        temperature,
        LossOptions::default(),
        None,
    )
}

/// Stage-1 loss with configurable shape. Passing `z_sym = None` drops the
/// symbol term entirely (the bimodal ablation), leaving a plain image→text
/// loss averaged over the remaining pair.
pub fn stage1_loss_with(
    z_img: &EmbeddingBatch,
    z_sym: Option<&EmbeddingBatch>,
    z_txt: &EmbeddingBatch,
    temperature: &TemperatureParam,
    options: LossOptions,
    labels: Option<&[usize]>,
) -> Result<LossBreakdown> {
    Ok(loss_impl(Stage::One, z_img, z_sym, z_txt, temperature, options, labels, false)?.0)
}

/// Stage-1 loss plus analytic gradients.
pub fn stage1_loss_grad(
    z_img: &EmbeddingBatch,
    z_sym: Option<&EmbeddingBatch>,
    z_txt: &EmbeddingBatch,
    temperature: &TemperatureParam,
    options: LossOptions,
    labels: Option<&[usize]>,
) -> Result<(LossBreakdown, LossGrads)> {
    let (b, g) = loss_impl(Stage::One, z_img, z_sym, z_txt, temperature, options, labels, true)?;
    Ok((b, g.expect("gradients requested")))
}

/// Stage-2 joint loss, one term per modality pair under the 1/N factor.
pub fn stage2_loss(
    z_img: &EmbeddingBatch,
    z_sym: &EmbeddingBatch,
    z_txt: &EmbeddingBatch,
    temperature: &TemperatureParam,
) -> Result<LossBreakdown> {
    stage2_loss_with(
        z_img,
        Some(z_sym),
        z_txt,
        temperature,
        LossOptions::default(),
        None,
    )
}

/// Stage-2 loss with configurable shape; `z_sym = None` drops both symbol
/// pairs (the bimodal ablation).
pub fn stage2_loss_with(
    z_img: &EmbeddingBatch,
    z_sym: Option<&EmbeddingBatch>,
    z_txt: &EmbeddingBatch,
    temperature: &TemperatureParam,
    options: LossOptions,
    labels: Option<&[usize]>,
) -> Result<LossBreakdown> {
    Ok(loss_impl(Stage::Two, z_img, z_sym, z_txt, temperature, options, labels, false)?.0)
}

/// Stage-2 loss plus analytic gradients.
pub fn stage2_loss_grad(
    z_img: &EmbeddingBatch,
    z_sym: Option<&EmbeddingBatch>,
    z_txt: &EmbeddingBatch,
    temperature: &TemperatureParam,
    options: LossOptions,
    labels: Option<&[usize]>,
) -> Result<(LossBreakdown, LossGrads)> {
    let (b, g) = loss_impl(Stage::Two, z_img, z_sym, z_txt, temperature, options, labels, true)?;
    Ok((b, g.expect("gradients requested")))
}

#[derive(Clone, Copy, PartialEq)]
enum Stage {
    One,
    Two,
}

#[derive(Clone, Copy)]
enum PairSlot {
    ImgTxt,
    ImgSym,
    SymTxt,
}

impl PairSlot {
    fn key(self) -> &'static str {
        match self {
            PairSlot::ImgTxt => "img-txt",
            PairSlot::ImgSym => "img-sym",
            PairSlot::SymTxt => "sym-txt",
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn loss_impl(
    stage: Stage,
    z_img: &EmbeddingBatch,
    z_sym: Option<&EmbeddingBatch>,
    z_txt: &EmbeddingBatch,
    temperature: &TemperatureParam,
    options: LossOptions,
    labels: Option<&[usize]>,
    want_grads: bool,
) -> Result<(LossBreakdown, Option<LossGrads>)> {
    let n = z_img.n;
    if n == 0 {
        return Err(Error::EmptyInput("embedding batch"));
    }
    for z in [Some(z_img), z_sym, Some(z_txt)].into_iter().flatten() {
        if !z.normalized {
            return Err(Error::UnnormalizedInput {
                modality: z.modality.name(),
            });
        }
        if z.n != n {
            return Err(Error::BatchSizeMismatch {
                left: n,
                right: z.n,
            });
        }
        if z.dim != z_img.dim {
            return Err(Error::DimMismatch {
                left: z_img.dim,
                right: z.dim,
            });
        }
    }
    let mask = match (options.label_masked_negatives, labels) {
        (false, _) => None,
        (true, Some(l)) => {
            if l.len() != n {
                return Err(Error::BatchSizeMismatch {
                    left: n,
                    right: l.len(),
                });
            }
            Some(l)
        }
        (true, None) => {
            return Err(Error::InvalidArgument(
                "label_masked_negatives requires class labels".into(),
            ))
        }
    };

    let inv_tau = temperature.inverse_tau();
    let tau_clamped = temperature.is_clamped();

    let pairs: Vec<(PairSlot, &EmbeddingBatch, &EmbeddingBatch)> = match (stage, z_sym) {
        (Stage::One, Some(zs)) => vec![
            (PairSlot::ImgTxt, z_img, z_txt),
            (PairSlot::SymTxt, zs, z_txt),
        ],
        (Stage::One, None) => vec![(PairSlot::ImgTxt, z_img, z_txt)],
        (Stage::Two, Some(zs)) => vec![
            (PairSlot::ImgTxt, z_img, z_txt),
            (PairSlot::ImgSym, z_img, zs),
            (PairSlot::SymTxt, zs, z_txt),
        ],
        (Stage::Two, None) => vec![(PairSlot::ImgTxt, z_img, z_txt)],
    };

    // Stage 1 averages over its pair terms (the written 1/2N); stage 2 sums
    // them (the written 1/N per pair).
    let pair_weight = match stage {
        Stage::One => 1.0 / pairs.len() as f64,
        Stage::Two => 1.0,
    };
    let directions = if options.symmetric { 2.0 } else { 1.0 };
    let dir_weight = pair_weight / (n as f64 * directions);

    let mut per_pair = BTreeMap::new();
    let mut d_img = vec![0.0; n * z_img.dim];
    let mut d_sym = z_sym.map(|z| vec![0.0; n * z.dim]);
    let mut d_txt = vec![0.0; n * z_txt.dim];
    let mut d_theta = 0.0;

    for (slot, a, b) in &pairs {
        let sim = similarity_matrix(a, b)?;
        let row_term = pair_nll(&sim.data, n, inv_tau, mask);
        let mut pair_loss = dir_weight * row_term.nll;

        let col_term = if options.symmetric {
            let mut t = Matrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    t.data[j * n + i] = sim.data[i * n + j];
                }
            }
            let term = pair_nll(&t.data, n, inv_tau, mask);
            pair_loss += dir_weight * term.nll;
            Some(term)
        } else {
            None
        };

        per_pair.insert(slot.key().to_string(), pair_loss);

        if want_grads {
            // dL/dS for this pair, both directions folded in.
            let mut d_sim = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    let delta = if i == j { 1.0 } else { 0.0 };
                    let mut g = row_term.probs[i * n + j] - delta;
                    if let Some(ct) = &col_term {
                        // Column direction: softmax over rows of S, i.e. rows
                        // of the transpose; map its gradient back.
                        g += ct.probs[j * n + i] - delta;
                    }
                    d_sim[i * n + j] = dir_weight * inv_tau * g;
                }
            }
            for i in 0..n {
                for j in 0..n {
                    let g = d_sim[i * n + j];
                    if g == 0.0 {
                        continue;
                    }
                    d_theta += g * sim.data[i * n + j];
                    let (ra, rb) = (a.row(i), b.row(j));
                    let target_a: &mut [f64] = match slot {
                        PairSlot::ImgTxt | PairSlot::ImgSym => &mut d_img,
                        PairSlot::SymTxt => d_sym.as_mut().expect("symbol grads"),
                    };
                    for k in 0..a.dim {
                        target_a[i * a.dim + k] += g * rb[k];
                    }
                    let target_b: &mut [f64] = match slot {
                        PairSlot::ImgTxt | PairSlot::SymTxt => &mut d_txt,
                        PairSlot::ImgSym => d_sym.as_mut().expect("symbol grads"),
                    };
                    for k in 0..b.dim {
                        target_b[j * b.dim + k] += g * ra[k];
                    }
                }
            }
        }
    }

    let total = per_pair.values().sum();
    let breakdown = LossBreakdown {
        total,
        per_pair,
        temperature_value: 1.0 / inv_tau,
    };
    let grads = want_grads.then(|| LossGrads {
        d_img,
        d_sym,
        d_txt,
        // d(S·e^θ)/dθ = S·e^θ while unclamped; the clamp freezes it.
        d_log_inverse_tau: if tau_clamped { 0.0 } else { d_theta },
    });
    Ok((breakdown, grads))
}

struct PairTerm {
    /// Σ_i −log softmax_i over the allowed entries of row i (unscaled).
    nll: f64,
    /// Softmax probabilities, zero at masked entries.
    probs: Vec<f64>,
}

/// Row-wise negative log softmax of the diagonal, with max subtraction and an
/// optional same-class mask over off-diagonal entries.
fn pair_nll(sim: &[f64], n: usize, inv_tau: f64, mask: Option<&[usize]>) -> PairTerm {
    let allowed = |i: usize, j: usize| match mask {
        None => true,
        Some(labels) => i == j || labels[i] != labels[j],
    };
    let mut probs = vec![0.0; n * n];
    let mut nll = 0.0;
    for i in 0..n {
        let mut m = f64::NEG_INFINITY;
        for j in 0..n {
            if allowed(i, j) {
                m = m.max(sim[i * n + j] * inv_tau);
            }
        }
        let mut denom = 0.0;
        for j in 0..n {
            if allowed(i, j) {
                denom += (sim[i * n + j] * inv_tau - m).exp();
            }
        }
        nll += m + denom.ln() - sim[i * n + i] * inv_tau;
        for j in 0..n {
            if allowed(i, j) {
                probs[i * n + j] = (sim[i * n + j] * inv_tau - m).exp() / denom;
            }
        }
    }
    PairTerm { nll, probs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn batch(modality: Modality, dim: usize, rows: &[&[f64]]) -> EmbeddingBatch {
        let vectors: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        EmbeddingBatch::new(modality, rows.len(), dim, vectors).unwrap()
    }

    fn random_normalized(modality: Modality, n: usize, dim: usize, label: &str) -> EmbeddingBatch {
        let mut rng = crate::rng::stream(11, label);
        let vectors: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        normalize(&EmbeddingBatch::new(modality, n, dim, vectors).unwrap()).unwrap()
    }

    fn unit_tau() -> TemperatureParam {
        TemperatureParam::new(0.0)
    }

    // ------- independent scalar oracle, no max subtraction, no reuse -------

    fn oracle_pair_nll(a: &EmbeddingBatch, b: &EmbeddingBatch, inv_tau: f64) -> f64 {
        let n = a.n;
        let mut total = 0.0;
        for i in 0..n {
            let mut denom = 0.0;
            for j in 0..n {
                let dot: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
                denom += (dot * inv_tau).exp();
            }
            let diag: f64 = a.row(i).iter().zip(b.row(i)).map(|(x, y)| x * y).sum();
            total -= ((diag * inv_tau).exp() / denom).ln();
        }
        total
    }

    fn oracle_stage1(
        zi: &EmbeddingBatch,
        zs: &EmbeddingBatch,
        zt: &EmbeddingBatch,
        inv_tau: f64,
    ) -> f64 {
        (oracle_pair_nll(zi, zt, inv_tau) + oracle_pair_nll(zs, zt, inv_tau))
            / (2.0 * zi.n as f64)
    }

    fn oracle_stage2(
        zi: &EmbeddingBatch,
        zs: &EmbeddingBatch,
        zt: &EmbeddingBatch,
        inv_tau: f64,
    ) -> f64 {
        (oracle_pair_nll(zi, zt, inv_tau)
            + oracle_pair_nll(zi, zs, inv_tau)
            + oracle_pair_nll(zs, zt, inv_tau))
            / zi.n as f64
    }

    // ----------------------------- normalize ------------------------------

    #[test]
    fn normalize_rescales_three_four_five() {
        let b = batch(Modality::Image, 2, &[&[3.0, 4.0]]);
        let n = normalize(&b).unwrap();
        assert_eq!(n.row(0), &[0.6, 0.8]);
        assert!(n.normalized);
    }

    #[test]
    fn normalize_is_idempotent_within_tolerance() {
        let b = random_normalized(Modality::Image, 5, 7, "idem");
        let again = normalize(&b).unwrap();
        for (x, y) in b.vectors.iter().zip(&again.vectors) {
            assert!((x - y).abs() < 1e-7);
        }
    }

    #[test]
    fn normalize_rejects_zero_row() {
        let b = batch(Modality::Image, 2, &[&[1.0, 0.0], &[0.0, 0.0]]);
        match normalize(&b) {
            Err(Error::ZeroRow { row }) => assert_eq!(row, 1),
            other => panic!("expected ZeroRow, got {other:?}"),
        }
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let raw = batch(Modality::Image, 3, &[&[0.3, -1.2, 0.4], &[2.0, 0.1, -0.5]]);
        // Scalar probe f(z) = Σ c ⊙ normalize(z).
        let c: Vec<f64> = (0..6).map(|k| 0.3 + 0.17 * k as f64).collect();
        let f = |raw: &EmbeddingBatch| -> f64 {
            let nb = normalize(raw).unwrap();
            nb.vectors.iter().zip(&c).map(|(v, w)| v * w).sum()
        };
        let analytic = normalize_backward(&raw, &c);
        let h = 1e-6;
        for k in 0..raw.vectors.len() {
            let mut plus = raw.clone();
            plus.vectors[k] += h;
            let mut minus = raw.clone();
            minus.vectors[k] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            assert!(
                (fd - analytic[k]).abs() < 1e-6,
                "entry {k}: fd {fd} vs analytic {}",
                analytic[k]
            );
        }
    }

    // ------------------------- similarity matrix --------------------------

    #[test]
    fn orthonormal_self_similarity_is_identity() {
        let mut b = batch(Modality::Image, 3, &[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        b.normalized = true;
        let m = similarity_matrix(&b, &b).unwrap();
        assert_eq!(m.data, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn equal_rows_give_unit_similarity() {
        let a = random_normalized(Modality::Image, 1, 6, "selfsim");
        let m = similarity_matrix(&a, &a).unwrap();
        assert!((m.at(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn similarity_matches_per_entry_dot_products() {
        let a = random_normalized(Modality::Image, 3, 5, "sim-a");
        let b = random_normalized(Modality::Text, 4, 5, "sim-b");
        let m = similarity_matrix(&a, &b).unwrap();
        assert_eq!((m.rows, m.cols), (3, 4));
        for i in 0..3 {
            for j in 0..4 {
                let dot: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
                assert!((m.at(i, j) - dot).abs() < 1e-12);
                assert!(m.at(i, j).abs() <= 1.0 + 1e-6);
            }
        }
    }

    #[test]
    fn similarity_rejects_unnormalized_and_mismatched_inputs() {
        let raw = batch(Modality::Image, 2, &[&[3.0, 4.0]]);
        assert!(matches!(
            similarity_matrix(&raw, &raw),
            Err(Error::UnnormalizedInput { .. })
        ));
        let a = random_normalized(Modality::Image, 2, 4, "dm-a");
        let b = random_normalized(Modality::Text, 2, 5, "dmb");
        assert!(matches!(
            similarity_matrix(&a, &b),
            Err(Error::DimMismatch { .. })
        ));
    }

    // ------------------------------ losses --------------------------------

    #[test]
    fn stage1_single_candidate_is_exactly_zero() {
        let zi = random_normalized(Modality::Image, 1, 4, "n1-i");
        let zs = random_normalized(Modality::Symbol, 1, 4, "n1-s");
        let zt = random_normalized(Modality::Text, 1, 4, "n1-t");
        let b = stage1_loss(&zi, &zs, &zt, &unit_tau()).unwrap();
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn uniform_similarities_give_ln_n_and_three_ln_n() {
        for n in [2usize, 4, 8] {
            let one = random_normalized(Modality::Image, 1, 6, &format!("uni-{n}"));
            let rows = vec![one.row(0).to_vec(); n].concat();
            let mut zi = EmbeddingBatch::new(Modality::Image, n, 6, rows).unwrap();
            zi.normalized = true;
            let mut zs = zi.clone();
            zs.modality = Modality::Symbol;
            let mut zt = zi.clone();
            zt.modality = Modality::Text;
            let ln_n = (n as f64).ln();
            let s1 = stage1_loss(&zi, &zs, &zt, &unit_tau()).unwrap();
            assert!((s1.total - ln_n).abs() < 1e-6, "stage1 n={n}: {}", s1.total);
            let s2 = stage2_loss(&zi, &zs, &zt, &unit_tau()).unwrap();
            assert!(
                (s2.total - 3.0 * ln_n).abs() < 1e-6,
                "stage2 n={n}: {}",
                s2.total
            );
        }
    }

    #[test]
    fn uniform_value_is_temperature_independent() {
        let one = random_normalized(Modality::Image, 1, 5, "tau-uni");
        let rows = vec![one.row(0).to_vec(); 4].concat();
        let mut zi = EmbeddingBatch::new(Modality::Image, 4, 5, rows).unwrap();
        zi.normalized = true;
        let zs = zi.clone();
        let zt = zi.clone();
        for theta in [-2.0, 0.0, 2.0, 4.0, 6.0] {
            let t = TemperatureParam::new(theta);
            let b = stage1_loss(&zi, &zs, &zt, &t).unwrap();
            assert!((b.total - 4f64.ln()).abs() < 1e-6, "theta={theta}");
        }
    }

    #[test]
    fn stage1_hand_case_matches_enumeration() {
        // Orthonormal image/text rows plus a slightly rotated symbol pair:
        // the image term is two binary softmaxes over logits (1, 0); the
        // symbol term has rows (0.6, 0.8) and (0.8, 0.6).
        let mut zi = batch(Modality::Image, 2, &[&[1.0, 0.0], &[0.0, 1.0]]);
        zi.normalized = true;
        let mut zt = batch(Modality::Text, 2, &[&[1.0, 0.0], &[0.0, 1.0]]);
        zt.normalized = true;
        let mut zs = batch(Modality::Symbol, 2, &[&[0.6, 0.8], &[0.8, 0.6]]);
        zs.normalized = true;
        let b = stage1_loss(&zi, &zs, &zt, &unit_tau()).unwrap();
        let oracle = oracle_stage1(&zi, &zs, &zt, 1.0);
        assert!((b.total - oracle).abs() < 1e-12);
        // Enumerated by hand:
        //   image rows each contribute −ln(e/(e+1)) = 0.3132616875182228
        //   symbol rows each contribute −ln(e^.6/(e^.6+e^.8)) = 0.7981388693815920
        // totaling (2·0.3132… + 2·0.7981…)/4.
        assert!((b.total - 0.555_700_278_449_907).abs() < 1e-9, "{}", b.total);
    }

    #[test]
    fn stage2_random_case_matches_enumeration() {
        let zi = random_normalized(Modality::Image, 3, 4, "s2-i");
        let zs = random_normalized(Modality::Symbol, 3, 4, "s2-s");
        let zt = random_normalized(Modality::Text, 3, 4, "s2-t");
        let t = TemperatureParam::new(2f64.ln()); // τ = 0.5
        let b = stage2_loss(&zi, &zs, &zt, &t).unwrap();
        let oracle = oracle_stage2(&zi, &zs, &zt, 2.0);
        assert!((b.total - oracle).abs() < 1e-12, "{} vs {oracle}", b.total);
    }

    #[test]
    fn per_pair_terms_sum_to_total() {
        let zi = random_normalized(Modality::Image, 5, 6, "pp-i");
        let zs = random_normalized(Modality::Symbol, 5, 6, "pp-s");
        let zt = random_normalized(Modality::Text, 5, 6, "pp-t");
        for (stage, keys) in [
            (Stage::One, vec!["img-txt", "sym-txt"]),
            (Stage::Two, vec!["img-sym", "img-txt", "sym-txt"]),
        ] {
            let b = match stage {
                Stage::One => stage1_loss(&zi, &zs, &zt, &unit_tau()).unwrap(),
                Stage::Two => stage2_loss(&zi, &zs, &zt, &unit_tau()).unwrap(),
            };
            let sum: f64 = b.per_pair.values().sum();
            assert!((b.total - sum).abs() < 1e-6);
            let got: Vec<&str> = b.per_pair.keys().map(|s| s.as_str()).collect();
            assert_eq!(got, keys);
        }
    }

    #[test]
    fn losses_are_invariant_under_batch_permutation() {
        let zi = random_normalized(Modality::Image, 6, 5, "perm-i");
        let zs = random_normalized(Modality::Symbol, 6, 5, "perm-s");
        let zt = random_normalized(Modality::Text, 6, 5, "perm-t");
        let perm = [4usize, 0, 5, 2, 1, 3];
        let permute = |z: &EmbeddingBatch| {
            let mut v = Vec::with_capacity(z.vectors.len());
            for &i in &perm {
                v.extend_from_slice(z.row(i));
            }
            let mut out = EmbeddingBatch::new(z.modality, z.n, z.dim, v).unwrap();
            out.normalized = true;
            out
        };
        let t = TemperatureParam::default();
        let a1 = stage1_loss(&zi, &zs, &zt, &t).unwrap().total;
        let b1 = stage1_loss(&permute(&zi), &permute(&zs), &permute(&zt), &t)
            .unwrap()
            .total;
        assert!((a1 - b1).abs() < 1e-6);
        let a2 = stage2_loss(&zi, &zs, &zt, &t).unwrap().total;
        let b2 = stage2_loss(&permute(&zi), &permute(&zs), &permute(&zt), &t)
            .unwrap()
            .total;
        assert!((a2 - b2).abs() < 1e-6);
    }

    #[test]
    fn loss_vanishes_when_diagonal_dominates_at_small_tau() {
        // Distinct near-orthogonal rows; with 1/τ at the clamp the diagonal
        // logit exceeds every off-diagonal one by ≥ 10 nats.
        let mut rows = vec![0.0; 4 * 4];
        for i in 0..4 {
            rows[i * 4 + i] = 1.0;
        }
        let mut zi = EmbeddingBatch::new(Modality::Image, 4, 4, rows).unwrap();
        zi.normalized = true;
        let mut zs = zi.clone();
        zs.modality = Modality::Symbol;
        let mut zt = zi.clone();
        zt.modality = Modality::Text;
        let t = TemperatureParam::new(100f64.ln());
        let s1 = stage1_loss(&zi, &zs, &zt, &t).unwrap().total;
        let s2 = stage2_loss(&zi, &zs, &zt, &t).unwrap().total;
        assert!(s1 < 1e-3, "stage1 {s1}");
        assert!(s2 < 1e-3, "stage2 {s2}");
    }

    #[test]
    fn symmetric_mode_keeps_uniform_values() {
        let one = random_normalized(Modality::Image, 1, 5, "sym-uni");
        let rows = vec![one.row(0).to_vec(); 4].concat();
        let mut zi = EmbeddingBatch::new(Modality::Image, 4, 5, rows).unwrap();
        zi.normalized = true;
        let zs = zi.clone();
        let zt = zi.clone();
        let opts = LossOptions {
            symmetric: true,
            ..Default::default()
        };
        let s1 = stage1_loss_with(&zi, Some(&zs), &zt, &unit_tau(), opts, None).unwrap();
        assert!((s1.total - 4f64.ln()).abs() < 1e-6);
        let s2 = stage2_loss_with(&zi, Some(&zs), &zt, &unit_tau(), opts, None).unwrap();
        assert!((s2.total - 3.0 * 4f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn label_mask_shrinks_the_softmax_pool() {
        // Identical embeddings, two classes of two samples each: masking
        // same-class negatives leaves 3 allowed entries per row, so each row
        // contributes ln 3.
        let one = random_normalized(Modality::Image, 1, 5, "mask-uni");
        let rows = vec![one.row(0).to_vec(); 4].concat();
        let mut zi = EmbeddingBatch::new(Modality::Image, 4, 5, rows).unwrap();
        zi.normalized = true;
        let zs = zi.clone();
        let zt = zi.clone();
        let opts = LossOptions {
            label_masked_negatives: true,
            ..Default::default()
        };
        let labels = [0usize, 0, 1, 1];
        let b = stage1_loss_with(&zi, Some(&zs), &zt, &unit_tau(), opts, Some(&labels)).unwrap();
        assert!((b.total - 3f64.ln()).abs() < 1e-9);
        assert!(matches!(
            stage1_loss_with(&zi, Some(&zs), &zt, &unit_tau(), opts, None),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn bimodal_shape_drops_symbol_pairs() {
        let zi = random_normalized(Modality::Image, 4, 5, "bi-i");
        let zt = random_normalized(Modality::Text, 4, 5, "bi-t");
        let opts = LossOptions::default();
        let s1 = stage1_loss_with(&zi, None, &zt, &unit_tau(), opts, None).unwrap();
        let s2 = stage2_loss_with(&zi, None, &zt, &unit_tau(), opts, None).unwrap();
        for b in [&s1, &s2] {
            assert_eq!(b.per_pair.len(), 1);
            assert!(b.per_pair.contains_key("img-txt"));
        }
        // Single-pair uniform case still lands on ln N.
        let one = random_normalized(Modality::Image, 1, 5, "bi-uni");
        let rows = vec![one.row(0).to_vec(); 4].concat();
        let mut u = EmbeddingBatch::new(Modality::Image, 4, 5, rows).unwrap();
        u.normalized = true;
        let b = stage1_loss_with(&u, None, &u.clone(), &unit_tau(), opts, None).unwrap();
        assert!((b.total - 4f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn loss_rejects_mismatched_batches() {
        let zi = random_normalized(Modality::Image, 3, 4, "err-i");
        let zs = random_normalized(Modality::Symbol, 2, 4, "err-s");
        let zt = random_normalized(Modality::Text, 3, 4, "err-t");
        assert!(matches!(
            stage1_loss(&zi, &zs, &zt, &unit_tau()),
            Err(Error::BatchSizeMismatch { .. })
        ));
        let row: &[f64] = &[1.0, 2.0, 3.0, 4.0];
        let raw = batch(Modality::Symbol, 4, &[row, row, row]);
        assert!(matches!(
            stage1_loss(&zi, &raw, &zt, &unit_tau()),
            Err(Error::UnnormalizedInput { modality: "symbol" })
        ));
    }

    // --------------------------- gradient checks --------------------------

    /// Loss as a function of raw (pre-normalization) embeddings and θ, the
    /// shape the finite-difference probe perturbs.
    fn composed_loss(
        stage: Stage,
        raw_i: &EmbeddingBatch,
        raw_s: Option<&EmbeddingBatch>,
        raw_t: &EmbeddingBatch,
        theta: f64,
        options: LossOptions,
        labels: Option<&[usize]>,
    ) -> f64 {
        let zi = normalize(raw_i).unwrap();
        let zs = raw_s.map(|r| normalize(r).unwrap());
        let zt = normalize(raw_t).unwrap();
        let t = TemperatureParam::new(theta);
        let b = match stage {
            Stage::One => stage1_loss_with(&zi, zs.as_ref(), &zt, &t, options, labels).unwrap(),
            Stage::Two => stage2_loss_with(&zi, zs.as_ref(), &zt, &t, options, labels).unwrap(),
        };
        b.total
    }

    fn check_gradients(stage: Stage, case: u64, options: LossOptions) {
        let mut rng = crate::rng::stream(case, "gradcheck");
        let n = rng.random_range(2..=5);
        let dim = rng.random_range(2..=8);
        let mut make = |modality: Modality| {
            let v: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0f64)).collect();
            EmbeddingBatch::new(modality, n, dim, v).unwrap()
        };
        let raw_i = make(Modality::Image);
        let raw_s = make(Modality::Symbol);
        let raw_t = make(Modality::Text);
        let labels_vec: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let labels = options.label_masked_negatives.then_some(&labels_vec[..]);
        let theta = rng.random_range(-1.0..2.0);
        let temp = TemperatureParam::new(theta);

        let zi = normalize(&raw_i).unwrap();
        let zs = normalize(&raw_s).unwrap();
        let zt = normalize(&raw_t).unwrap();
        let (_, grads) = match stage {
            Stage::One => stage1_loss_grad(&zi, Some(&zs), &zt, &temp, options, labels).unwrap(),
            Stage::Two => stage2_loss_grad(&zi, Some(&zs), &zt, &temp, options, labels).unwrap(),
        };
        // Chain through normalization so the probe may perturb raw entries.
        let danalytic = [
            normalize_backward(&raw_i, &grads.d_img),
            normalize_backward(&raw_s, grads.d_sym.as_ref().unwrap()),
            normalize_backward(&raw_t, &grads.d_txt),
        ];

        let h = 1e-4;
        let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
        for (which, raw) in [&raw_i, &raw_s, &raw_t].into_iter().enumerate() {
            for k in 0..n * dim {
                let mut plus = (*raw).clone();
                plus.vectors[k] += h;
                let mut minus = (*raw).clone();
                minus.vectors[k] -= h;
                let args = |r: &EmbeddingBatch| match which {
                    0 => (r.clone(), raw_s.clone(), raw_t.clone()),
                    1 => (raw_i.clone(), r.clone(), raw_t.clone()),
                    _ => (raw_i.clone(), raw_s.clone(), r.clone()),
                };
                let (pi, ps, pt) = args(&plus);
                let (mi, ms, mt) = args(&minus);
                let fd = (composed_loss(stage, &pi, Some(&ps), &pt, theta, options, labels)
                    - composed_loss(stage, &mi, Some(&ms), &mt, theta, options, labels))
                    / (2.0 * h);
                let an = danalytic[which][k];
                if fd.abs().max(an.abs()) < 1e-10 {
                    continue;
                }
                assert!(
                    rel(fd, an) < 1e-3,
                    "case {case} modality {which} entry {k}: fd {fd} vs analytic {an}"
                );
            }
        }
        let fd_theta = (composed_loss(stage, &raw_i, Some(&raw_s), &raw_t, theta + h, options, labels)
            - composed_loss(stage, &raw_i, Some(&raw_s), &raw_t, theta - h, options, labels))
            / (2.0 * h);
        let an = grads.d_log_inverse_tau;
        if fd_theta.abs().max(an.abs()) >= 1e-10 {
            assert!(
                rel(fd_theta, an) < 1e-3,
                "case {case} theta: fd {fd_theta} vs analytic {an}"
            );
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        for case in 0..6 {
            check_gradients(Stage::One, case, LossOptions::default());
            check_gradients(Stage::Two, case, LossOptions::default());
        }
        let symmetric = LossOptions {
            symmetric: true,
            ..Default::default()
        };
        let masked = LossOptions {
            label_masked_negatives: true,
            ..Default::default()
        };
        for case in 6..9 {
            check_gradients(Stage::One, case, symmetric);
            check_gradients(Stage::Two, case, masked);
        }
    }
}
