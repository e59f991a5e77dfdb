//! Margin-softmax objectives over cosine logits, with analytic gradients
//! for both the embeddings and the class-weight matrix.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::nnet::LossParams;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Which algebraic form of the dissected objective to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DSoftmaxForm {
    /// Negative-log of the intra/inter factors (cross-entropy style).
    Log,
    /// The factors themselves, negated and averaged, without logs.
    Literal,
}

struct CosineField {
    /// cos(theta)[i, j] for batch row i against class j, row-major.
    cos: Vec<f64>,
    e_norm: Vec<f64>,
    w_norm: Vec<f64>,
    n: usize,
    c: usize,
    d: usize,
}

fn cosine_field(embeddings: &Tensor, class_weights: &Tensor) -> Result<CosineField> {
    if embeddings.ndim() != 2 || class_weights.ndim() != 2 {
        return Err(Error::ShapeMismatch("expected [n,d] embeddings and [c,d] weights".into()));
    }
    let (n, d) = (embeddings.dim(0), embeddings.dim(1));
    let (c, wd) = (class_weights.dim(0), class_weights.dim(1));
    if d != wd {
        return Err(Error::ShapeMismatch(alloc::format!(
            "embedding dim {d} vs class weight dim {wd}"
        )));
    }
    let mut e_norm = vec![0.0; n];
    for i in 0..n {
        let row = &embeddings.data()[i * d..(i + 1) * d];
        let sq: f64 = row.iter().map(|&v| v * v).sum();
        if sq == 0.0 {
            return Err(Error::Numeric(alloc::format!("zero-norm embedding at row {i}")));
        }
        e_norm[i] = math::sqrt(sq);
    }
    let mut w_norm = vec![0.0; c];
    for j in 0..c {
        let row = &class_weights.data()[j * d..(j + 1) * d];
        let sq: f64 = row.iter().map(|&v| v * v).sum();
        if sq == 0.0 {
            return Err(Error::Numeric(alloc::format!("zero-norm class weight at row {j}")));
        }
        w_norm[j] = math::sqrt(sq);
    }
    let mut cos = vec![0.0; n * c];
    for i in 0..n {
        let e = &embeddings.data()[i * d..(i + 1) * d];
        for j in 0..c {
            let w = &class_weights.data()[j * d..(j + 1) * d];
            let dot: f64 = e.iter().zip(w.iter()).map(|(&a, &b)| a * b).sum();
            cos[i * c + j] = dot / (e_norm[i] * w_norm[j]);
        }
    }
    Ok(CosineField { cos, e_norm, w_norm, n, c, d })
}

/// Chain gradients at the cosine field back to embeddings and weights.
fn cosine_backward(
    embeddings: &Tensor,
    class_weights: &Tensor,
    field: &CosineField,
    dcos: &[f64],
) -> (Tensor, Tensor) {
    let (n, c, d) = (field.n, field.c, field.d);
    let mut de = Tensor::zeros(embeddings.dims());
    let mut dw = Tensor::zeros(class_weights.dims());
    for i in 0..n {
        let e = &embeddings.data()[i * d..(i + 1) * d];
        for j in 0..c {
            let g = dcos[i * c + j];
            if g == 0.0 {
                continue;
            }
            let w = &class_weights.data()[j * d..(j + 1) * d];
            let cos = field.cos[i * c + j];
            let inv = 1.0 / (field.e_norm[i] * field.w_norm[j]);
            let e_sq = field.e_norm[i] * field.e_norm[i];
            let w_sq = field.w_norm[j] * field.w_norm[j];
            let de_row = &mut de.data_mut()[i * d..(i + 1) * d];
            for k in 0..d {
                de_row[k] += g * (w[k] * inv - cos * e[k] / e_sq);
            }
            let dw_row = &mut dw.data_mut()[j * d..(j + 1) * d];
            for k in 0..d {
                dw_row[k] += g * (e[k] * inv - cos * w[k] / w_sq);
            }
        }
    }
    (de, dw)
}

fn check_labels(labels: &[usize], n: usize, c: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if labels.len() != n {
        return Err(Error::ShapeMismatch(alloc::format!(
            "{n} embeddings but {} labels",
            labels.len()
        )));
    }
    if c < 2 {
        return Err(Error::InvalidInput("need at least 2 classes".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidInput(alloc::format!("label {bad} out of range for {c} classes")));
    }
    Ok(())
}

/// Additive-margin softmax: mean over the batch of
/// `-log( e^{s(cos_y - m)} / (e^{s(cos_y - m)} + sum_{j!=y} e^{s cos_j}) )`,
/// evaluated with a stable log-sum-exp. Returns the loss and gradients
/// w.r.t. embeddings and class weights.
pub fn am_softmax_loss(
    embeddings: &Tensor,
    labels: &[usize],
    class_weights: &Tensor,
    p: &LossParams,
) -> Result<(f64, Tensor, Tensor)> {
    let field = cosine_field(embeddings, class_weights)?;
    let (n, c) = (field.n, field.c);
    check_labels(labels, n, c)?;
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut dcos = vec![0.0; n * c];
    let mut z = vec![0.0; c];
    for i in 0..n {
        let y = labels[i];
        for j in 0..c {
            let margin = if j == y { p.margin } else { 0.0 };
            z[j] = p.scale * (field.cos[i * c + j] - margin);
        }
        let zmax = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum_exp: f64 = z.iter().map(|&v| math::exp(v - zmax)).sum();
        let lse = zmax + math::ln(sum_exp);
        loss += (lse - z[y]) * inv_n;
        for j in 0..c {
            let softmax = math::exp(z[j] - lse);
            let indicator = if j == y { 1.0 } else { 0.0 };
            dcos[i * c + j] = inv_n * p.scale * (softmax - indicator);
        }
    }
    let (de, dw) = cosine_backward(embeddings, class_weights, &field, &dcos);
    Ok((loss, de, dw))
}

/// Dissected softmax splitting the objective into an intra-class factor
/// `e^{s cos_y} / (e^{s cos_y} + eps)` and an inter-class factor
/// `1 / (1 + sum_{j!=y} e^{s cos_j})`. `Log` takes the negative log of
/// each factor; `Literal` averages the negated factors directly.
pub fn d_softmax_loss(
    embeddings: &Tensor,
    labels: &[usize],
    class_weights: &Tensor,
    p: &LossParams,
    form: DSoftmaxForm,
) -> Result<(f64, Tensor, Tensor)> {
    let field = cosine_field(embeddings, class_weights)?;
    let (n, c) = (field.n, field.c);
    check_labels(labels, n, c)?;
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut dcos = vec![0.0; n * c];
    for i in 0..n {
        let y = labels[i];
        let cos_y = field.cos[i * c + y];
        let mut inter_sum = 0.0;
        for j in 0..c {
            if j != y {
                inter_sum += math::exp(p.scale * field.cos[i * c + j]);
            }
        }
        match form {
            DSoftmaxForm::Log => {
                // -log intra - log inter = ln(1 + eps e^{-s cos_y}) + ln(1 + S)
                let t = p.epsilon * math::exp(-p.scale * cos_y);
                loss += (math::ln_1p(t) + math::ln_1p(inter_sum)) * inv_n;
                dcos[i * c + y] += inv_n * (-p.scale * t / (1.0 + t));
                for j in 0..c {
                    if j != y {
                        let e = math::exp(p.scale * field.cos[i * c + j]);
                        dcos[i * c + j] += inv_n * p.scale * e / (1.0 + inter_sum);
                    }
                }
            }
            DSoftmaxForm::Literal => {
                let e_y = math::exp(p.scale * cos_y);
                let intra = e_y / (e_y + p.epsilon);
                let inter = 1.0 / (1.0 + inter_sum);
                loss -= (intra + inter) * inv_n;
                dcos[i * c + y] -=
                    inv_n * p.scale * e_y * p.epsilon / ((e_y + p.epsilon) * (e_y + p.epsilon));
                for j in 0..c {
                    if j != y {
                        let e = math::exp(p.scale * field.cos[i * c + j]);
                        dcos[i * c + j] +=
                            inv_n * p.scale * e / ((1.0 + inter_sum) * (1.0 + inter_sum));
                    }
                }
            }
        }
    }
    let (de, dw) = cosine_backward(embeddings, class_weights, &field, &dcos);
    Ok((loss, de, dw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngExt;

    fn random_tensor(dims: &[usize], seed: u64) -> Tensor {
        let mut rng = crate::rng::from_seed(seed);
        let n: usize = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn params(scale: f64, margin: f64, epsilon: f64) -> LossParams {
        LossParams::new(scale, margin, epsilon).unwrap()
    }

    /// Plain softmax cross-entropy over cosine logits, written directly.
    fn softmax_ce_over_cosines(e: &Tensor, labels: &[usize], w: &Tensor) -> f64 {
        let (n, d) = (e.dim(0), e.dim(1));
        let c = w.dim(0);
        let mut total = 0.0;
        for i in 0..n {
            let ei = &e.data()[i * d..(i + 1) * d];
            let en = ei.iter().map(|&v| v * v).sum::<f64>().sqrt();
            let logits: Vec<f64> = (0..c)
                .map(|j| {
                    let wj = &w.data()[j * d..(j + 1) * d];
                    let wn = wj.iter().map(|&v| v * v).sum::<f64>().sqrt();
                    ei.iter().zip(wj.iter()).map(|(&a, &b)| a * b).sum::<f64>() / (en * wn)
                })
                .collect();
            let denom: f64 = logits.iter().map(|&z| z.exp()).sum();
            total -= (logits[labels[i]].exp() / denom).ln();
        }
        total / n as f64
    }

    #[test]
    fn margin_free_am_softmax_is_plain_cross_entropy() {
        let e = random_tensor(&[6, 8], 80);
        let w = random_tensor(&[4, 8], 81);
        let labels = [0usize, 1, 2, 3, 1, 0];
        let (loss, _, _) = am_softmax_loss(&e, &labels, &w, &params(1.0, 0.0, 0.0)).unwrap();
        let oracle = softmax_ce_over_cosines(&e, &labels, &w);
        assert!((loss - oracle).abs() <= 1e-12, "{loss} vs {oracle}");
    }

    #[test]
    fn two_class_scalar_case() {
        // cos(target) = 1, cos(other) = 0, s = 1, m = 0:
        // L = -ln(e / (e + 1)) = ln(1 + e^-1) ~ 0.31326168751822286
        let e = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let (loss, _, _) = am_softmax_loss(&e, &[0], &w, &params(1.0, 0.0, 0.0)).unwrap();
        assert!((loss - 0.31326168751822286).abs() < 1e-12);
    }

    #[test]
    fn am_softmax_scale_invariance_of_inputs() {
        let e = random_tensor(&[5, 16], 82);
        let w = random_tensor(&[3, 16], 83);
        let labels = [0usize, 1, 2, 1, 0];
        let p = params(30.0, 0.2, 0.0);
        let (base, _, _) = am_softmax_loss(&e, &labels, &w, &p).unwrap();
        let mut e2 = e.clone();
        for v in e2.data_mut()[..16].iter_mut() {
            *v *= 7.25;
        }
        let mut w2 = w.clone();
        for v in w2.data_mut()[16..32].iter_mut() {
            *v *= 0.03;
        }
        let (scaled_e, _, _) = am_softmax_loss(&e2, &labels, &w, &p).unwrap();
        let (scaled_w, _, _) = am_softmax_loss(&e, &labels, &w2, &p).unwrap();
        assert!((base - scaled_e).abs() <= 1e-9);
        assert!((base - scaled_w).abs() <= 1e-9);
    }

    #[test]
    fn loss_is_monotone_in_margin() {
        let e = random_tensor(&[6, 12], 84);
        let w = random_tensor(&[4, 12], 85);
        let labels = [0usize, 1, 2, 3, 0, 2];
        let mut last = f64::NEG_INFINITY;
        for &m in &[0.0, 0.05, 0.1, 0.2, 0.4] {
            let (loss, _, _) = am_softmax_loss(&e, &labels, &w, &params(10.0, m, 0.0)).unwrap();
            assert!(loss > last, "margin {m}: {loss} <= {last}");
            last = loss;
        }
    }

    #[test]
    fn d_softmax_intra_term_vanishes_at_zero_epsilon() {
        let e = random_tensor(&[4, 8], 86);
        let w = random_tensor(&[3, 8], 87);
        let labels = [0usize, 1, 2, 1];
        let p = params(5.0, 0.0, 0.0);
        let (loss, _, _) = d_softmax_loss(&e, &labels, &w, &p, DSoftmaxForm::Log).unwrap();
        // with eps = 0 only the inter term remains: recompute it directly
        let field = cosine_field(&e, &w).unwrap();
        let mut inter = 0.0;
        for i in 0..4 {
            let mut s = 0.0;
            for j in 0..3 {
                if j != labels[i] {
                    s += (5.0 * field.cos[i * 3 + j]).exp();
                }
            }
            inter += (1.0 + s).ln() / 4.0;
        }
        assert!((loss - inter).abs() < 1e-12);
    }

    #[test]
    fn literal_form_scalar_case() {
        // cos(target) = 1, one competitor at cos 0, s = 1, eps = 1:
        // -(e/(e+1) + 1/2) ~ -1.2310585786300049
        let e = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let (loss, _, _) =
            d_softmax_loss(&e, &[0], &w, &params(1.0, 0.0, 1.0), DSoftmaxForm::Literal).unwrap();
        assert!((loss - (-1.2310585786300049)).abs() < 1e-12, "{loss}");
    }

    fn fd_loss_check(
        loss_fn: &dyn Fn(&Tensor, &Tensor) -> (f64, Tensor, Tensor),
        e: &Tensor,
        w: &Tensor,
    ) {
        let (_, de, dw) = loss_fn(e, w);
        let step = 1e-5;
        let check = |num: f64, ana: f64, what: &str| {
            let diff = (num - ana).abs();
            assert!(
                diff <= 1e-4 * num.abs().max(ana.abs()) || diff <= 1e-8,
                "{what}: numeric {num} vs analytic {ana}"
            );
        };
        for i in 0..e.len() {
            let mut plus = e.clone();
            plus.data_mut()[i] += step;
            let mut minus = e.clone();
            minus.data_mut()[i] -= step;
            let num = (loss_fn(&plus, w).0 - loss_fn(&minus, w).0) / (2.0 * step);
            check(num, de.data()[i], "embedding grad");
        }
        for i in 0..w.len() {
            let mut plus = w.clone();
            plus.data_mut()[i] += step;
            let mut minus = w.clone();
            minus.data_mut()[i] -= step;
            let num = (loss_fn(e, &plus).0 - loss_fn(e, &minus).0) / (2.0 * step);
            check(num, dw.data()[i], "class weight grad");
        }
    }

    #[test]
    fn am_softmax_gradients_match_finite_differences() {
        let e = random_tensor(&[4, 6], 88);
        let w = random_tensor(&[3, 6], 89);
        let labels = [0usize, 1, 2, 1];
        let p = params(10.0, 0.2, 0.0);
        fd_loss_check(&|e, w| am_softmax_loss(e, &labels, w, &p).unwrap(), &e, &w);
    }

    #[test]
    fn d_softmax_gradients_match_finite_differences_both_forms() {
        let e = random_tensor(&[3, 5], 90);
        let w = random_tensor(&[4, 5], 91);
        let labels = [0usize, 2, 3];
        let p = params(4.0, 0.0, 0.7);
        for form in [DSoftmaxForm::Log, DSoftmaxForm::Literal] {
            fd_loss_check(&|e, w| d_softmax_loss(e, &labels, w, &p, form).unwrap(), &e, &w);
        }
    }

    #[test]
    fn zero_norm_inputs_error() {
        let mut e = random_tensor(&[2, 4], 92);
        for v in e.data_mut()[..4].iter_mut() {
            *v = 0.0;
        }
        let w = random_tensor(&[2, 4], 93);
        assert!(am_softmax_loss(&e, &[0, 1], &w, &params(1.0, 0.0, 0.0)).is_err());
    }
}
