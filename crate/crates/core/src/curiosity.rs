//! Internal belief, contrastive curiosity and the curiosity-weighted
//! contrastive loss.

use crate::error::{Error, Result};
use crate::nn::similarity_logits;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Diagonal of the row-wise softmax of a square logit matrix.
pub fn belief_from_logits<R: Real>(logits: &Tensor<R>) -> Result<Vec<R>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::shape("internal_belief", format!("logits {s:?} not square")));
    }
    if s[0] < 2 {
        return Err(Error::invalid(
            "internal belief needs a batch of at least 2 (no negatives otherwise)",
        ));
    }
    let b = s[0];
    Ok((0..b)
        .map(|r| {
            let row = logits.row(r);
            let max = row.iter().copied().fold(R::neg_infinity(), R::max);
            let denom: R = row.iter().map(|&l| (l - max).exp()).sum();
            (row[r] - max).exp() / denom
        })
        .collect())
}

/// Probability that each query is matched to its own key against the other
/// `B − 1` keys of the batch.
pub fn internal_belief<R: Real>(queries: &Tensor<R>, keys: &Tensor<R>, w: &Tensor<R>) -> Result<Vec<R>> {
    belief_from_logits(&similarity_logits(queries, w, keys)?)
}

/// `c = 1 − IB` per sample.
pub fn curiosity<R: Real>(queries: &Tensor<R>, keys: &Tensor<R>, w: &Tensor<R>) -> Result<Vec<R>> {
    let ib = internal_belief(queries, keys, w)?;
    Ok(ib.into_iter().map(|p| (R::one() - p).max(R::zero())).collect())
}

/// Per-sample key view chosen by maximum curiosity.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection<R> {
    pub j: Vec<usize>,
    pub c: Vec<R>,
}

/// For the query view `fixed_i`, picks per sample the key view `j ≠ fixed_i`
/// with the highest curiosity. `keys[m]` holds the key embeddings of view
/// `m`; negatives for candidate `j` come from the other samples' view-`j`
/// keys. Ties go to the lowest index.
pub fn select_max_curiosity<R: Real>(
    query: &Tensor<R>,
    keys: &[Tensor<R>],
    w: &Tensor<R>,
    fixed_i: usize,
) -> Result<Selection<R>> {
    if keys.len() < 2 {
        return Err(Error::invalid(format!(
            "selection needs at least 2 views, got {}",
            keys.len()
        )));
    }
    if fixed_i >= keys.len() {
        return Err(Error::invalid(format!(
            "query view {fixed_i} out of range for {} views",
            keys.len()
        )));
    }
    let b = query.rows();
    let mut best: Option<Selection<R>> = None;
    for (j, k) in keys.iter().enumerate() {
        if j == fixed_i {
            continue;
        }
        let c = curiosity(query, k, w)?;
        match best.as_mut() {
            None => {
                best = Some(Selection {
                    j: vec![j; b],
                    c,
                })
            }
            Some(sel) => {
                for s in 0..b {
                    if c[s] > sel.c[s] {
                        sel.c[s] = c[s];
                        sel.j[s] = j;
                    }
                }
            }
        }
    }
    Ok(best.expect("at least one candidate"))
}

/// Curiosity of the selected view pairs for one training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct CuriosityReport<R> {
    pub i: Vec<usize>,
    pub j: Vec<usize>,
    pub i_next: Vec<usize>,
    pub j_next: Vec<usize>,
    pub c: Vec<R>,
    pub c_next: Vec<R>,
}

impl<R: Real> CuriosityReport<R> {
    pub fn mean_c(&self) -> f64 {
        mean(&self.c)
    }

    pub fn mean_c_next(&self) -> f64 {
        mean(&self.c_next)
    }
}

fn mean<R: Real>(v: &[R]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().map(|x| x.as_f64()).sum::<f64>() / v.len() as f64
    }
}

/// `−Σ_b c_b · log softmax(logits_b)_b` with constant weights.
pub fn weighted_contrastive_loss<R: Real>(tape: &mut Tape<R>, logits: Var, weights: &[R]) -> Result<Var> {
    let s = tape.value(logits).shape().to_vec();
    if s.len() != 2 || s[0] != s[1] || s[0] != weights.len() {
        return Err(Error::shape(
            "weighted_contrastive_loss",
            format!("logits {s:?} with {} weights", weights.len()),
        ));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= R::zero()) || !w.is_finite()) {
        return Err(Error::invalid(format!("contrastive weight {w} must be finite and non-negative")));
    }
    let b = s[0];
    let log_p = tape.log_softmax(logits)?;
    let diag: Vec<usize> = (0..b).collect();
    let picked = tape.pick(log_p, &diag)?;
    let wv = tape.constant(Tensor::new(&[b], weights.to_vec())?);
    let weighted = tape.mul(picked, wv)?;
    let total = tape.sum(weighted);
    Ok(tape.neg(total))
}

/// `−Σ_b log softmax(logits_b)_b` as a cross-entropy over the diagonal
/// labels; the form used by the CURL baseline.
pub fn info_nce_loss<R: Real>(tape: &mut Tape<R>, logits: Var) -> Result<Var> {
    let s = tape.value(logits).shape().to_vec();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::shape("info_nce_loss", format!("logits {s:?} not square")));
    }
    let log_p = tape.log_softmax(logits)?;
    let diag: Vec<usize> = (0..s[0]).collect();
    let picked = tape.pick(log_p, &diag)?;
    let total = tape.sum(picked);
    Ok(tape.neg(total))
}

/// The unweighted InfoNCE loss `−Σ_b log(exp(l_bb) / Σ_l exp(l_bl))`,
/// evaluated through an explicit softmax.
pub fn contrastive_loss<R: Real>(tape: &mut Tape<R>, logits: Var) -> Result<Var> {
    let b = tape.value(logits).rows();
    let p = tape.softmax(logits)?;
    let log_p = tape.log(p);
    let diag: Vec<usize> = (0..b).collect();
    let picked = tape.pick(log_p, &diag)?;
    let total = tape.sum(picked);
    Ok(tape.neg(total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn zero_w_gives_uniform_belief() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = random(&mut rng, &[4, 3]);
        let k = random(&mut rng, &[4, 3]);
        let w = Tensor::zeros(&[3, 3]);
        for ib in internal_belief(&q, &k, &w).unwrap() {
            assert!((ib - 0.25).abs() < 1e-15);
        }
        for c in curiosity(&q, &k, &w).unwrap() {
            assert!((c - 0.75).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_belief() {
        let logits = Tensor::<f64>::new(&[2, 2], vec![10.0, -10.0, -10.0, 10.0]).unwrap();
        for ib in belief_from_logits(&logits).unwrap() {
            assert!(ib >= 1.0 - 1e-6);
        }
    }

    #[test]
    fn batch_of_one_rejected() {
        let q = Tensor::<f64>::zeros(&[1, 3]);
        assert!(internal_belief(&q, &q, &Tensor::eye(3)).is_err());
    }

    #[test]
    fn belief_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (b, d) = (6, 4);
        let q = random(&mut rng, &[b, d]);
        let k = random(&mut rng, &[b, d]);
        let w = random(&mut rng, &[d, d]);
        let ib = internal_belief(&q, &k, &w).unwrap();
        for r in 0..b {
            let sim = |l: usize| {
                let mut s = 0.0;
                for x in 0..d {
                    for y in 0..d {
                        s += q.row(r)[x] * w.data()[x * d + y] * k.row(l)[y];
                    }
                }
                s
            };
            let denom: f64 = (0..b).map(|l| sim(l).exp()).sum();
            assert!((ib[r] - sim(r).exp() / denom).abs() < 1e-6);
        }
    }

    #[test]
    fn belief_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = random(&mut rng, &[5, 5]);
        let mut shifted = logits.clone();
        for r in 0..5 {
            let s = r as f64 * 100.0 - 250.0;
            for v in &mut shifted.data_mut()[r * 5..(r + 1) * 5] {
                *v += s;
            }
        }
        let a = belief_from_logits(&logits).unwrap();
        let b = belief_from_logits(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn two_views_pick_the_other() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random(&mut rng, &[4, 3]);
        let keys = vec![random(&mut rng, &[4, 3]), random(&mut rng, &[4, 3])];
        let w = random(&mut rng, &[3, 3]);
        let sel = select_max_curiosity(&q, &keys, &w, 1).unwrap();
        assert_eq!(sel.j, vec![0; 4]);
        assert_eq!(sel.c, curiosity(&q, &keys[0], &w).unwrap());
    }

    #[test]
    fn identical_views_tie_to_lowest() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random(&mut rng, &[3, 2]);
        let k = random(&mut rng, &[3, 2]);
        let keys = vec![k.clone(), k.clone(), k.clone(), k];
        let w = random(&mut rng, &[2, 2]);
        assert_eq!(select_max_curiosity(&q, &keys, &w, 0).unwrap().j, vec![1; 3]);
        assert_eq!(select_max_curiosity(&q, &keys, &w, 2).unwrap().j, vec![0; 3]);
        assert!(select_max_curiosity(&q, &keys[..1], &w, 0).is_err());
        assert!(select_max_curiosity(&q, &keys, &w, 4).is_err());
    }

    #[test]
    fn weighted_loss_matches_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = random(&mut rng, &[5, 5]);
        let weights: Vec<f64> = (0..5).map(|_| rng.random()).collect();
        let mut tape = Tape::new();
        let l = tape.constant(logits.clone());
        let loss = weighted_contrastive_loss(&mut tape, l, &weights).unwrap();
        let mut want = 0.0;
        for r in 0..5 {
            let row = logits.row(r);
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            want += weights[r] * (lse - row[r]);
        }
        assert!((tape.scalar(loss) - want).abs() < 1e-10);
    }

    #[test]
    fn unit_weights_equal_infonce_and_zero_weights_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits = random(&mut rng, &[4, 4]);
        let mut tape = Tape::new();
        let l = tape.leaf(logits, true);
        let a = weighted_contrastive_loss(&mut tape, l, &[1.0; 4]).unwrap();
        let b = contrastive_loss(&mut tape, l).unwrap();
        assert!((tape.scalar(a) - tape.scalar(b)).abs() < 1e-12);
        let c = info_nce_loss(&mut tape, l).unwrap();
        assert_eq!(tape.scalar(a), tape.scalar(c));
        let z = weighted_contrastive_loss(&mut tape, l, &[0.0; 4]).unwrap();
        assert_eq!(tape.scalar(z), 0.0);
        let g = tape.backward(z).unwrap();
        assert!(g.get(l).unwrap().iter().all(|&v| v == 0.0));
        assert!(weighted_contrastive_loss(&mut tape, l, &[1.0, -0.1, 0.0, 0.0]).is_err());
    }
}
