use crate::embedder::{dot, EmbedError, EmbeddingVector, ProjectionHead};

use super::TrainError;

/// A triplet with its three base embeddings looked up.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedTriplet {
    pub query: EmbeddingVector,
    pub positive: EmbeddingVector,
    pub negative: EmbeddingVector,
}

struct Projected {
    v: Vec<f64>,
    norm: f64,
}

fn project(head: &ProjectionHead, x: &EmbeddingVector) -> Result<Projected, TrainError> {
    let v = head.project(x)?.into_values();
    let norm = dot(&v, &v).sqrt();
    if norm == 0.0 {
        return Err(EmbedError::ZeroNorm.into());
    }
    Ok(Projected { v, norm })
}

fn cosine(a: &Projected, b: &Projected) -> f64 {
    dot(&a.v, &b.v) / (a.norm * b.norm)
}

/// Adds `coef * d cos(a, b) / d a` into `ga`.
fn accumulate_cos_grad(ga: &mut [f64], a: &Projected, b: &Projected, cos: f64, coef: f64) {
    let inv_ab = 1.0 / (a.norm * b.norm);
    let inv_aa = 1.0 / (a.norm * a.norm);
    for ((g, &ai), &bi) in ga.iter_mut().zip(&a.v).zip(&b.v) {
        *g += coef * (bi * inv_ab - cos * ai * inv_aa);
    }
}

struct Forward {
    queries: Vec<Projected>,
    positives: Vec<Projected>,
    negatives: Vec<Projected>,
    /// Row i: logits [s(q_i, p_i), s(q_i, n_1), ..., s(q_i, n_B)] before the temperature.
    cos: Vec<Vec<f64>>,
}

fn forward(
    head: &ProjectionHead,
    batch: &[EmbeddedTriplet],
    batch_size: usize,
) -> Result<Forward, TrainError> {
    if batch.len() != batch_size || batch.is_empty() {
        return Err(TrainError::BatchSize {
            expected: batch_size,
            got: batch.len(),
        });
    }
    let queries = batch.iter().map(|t| project(head, &t.query)).collect::<Result<Vec<_>, _>>()?;
    let positives = batch.iter().map(|t| project(head, &t.positive)).collect::<Result<Vec<_>, _>>()?;
    let negatives = batch.iter().map(|t| project(head, &t.negative)).collect::<Result<Vec<_>, _>>()?;
    let cos = queries
        .iter()
        .zip(&positives)
        .map(|(q, p)| {
            std::iter::once(cosine(q, p))
                .chain(negatives.iter().map(|n| cosine(q, n)))
                .collect()
        })
        .collect();
    Ok(Forward {
        queries,
        positives,
        negatives,
        cos,
    })
}

/// Per-row loss and softmax over the scaled logits, stabilized by subtracting the max.
fn row_loss_and_softmax(row: &[f64], temperature: f64) -> (f64, Vec<f64>) {
    let logits: Vec<f64> = row.iter().map(|c| c / temperature).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let lse = max + sum.ln();
    let loss = lse - logits[0];
    (loss.max(0.0), exps.into_iter().map(|e| e / sum).collect())
}

/// Mean over the batch of `-log(e^{s(x_i,e_i+)} / (e^{s(x_i,e_i+)} + Σ_j e^{s(x_i,e_j-)}))`,
/// with `s = cos(W·, W·) / temperature` and j running over all B hard negatives.
pub fn info_nce_loss(
    head: &ProjectionHead,
    batch: &[EmbeddedTriplet],
    batch_size: usize,
    temperature: f64,
) -> Result<f64, TrainError> {
    let fwd = forward(head, batch, batch_size)?;
    let total: f64 = fwd
        .cos
        .iter()
        .map(|row| row_loss_and_softmax(row, temperature).0)
        .sum();
    Ok(total / batch.len() as f64)
}

/// Loss together with dL/dW (row-major, d×d).
pub fn loss_and_gradient(
    head: &ProjectionHead,
    batch: &[EmbeddedTriplet],
    batch_size: usize,
    temperature: f64,
) -> Result<(f64, Vec<f64>), TrainError> {
    let d = head.dim();
    let fwd = forward(head, batch, batch_size)?;
    let b = batch.len();
    let scale = 1.0 / (temperature * b as f64);

    let mut gq = vec![vec![0.0; d]; b];
    let mut gp = vec![vec![0.0; d]; b];
    let mut gn = vec![vec![0.0; d]; b];
    let mut total = 0.0;
    for i in 0..b {
        let (loss, pi) = row_loss_and_softmax(&fwd.cos[i], temperature);
        total += loss;
        let q = &fwd.queries[i];
        let p = &fwd.positives[i];
        let c = fwd.cos[i][0];
        let coef = (pi[0] - 1.0) * scale;
        accumulate_cos_grad(&mut gq[i], q, p, c, coef);
        accumulate_cos_grad(&mut gp[i], p, q, c, coef);
        for (j, n) in fwd.negatives.iter().enumerate() {
            let c = fwd.cos[i][j + 1];
            let coef = pi[j + 1] * scale;
            accumulate_cos_grad(&mut gq[i], q, n, c, coef);
            accumulate_cos_grad(&mut gn[j], n, q, c, coef);
        }
    }

    // dL/dW = Σ over projected items of g ⊗ base
    let mut grad = vec![0.0; d * d];
    let mut outer = |g: &[f64], base: &EmbeddingVector| {
        for (r, &gr) in g.iter().enumerate() {
            if gr == 0.0 {
                continue;
            }
            let row = &mut grad[r * d..(r + 1) * d];
            for (w, &x) in row.iter_mut().zip(base.values()) {
                *w += gr * x;
            }
        }
    };
    for (i, t) in batch.iter().enumerate() {
        outer(&gq[i], &t.query);
        outer(&gp[i], &t.positive);
        outer(&gn[i], &t.negative);
    }
    Ok((total / b as f64, grad))
}

pub fn loss_gradient(
    head: &ProjectionHead,
    batch: &[EmbeddedTriplet],
    batch_size: usize,
    temperature: f64,
) -> Result<Vec<f64>, TrainError> {
    loss_and_gradient(head, batch, batch_size, temperature).map(|(_, g)| g)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn v(xs: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(xs.to_vec()).unwrap()
    }

    fn uniform_batch(b: usize) -> Vec<EmbeddedTriplet> {
        let x = v(&[0.3, -0.7, 1.1]);
        vec![
            EmbeddedTriplet {
                query: x.clone(),
                positive: x.clone(),
                negative: x,
            };
            b
        ]
    }

    #[test]
    fn equal_similarities_give_ln_b_plus_one() {
        let head = ProjectionHead::identity(3, "m");
        for b in [1usize, 4, 32] {
            let l = info_nce_loss(&head, &uniform_batch(b), b, 1.0).unwrap();
            assert!((l - ((b + 1) as f64).ln()).abs() < 1e-6, "B={b}: {l}");
        }
        let l = info_nce_loss(&head, &uniform_batch(32), 32, 1.0).unwrap();
        assert!((l - 3.4965).abs() < 1e-4);
    }

    #[test]
    fn single_triplet_closed_form() {
        let head = ProjectionHead::identity(2, "m");
        let batch = [EmbeddedTriplet {
            query: v(&[1.0, 0.0]),
            positive: v(&[2.0, 0.0]),
            negative: v(&[0.0, 1.0]),
        }];
        let l = info_nce_loss(&head, &batch, 1, 1.0).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((l - expected).abs() < 1e-6);
        assert!((l - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn loss_falls_as_positive_similarity_rises() {
        // cos(q, p) = cos(theta) rises towards 1 as theta shrinks
        let head = ProjectionHead::identity(2, "m");
        let mut prev = f64::INFINITY;
        for step in 0..20 {
            let theta = std::f64::consts::PI * (1.0 - step as f64 / 19.0) * 0.9;
            let batch = [EmbeddedTriplet {
                query: v(&[1.0, 0.0]),
                positive: v(&[theta.cos(), theta.sin()]),
                negative: v(&[0.0, 1.0]),
            }];
            let l = info_nce_loss(&head, &batch, 1, 1.0).unwrap();
            assert!(l >= 0.0);
            assert!(l < prev);
            prev = l;
        }
        // large temperature-scaled margin drives the loss towards 0
        let batch = [EmbeddedTriplet {
            query: v(&[1.0, 0.0]),
            positive: v(&[1.0, 0.0]),
            negative: v(&[-1.0, 0.0]),
        }];
        assert!(info_nce_loss(&head, &batch, 1, 0.01).unwrap() < 1e-12);
    }

    #[test]
    fn batch_size_enforced() {
        let head = ProjectionHead::identity(3, "m");
        assert!(matches!(
            info_nce_loss(&head, &uniform_batch(3), 4, 1.0),
            Err(TrainError::BatchSize { expected: 4, got: 3 })
        ));
        let zero = ProjectionHead::from_weights(3, vec![0.0; 9], "m", 1).unwrap();
        assert!(matches!(
            info_nce_loss(&zero, &uniform_batch(2), 2, 1.0),
            Err(TrainError::Degenerate(_))
        ));
    }

    #[test]
    fn symmetric_batch_is_stationary() {
        let head = ProjectionHead::identity(3, "m");
        let g = loss_gradient(&head, &uniform_batch(5), 5, 1.0).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-9));
    }

    #[test]
    fn descent_direction_lowers_loss() {
        let head = ProjectionHead::identity(2, "m");
        let batch = [EmbeddedTriplet {
            query: v(&[1.0, 0.2]),
            positive: v(&[0.8, 0.7]),
            negative: v(&[0.1, 1.0]),
        }];
        let (l0, g) = loss_and_gradient(&head, &batch, 1, 1.0).unwrap();
        assert!(g.iter().any(|x| x.abs() > 1e-6));
        let stepped: Vec<f64> = head.weights().iter().zip(&g).map(|(w, gi)| w - 1e-3 * gi).collect();
        let h2 = ProjectionHead::from_weights(2, stepped, "m", 1).unwrap();
        assert!(info_nce_loss(&h2, &batch, 1, 1.0).unwrap() < l0);
    }

    #[test]
    fn gradient_matches_finite_differences_with_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 3;
        let mut rv = || v(&(0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
        let batch: Vec<EmbeddedTriplet> = (0..3)
            .map(|_| EmbeddedTriplet { query: rv(), positive: rv(), negative: rv() })
            .collect();
        let w: Vec<f64> = (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.2 }).collect();
        let head = ProjectionHead::from_weights(d, w.clone(), "m", 0).unwrap();
        let g = loss_gradient(&head, &batch, 3, 0.5).unwrap();
        let h = 1e-5;
        for k in 0..d * d {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[k] += h;
            wm[k] -= h;
            let lp = info_nce_loss(&ProjectionHead::from_weights(d, wp, "m", 0).unwrap(), &batch, 3, 0.5).unwrap();
            let lm = info_nce_loss(&ProjectionHead::from_weights(d, wm, "m", 0).unwrap(), &batch, 3, 0.5).unwrap();
            assert!((g[k] - (lp - lm) / (2.0 * h)).abs() < 1e-7);
        }
    }
}
