// SPDX-License-Identifier: Apache-2.0

//! Final-model metrics: held-out reconstruction error and the FactorVAE
//! majority-vote disentanglement score.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::Array;
use crate::model::{argmax, Model};
use crate::rng;
use crate::toydata::{Dataset, FACTOR_COUNT};

const EVAL_CHUNK: usize = 256;
/// Latent dimensions with a smaller dataset std are dropped before voting.
pub const COLLAPSED_STD: f64 = 1e-8;

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `Σ_pixels softplus(z) − x·z` for one image.
pub fn image_bce(logits: &[f64], target: &[f64]) -> f64 {
    logits
        .iter()
        .zip(target)
        .map(|(z, x)| softplus(*z) - x * z)
        .sum()
}

/// Mean per-image BCE over `indices`, with `t = μ` and the hard discrete
/// code.
pub fn reconstruction_error(model: &Model, data: &Dataset, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::invalid("reconstruction error over no images"));
    }
    let mut total = 0.0;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let x = data.batch(chunk);
        let (logits, _) = model.reconstruct_eval(&x)?;
        for r in 0..x.rows() {
            total += image_bce(logits.row(r), x.row(r));
        }
    }
    Ok(total / indices.len() as f64)
}

/// Posterior means for every image, `[N, d]`, optionally followed by the
/// index of the hard discrete code.
pub fn model_latents(model: &Model, data: &Dataset, include_discrete: bool) -> Result<Array> {
    let cols = model.dims.d + usize::from(include_discrete);
    let mut out = Vec::with_capacity(data.len() * cols);
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let enc = model.encode(&data.batch(chunk))?;
        for r in 0..chunk.len() {
            out.extend_from_slice(enc.mu.row(r));
            if include_discrete {
                out.push(argmax(enc.logits.row(r)) as f64);
            }
        }
    }
    Array::new(vec![data.len(), cols], out)
}

/// Ground-truth factor columns of `data` and which of them are discrete.
pub fn factor_table(data: &Dataset) -> (Array, Vec<bool>) {
    let mut discrete = vec![false; FACTOR_COUNT];
    discrete[0] = true;
    (data.labels(), discrete)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FvmOptions {
    pub votes: usize,
    pub samples_per_vote: usize,
    /// Equal-frequency bins used to hold a continuous factor fixed.
    pub bins: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FvmResult {
    pub score: f64,
    /// Latent dimensions kept after dropping collapsed ones.
    pub active_dims: usize,
    /// Factor assigned to each active dimension by the majority vote.
    pub classifier: Vec<usize>,
}

/// FactorVAE score. A classifier mapping "dimension of least normalised
/// variance" to "factor held fixed" is fitted by majority vote on one set
/// of votes and scored on a second, independent set.
pub fn fvm_score(
    latents: &Array,
    factors: &Array,
    discrete: &[bool],
    opts: &FvmOptions,
) -> Result<FvmResult> {
    if opts.votes < 10 {
        return Err(Error::invalid(format!(
            "{} votes are too few for a meaningful score (need ≥ 10)",
            opts.votes
        )));
    }
    if opts.samples_per_vote < 2 || opts.bins == 0 {
        return Err(Error::invalid("need ≥ 2 samples per vote and ≥ 1 bin"));
    }
    let n = latents.rows();
    if factors.rows() != n || n < 2 {
        return Err(Error::dim(
            "latents and factors must have the same ≥ 2 rows",
        ));
    }
    let n_factors = factors.last_dim();
    if discrete.len() != n_factors {
        return Err(Error::dim("one discreteness flag per factor required"));
    }

    let dims = latents.last_dim();
    let mut kept = Vec::new();
    let mut scale = Vec::new();
    for c in 0..dims {
        let col: Vec<f64> = (0..n).map(|r| latents.row(r)[c]).collect();
        let sd = std_dev(&col);
        if sd > COLLAPSED_STD {
            kept.push(c);
            scale.push(sd);
        }
    }
    if kept.is_empty() {
        return Err(Error::invalid("every latent dimension is collapsed"));
    }
    let normalised: Vec<Vec<f64>> = (0..n)
        .map(|r| {
            kept.iter()
                .zip(&scale)
                .map(|(c, s)| latents.row(r)[*c] / s)
                .collect()
        })
        .collect();

    let groups: Vec<Vec<Vec<usize>>> = (0..n_factors)
        .map(|k| {
            let col: Vec<f64> = (0..n).map(|r| factors.row(r)[k]).collect();
            let g = if discrete[k] {
                group_by_value(&col)
            } else {
                group_by_quantile(&col, opts.bins)
            };
            g.into_iter().filter(|members| members.len() >= 2).collect()
        })
        .collect();
    if groups.iter().any(Vec::is_empty) {
        return Err(Error::invalid("a factor has no value shared by two images"));
    }

    let votes = |stream: u64| -> Vec<(usize, usize)> {
        let mut rng = rng::stream(opts.seed, rng::FVM, stream);
        (0..opts.votes)
            .map(|_| {
                let k = rng.random_range(0..n_factors);
                let group = &groups[k][rng.random_range(0..groups[k].len())];
                let picks: Vec<usize> = (0..opts.samples_per_vote)
                    .map(|_| group[rng.random_range(0..group.len())])
                    .collect();
                (least_variance_dim(&normalised, &picks), k)
            })
            .collect()
    };

    let mut counts = vec![vec![0usize; n_factors]; kept.len()];
    for (dim, k) in votes(0) {
        counts[dim][k] += 1;
    }
    let classifier: Vec<usize> = counts.iter().map(|c| majority(c)).collect();
    let eval = votes(1);
    let correct = eval
        .iter()
        .filter(|(dim, k)| classifier[*dim] == *k)
        .count();
    Ok(FvmResult {
        score: correct as f64 / eval.len() as f64,
        active_dims: kept.len(),
        classifier,
    })
}

fn std_dev(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Index of the largest count; ties and all-zero go to the lowest index.
fn majority(counts: &[usize]) -> usize {
    let mut best = 0;
    for (k, c) in counts.iter().enumerate() {
        if *c > counts[best] {
            best = k;
        }
    }
    best
}

#[allow(clippy::needless_range_loop)]
fn least_variance_dim(latents: &[Vec<f64>], picks: &[usize]) -> usize {
    let dims = latents[0].len();
    let m = picks.len() as f64;
    let mut best = (0, f64::INFINITY);
    for c in 0..dims {
        let mean = picks.iter().map(|r| latents[*r][c]).sum::<f64>() / m;
        let var = picks
            .iter()
            .map(|r| (latents[*r][c] - mean).powi(2))
            .sum::<f64>()
            / (m - 1.0);
        if var < best.1 {
            best = (c, var);
        }
    }
    best.0
}

fn group_by_value(col: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..col.len()).collect();
    order.sort_by(|a, b| col[*a].total_cmp(&col[*b]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for r in order {
        match groups.last_mut() {
            Some(g) if col[g[0]] == col[r] => g.push(r),
            _ => groups.push(vec![r]),
        }
    }
    groups
}

/// Rank-based equal-frequency bins.
fn group_by_quantile(col: &[f64], bins: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..col.len()).collect();
    order.sort_by(|a, b| col[*a].total_cmp(&col[*b]));
    let n = col.len();
    let mut groups = vec![Vec::new(); bins.min(n)];
    let count = groups.len();
    for (rank, r) in order.into_iter().enumerate() {
        groups[rank * count / n].push(r);
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use rand_distr::{Distribution, StandardNormal};

    fn opts(seed: u64) -> FvmOptions {
        FvmOptions {
            votes: 500,
            samples_per_vote: 64,
            bins: 10,
            seed,
        }
    }

    fn data() -> Dataset {
        Dataset::generate(1024, 12, 7).unwrap()
    }

    #[test]
    fn ground_truth_latents_score_one() {
        let ds = data();
        let (factors, discrete) = factor_table(&ds);
        let r = fvm_score(&factors, &factors, &discrete, &opts(1)).unwrap();
        assert_eq!(r.score, 1.0);
        assert_eq!(r.classifier, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn noise_latents_score_near_chance() {
        let ds = data();
        let (factors, discrete) = factor_table(&ds);
        let mut rng = rng::stream(3, "noise-latents", 0);
        let noise: Vec<f64> = (0..ds.len() * 6)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let latents = Array::new(vec![ds.len(), 6], noise).unwrap();
        let r = fvm_score(&latents, &factors, &discrete, &opts(2)).unwrap();
        let sigma = (0.2f64 * 0.8 / 500.0).sqrt();
        assert!((r.score - 0.2).abs() <= 3.0 * sigma, "{}", r.score);
    }

    #[test]
    fn score_ignores_positive_rescaling_and_collapsed_dims() {
        let ds = data();
        let (factors, discrete) = factor_table(&ds);
        let mut rng = rng::stream(4, "noise-latents", 0);
        let base: Vec<f64> = (0..ds.len() * 4)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let a = Array::new(vec![ds.len(), 4], base.clone()).unwrap();
        let factors_per_dim = [0.5, 30.0, 2.0, 1e-3];
        let scaled: Vec<f64> = base
            .iter()
            .enumerate()
            .map(|(i, v)| v * factors_per_dim[i % 4])
            .collect();
        let b = Array::new(vec![ds.len(), 4], scaled).unwrap();
        let ra = fvm_score(&a, &factors, &discrete, &opts(5)).unwrap();
        let rb = fvm_score(&b, &factors, &discrete, &opts(5)).unwrap();
        assert_eq!(ra.classifier, rb.classifier);
        assert!((ra.score - rb.score).abs() < 1e-12);

        let mut with_dead = Vec::new();
        for r in 0..ds.len() {
            with_dead.extend_from_slice(a.row(r));
            with_dead.push(0.25);
        }
        let c = Array::new(vec![ds.len(), 5], with_dead).unwrap();
        let rc = fvm_score(&c, &factors, &discrete, &opts(5)).unwrap();
        assert_eq!(rc.active_dims, 4);
        assert_eq!(rc.score, ra.score);
    }

    #[test]
    fn fvm_is_deterministic_and_validates_votes() {
        let ds = data();
        let (factors, discrete) = factor_table(&ds);
        let a = fvm_score(&factors, &factors, &discrete, &opts(9)).unwrap();
        assert_eq!(
            a,
            fvm_score(&factors, &factors, &discrete, &opts(9)).unwrap()
        );
        let mut few = opts(9);
        few.votes = 9;
        assert!(matches!(
            fvm_score(&factors, &factors, &discrete, &few),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn reconstruction_error_closed_form_and_determinism() {
        let mut cfg = TrainConfig::default();
        cfg.data.side = 12;
        cfg.model.hidden = 8;
        let ds = Dataset::generate(16, 12, 2).unwrap();
        let mut model = Model::init(&cfg.model, 144, 3).unwrap();
        let idx: Vec<usize> = (8..16).collect();
        let a = reconstruction_error(&model, &ds, &idx).unwrap();
        assert_eq!(a, reconstruction_error(&model, &ds, &idx).unwrap());
        model.zero_output_layer("dec");
        let half = reconstruction_error(&model, &ds, &idx).unwrap();
        assert!((half - 144.0 * 2f64.ln()).abs() < 1e-9);
        assert!(reconstruction_error(&model, &ds, &[]).is_err());
    }

    #[test]
    fn exact_logits_give_the_entropy_floor() {
        let x = [0.0, 1.0, 0.3];
        let logits: Vec<f64> = x
            .iter()
            .map(|p: &f64| {
                if *p == 0.0 {
                    -40.0
                } else if *p == 1.0 {
                    40.0
                } else {
                    (p / (1.0 - p)).ln()
                }
            })
            .collect();
        let floor = -(0.3f64 * 0.3f64.ln() + 0.7 * 0.7f64.ln());
        assert!((image_bce(&logits, &x) - floor).abs() < 1e-12);
        let worse = image_bce(&[0.0, 0.0, 0.0], &x);
        assert!(worse > floor);
    }

    #[test]
    fn model_latents_shape() {
        let mut cfg = TrainConfig::default();
        cfg.model.hidden = 8;
        cfg.data.side = 12;
        let ds = Dataset::generate(5, 12, 2).unwrap();
        let model = Model::init(&cfg.model, 144, 3).unwrap();
        assert_eq!(model_latents(&model, &ds, false).unwrap().shape(), &[5, 6]);
        let with = model_latents(&model, &ds, true).unwrap();
        assert_eq!(with.shape(), &[5, 7]);
        assert!(with.row(0)[6] < 3.0);
    }
}
