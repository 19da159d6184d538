//! Finite-difference verification of the hand-written backward passes.
//!
//! Central differences with a fixed RNG seed per evaluation, so dropout
//! masks and Siamese pivots are frozen across perturbations and the loss
//! is a deterministic function of the parameters.

use crate::error::{Error, Result};
use crate::model::{
    init_params, outfit_loss, score_outfit_traced, siamese_loss_scaled, ItemInput, Mode,
    ModelConfig, ModelParams, Modality, OutfitExample, Pooling,
};
use crate::rng::Rng;
use crate::tensor::bce_with_logit;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// (tensor, flat index) of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Compare backprop gradients against central differences on a sample of
/// coordinates. `grad_fn` must zero, run backward and return the loss;
/// `loss_fn` must evaluate the identical loss without touching grads.
/// Relative error is |g_bp - g_fd| / max(1e-8, |g_bp| + |g_fd|).
pub fn finite_diff_gradcheck<L, G>(
    params: &mut ModelParams,
    mut loss_fn: L,
    grad_fn: G,
    eps: f64,
    coords_per_tensor: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport>
where
    L: FnMut(&ModelParams) -> Result<f64>,
    G: FnOnce(&mut ModelParams) -> Result<f64>,
{
    let base = grad_fn(params)?;
    if !base.is_finite() {
        return Err(Error::Data(format!(
            "gradcheck: non-finite loss {base}"
        )));
    }
    let mut snapshot: Vec<(String, Vec<f64>)> = Vec::new();
    for name in params.names() {
        let g = params
            .tensor(&name)
            .grad()
            .ok_or_else(|| Error::Contract(format!("no gradient for '{name}' after backward")))?
            .to_vec();
        snapshot.push((name, g));
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for (name, bp) in &snapshot {
        let numel = bp.len();
        let k = coords_per_tensor.min(numel);
        let coords = rng.sample_distinct(numel, k);
        for idx in coords {
            let orig = params.tensor(name).data()[idx];
            params.tensor_mut(name).data_mut()[idx] = orig + eps;
            let fp = loss_fn(params)?;
            params.tensor_mut(name).data_mut()[idx] = orig - eps;
            let fm = loss_fn(params)?;
            params.tensor_mut(name).data_mut()[idx] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::Data(format!(
                    "gradcheck: non-finite loss while perturbing {name}[{idx}]"
                )));
            }
            let fd = (fp - fm) / (2.0 * eps);
            let g = bp[idx];
            let rel = (g - fd).abs() / (1e-8f64).max(g.abs() + fd.abs());
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Model configuration suite
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub eps: f64,
    pub coords_per_tensor: usize,
    pub seed: u64,
    /// Flip the sign of the largest backprop gradient coordinate before
    /// comparing (negative control: the check must then fail).
    pub inject_fault: bool,
    pub threshold: f64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            eps: 1e-5,
            coords_per_tensor: 64,
            seed: 1234,
            inject_fault: false,
            threshold: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub pass: bool,
}

fn suite_config(modalities: Vec<Modality>, pooling: Pooling) -> ModelConfig {
    ModelConfig {
        embed_dim: 4,
        modalities,
        pooling,
        dropout_rate: 0.5,
        fusion_hidden: 4,
        category_count: 5,
        category_embed_dim: 4,
        image_dim: 6,
        title_dim: 5,
        outfit_len: 4,
    }
}

/// Owned random item data for a small synthetic batch.
pub struct SuiteBatch {
    images: Vec<Vec<f32>>,
    titles: Vec<Vec<f32>>,
    categories: Vec<usize>,
    labels: Vec<u8>,
    outfit_len: usize,
}

impl SuiteBatch {
    pub fn generate(config: &ModelConfig, outfits: usize, rng: &mut Rng) -> SuiteBatch {
        let n = outfits * config.outfit_len;
        let mut images = Vec::with_capacity(n);
        let mut titles = Vec::with_capacity(n);
        let mut categories = Vec::with_capacity(n);
        for i in 0..n {
            images.push(
                (0..config.image_dim)
                    .map(|_| rng.normal() as f32)
                    .collect(),
            );
            titles.push(
                (0..config.title_dim)
                    .map(|_| rng.normal() as f32)
                    .collect(),
            );
            // duplicate ids inside one outfit exercise the scatter-add path
            categories.push(if i % config.outfit_len == 1 {
                categories[i - 1]
            } else {
                rng.below(config.category_count)
            });
        }
        let labels = (0..outfits).map(|_| u8::from(rng.bernoulli(0.5))).collect();
        SuiteBatch {
            images,
            titles,
            categories,
            labels,
            outfit_len: config.outfit_len,
        }
    }

    pub fn examples(&self) -> Vec<OutfitExample<'_>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(o, label)| {
                let items = (0..self.outfit_len)
                    .map(|j| {
                        let i = o * self.outfit_len + j;
                        ItemInput {
                            image: Some(&self.images[i]),
                            title: Some(&self.titles[i]),
                            category: Some(self.categories[i]),
                        }
                    })
                    .collect();
                OutfitExample {
                    items,
                    label: *label,
                }
            })
            .collect()
    }
}

/// Forward-only mean BCE with the same RNG stream the backward pass uses.
fn forward_loss(
    batch: &[OutfitExample],
    config: &ModelConfig,
    params: &ModelParams,
    seed: u64,
) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut total = 0.0;
    for ex in batch {
        let tr = score_outfit_traced(&ex.items, config, params, Mode::Train, &mut rng)?;
        total += bce_with_logit(tr.logit, ex.label);
    }
    Ok(total / batch.len() as f64)
}

fn forward_siamese_loss(
    batch: &[OutfitExample],
    margin: f64,
    config: &ModelConfig,
    params: &ModelParams,
    seed: u64,
) -> Result<f64> {
    // replay through a grad-accumulating clone to keep the rng stream
    // identical to the backward path
    let mut clone = params.clone();
    clone.zero_grads();
    let mut rng = Rng::new(seed);
    let mut total = 0.0;
    for ex in batch {
        total += siamese_loss_scaled(ex, margin, config, &mut clone, &mut rng, 0.0)?;
    }
    Ok(total / batch.len() as f64)
}

fn flip_largest_grad(params: &mut ModelParams) {
    let mut worst: Option<(String, usize, f64)> = None;
    for name in params.names() {
        if let Some(g) = params.tensor(&name).grad() {
            for (i, v) in g.iter().enumerate() {
                if worst.as_ref().map_or(true, |(_, _, w)| v.abs() > *w) {
                    worst = Some((name.clone(), i, v.abs()));
                }
            }
        }
    }
    if let Some((name, i, _)) = worst {
        let g = params.tensor_mut(&name).grad_mut();
        g[i] = -g[i];
    }
}

/// Gradient-check one (modalities, pooling) configuration of the
/// classification loss on a random batch.
pub fn check_outfit_loss_config(
    modalities: Vec<Modality>,
    pooling: Pooling,
    opts: &SuiteOptions,
) -> Result<GradCheckReport> {
    let config = suite_config(modalities, pooling);
    let mut rng = Rng::new(opts.seed);
    let mut params = init_params(&config, &mut rng)?;
    let batch_data = SuiteBatch::generate(&config, 3, &mut rng);
    let batch = batch_data.examples();
    let loss_seed = opts.seed ^ 0x5eed;
    let inject = opts.inject_fault;
    let config2 = config.clone();
    let batch2 = &batch;
    let mut coord_rng = rng.fork("coords");
    finite_diff_gradcheck(
        &mut params,
        |p| forward_loss(batch2, &config, p, loss_seed),
        move |p| {
            p.zero_grads();
            let mut lrng = Rng::new(loss_seed);
            let loss = outfit_loss(batch2, &config2, p, &mut lrng)?;
            if inject {
                flip_largest_grad(p);
            }
            Ok(loss)
        },
        opts.eps,
        opts.coords_per_tensor,
        &mut coord_rng,
    )
}

/// Gradient-check the Siamese loss with mean pooling.
pub fn check_siamese_loss(opts: &SuiteOptions) -> Result<GradCheckReport> {
    let config = suite_config(Modality::ALL.to_vec(), Pooling::Mean);
    let margin = 10.0;
    let mut rng = Rng::new(opts.seed.wrapping_add(17));
    let mut params = init_params(&config, &mut rng)?;
    let batch_data = SuiteBatch::generate(&config, 3, &mut rng);
    let batch = batch_data.examples();
    let loss_seed = opts.seed ^ 0xa1fa;
    let inject = opts.inject_fault;
    let config2 = config.clone();
    let batch2 = &batch;
    let mut coord_rng = rng.fork("coords");
    finite_diff_gradcheck(
        &mut params,
        |p| forward_siamese_loss(batch2, margin, &config, p, loss_seed),
        move |p| {
            p.zero_grads();
            let mut lrng = Rng::new(loss_seed);
            let mut total = 0.0;
            let scale = 1.0 / batch2.len() as f64;
            for ex in batch2 {
                total += siamese_loss_scaled(ex, margin, &config2, p, &mut lrng, scale)?;
            }
            if inject {
                flip_largest_grad(p);
            }
            Ok(total * scale * batch2.len() as f64 / batch2.len() as f64)
        },
        opts.eps,
        opts.coords_per_tensor,
        &mut coord_rng,
    )
}

/// All 7 modality subsets x 3 pooling kinds for the classification loss,
/// plus the Siamese loss under mean pooling.
pub fn run_model_suite(opts: &SuiteOptions) -> Result<Vec<SuiteOutcome>> {
    let subsets: Vec<Vec<Modality>> = vec![
        vec![Modality::Image],
        vec![Modality::Title],
        vec![Modality::Category],
        vec![Modality::Image, Modality::Title],
        vec![Modality::Image, Modality::Category],
        vec![Modality::Title, Modality::Category],
        Modality::ALL.to_vec(),
    ];
    let mut out = Vec::new();
    for pooling in [Pooling::Mean, Pooling::Max, Pooling::Rnn] {
        for subset in &subsets {
            let report = check_outfit_loss_config(subset.clone(), pooling, opts)?;
            let names: Vec<&str> = subset.iter().map(|m| m.name()).collect();
            out.push(SuiteOutcome {
                name: format!("{}/{:?}", names.join("+"), pooling).to_lowercase(),
                max_rel_err: report.max_rel_err,
                coords_checked: report.coords_checked,
                pass: report.max_rel_err < opts.threshold,
            });
        }
    }
    let report = check_siamese_loss(opts)?;
    out.push(SuiteOutcome {
        name: "siamese/mean".into(),
        max_rel_err: report.max_rel_err,
        coords_checked: report.coords_checked,
        pass: report.max_rel_err < opts.threshold,
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_gradcheck_is_nearly_exact() {
        // f(theta) = sum theta_i^2 has exact central differences
        let mut params = ModelParams::empty();
        params.insert("theta", Tensor::vector(vec![3.0, -1.5, 0.25]));
        let mut rng = Rng::new(0);
        let report = finite_diff_gradcheck(
            &mut params,
            |p| Ok(p.tensor("theta").data().iter().map(|v| v * v).sum()),
            |p| {
                p.zero_grads();
                let data = p.tensor("theta").data().to_vec();
                let g = p.tensor_mut("theta").grad_mut();
                for (gi, v) in g.iter_mut().zip(data.iter()) {
                    *gi = 2.0 * v;
                }
                Ok(data.iter().map(|v| v * v).sum())
            },
            1e-5,
            64,
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "{}", report.max_rel_err);
        assert_eq!(report.coords_checked, 3);
    }

    #[test]
    fn full_scorer_passes_on_a_random_outfit() {
        let opts = SuiteOptions::default();
        let report =
            check_outfit_loss_config(Modality::ALL.to_vec(), Pooling::Mean, &opts).unwrap();
        assert!(report.max_rel_err < 1e-4, "{}", report.max_rel_err);
    }

    #[test]
    fn corrupted_backward_is_detected() {
        let opts = SuiteOptions {
            inject_fault: true,
            ..SuiteOptions::default()
        };
        let report =
            check_outfit_loss_config(Modality::ALL.to_vec(), Pooling::Mean, &opts).unwrap();
        assert!(report.max_rel_err > 1e-2, "{}", report.max_rel_err);
    }

    #[test]
    fn larger_eps_grows_but_stays_small() {
        let opts = SuiteOptions {
            eps: 1e-3,
            ..SuiteOptions::default()
        };
        let report =
            check_outfit_loss_config(Modality::ALL.to_vec(), Pooling::Mean, &opts).unwrap();
        assert!(report.max_rel_err < 1e-2, "{}", report.max_rel_err);
    }
}
