//! The optimization loop: shuffled mini-batches, Adam with a halving
//! schedule, periodic dev evaluation, best/final checkpointing and a CSV
//! training log. Training is a pure function of (dataset, configs, seed);
//! only the wall-clock column of the log varies between reruns.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::dataset::{LabeledOutfit, PreparedDataset, Split};
use crate::error::{Error, Result};
use crate::eval::{auc, average_precision};
use crate::model::{
    outfit_loss, score_outfit, siamese_loss_scaled, siamese_score, ItemInput, Mode, ModelConfig,
    ModelParams, OutfitExample, SiameseConfig,
};
use crate::rng::Rng;
use crate::tensor::AdamHyper;
use crate::model::init_params;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Classification,
    Siamese,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub total_iters: u64,
    /// None disables halving (constant learning rate).
    pub halve_every: Option<u64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub eval_every: u64,
    pub seed: u64,
    pub objective: Objective,
    pub siamese: SiameseConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 50,
            lr: 0.01,
            total_iters: 40_000,
            halve_every: Some(15_000),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            eval_every: 500,
            seed: 0,
            objective: Objective::Classification,
            siamese: SiameseConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if self.halve_every == Some(0) {
            return Err(Error::Config(
                "halve_every must be >= 1 (omit it for a constant rate)".into(),
            ));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// lr(iter) = lr0 * 0.5^floor(iter / halve_every).
pub fn lr_at(iter: u64, cfg: &TrainConfig) -> f64 {
    match cfg.halve_every {
        None => cfg.lr,
        Some(h) => cfg.lr * 0.5f64.powi((iter / h) as i32),
    }
}

/// Endless stream of index batches: each epoch is a fresh seeded shuffle,
/// and the final short batch of an epoch is emitted, not dropped.
pub struct BatchIter {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: Rng,
}

impl BatchIter {
    pub fn new(n: usize, batch: usize, mut rng: Rng) -> BatchIter {
        assert!(n > 0, "empty split");
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        BatchIter {
            order,
            pos: 0,
            batch,
            rng,
        }
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.pos >= self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let slice = &self.order[self.pos..end];
        self.pos = end;
        slice
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainLogRow {
    pub iter: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_auc: f64,
    pub dev_ap: f64,
    pub wall_ms: u64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_dir: PathBuf,
    pub best_dir: PathBuf,
    pub log_path: PathBuf,
    pub best_dev_auc: Option<f64>,
    pub rows: Vec<TrainLogRow>,
}

fn to_examples(outfits: &[LabeledOutfit]) -> Vec<OutfitExample<'_>> {
    outfits
        .iter()
        .map(|o| OutfitExample {
            items: o.items.iter().map(ItemInput::from_prepared).collect(),
            label: o.label,
        })
        .collect()
}

/// Score one split in infer mode with the objective's scoring rule.
pub fn score_split(
    outfits: &[LabeledOutfit],
    config: &ModelConfig,
    params: &ModelParams,
    objective: Objective,
) -> Result<Vec<(f64, u8)>> {
    let mut rng = Rng::new(0);
    let mut out = Vec::with_capacity(outfits.len());
    for o in outfits {
        let items: Vec<ItemInput> = o.items.iter().map(ItemInput::from_prepared).collect();
        let score = match objective {
            Objective::Classification => {
                score_outfit(&items, config, params, Mode::Infer, &mut rng)?.0
            }
            Objective::Siamese => siamese_score(&items, config, params, &mut rng)?,
        };
        out.push((score, o.label));
    }
    Ok(out)
}

fn dev_metrics(
    dev: &[LabeledOutfit],
    config: &ModelConfig,
    params: &ModelParams,
    objective: Objective,
) -> (f64, f64) {
    if dev.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    match score_split(dev, config, params, objective) {
        Ok(scored) => (
            auc(&scored).unwrap_or(f64::NAN),
            average_precision(&scored).unwrap_or(f64::NAN),
        ),
        Err(_) => (f64::NAN, f64::NAN),
    }
}

fn check_dims(model_cfg: &ModelConfig, data: &PreparedDataset) -> Result<()> {
    use crate::model::Modality;
    if model_cfg.uses(Modality::Image) && model_cfg.image_dim != data.meta.d_img {
        return Err(Error::Config(format!(
            "model image_dim {} != dataset d_img {}",
            model_cfg.image_dim, data.meta.d_img
        )));
    }
    if model_cfg.uses(Modality::Title) && model_cfg.title_dim != data.meta.d_txt {
        return Err(Error::Config(format!(
            "model title_dim {} != dataset d_txt {}",
            model_cfg.title_dim, data.meta.d_txt
        )));
    }
    if model_cfg.uses(Modality::Category) && model_cfg.category_count < data.meta.category_count {
        return Err(Error::Config(format!(
            "model category_count {} < dataset {}",
            model_cfg.category_count, data.meta.category_count
        )));
    }
    Ok(())
}

/// Train on the prepared dataset's train split, evaluating on dev every
/// `eval_every` iterations. Saves `best` (by dev AUC) and `final`
/// checkpoints under `out_dir` and writes `log.csv`.
///
/// A non-finite loss aborts: the parameters from before the failing
/// iteration are saved as `final` and the error names the iteration.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &PreparedDataset,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    check_dims(model_cfg, data)?;
    if data.train.is_empty() {
        return Err(Error::Data("train split is empty".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let best_dir = out_dir.join("best");
    let final_dir = out_dir.join("final");
    let log_path = out_dir.join("log.csv");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    writeln!(log, "iter,lr,train_loss,dev_auc,dev_ap,wall_ms")?;

    let mut root = Rng::new(train_cfg.seed);
    let mut params = init_params(model_cfg, &mut root.fork("init"))?;
    let mut loss_rng = root.fork("loss");
    let mut batches = BatchIter::new(
        data.train.len(),
        train_cfg.batch_size,
        root.fork("batches"),
    );
    let examples = to_examples(&data.train);

    let start = Instant::now();
    let mut rows = Vec::new();
    let mut best_dev_auc: Option<f64> = None;
    let mut window_loss = 0.0;
    let mut window_n = 0u64;

    for step in 0..train_cfg.total_iters {
        let idxs: Vec<usize> = batches.next_batch().to_vec();
        params.zero_grads();
        let loss = match train_cfg.objective {
            Objective::Classification => {
                let batch: Vec<OutfitExample> =
                    idxs.iter().map(|i| examples[*i].clone()).collect();
                outfit_loss(&batch, model_cfg, &mut params, &mut loss_rng)?
            }
            Objective::Siamese => {
                let scale = 1.0 / idxs.len() as f64;
                let mut total = 0.0;
                for i in &idxs {
                    total += siamese_loss_scaled(
                        &examples[*i],
                        train_cfg.siamese.margin,
                        model_cfg,
                        &mut params,
                        &mut loss_rng,
                        scale,
                    )?;
                }
                total * scale
            }
        };
        if !loss.is_finite() || !params.all_finite() {
            // the pre-update parameters are the last good state
            save_checkpoint(&params, model_cfg, &final_dir)?;
            return Err(Error::NonFiniteLoss { iter: step + 1 });
        }
        let hyper = AdamHyper {
            lr: lr_at(step, train_cfg),
            beta1: train_cfg.beta1,
            beta2: train_cfg.beta2,
            eps: train_cfg.eps,
        };
        params.adam_step_all(&hyper)?;
        window_loss += loss;
        window_n += 1;

        let iter = step + 1;
        if iter % train_cfg.eval_every == 0 || iter == train_cfg.total_iters {
            let (dev_auc, dev_ap) =
                dev_metrics(&data.dev, model_cfg, &params, train_cfg.objective);
            let row = TrainLogRow {
                iter,
                lr: hyper.lr,
                train_loss: window_loss / window_n.max(1) as f64,
                dev_auc,
                dev_ap,
                wall_ms: start.elapsed().as_millis() as u64,
            };
            writeln!(
                log,
                "{},{},{},{},{},{}",
                row.iter, row.lr, row.train_loss, row.dev_auc, row.dev_ap, row.wall_ms
            )?;
            window_loss = 0.0;
            window_n = 0;
            if dev_auc.is_finite() && best_dev_auc.map_or(true, |b| dev_auc > b) {
                best_dev_auc = Some(dev_auc);
                save_checkpoint(&params, model_cfg, &best_dir)?;
            }
            rows.push(row);
        }
    }
    log.flush()?;
    save_checkpoint(&params, model_cfg, &final_dir)?;
    if best_dev_auc.is_none() {
        // no dev evaluation ever improved (or ran): mirror final as best
        save_checkpoint(&params, model_cfg, &best_dir)?;
    }
    Ok(TrainOutcome {
        final_dir,
        best_dir,
        log_path,
        best_dev_auc,
        rows,
    })
}

/// Explode outfits into single-item outfits carrying the outfit label
/// (training data for the late-fusion baseline).
pub fn explode_items(outfits: &[LabeledOutfit]) -> Vec<LabeledOutfit> {
    let mut out = Vec::new();
    for o in outfits {
        for (j, item) in o.items.iter().enumerate() {
            out.push(LabeledOutfit {
                outfit_id: format!("{}/item{}", o.outfit_id, j),
                label: o.label,
                items: vec![item.clone()],
            });
        }
    }
    out
}

/// A copy of the dataset with every split exploded to single-item
/// outfits, for item-level training.
pub fn explode_dataset(data: &PreparedDataset) -> PreparedDataset {
    let mut meta = data.meta.clone();
    meta.outfit_len = 1;
    PreparedDataset {
        meta,
        train: explode_items(&data.train),
        dev: explode_items(&data.dev),
        test: explode_items(&data.test),
    }
}

pub use crate::dataset::Split as DatasetSplit;

/// Convenience for tests: the split name resolved on the dataset.
pub fn split_of<'a>(data: &'a PreparedDataset, name: &str) -> Result<&'a [LabeledOutfit]> {
    match name {
        "train" => Ok(&data.train),
        "dev" => Ok(&data.dev),
        "test" => Ok(&data.test),
        other => Err(Error::Config(format!("unknown split '{other}'"))),
    }
}

pub fn split_by_name(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "dev" => Ok(Split::Dev),
        "test" => Ok(Split::Test),
        other => Err(Error::Config(format!("unknown split '{other}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_matches_the_closed_form() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.01);
        assert_eq!(lr_at(14_999, &cfg), 0.01);
        assert_eq!(lr_at(15_000, &cfg), 0.005);
        assert_eq!(lr_at(29_999, &cfg), 0.005);
        assert_eq!(lr_at(30_000, &cfg), 0.0025);
        let constant = TrainConfig {
            halve_every: None,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(1_000_000, &constant), 0.01);
    }

    #[test]
    fn batch_iterator_emits_the_short_batch() {
        let mut it = BatchIter::new(10, 3, Rng::new(1));
        let sizes: Vec<usize> = (0..4).map(|_| it.next_batch().len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        // next epoch starts fresh
        assert_eq!(it.next_batch().len(), 3);
    }

    #[test]
    fn epochs_reshuffle_but_reproduce_across_runs() {
        let collect = |seed: u64| -> Vec<Vec<usize>> {
            let mut it = BatchIter::new(6, 6, Rng::new(seed));
            (0..2).map(|_| it.next_batch().to_vec()).collect()
        };
        let a = collect(9);
        let b = collect(9);
        assert_eq!(a, b);
        assert_ne!(a[0], a[1], "two epochs should be differently shuffled");
    }

    #[test]
    fn batch_one_is_the_pure_shuffle() {
        let mut it = BatchIter::new(5, 1, Rng::new(4));
        let mut seen: Vec<usize> = (0..5).flat_map(|_| it.next_batch().to_vec()).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }
}
