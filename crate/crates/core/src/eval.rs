//! Evaluation and application layer: ranking metrics, greedy outfit
//! composition, constrained-composition evaluation tuples and accuracy,
//! item importance ordering, the late-fusion baseline, and top-k error
//! listing. Everything here is read-only over a frozen scorer.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledOutfit, PreparedDataset, PreparedItem};
use crate::error::{Error, Result};
use crate::model::{score_outfit, siamese_score, ItemInput, Mode, ModelConfig, ModelParams};
use crate::rng::Rng;

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// ROC AUC in the Mann-Whitney form: the fraction of (positive, negative)
/// pairs ranked correctly, ties counting one half. Computed by tie-aware
/// rank summation; agrees exactly with brute-force pair counting.
pub fn auc(scored: &[(f64, u8)]) -> Result<f64> {
    let p = scored.iter().filter(|(_, y)| *y == 1).count();
    let n = scored.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs at least one positive and one negative".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..scored.len()).collect();
    idx.sort_by(|a, b| {
        scored[*a]
            .0
            .partial_cmp(&scored[*b].0)
            .expect("scores must not be NaN")
    });
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scored[idx[j]].0 == scored[idx[i]].0 {
            j += 1;
        }
        // average rank over the tie group [i, j)
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for k in i..j {
            if scored[idx[k]].1 == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (p * (p + 1)) as f64 / 2.0;
    Ok(u / (p as f64 * n as f64))
}

/// Average precision: mean over positives, in descending-score order, of
/// precision at that positive's rank. Ties keep input order.
pub fn average_precision(scored: &[(f64, u8)]) -> Result<f64> {
    let p = scored.iter().filter(|(_, y)| *y == 1).count();
    if p == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs at least one positive".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..scored.len()).collect();
    idx.sort_by(|a, b| {
        scored[*b]
            .0
            .partial_cmp(&scored[*a].0)
            .expect("scores must not be NaN")
            .then(a.cmp(b))
    });
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank0, &i) in idx.iter().enumerate() {
        if scored[i].1 == 1 {
            hits += 1;
            sum += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(sum / p as f64)
}

// ---------------------------------------------------------------------------
// Scorers and the item database
// ---------------------------------------------------------------------------

/// Anything that can score a set of items as an outfit.
pub trait OutfitScorer {
    fn score_items(&self, items: &[&PreparedItem]) -> Result<f64>;
}

impl<F> OutfitScorer for F
where
    F: Fn(&[&PreparedItem]) -> Result<f64>,
{
    fn score_items(&self, items: &[&PreparedItem]) -> Result<f64> {
        self(items)
    }
}

/// Classifier-probability scorer over frozen parameters.
pub struct ModelScorer<'a> {
    pub config: &'a ModelConfig,
    pub params: &'a ModelParams,
}

impl OutfitScorer for ModelScorer<'_> {
    fn score_items(&self, items: &[&PreparedItem]) -> Result<f64> {
        let inputs: Vec<ItemInput> = items.iter().map(|i| ItemInput::from_prepared(i)).collect();
        let mut rng = Rng::new(0);
        Ok(score_outfit(&inputs, self.config, self.params, Mode::Infer, &mut rng)?.0)
    }
}

/// Negative-distance scorer for Siamese checkpoints.
pub struct SiameseScorer<'a> {
    pub config: &'a ModelConfig,
    pub params: &'a ModelParams,
}

impl OutfitScorer for SiameseScorer<'_> {
    fn score_items(&self, items: &[&PreparedItem]) -> Result<f64> {
        let inputs: Vec<ItemInput> = items.iter().map(|i| ItemInput::from_prepared(i)).collect();
        let mut rng = Rng::new(0);
        siamese_score(&inputs, self.config, self.params, &mut rng)
    }
}

/// All items of a prepared dataset, keyed by id (first occurrence wins).
#[derive(Debug, Clone, Default)]
pub struct ItemDb {
    items: BTreeMap<String, PreparedItem>,
    ids: Vec<String>,
}

impl ItemDb {
    pub fn from_outfits<'a>(outfits: impl IntoIterator<Item = &'a LabeledOutfit>) -> ItemDb {
        let mut items = BTreeMap::new();
        for o in outfits {
            for it in &o.items {
                items
                    .entry(it.item_id.clone())
                    .or_insert_with(|| it.clone());
            }
        }
        let ids = items.keys().cloned().collect();
        ItemDb { items, ids }
    }

    pub fn from_dataset(data: &PreparedDataset) -> ItemDb {
        ItemDb::from_outfits(
            data.train
                .iter()
                .chain(data.dev.iter())
                .chain(data.test.iter()),
        )
    }

    pub fn get(&self, id: &str) -> Result<&PreparedItem> {
        self.items
            .get(id)
            .ok_or_else(|| Error::Data(format!("item '{id}' not found in the database")))
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Greedy composition
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ComposeRound {
    pub item_id: String,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct Composed {
    /// Seed items followed by picked items, in pick order.
    pub outfit: Vec<String>,
    pub rounds: Vec<ComposeRound>,
}

/// Greedy completion: each round scores every remaining candidate joined
/// to the current outfit and keeps the argmax (ties to the lowest
/// item_id); picked items leave the candidate pool.
pub fn compose<S: OutfitScorer>(
    scorer: &S,
    candidates: &[String],
    seed: &[String],
    target_len: usize,
    db: &ItemDb,
) -> Result<Composed> {
    if seed.len() > target_len {
        return Err(Error::Contract(format!(
            "seed outfit already has {} items, target is {target_len}",
            seed.len()
        )));
    }
    let seed_set: BTreeSet<&str> = seed.iter().map(String::as_str).collect();
    let mut remaining: Vec<String> = candidates
        .iter()
        .filter(|c| !seed_set.contains(c.as_str()))
        .cloned()
        .collect();
    remaining.sort();
    remaining.dedup();
    let needed = target_len - seed.len();
    if remaining.len() < needed {
        return Err(Error::Contract(format!(
            "need {needed} more items but only {} distinct candidates",
            remaining.len()
        )));
    }
    let mut outfit: Vec<String> = seed.to_vec();
    let mut rounds = Vec::new();
    for _ in 0..needed {
        let mut best: Option<(f64, usize)> = None;
        for (ci, cand) in remaining.iter().enumerate() {
            let mut items: Vec<&PreparedItem> = Vec::with_capacity(outfit.len() + 1);
            for id in &outfit {
                items.push(db.get(id)?);
            }
            items.push(db.get(cand)?);
            let score = scorer.score_items(&items)?;
            // candidates are sorted ascending, so strict > keeps the
            // lowest item_id on ties
            if best.map_or(true, |(b, _)| score > b) {
                best = Some((score, ci));
            }
        }
        let (score, ci) = best.expect("non-empty candidate pool");
        let item_id = remaining.remove(ci);
        outfit.push(item_id.clone());
        rounds.push(ComposeRound { item_id, score });
    }
    Ok(Composed { outfit, rounds })
}

// ---------------------------------------------------------------------------
// Constrained composition evaluation
// ---------------------------------------------------------------------------

/// One constrained-composition query: complete `seed` from `candidates`;
/// `positives` are the accepted answers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalTuple {
    pub seed: Vec<String>,
    pub candidates: Vec<String>,
    pub positives: Vec<String>,
}

impl EvalTuple {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::Data("tuple with no candidates".into()));
        }
        if self.positives.is_empty() {
            return Err(Error::Data("tuple with no positives".into()));
        }
        let cand: BTreeSet<&str> = self.candidates.iter().map(String::as_str).collect();
        if !self.positives.iter().all(|p| cand.contains(p.as_str())) {
            return Err(Error::Data("positives must be a subset of candidates".into()));
        }
        let seed: BTreeSet<&str> = self.seed.iter().map(String::as_str).collect();
        if self.candidates.iter().any(|c| seed.contains(c.as_str())) {
            return Err(Error::Data("seed and candidates must be disjoint".into()));
        }
        Ok(())
    }
}

/// Build the automatic evaluation set: for every positive outfit, hold
/// one random item out as the sole positive and shuffle it among four
/// random confusion items from the database.
pub fn build_auto_evalset(
    test: &[LabeledOutfit],
    db: &ItemDb,
    rng: &mut Rng,
) -> Result<Vec<EvalTuple>> {
    let mut tuples = Vec::new();
    for outfit in test.iter().filter(|o| o.label == 1) {
        if outfit.items.len() < 2 {
            continue;
        }
        let target_idx = rng.below(outfit.items.len());
        let target = outfit.items[target_idx].item_id.clone();
        let seed: Vec<String> = outfit
            .items
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != target_idx)
            .map(|(_, it)| it.item_id.clone())
            .collect();
        let excluded: BTreeSet<&str> = seed
            .iter()
            .map(String::as_str)
            .chain(std::iter::once(target.as_str()))
            .collect();
        if db.len() < excluded.len() + 4 {
            return Err(Error::Data(format!(
                "item database too small ({} items) to sample 4 confusion items",
                db.len()
            )));
        }
        let mut confusion: Vec<String> = Vec::with_capacity(4);
        let mut guard = 0usize;
        while confusion.len() < 4 {
            let id = &db.ids()[rng.below(db.len())];
            if !excluded.contains(id.as_str()) && !confusion.contains(id) {
                confusion.push(id.clone());
            }
            guard += 1;
            if guard > 100_000 {
                return Err(Error::Data("confusion sampling did not converge".into()));
            }
        }
        let mut candidates = confusion;
        candidates.push(target.clone());
        rng.shuffle(&mut candidates);
        let tuple = EvalTuple {
            seed,
            candidates,
            positives: vec![target],
        };
        tuple.validate()?;
        tuples.push(tuple);
    }
    Ok(tuples)
}

pub fn write_evalset(tuples: &[EvalTuple], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in tuples {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_evalset(path: &Path) -> Result<Vec<EvalTuple>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: EvalTuple = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        t.validate()?;
        out.push(t);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct TupleResult {
    pub chosen: String,
    pub hit: bool,
    /// Candidates with their one-step completion scores, best first.
    pub ranked: Vec<ComposeRound>,
}

#[derive(Debug)]
pub struct ConstrainedReport {
    pub accuracy: f64,
    pub per_tuple: Vec<TupleResult>,
}

/// Top-1 constrained-composition accuracy: the fraction of tuples whose
/// greedy pick is in the positive set.
pub fn constrained_accuracy<S: OutfitScorer>(
    scorer: &S,
    tuples: &[EvalTuple],
    db: &ItemDb,
) -> Result<ConstrainedReport> {
    if tuples.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let mut hits = 0usize;
    let mut per_tuple = Vec::with_capacity(tuples.len());
    for t in tuples {
        let composed = compose(scorer, &t.candidates, &t.seed, t.seed.len() + 1, db)?;
        let chosen = composed
            .outfit
            .last()
            .expect("compose adds one item")
            .clone();
        let hit = t.positives.contains(&chosen);
        hits += usize::from(hit);
        // full single-step ranking for reports
        let mut ranked = Vec::with_capacity(t.candidates.len());
        for cand in &t.candidates {
            let mut items: Vec<&PreparedItem> = Vec::with_capacity(t.seed.len() + 1);
            for id in &t.seed {
                items.push(db.get(id)?);
            }
            items.push(db.get(cand)?);
            ranked.push(ComposeRound {
                item_id: cand.clone(),
                score: scorer.score_items(&items)?,
            });
        }
        ranked.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .expect("scores must not be NaN")
                .then(a.item_id.cmp(&b.item_id))
        });
        per_tuple.push(TupleResult {
            chosen,
            hit,
            ranked,
        });
    }
    Ok(ConstrainedReport {
        accuracy: hits as f64 / tuples.len() as f64,
        per_tuple,
    })
}

// ---------------------------------------------------------------------------
// Item importance
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ImportanceRow {
    pub item_id: String,
    pub decrement: f64,
}

/// Quality decrement per item: replace each item with `replicates` random
/// database items and average the score drop. Most important first; ties
/// break by ascending item_id.
pub fn item_importance<S: OutfitScorer>(
    scorer: &S,
    outfit: &[&PreparedItem],
    db: &ItemDb,
    rng: &mut Rng,
    replicates: usize,
) -> Result<Vec<ImportanceRow>> {
    if outfit.is_empty() {
        return Err(Error::Contract("importance of an empty outfit".into()));
    }
    if db.is_empty() {
        return Err(Error::Data("empty item database".into()));
    }
    let replicates = replicates.max(1);
    let base = scorer.score_items(outfit)?;
    let mut rows = Vec::with_capacity(outfit.len());
    for (j, item) in outfit.iter().enumerate() {
        let mut sum = 0.0;
        for _ in 0..replicates {
            // never replace an item with itself
            let replacement = loop {
                let id = &db.ids()[rng.below(db.len())];
                if id != &item.item_id || db.len() == 1 {
                    break db.get(id)?;
                }
            };
            let mut swapped: Vec<&PreparedItem> = outfit.to_vec();
            swapped[j] = replacement;
            sum += scorer.score_items(&swapped)?;
        }
        rows.push(ImportanceRow {
            item_id: item.item_id.clone(),
            decrement: base - sum / replicates as f64,
        });
    }
    rows.sort_by(|a, b| {
        b.decrement
            .partial_cmp(&a.decrement)
            .expect("scores must not be NaN")
            .then(a.item_id.cmp(&b.item_id))
    });
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Late fusion
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    Mean,
    Max,
    Min,
}

impl Aggregate {
    pub fn parse(s: &str) -> Result<Aggregate> {
        match s.trim() {
            "mean" => Ok(Aggregate::Mean),
            "max" => Ok(Aggregate::Max),
            "min" => Ok(Aggregate::Min),
            other => Err(Error::Config(format!("unknown aggregate '{other}'"))),
        }
    }

    pub fn apply(self, xs: &[f64]) -> f64 {
        match self {
            Aggregate::Mean => xs.iter().sum::<f64>() / xs.len() as f64,
            Aggregate::Max => xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Aggregate::Min => xs.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }
}

/// Score outfits by aggregating per-item probabilities from an
/// item-level scorer; returns (AUC, AP).
pub fn late_fusion_eval<S: OutfitScorer>(
    item_scorer: &S,
    outfits: &[LabeledOutfit],
    aggregate: Aggregate,
) -> Result<(f64, f64)> {
    let scored = late_fusion_scores(item_scorer, outfits, aggregate)?;
    Ok((auc(&scored)?, average_precision(&scored)?))
}

pub fn late_fusion_scores<S: OutfitScorer>(
    item_scorer: &S,
    outfits: &[LabeledOutfit],
    aggregate: Aggregate,
) -> Result<Vec<(f64, u8)>> {
    let mut scored = Vec::with_capacity(outfits.len());
    for o in outfits {
        let mut probs = Vec::with_capacity(o.items.len());
        for it in &o.items {
            probs.push(item_scorer.score_items(&[it])?);
        }
        scored.push((aggregate.apply(&probs), o.label));
    }
    Ok(scored)
}

// ---------------------------------------------------------------------------
// Top-k error listing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct TopKError {
    pub outfit_id: String,
    pub score: f64,
}

#[derive(Debug)]
pub struct TopKReport {
    pub considered: usize,
    pub errors: Vec<TopKError>,
    pub error_rate: f64,
}

/// Sort outfits by descending score, keep the top min(k, n), list those
/// labelled 0 and the error fraction.
pub fn top_k_errors<S: OutfitScorer>(
    scorer: &S,
    outfits: &[LabeledOutfit],
    k: usize,
) -> Result<TopKReport> {
    let mut scored: Vec<(String, f64, u8)> = Vec::with_capacity(outfits.len());
    for o in outfits {
        let items: Vec<&PreparedItem> = o.items.iter().collect();
        scored.push((o.outfit_id.clone(), scorer.score_items(&items)?, o.label));
    }
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("scores must not be NaN")
            .then(a.0.cmp(&b.0))
    });
    let considered = k.min(scored.len());
    let errors: Vec<TopKError> = scored[..considered]
        .iter()
        .filter(|(_, _, y)| *y == 0)
        .map(|(id, s, _)| TopKError {
            outfit_id: id.clone(),
            score: *s,
        })
        .collect();
    let error_rate = if considered == 0 {
        0.0
    } else {
        errors.len() as f64 / considered as f64
    };
    Ok(TopKReport {
        considered,
        errors,
        error_rate,
    })
}
