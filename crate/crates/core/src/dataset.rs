//! Raw-corpus ingestion and the prepared-dataset pipeline.
//!
//! The pipeline applies, in order: category pruning, frequent-item
//! removal, percentile labeling, component-based splitting and length
//! normalisation, then encodes titles and writes a versioned dataset
//! directory. Given the same inputs, parameters and seed the output
//! directory is byte-identical.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::wordvec::{encode_title, tokenize, WordVecTable};

pub const PREPARED_SCHEMA: &str = "prepared.v1";

// ---------------------------------------------------------------------------
// Raw records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawItem {
    pub item_id: String,
    pub title: String,
    pub category: String,
    pub image_feature: Vec<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawOutfit {
    pub outfit_id: String,
    pub likes: u64,
    pub items: Vec<RawItem>,
}

/// Parse the raw JSON-Lines corpus. The image-feature dimension is fixed
/// by the first item and enforced on every later one.
pub fn parse_outfits(path: &Path) -> Result<(Vec<RawOutfit>, usize)> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut outfits = Vec::new();
    let mut seen_ids: HashSet<String> = HashSet::new();
    let mut d_img: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let outfit: RawOutfit = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: display.clone(),
            line: lineno,
            msg: e.to_string(),
        })?;
        if !seen_ids.insert(outfit.outfit_id.clone()) {
            return Err(Error::Parse {
                path: display,
                line: lineno,
                msg: format!("duplicate outfit_id '{}'", outfit.outfit_id),
            });
        }
        if outfit.items.is_empty() {
            return Err(Error::Parse {
                path: display,
                line: lineno,
                msg: format!("outfit '{}' has no items", outfit.outfit_id),
            });
        }
        let mut item_ids = HashSet::new();
        for item in &outfit.items {
            if item.item_id.is_empty() {
                return Err(Error::Parse {
                    path: display.clone(),
                    line: lineno,
                    msg: "empty item_id".into(),
                });
            }
            if !item_ids.insert(item.item_id.as_str()) {
                return Err(Error::Parse {
                    path: display.clone(),
                    line: lineno,
                    msg: format!("duplicate item '{}' within one outfit", item.item_id),
                });
            }
            match d_img {
                None => d_img = Some(item.image_feature.len()),
                Some(d) if d != item.image_feature.len() => {
                    return Err(Error::Parse {
                        path: display,
                        line: lineno,
                        msg: format!(
                            "image feature dimension {} conflicts with established {}",
                            item.image_feature.len(),
                            d
                        ),
                    });
                }
                _ => {}
            }
        }
        outfits.push(outfit);
    }
    Ok((outfits, d_img.unwrap_or(0)))
}

// ---------------------------------------------------------------------------
// Filtering rules
// ---------------------------------------------------------------------------

/// Surviving category names with dense ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryVocab {
    names: Vec<String>,
}

impl CategoryVocab {
    pub fn from_names(mut names: Vec<String>) -> CategoryVocab {
        names.sort();
        names.dedup();
        CategoryVocab { names }
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.binary_search_by(|n| n.as_str().cmp(name)).ok()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Remove categories with fewer than `min_items` distinct items, then the
/// items of removed categories; outfits left empty are dropped.
pub fn filter_categories(
    outfits: Vec<RawOutfit>,
    min_items: usize,
) -> (Vec<RawOutfit>, CategoryVocab) {
    let mut per_category: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for o in &outfits {
        for it in &o.items {
            per_category
                .entry(it.category.as_str())
                .or_default()
                .insert(it.item_id.as_str());
        }
    }
    let surviving: BTreeSet<String> = per_category
        .iter()
        .filter(|(_, items)| items.len() >= min_items)
        .map(|(name, _)| (*name).to_string())
        .collect();
    let mut out = Vec::new();
    for mut o in outfits {
        o.items.retain(|it| surviving.contains(&it.category));
        if !o.items.is_empty() {
            out.push(o);
        }
    }
    (
        out,
        CategoryVocab::from_names(surviving.into_iter().collect()),
    )
}

/// Remove items appearing in more than `max_outfits` outfits ("more than"
/// is strict); outfits left empty are dropped.
pub fn filter_frequent_items(outfits: Vec<RawOutfit>, max_outfits: usize) -> Vec<RawOutfit> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for o in &outfits {
        for it in &o.items {
            *counts.entry(it.item_id.as_str()).or_default() += 1;
        }
    }
    let banned: HashSet<String> = counts
        .iter()
        .filter(|(_, c)| **c > max_outfits)
        .map(|(id, _)| (*id).to_string())
        .collect();
    let mut out = Vec::new();
    for mut o in outfits {
        o.items.retain(|it| !banned.contains(&it.item_id));
        if !o.items.is_empty() {
            out.push(o);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Percentile labeling
// ---------------------------------------------------------------------------

/// Nearest-rank percentile: the ceil(p/100 * n)-th order statistic.
pub fn nearest_rank(sorted: &[u64], p: f64) -> u64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    let k = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[k.clamp(1, n) - 1]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelThresholds {
    pub p1: u64,
    pub p40: u64,
    pub p90: u64,
    pub p99: u64,
}

#[derive(Debug)]
pub struct LabelOutcome {
    pub labeled: Vec<(RawOutfit, u8)>,
    pub thresholds: LabelThresholds,
    pub dropped_uncertain: usize,
    /// Outfits that fell into both ranges (only possible when p40 >= p90).
    pub dropped_degenerate: usize,
}

/// Label by like-count percentiles: [p1, p40] -> 0, [p90, p99] -> 1,
/// everything else dropped. Outfits matching both ranges (degenerate
/// percentiles) are dropped rather than guessed.
pub fn label_by_percentile(outfits: Vec<RawOutfit>) -> Result<LabelOutcome> {
    if outfits.is_empty() {
        return Err(Error::Data("no outfits to label".into()));
    }
    if outfits.len() < 100 {
        log::warn!(
            "labeling {} outfits; percentiles of tiny corpora are degenerate",
            outfits.len()
        );
    }
    let mut likes: Vec<u64> = outfits.iter().map(|o| o.likes).collect();
    likes.sort_unstable();
    let thresholds = LabelThresholds {
        p1: nearest_rank(&likes, 1.0),
        p40: nearest_rank(&likes, 40.0),
        p90: nearest_rank(&likes, 90.0),
        p99: nearest_rank(&likes, 99.0),
    };
    if thresholds.p40 >= thresholds.p90 {
        log::warn!(
            "degenerate percentile ranges (p40={} >= p90={}); overlapping outfits are dropped",
            thresholds.p40,
            thresholds.p90
        );
    }
    let mut labeled = Vec::new();
    let mut dropped_uncertain = 0;
    let mut dropped_degenerate = 0;
    for o in outfits {
        let neg = o.likes >= thresholds.p1 && o.likes <= thresholds.p40;
        let pos = o.likes >= thresholds.p90 && o.likes <= thresholds.p99;
        match (neg, pos) {
            (true, true) => dropped_degenerate += 1,
            (true, false) => labeled.push((o, 0)),
            (false, true) => labeled.push((o, 1)),
            (false, false) => dropped_uncertain += 1,
        }
    }
    Ok(LabelOutcome {
        labeled,
        thresholds,
        dropped_uncertain,
        dropped_degenerate,
    })
}

// ---------------------------------------------------------------------------
// Component split
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SplitAssignment {
    map: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn get(&self, outfit_id: &str) -> Option<Split> {
        self.map.get(outfit_id).copied()
    }

    pub fn count(&self, split: Split) -> usize {
        self.map.values().filter(|s| **s == split).count()
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> UnionFind {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, x: usize) -> usize {
        if self.parent[x] != x {
            let root = self.find(self.parent[x]);
            self.parent[x] = root;
        }
        self.parent[x]
    }

    fn union(&mut self, a: usize, b: usize) {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Split outfits by connected components of the shared-item graph:
/// components are shuffled, then greedily assigned to whichever split is
/// furthest below its target count. No item ever crosses splits.
pub fn split_by_components(
    labeled: &[(RawOutfit, u8)],
    fractions: (f64, f64, f64),
    rng: &mut Rng,
) -> Result<SplitAssignment> {
    let total_frac = fractions.0 + fractions.1 + fractions.2;
    if (total_frac - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must sum to 1, got {total_frac}"
        )));
    }
    let n = labeled.len();
    let mut uf = UnionFind::new(n);
    let mut first_seen: HashMap<&str, usize> = HashMap::new();
    for (i, (o, _)) in labeled.iter().enumerate() {
        for it in &o.items {
            match first_seen.entry(it.item_id.as_str()) {
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(i);
                }
                std::collections::hash_map::Entry::Occupied(e) => uf.union(*e.get(), i),
            }
        }
    }
    // components in order of first appearance
    let mut comp_of_root: HashMap<usize, usize> = HashMap::new();
    let mut components: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        let root = uf.find(i);
        let idx = *comp_of_root.entry(root).or_insert_with(|| {
            components.push(Vec::new());
            components.len() - 1
        });
        components[idx].push(i);
    }
    let mut order: Vec<usize> = (0..components.len()).collect();
    rng.shuffle(&mut order);

    let targets = [
        fractions.0 * n as f64,
        fractions.1 * n as f64,
        fractions.2 * n as f64,
    ];
    let mut counts = [0usize; 3];
    let mut map = BTreeMap::new();
    for ci in order {
        let comp = &components[ci];
        // furthest below target; ties prefer train, then dev
        let mut best = 0;
        let mut best_deficit = f64::NEG_INFINITY;
        for s in 0..3 {
            let deficit = targets[s] - counts[s] as f64;
            if deficit > best_deficit {
                best_deficit = deficit;
                best = s;
            }
        }
        counts[best] += comp.len();
        for &i in comp {
            map.insert(labeled[i].0.outfit_id.clone(), Split::ALL[best]);
        }
    }
    if counts[1] == 0 || counts[2] == 0 {
        log::warn!(
            "component split left dev/test empty (counts {:?}); a giant component forces this",
            counts
        );
    }
    Ok(SplitAssignment { map })
}

// ---------------------------------------------------------------------------
// Length normalisation
// ---------------------------------------------------------------------------

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        // advance lexicographically
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
        }
        if idx[i] == i + n - k {
            return out;
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Index subsets normalising one outfit to exactly `l` items: outfits of
/// length `l` pass through, longer ones yield up to `max_combos` distinct
/// random `l`-subsets, shorter ones vanish. Subsets keep item order.
pub fn normalize_length(
    item_count: usize,
    l: usize,
    max_combos: usize,
    rng: &mut Rng,
) -> Vec<Vec<usize>> {
    if item_count < l {
        return Vec::new();
    }
    if item_count == l {
        return vec![(0..l).collect()];
    }
    let total = binomial(item_count, l);
    let want = (max_combos as u128).min(total) as usize;
    if total <= 200_000 {
        let all = combinations(item_count, l);
        let chosen = rng.sample_distinct(all.len(), want);
        let mut picked: Vec<Vec<usize>> = chosen.into_iter().map(|i| all[i].clone()).collect();
        picked.sort();
        picked
    } else {
        let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();
        while seen.len() < want {
            let mut s = rng.sample_distinct(item_count, l);
            s.sort_unstable();
            seen.insert(s);
        }
        seen.into_iter().collect()
    }
}

// ---------------------------------------------------------------------------
// Prepared dataset
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreparedItem {
    pub item_id: String,
    pub category_id: usize,
    pub image_feature: Vec<f32>,
    pub title_vector: Vec<f32>,
    /// Number of title tokens that hit the word-vector table.
    pub title_token_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledOutfit {
    pub outfit_id: String,
    pub label: u8,
    pub items: Vec<PreparedItem>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitCounts {
    pub outfits: usize,
    pub items: usize,
    pub positives: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub schema: String,
    pub outfit_len: usize,
    pub d_img: usize,
    pub d_txt: usize,
    pub category_count: usize,
    pub categories: Vec<String>,
    pub seed: u64,
    pub min_category_items: usize,
    pub max_item_outfits: usize,
    pub max_combos: usize,
    pub fractions: (f64, f64, f64),
    pub thresholds: LabelThresholds,
    pub counts: BTreeMap<String, SplitCounts>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryHistogramRow {
    pub category: String,
    pub items: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub counts: BTreeMap<String, SplitCounts>,
    pub total_outfits: usize,
    pub total_items: usize,
    pub dropped_uncertain: usize,
    pub dropped_degenerate: usize,
    /// Item counts per surviving category, most frequent first.
    pub category_histogram: Vec<CategoryHistogramRow>,
}

#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub meta: DatasetMeta,
    pub train: Vec<LabeledOutfit>,
    pub dev: Vec<LabeledOutfit>,
    pub test: Vec<LabeledOutfit>,
}

impl PreparedDataset {
    pub fn split(&self, s: Split) -> &[LabeledOutfit] {
        match s {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn load(dir: &Path) -> Result<PreparedDataset> {
        let meta: DatasetMeta =
            serde_json::from_reader(std::fs::File::open(dir.join("meta.json"))?)?;
        if meta.schema != PREPARED_SCHEMA {
            return Err(Error::Data(format!(
                "unknown prepared-dataset schema '{}'",
                meta.schema
            )));
        }
        let read = |name: &str| -> Result<Vec<LabeledOutfit>> {
            let path = dir.join(name);
            let file = std::fs::File::open(&path)?;
            let mut out = Vec::new();
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let o: LabeledOutfit = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    msg: e.to_string(),
                })?;
                out.push(o);
            }
            Ok(out)
        };
        Ok(PreparedDataset {
            meta,
            train: read("train.jsonl")?,
            dev: read("dev.jsonl")?,
            test: read("test.jsonl")?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct PrepareConfig {
    pub raw_path: PathBuf,
    pub wordvec_path: PathBuf,
    pub out_dir: PathBuf,
    pub min_category_items: usize,
    pub max_item_outfits: usize,
    pub outfit_len: usize,
    pub max_combos: usize,
    pub fractions: (f64, f64, f64),
    pub seed: u64,
}

impl PrepareConfig {
    pub fn new(raw: PathBuf, wordvec: PathBuf, out: PathBuf, seed: u64) -> PrepareConfig {
        PrepareConfig {
            raw_path: raw,
            wordvec_path: wordvec,
            out_dir: out,
            min_category_items: 500,
            max_item_outfits: 5,
            outfit_len: 4,
            max_combos: 5,
            fractions: (0.8, 0.1, 0.1),
            seed,
        }
    }
}

#[derive(Debug)]
pub struct PrepareReport {
    pub meta: DatasetMeta,
    pub summary: DatasetSummary,
}

/// Run the whole pipeline and write the prepared directory.
pub fn prepare(cfg: &PrepareConfig) -> Result<PrepareReport> {
    let (outfits, d_img) =
        parse_outfits(&cfg.raw_path).map_err(|e| e.in_stage("parse_outfits"))?;
    let table =
        WordVecTable::load(&cfg.wordvec_path).map_err(|e| e.in_stage("load_wordvec_table"))?;

    let (outfits, vocab) = filter_categories(outfits, cfg.min_category_items);
    let outfits = filter_frequent_items(outfits, cfg.max_item_outfits);
    if outfits.is_empty() {
        return Err(
            Error::Data("empty dataset: filtering removed every outfit".into())
                .in_stage("filter"),
        );
    }

    let label_outcome = label_by_percentile(outfits).map_err(|e| e.in_stage("label"))?;
    if label_outcome.labeled.is_empty() {
        return Err(Error::Data(
            "empty dataset: no outfit fell into either percentile range".into(),
        )
        .in_stage("label"));
    }

    let mut rng = Rng::new(cfg.seed);
    let mut split_rng = rng.fork("split");
    let assignment =
        split_by_components(&label_outcome.labeled, cfg.fractions, &mut split_rng)
            .map_err(|e| e.in_stage("split"))?;

    // canonical outfit order for all downstream rng consumption
    let mut labeled = label_outcome.labeled;
    labeled.sort_by(|a, b| a.0.outfit_id.cmp(&b.0.outfit_id));

    let mut norm_rng = rng.fork("normalize");
    let mut splits: BTreeMap<&'static str, Vec<LabeledOutfit>> = BTreeMap::new();
    for s in Split::ALL {
        splits.insert(s.name(), Vec::new());
    }
    let mut category_items: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (outfit, label) in &labeled {
        let split = assignment
            .get(&outfit.outfit_id)
            .expect("every labeled outfit is assigned");
        let subsets =
            normalize_length(outfit.items.len(), cfg.outfit_len, cfg.max_combos, &mut norm_rng);
        for (k, subset) in subsets.iter().enumerate() {
            let outfit_id = if subsets.len() == 1 && outfit.items.len() == cfg.outfit_len {
                outfit.outfit_id.clone()
            } else {
                format!("{}#{}", outfit.outfit_id, k)
            };
            let mut items = Vec::with_capacity(subset.len());
            for &idx in subset {
                let raw = &outfit.items[idx];
                let category_id = vocab.id(&raw.category).ok_or_else(|| {
                    Error::Data(format!("category '{}' missing from vocab", raw.category))
                        .in_stage("normalize")
                })?;
                let (title_vector, hits) = encode_title(&raw.title, &table);
                category_items
                    .entry(raw.category.clone())
                    .or_default()
                    .insert(raw.item_id.clone());
                items.push(PreparedItem {
                    item_id: raw.item_id.clone(),
                    category_id,
                    image_feature: raw.image_feature.clone(),
                    title_vector,
                    title_token_count: hits,
                });
            }
            splits.get_mut(split.name()).expect("split").push(LabeledOutfit {
                outfit_id,
                label: *label,
                items,
            });
        }
    }

    let non_empty: usize = splits.values().map(Vec::len).sum();
    if non_empty == 0 {
        return Err(Error::Data(
            "empty dataset: length normalisation dropped every outfit".into(),
        )
        .in_stage("normalize"));
    }

    for v in splits.values_mut() {
        v.sort_by(|a, b| a.outfit_id.cmp(&b.outfit_id));
    }

    let mut counts = BTreeMap::new();
    for (name, v) in &splits {
        let mut items: BTreeSet<&str> = BTreeSet::new();
        let mut positives = 0;
        for o in v {
            positives += usize::from(o.label == 1);
            for it in &o.items {
                items.insert(&it.item_id);
            }
        }
        counts.insert(
            (*name).to_string(),
            SplitCounts {
                outfits: v.len(),
                items: items.len(),
                positives,
            },
        );
    }

    let meta = DatasetMeta {
        schema: PREPARED_SCHEMA.to_string(),
        outfit_len: cfg.outfit_len,
        d_img,
        d_txt: table.dim(),
        category_count: vocab.len(),
        categories: vocab.names().to_vec(),
        seed: cfg.seed,
        min_category_items: cfg.min_category_items,
        max_item_outfits: cfg.max_item_outfits,
        max_combos: cfg.max_combos,
        fractions: cfg.fractions,
        thresholds: label_outcome.thresholds.clone(),
        counts: counts.clone(),
    };

    let mut histogram: Vec<CategoryHistogramRow> = category_items
        .iter()
        .map(|(category, items)| CategoryHistogramRow {
            category: category.clone(),
            items: items.len(),
        })
        .collect();
    histogram.sort_by(|a, b| b.items.cmp(&a.items).then(a.category.cmp(&b.category)));

    let summary = DatasetSummary {
        total_outfits: counts.values().map(|c| c.outfits).sum(),
        total_items: counts.values().map(|c| c.items).sum(),
        counts: counts.clone(),
        dropped_uncertain: label_outcome.dropped_uncertain,
        dropped_degenerate: label_outcome.dropped_degenerate,
        category_histogram: histogram,
    };

    std::fs::create_dir_all(&cfg.out_dir)?;
    for (name, v) in &splits {
        let mut w = std::io::BufWriter::new(std::fs::File::create(
            cfg.out_dir.join(format!("{name}.jsonl")),
        )?);
        for o in v {
            serde_json::to_writer(&mut w, o)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    serde_json::to_writer_pretty(
        std::io::BufWriter::new(std::fs::File::create(cfg.out_dir.join("meta.json"))?),
        &meta,
    )?;
    serde_json::to_writer_pretty(
        std::io::BufWriter::new(std::fs::File::create(cfg.out_dir.join("summary.json"))?),
        &summary,
    )?;
    Ok(PrepareReport { meta, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn raw_item(id: &str, category: &str, dim: usize) -> RawItem {
        RawItem {
            item_id: id.into(),
            title: format!("title of {id}"),
            category: category.into(),
            image_feature: vec![0.5; dim],
        }
    }

    fn raw_outfit(id: &str, likes: u64, items: Vec<RawItem>) -> RawOutfit {
        RawOutfit {
            outfit_id: id.into(),
            likes,
            items,
        }
    }

    #[test]
    fn parse_empty_file_is_empty() {
        let f = tempfile::NamedTempFile::new().unwrap();
        let (outfits, d) = parse_outfits(f.path()).unwrap();
        assert!(outfits.is_empty());
        assert_eq!(d, 0);
    }

    #[test]
    fn parse_round_trips_two_lines() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        let o1 = raw_outfit("o1", 10, vec![raw_item("i1", "Shoes", 3)]);
        let o2 = raw_outfit(
            "o2",
            2,
            vec![raw_item("i2", "Bags", 3), raw_item("i3", "Shoes", 3)],
        );
        writeln!(f, "{}", serde_json::to_string(&o1).unwrap()).unwrap();
        writeln!(f, "{}", serde_json::to_string(&o2).unwrap()).unwrap();
        let (outfits, d) = parse_outfits(f.path()).unwrap();
        assert_eq!(d, 3);
        assert_eq!(outfits.len(), 2);
        assert_eq!(outfits[1].items[1].item_id, "i3");
        assert_eq!(outfits[0].likes, 10);
    }

    #[test]
    fn parse_rejects_dimension_drift_with_line_number() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        let o1 = raw_outfit("o1", 1, vec![raw_item("i1", "Shoes", 4)]);
        let o2 = raw_outfit("o2", 1, vec![raw_item("i2", "Shoes", 5)]);
        writeln!(f, "{}", serde_json::to_string(&o1).unwrap()).unwrap();
        writeln!(f, "{}", serde_json::to_string(&o2).unwrap()).unwrap();
        match parse_outfits(f.path()).unwrap_err() {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, 2);
                assert!(msg.contains('5') && msg.contains('4'), "{msg}");
            }
            other => panic!("wrong error {other}"),
        }
    }

    #[test]
    fn parse_rejects_duplicate_outfit_ids() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        let o = raw_outfit("o1", 1, vec![raw_item("i1", "Shoes", 2)]);
        writeln!(f, "{}", serde_json::to_string(&o).unwrap()).unwrap();
        writeln!(f, "{}", serde_json::to_string(&o).unwrap()).unwrap();
        assert!(matches!(
            parse_outfits(f.path()),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn category_filter_counts_distinct_items() {
        // category A has 2 items, B has 3; threshold 3 keeps only B
        let outfits = vec![
            raw_outfit(
                "o1",
                1,
                vec![raw_item("a1", "A", 2), raw_item("b1", "B", 2)],
            ),
            raw_outfit(
                "o2",
                1,
                vec![raw_item("a2", "A", 2), raw_item("b2", "B", 2)],
            ),
            raw_outfit(
                "o3",
                1,
                vec![raw_item("a1", "A", 2), raw_item("b3", "B", 2)],
            ),
        ];
        let (filtered, vocab) = filter_categories(outfits, 3);
        assert_eq!(vocab.names(), &["B".to_string()]);
        assert!(filtered
            .iter()
            .all(|o| o.items.iter().all(|i| i.category == "B")));
        assert_eq!(filtered.len(), 3);
    }

    #[test]
    fn category_filter_identity_when_all_pass() {
        let outfits = vec![raw_outfit("o1", 1, vec![raw_item("a1", "A", 2)])];
        let (filtered, vocab) = filter_categories(outfits.clone(), 1);
        assert_eq!(filtered.len(), outfits.len());
        assert_eq!(vocab.len(), 1);
    }

    #[test]
    fn frequent_item_filter_is_strict_at_the_boundary() {
        let mk = |i: usize, with_shared: bool| {
            let mut items = vec![raw_item(&format!("u{i}"), "C", 2)];
            if with_shared {
                items.push(raw_item("shared", "C", 2));
            }
            raw_outfit(&format!("o{i}"), 1, items)
        };
        // shared item appears in exactly 5 outfits: retained
        let outfits: Vec<RawOutfit> = (0..5).map(|i| mk(i, true)).collect();
        let kept = filter_frequent_items(outfits, 5);
        assert!(kept.iter().all(|o| o.items.len() == 2));
        // 6 outfits: removed everywhere
        let outfits: Vec<RawOutfit> = (0..6).map(|i| mk(i, true)).collect();
        let kept = filter_frequent_items(outfits, 5);
        assert!(kept.iter().all(|o| o.items.len() == 1));
        assert_eq!(kept.len(), 6);
    }

    #[test]
    fn percentile_labeling_matches_the_nearest_rank_oracle() {
        // likes 1..=100: p1=1, p40=40, p90=90, p99=99
        let outfits: Vec<RawOutfit> = (1..=100)
            .map(|v| raw_outfit(&format!("o{v:03}"), v, vec![raw_item(&format!("i{v}"), "C", 2)]))
            .collect();
        let out = label_by_percentile(outfits).unwrap();
        assert_eq!(out.thresholds.p1, 1);
        assert_eq!(out.thresholds.p40, 40);
        assert_eq!(out.thresholds.p90, 90);
        assert_eq!(out.thresholds.p99, 99);
        let neg = out.labeled.iter().filter(|(_, l)| *l == 0).count();
        let pos = out.labeled.iter().filter(|(_, l)| *l == 1).count();
        assert_eq!((neg, pos), (40, 10));
    }

    #[test]
    fn constant_likes_degenerate_case_drops_everything() {
        let outfits: Vec<RawOutfit> = (0..120)
            .map(|v| raw_outfit(&format!("o{v}"), 7, vec![raw_item(&format!("i{v}"), "C", 2)]))
            .collect();
        let out = label_by_percentile(outfits).unwrap();
        assert!(out.labeled.is_empty());
        assert_eq!(out.dropped_degenerate, 120);
    }

    #[test]
    fn bimodal_likes_label_the_tail_positive() {
        let mut outfits: Vec<RawOutfit> = (0..90)
            .map(|v| raw_outfit(&format!("a{v:03}"), 0, vec![raw_item(&format!("i{v}"), "C", 2)]))
            .collect();
        for v in 0..10 {
            outfits.push(raw_outfit(
                &format!("b{v:03}"),
                1000,
                vec![raw_item(&format!("j{v}"), "C", 2)],
            ));
        }
        let out = label_by_percentile(outfits).unwrap();
        let pos: Vec<&str> = out
            .labeled
            .iter()
            .filter(|(_, l)| *l == 1)
            .map(|(o, _)| o.outfit_id.as_str())
            .collect();
        assert_eq!(pos.len(), 10);
        assert!(pos.iter().all(|id| id.starts_with('b')));
    }

    #[test]
    fn label_ratio_is_near_four_for_distinct_likes() {
        for n in [1000usize, 2500, 10_000] {
            let likes: Vec<u64> = (1..=n as u64).collect();
            let mut sorted = likes.clone();
            sorted.sort_unstable();
            let p1 = nearest_rank(&sorted, 1.0);
            let p40 = nearest_rank(&sorted, 40.0);
            let p90 = nearest_rank(&sorted, 90.0);
            let p99 = nearest_rank(&sorted, 99.0);
            let neg = likes.iter().filter(|v| **v >= p1 && **v <= p40).count() as f64;
            let pos = likes.iter().filter(|v| **v >= p90 && **v <= p99).count() as f64;
            let ratio = neg / pos;
            assert!((ratio - 4.0).abs() <= 0.5, "n={n} ratio={ratio}");
        }
    }

    #[test]
    fn shared_items_land_in_one_split() {
        let labeled = vec![
            (
                raw_outfit("A", 1, vec![raw_item("i1", "C", 2), raw_item("i2", "C", 2)]),
                0,
            ),
            (
                raw_outfit("B", 1, vec![raw_item("i2", "C", 2), raw_item("i3", "C", 2)]),
                0,
            ),
            (raw_outfit("C", 1, vec![raw_item("i4", "C", 2)]), 1),
        ];
        for seed in 0..20 {
            let mut rng = Rng::new(seed);
            let a = split_by_components(&labeled, (0.34, 0.33, 0.33), &mut rng).unwrap();
            assert_eq!(a.get("A"), a.get("B"), "shared item must bind A and B");
        }
    }

    #[test]
    fn disjoint_outfits_split_close_to_fractions() {
        let labeled: Vec<(RawOutfit, u8)> = (0..100)
            .map(|v| {
                (
                    raw_outfit(&format!("o{v:03}"), 1, vec![raw_item(&format!("i{v}"), "C", 2)]),
                    0,
                )
            })
            .collect();
        let mut rng = Rng::new(11);
        let a = split_by_components(&labeled, (0.8, 0.1, 0.1), &mut rng).unwrap();
        // greedy deficit fill on unit components is within one of target
        assert!((a.count(Split::Train) as i64 - 80).abs() <= 1);
        assert!((a.count(Split::Dev) as i64 - 10).abs() <= 1);
        assert!((a.count(Split::Test) as i64 - 10).abs() <= 1);
    }

    #[test]
    fn giant_component_forces_train() {
        let labeled: Vec<(RawOutfit, u8)> = (0..50)
            .map(|v| {
                (
                    raw_outfit(
                        &format!("o{v:02}"),
                        1,
                        vec![
                            raw_item("hub", "C", 2),
                            raw_item(&format!("i{v}"), "C", 2),
                        ],
                    ),
                    0,
                )
            })
            .collect();
        let mut rng = Rng::new(2);
        let a = split_by_components(&labeled, (0.8, 0.1, 0.1), &mut rng).unwrap();
        assert_eq!(a.count(Split::Train), 50);
        assert_eq!(a.count(Split::Dev), 0);
        assert_eq!(a.count(Split::Test), 0);
    }

    #[test]
    fn normalize_length_examples() {
        let mut rng = Rng::new(5);
        assert_eq!(normalize_length(4, 4, 5, &mut rng), vec![vec![0, 1, 2, 3]]);
        // C(5,4) = 5 <= max_combos: all five distinct subsets
        let five = normalize_length(5, 4, 5, &mut rng);
        assert_eq!(five.len(), 5);
        let set: BTreeSet<Vec<usize>> = five.iter().cloned().collect();
        assert_eq!(set.len(), 5);
        assert!(normalize_length(3, 4, 5, &mut rng).is_empty());
    }

    #[test]
    fn normalize_length_never_duplicates_subsets() {
        let mut rng = Rng::new(6);
        for n in 5..=12 {
            let subsets = normalize_length(n, 4, 5, &mut rng);
            assert_eq!(subsets.len(), 5.min(binomial(n, 4) as usize));
            let set: BTreeSet<Vec<usize>> = subsets.iter().cloned().collect();
            assert_eq!(set.len(), subsets.len(), "n={n}");
            for s in &subsets {
                assert!(s.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    #[test]
    fn binomial_basics() {
        assert_eq!(binomial(5, 4), 5);
        assert_eq!(binomial(10, 4), 210);
        assert_eq!(binomial(3, 4), 0);
        assert_eq!(combinations(5, 4).len(), 5);
        assert_eq!(combinations(6, 2).len(), 15);
    }
}
