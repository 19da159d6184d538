//! Synthetic raw-corpus generator.
//!
//! Items belong to latent style clusters. A popular outfit is four
//! on-style items of one shared cluster; unpopular outfits mix in
//! off-style items drawn from one-off private styles, so "all four items
//! share one cluster" exactly characterises the positive label. Each
//! item also carries a scalar style-coherence tone in its first image
//! coordinate (crisp or understated when on-style, mild or clashing when
//! off-style), which is what makes the label learnable by the additive
//! mean-pooled scorer. Like counts are a permutation of 1..=N arranged
//! so percentile labeling reproduces the planted labels bit-for-bit.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::dataset::{RawItem, RawOutfit};
use crate::error::Result;
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub outfits: usize,
    pub clusters: usize,
    pub noise: f64,
    pub seed: u64,
    pub items_per_outfit: usize,
    pub image_dim: usize,
    pub title_dim: usize,
}

impl SynthConfig {
    pub fn new(outfits: usize, clusters: usize, noise: f64, seed: u64) -> SynthConfig {
        SynthConfig {
            outfits,
            clusters,
            noise,
            seed,
            items_per_outfit: 4,
            image_dim: 16,
            title_dim: 16,
        }
    }
}

// Tone mixture constants, calibrated at noise 0.3. The modes stay apart
// at zero noise, so the planted rule is exactly recoverable there.
const TONE_CRISP_MEAN: f64 = 2.6;
const TONE_CRISP_SD: f64 = 0.42 / 0.3;
const TONE_DARK_MEAN: f64 = 0.6;
const TONE_DARK_SD: f64 = 0.48 / 0.3;
const P_DARK_GIVEN_CLEAN: f64 = 0.10;
const TONE_MILD_MEAN: f64 = -0.6;
const TONE_MILD_SD: f64 = 0.52 / 0.3;
const P_MILD_GIVEN_OFF: f64 = 0.30;
const TONE_CLASH_MEAN: f64 = -4.0;
const TONE_CLASH_SD: f64 = 0.80 / 0.3;
/// P(#off-style items = 1, 2, 3, 4) in an unpopular outfit.
const OFF_COUNT_WEIGHTS: [f64; 4] = [0.80, 0.15, 0.04, 0.01];
const CENTROID_NORM: f64 = 1.5;
/// Share of labeled outfits that are positive (matches 4:1 labeling).
const P_POSITIVE: f64 = 0.188;

const CATEGORIES_PER_CLUSTER: usize = 2;
const CLUSTER_WORDS: usize = 12;
const SHARED_WORDS: usize = 24;
const GENERIC_WORDS: usize = 24;

pub struct SynthOutput {
    pub outfits: Vec<RawOutfit>,
    /// token -> vector rows for the synthetic word-vector file.
    pub wordvec: Vec<(String, Vec<f32>)>,
}

struct ItemFactory<'a> {
    cfg: &'a SynthConfig,
    centroids: Vec<Vec<f64>>,
    next_id: usize,
}

impl<'a> ItemFactory<'a> {
    fn new(cfg: &'a SynthConfig, rng: &mut Rng) -> ItemFactory<'a> {
        let style_dim = cfg.image_dim - 1;
        let centroids = (0..cfg.clusters)
            .map(|_| random_direction(style_dim, rng))
            .collect();
        ItemFactory {
            cfg,
            centroids,
            next_id: 0,
        }
    }

    fn fresh_id(&mut self) -> String {
        let id = format!("i{:06}", self.next_id);
        self.next_id += 1;
        id
    }

    fn clean_tone(&self, rng: &mut Rng) -> f64 {
        let k = self.cfg.noise;
        if rng.bernoulli(P_DARK_GIVEN_CLEAN) {
            rng.normal_scaled(TONE_DARK_MEAN, TONE_DARK_SD * k)
        } else {
            rng.normal_scaled(TONE_CRISP_MEAN, TONE_CRISP_SD * k)
        }
    }

    fn off_tone(&self, rng: &mut Rng) -> f64 {
        let k = self.cfg.noise;
        if rng.bernoulli(P_MILD_GIVEN_OFF) {
            rng.normal_scaled(TONE_MILD_MEAN, TONE_MILD_SD * k)
        } else {
            rng.normal_scaled(TONE_CLASH_MEAN, TONE_CLASH_SD * k)
        }
    }

    fn image(&self, tone: f64, style: &[f64], rng: &mut Rng) -> Vec<f32> {
        let mut v = Vec::with_capacity(self.cfg.image_dim);
        v.push(tone as f32);
        for s in style {
            v.push((s + rng.normal_scaled(0.0, self.cfg.noise)) as f32);
        }
        v
    }

    /// On-style item of a shared cluster.
    fn clean_item(&mut self, cluster: usize, rng: &mut Rng) -> RawItem {
        let tone = self.clean_tone(rng);
        let style = self.centroids[cluster].clone();
        let image_feature = self.image(tone, &style, rng);
        let category = format!(
            "cat{:02}",
            cluster * CATEGORIES_PER_CLUSTER + rng.below(CATEGORIES_PER_CLUSTER)
        );
        let title = self.title(Some(cluster), rng);
        RawItem {
            item_id: self.fresh_id(),
            title,
            category,
            image_feature,
        }
    }

    /// Off-style item: a one-off private style direction.
    fn off_item(&mut self, rng: &mut Rng) -> RawItem {
        let tone = self.off_tone(rng);
        let style = random_direction(self.cfg.image_dim - 1, rng);
        let image_feature = self.image(tone, &style, rng);
        let category = format!(
            "cat{:02}",
            rng.below(self.cfg.clusters * CATEGORIES_PER_CLUSTER)
        );
        let title = self.title(None, rng);
        RawItem {
            item_id: self.fresh_id(),
            title,
            category,
            image_feature,
        }
    }

    fn title(&self, cluster: Option<usize>, rng: &mut Rng) -> String {
        let count = 3 + rng.below(3);
        let mut words = Vec::with_capacity(count);
        for _ in 0..count {
            let w = if rng.bernoulli(0.7) {
                match cluster {
                    Some(c) => format!("c{c}w{}", rng.below(CLUSTER_WORDS)),
                    None => format!("g{}", rng.below(GENERIC_WORDS)),
                }
            } else {
                format!("fash{}", rng.below(SHARED_WORDS))
            };
            words.push(w);
        }
        words.join(" ")
    }
}

fn random_direction(dim: usize, rng: &mut Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let scale = CENTROID_NORM / norm;
    v.iter_mut().for_each(|x| *x *= scale);
    v
}

/// Like-count bands matching the nearest-rank percentile labeling of a
/// permutation of 1..=n: values in [ceil(0.01 n), ceil(0.40 n)] label
/// negative, values in [ceil(0.90 n), ceil(0.99 n)] label positive.
fn like_bands(n: usize) -> (std::ops::RangeInclusive<u64>, std::ops::RangeInclusive<u64>) {
    let rank = |p: f64| -> u64 { ((p / 100.0) * n as f64).ceil().max(1.0) as u64 };
    (rank(1.0)..=rank(40.0), rank(90.0)..=rank(99.0))
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    let mut root = Rng::new(cfg.seed);
    let mut factory = ItemFactory::new(cfg, &mut root.fork("centroids"));
    let mut likes_rng = root.fork("likes");
    let mut item_rng = root.fork("items");

    let n = cfg.outfits;
    let (neg_band, pos_band) = like_bands(n);
    let mut likes: Vec<u64> = (1..=n as u64).collect();
    likes_rng.shuffle(&mut likes);

    let mut outfits = Vec::with_capacity(n);
    for (i, like) in likes.into_iter().enumerate() {
        let positive = if pos_band.contains(&like) {
            true
        } else if neg_band.contains(&like) {
            false
        } else {
            // filler outfits are dropped at labeling; keep their content
            // distribution indistinguishable from the labeled corpus
            item_rng.bernoulli(P_POSITIVE)
        };
        let cluster = item_rng.below(cfg.clusters);
        let m = cfg.items_per_outfit;
        let mut items = Vec::with_capacity(m);
        if positive {
            for _ in 0..m {
                items.push(factory.clean_item(cluster, &mut item_rng));
            }
        } else {
            let off_count = 1 + item_rng.choice_weighted(&OFF_COUNT_WEIGHTS);
            let off_slots = item_rng.sample_distinct(m, off_count.min(m));
            for slot in 0..m {
                if off_slots.contains(&slot) {
                    items.push(factory.off_item(&mut item_rng));
                } else {
                    items.push(factory.clean_item(cluster, &mut item_rng));
                }
            }
        }
        outfits.push(RawOutfit {
            outfit_id: format!("o{i:05}"),
            likes: like,
            items,
        });
    }

    // word vectors for every token either pool can emit
    let mut wv_rng = root.fork("wordvec");
    let mut wordvec = Vec::new();
    let mut push_word = |name: String, rng: &mut Rng| {
        let v: Vec<f32> = (0..cfg.title_dim)
            .map(|_| rng.normal_scaled(0.0, 0.3) as f32)
            .collect();
        wordvec.push((name, v));
    };
    for c in 0..cfg.clusters {
        for w in 0..CLUSTER_WORDS {
            push_word(format!("c{c}w{w}"), &mut wv_rng);
        }
    }
    for w in 0..SHARED_WORDS {
        push_word(format!("fash{w}"), &mut wv_rng);
    }
    for w in 0..GENERIC_WORDS {
        push_word(format!("g{w}"), &mut wv_rng);
    }

    Ok(SynthOutput { outfits, wordvec })
}

/// Write `raw.jsonl` and `wordvecs.txt` into `dir`.
pub fn write_output(out: &SynthOutput, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let raw_path = dir.join("raw.jsonl");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&raw_path)?);
    for o in &out.outfits {
        serde_json::to_writer(&mut w, o)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let vec_path = dir.join("wordvecs.txt");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&vec_path)?);
    for (token, vec) in &out.wordvec {
        write!(w, "{token}")?;
        for v in vec {
            write!(w, " {v}")?;
        }
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok((raw_path, vec_path))
}

/// True label under the planted rule, for tests: positive iff the like
/// count falls in the positive band.
pub fn planted_label(cfg: &SynthConfig, likes: u64) -> Option<u8> {
    let (neg, pos) = like_bands(cfg.outfits);
    if pos.contains(&likes) {
        Some(1)
    } else if neg.contains(&likes) {
        Some(0)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generates_the_requested_count_with_unique_items() {
        let cfg = SynthConfig::new(500, 8, 0.3, 1);
        let out = generate(&cfg).unwrap();
        assert_eq!(out.outfits.len(), 500);
        let mut ids: Vec<&str> = out
            .outfits
            .iter()
            .flat_map(|o| o.items.iter().map(|i| i.item_id.as_str()))
            .collect();
        let before = ids.len();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), before, "items are never shared across outfits");
        assert!(out.outfits.iter().all(|o| o.items.len() == 4));
    }

    #[test]
    fn labeled_share_is_about_one_in_five_positive() {
        let cfg = SynthConfig::new(5000, 8, 0.3, 1);
        let out = generate(&cfg).unwrap();
        let mut pos = 0;
        let mut neg = 0;
        for o in &out.outfits {
            match planted_label(&cfg, o.likes) {
                Some(1) => pos += 1,
                Some(0) => neg += 1,
                _ => {}
            }
        }
        assert_eq!(pos, 451);
        assert_eq!(neg, 1951);
        let ratio = f64::from(neg) / f64::from(pos);
        assert!((ratio - 4.0).abs() <= 0.5, "ratio {ratio}");
    }

    #[test]
    fn positive_outfits_share_one_cluster_category_block() {
        // every positive outfit's categories map into one cluster block
        let cfg = SynthConfig::new(2000, 8, 0.3, 7);
        let out = generate(&cfg).unwrap();
        for o in &out.outfits {
            if planted_label(&cfg, o.likes) != Some(1) {
                continue;
            }
            let clusters: std::collections::BTreeSet<usize> = o
                .items
                .iter()
                .map(|i| {
                    i.category[3..].parse::<usize>().unwrap() / CATEGORIES_PER_CLUSTER
                })
                .collect();
            assert_eq!(clusters.len(), 1, "outfit {}", o.outfit_id);
        }
    }

    #[test]
    fn zero_noise_separates_tones_exactly() {
        let cfg = SynthConfig::new(1000, 8, 0.0, 3);
        let out = generate(&cfg).unwrap();
        for o in &out.outfits {
            let label = planted_label(&cfg, o.likes);
            for item in &o.items {
                let tone = f64::from(item.image_feature[0]);
                let is_clean = tone == TONE_CRISP_MEAN || tone == TONE_DARK_MEAN;
                let is_off = tone == TONE_MILD_MEAN || tone == TONE_CLASH_MEAN;
                assert!(is_clean || is_off);
                if label == Some(1) {
                    assert!(is_clean, "positive outfits contain only on-style items");
                }
            }
        }
    }

    #[test]
    fn same_seed_reproduces_identical_bytes() {
        let cfg = SynthConfig::new(300, 4, 0.3, 11);
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let (ra, va) = write_output(&a, &tmp.path().join("a")).unwrap();
        let (rb, vb) = write_output(&b, &tmp.path().join("b")).unwrap();
        assert_eq!(std::fs::read(ra).unwrap(), std::fs::read(rb).unwrap());
        assert_eq!(std::fs::read(va).unwrap(), std::fs::read(vb).unwrap());
    }

    #[test]
    fn wordvec_covers_every_title_token() {
        let cfg = SynthConfig::new(200, 8, 0.3, 5);
        let out = generate(&cfg).unwrap();
        let vocab: std::collections::BTreeSet<&str> =
            out.wordvec.iter().map(|(t, _)| t.as_str()).collect();
        for o in &out.outfits {
            for i in &o.items {
                for tok in i.title.split(' ') {
                    assert!(vocab.contains(tok), "token {tok} missing from wordvec");
                }
            }
        }
    }
}
