//! Tag-guided feature decomposition.
//!
//! Builds the in-distribution tag vocabulary from training tag statistics, then
//! turns each record's attention maps for in-distribution tags into binary
//! masks and gathers the feature vectors under those masks into one token set.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use thiserror::Error;

use crate::store::{FeatureRecord, Split, Store, StoreError};

#[derive(Debug, Error)]
pub enum DecomposeError {
    #[error("record {id}: {source}")]
    Record {
        id: String,
        #[source]
        source: StoreError,
    },
    #[error("train record {0} has no class label")]
    UnlabeledTrain(String),
    #[error("no tag left to assign to classes {0:?}")]
    UnassignedClasses(Vec<usize>),
    #[error("vocabulary file line {line}: {message}")]
    VocabFile { line: usize, message: String },
    #[error("sample cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Bijection between class ids `0..K` and the tag ids chosen to represent them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndVocab {
    class_to_tag: Vec<u32>,
    tag_to_class: BTreeMap<u32, usize>,
}

impl IndVocab {
    pub fn new(class_to_tag: Vec<u32>) -> Result<IndVocab, DecomposeError> {
        let mut tag_to_class = BTreeMap::new();
        for (class, &tag) in class_to_tag.iter().enumerate() {
            if tag_to_class.insert(tag, class).is_some() {
                return Err(DecomposeError::VocabFile {
                    line: class + 1,
                    message: format!("tag {tag} assigned to more than one class"),
                });
            }
        }
        Ok(IndVocab { class_to_tag, tag_to_class })
    }

    pub fn num_classes(&self) -> usize {
        self.class_to_tag.len()
    }

    pub fn tag_of(&self, class: usize) -> Option<u32> {
        self.class_to_tag.get(class).copied()
    }

    pub fn class_of(&self, tag: u32) -> Option<usize> {
        self.tag_to_class.get(&tag).copied()
    }

    pub fn contains_tag(&self, tag: u32) -> bool {
        self.tag_to_class.contains_key(&tag)
    }

    pub fn to_text(&self) -> String {
        self.class_to_tag
            .iter()
            .enumerate()
            .map(|(c, t)| format!("{c}\t{t}\n"))
            .collect()
    }

    pub fn parse(text: &str) -> Result<IndVocab, DecomposeError> {
        let mut pairs = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| DecomposeError::VocabFile { line: idx + 1, message };
            let (c, t) = line
                .split_once('\t')
                .ok_or_else(|| bad("expected <class_id>\\t<tag_id>".into()))?;
            let c = c.parse::<usize>().map_err(|e| bad(format!("class_id: {e}")))?;
            let t = t.trim().parse::<u32>().map_err(|e| bad(format!("tag_id: {e}")))?;
            if pairs.insert(c, t).is_some() {
                return Err(bad(format!("class {c} listed twice")));
            }
        }
        let k = pairs.len();
        if pairs.keys().copied().ne(0..k) {
            return Err(DecomposeError::VocabFile {
                line: 0,
                message: "class ids must cover 0..K exactly once".into(),
            });
        }
        IndVocab::new(pairs.into_values().collect())
    }

    pub fn load(path: &Path) -> Result<IndVocab, DecomposeError> {
        let text = fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
        IndVocab::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), DecomposeError> {
        fs::write(path, self.to_text()).map_err(|e| StoreError::io(path, e).into())
    }
}

/// `counts[c][t]`: number of training records of class `c` carrying tag `t`.
pub type TagFrequencies = BTreeMap<usize, BTreeMap<u32, usize>>;

/// Counts, per class, how many training records carry each tag. Every class
/// id below the largest training label gets an entry, possibly empty.
pub fn count_tag_frequencies(store: &Store) -> Result<TagFrequencies, DecomposeError> {
    let mut counts = TagFrequencies::new();
    for entry in store.manifest.split(Split::Train) {
        if entry.label_id < 0 {
            return Err(DecomposeError::UnlabeledTrain(entry.id.clone()));
        }
        let record = store
            .read(entry)
            .map_err(|source| DecomposeError::Record { id: entry.id.clone(), source })?;
        let class = entry.label_id as usize;
        for c in counts.len()..=class {
            counts.entry(c).or_default();
        }
        let per_class = counts.get_mut(&class).unwrap();
        for tag in &record.tags {
            *per_class.entry(tag.tag_id).or_insert(0) += 1;
        }
    }
    Ok(counts)
}

/// Greedy global assignment: candidate (class, tag) pairs are taken in order of
/// descending count, then ascending tag id, then ascending class id; each class
/// and each tag is used at most once.
pub fn select_ind_tags(freq: &TagFrequencies) -> Result<IndVocab, DecomposeError> {
    let k = freq.keys().next_back().map_or(0, |&c| c + 1);
    let mut candidates: Vec<(usize, u32, usize)> = freq
        .iter()
        .flat_map(|(&c, tags)| tags.iter().filter(|(_, &n)| n > 0).map(move |(&t, &n)| (n, t, c)))
        .collect();
    candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut class_to_tag: Vec<Option<u32>> = vec![None; k];
    let mut used = BTreeSet::new();
    for (_, tag, class) in candidates {
        if class_to_tag[class].is_none() && !used.contains(&tag) {
            class_to_tag[class] = Some(tag);
            used.insert(tag);
        }
    }
    let missing: Vec<usize> = (0..k).filter(|&c| class_to_tag[c].is_none()).collect();
    if !missing.is_empty() {
        return Err(DecomposeError::UnassignedClasses(missing));
    }
    IndVocab::new(class_to_tag.into_iter().map(Option::unwrap).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecompositionConfig {
    pub tau: f32,
    pub max_tokens: usize,
    pub normalize: bool,
}

impl Default for DecompositionConfig {
    fn default() -> Self {
        DecompositionConfig { tau: 0.5, max_tokens: 256, normalize: true }
    }
}

/// Min-max maps the attention to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize_attention(attention: &Array2<f32>) -> Array2<f32> {
    let (lo, hi) = attention
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    if !(span > 0.0) {
        return Array2::zeros(attention.dim());
    }
    attention.mapv(|v| (v - lo) / span)
}

/// Cells at or above `tau` are selected.
pub fn binarize_mask(attention: &Array2<f32>, tau: f32) -> Array2<bool> {
    attention.mapv(|v| v >= tau)
}

/// Gathers feature vectors under the mask in row-major order.
pub fn select_object_tokens(
    record: &FeatureRecord,
    mask: &Array2<bool>,
) -> (Array2<f32>, Vec<(u32, u32)>) {
    let locations: Vec<(u32, u32)> = mask
        .indexed_iter()
        .filter(|(_, &on)| on)
        .map(|((r, c), _)| (r as u32, c as u32))
        .collect();
    (gather_tokens(record, &locations), locations)
}

fn gather_tokens(record: &FeatureRecord, locations: &[(u32, u32)]) -> Array2<f32> {
    let d = record.feature_dim();
    let mut tokens = Array2::zeros((locations.len(), d));
    for (mut row, &(r, c)) in tokens.axis_iter_mut(Axis(0)).zip(locations) {
        row.assign(&record.features.slice(ndarray::s![r as usize, c as usize, ..]));
    }
    tokens
}

/// The combined object feature of one image: a variable-length token set.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSample {
    pub record_id: String,
    /// Shape `(n_tok, d)`.
    pub tokens: Array2<f32>,
    pub label_id: i32,
    pub locations: Vec<(u32, u32)>,
}

impl ObjectSample {
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    /// Arithmetic mean over tokens.
    pub fn mean_token(&self) -> ndarray::Array1<f64> {
        self.tokens.mapv(f64::from).mean_axis(Axis(0)).expect("non-empty sample")
    }
}

/// Union of the masks of every in-distribution tag on the record, capped at
/// `max_tokens` cells by peak normalized attention. `None` when the record has
/// no in-distribution tag or the union is empty.
pub fn decompose_record(
    record: &FeatureRecord,
    vocab: &IndVocab,
    cfg: &DecompositionConfig,
) -> Option<ObjectSample> {
    let (h, w) = record.grid();
    let mut selected = Array2::from_elem((h, w), false);
    let mut peak = Array2::from_elem((h, w), f32::NEG_INFINITY);
    let mut any_tag = false;
    for tag in record.tags.iter().filter(|t| vocab.contains_tag(t.tag_id)) {
        any_tag = true;
        let att = if cfg.normalize {
            normalize_attention(&tag.attention)
        } else {
            tag.attention.clone()
        };
        let mask = binarize_mask(&att, cfg.tau);
        ndarray::Zip::from(&mut selected)
            .and(&mut peak)
            .and(&mask)
            .and(&att)
            .for_each(|sel, pk, &m, &a| {
                if m {
                    *sel = true;
                    *pk = pk.max(a);
                }
            });
    }
    if !any_tag {
        return None;
    }
    let mut cells: Vec<(usize, usize)> = selected
        .indexed_iter()
        .filter(|(_, &on)| on)
        .map(|(rc, _)| rc)
        .collect();
    if cells.is_empty() {
        return None;
    }
    if cells.len() > cfg.max_tokens {
        // stable sort keeps row-major order among equal peaks
        cells.sort_by(|a, b| peak[*b].total_cmp(&peak[*a]));
        cells.truncate(cfg.max_tokens);
        cells.sort_unstable();
    }
    let locations: Vec<(u32, u32)> = cells.iter().map(|&(r, c)| (r as u32, c as u32)).collect();
    Some(ObjectSample {
        record_id: record.id.clone(),
        tokens: gather_tokens(record, &locations),
        label_id: record.label_id,
        locations,
    })
}

pub const SAMPLE_MAGIC: &[u8; 4] = b"TGOS";

/// Cache layout: `"TGOS" | id_len u32 | id utf-8 | label_id i32 | n_tok u32 |
/// d u32 | locations n_tok×(u32 row, u32 col) | tokens n_tok·d f32`.
pub fn encode_sample(sample: &ObjectSample) -> Vec<u8> {
    let (n, d) = sample.tokens.dim();
    let mut buf = Vec::with_capacity(20 + sample.record_id.len() + 8 * n + 4 * n * d);
    buf.extend_from_slice(SAMPLE_MAGIC);
    buf.extend_from_slice(&(sample.record_id.len() as u32).to_le_bytes());
    buf.extend_from_slice(sample.record_id.as_bytes());
    buf.extend_from_slice(&sample.label_id.to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for &(r, c) in &sample.locations {
        buf.extend_from_slice(&r.to_le_bytes());
        buf.extend_from_slice(&c.to_le_bytes());
    }
    for v in sample.tokens.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_sample(bytes: &[u8]) -> Result<ObjectSample, DecomposeError> {
    let short = || DecomposeError::Cache("truncated sample".into());
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], DecomposeError> {
        let out = bytes.get(pos..pos + n).ok_or_else(short)?;
        pos += n;
        Ok(out)
    };
    if take(4)? != SAMPLE_MAGIC {
        return Err(DecomposeError::Cache("bad magic".into()));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    let id_len = u32_at(take(4)?) as usize;
    let record_id = String::from_utf8(take(id_len)?.to_vec())
        .map_err(|_| DecomposeError::Cache("id is not utf-8".into()))?;
    let label_id = i32::from_le_bytes(take(4)?.try_into().unwrap());
    let n = u32_at(take(4)?) as usize;
    let d = u32_at(take(4)?) as usize;
    let locations = take(8 * n)?
        .chunks_exact(8)
        .map(|c| (u32_at(&c[..4]), u32_at(&c[4..])))
        .collect();
    let tokens: Vec<f32> = take(4 * n * d)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if pos != bytes.len() {
        return Err(DecomposeError::Cache("trailing bytes".into()));
    }
    Ok(ObjectSample {
        record_id,
        tokens: Array2::from_shape_vec((n, d), tokens).expect("length matches shape"),
        label_id,
        locations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::TagAnnotation;
    use ndarray::{array, Array3};
    use proptest::prelude::*;

    fn freq(rows: &[(usize, &[(u32, usize)])]) -> TagFrequencies {
        rows.iter()
            .map(|(c, tags)| (*c, tags.iter().copied().collect()))
            .collect()
    }

    #[test]
    fn strict_maximum_wins() {
        let v = select_ind_tags(&freq(&[(0, &[(10, 10), (11, 3)])])).unwrap();
        assert_eq!(v.tag_of(0), Some(10));
        assert_eq!(v.class_of(10), Some(0));
    }

    #[test]
    fn tie_goes_to_lower_tag_id() {
        let v = select_ind_tags(&freq(&[(0, &[(5, 4), (3, 4)])])).unwrap();
        assert_eq!(v.tag_of(0), Some(3));
    }

    #[test]
    fn conflict_without_fallback_errors() {
        // class 1 takes tag 1 (a) with the higher count; class 0 has nothing left
        let err = select_ind_tags(&freq(&[(0, &[(1, 5)]), (1, &[(1, 9), (2, 8)])])).unwrap_err();
        assert!(matches!(err, DecomposeError::UnassignedClasses(ref c) if c == &vec![0]));
    }

    #[test]
    fn conflict_with_fallback_takes_next_best() {
        let v = select_ind_tags(&freq(&[(0, &[(1, 5), (3, 2)]), (1, &[(1, 9), (2, 8)])])).unwrap();
        assert_eq!(v.tag_of(1), Some(1));
        assert_eq!(v.tag_of(0), Some(3));
    }

    #[test]
    fn empty_class_is_reported() {
        let err = select_ind_tags(&freq(&[(0, &[(1, 2)]), (1, &[])])).unwrap_err();
        assert!(matches!(err, DecomposeError::UnassignedClasses(ref c) if c == &vec![1]));
    }

    /// Independent oracle: repeated full scans for the best remaining pair.
    fn greedy_oracle(f: &TagFrequencies, k: usize) -> Option<Vec<u32>> {
        let mut assigned: Vec<Option<u32>> = vec![None; k];
        loop {
            let mut best: Option<(usize, u32, usize)> = None;
            for c in 0..k {
                if assigned[c].is_some() {
                    continue;
                }
                for (&t, &n) in f.get(&c).into_iter().flatten() {
                    if n == 0 || assigned.contains(&Some(t)) {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some((bn, bt, bc)) => n > bn || (n == bn && (t < bt || (t == bt && c < bc))),
                    };
                    if better {
                        best = Some((n, t, c));
                    }
                }
            }
            match best {
                Some((_, t, c)) => assigned[c] = Some(t),
                None => break,
            }
        }
        assigned.into_iter().collect()
    }

    proptest! {
        #[test]
        fn greedy_matches_oracle(
            raw in proptest::collection::vec(proptest::collection::vec((0u32..4, 0usize..6), 0..4), 1..=3)
        ) {
            let f: TagFrequencies = raw.iter().enumerate()
                .map(|(c, tags)| (c, tags.iter().copied().collect()))
                .collect();
            let k = raw.len();
            match (select_ind_tags(&f), greedy_oracle(&f, k)) {
                (Ok(v), Some(expected)) => {
                    let got: Vec<u32> = (0..k).map(|c| v.tag_of(c).unwrap()).collect();
                    prop_assert_eq!(got, expected);
                }
                (Err(DecomposeError::UnassignedClasses(_)), None) => {}
                (got, expected) => prop_assert!(false, "{:?} vs {:?}", got, expected),
            }
        }
    }

    #[test]
    fn vocab_file_roundtrip_and_errors() {
        let v = IndVocab::new(vec![4, 9, 2]).unwrap();
        assert_eq!(v.to_text(), "0\t4\n1\t9\n2\t2\n");
        assert_eq!(IndVocab::parse(&v.to_text()).unwrap(), v);
        assert!(IndVocab::parse("0\t1\n2\t3\n").is_err());
        assert!(IndVocab::parse("0\t1\n1\t1\n").is_err());
        assert!(IndVocab::parse("0\tx\n").is_err());
    }

    #[test]
    fn normalization_examples() {
        let n = normalize_attention(&array![[2.0, 0.0], [1.0, 1.0]]);
        assert_eq!(n, array![[1.0, 0.0], [0.5, 0.5]]);
        assert_eq!(normalize_attention(&array![[3.0, 3.0], [3.0, 3.0]]), Array2::<f32>::zeros((2, 2)));
        let unit = array![[0.0, 0.25], [1.0, 0.5]];
        assert_eq!(normalize_attention(&unit), unit);
    }

    #[test]
    fn binarize_examples() {
        let a = array![[0.9, 0.2], [0.6, 0.4]];
        assert_eq!(binarize_mask(&a, 0.5), array![[true, false], [true, false]]);
        assert!(binarize_mask(&array![[0.5f32]], 0.5)[[0, 0]]);
        let n = normalize_attention(&array![[7.0, -2.0], [0.0, 1.0]]);
        assert!(binarize_mask(&n, 0.0).iter().all(|&b| b));
    }

    fn grid_record(tags: Vec<TagAnnotation>) -> FeatureRecord {
        let features = Array3::from_shape_fn((2, 2, 3), |(r, c, k)| (100 * r + 10 * c + k) as f32);
        FeatureRecord { id: "r".into(), features, tags, label_id: 0 }
    }

    fn tag(id: u32, att: Array2<f32>) -> TagAnnotation {
        TagAnnotation { tag_id: id, confidence: 0.8, attention: att }
    }

    #[test]
    fn token_selection_order_and_extremes() {
        let rec = grid_record(vec![]);
        let (tok, loc) = select_object_tokens(&rec, &array![[true, false], [true, false]]);
        assert_eq!(loc, vec![(0, 0), (1, 0)]);
        assert_eq!(tok.row(1).to_vec(), vec![100.0, 101.0, 102.0]);
        let (tok, loc) = select_object_tokens(&rec, &Array2::from_elem((2, 2), false));
        assert_eq!((tok.nrows(), loc.len()), (0, 0));
        let (tok, _) = select_object_tokens(&rec, &Array2::from_elem((2, 2), true));
        assert_eq!(tok.into_raw_vec_and_offset().0, rec.features.iter().copied().collect::<Vec<_>>());
    }

    #[test]
    fn single_tag_decomposition() {
        let vocab = IndVocab::new(vec![5]).unwrap();
        let rec = grid_record(vec![tag(5, array![[4.0, 0.0], [4.0, 0.0]])]);
        let s = decompose_record(&rec, &vocab, &DecompositionConfig::default()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.locations, vec![(0, 0), (1, 0)]);
    }

    #[test]
    fn union_of_overlapping_masks() {
        let vocab = IndVocab::new(vec![5, 6]).unwrap();
        let rec = grid_record(vec![
            tag(5, array![[1.0, 1.0], [0.0, 0.0]]),
            tag(6, array![[0.0, 1.0], [1.0, 0.0]]),
        ]);
        let s = decompose_record(&rec, &vocab, &DecompositionConfig::default()).unwrap();
        assert_eq!(s.locations, vec![(0, 0), (0, 1), (1, 0)]);
    }

    #[test]
    fn non_ind_tags_give_none() {
        let vocab = IndVocab::new(vec![5]).unwrap();
        let rec = grid_record(vec![tag(8, array![[1.0, 0.0], [0.0, 0.0]])]);
        assert!(decompose_record(&rec, &vocab, &DecompositionConfig::default()).is_none());
        let flat = grid_record(vec![tag(5, Array2::from_elem((2, 2), 2.0))]);
        assert!(decompose_record(&flat, &vocab, &DecompositionConfig::default()).is_none());
    }

    #[test]
    fn cap_keeps_highest_attention_then_row_major() {
        let vocab = IndVocab::new(vec![5]).unwrap();
        let rec = grid_record(vec![tag(5, array![[0.6, 1.0], [0.6, 0.0]])]);
        let cfg = DecompositionConfig { tau: 0.5, max_tokens: 2, normalize: true };
        let s = decompose_record(&rec, &vocab, &cfg).unwrap();
        // (0,1) has the peak; (0,0) beats (1,0) on row-major order
        assert_eq!(s.locations, vec![(0, 0), (0, 1)]);
        assert_eq!(s.tokens.row(1).to_vec(), vec![10.0, 11.0, 12.0]);
    }

    #[test]
    fn sample_cache_roundtrip() {
        let vocab = IndVocab::new(vec![5]).unwrap();
        let rec = grid_record(vec![tag(5, array![[1.0, 0.0], [1.0, 1.0]])]);
        let s = decompose_record(&rec, &vocab, &DecompositionConfig::default()).unwrap();
        let bytes = encode_sample(&s);
        assert_eq!(&bytes[..4], b"TGOS");
        assert_eq!(decode_sample(&bytes).unwrap(), s);
        assert!(decode_sample(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn selection_monotone_in_tau(
            vals in proptest::collection::vec(-5.0f32..5.0, 16),
            t1 in 0.0f32..1.0,
            t2 in 0.0f32..1.0,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let att = Array2::from_shape_vec((4, 4), vals).unwrap();
            let features = Array3::from_shape_fn((4, 4, 2), |(r, c, k)| (r * 8 + c * 2 + k) as f32);
            let rec = FeatureRecord { id: "p".into(), features, tags: vec![tag(1, att)], label_id: 0 };
            let vocab = IndVocab::new(vec![1]).unwrap();
            let at = |tau| decompose_record(&rec, &vocab, &DecompositionConfig { tau, max_tokens: 256, normalize: true })
                .map(|s| s.locations.into_iter().collect::<BTreeSet<_>>())
                .unwrap_or_default();
            let (loose, strict) = (at(lo), at(hi));
            prop_assert!(strict.is_subset(&loose));
            if let Some(s) = decompose_record(&rec, &vocab, &DecompositionConfig { tau: lo, max_tokens: 256, normalize: true }) {
                for (i, &(r, c)) in s.locations.iter().enumerate() {
                    let src = rec.features.slice(ndarray::s![r as usize, c as usize, ..]);
                    prop_assert_eq!(s.tokens.row(i), src);
                }
            }
        }
    }
}
