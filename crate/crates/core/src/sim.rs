//! Synthetic tagging-model worlds with oracle ground truth.
//!
//! Every image is a feature grid: object cells carry their class prototype plus
//! noise, remaining cells carry one background ("nuisance") prototype shared
//! across in-distribution and OOD images. The simulated tagger emits one tag per
//! object with a rectangular attention map, may miss objects, may add the
//! background tag, and may name an OOD object after the closest IND class.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::store::{
    write_record, write_tag_names, FeatureRecord, Manifest, ManifestEntry, Split, StoreError, TagAnnotation,
    MANIFEST_FILE, NO_LABEL, VOCAB_FILE,
};

pub const GROUND_TRUTH_FILE: &str = "ground_truth.tsv";
pub const RECORD_DIR: &str = "records";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid world config: {0}")]
    Config(String),
    #[error("record {id}: cannot place {objects} objects on a {h}x{w} grid")]
    Geometry { id: String, objects: usize, h: usize, w: usize },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub k_ind: usize,
    pub k_ood: usize,
    pub n_nuisance: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    /// Prototype norm.
    pub separation: f64,
    /// Per-cell feature noise deviation.
    pub sigma: f64,
    /// Probability of flipping each attention cell.
    pub attention_noise: f64,
    pub tag_miss_rate: f64,
    /// Probability of also tagging the image background.
    pub false_tag_rate: f64,
    /// Probability that an OOD object is tagged as its closest IND class.
    pub ood_confusion_rate: f64,
    /// Probability that an IND image shows its class's usual background
    /// rather than a uniformly drawn one.
    pub background_affinity: f64,
    /// Appearance modes per object class, each its own prototype.
    pub modes_per_class: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub object_side_min: usize,
    pub object_side_max: usize,
    pub n_train: usize,
    pub n_test_ind: usize,
    pub n_test_ood: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            k_ind: 8,
            k_ood: 8,
            n_nuisance: 6,
            d: 32,
            h: 8,
            w: 8,
            separation: 4.0,
            sigma: 0.5,
            attention_noise: 0.05,
            tag_miss_rate: 0.02,
            false_tag_rate: 0.3,
            ood_confusion_rate: 0.8,
            background_affinity: 1.0,
            modes_per_class: 2,
            objects_min: 1,
            objects_max: 1,
            object_side_min: 2,
            object_side_max: 4,
            n_train: 2000,
            n_test_ind: 500,
            n_test_ood: 500,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            ("k_ind", self.k_ind),
            ("k_ood", self.k_ood),
            ("n_nuisance", self.n_nuisance),
            ("modes_per_class", self.modes_per_class),
            ("d", self.d),
            ("h", self.h),
            ("w", self.w),
            ("objects_min", self.objects_min),
            ("object_side_min", self.object_side_min),
            ("n_train", self.n_train),
            ("n_test_ind", self.n_test_ind),
            ("n_test_ood", self.n_test_ood),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(SimError::Config(format!("{name} must be positive")));
        }
        let rates = [
            ("attention_noise", self.attention_noise),
            ("tag_miss_rate", self.tag_miss_rate),
            ("false_tag_rate", self.false_tag_rate),
            ("ood_confusion_rate", self.ood_confusion_rate),
            ("background_affinity", self.background_affinity),
        ];
        if let Some((name, v)) = rates.iter().find(|(_, v)| !(0.0..=1.0).contains(v)) {
            return Err(SimError::Config(format!("{name} = {v} outside [0, 1]")));
        }
        if !(self.separation > 0.0) {
            return Err(SimError::Config("separation must be positive".into()));
        }
        if !(self.sigma >= 0.0) {
            return Err(SimError::Config("sigma must be non-negative".into()));
        }
        if self.objects_max < self.objects_min {
            return Err(SimError::Config("objects_max below objects_min".into()));
        }
        if self.object_side_max < self.object_side_min {
            return Err(SimError::Config("object_side_max below object_side_min".into()));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.k_ind + self.k_ood + self.n_nuisance
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Concept {
    Ind(usize),
    Ood(usize),
    Nuisance(usize),
}

/// Prototype banks and the tag id of every concept.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    /// Row `c·modes_per_class + m` is mode `m` of class `c`; likewise `ood`.
    pub ind: Array2<f64>,
    pub ood: Array2<f64>,
    pub nuisance: Array2<f64>,
    tags: BTreeMap<Concept, u32>,
    /// Closest IND class (best cosine over all mode pairs) of each OOD class.
    pub ood_nearest_ind: Vec<usize>,
}

fn prototypes(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Array2<f64> {
    let mut bank = Array2::from_shape_simple_fn((n, d), || <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng));
    for mut row in bank.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row.mapv_inplace(|v| v * scale / norm);
    }
    bank
}

/// Draws unit Gaussian directions scaled to `separation` and a shuffled tag
/// assignment.
pub fn make_world(cfg: &WorldConfig) -> Result<World, SimError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let m = cfg.modes_per_class;
    let ind = prototypes(&mut rng, cfg.k_ind * m, cfg.d, cfg.separation);
    let ood = prototypes(&mut rng, cfg.k_ood * m, cfg.d, cfg.separation);
    let nuisance = prototypes(&mut rng, cfg.n_nuisance, cfg.d, cfg.separation);
    let mut ids: Vec<u32> = (0..cfg.vocab_size() as u32).collect();
    ids.shuffle(&mut rng);
    let concepts = (0..cfg.k_ind)
        .map(Concept::Ind)
        .chain((0..cfg.k_ood).map(Concept::Ood))
        .chain((0..cfg.n_nuisance).map(Concept::Nuisance));
    let tags = concepts.zip(ids).collect();
    let ood_nearest_ind = (0..cfg.k_ood)
        .map(|j| {
            let mut best = (f64::NEG_INFINITY, 0);
            for o in ood.rows().into_iter().skip(j * m).take(m) {
                for (row, p) in ind.rows().into_iter().enumerate() {
                    let sim = o.dot(&p);
                    if sim > best.0 {
                        best = (sim, row / m);
                    }
                }
            }
            best.1
        })
        .collect();
    Ok(World { config: cfg.clone(), ind, ood, nuisance, tags, ood_nearest_ind })
}

impl World {
    pub fn tag(&self, concept: Concept) -> u32 {
        self.tags[&concept]
    }

    /// The nuisance that class `c` is usually photographed against.
    pub fn usual_background(&self, class: usize) -> usize {
        class % self.config.n_nuisance
    }

    pub fn concept_of(&self, tag: u32) -> Option<Concept> {
        self.tags.iter().find(|(_, &t)| t == tag).map(|(&c, _)| c)
    }

    /// Prototype of `mode` of an object class; nuisances have a single mode.
    pub fn prototype(&self, concept: Concept, mode: usize) -> ndarray::ArrayView1<'_, f64> {
        let m = self.config.modes_per_class;
        match concept {
            Concept::Ind(i) => self.ind.row(i * m + mode),
            Concept::Ood(i) => self.ood.row(i * m + mode),
            Concept::Nuisance(i) => self.nuisance.row(i),
        }
    }

    pub fn tag_names(&self) -> Vec<(u32, String)> {
        let mut names: Vec<(u32, String)> = self
            .tags
            .iter()
            .map(|(c, &t)| {
                let name = match c {
                    Concept::Ind(i) => format!("ind_{i}"),
                    Concept::Ood(i) => format!("ood_{i}"),
                    Concept::Nuisance(i) => format!("background_{i}"),
                };
                (t, name)
            })
            .collect();
        names.sort();
        names
    }
}

/// Inclusive cell rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

impl Rect {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.r0..=self.r1).contains(&r) && (self.c0..=self.c1).contains(&c)
    }

    pub fn area(&self) -> usize {
        (self.r1 - self.r0 + 1) * (self.c1 - self.c0 + 1)
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.r0..=self.r1).flat_map(move |r| (self.c0..=self.c1).map(move |c| (r, c)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTruth {
    pub concept: Concept,
    pub mode: usize,
    /// The object's own tag, whatever the simulated tagger emitted.
    pub tag_id: u32,
    pub region: Rect,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub record_id: String,
    pub objects: Vec<ObjectTruth>,
    pub background: usize,
}

impl GroundTruth {
    pub fn is_background(&self, r: usize, c: usize) -> bool {
        !self.objects.iter().any(|o| o.region.contains(r, c))
    }

    /// Row-major cells covered by objects matching `keep`.
    pub fn object_cells(&self, keep: impl Fn(&ObjectTruth) -> bool) -> Vec<(u32, u32)> {
        let mut cells: Vec<(u32, u32)> = self
            .objects
            .iter()
            .filter(|o| keep(o))
            .flat_map(|o| o.region.cells().map(|(r, c)| (r as u32, c as u32)).collect::<Vec<_>>())
            .collect();
        cells.sort_unstable();
        cells.dedup();
        cells
    }
}

/// What to render: object concepts and the split the record belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordSpec {
    pub id: String,
    pub split: Split,
    pub objects: Vec<Concept>,
    pub label_id: i32,
}

fn place_objects(
    spec: &RecordSpec,
    cfg: &WorldConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Rect>, SimError> {
    let (h, w) = (cfg.h, cfg.w);
    let geometry = || SimError::Geometry { id: spec.id.clone(), objects: spec.objects.len(), h, w };
    if spec.objects.len() > h * w {
        return Err(geometry());
    }
    let mut taken = Array2::from_elem((h, w), false);
    let mut rects = Vec::with_capacity(spec.objects.len());
    for i in 0..spec.objects.len() {
        let mut rh = rng.random_range(cfg.object_side_min..=cfg.object_side_max).min(h);
        let mut rw = rng.random_range(cfg.object_side_min..=cfg.object_side_max).min(w);
        // leave at least one free cell for every object still to come
        let budget = h * w - rects.iter().map(Rect::area).sum::<usize>() - (spec.objects.len() - 1 - i);
        while rh * rw > budget {
            if rh >= rw {
                rh -= 1;
            } else {
                rw -= 1;
            }
        }
        let placed = loop {
            let mut found = None;
            for _ in 0..64 {
                let r0 = rng.random_range(0..=h - rh);
                let c0 = rng.random_range(0..=w - rw);
                let rect = Rect { r0, c0, r1: r0 + rh - 1, c1: c0 + rw - 1 };
                if rect.cells().all(|rc| !taken[rc]) {
                    found = Some(rect);
                    break;
                }
            }
            if found.is_some() {
                break found;
            }
            if rh == 1 && rw == 1 {
                // random probing failed; fall back to the first free cell
                break taken
                    .indexed_iter()
                    .find(|(_, &t)| !t)
                    .map(|((r, c), _)| Rect { r0: r, c0: c, r1: r, c1: c });
            }
            if rh >= rw {
                rh -= 1;
            } else {
                rw -= 1;
            }
        };
        let rect = placed.ok_or_else(geometry)?;
        rect.cells().for_each(|rc| taken[rc] = true);
        rects.push(rect);
    }
    Ok(rects)
}

fn jittered_mask(
    on: impl Fn(usize, usize) -> bool,
    h: usize,
    w: usize,
    flip: f64,
    rng: &mut ChaCha8Rng,
) -> Array2<f32> {
    Array2::from_shape_fn((h, w), |(r, c)| {
        let v = on(r, c);
        let flipped = flip > 0.0 && rng.random::<f64>() < flip;
        if v != flipped { 1.0 } else { 0.0 }
    })
}

fn confidence(region_cells: usize, total_cells: usize, rng: &mut ChaCha8Rng) -> f32 {
    let noise: f64 = Normal::new(0.0, 0.05).unwrap().sample(rng);
    (0.5 + 0.5 * region_cells as f64 / total_cells as f64 + noise).clamp(0.0, 1.0) as f32
}

/// Renders one image's features, tags and attention maps.
pub fn render_image_record(
    world: &World,
    spec: &RecordSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(FeatureRecord, GroundTruth), SimError> {
    let cfg = &world.config;
    let (h, w, d) = (cfg.h, cfg.w, cfg.d);
    let rects = place_objects(spec, cfg, rng)?;
    let background = match spec.objects.first() {
        Some(&Concept::Ind(c)) if rng.random::<f64>() < cfg.background_affinity => world.usual_background(c),
        _ => rng.random_range(0..cfg.n_nuisance),
    };
    let modes: Vec<usize> = spec.objects.iter().map(|_| rng.random_range(0..cfg.modes_per_class)).collect();
    let noise = Normal::new(0.0, cfg.sigma.max(0.0)).unwrap();

    let owner = |r: usize, c: usize| rects.iter().position(|rect| rect.contains(r, c));
    let mut features = Array3::<f32>::zeros((h, w, d));
    for r in 0..h {
        for c in 0..w {
            let proto = match owner(r, c) {
                Some(i) => world.prototype(spec.objects[i], modes[i]),
                None => world.prototype(Concept::Nuisance(background), 0),
            };
            for k in 0..d {
                let eps = if cfg.sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                features[[r, c, k]] = (proto[k] + eps) as f32;
            }
        }
    }

    // emitted tag -> (binary map, region cells); objects sharing a tag merge
    let mut emitted: Vec<(u32, Array2<f32>, usize)> = Vec::new();
    for (i, (&concept, rect)) in spec.objects.iter().zip(&rects).enumerate() {
        if rng.random::<f64>() < cfg.tag_miss_rate {
            continue;
        }
        let tag = match concept {
            Concept::Ood(j) if rng.random::<f64>() < cfg.ood_confusion_rate => {
                world.tag(Concept::Ind(world.ood_nearest_ind[j]))
            }
            other => world.tag(other),
        };
        let map = jittered_mask(|r, c| owner(r, c) == Some(i), h, w, cfg.attention_noise, rng);
        match emitted.iter_mut().find(|(t, _, _)| *t == tag) {
            Some((_, existing, cells)) => {
                existing.zip_mut_with(&map, |a, &b| *a = a.max(b));
                *cells += rect.area();
            }
            None => emitted.push((tag, map, rect.area())),
        }
    }
    if rng.random::<f64>() < cfg.false_tag_rate {
        let tag = world.tag(Concept::Nuisance(background));
        let bg_cells = h * w - rects.iter().map(Rect::area).sum::<usize>();
        if bg_cells > 0 {
            let map = jittered_mask(|r, c| owner(r, c).is_none(), h, w, cfg.attention_noise, rng);
            emitted.push((tag, map, bg_cells));
        }
    }

    let tags = emitted
        .into_iter()
        .map(|(tag_id, map, cells)| {
            let scale = rng.random_range(0.5f32..4.0);
            TagAnnotation {
                tag_id,
                confidence: confidence(cells, h * w, rng),
                attention: map.mapv(|v| v * scale),
            }
        })
        .collect();

    let record = FeatureRecord { id: spec.id.clone(), features, tags, label_id: spec.label_id };
    let truth = GroundTruth {
        record_id: spec.id.clone(),
        objects: spec
            .objects
            .iter()
            .zip(&rects)
            .zip(&modes)
            .map(|((&concept, &region), &mode)| ObjectTruth { concept, mode, tag_id: world.tag(concept), region })
            .collect(),
        background,
    };
    Ok((record, truth))
}

/// Per-record seed so records can be produced in any order.
pub fn record_seed(seed: u64, split: Split, index: usize) -> u64 {
    let mut z = seed
        .wrapping_add((split as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    // splitmix64 finaliser
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn record_id(split: Split, index: usize) -> String {
    let prefix = match split {
        Split::Train => "train",
        Split::TestInd => "ind",
        Split::TestOod => "ood",
    };
    format!("{prefix}_{index:05}")
}

/// Picks the objects of record `index` in `split` and renders it.
pub fn sample_record(world: &World, split: Split, index: usize) -> Result<(FeatureRecord, GroundTruth), SimError> {
    let cfg = &world.config;
    let mut rng = ChaCha8Rng::seed_from_u64(record_seed(cfg.seed, split, index));
    let n_obj = rng.random_range(cfg.objects_min..=cfg.objects_max);
    let objects: Vec<Concept> = (0..n_obj)
        .map(|_| match split {
            Split::TestOod => Concept::Ood(rng.random_range(0..cfg.k_ood)),
            _ => Concept::Ind(rng.random_range(0..cfg.k_ind)),
        })
        .collect();
    let label_id = match objects[0] {
        Concept::Ind(c) => c as i32,
        _ => NO_LABEL,
    };
    let spec = RecordSpec { id: record_id(split, index), split, objects, label_id };
    render_image_record(world, &spec, &mut rng)
}

pub fn split_size(cfg: &WorldConfig, split: Split) -> usize {
    match split {
        Split::Train => cfg.n_train,
        Split::TestInd => cfg.n_test_ind,
        Split::TestOod => cfg.n_test_ood,
    }
}

/// `id TAB object_index TAB tag_id TAB r0,c0,r1,c1` per object.
pub fn format_ground_truth(truths: &[GroundTruth]) -> String {
    let mut out = String::new();
    for t in truths {
        for (i, o) in t.objects.iter().enumerate() {
            let r = o.region;
            let _ = writeln!(out, "{}\t{i}\t{}\t{},{},{},{}", t.record_id, o.tag_id, r.r0, r.c0, r.r1, r.c1);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub world: World,
    pub manifest: Manifest,
    pub truths: Vec<GroundTruth>,
}

/// Writes records, manifest, tag-name vocabulary and ground truth under `root`.
pub fn generate_dataset(cfg: &WorldConfig, root: &Path) -> Result<GeneratedDataset, SimError> {
    let world = make_world(cfg)?;
    let io = |p: &Path, e| SimError::Store(StoreError::io(p, e));
    let records_dir = root.join(RECORD_DIR);
    fs::create_dir_all(&records_dir).map_err(|e| io(&records_dir, e))?;
    let mut entries = Vec::new();
    let mut truths = Vec::new();
    for split in Split::ALL {
        for index in 0..split_size(cfg, split) {
            let (record, truth) = sample_record(&world, split, index)?;
            let rel = Path::new(RECORD_DIR).join(format!("{}.tgr", record.id));
            write_record(&record, &root.join(&rel))?;
            entries.push(ManifestEntry { id: record.id.clone(), split, label_id: record.label_id, path: rel });
            truths.push(truth);
        }
    }
    let manifest = Manifest { vocab_size: cfg.vocab_size() as u32, entries };
    manifest.save(&root.join(MANIFEST_FILE))?;
    write_tag_names(&world.tag_names(), &root.join(VOCAB_FILE))?;
    let gt_path = root.join(GROUND_TRUTH_FILE);
    fs::write(&gt_path, format_ground_truth(&truths)).map_err(|e| io(&gt_path, e))?;
    Ok(GeneratedDataset { world, manifest, truths })
}

/// Index of the nearest row of `bank` to `v`.
pub fn nearest_prototype(bank: &Array2<f64>, v: &Array1<f64>) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, p) in bank.rows().into_iter().enumerate() {
        let d: f64 = p.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decompose::{decompose_record, DecompositionConfig, IndVocab};
    use crate::store::{read_record, validate_store};

    fn small() -> WorldConfig {
        WorldConfig { k_ind: 4, k_ood: 3, n_nuisance: 2, d: 8, h: 6, w: 6, n_train: 20, n_test_ind: 5, n_test_ood: 5, seed: 3, ..Default::default() }
    }

    fn ind_vocab(world: &World) -> IndVocab {
        IndVocab::new((0..world.config.k_ind).map(|c| world.tag(Concept::Ind(c))).collect()).unwrap()
    }

    #[test]
    fn world_is_seeded_and_sized() {
        let a = make_world(&small()).unwrap();
        assert_eq!(a, make_world(&small()).unwrap());
        assert_ne!(a.ind, make_world(&WorldConfig { seed: 4, ..small() }).unwrap().ind);
        let ind_tags = a.tag_names().iter().filter(|(_, n)| n.starts_with("ind_")).count();
        assert_eq!(ind_tags, 4);
        assert_eq!(a.tag_names().len(), 9);
        for bank in [&a.ind, &a.ood, &a.nuisance] {
            for row in bank.rows() {
                assert!((row.dot(&row).sqrt() - 4.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(make_world(&WorldConfig { k_ind: 0, ..small() }).is_err());
        assert!(make_world(&WorldConfig { tag_miss_rate: 1.5, ..small() }).is_err());
        assert!(make_world(&WorldConfig { separation: 0.0, ..small() }).is_err());
        assert!(make_world(&WorldConfig { objects_min: 3, objects_max: 2, ..small() }).is_err());
    }

    #[test]
    fn noiseless_attention_selects_object_cells() {
        let cfg = WorldConfig { attention_noise: 0.0, tag_miss_rate: 0.0, ..small() };
        let world = make_world(&cfg).unwrap();
        let vocab = ind_vocab(&world);
        for i in 0..20 {
            let (rec, gt) = sample_record(&world, Split::Train, i).unwrap();
            let s = decompose_record(&rec, &vocab, &DecompositionConfig::default()).unwrap();
            assert_eq!(s.locations, gt.object_cells(|_| true));
        }
    }

    #[test]
    fn full_miss_rate_drops_object_tags() {
        let cfg = WorldConfig { tag_miss_rate: 1.0, false_tag_rate: 1.0, ..small() };
        let world = make_world(&cfg).unwrap();
        for i in 0..10 {
            let (rec, gt) = sample_record(&world, Split::TestInd, i).unwrap();
            for o in &gt.objects {
                assert!(rec.tag(o.tag_id).is_none());
            }
            assert_eq!(rec.tags.len(), 1);
            assert_eq!(world.concept_of(rec.tags[0].tag_id), Some(Concept::Nuisance(gt.background)));
        }
    }

    #[test]
    fn zero_sigma_reproduces_prototypes() {
        let cfg = WorldConfig { sigma: 0.0, separation: 50.0, modes_per_class: 2, ..small() };
        let world = make_world(&cfg).unwrap();
        let (rec, gt) = sample_record(&world, Split::Train, 0).unwrap();
        for o in &gt.objects {
            for (r, c) in o.region.cells() {
                for k in 0..cfg.d {
                    assert_eq!(rec.features[[r, c, k]], world.prototype(o.concept, o.mode)[k] as f32);
                }
            }
        }
    }

    #[test]
    fn confusion_renames_ood_objects() {
        let cfg = WorldConfig { ood_confusion_rate: 1.0, tag_miss_rate: 0.0, ..small() };
        let world = make_world(&cfg).unwrap();
        let (rec, gt) = sample_record(&world, Split::TestOod, 0).unwrap();
        let Concept::Ood(j) = gt.objects[0].concept else { panic!() };
        assert!(rec.tag(world.tag(Concept::Ind(world.ood_nearest_ind[j]))).is_some());
        assert_eq!(rec.label_id, NO_LABEL);
    }

    #[test]
    fn background_affinity_bounds() {
        let world = make_world(&WorldConfig { background_affinity: 1.0, ..small() }).unwrap();
        for i in 0..20 {
            let (rec, gt) = sample_record(&world, Split::Train, i).unwrap();
            assert_eq!(gt.background, world.usual_background(rec.label_id as usize));
        }
        // OOD backgrounds stay uniform, so all nuisances appear
        let seen: std::collections::BTreeSet<usize> =
            (0..40).map(|i| sample_record(&world, Split::TestOod, i).unwrap().1.background).collect();
        assert_eq!(seen.len(), world.config.n_nuisance);
    }

    #[test]
    fn tau_zero_pulls_in_shared_background() {
        let world = make_world(&small()).unwrap();
        let vocab = ind_vocab(&world);
        let cfg = DecompositionConfig { tau: 0.0, ..Default::default() };
        let mut used = [std::collections::BTreeSet::new(), std::collections::BTreeSet::new()];
        for (slot, split) in [Split::TestInd, Split::TestOod].into_iter().enumerate() {
            for i in 0..30 {
                let (rec, gt) = sample_record(&world, split, i).unwrap();
                if let Some(s) = decompose_record(&rec, &vocab, &cfg) {
                    if s.locations.iter().any(|&(r, c)| gt.is_background(r as usize, c as usize)) {
                        used[slot].insert(gt.background);
                    }
                }
            }
        }
        assert!(used[0].intersection(&used[1]).next().is_some());
    }

    #[test]
    fn confidence_and_attention_ranges() {
        let world = make_world(&small()).unwrap();
        for i in 0..10 {
            let (rec, _) = sample_record(&world, Split::Train, i).unwrap();
            rec.validate().unwrap();
            for t in &rec.tags {
                assert!((0.0..=1.0).contains(&t.confidence));
                assert!(t.attention.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn impossible_geometry_errors() {
        let cfg = WorldConfig { h: 2, w: 2, objects_min: 5, objects_max: 5, ..small() };
        let world = make_world(&cfg).unwrap();
        assert!(matches!(sample_record(&world, Split::Train, 0), Err(SimError::Geometry { .. })));
        // a full grid of single cells still fits
        let cfg = WorldConfig { h: 2, w: 2, objects_min: 4, objects_max: 4, object_side_min: 1, object_side_max: 2, ..small() };
        let world = make_world(&cfg).unwrap();
        let (_, gt) = sample_record(&world, Split::Train, 0).unwrap();
        assert_eq!(gt.object_cells(|_| true).len(), 4);
    }

    #[test]
    fn dataset_is_deterministic_and_valid() {
        let cfg = WorldConfig { n_train: 8, n_test_ind: 4, n_test_ood: 4, ..small() };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ga = generate_dataset(&cfg, a.path()).unwrap();
        generate_dataset(&cfg, b.path()).unwrap();
        assert_eq!(ga.manifest.entries.len(), 16);
        assert!(validate_store(&ga.manifest, a.path()).passed());
        for name in [MANIFEST_FILE, VOCAB_FILE, GROUND_TRUTH_FILE] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
        for e in &ga.manifest.entries {
            assert_eq!(fs::read(a.path().join(&e.path)).unwrap(), fs::read(b.path().join(&e.path)).unwrap());
            let rec = read_record(&a.path().join(&e.path)).unwrap();
            assert_eq!(rec.id, e.id);
        }
        let gt = fs::read_to_string(a.path().join(GROUND_TRUTH_FILE)).unwrap();
        let first = gt.lines().next().unwrap();
        assert_eq!(first.split('\t').count(), 4);
        assert!(first.starts_with("train_00000\t0\t"));
    }

    #[test]
    fn nearest_prototype_recovers_object_classes() {
        let cfg = WorldConfig { sigma: 0.05, attention_noise: 0.0, modes_per_class: 3, ..small() };
        let world = make_world(&cfg).unwrap();
        for split in [Split::Train, Split::TestOod] {
            let bank = if split == Split::Train { &world.ind } else { &world.ood };
            for i in 0..20 {
                let (rec, gt) = sample_record(&world, split, i).unwrap();
                for o in &gt.objects {
                    let class = match o.concept { Concept::Ind(c) | Concept::Ood(c) => c, _ => unreachable!() };
                    let expected = class * cfg.modes_per_class + o.mode;
                    for (r, c) in o.region.cells() {
                        let v = Array1::from_shape_fn(cfg.d, |k| rec.features[[r, c, k]] as f64);
                        assert_eq!(nearest_prototype(bank, &v), expected);
                    }
                }
            }
        }
    }

    #[test]
    fn single_object_labels_match_class() {
        let world = make_world(&small()).unwrap();
        for i in 0..20 {
            let (rec, gt) = sample_record(&world, Split::Train, i).unwrap();
            assert_eq!(gt.objects.len(), 1);
            assert_eq!(Concept::Ind(rec.label_id as usize), gt.objects[0].concept);
        }
    }
}
